"""Tiny anchor-free dense detector with one swappable pooling slot.

Fixed topology: stem conv (stride 2) -> pooling slot (3x3, stride 2) ->
three conv-relu stages (exactly one of them stride 2) -> 1x1 conv head.
The head emits, per grid cell: an objectness logit, class logits and
four box distances (left, top, right, bottom) in pixels from the cell
center.  The pooling slot is max, avg or mask pooling; it never carries
parameters, so all variants share parameter counts and can be trained
from identical seeds for head-to-head comparison.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import maskpool, nn
from .errors import ConfigurationError, TrainingDiverged
from .metrics import iou as box_iou

log = logging.getLogger(__name__)

POOLING_VARIANTS = ("max", "avg", "mask")
POOL_PLACEMENTS = ("post_stem", "post_block1")

CHECKPOINT_MAGIC = b"MPLB"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    pooling_variant: str = "max"
    channels: tuple = (16, 32, 64, 64)  # stem + three stages
    image_size: int = 128
    grid_stride: int = 8
    num_classes: int = 3
    score_threshold: float = 0.01
    nms_iou: float = 0.5
    pool_placement: str = "post_stem"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.pooling_variant not in POOLING_VARIANTS:
            raise ConfigurationError(f"pooling_variant must be one of {POOLING_VARIANTS}")
        if self.pool_placement not in POOL_PLACEMENTS:
            raise ConfigurationError(f"pool_placement must be one of {POOL_PLACEMENTS}")
        if len(self.channels) != 4:
            raise ConfigurationError("channels must list 4 widths (stem + 3 stages)")
        if self.image_size % self.grid_stride != 0:
            raise ConfigurationError("image_size must be divisible by grid_stride")
        # stem (2) * pooling slot (2) * one stride-2 stage = 8
        if self.grid_stride != 8:
            raise ConfigurationError("fixed topology produces grid_stride 8")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.grid_stride

    @property
    def head_channels(self) -> int:
        return 1 + self.num_classes + 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DetHeadOutput:
    objectness: np.ndarray    # (n, 1, g, g)
    class_logits: np.ndarray  # (n, C, g, g)
    box_reg: np.ndarray       # (n, 4, g, g)

    @classmethod
    def from_raw(cls, raw: np.ndarray, num_classes: int) -> "DetHeadOutput":
        return cls(objectness=raw[:, :1],
                   class_logits=raw[:, 1:1 + num_classes],
                   box_reg=raw[:, 1 + num_classes:])


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple
    cell: int = 0  # emitting grid cell, used as the deterministic tie-breaker


@dataclass
class Model:
    cfg: ModelConfig
    layers: dict  # name -> LayerParams

    def params(self):
        return [self.layers[name] for name in self.layer_order()]

    def layer_order(self):
        return ("stem", "stage1", "stage2", "stage3", "head")


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict  # "<layer>.weight" / "<layer>.bias" -> float32 array
    seed: int
    iterations: int


# ---------------------------------------------------------------------------
# model construction and forward/backward
# ---------------------------------------------------------------------------

OBJECTNESS_PRIOR_LOGIT = -4.0  # positives are rare (~1% of cells)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0)))
    c0, c1, c2, c3 = cfg.channels
    layers = {
        "stem": nn.LayerParams.conv(3, c0, 3, rng),
        "stage1": nn.LayerParams.conv(c0, c1, 3, rng),
        "stage2": nn.LayerParams.conv(c1, c2, 3, rng),
        "stage3": nn.LayerParams.conv(c2, c3, 3, rng),
        "head": nn.LayerParams.conv(c3, cfg.head_channels, 1, rng),
    }
    # zero-init head: outputs start at the bias priors, and the early
    # (large, pixel-scale) box-regression gradients cannot shock the trunk
    layers["head"].weights[...] = 0.0
    layers["head"].bias[0] = OBJECTNESS_PRIOR_LOGIT
    return Model(cfg=cfg, layers=layers)


def _plan(cfg: ModelConfig, bg_mode: str | None):
    """Ordered op list; bg_mode is None, 'slot' (pooling-slot input only) or 'all'."""
    plan = [("conv", "stem", 2, 1), ("relu",)]
    if bg_mode == "all":
        plan.append(("bg", 2))
    if cfg.pool_placement == "post_block1":
        plan += [("conv", "stage1", 1, 1), ("relu",)]
        if bg_mode == "all":
            plan.append(("bg", 2))
    if bg_mode == "slot":
        plan.append(("bg", 2))
    plan.append(("pool", 2))
    if bg_mode == "all":
        plan.append(("bg", 4))
    if cfg.pool_placement == "post_stem":
        plan += [("conv", "stage1", 2, 1), ("relu",)]
    else:
        plan += [("conv", "stage2", 2, 1), ("relu",)]
    if bg_mode == "all":
        plan.append(("bg", 8))
    if cfg.pool_placement == "post_stem":
        plan += [("conv", "stage2", 1, 1), ("relu",)]
    else:
        plan += [("conv", "stage3", 1, 1), ("relu",)]
    if bg_mode == "all":
        plan.append(("bg", 8))
    if cfg.pool_placement == "post_stem":
        plan += [("conv", "stage3", 1, 1), ("relu",)]
        if bg_mode == "all":
            plan.append(("bg", 8))
    plan.append(("conv", "head", 1, 0))
    # box channels carry pixel distances (~stride..4*stride); scaling by the
    # grid stride lets the conv operate at O(1) activations
    plan.append(("boxscale",))
    return plan


def required_mask_strides(cfg: ModelConfig, bg_mode: str | None = None) -> set:
    strides = set()
    if cfg.pooling_variant == "mask":
        strides.add(2)
    for op in _plan(cfg, bg_mode):
        if op[0] == "bg":
            strides.add(op[1])
    return strides


def stack_mask_level(pyramids, stride: int) -> np.ndarray:
    return np.stack([p.at_stride(stride) for p in pyramids])


def _run_forward(model: Model, x: np.ndarray, mask_levels: dict | None,
                 bg_weight: float, bg_mode: str | None, keep: bool):
    cache = [] if keep else None
    cur = nn.as_nchw(x)
    for op in _plan(model.cfg, bg_mode):
        kind = op[0]
        if kind == "conv":
            _, name, stride, padding = op
            if keep:
                cache.append((op, cur))
            cur = nn.conv2d_forward(cur, model.layers[name], stride, padding)
        elif kind == "relu":
            if keep:
                cache.append((op, cur))
            cur = nn.relu_forward(cur)
        elif kind == "bg":
            m = mask_levels[op[1]]
            if keep:
                cache.append((op, None))
            cur = maskpool.bg_scale(cur, m, bg_weight)
        elif kind == "boxscale":
            if keep:
                cache.append((op, None))
            cur = cur.copy()
            cur[:, 1 + model.cfg.num_classes:] *= model.cfg.grid_stride
        elif kind == "pool":
            variant = model.cfg.pooling_variant
            if variant == "max":
                y, argmax = nn.maxpool2d_forward(cur, 3, 2, 1)
                if keep:
                    cache.append((op, (cur, argmax)))
            elif variant == "avg":
                y = nn.avgpool2d_forward(cur, 3, 2, 1)
                if keep:
                    cache.append((op, cur))
            else:
                y, record = maskpool.maskpool2d_forward(cur, mask_levels[2], 3, 2, 1)
                if keep:
                    cache.append((op, (cur, record)))
            cur = y
    return cur, cache


def _run_backward(model: Model, cache, grad: np.ndarray,
                  mask_levels: dict | None, bg_weight: float) -> None:
    for op, saved in reversed(cache):
        kind = op[0]
        if kind == "conv":
            _, name, stride, padding = op
            grad = nn.conv2d_backward(saved, model.layers[name], grad, stride, padding)
        elif kind == "relu":
            grad = nn.relu_backward(saved, grad)
        elif kind == "bg":
            grad = maskpool.bg_scale(grad, mask_levels[op[1]], bg_weight)
        elif kind == "boxscale":
            grad = grad.copy()
            grad[:, 1 + model.cfg.num_classes:] *= model.cfg.grid_stride
        elif kind == "pool":
            variant = model.cfg.pooling_variant
            if variant == "max":
                x, argmax = saved
                grad = nn.maxpool2d_backward(x, argmax, grad, 3, 2, 1)
            elif variant == "avg":
                grad = nn.avgpool2d_backward(saved, grad, 3, 2, 1)
            else:
                x, record = saved
                grad = maskpool.maskpool2d_backward(x, mask_levels[2], grad, record)


def _mask_levels(model: Model, pyramids, bg_mode: str | None) -> dict | None:
    strides = required_mask_strides(model.cfg, bg_mode)
    if not strides:
        return None
    if pyramids is None:
        raise ConfigurationError(
            f"masks required for pooling variant {model.cfg.pooling_variant!r} / background scaling")
    return {s: stack_mask_level(pyramids, s) for s in strides}


def forward(model: Model, image_batch: np.ndarray, masks=None,
            bg_weight: float = 1.0, perturb_all_stages: bool = False) -> DetHeadOutput:
    """Inference forward pass.  ``masks`` is a list of MaskPyramid (one per
    image) and is required iff the variant is 'mask' or bg_weight != 1."""
    bg_mode = None
    if bg_weight != 1.0:
        bg_mode = "all" if perturb_all_stages else "slot"
    levels = _mask_levels(model, masks, bg_mode)
    raw, _ = _run_forward(model, image_batch, levels, bg_weight, bg_mode, keep=False)
    return DetHeadOutput.from_raw(raw, model.cfg.num_classes)


def images_to_tensor(images: np.ndarray) -> np.ndarray:
    """(n, h, w, 3) uint8 -> (n, 3, h, w) float32 in [-0.5, 0.5]."""
    x = np.asarray(images, dtype=np.float32) / 255.0 - 0.5
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# targets, loss
# ---------------------------------------------------------------------------

@dataclass
class Targets:
    objectness: np.ndarray  # (n, 1, g, g) float32
    class_ids: np.ndarray   # (n, g, g) int64
    boxes: np.ndarray       # (n, 4, g, g) float32: l, t, r, b distances
    positive: np.ndarray    # (n, g, g) bool


def assign_targets(batch_instances, grid: int, stride: int) -> Targets:
    """Center-cell assignment; collisions go to the smaller-area instance."""
    n = len(batch_instances)
    obj = np.zeros((n, 1, grid, grid), dtype=np.float32)
    cls = np.zeros((n, grid, grid), dtype=np.int64)
    box = np.zeros((n, 4, grid, grid), dtype=np.float32)
    pos = np.zeros((n, grid, grid), dtype=bool)
    area = np.full((n, grid, grid), np.inf)
    for i, instances in enumerate(batch_instances):
        for inst in instances:
            x0, y0, x1, y1 = (float(v) for v in inst.box)
            cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
            col = min(int(cx // stride), grid - 1)
            row = min(int(cy // stride), grid - 1)
            a = (x1 - x0) * (y1 - y0)
            if a >= area[i, row, col]:
                continue
            area[i, row, col] = a
            ccx, ccy = (col + 0.5) * stride, (row + 0.5) * stride
            obj[i, 0, row, col] = 1.0
            cls[i, row, col] = int(inst.class_id)
            box[i, :, row, col] = (ccx - x0, ccy - y0, x1 - ccx, y1 - ccy)
            pos[i, row, col] = True
    return Targets(obj, cls, box, pos)


def compute_loss(head: DetHeadOutput, targets: Targets):
    """bce(objectness) + ce(class | positives) + smooth_l1(box | positives), unit weights.

    Returns (loss, grad wrt the raw head tensor)."""
    l_obj, g_obj = nn.loss_bce_logits(head.objectness, targets.objectness)
    l_cls, g_cls = nn.loss_softmax_ce(head.class_logits, targets.class_ids, targets.positive)
    l_box, g_box = nn.loss_smooth_l1(head.box_reg, targets.boxes, targets.positive, beta=1.0)
    grad = np.concatenate([g_obj, g_cls, g_box], axis=1)
    return l_obj + l_cls + l_box, grad


# ---------------------------------------------------------------------------
# decode + NMS
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def decode(head: DetHeadOutput, cfg: ModelConfig):
    """Per image: every (cell, class) with sigmoid(obj)*softmax(class) above the
    score threshold emits a box; degenerate (zero-extent) boxes are dropped."""
    n, num_classes, g, _ = head.class_logits.shape
    stride = cfg.grid_stride
    obj = _sigmoid(head.objectness)[:, 0]
    z = head.class_logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    scores = obj[:, None] * probs  # (n, C, g, g)
    out = []
    size = float(cfg.image_size)
    for i in range(n):
        dets = []
        for c, row, col in np.argwhere(scores[i] >= cfg.score_threshold):
            l, t, r, b = np.maximum(head.box_reg[i, :, row, col], 0.0)
            ccx, ccy = (col + 0.5) * stride, (row + 0.5) * stride
            x0, y0 = max(ccx - l, 0.0), max(ccy - t, 0.0)
            x1, y1 = min(ccx + r, size), min(ccy + b, size)
            if x1 <= x0 or y1 <= y0:
                continue
            dets.append(Detection(class_id=int(c), score=float(scores[i, c, row, col]),
                                  box=(float(x0), float(y0), float(x1), float(y1)),
                                  cell=int(row) * g + int(col)))
        out.append(dets)
    return out


def nms(dets, iou_thresh: float):
    """Greedy per-class NMS by descending score; score ties broken by lower cell index."""
    kept = []
    by_class = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for c in sorted(by_class):
        group = sorted(by_class[c], key=lambda d: (-d.score, d.cell))
        chosen = []
        for d in group:
            if all(box_iou(d.box, k.box) < iou_thresh for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return sorted(kept, key=lambda d: (-d.score, d.cell, d.class_id))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _first_bad_layer(model: Model) -> str:
    for name in model.layer_order():
        p = model.layers[name]
        for arr in (p.weights, p.bias, p.grad_weights, p.grad_bias):
            if not np.isfinite(arr).all():
                return name
    return "loss"


def train(dataset, model_cfg: ModelConfig, opt_cfg: nn.OptimizerConfig,
          iterations: int, batch_size: int = 8, seed: int = 0,
          log_every: int = 50) -> Checkpoint:
    """Deterministic SGD training; ``dataset`` is a DatasetManifest or a list
    of ImageRecord.  Returns a checkpoint after ``iterations`` steps."""
    records = dataset.load_all() if hasattr(dataset, "load_all") else list(dataset)
    if not records:
        raise ConfigurationError("training dataset is empty")
    images = np.stack([r.image for r in records])
    instances = [r.instances for r in records]
    strides = required_mask_strides(model_cfg)
    pyramids = None
    if strides:
        pyramids = [maskpool.build_pyramid(r.fg_mask, strides) for r in records]

    model = build_model(model_cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 1)))
    grid = model_cfg.grid_size
    batch_size = min(int(batch_size), len(records))
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    for it in range(int(iterations)):
        if cursor + batch_size > order.size:
            order = rng.permutation(len(records))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        x = images_to_tensor(images[idx])
        levels = {s: np.stack([pyramids[i].at_stride(s) for i in idx]) for s in strides} or None
        raw, cache = _run_forward(model, x, levels, 1.0, None, keep=True)
        head = DetHeadOutput.from_raw(raw, model_cfg.num_classes)
        targets = assign_targets([instances[i] for i in idx], grid, model_cfg.grid_stride)
        loss, grad_raw = compute_loss(head, targets)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, _first_bad_layer(model))
        _run_backward(model, cache, grad_raw, levels, 1.0)
        nn.sgd_step(model.params(), opt_cfg)
        if log_every and (it % log_every == 0 or it + 1 == iterations):
            log.info("iter %d/%d loss %.5f", it, iterations, loss)
    return checkpoint_from_model(model, seed=seed, iterations=int(iterations))


# ---------------------------------------------------------------------------
# compute accounting
# ---------------------------------------------------------------------------

def count_params_flops(model: Model, image_size: int | None = None):
    """Analytic parameter and multiply-add counts for a single image.

    Pooling carries no parameters; avg and mask pooling are charged one add
    per valid window pixel plus one divide per window, max pooling zero.
    """
    cfg = model.cfg
    size = int(image_size or cfg.image_size)
    params = 0
    macs = 0
    cur = size
    for op in _plan(cfg, None):
        if op[0] == "conv":
            _, name, stride, padding = op
            p = model.layers[name]
            oc, ic, k, _ = p.weights.shape
            params += oc * ic * k * k + oc
            cur = nn.out_size(cur, k, stride, padding)
            macs += cur * cur * oc * ic * k * k
        elif op[0] == "pool":
            if cfg.pooling_variant in ("avg", "mask"):
                valid = nn.valid_window_counts(cur, cur, 3, 2, 1)
                in_c = model.layers["stage1" if cfg.pool_placement == "post_stem" else "stage2"].weights.shape[1]
                macs += int(valid.sum()) * in_c + valid.shape[1] * in_c
            cur = nn.out_size(cur, 3, 2, 1)
    return params, macs


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def checkpoint_from_model(model: Model, seed: int, iterations: int) -> Checkpoint:
    tensors = {}
    for name in model.layer_order():
        p = model.layers[name]
        tensors[f"{name}.weight"] = p.weights.copy()
        tensors[f"{name}.bias"] = p.bias.copy()
    return Checkpoint(config=model.cfg, tensors=tensors, seed=int(seed),
                      iterations=int(iterations))


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_model(ckpt.config, seed=ckpt.seed)
    for name in model.layer_order():
        p = model.layers[name]
        w = ckpt.tensors[f"{name}.weight"]
        b = ckpt.tensors[f"{name}.bias"]
        if w.shape != p.weights.shape or b.reshape(-1).shape != p.bias.shape:
            raise ConfigurationError(f"checkpoint tensor {name} has wrong shape")
        p.weights[...] = w
        p.bias[...] = b.reshape(-1)
    return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = {"model": ckpt.config.to_dict(), "seed": ckpt.seed, "iterations": ckpt.iterations}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float32)
        shape4 = arr.shape + (1,) * (4 - arr.ndim)
        if arr.ndim > 4:
            raise ConfigurationError(f"tensor {name} has more than 4 dims")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<4I", *shape4))
        buf.write(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: bad checkpoint magic {data[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + blob_len])
    pos += blob_len
    (n_tensors,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from("<4I", data, pos)
        pos += 16
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += count * 4
        if name.endswith(".bias"):  # stored 4-d per the format; logical shape is 1-d
            arr = arr.reshape(-1)
        tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)
    cfg = ModelConfig.from_dict(meta["model"])
    return Checkpoint(config=cfg, tensors=tensors, seed=int(meta["seed"]),
                      iterations=int(meta["iterations"]))

"""Causal-intervention harness: activation sweeps, background swaps, mask ablation.

Every runner takes a trained checkpoint plus a dataset and emits an
ExperimentReport: one row per evaluation (sweep weight, repetition or
morphology factor) with mAP50, per-class AP and per-class hierarchical F1,
plus mean/std/min/max/diff aggregates.  Reports are pure functions of
(checkpoint, dataset, intervention config, seed): no timestamps, fixed
iteration order, so identical runs produce identical files.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import detector, maskpool, metrics, scenegen
from .errors import ConfigurationError

DEFAULT_SWEEP_WEIGHTS = tuple(0.5 + 0.25 * k for k in range(10))  # 0.5 .. 2.75
DEFAULT_MORPH_FACTORS = (0.8, 0.9, 1.1, 1.2)


@dataclass
class SweepSpec:
    weights: tuple = DEFAULT_SWEEP_WEIGHTS

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if not w:
            raise ConfigurationError("sweep needs at least one weight")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ConfigurationError("sweep weights must be strictly increasing")
        self.weights = w


@dataclass
class ReportRow:
    repetition: object  # sweep weight, repetition index, morph factor or "baseline"
    map50: float
    per_class_ap: dict
    per_class_hf: dict


@dataclass
class ExperimentReport:
    model_id: str
    dataset_id: str
    intervention: str
    rows: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    schema: int = 1

    @property
    def aggregates(self) -> dict:
        vals = [r.map50 for r in self.rows]
        if not vals:
            return {"map50": {}}
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        lo, hi = float(min(vals)), float(max(vals))
        return {"map50": {"mean": mean, "std": std, "min": lo, "max": hi, "diff": hi - lo}}

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "intervention": self.intervention,
            "notes": self.notes,
            "rows": [{"repetition": r.repetition, "map50": r.map50,
                      "per_class_ap": r.per_class_ap, "per_class_hf": r.per_class_hf}
                     for r in self.rows],
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        if d.get("schema") != 1:
            raise ConfigurationError(f"unsupported report schema {d.get('schema')!r}")
        rep = cls(model_id=d["model_id"], dataset_id=d["dataset_id"],
                  intervention=d["intervention"], notes=d.get("notes", {}))
        for r in d["rows"]:
            rep.rows.append(ReportRow(r["repetition"], r["map50"],
                                      r["per_class_ap"], r["per_class_hf"]))
        return rep

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def read_json(cls, path) -> "ExperimentReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def write_csv(self, path) -> None:
        classes = sorted({c for r in self.rows for c in r.per_class_ap}, key=str)
        header = (["model_id", "dataset_id", "intervention", "repetition", "map50"]
                  + [f"ap:{c}" for c in classes] + [f"hf:{c}" for c in classes])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for r in self.rows:
                def fmt(v):
                    return "" if v is None else f"{v:.6f}"
                hf = r.per_class_hf or {}
                w.writerow([self.model_id, self.dataset_id, self.intervention, r.repetition,
                            f"{r.map50:.6f}"]
                           + [fmt(r.per_class_ap.get(c)) for c in classes]
                           + [fmt(hf[c][2] if isinstance(hf.get(c), (list, tuple)) else hf.get(c))
                              for c in classes])


# ---------------------------------------------------------------------------
# evaluation core
# ---------------------------------------------------------------------------

def load_records(dataset):
    """Accepts a DatasetManifest or a list of ImageRecord; returns (records, class_names)."""
    if hasattr(dataset, "load_all"):
        return dataset.load_all(), list(dataset.classes)
    return list(dataset), list(scenegen.DEFAULT_CLASSES)


def build_pyramids(records, strides):
    strides = set(strides)
    if not strides:
        return None
    return [maskpool.build_pyramid(r.fg_mask, strides) for r in records]


@dataclass
class EvalResult:
    map50: float
    per_class_ap: dict
    per_class_hf: dict
    dets_by_image: dict


def evaluate_records(model, records, class_names, pyramids=None,
                     bg_weight: float = 1.0, perturb_all_stages: bool = False,
                     hierarchy=None, batch_size: int = 16) -> EvalResult:
    """Run inference over records and score mAP50 + hierarchical F1."""
    cfg = model.cfg
    bg_mode = None if bg_weight == 1.0 else ("all" if perturb_all_stages else "slot")
    needed = detector.required_mask_strides(cfg, bg_mode)
    if needed and pyramids is None:
        pyramids = build_pyramids(records, needed)
    dets_by_image = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = detector.images_to_tensor(np.stack([r.image for r in chunk]))
        pys = pyramids[start:start + batch_size] if pyramids is not None else None
        head = detector.forward(model, x, pys, bg_weight, perturb_all_stages)
        for rec, dets in zip(chunk, detector.decode(head, cfg)):
            dets_by_image[rec.image_id] = detector.nms(dets, cfg.nms_iou)
    gts_by_image = {r.image_id: r.instances for r in records}
    m, per_class = metrics.map50(dets_by_image, gts_by_image, len(class_names))
    per_class_ap = {class_names[c]: v for c, v in per_class.items()}
    hierarchy = hierarchy or metrics.hierarchy_for(class_names)
    hf = metrics.hierarchical_f1(dets_by_image, gts_by_image, hierarchy,
                                 class_names=class_names)
    return EvalResult(map50=m, per_class_ap=per_class_ap, per_class_hf=hf,
                      dets_by_image=dets_by_image)


def _model_of(ckpt_or_model):
    if isinstance(ckpt_or_model, detector.Model):
        return ckpt_or_model
    return detector.model_from_checkpoint(ckpt_or_model)


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# interventions
# ---------------------------------------------------------------------------

def run_bg_activation_sweep(ckpt, dataset, sweep: SweepSpec | None = None,
                            perturb_all_stages: bool = False, threads: int = 1,
                            model_id: str = "model", dataset_id: str = "dataset") -> ExperimentReport:
    """Scale background activations at the pooling slot's input by each sweep
    weight and score the model; applies to every pooling variant."""
    sweep = sweep or SweepSpec()
    model = _model_of(ckpt)
    records, class_names = load_records(dataset)
    strides = (detector.required_mask_strides(model.cfg, "all" if perturb_all_stages else "slot")
               | detector.required_mask_strides(model.cfg, None))
    pyramids = build_pyramids(records, strides)

    def one(w):
        r = evaluate_records(model, records, class_names, pyramids=pyramids,
                             bg_weight=w, perturb_all_stages=perturb_all_stages)
        return ReportRow(w, r.map50, r.per_class_ap, r.per_class_hf)

    report = ExperimentReport(model_id, dataset_id, "bg_activation_sweep")
    report.rows = _map_ordered(one, sweep.weights, threads)
    return report


def run_random_bg_eval(ckpt, dataset, bg_pool, repetitions: int = 5, seed: int = 0,
                       feather_radius: int = 0, threads: int = 1,
                       model_id: str = "model", dataset_id: str = "dataset") -> ExperimentReport:
    """Re-composite every record onto a random pool background, per repetition."""
    if not bg_pool:
        raise ConfigurationError("background pool is empty")
    model = _model_of(ckpt)
    records, class_names = load_records(dataset)
    pyramids = build_pyramids(records, detector.required_mask_strides(model.cfg))

    def one(rep):
        swapped = [scenegen.composite_random_bg(r, bg_pool, seed ^ rep, feather_radius)
                   for r in records]
        r = evaluate_records(model, swapped, class_names, pyramids=pyramids)
        return ReportRow(rep, r.map50, r.per_class_ap, r.per_class_hf)

    report = ExperimentReport(model_id, dataset_id, "random_bg",
                              notes={"bg_fit": "aspect-preserving scale + center crop"})
    report.rows = _map_ordered(one, list(range(repetitions)), threads)
    return report


def run_fixed_bg_eval(ckpt, dataset, bg_pool, repetitions: int = 5, seed: int = 0,
                      feather_radius: int = 0, threads: int = 1,
                      model_id: str = "model", dataset_id: str = "dataset") -> ExperimentReport:
    """One shared background per repetition, sampled from the pool without replacement."""
    if len(bg_pool) < repetitions:
        raise ConfigurationError(f"pool of {len(bg_pool)} backgrounds < {repetitions} repetitions")
    model = _model_of(ckpt)
    records, class_names = load_records(dataset)
    pyramids = build_pyramids(records, detector.required_mask_strides(model.cfg))
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 11)))
    chosen = [int(i) for i in rng.choice(len(bg_pool), size=repetitions, replace=False)]

    def one(bg_index):
        swapped = scenegen.composite_fixed_bg(records, bg_pool[bg_index], feather_radius)
        r = evaluate_records(model, swapped, class_names, pyramids=pyramids)
        return ReportRow(bg_index, r.map50, r.per_class_ap, r.per_class_hf)

    report = ExperimentReport(model_id, dataset_id, "fixed_bg",
                              notes={"bg_fit": "aspect-preserving scale + center crop"})
    report.rows = _map_ordered(one, chosen, threads)
    return report


def run_boundary_ablation(ckpt, dataset, factors=DEFAULT_MORPH_FACTORS, threads: int = 1,
                          model_id: str = "model", dataset_id: str = "dataset") -> ExperimentReport:
    """Feed the mask-pooling model morphologically perturbed masks (ground truth
    unchanged) and score per factor; mask-variant checkpoints only."""
    model = _model_of(ckpt)
    if model.cfg.pooling_variant != "mask":
        raise ConfigurationError("boundary ablation applies to the mask pooling variant only")
    records, class_names = load_records(dataset)
    strides = detector.required_mask_strides(model.cfg)
    report = ExperimentReport(model_id, dataset_id, "boundary_ablation")
    base = evaluate_records(model, records, class_names,
                            pyramids=build_pyramids(records, strides))
    report.rows.append(ReportRow("baseline", base.map50, base.per_class_ap, base.per_class_hf))

    def one(factor):
        mode = "dilate" if factor > 1 else "erode"
        perturbed = [maskpool.morph_perturb(r.fg_mask, mode, factor) for r in records]
        pyramids = [maskpool.build_pyramid(m, strides) for m in perturbed]
        r = evaluate_records(model, records, class_names, pyramids=pyramids)
        return ReportRow(float(factor), r.map50, r.per_class_ap, r.per_class_hf)

    report.rows.extend(_map_ordered(one, [float(f) for f in factors], threads))
    return report


# ---------------------------------------------------------------------------
# diff tables
# ---------------------------------------------------------------------------

def _per_class_hf(source) -> dict:
    if isinstance(source, ExperimentReport):
        if not source.rows:
            return {}
        return source.rows[0].per_class_hf or {}
    return source


def diff_report(report_a, report_b, label_a: str = "A", label_b: str = "B") -> dict:
    """Per-class hierarchical-F1 difference table (fg, A, B, Diff).

    Missing classes carry None (rendered as dashes); also counts how many
    classes improved out of the comparable pairs.
    """
    hf_a, hf_b = _per_class_hf(report_a), _per_class_hf(report_b)
    if hf_a and hf_b and not set(hf_a) & set(hf_b):
        warnings.warn("diff_report: class sets are disjoint, rendering dashes only")
    rows = []
    improved = pairs = 0
    for cls, (a, b, diff) in metrics.f1_diff(hf_a, hf_b).items():
        rows.append({"fg": cls, label_a: a, label_b: b, "diff": diff})
        if diff is not None:
            pairs += 1
            improved += diff > 0
    return {"schema": 1, "label_a": label_a, "label_b": label_b,
            "rows": rows, "improved": improved, "pairs": pairs}


def render_diff_table(diff: dict) -> str:
    """Plain-text table with dashes for missing values."""
    la, lb = diff["label_a"], diff["label_b"]

    def fmt(v):
        return "-" if v is None else f"{v:.6f}"

    lines = [f"{'fg':<12} {la:>10} {lb:>10} {'Diff':>10}"]
    for row in diff["rows"]:
        lines.append(f"{str(row['fg']):<12} {fmt(row[la]):>10} {fmt(row[lb]):>10} {fmt(row['diff']):>10}")
    lines.append(f"improved {diff['improved']} of {diff['pairs']} pairs")
    return "\n".join(lines)

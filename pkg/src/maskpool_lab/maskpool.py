"""Boundary-aware mask pooling and the mask utilities around it.

The pooling rule, per window: count foreground pixels (n_F) and background
pixels (n_B) among the window's valid (non-padded) positions.  If
n_F >= n_B, emit the mean of the foreground pixel values; otherwise the
mean of the background pixel values.  The same FG-wins tie rule is reused
when downsampling masks by majority vote.

The mask is a constant input: the backward pass routes gradient only into
the pixels of the selected region and never differentiates the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import (FLOAT, Array, _check_geometry, _col2im, _im2col, _pad,
                 as_nchw, out_size, valid_window_counts)


def as_binary_mask(m: Array) -> Array:
    """Validate a (h, w) mask of {0, 1} values; returns uint8."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ConfigurationError(f"expected 2-d mask, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ConfigurationError("non-binary mask: values other than 0/1 present")
    return m.astype(np.uint8)


def _mask_batch(m: Array, n: int, h: int, w: int) -> Array:
    """Normalize a (h,w) or (n,h,w) mask to a float32 (n,h,w) batch."""
    m = np.asarray(m)
    if m.ndim == 2:
        m = m[None].repeat(n, axis=0)
    if m.shape != (n, h, w):
        raise ConfigurationError(f"mask shape {m.shape} does not match features ({n},{h},{w})")
    if not np.isin(m, (0, 1)).all():
        raise ConfigurationError("non-binary mask: values other than 0/1 present")
    return m.astype(FLOAT)


# ---------------------------------------------------------------------------
# mask pyramid
# ---------------------------------------------------------------------------

def downsample_mask(m: Array, factor: int) -> Array:
    """Majority-vote downsampling by ``factor`` (ties go to foreground).

    Each factor x factor block (edge blocks may be partial) becomes 1 iff its
    FG count is >= its BG count, matching the pooling branch rule.
    """
    m = as_binary_mask(m)
    if factor < 1:
        raise ConfigurationError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return m.copy()
    h, w = m.shape
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    fg = np.add.reduceat(np.add.reduceat(m.astype(np.int64), row_idx, axis=0), col_idx, axis=1)
    rows = np.minimum(row_idx + factor, h) - row_idx
    cols = np.minimum(col_idx + factor, w) - col_idx
    sizes = np.outer(rows, cols)
    return (2 * fg >= sizes).astype(np.uint8)


@dataclass
class MaskPyramid:
    """A mask downsampled to each feature stride; level 1 is the source mask."""

    levels: list  # of (stride, mask) pairs, ascending stride

    def at_stride(self, stride: int) -> Array:
        for s, mask in self.levels:
            if s == stride:
                return mask
        raise ConfigurationError(f"mask pyramid has no level for stride {stride} "
                                 f"(has {[s for s, _ in self.levels]})")


def build_pyramid(mask: Array, strides) -> MaskPyramid:
    mask = as_binary_mask(mask)
    wanted = sorted(set(int(s) for s in strides) | {1})
    return MaskPyramid(levels=[(s, downsample_mask(mask, s)) for s in wanted])


# ---------------------------------------------------------------------------
# the pooling operator
# ---------------------------------------------------------------------------

@dataclass
class PoolWindowStats:
    """Per-window FG/BG pixel counts over the valid positions."""

    n_fg: Array  # (n, oh, ow)
    n_bg: Array  # (n, oh, ow)


@dataclass
class MaskPoolRecord:
    """Branch decisions from a forward call, needed by the backward pass."""

    branch_fg: Array  # (n, oh, ow) bool: True -> FG mean was emitted
    counts: Array     # (n, oh, ow): pixel count of the selected region
    kernel: int
    stride: int
    padding: int


def window_stats(m: Array, n: int, h: int, w: int,
                 kernel: int, stride: int, padding: int) -> PoolWindowStats:
    mb = _mask_batch(m, n, h, w)
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    mcols = _im2col(_pad(mb[:, None], padding), kernel, stride, oh, ow)
    valid = valid_window_counts(h, w, kernel, stride, padding)
    n_fg = (mcols * valid).sum(axis=2)[:, 0]
    n_bg = valid.sum(axis=0) - n_fg
    return PoolWindowStats(n_fg=n_fg.reshape(n, oh, ow), n_bg=n_bg.reshape(n, oh, ow))


def maskpool2d_forward(x: Array, m: Array, kernel: int = 3, stride: int = 2, padding: int = 1):
    """Mask-guided pooling; returns (pooled, MaskPoolRecord).

    ``m`` is a (h, w) mask shared by the batch or a (n, h, w) per-image batch
    at the same spatial resolution as ``x``; the same mask applies to every
    channel.
    """
    x = as_nchw(x)
    n, c, h, w = x.shape
    mb = _mask_batch(m, n, h, w)
    _check_geometry(h, w, kernel, stride, padding, pooling=True)
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    xcols = _im2col(_pad(x, padding), kernel, stride, oh, ow)            # (n,c,k2,L)
    mcols = _im2col(_pad(mb[:, None], padding), kernel, stride, oh, ow)  # (n,1,k2,L)
    valid = valid_window_counts(h, w, kernel, stride, padding)           # (k2,L)
    fg = mcols * valid
    n_fg = fg.sum(axis=2)                      # (n,1,L)
    n_valid = valid.sum(axis=0)                # (L,)
    branch_fg = n_fg >= (n_valid - n_fg)
    sel = np.where(branch_fg[:, :, None, :], fg, valid - fg)
    counts = np.where(branch_fg, n_fg, n_valid - n_fg)
    y = (xcols * sel).sum(axis=2, dtype=np.float64) / counts
    record = MaskPoolRecord(branch_fg=branch_fg.reshape(n, oh, ow),
                            counts=counts.reshape(n, oh, ow).astype(FLOAT),
                            kernel=kernel, stride=stride, padding=padding)
    return y.reshape(n, c, oh, ow).astype(x.dtype), record


def maskpool2d_backward(x: Array, m: Array, grad_out: Array, record: MaskPoolRecord) -> Array:
    """Distribute grad/count into the pixels of each window's selected region."""
    if record is None:
        raise ConfigurationError("maskpool2d_backward requires the record from the paired forward call")
    x = as_nchw(x)
    grad_out = as_nchw(grad_out)
    n, c, h, w = x.shape
    kernel, stride, padding = record.kernel, record.stride, record.padding
    oh, ow = out_size(h, kernel, stride, padding), out_size(w, kernel, stride, padding)
    if grad_out.shape != (n, c, oh, ow):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} != expected {(n, c, oh, ow)}")
    mb = _mask_batch(m, n, h, w)
    mcols = _im2col(_pad(mb[:, None], padding), kernel, stride, oh, ow)
    valid = valid_window_counts(h, w, kernel, stride, padding)
    fg = mcols * valid
    branch = record.branch_fg.reshape(n, 1, 1, oh * ow)
    sel = np.where(branch, fg, valid - fg)                       # (n,1,k2,L)
    share = grad_out.reshape(n, c, oh * ow) / record.counts.reshape(n, 1, oh * ow)
    gcols = share[:, :, None, :] * sel
    return _col2im(gcols.astype(x.dtype), x.shape, kernel, stride, padding, oh, ow)


# ---------------------------------------------------------------------------
# interventions on activations and masks
# ---------------------------------------------------------------------------

def bg_scale(x: Array, m: Array, w: float) -> Array:
    """Multiply background (mask == 0) activations by ``w``; FG passes through bitwise."""
    x = as_nchw(x)
    n, c, h, wd = x.shape
    mb = _mask_batch(m, n, h, wd)
    keep = mb[:, None].astype(bool)
    return np.where(keep, x, x * x.dtype.type(w)).astype(x.dtype)


def _dilate8(m: Array) -> Array:
    h, w = m.shape
    p = np.pad(m, 1)
    out = np.zeros_like(m)
    for di in range(3):
        for dj in range(3):
            out |= p[di:di + h, dj:dj + w]
    return out


def _erode8(m: Array) -> Array:
    h, w = m.shape
    p = np.pad(m, 1)
    out = np.ones_like(m)
    for di in range(3):
        for dj in range(3):
            out &= p[di:di + h, dj:dj + w]
    return out


def morph_perturb(m: Array, mode: str, area_factor: float) -> Array:
    """Iterate unit 3x3 8-connected morphology until the FG area first crosses
    area_factor * original_area (>= for dilate, <= for erode).

    The factor is a target area ratio; each loop iteration applies exactly one
    morphological step and the first mask crossing the threshold is returned.
    An empty mask is returned unchanged.  If a step no longer changes the mask
    (saturated frame or vanished FG) the current mask is returned.
    """
    m = as_binary_mask(m)
    if area_factor == 1:
        raise ConfigurationError("area_factor 1 requests a no-op perturbation")
    if mode == "dilate":
        if not area_factor > 1:
            raise ConfigurationError(f"dilate requires area_factor > 1, got {area_factor}")
    elif mode == "erode":
        if not 0 < area_factor < 1:
            raise ConfigurationError(f"erode requires area_factor in (0, 1), got {area_factor}")
    else:
        raise ConfigurationError(f"unknown morphology mode {mode!r}")
    area0 = int(m.sum())
    if area0 == 0:
        return m.copy()
    target = area_factor * area0
    cur = m.astype(bool)
    step = _dilate8 if mode == "dilate" else _erode8
    while True:
        nxt = step(cur)
        if np.array_equal(nxt, cur):
            return cur.astype(np.uint8)
        cur = nxt
        area = int(cur.sum())
        if mode == "dilate" and area >= target:
            return cur.astype(np.uint8)
        if mode == "erode" and area <= target:
            return cur.astype(np.uint8)

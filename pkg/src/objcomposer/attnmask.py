"""From cross-attention records to per-object binary location masks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from objcomposer.errors import DegenerateHistogramError, PipelineError
from objcomposer.invert import AttentionRecord
from objcomposer.text import DETERMINERS, tokenize


def _max_normalize(maps: np.ndarray) -> np.ndarray:
    peak = maps.max(axis=(-2, -1), keepdims=True)
    return np.divide(maps, peak, out=np.zeros_like(maps), where=peak > 0)


def average_attention(rec: AttentionRecord, token_indices: Sequence[int]) -> np.ndarray:
    """Mean over steps and the listed tokens of per-step max-normalized maps.

    Steps are summed in sorted order so the result does not depend on the
    order in which they were recorded.
    """
    if rec.n_steps == 0:
        raise ValueError("empty attention record")
    idx = list(token_indices)
    if not idx:
        raise ValueError("no token indices given")
    n_tok = len(rec.tokens)
    if any(i < 0 or i >= n_tok for i in idx):
        raise ValueError(f"token index out of range 0..{n_tok - 1}: {idx}")
    maps = _max_normalize(rec.maps[:, idx])
    stacked = np.sort(maps.reshape(-1, *maps.shape[2:]), axis=0)
    return stacked.sum(axis=0) / stacked.shape[0]


def average_records(records: Sequence[AttentionRecord], token_indices: Sequence[int],
                    out_h: int, out_w: int) -> np.ndarray:
    """Uniform average of several layers' averaged maps at a common resolution."""
    if not records:
        raise ValueError("no attention records")
    heat = [resample_bilinear(average_attention(r, token_indices), out_h, out_w) for r in records]
    return np.mean(heat, axis=0)


def select_tokens(prompt_tokens: Sequence[str], class_phrase: str) -> list[int]:
    """Indices of the first contiguous match of ``class_phrase`` (determiners dropped)."""
    tokens = [t.lower() for t in prompt_tokens]
    phrase = [t for t in tokenize(class_phrase) if t not in DETERMINERS]
    if not phrase:
        raise ValueError(f"class phrase {class_phrase!r} has no content tokens")
    n = len(phrase)
    for start in range(len(tokens) - n + 1):
        if tokens[start:start + n] == phrase:
            return list(range(start, start + n))
    raise ValueError(f"class phrase absent from prompt: {class_phrase!r}")


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resample_bilinear(h: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D map."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be positive")
    h = np.asarray(h, dtype=np.float64)
    in_h, in_w = h.shape
    ys, xs = _axis_coords(in_h, out_h), _axis_coords(in_w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1, x1 = np.minimum(y0 + 1, in_h - 1), np.minimum(x0 + 1, in_w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = h[y0][:, x0] * (1 - fx) + h[y0][:, x1] * fx
    bottom = h[y1][:, x0] * (1 - fx) + h[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resample_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = mask.shape
    ys = np.minimum((np.arange(out_h) * in_h) // out_h, in_h - 1)
    xs = np.minimum((np.arange(out_w) * in_w) // out_w, in_w - 1)
    return mask[ys][:, xs]


def otsu_threshold(h: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold restricted to the interior edges of an equal-width histogram.

    A value ``v`` falls in the upper class of edge ``e`` when ``v > e``, matching
    :func:`binarize`. Between-class variance ``w0 * w1 * (mu0 - mu1)**2`` uses
    the class means of the actual values; ties go to the smallest edge.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    v = np.asarray(h, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if not lo < hi:
        raise DegenerateHistogramError("degenerate histogram: constant map")
    edges = np.linspace(lo, hi, bins + 1)[1:-1]
    # slot k holds values in (edges[k-1], edges[k]]; lower class of edge k = slots 0..k
    slot = np.searchsorted(edges, v, side="left")
    counts = np.bincount(slot, minlength=bins).astype(np.float64)
    sums = np.bincount(slot, weights=v, minlength=bins)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    n, total = v.size, sums.sum()

    best_k, best_var = 0, -1.0
    for k in range(bins - 1):
        if n0[k] == 0 or n0[k] == n:
            continue
        w0, w1 = n0[k] / n, (n - n0[k]) / n
        mu0, mu1 = s0[k] / n0[k], (total - s0[k]) / (n - n0[k])
        between = w0 * w1 * (mu0 - mu1) ** 2
        if between > best_var:
            best_k, best_var = k, between
    return float(edges[best_k])


def binarize(h: np.ndarray, threshold: float) -> np.ndarray:
    """1 where ``h > threshold``, else 0 (uint8)."""
    return (np.asarray(h) > threshold).astype(np.uint8)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def object_heatmap(rec: AttentionRecord, class_phrase: str, latent_h: int, latent_w: int) -> np.ndarray:
    idx = select_tokens(rec.tokens, class_phrase)
    return resample_bilinear(average_attention(rec, idx), latent_h, latent_w)


def make_masks(rec: AttentionRecord | None, objects: Sequence, prompt: str, latent_h: int, latent_w: int,
               bins: int = 256, heatmaps: list | None = None) -> list[np.ndarray]:
    """One binary mask per object at latent resolution.

    ``objects`` need ``class_phrase`` and ``mask`` attributes. User masks pass
    through (nearest-neighbour resized if needed); the rest are thresholded
    independently from their time-averaged attention. When ``heatmaps`` is a
    list, it receives each object's heatmap (``None`` for user masks).
    """
    masks = []
    tokens = tokenize(prompt)
    for i, obj in enumerate(objects):
        if obj.mask is not None:
            m = np.asarray(obj.mask).astype(np.uint8)
            if m.shape != (latent_h, latent_w):
                m = resample_nearest(m, latent_h, latent_w)
            masks.append(m)
            if heatmaps is not None:
                heatmaps.append(None)
            continue
        if rec is None or rec.n_steps == 0:
            raise PipelineError(f"masks object {i}", f"no mask and no attention record for {obj.class_phrase!r}")
        try:
            if rec.tokens != tokens:
                raise ValueError("attention record tokens do not match the prompt")
            heat = object_heatmap(rec, obj.class_phrase, latent_h, latent_w)
            masks.append(binarize(heat, otsu_threshold(heat, bins)))
        except ValueError as exc:
            raise PipelineError(f"masks object {i}", str(exc)) from exc
        if heatmaps is not None:
            heatmaps.append(heat)
    return masks

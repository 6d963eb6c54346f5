"""Intensity statistics for measuring and reducing domain shift.

Head masks, z-score normalization, masked histograms, base-2 Jensen-Shannon
divergence, the mean pairwise divergence between (or within) domains, and a
quantile-based histogram-matching baseline.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from volshift.errors import DataError, PreconditionError, ShapeError
from volshift.volio import DomainSet, Volume

MASK_FRACTION = 0.05
MASK_PERCENTILE = 99.0
DEFAULT_BINS = 128
HIST_CHANNEL = 0


@dataclass(frozen=True)
class HistogramDist:
    p: np.ndarray
    lo: float
    hi: float
    n_voxels: int

    @property
    def bins(self) -> int:
        return len(self.p)


@dataclass
class DivergenceReport:
    matrix: np.ndarray
    delta_js: float
    labels: tuple[str, str]
    mode: str
    names_a: list[str] = field(default_factory=list)
    names_b: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode, "domains": list(self.labels), "delta_js": self.delta_js,
            "matrix": self.matrix.tolist(),
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["img_a", "img_b", "js"])
        for i, a in enumerate(self.names_a):
            for j, b in enumerate(self.names_b):
                if self.mode == "intra" and i == j:
                    continue
                wr.writerow([a, b, repr(float(self.matrix[i, j]))])
        return out.getvalue()


# ----------------------------------------------------------------------------
# masks and normalization


def compute_head_mask(volume: Volume) -> np.ndarray:
    """Voxels above 5% of the channel-0 99th percentile, largest 6-connected blob.

    A mask already attached to the volume is returned unchanged.
    """
    if volume.mask is not None:
        return volume.mask
    v = volume.data[0]
    thr = MASK_FRACTION * np.percentile(v, MASK_PERCENTILE)
    fg = v > thr
    if thr <= 0 or not fg.any():
        raise DataError("head mask is empty; supply an explicit mask file")
    lab, n = ndimage.label(fg)  # default structure is 6-connected in 3-D
    if n > 1:
        sizes = np.bincount(lab.ravel())[1:]
        fg = lab == (int(np.argmax(sizes)) + 1)
    return fg


def _mask_of(volume: Volume, mask: np.ndarray | None) -> np.ndarray:
    m = compute_head_mask(volume) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != volume.extent:
        raise ShapeError(f"mask extent {m.shape} != volume extent {volume.extent}")
    if not m.any():
        raise DataError("mask is empty")
    return m


def zscore_normalize(volume: Volume, mask: np.ndarray | None = None) -> Volume:
    """Per channel ``(v - mean) / std`` with statistics over the mask; mask is attached."""
    m = _mask_of(volume, mask)
    out = np.empty_like(volume.data)
    for c, ch in enumerate(volume.data):
        vals = ch[m].astype(np.float64)
        mu, sd = vals.mean(), vals.std()
        if not sd > 0:
            raise DataError(f"channel {c} is constant inside the mask; cannot z-score")
        out[c] = ((ch - mu) / sd).astype(np.float32)
    res = volume.with_data(out)
    res.mask = m
    return res


# ----------------------------------------------------------------------------
# histograms and divergence


def intensity_histogram(volume: Volume, mask: np.ndarray | None, bins: int = DEFAULT_BINS,
                        rng: tuple[float, float] | None = None, channel: int = HIST_CHANNEL) -> HistogramDist:
    """Normalized histogram of masked voxels of one channel; values are clipped into range."""
    if bins < 2:
        raise PreconditionError("need at least 2 bins")
    m = _mask_of(volume, mask)
    vals = volume.data[channel][m].astype(np.float64)
    lo, hi = (float(vals.min()), float(vals.max())) if rng is None else map(float, rng)
    if not lo < hi:
        if rng is not None:
            raise PreconditionError(f"histogram range needs lo < hi, got [{lo}, {hi}]")
        hi = lo + 1.0
    idx = np.floor((np.clip(vals, lo, hi) - lo) / (hi - lo) * bins).astype(np.int64)
    np.minimum(idx, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return HistogramDist(counts / counts.sum(), lo, hi, int(vals.size))


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def js_divergence(p: HistogramDist | np.ndarray, q: HistogramDist | np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence; symmetric by construction and within [0, 1]."""
    if isinstance(p, HistogramDist) and isinstance(q, HistogramDist):
        if p.bins != q.bins or (p.lo, p.hi) != (q.lo, q.hi):
            raise PreconditionError(
                f"histograms differ in binning: {p.bins} bins [{p.lo}, {p.hi}] vs {q.bins} bins [{q.lo}, {q.hi}]")
    pa = np.asarray(getattr(p, "p", p), dtype=np.float64)
    qa = np.asarray(getattr(q, "p", q), dtype=np.float64)
    if pa.shape != qa.shape:
        raise PreconditionError(f"histograms differ in bin count: {pa.shape} vs {qa.shape}")
    # order the pair so that JS(P, Q) and JS(Q, P) run the identical float sequence
    if tuple(pa) > tuple(qa):
        pa, qa = qa, pa
    m = 0.5 * (pa + qa)
    js = 0.5 * _kl2(pa, m) + 0.5 * _kl2(qa, m)
    return min(max(js, 0.0), 1.0)


def pair_histograms(a: Volume, b: Volume, bins: int = DEFAULT_BINS, channel: int = HIST_CHANNEL,
                    mask_a: np.ndarray | None = None, mask_b: np.ndarray | None = None
                    ) -> tuple[HistogramDist, HistogramDist]:
    """Histograms of two volumes over their pooled masked range."""
    ma, mb = _mask_of(a, mask_a), _mask_of(b, mask_b)
    va, vb = a.data[channel][ma], b.data[channel][mb]
    lo = float(min(va.min(), vb.min()))
    hi = float(max(va.max(), vb.max()))
    if not lo < hi:
        hi = lo + 1.0
    return (intensity_histogram(a, ma, bins, (lo, hi), channel),
            intensity_histogram(b, mb, bins, (lo, hi), channel))


def pair_js(a: Volume, b: Volume, bins: int = DEFAULT_BINS, channel: int = HIST_CHANNEL) -> float:
    return js_divergence(*pair_histograms(a, b, bins, channel))


def _as_list(s) -> list[Volume]:
    return list(s.volumes) if isinstance(s, DomainSet) else list(s)


def delta_js(a: DomainSet | Sequence[Volume], b: DomainSet | Sequence[Volume] | None = None,
             mode: str = "inter", bins: int = DEFAULT_BINS, channel: int = HIST_CHANNEL) -> DivergenceReport:
    """Mean pairwise JS between two sets (``inter``) or within one set, self-pairs excluded (``intra``)."""
    va = _as_list(a)
    if mode == "intra":
        if b is not None and b is not a:
            raise PreconditionError("intra mode compares a set with itself; pass a single set")
        vb = va
        if len(va) < 2:
            raise PreconditionError("intra mode needs at least 2 volumes")
    elif mode == "inter":
        vb = _as_list(a if b is None else b)
    else:
        raise PreconditionError(f"unknown mode {mode!r}")
    if not va or not vb:
        raise PreconditionError("delta_js needs non-empty sets")
    mat = np.zeros((len(va), len(vb)))
    total, count = 0.0, 0
    for i, x in enumerate(va):
        for j, y in enumerate(vb):
            if mode == "intra" and i == j:
                continue
            mat[i, j] = 0.0 if x is y else pair_js(x, y, bins, channel)
            total += mat[i, j]
            count += 1
    name = lambda s, d: s.name if isinstance(s, DomainSet) else d  # noqa: E731
    la = name(a, "A")
    lb = la if mode == "intra" or b is None else name(b, "B")
    return DivergenceReport(mat, total / count, (la, lb), mode,
                            [f"{la}/{i}" for i in range(len(va))], [f"{lb}/{j}" for j in range(len(vb))])


# ----------------------------------------------------------------------------
# histogram matching


def nearest_reference(y: Volume, refs: DomainSet | Sequence[Volume], bins: int = DEFAULT_BINS,
                      channel: int = HIST_CHANNEL) -> tuple[int, Volume]:
    """Index and volume of the reference with the smallest JS to ``y`` (first wins on ties)."""
    vols = _as_list(refs)
    if not vols:
        raise PreconditionError("reference set is empty")
    scores = [pair_js(y, x, bins, channel) for x in vols]
    k = int(np.argmin(scores))
    return k, vols[k]


def _quantiles(vals: np.ndarray, levels: int, qs: np.ndarray) -> np.ndarray:
    """Quantiles read off a ``levels``-bin empirical CDF, interpolated within bins."""
    lo, hi = float(vals.min()), float(vals.max())
    if not lo < hi:
        return np.full(len(qs), lo)
    counts, edges = np.histogram(vals, bins=levels, range=(lo, hi))
    cdf = np.concatenate([[0.0], np.cumsum(counts) / vals.size])
    # cdf is non-decreasing; interp on its strictly increasing part
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(qs, cdf[keep], edges[keep])


def histogram_match(y: Volume, x_ref: Volume, levels: int = 1024, match_points: int = 7,
                    mask_y: np.ndarray | None = None, mask_ref: np.ndarray | None = None) -> Volume:
    """Piecewise-linear quantile mapping of ``y``'s masked intensities onto ``x_ref``'s.

    Landmarks are the masked minimum and maximum plus ``match_points`` evenly
    spaced interior quantiles. Each channel is mapped independently; voxels
    outside the mask keep their values.
    """
    if not levels >= match_points >= 2:
        raise PreconditionError(f"need levels >= match_points >= 2, got {levels}, {match_points}")
    if y.channels != x_ref.channels:
        raise ShapeError(f"channel counts differ: {y.channels} vs {x_ref.channels}")
    my, mx = _mask_of(y, mask_y), _mask_of(x_ref, mask_ref)
    qs = np.concatenate([[0.0], np.arange(1, match_points + 1) / (match_points + 1), [1.0]])
    out = y.data.copy()
    for c in range(y.channels):
        src = y.data[c][my].astype(np.float64)
        ref = x_ref.data[c][mx].astype(np.float64)
        ls = np.maximum.accumulate(_quantiles(src, levels, qs))
        lr = np.maximum.accumulate(_quantiles(ref, levels, qs))
        # np.interp needs increasing xp; collapse repeated source landmarks
        keep = np.concatenate([[True], np.diff(ls) > 0])
        if keep.sum() < 2:
            mapped = np.full_like(src, lr.mean())
        else:
            mapped = np.interp(src, ls[keep], lr[keep])
        out[c][my] = mapped.astype(np.float32)
    return y.with_data(out, provenance=f"{y.provenance}+hm")


def monotone_map_ok(before: np.ndarray, after: np.ndarray) -> bool:
    """True if sorting by ``before`` leaves ``after`` non-decreasing."""
    order = np.argsort(before, kind="stable")
    return bool(np.all(np.diff(after[order]) >= 0))

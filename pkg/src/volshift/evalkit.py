"""Dice, cross-validation folds and the four-condition adaptation experiment.

For each ordered pair (source S, target T) a segmenter trained on S is
evaluated on T's test subjects under four conditions:

* ``none``: raw target volumes,
* ``hm``: each target volume histogram-matched to its nearest S training volume,
* ``cyclegan``: target volumes translated into S by the T -> S generator,
* ``target-trained``: a segmenter trained on T itself (the upper reference).

One CycleGAN is trained per unordered domain pair on all (unlabeled) volumes
of both domains; its two generators serve both directions.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from volshift.cycletrain import CycleTrainConfig, loss_history_csv, train_cyclegan, translate_volume
from volshift.domainstats import compute_head_mask, delta_js, histogram_match, nearest_reference, zscore_normalize
from volshift.errors import ConfigError, DataError, ShapeError
from volshift.segtrain import SegTrainConfig, binarize, segment_volume, train_segmenter
from volshift.volio import DomainSet, Volume

log = logging.getLogger(__name__)

CONDITIONS = ("none", "hm", "cyclegan", "target-trained")
JS_CONDITIONS = ("none", "hm", "cyclegan", "intra")


def dice(pred: np.ndarray, truth: np.ndarray, empty: float = 1.0) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score ``empty`` (1.0, or NaN to exclude)."""
    a, b = np.asarray(pred) > 0, np.asarray(truth) > 0
    if a.shape != b.shape:
        raise ShapeError(f"mask extents differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return float(empty)
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


@dataclass(frozen=True)
class FoldSplit:
    index: int
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def make_folds(n_subjects: int = 20, n_folds: int = 7, seed: int = 0, n_val: int = 3) -> list[FoldSplit]:
    """Shuffle subjects into ``n_folds`` near-equal test folds (larger folds first).

    For 20 subjects and 7 folds the test sizes are [3, 3, 3, 3, 3, 3, 2]. The
    next ``n_val`` subjects after each test fold (cyclically, in shuffled
    order) validate; all others train.
    """
    if n_folds < 1 or n_folds > n_subjects:
        raise ConfigError(f"need 1 <= n_folds <= n_subjects, got {n_folds} folds for {n_subjects} subjects")
    q, r = divmod(n_subjects, n_folds)
    sizes = [q + 1] * r + [q] * (n_folds - r)
    if n_subjects - max(sizes) - n_val < 1:
        raise ConfigError(f"{n_subjects} subjects leave no training data with test fold {max(sizes)} and n_val {n_val}")
    perm = [int(i) for i in np.random.default_rng(seed).permutation(n_subjects)]
    folds, start = [], 0
    for k, size in enumerate(sizes):
        test = perm[start:start + size]
        rest = perm[start + size:] + perm[:start]
        folds.append(FoldSplit(k, tuple(sorted(rest[n_val:])), tuple(sorted(rest[:n_val])), tuple(sorted(test))))
        start += size
    return folds


@dataclass
class ExperimentConfig:
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    cyc: CycleTrainConfig = field(default_factory=CycleTrainConfig)
    n_folds: int = 7
    n_val: int = 3
    folds_to_run: tuple[int, ...] | None = None
    seg_window: int = 32
    seg_stride: int = 16
    translate_tile: int | None = None
    hm_levels: int = 1024
    hm_points: int = 7
    bins: int = 128
    empty_dice: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds_to_run"] = None if self.folds_to_run is None else list(self.folds_to_run)
        return d


@dataclass
class ExperimentReport:
    """Per-subject Dice per (source, target, condition) plus Δ_JS per condition."""

    dice: dict[tuple[str, str, str], dict[str, float]] = field(default_factory=dict)
    delta_js: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)

    def add(self, source: str, target: str, condition: str, subject: str, value: float) -> None:
        self.dice.setdefault((source, target, condition), {})[subject] = float(value)

    def mean(self, source: str, target: str, condition: str) -> float:
        vals = [v for v in self.dice[(source, target, condition)].values() if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def pairs(self) -> list[tuple[str, str]]:
        return sorted({(s, t) for s, t, _ in self.dice})

    def check_complete(self) -> None:
        missing = [(s, t, c) for s, t in self.pairs() for c in CONDITIONS if (s, t, c) not in self.dice]
        if missing:
            raise DataError(f"experiment matrix incomplete, missing cells: {missing}")

    def to_dict(self) -> dict:
        cells = []
        for (s, t, c) in sorted(self.dice):
            vals = self.dice[(s, t, c)]
            arr = np.array([v for v in vals.values() if not np.isnan(v)])
            cells.append({
                "source": s, "target": t, "condition": c,
                "subjects": {k: vals[k] for k in sorted(vals)},
                "mean": float(arr.mean()) if arr.size else None,
                "std": float(arr.std()) if arr.size else None,
            })
        js = [{"source": s, "target": t, **{k: v[k] for k in sorted(v)}} for (s, t), v in sorted(self.delta_js.items())]
        return {"conditions": list(CONDITIONS), "dice": cells, "delta_js": js}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        rep = cls()
        for cell in d["dice"]:
            for subj, v in cell["subjects"].items():
                rep.add(cell["source"], cell["target"], cell["condition"], subj, v)
        for row in d["delta_js"]:
            rep.delta_js[(row["source"], row["target"])] = {k: v for k, v in row.items() if k not in ("source", "target")}
        return rep

    def to_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["source", "target", "condition", "subject", "dice"])
        for (s, t, c) in sorted(self.dice):
            for subj, v in sorted(self.dice[(s, t, c)].items()):
                wr.writerow([s, t, c, subj, repr(v)])
        return out.getvalue()

    def delta_js_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["source", "target", "condition", "delta_js"])
        for (s, t), v in sorted(self.delta_js.items()):
            for c in JS_CONDITIONS:
                if c in v:
                    wr.writerow([s, t, c, repr(v[c])])
        return out.getvalue()


def preprocess(domain: DomainSet) -> DomainSet:
    """Head mask plus per-channel z-scoring of every volume."""
    return DomainSet(domain.name, [zscore_normalize(v, compute_head_mask(v)) for v in domain])


def _write(out_dir: Path | None, name: str, text: str) -> None:
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text)


def run_experiment_matrix(domains: Sequence[DomainSet], cfg: ExperimentConfig, out_dir: str | Path | None = None,
                          timing_log=None, preprocessed: bool = False) -> ExperimentReport:
    """Run every ordered (source, target) pair under the four conditions."""
    if len(domains) < 2:
        raise ConfigError("the experiment needs at least 2 domains")
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ConfigError(f"domain names must be unique, got {names}")
    missing = [f"{d.name}/{i}" for d in domains for i in d.unlabeled()]
    if missing:
        raise DataError(f"subjects without labels: {missing}")
    sizes = {len(d) for d in domains}
    if len(sizes) != 1:
        raise ConfigError(f"domains must have equal subject counts for shared folds, got {sorted(sizes)}")
    n = sizes.pop()
    out = Path(out_dir) if out_dir is not None else None
    doms = {d.name: (d if preprocessed else preprocess(d)) for d in domains}
    folds = make_folds(n, cfg.n_folds, cfg.seed, cfg.n_val)
    run = folds if cfg.folds_to_run is None else [folds[i] for i in cfg.folds_to_run]

    # one CycleGAN per unordered pair; adapt[(t, s)] maps target t into source s
    adapt = {}
    for a, b in combinations(names, 2):
        log.info("training CycleGAN %s <-> %s", a, b)
        res = train_cyclegan(doms[a], doms[b], cfg.cyc, timing_log=timing_log)
        _write(out, f"cyclegan_{a}_{b}_losses.csv", loss_history_csv(res.history))
        adapt[(b, a)] = res.F
        adapt[(a, b)] = res.G

    report = ExperimentReport()
    js_acc: dict[tuple[str, str], dict[str, list[float]]] = {}
    for fold in run:
        log.info("fold %d: train %s val %s test %s", fold.index, fold.train, fold.val, fold.test)
        seg = {}
        for name in names:
            d = doms[name]
            res = train_segmenter(d.subset(fold.train), cfg.seg, val=d.subset(fold.val), timing_log=timing_log)
            _write(out, f"segmenter_{name}_fold{fold.index}_curve.csv", res.curve_csv())
            seg[name] = res.net

        def score(net, vol: Volume) -> float:
            prob = segment_volume(net, vol, cfg.seg_window, cfg.seg_stride)
            return dice(binarize(prob), vol.labels, cfg.empty_dice)

        for s in names:
            src_train = doms[s].subset(fold.train)
            for t in names:
                if s == t:
                    continue
                tgt = [doms[t][i] for i in fold.test]
                matched = [histogram_match(y, nearest_reference(y, src_train, cfg.bins)[1], cfg.hm_levels, cfg.hm_points)
                           for y in tgt]
                translated = [translate_volume(adapt[(t, s)], y, cfg.translate_tile) for y in tgt]
                for i, y, ym, yt in zip(fold.test, tgt, matched, translated):
                    sid = f"{t}/{i:02d}"
                    report.add(s, t, "none", sid, score(seg[s], y))
                    report.add(s, t, "hm", sid, score(seg[s], ym))
                    report.add(s, t, "cyclegan", sid, score(seg[s], yt))
                    report.add(s, t, "target-trained", sid, score(seg[t], y))
                acc = js_acc.setdefault((s, t), {c: [] for c in JS_CONDITIONS})
                acc["none"].append(delta_js(src_train, tgt, bins=cfg.bins).delta_js)
                acc["hm"].append(delta_js(src_train, matched, bins=cfg.bins).delta_js)
                acc["cyclegan"].append(delta_js(src_train, translated, bins=cfg.bins).delta_js)
                acc["intra"].append(delta_js(src_train, mode="intra", bins=cfg.bins).delta_js)
    for key, acc in js_acc.items():
        report.delta_js[key] = {c: float(np.mean(v)) for c, v in acc.items()}
    report.check_complete()
    return report


def gap_recovery(report: ExperimentReport, source: str, target: str) -> float:
    """Fraction of the none -> target-trained Dice gap closed by CycleGAN adaptation."""
    none = report.mean(source, target, "none")
    cyc = report.mean(source, target, "cyclegan")
    top = report.mean(source, target, "target-trained")
    gap = top - none
    if gap <= 0:
        return float("inf") if cyc >= none else float("-inf")
    return (cyc - none) / gap

"""Lesion-balanced patch training and sliding-window inference for the U-Net segmenter."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from volshift.errors import ConfigError, DataError, NumericalError, PreconditionError
from volshift.netarch import SegmenterNet, build_unet, load_params, save_params
from volshift.volio import DomainSet, Volume
from volshift.voltensor import AdamState, Tape, Tensor, adam_step, ops

log = logging.getLogger(__name__)


@dataclass
class SegTrainConfig:
    epochs: int = 50
    batches_per_epoch: int = 100
    batch_size: int = 8
    patch_size: int = 32
    lr: float = 2e-4
    lesion_prob: float = 0.5
    base_filters: int = 32
    loss: str = "cross_entropy"  # or "soft_dice"
    val_window: int = 32
    val_stride: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size % 16:
            raise ConfigError(f"patch_size must be divisible by 16, got {self.patch_size}")
        if self.val_window % 16 or not 0 < self.val_stride <= self.val_window:
            raise ConfigError("val_window must be divisible by 16 and 0 < val_stride <= val_window")
        if not 0 <= self.lesion_prob <= 1:
            raise ConfigError("lesion_prob must be in [0, 1]")
        if min(self.epochs, self.batches_per_epoch, self.batch_size) < 1:
            raise ConfigError("epochs, batches_per_epoch and batch_size must be >= 1")
        if self.loss not in ("cross_entropy", "soft_dice"):
            raise ConfigError(f"unknown segmentation loss {self.loss!r}")


class PatchSampler:
    """Draws patches centred on lesion voxels with probability ``lesion_prob``, else on healthy voxels.

    Centres are uniform over the pooled qualifying voxels of all volumes;
    healthy centres are restricted to the head mask when one is attached.
    A centre ``c`` yields the patch ``[c - p//2, c - p//2 + p)`` on each axis,
    so it always lies fully inside its volume.
    """

    def __init__(self, volumes: Sequence[Volume], patch: int = 32, lesion_prob: float = 0.5,
                 rng: np.random.Generator | int | None = None):
        self.volumes = list(volumes)
        self.patch = patch
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        if not self.volumes:
            raise DataError("patch sampler needs at least one volume")
        missing = [i for i, v in enumerate(self.volumes) if v.labels is None]
        if missing:
            raise DataError(f"volumes without labels: {missing}")
        h = patch // 2
        les, hea = [], []
        for i, v in enumerate(self.volumes):
            if min(v.extent) < patch:
                raise ConfigError(f"patch size {patch} exceeds volume {i} extent {v.extent}")
            region = tuple(slice(h, e - patch + h + 1) for e in v.extent)
            lab = v.labels[region] > 0
            ok = np.ones_like(lab) if v.mask is None else v.mask[region]
            for arr, sel in ((les, lab), (hea, ~lab & ok)):
                pts = np.argwhere(sel).astype(np.int32) + h
                arr.append(np.column_stack([np.full(len(pts), i, np.int32), pts]))
        self.lesion_centres = np.concatenate(les)
        self.healthy_centres = np.concatenate(hea)
        self.lesion_prob = lesion_prob
        if len(self.lesion_centres) == 0 and len(self.healthy_centres) == 0:
            raise DataError("no valid patch centres in any volume")
        if len(self.lesion_centres) == 0 and lesion_prob > 0:
            log.warning("no lesion voxels in valid centre region; sampling healthy-centred patches only")
            self.lesion_prob = 0.0
        elif len(self.healthy_centres) == 0 and lesion_prob < 1:
            log.warning("no healthy voxels in valid centre region; sampling lesion-centred patches only")
            self.lesion_prob = 1.0
        self.last_lesion_centred: np.ndarray = np.zeros(0, dtype=bool)

    def draw(self) -> tuple[np.ndarray, np.ndarray, bool]:
        lesion = bool(self.rng.random() < self.lesion_prob)
        pool = self.lesion_centres if lesion else self.healthy_centres
        i, a, b, c = pool[int(self.rng.integers(len(pool)))]
        p, h = self.patch, self.patch // 2
        sl = (slice(a - h, a - h + p), slice(b - h, b - h + p), slice(c - h, c - h + p))
        v = self.volumes[i]
        return v.data[(slice(None),) + sl], v.labels[sl], lesion


def sample_balanced_batch(sampler: PatchSampler, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """``[B, C, p, p, p]`` patches and ``[B, p, p, p]`` labels; flags land in ``sampler.last_lesion_centred``."""
    xs, ys, flags = [], [], []
    for _ in range(batch_size):
        x, y, f = sampler.draw()
        xs.append(x)
        ys.append(y)
        flags.append(f)
    sampler.last_lesion_centred = np.array(flags)
    return np.stack(xs), np.stack(ys)


# ----------------------------------------------------------------------------
# inference


def _tile_starts(extent: int, window: int, stride: int) -> list[int]:
    return list(range(0, extent - window + 1, stride))


def segment_volume(net: SegmenterNet, volume: Volume, window: int = 32, stride: int = 16,
                   batch: int = 8) -> Volume:
    """Class probabilities ``[2, D, H, W]`` from overlapping windows averaged uniformly.

    The volume is reflect-padded so windows tile it exactly at the given
    stride, then cropped back.
    """
    if window % 16 or not 0 < stride <= window:
        raise PreconditionError("window must be divisible by 16 and 0 < stride <= window")
    ext = volume.extent
    pads = []
    for e in ext:
        target = window if e <= window else window + -(-(e - window) // stride) * stride
        total = target - e
        pads.append((total // 2, total - total // 2))
    x = volume.data
    if any(sum(p) for p in pads):
        mode = "reflect" if all(max(p) < e for p, e in zip(pads, ext)) else "symmetric"
        x = np.pad(x, ((0, 0),) + tuple(pads), mode=mode)
    pext = x.shape[1:]
    acc = np.zeros((net.cfg.n_classes,) + pext, dtype=np.float64)
    cnt = np.zeros(pext, dtype=np.float64)
    corners = [(a, b, c) for a in _tile_starts(pext[0], window, stride)
               for b in _tile_starts(pext[1], window, stride) for c in _tile_starts(pext[2], window, stride)]
    for i in range(0, len(corners), batch):
        group = corners[i:i + batch]
        xb = np.stack([x[:, a:a + window, b:b + window, c:c + window] for a, b, c in group])
        pb = net(Tensor(xb)).data
        for (a, b, c), p in zip(group, pb):
            acc[:, a:a + window, b:b + window, c:c + window] += p
            cnt[a:a + window, b:b + window, c:c + window] += 1.0
    prob = acc / cnt
    crop = tuple(slice(p[0], p[0] + e) for p, e in zip(pads, ext))
    prob = prob[(slice(None),) + crop].astype(np.float32)
    return volume.with_data(prob, provenance=f"{volume.provenance}+prob")


def binarize(prob: Volume | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Lesion mask (uint8) where the lesion-channel probability is strictly above ``threshold``."""
    p = prob.data if isinstance(prob, Volume) else np.asarray(prob)
    return (p[1] > threshold).astype(np.uint8)


# ----------------------------------------------------------------------------
# training


@dataclass
class CurvePoint:
    epoch: int
    loss: float
    val_dice: float


@dataclass
class SegResult:
    net: SegmenterNet
    curve: list[CurvePoint] = field(default_factory=list)
    best_epoch: int = -1

    def curve_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["epoch", "ce_loss", "val_dice"])
        for c in self.curve:
            wr.writerow([c.epoch, repr(c.loss), repr(c.val_dice)])
        return out.getvalue()


def evaluate_dice(net: SegmenterNet, volumes: Sequence[Volume], window: int, stride: int) -> list[float]:
    from volshift.evalkit import dice

    return [dice(binarize(segment_volume(net, v, window, stride)), v.labels) for v in volumes]


def train_step(net: SegmenterNet, state: AdamState, x: np.ndarray, y: np.ndarray, loss_kind: str = "cross_entropy",
               lr: float | None = None) -> float:
    net.zero_grad()
    with Tape() as tape:
        prob = net(Tensor(x))
        loss = ops.losses(prob, y, loss_kind)
    val = float(loss.item())
    if not np.isfinite(val):
        raise NumericalError(f"segmentation loss is not finite ({val})")
    tape.backward(loss)
    adam_step(net.parameters(), [p.grad for p in net.parameters()], state, lr=lr)
    net.zero_grad()
    net.step += 1
    return val


def train_segmenter(train: DomainSet | Sequence[Volume], cfg: SegTrainConfig,
                    val: DomainSet | Sequence[Volume] | None = None, timing_log=None) -> SegResult:
    """Train on balanced batches; return the parameters with the best validation Dice."""
    cfg.validate()
    vols = list(train)
    if not vols:
        raise DataError("empty training set")
    vvals = list(val) if val is not None else []
    rng = np.random.default_rng([cfg.seed, 0x5E6])
    sampler = PatchSampler(vols, cfg.patch_size, cfg.lesion_prob, rng)
    net = build_unet(in_channels=vols[0].channels, base_filters=cfg.base_filters, seed=int(rng.integers(2**31)))
    state = AdamState.for_params(net.parameters(), lr=cfg.lr)
    res = SegResult(net)
    best, best_blob = -np.inf, None
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        losses = [train_step(net, state, *sample_balanced_batch(sampler, cfg.batch_size), cfg.loss)
                  for _ in range(cfg.batches_per_epoch)]
        vd = float(np.mean(evaluate_dice(net, vvals, cfg.val_window, cfg.val_stride))) if vvals else float("nan")
        res.curve.append(CurvePoint(epoch, float(np.mean(losses)), vd))
        log.info("segmenter epoch %d/%d loss=%.4f val_dice=%.4f", epoch + 1, cfg.epochs, res.curve[-1].loss, vd)
        if timing_log is not None:
            timing_log.write(f"segmenter epoch={epoch + 1} wall={time.perf_counter() - t0:.3f}\n")
        if vvals and vd > best:
            best, best_blob, res.best_epoch = vd, save_params(net), epoch
    if best_blob is not None:
        load_params(best_blob, net)
    else:
        res.best_epoch = cfg.epochs - 1
    return res


def config_dict(cfg: SegTrainConfig) -> dict:
    return asdict(cfg)

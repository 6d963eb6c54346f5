"""CycleGAN losses, the alternating training step, and tiled volume translation.

G maps domain X to Y, F maps Y to X. Each step updates the discriminators
D_X and D_Y on one real and one translated patch each, then updates G and F
jointly on ``w_adv * adversarial + w_cyc * cycle + w_id * identity``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from volshift.errors import ConfigError, NumericalError, PreconditionError, ShapeError
from volshift.netarch import (
    DiscriminatorNet,
    GeneratorNet,
    Network,
    build_discriminator,
    build_generator,
    save_params,
)
from volshift.volio import DomainSet, Volume
from volshift.voltensor import AdamState, Tape, Tensor, adam_step, ops

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "step", "adv_g", "adv_f", "cyc", "idt", "d_x", "d_y", "total")


@dataclass
class CycleTrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 1000
    lr: float = 2e-4
    patch_size: int = 32
    w_adv: float = 1.0
    w_cyc: float = 1.0
    w_id: float = 1.0
    seed: int = 0
    use_resize_conv: bool = True
    replay_buffer: int = 0  # 0 disables; 50 is the usual pool size
    lr_decay: bool = False  # linear decay to zero over the second half
    base_filters: int = 32
    n_resblocks: int = 10
    disc_filters: int = 64
    instance_norm: bool = False

    def validate(self) -> None:
        if min(self.w_adv, self.w_cyc, self.w_id) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.patch_size % 4 or self.patch_size < DiscriminatorNet.MIN_EXTENT:
            raise ConfigError(
                f"patch_size must be divisible by 4 and >= {DiscriminatorNet.MIN_EXTENT}, got {self.patch_size}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.replay_buffer < 0:
            raise ConfigError("replay_buffer must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_decay:
            return self.lr
        half = self.epochs // 2
        if epoch < half:
            return self.lr
        return self.lr * max(self.epochs - epoch, 1) / max(self.epochs - half, 1)


@dataclass
class LossReport:
    """Per-step scalars. Terms whose weight is zero are skipped and reported as 0."""

    adv_g: float = 0.0  # BCE(D_Y(G(x)), 1)
    adv_f: float = 0.0  # BCE(D_X(F(y)), 1)
    cyc: float = 0.0
    idt: float = 0.0
    d_x: float = 0.0
    d_y: float = 0.0
    total: float = 0.0
    epoch: int = 0
    step: int = 0

    def row(self) -> list:
        return [self.epoch, self.step] + [repr(float(getattr(self, k))) for k in LOSS_COLUMNS[2:]]


@dataclass
class CycleNets:
    G: GeneratorNet
    F: GeneratorNet
    D_X: DiscriminatorNet
    D_Y: DiscriminatorNet

    def networks(self) -> dict[str, Network]:
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}


def derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def build_cycle_nets(cfg: CycleTrainConfig, channels: int = 2) -> CycleNets:
    gen = dict(in_channels=channels, out_channels=channels, base_filters=cfg.base_filters,
               n_resblocks=cfg.n_resblocks, use_resize_conv=cfg.use_resize_conv, instance_norm=cfg.instance_norm)
    return CycleNets(
        G=build_generator(seed=derived_seed(cfg.seed, 1), **gen),
        F=build_generator(seed=derived_seed(cfg.seed, 2), **gen),
        D_X=build_discriminator(in_channels=channels, base_filters=cfg.disc_filters, seed=derived_seed(cfg.seed, 3)),
        D_Y=build_discriminator(in_channels=channels, base_filters=cfg.disc_filters, seed=derived_seed(cfg.seed, 4)),
    )


def init_opt_states(nets: CycleNets, cfg: CycleTrainConfig) -> dict[str, AdamState]:
    return {k: AdamState.for_params(n.parameters(), lr=cfg.lr) for k, n in nets.networks().items()}


# ----------------------------------------------------------------------------
# losses


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def discriminator_loss(D: DiscriminatorNet, real, fake) -> Tensor:
    """BCE(D(real), 1) + BCE(D(fake), 0); the fake batch is detached."""
    real, fake = _as_tensor(real), _as_tensor(fake)
    if real.shape != fake.shape:
        raise ShapeError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    pr = D(real)
    pf = D(ops.detach(fake))
    return ops.add(ops.bce_loss(pr, np.ones(pr.shape)), ops.bce_loss(pf, np.zeros(pf.shape)))


def generator_adversarial_loss(D: DiscriminatorNet, fake) -> Tensor:
    """Non-saturating generator term: BCE(D(fake), 1)."""
    pf = D(_as_tensor(fake))
    return ops.bce_loss(pf, np.ones(pf.shape))


def cycle_loss(G: Network, F: Network, x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    return ops.add(ops.l1_loss(F(G(x)), x), ops.l1_loss(G(F(y)), y))


def identity_loss(G: Network, F: Network, x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    return ops.add(ops.l1_loss(F(x), x), ops.l1_loss(G(y), y))


def _check_finite(name: str, t: Tensor) -> float:
    v = float(t.item())
    if not np.isfinite(v):
        raise NumericalError(f"loss term {name} is not finite ({v})")
    return v


class ReplayBuffer:
    """Pool of previously generated patches fed to the discriminator."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size, self.rng = size, rng
        self.items: list[np.ndarray] = []

    def push_pop(self, fake: np.ndarray) -> np.ndarray:
        if self.size == 0:
            return fake
        if len(self.items) < self.size:
            self.items.append(fake.copy())
            return fake
        if self.rng.random() < 0.5:
            i = int(self.rng.integers(self.size))
            old, self.items[i] = self.items[i], fake.copy()
            return old
        return fake


def _freeze(nets: Sequence[Network], flag: bool) -> None:
    for n in nets:
        for p in n.parameters():
            p.requires_grad = flag


def _grads_of(net: Network) -> list[np.ndarray | None]:
    return [p.grad for p in net.parameters()]


def generator_terms(nets: CycleNets, x, y, cfg: CycleTrainConfig, fake_y=None, fake_x=None) -> dict[str, Tensor]:
    """Weighted-objective terms for G and F; zero-weight terms are not evaluated."""
    x, y = _as_tensor(x), _as_tensor(y)
    fake_y = nets.G(x) if fake_y is None else fake_y
    fake_x = nets.F(y) if fake_x is None else fake_x
    terms: dict[str, Tensor] = {}
    if cfg.w_adv:
        terms["adv_g"] = generator_adversarial_loss(nets.D_Y, fake_y)
        terms["adv_f"] = generator_adversarial_loss(nets.D_X, fake_x)
    if cfg.w_cyc:
        terms["cyc"] = ops.add(ops.l1_loss(nets.F(fake_y), x), ops.l1_loss(nets.G(fake_x), y))
    if cfg.w_id:
        terms["idt"] = identity_loss(nets.G, nets.F, x, y)
    return terms


def _weighted(terms: dict[str, Tensor], cfg: CycleTrainConfig) -> Tensor | None:
    w = {"adv_g": cfg.w_adv, "adv_f": cfg.w_adv, "cyc": cfg.w_cyc, "idt": cfg.w_id}
    total = None
    for k in ("adv_g", "adv_f", "cyc", "idt"):
        if k in terms:
            part = ops.mul(terms[k], np.float32(w[k]))
            total = part if total is None else ops.add(total, part)
    return total


def generator_objective(nets: CycleNets, x, y, cfg: CycleTrainConfig) -> float:
    """Value of the weighted G/F objective with the current parameters (no gradients)."""
    total = _weighted(generator_terms(nets, x, y, cfg), cfg)
    return 0.0 if total is None else float(total.item())


def cyclegan_step(nets: CycleNets, batches: tuple[np.ndarray, np.ndarray], opt_states: dict[str, AdamState],
                  cfg: CycleTrainConfig, lr: float | None = None, replay: tuple[ReplayBuffer, ReplayBuffer] | None = None
                  ) -> LossReport:
    """One alternating update: D_X and D_Y first, then G and F jointly."""
    xb, yb = batches
    x, y = _as_tensor(xb), _as_tensor(yb)
    if x.shape[0] != 1 or y.shape[0] != 1:
        raise PreconditionError("cyclegan_step expects one patch per domain")
    rep = LossReport()
    for n in nets.networks().values():
        n.zero_grad()

    with Tape() as tape_g:
        fake_y = nets.G(x)
        fake_x = nets.F(y)

        # discriminators, on detached translations
        pool_x, pool_y = replay if replay is not None else (None, None)
        fy = fake_y.data if pool_y is None else pool_y.push_pop(fake_y.data)
        fx = fake_x.data if pool_x is None else pool_x.push_pop(fake_x.data)
        d_grads = {"D_X": None, "D_Y": None}
        if cfg.w_adv:
            with Tape() as tape_d:
                ld_y = discriminator_loss(nets.D_Y, y, Tensor(fy))
                ld_x = discriminator_loss(nets.D_X, x, Tensor(fx))
                rep.d_y = _check_finite("d_y", ld_y)
                rep.d_x = _check_finite("d_x", ld_x)
                ld = ops.mul(ops.add(ld_x, ld_y), np.float32(cfg.w_adv))
            tape_d.backward(ld)
            d_grads = {"D_X": _grads_of(nets.D_X), "D_Y": _grads_of(nets.D_Y)}
        for k in ("D_X", "D_Y"):
            net = getattr(nets, k)
            grads = d_grads[k] or [None] * len(net.params)
            adam_step(net.parameters(), grads, opt_states[k], lr=lr)
            net.step += 1

        # generators, against the updated discriminators
        _freeze([nets.D_X, nets.D_Y], False)
        try:
            terms = generator_terms(nets, x, y, cfg, fake_y, fake_x)
            for k, t in terms.items():
                setattr(rep, k, _check_finite(k, t))
            total = _weighted(terms, cfg)
        finally:
            _freeze([nets.D_X, nets.D_Y], True)
    if total is not None:
        rep.total = _check_finite("total", total)
        tape_g.backward(total)
    for k in ("G", "F"):
        net = getattr(nets, k)
        adam_step(net.parameters(), _grads_of(net), opt_states[k], lr=lr)
        net.step += 1
    for n in nets.networks().values():
        n.zero_grad()
    return rep


# ----------------------------------------------------------------------------
# patch sampling


class MaskedPatchSampler:
    """Uniform over volumes, then uniform over origins whose patch centre is in the head mask."""

    def __init__(self, volumes: Sequence[Volume], patch: int, rng: np.random.Generator):
        self.volumes = list(volumes)
        self.patch, self.rng = patch, rng
        if not self.volumes:
            raise PreconditionError("patch sampler needs at least one volume")
        self.origins = []
        for i, v in enumerate(self.volumes):
            if min(v.extent) < patch:
                raise ConfigError(f"patch size {patch} exceeds volume {i} extent {v.extent}")
            hi = tuple(e - patch for e in v.extent)
            h = patch // 2
            if v.mask is not None:
                sub = v.mask[h:hi[0] + h + 1, h:hi[1] + h + 1, h:hi[2] + h + 1]
                org = np.argwhere(sub).astype(np.int32)
            else:
                org = np.zeros((0, 3), dtype=np.int32)
            if len(org) == 0:
                org = np.argwhere(np.ones(tuple(x + 1 for x in hi), dtype=bool)).astype(np.int32)
            self.origins.append(org)

    def sample(self) -> np.ndarray:
        i = int(self.rng.integers(len(self.volumes)))
        o = self.origins[i][int(self.rng.integers(len(self.origins[i])))]
        p = self.patch
        return self.volumes[i].data[None, :, o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p].copy()


# ----------------------------------------------------------------------------
# training


@dataclass
class CycleResult:
    nets: CycleNets
    history: list[LossReport] = field(default_factory=list)

    @property
    def G(self) -> GeneratorNet:
        return self.nets.G

    @property
    def F(self) -> GeneratorNet:
        return self.nets.F


def loss_history_csv(history: Sequence[LossReport]) -> str:
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(LOSS_COLUMNS)
    for r in history:
        wr.writerow(r.row())
    return out.getvalue()


def train_cyclegan(domain_x: DomainSet | Sequence[Volume], domain_y: DomainSet | Sequence[Volume],
                   cfg: CycleTrainConfig, checkpoint_dir: str | Path | None = None,
                   on_step: Callable[[LossReport], None] | None = None, timing_log=None) -> CycleResult:
    """Train G: X -> Y and F: Y -> X on z-scored volumes for ``epochs * steps_per_epoch`` steps."""
    cfg.validate()
    vx, vy = list(domain_x), list(domain_y)
    if not vx or not vy:
        raise PreconditionError("both domains must be non-empty")
    rng = np.random.default_rng([cfg.seed, 0xC1C])
    sx = MaskedPatchSampler(vx, cfg.patch_size, rng)
    sy = MaskedPatchSampler(vy, cfg.patch_size, rng)
    nets = build_cycle_nets(cfg, vx[0].channels)
    states = init_opt_states(nets, cfg)
    replay = None
    if cfg.replay_buffer:
        replay = (ReplayBuffer(cfg.replay_buffer, rng), ReplayBuffer(cfg.replay_buffer, rng))
    history: list[LossReport] = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for step in range(cfg.steps_per_epoch):
            rep = cyclegan_step(nets, (sx.sample(), sy.sample()), states, cfg, lr=lr, replay=replay)
            rep.epoch, rep.step = epoch, step
            history.append(rep)
            if on_step is not None:
                on_step(rep)
        last = history[-1]
        msg = (f"cyclegan epoch {epoch + 1}/{cfg.epochs} adv_g={last.adv_g:.4f} cyc={last.cyc:.4f} "
               f"idt={last.idt:.4f} d_x={last.d_x:.4f} d_y={last.d_y:.4f}")
        log.info(msg)
        if timing_log is not None:
            timing_log.write(f"cyclegan epoch={epoch + 1} wall={time.perf_counter() - t0:.3f}\n")
        if checkpoint_dir is not None:
            d = Path(checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            for name, net in nets.networks().items():
                (d / f"{name}.vsck").write_bytes(save_params(net))
    return CycleResult(nets, history)


# ----------------------------------------------------------------------------
# inference


def _starts(extent: int, tile: int, overlap: int) -> list[int]:
    step = tile - overlap
    s = list(range(0, extent - tile + 1, step))
    if s[-1] != extent - tile:
        s.append(extent - tile)
    return s


def _whole_pass(net: Network, data: np.ndarray, multiple: int = 4) -> np.ndarray:
    ext = data.shape[1:]
    padded = [(-e) % multiple for e in ext]
    x = data[None]
    if any(padded):
        x = np.pad(x, ((0, 0), (0, 0)) + tuple((0, p) for p in padded), mode="reflect")
    out = net(Tensor(x)).data[0]
    return out[:, :ext[0], :ext[1], :ext[2]]


def translate_volume(net: Network, volume: Volume, tile: int | None = None, overlap: int = 8) -> Volume:
    """Apply a generator to a whole volume, optionally in overlapping tiles averaged uniformly.

    ``tile=None`` or a volume smaller than ``tile`` runs one whole-volume pass.
    """
    if tile is not None:
        if tile % 4:
            raise PreconditionError(f"tile must be divisible by 4, got {tile}")
        if not 0 <= overlap < tile:
            raise PreconditionError(f"overlap must be in [0, tile), got {overlap}")
    data = volume.data
    if tile is None or min(volume.extent) < tile:
        out = _whole_pass(net, data)
    else:
        acc = np.zeros((net.cfg.out_channels,) + volume.extent, dtype=np.float64)
        cnt = np.zeros(volume.extent, dtype=np.float64)
        for a in _starts(volume.extent[0], tile, overlap):
            for b in _starts(volume.extent[1], tile, overlap):
                for c in _starts(volume.extent[2], tile, overlap):
                    sl = (slice(a, a + tile), slice(b, b + tile), slice(c, c + tile))
                    acc[(slice(None),) + sl] += net(Tensor(data[(slice(None),) + sl][None])).data[0]
                    cnt[sl] += 1.0
        out = (acc / cnt).astype(np.float32)
    return volume.with_data(np.ascontiguousarray(out, dtype=np.float32), provenance=f"{volume.provenance}+translated")


def config_dict(cfg: CycleTrainConfig) -> dict:
    return asdict(cfg)

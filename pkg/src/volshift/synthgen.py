"""Deterministic synthetic two-channel head volumes with spherical lesions.

Anatomy (head ellipsoid, tissue classes, lesions) depends only on the subject
seed, so the same subject rendered under two domain specs has identical
geometry and labels; the domain spec only changes the intensity curve, the
bias field and the noise.

Channel 0 is T1-like, channel 1 is FLAIR-like (lesions bright).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from volshift.errors import ConfigError, PreconditionError
from volshift.volio import DomainSet, Volume

N_COSINES = 20
# tissue intensities (CSF-like, GM-like, WM-like) before the domain curve
T1_LEVELS = (0.22, 0.5, 0.78)
FLAIR_LEVELS = (0.12, 0.5, 0.36)
LESION_CONTRAST = 0.5
TEXTURE_AMP = 0.04
HEAD_AXES = (0.86, 0.74, 0.8)
LESION_SHELL = (0.25, 0.7)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Acquisition model of one synthetic domain.

    Per channel the head intensities become ``gain * clip(v, 0, 1) ** gamma + offset``,
    multiplied by a smooth bias field ``1 + bias_amplitude * b(x)`` (``b`` in
    [-1, 1] with frequencies up to ``bias_smoothness`` cycles per volume), plus
    Gaussian noise of std ``noise_sigma`` (rectified in the background).
    """

    name: str
    gain: tuple[float, float] = (1.0, 1.0)
    gamma: tuple[float, float] = (1.0, 1.0)
    offset: tuple[float, float] = (0.0, 0.0)
    bias_amplitude: float = 0.0
    bias_smoothness: float = 1.0
    noise_sigma: float = 0.0
    lesion_count: tuple[int, int] = (4, 8)
    lesion_radius: tuple[float, float] = (2.5, 5.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.gamma) <= 0:
            raise ConfigError(f"{self.name}: gamma must be > 0, got {self.gamma}")
        if self.noise_sigma < 0:
            raise ConfigError(f"{self.name}: noise_sigma must be >= 0")
        if self.bias_amplitude < 0 or self.bias_amplitude >= 1:
            raise ConfigError(f"{self.name}: bias_amplitude must be in [0, 1)")
        if min(self.lesion_radius) < 1 or self.lesion_radius[0] > self.lesion_radius[1]:
            raise ConfigError(f"{self.name}: lesion radii must satisfy 1 <= min <= max")
        if min(self.lesion_count) < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise ConfigError(f"{self.name}: bad lesion count range {self.lesion_count}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_specs() -> list[SyntheticDomainSpec]:
    """Three domains with distinct intensity curves."""
    return [
        SyntheticDomainSpec("A", gain=(1.0, 1.0), gamma=(1.0, 1.0), bias_amplitude=0.1, noise_sigma=0.02, seed=11),
        SyntheticDomainSpec("B", gain=(0.9, 1.1), gamma=(2.5, 0.35), offset=(0.05, 0.0),
                            bias_amplitude=0.15, noise_sigma=0.025, seed=22),
        SyntheticDomainSpec("C", gain=(1.2, 0.8), gamma=(0.5, 2.0), offset=(0.0, 0.05),
                            bias_amplitude=0.1, noise_sigma=0.03, seed=33),
    ]


@dataclass
class Anatomy:
    head: np.ndarray
    tissue: np.ndarray
    texture: np.ndarray
    lesions: np.ndarray
    spheres: list[tuple[tuple[float, float, float], float]] = field(default_factory=list)


def _grid(extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = (np.arange(extent) + 0.5) / extent * 2 - 1
    return np.meshgrid(u, u, u, indexing="ij", sparse=True)


def _cosine_field(rng: np.random.Generator, grid, n: int, max_freq: float) -> np.ndarray:
    """Sum of ``n`` random plane cosines with frequencies below ``max_freq`` cycles per unit."""
    x, y, z = grid
    out = np.zeros((x.shape[0], y.shape[1], z.shape[2]))
    for _ in range(n):
        k = rng.normal(size=3)
        k *= rng.uniform(0.3, 1.0) * max_freq / np.linalg.norm(k)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(np.pi * (k[0] * x + k[1] * y + k[2] * z) + phase) / (1 + np.linalg.norm(k))
    return out


def head_radius(grid, axes) -> np.ndarray:
    x, y, z = grid
    return np.sqrt((x / axes[0]) ** 2 + (y / axes[1]) ** 2 + (z / axes[2]) ** 2)


def make_anatomy(subject_seed: int, extent: int, lesion_count=(4, 8), lesion_radius=(2.5, 5.0)) -> Anatomy:
    rng = np.random.default_rng([int(subject_seed), 0xA7])
    grid = _grid(extent)
    axes = tuple(a * rng.uniform(0.95, 1.05) for a in HEAD_AXES)
    r = head_radius(grid, axes)
    head = r <= 1.0

    f = _cosine_field(rng, grid, N_COSINES, 4.0)
    # tissue: outer band CSF-like, mix GM/WM inside, driven by radius and the random field
    s = f / (f[head].std() + 1e-12) * 0.18 + (1.0 - r)
    t1, t2 = np.quantile(s[head], [0.25, 0.6])
    tissue = np.where(s < t1, 0, np.where(s < t2, 1, 2)).astype(np.uint8)
    tissue[~head] = 0
    texture = _cosine_field(rng, grid, 8, 10.0)
    texture /= np.abs(texture).max() + 1e-12

    lesions = np.zeros((extent,) * 3, dtype=bool)
    spheres: list[tuple[tuple[float, float, float], float]] = []
    n_les = int(rng.integers(lesion_count[0], lesion_count[1] + 1))
    idx = (np.arange(extent) + 0.5)
    cand = np.argwhere((r >= LESION_SHELL[0]) & (r <= LESION_SHELL[1]) & (tissue == 2))
    tries = 0
    while len(spheres) < n_les and tries < 200 * max(n_les, 1) and len(cand):
        tries += 1
        rad = float(rng.uniform(*lesion_radius))
        c = cand[rng.integers(len(cand))] + 0.5
        c = c + rng.uniform(-0.5, 0.5, 3)
        if np.any(c - rad < 1) or np.any(c + rad > extent - 1):
            continue
        if any(np.linalg.norm(c - np.array(c2)) < rad + r2 + 1.0 for c2, r2 in spheres):
            continue
        d2 = ((idx[:, None, None] - c[0]) ** 2 + (idx[None, :, None] - c[1]) ** 2
              + (idx[None, None, :] - c[2]) ** 2)
        ball = d2 <= rad * rad
        if not np.all(head[ball]):
            continue
        lesions |= ball
        spheres.append((tuple(float(v) for v in c), rad))
    return Anatomy(head, tissue, texture, lesions, spheres)


def base_intensities(anat: Anatomy) -> np.ndarray:
    """Domain-free ``[2, D, H, W]`` contrasts in roughly [0, 1]; zero outside the head."""
    t1 = np.asarray(T1_LEVELS)[anat.tissue]
    fl = np.asarray(FLAIR_LEVELS)[anat.tissue]
    t1 = t1 + TEXTURE_AMP * anat.texture
    fl = fl + TEXTURE_AMP * anat.texture + LESION_CONTRAST * anat.lesions
    out = np.stack([t1, fl])
    out[:, ~anat.head] = 0.0
    return out


def apply_domain(base: np.ndarray, head: np.ndarray, spec: SyntheticDomainSpec, subject_seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(spec.seed), int(subject_seed), 0xD0])
    extent = base.shape[1]
    out = np.zeros_like(base)
    bias = np.ones(base.shape[1:])
    if spec.bias_amplitude > 0:
        b = _cosine_field(rng, _grid(extent), 4, spec.bias_smoothness)
        bias = 1.0 + spec.bias_amplitude * b / (np.abs(b).max() + 1e-12)
    for c in range(base.shape[0]):
        v = spec.gain[c] * np.clip(base[c], 0.0, 1.0) ** spec.gamma[c] + spec.offset[c]
        out[c] = np.where(head, v * bias, 0.0)
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, out.shape)
        out = np.where(head, out + noise, np.abs(noise))
    return out


def generate_subject(spec: SyntheticDomainSpec, subject_seed: int, extent: int = 64) -> tuple[Volume, np.ndarray]:
    """One subject under one domain; the label mask is also attached to the volume."""
    if extent % 16 or extent < 16:
        raise PreconditionError(f"extent must be a positive multiple of 16, got {extent}")
    anat = make_anatomy(subject_seed, extent, spec.lesion_count, spec.lesion_radius)
    data = apply_domain(base_intensities(anat), anat.head, spec, subject_seed)
    labels = anat.lesions.astype(np.uint8)
    vol = Volume(data.astype(np.float32), labels=labels, provenance=f"{spec.name}/{subject_seed}")
    return vol, labels


def subject_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def generate_dataset(specs: list[SyntheticDomainSpec], n_subjects: int = 20, extent: int = 64,
                     master_seed: int = 0) -> list[DomainSet]:
    names = [s.name for s in specs]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"duplicate domain names: {dup}")
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    seeds = [subject_seed(master_seed, s) for s in range(n_subjects)]
    out = []
    for spec in specs:
        vols = []
        for s, ss in enumerate(seeds):
            vol, _ = generate_subject(spec, ss, extent)
            vol.provenance = f"{spec.name}/{s:02d}"
            vols.append(vol)
        out.append(DomainSet(spec.name, vols))
    return out

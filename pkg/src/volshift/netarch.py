"""Generator, PatchGAN-style discriminator and additive-skip 3-D U-Net.

All three are fully convolutional and hold their weights in a flat,
ordered ``name -> Tensor`` map, which is also the checkpoint layout.

Generator layer sequence (``base_filters = C``)::

    conv 7^3 reflect-pad 3 -> C        relu
    conv 3^3 stride 2      -> 2C       relu
    conv 3^3 stride 2      -> 4C       relu
    n x residual block (two 3^3 convs at 4C, additive shortcut)
    conv 3^3               -> 4C       relu   (refinement, no upsampling)
    upsample x2 + conv 3^3 -> 2C       relu
    upsample x2 + conv 3^3 -> C        relu
    conv 7^3 reflect-pad 3 -> out      no activation
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from volshift.errors import ConfigError, IncompatibleCheckpointError, ParseError, ShapeError
from volshift.voltensor import ops
from volshift.voltensor.ops import PadSpec
from volshift.voltensor.tensor import Tensor

CHECKPOINT_MAGIC = b"VSCK1"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | tconv | upconv | resblock | pool
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: object = 0
    activation: str | None = "relu"
    norm: bool = False


class Network:
    """Ordered parameter map plus a forward pass."""

    kind = "network"

    def __init__(self, cfg):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.layers: list[LayerSpec] = []
        self.step = 0
        self._rng = np.random.default_rng(cfg.seed)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _add(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv_params(self, name: str, cout: int, cin: int, k: int, transposed: bool = False) -> None:
        shape = (cin, cout, k, k, k) if transposed else (cout, cin, k, k, k)
        self._add(f"{name}.weight", self._init_weight(shape, cin * k ** 3))
        self._add(f"{name}.bias", np.zeros(cout))

    def _init_weight(self, shape, fan_in: int) -> np.ndarray:
        return self._rng.normal(0.0, self.cfg.init_std, size=shape)

    def _conv(self, x: Tensor, name: str, stride: int = 1, pad=0) -> Tensor:
        return ops.conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, pad=pad)

    def arch_description(self) -> dict:
        cfg = {k: v for k, v in asdict(self.cfg).items() if k not in ("seed", "init_std")}
        return {
            "kind": self.kind,
            "cfg": cfg,
            "params": [[n, list(p.shape)] for n, p in self.params.items()],
        }

    def arch_hash(self) -> bytes:
        blob = json.dumps(self.arch_description(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


# ----------------------------------------------------------------------------
# generator


@dataclass
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 2
    base_filters: int = 32
    n_resblocks: int = 10
    use_resize_conv: bool = True
    instance_norm: bool = False
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.base_filters < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("generator filters and channels must be >= 1")
        if self.n_resblocks < 0:
            raise ConfigError("n_resblocks must be >= 0")


class GeneratorNet(Network):
    kind = "generator"

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        super().__init__(cfg)
        c = cfg.base_filters
        up_kind = "upconv" if cfg.use_resize_conv else "tconv"
        L = [
            LayerSpec("L1", "conv", cfg.in_channels, c, 7, 1, PadSpec.reflect(3), "relu", cfg.instance_norm),
            LayerSpec("L2", "conv", c, 2 * c, 3, 2, 1, "relu", cfg.instance_norm),
            LayerSpec("L3", "conv", 2 * c, 4 * c, 3, 2, 1, "relu", cfg.instance_norm),
        ]
        L += [LayerSpec(f"res{i}", "resblock", 4 * c, 4 * c, 3, 1, 1, "relu", cfg.instance_norm)
              for i in range(cfg.n_resblocks)]
        L += [
            LayerSpec("L14", "conv", 4 * c, 4 * c, 3, 1, 1, "relu", cfg.instance_norm),
            LayerSpec("L16", up_kind, 4 * c, 2 * c, 3, 2, 1, "relu", cfg.instance_norm),
            LayerSpec("L17", up_kind, 2 * c, c, 3, 2, 1, "relu", cfg.instance_norm),
            LayerSpec("L18", "conv", c, cfg.out_channels, 7, 1, PadSpec.reflect(3), None, False),
        ]
        self.layers = L
        for spec in L:
            if spec.kind == "resblock":
                self._conv_params(f"{spec.name}.a", spec.out_ch, spec.in_ch, 3)
                self._conv_params(f"{spec.name}.b", spec.out_ch, spec.out_ch, 3)
            else:
                self._conv_params(spec.name, spec.out_ch, spec.in_ch, spec.kernel,
                                  transposed=spec.kind == "tconv")

    def _post(self, h: Tensor, spec: LayerSpec) -> Tensor:
        if spec.norm:
            h = ops.instance_norm3d(h)
        return ops.activation(h, spec.activation)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"generator expects [N, {self.cfg.in_channels}, D, H, W], got {x.shape}")
        for ax, e in zip("DHW", x.shape[2:]):
            if e % 4:
                raise ShapeError(f"generator input extent {ax}={e} must be divisible by 4")
        h = x
        for spec in self.layers:
            if spec.kind == "conv":
                h = self._post(self._conv(h, spec.name, spec.stride, spec.pad), spec)
            elif spec.kind == "resblock":
                r = self._post(self._conv(h, f"{spec.name}.a", 1, 1), spec)
                r = self._conv(r, f"{spec.name}.b", 1, 1)
                if spec.norm:
                    r = ops.instance_norm3d(r)
                h = ops.add(h, r)
            else:
                h = self.upsample_stage(h, spec)
        return h

    def upsample_stage(self, h: Tensor, spec: LayerSpec | str) -> Tensor:
        """One x2 upsampling layer: nearest resize + 3^3 conv, or a cropped stride-2 transposed conv."""
        if isinstance(spec, str):
            spec = next(s for s in self.layers if s.name == spec)
        if spec.kind == "upconv":
            h = ops.upsample_nearest3d(h, 2)
            return self._post(self._conv(h, spec.name, 1, 1), spec)
        if spec.kind == "tconv":
            size = tuple(2 * e for e in h.shape[2:])
            h = ops.conv_transpose3d(h, self.params[f"{spec.name}.weight"],
                                     self.params[f"{spec.name}.bias"], stride=2)
            return self._post(ops.crop3d(h, (1, 1, 1), size), spec)
        raise ShapeError(f"layer {spec.name} is not an upsampling layer")


def generator_param_count(cfg: GeneratorConfig) -> int:
    """Closed-form parameter count of :class:`GeneratorNet` (weights + biases)."""
    c, i, o = cfg.base_filters, cfg.in_channels, cfg.out_channels

    def conv(cin, cout, k):
        return cin * cout * k ** 3 + cout

    return (conv(i, c, 7) + conv(c, 2 * c, 3) + conv(2 * c, 4 * c, 3)
            + cfg.n_resblocks * 2 * conv(4 * c, 4 * c, 3)
            + conv(4 * c, 4 * c, 3) + conv(4 * c, 2 * c, 3) + conv(2 * c, c, 3)
            + conv(c, o, 7))


# ----------------------------------------------------------------------------
# discriminator


@dataclass
class DiscriminatorConfig:
    in_channels: int = 2
    base_filters: int = 64
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.base_filters < 1 or self.in_channels < 1:
            raise ConfigError("discriminator filters and channels must be >= 1")


def same_pads(extent: int, k: int, s: int) -> tuple[int, int]:
    """Zero padding giving ``ceil(extent / s)`` outputs ('same' convention, extra voxel after)."""
    out = -(-extent // s)
    total = max((out - 1) * s + k - extent, 0)
    return total // 2, total - total // 2


def discriminator_output_extent(extent: int) -> int:
    e = extent
    for s in (2, 2, 2, 1, 1):
        e = -(-e // s)
    return e


class DiscriminatorNet(Network):
    kind = "discriminator"
    MIN_EXTENT = 8

    def __init__(self, cfg: DiscriminatorConfig):
        cfg.validate()
        super().__init__(cfg)
        b = cfg.base_filters
        self.layers = [
            LayerSpec("L1", "conv", cfg.in_channels, b, 4, 2, "same", "leaky_relu", False),
            LayerSpec("L2", "conv", b, 2 * b, 3, 2, "same", "leaky_relu", True),
            LayerSpec("L3", "conv", 2 * b, 4 * b, 3, 2, "same", "leaky_relu", True),
            LayerSpec("L4", "conv", 4 * b, 8 * b, 3, 1, "same", "relu", True),
            LayerSpec("L5", "conv", 8 * b, 1, 4, 1, "same", "sigmoid", False),
        ]
        for spec in self.layers:
            self._conv_params(spec.name, spec.out_ch, spec.in_ch, spec.kernel)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"discriminator expects [N, {self.cfg.in_channels}, D, H, W], got {x.shape}")
        for ax, e in zip("DHW", x.shape[2:]):
            if e < self.MIN_EXTENT:
                raise ShapeError(
                    f"discriminator input extent {ax}={e} is smaller than its total stride {self.MIN_EXTENT}")
        if np.prod([discriminator_output_extent(e) for e in x.shape[2:]]) < 2:
            raise ShapeError(f"discriminator input {x.shape[2:]} leaves a single voxel for instance norm; "
                             "some extent must exceed 8")
        h = x
        for spec in self.layers:
            pads = tuple(same_pads(e, spec.kernel, spec.stride) for e in h.shape[2:])
            h = self._conv(h, spec.name, spec.stride, pads)
            if spec.norm:
                h = ops.instance_norm3d(h)
            h = ops.activation(h, spec.activation)
        return h


# ----------------------------------------------------------------------------
# U-Net


@dataclass
class UNetConfig:
    in_channels: int = 2
    n_classes: int = 2
    base_filters: int = 32
    seed: int = 0
    init_std: float = 0.0  # unused: He-uniform init

    def validate(self) -> None:
        if self.base_filters < 1 or self.in_channels < 1 or self.n_classes < 2:
            raise ConfigError("U-Net needs base_filters >= 1, in_channels >= 1, n_classes >= 2")

    @property
    def filters(self) -> tuple[int, int, int, int]:
        b = self.base_filters
        return (b, 2 * b, 4 * b, 8 * b)


class SegmenterNet(Network):
    """U-Net whose skip connections are summed into the decoder input."""

    kind = "unet"
    DIVISOR = 16

    def __init__(self, cfg: UNetConfig):
        cfg.validate()
        super().__init__(cfg)
        f = cfg.filters
        cin = cfg.in_channels
        for i, n in enumerate(f):
            self.layers.append(LayerSpec(f"enc{i + 1}", "encode", cin, n, 3, 1, 1))
            self._conv_params(f"enc{i + 1}.a", n, cin, 3)
            self._conv_params(f"enc{i + 1}.b", n, n, 3)
            cin = n
        self.layers.append(LayerSpec("L5", "conv", cin, f[3], 3, 1, 1))
        self._conv_params("L5", f[3], cin, 3)
        self.layers.append(LayerSpec("L6", "conv", f[3], f[3], 3, 1, 1))
        self._conv_params("L6", f[3], f[3], 3)
        prev = f[3]
        for j, n in enumerate(reversed(f)):
            skip_ch = f[3 - j]
            if skip_ch != n:  # pragma: no cover - structural guard
                raise ShapeError(f"additive skip at dec{j + 1}: {skip_ch} vs {n} channels")
            self.layers.append(LayerSpec(f"dec{j + 1}", "decode", prev, n, 3, 1, 1))
            self._conv_params(f"dec{j + 1}.up", n, prev, 2, transposed=True)
            self._conv_params(f"dec{j + 1}.a", n, n, 3)
            self._conv_params(f"dec{j + 1}.b", n, n, 3)
            prev = n
        self.layers.append(LayerSpec("L11", "conv", prev, cfg.n_classes, 1, 1, 0, "softmax"))
        self._conv_params("L11", cfg.n_classes, prev, 1)

    def _init_weight(self, shape, fan_in: int) -> np.ndarray:
        lim = np.sqrt(6.0 / fan_in)
        return self._rng.uniform(-lim, lim, size=shape)

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"U-Net expects [N, {self.cfg.in_channels}, D, H, W], got {x.shape}")
        for ax, e in zip("DHW", x.shape[2:]):
            if e % self.DIVISOR:
                raise ShapeError(f"U-Net input extent {ax}={e} must be divisible by {self.DIVISOR}")
        skips = []
        h = x
        for i in range(4):
            h = ops.relu(self._conv(h, f"enc{i + 1}.a", 1, 1))
            h = ops.relu(self._conv(h, f"enc{i + 1}.b", 1, 1))
            skips.append(h)
            h = ops.maxpool3d(h, 2)
        h = ops.relu(self._conv(h, "L5", 1, 1))
        h = ops.relu(self._conv(h, "L6", 1, 1))
        for j in range(4):
            h = ops.conv_transpose3d(h, self.params[f"dec{j + 1}.up.weight"],
                                     self.params[f"dec{j + 1}.up.bias"], stride=2)
            skip = skips[3 - j]
            if skip.shape != h.shape:  # pragma: no cover - guarded by divisibility
                raise ShapeError(f"skip {skip.shape} vs decoder {h.shape}")
            h = ops.add(h, skip)
            h = ops.relu(self._conv(h, f"dec{j + 1}.a", 1, 1))
            h = ops.relu(self._conv(h, f"dec{j + 1}.b", 1, 1))
        return self._conv(h, "L11", 1, 0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.softmax_channels(self.logits(x))


def build_generator(cfg: GeneratorConfig | None = None, **overrides) -> GeneratorNet:
    cfg = cfg or GeneratorConfig(**overrides)
    return GeneratorNet(cfg)


def build_discriminator(cfg: DiscriminatorConfig | None = None, **overrides) -> DiscriminatorNet:
    cfg = cfg or DiscriminatorConfig(**overrides)
    return DiscriminatorNet(cfg)


def build_unet(cfg: UNetConfig | None = None, **overrides) -> SegmenterNet:
    cfg = cfg or UNetConfig(**overrides)
    return SegmenterNet(cfg)


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class NetworkParams:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    arch_hash: bytes = b"\0" * 8
    seed: int = 0
    step: int = 0


def save_params(net: Network) -> bytes:
    """Serialize weights as ``VSCK1`` (little-endian) bytes."""
    out = [CHECKPOINT_MAGIC, net.arch_hash(), struct.pack("<QQ", net.cfg.seed & (2 ** 64 - 1), net.step)]
    for name, p in net.params.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", p.ndim))
        out.append(struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def parse_params(blob: bytes) -> NetworkParams:
    n = len(blob)
    header = len(CHECKPOINT_MAGIC) + 8 + 16
    if n < header:
        raise ParseError(f"checkpoint truncated: {n} bytes, header needs {header}", offset=n)
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {blob[:5]!r}", offset=0)
    arch = bytes(blob[5:13])
    seed, step = struct.unpack_from("<QQ", blob, 13)
    pos = header
    tensors: dict[str, np.ndarray] = {}

    def need(k: int, what: str) -> None:
        if pos + k > n:
            raise ParseError(f"checkpoint truncated inside {what}: need {k} bytes, {n - pos} left", offset=pos)

    while pos < n:
        need(4, "name length")
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(ln, "name")
        name = bytes(blob[pos:pos + ln]).decode("utf-8")
        pos += ln
        need(4, f"rank of {name}")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(4 * rank, f"extents of {name}")
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape))
        need(nbytes, f"data of {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return NetworkParams(tensors, arch, seed, step)


def load_params(blob: bytes, net: Network) -> Network:
    """Load weights into ``net``; nothing is modified unless the whole file validates."""
    ck = parse_params(blob)
    if ck.arch_hash != net.arch_hash():
        raise IncompatibleCheckpointError(
            f"checkpoint architecture {ck.arch_hash.hex()} != network {net.arch_hash().hex()}")
    if list(ck.tensors) != list(net.params):
        raise IncompatibleCheckpointError("checkpoint parameter names differ from network")
    for name, arr in ck.tensors.items():
        if arr.shape != net.params[name].shape:
            raise IncompatibleCheckpointError(f"{name}: shape {arr.shape} != {net.params[name].shape}")
    for name, arr in ck.tensors.items():
        net.params[name].data = arr.copy()
    net.step = int(ck.step)
    return net


def copy_params(src: Network, dst: Network) -> None:
    for name, p in src.params.items():
        dst.params[name].data = p.data.copy()

"""Micro-scale DenseNet / EfficientNet analogs with an FC classification head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MicroDenseConfig:
    input_resolution: int = 64
    stem_channels: int = 16
    blocks: tuple[tuple[int, int], ...] = ((4, 8), (4, 8))  # (num_layers, growth_rate)
    transition_compression: float = 0.5
    head_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        if self.input_resolution < 8:
            raise ConfigError(f"input_resolution must be >= 8, got {self.input_resolution}")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be >= 1")
        if not self.blocks:
            raise ConfigError("at least one dense block is required")
        for i, (n, k) in enumerate(self.blocks):
            if n < 1 or k < 1:
                raise ConfigError(f"block {i}: num_layers and growth_rate must be >= 1, got ({n}, {k})")
        if not 0 < self.transition_compression <= 1:
            raise ConfigError("transition_compression must lie in (0, 1]")


@dataclass(frozen=True)
class MBConvStage:
    expansion_ratio: int
    out_channels: int
    stride: int
    repeats: int


@dataclass(frozen=True)
class MicroEffConfig:
    input_resolution: int = 64
    stem_channels: int = 16
    blocks: tuple[MBConvStage, ...] = (
        MBConvStage(1, 16, 1, 1),
        MBConvStage(4, 24, 2, 2),
        MBConvStage(4, 32, 2, 2),
    )
    head_hidden: tuple[int, ...] = (32,)
    stem_stride: int = 2

    def __post_init__(self):
        if self.input_resolution < 8:
            raise ConfigError(f"input_resolution must be >= 8, got {self.input_resolution}")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be >= 1")
        if self.stem_stride not in (1, 2):
            raise ConfigError("stem_stride must be 1 or 2")
        for i, b in enumerate(self.blocks):
            if b.expansion_ratio < 1:
                raise ConfigError(f"stage {i}: expansion_ratio must be >= 1")
            if b.stride not in (1, 2):
                raise ConfigError(f"stage {i}: stride must be 1 or 2")
            if b.out_channels < 1 or b.repeats < 1:
                raise ConfigError(f"stage {i}: out_channels and repeats must be >= 1")


@dataclass(frozen=True)
class ScalingCoefficients:
    alpha: float = 1.0  # depth
    beta: float = 1.0  # width
    gamma: float = 1.0  # resolution
    phi: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1:
            raise ConfigError("scaling coefficients alpha, beta, gamma must be >= 1")
        if self.phi < 0 or int(self.phi) != self.phi:
            raise ConfigError("phi must be a non-negative integer")


ArchConfig = Union[MicroDenseConfig, MicroEffConfig]


def _ceil(x: float) -> int:
    # guards against 10 * 1.2 == 12.000000000000002
    return math.ceil(x - 1e-9)


def _round4_up(x: float) -> int:
    return max(4, 4 * _ceil(x / 4))


def compound_scale(base: MicroEffConfig, s: ScalingCoefficients) -> MicroEffConfig:
    """Scale depth, width and resolution by ``alpha**phi``, ``beta**phi``, ``gamma**phi``."""
    if s.phi == 0:
        return base
    d, w, r = s.alpha**s.phi, s.beta**s.phi, s.gamma**s.phi
    res = int(math.floor(base.input_resolution * r / 2 + 0.5)) * 2
    blocks = tuple(
        MBConvStage(b.expansion_ratio, _round4_up(b.out_channels * w), b.stride, _ceil(b.repeats * d))
        for b in base.blocks
    )
    return replace(base, input_resolution=res, stem_channels=_round4_up(base.stem_channels * w), blocks=blocks)


# --------------------------------------------------------------------------
# network


@dataclass
class Network:
    """A built backbone + FC head.

    ``params`` and ``stats`` are ordered; names are unique.  ``final_conv`` is
    the capture key of the activation maps consumed by global average pooling
    (the Grad-CAM target layer).
    """

    kind: str
    config: ArchConfig
    num_outputs: int
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)
    stats: dict[str, RunningStats] = field(default_factory=dict)
    final_conv: str = "features"

    @property
    def resolution(self) -> int:
        return self.config.input_resolution

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def check_input(self, x: Tensor) -> None:
        r = self.resolution
        if x.data.ndim not in (3, 4) or x.shape[-3:] != (3, r, r):
            raise T.ShapeError(f"network expects 3 x {r} x {r} input, got {list(x.shape)}")

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x)
        fn = _dense_features if self.kind == "dense" else _eff_features
        return fn(self, x, training)

    def head(self, feats: Tensor) -> Tensor:
        h = T.global_avg_pool(feats)
        n = len(self.config.head_hidden)
        for i in range(n + 1):
            h = T.fully_connected(h, self.params[f"head.fc{i}.w"], self.params[f"head.fc{i}.b"])
            if i < n:
                h = T.relu(h)
        return h

    def forward(self, x: Tensor, training: bool = False, capture: dict | None = None) -> Tensor:
        feats = self.features(x, training)
        if capture is not None:
            capture[self.final_conv] = feats
        return self.head(feats)

    def logits(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference-mode logits for an ``N x 3 x r x r`` array."""
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self.forward(Tensor(images[i : i + batch_size])).data)
        if not out:
            return np.zeros((0, self.num_outputs), dtype=T.FLOAT)
        return np.concatenate(out)


class _Init:
    """Deterministic Kaiming-style parameter factory."""

    def __init__(self, net: Network):
        self.net = net
        self.rng = np.random.default_rng(net.seed)

    def _add(self, name: str, arr: np.ndarray) -> None:
        if name in self.net.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.net.params[name] = Tensor(arr.astype(T.FLOAT), name=name)

    def conv(self, name: str, k_out: int, c_in: int, k: int) -> None:
        std = math.sqrt(2.0 / (c_in * k * k))
        self._add(name + ".w", self.rng.normal(0.0, std, (k_out, c_in, k, k)))

    def depthwise(self, name: str, c: int, k: int) -> None:
        std = math.sqrt(2.0 / (k * k))
        self._add(name + ".w", self.rng.normal(0.0, std, (c, k, k)))

    def bn(self, name: str, c: int) -> None:
        self._add(name + ".gamma", np.ones(c))
        self._add(name + ".beta", np.zeros(c))
        self.net.stats[name] = RunningStats.fresh(c)

    def fc(self, name: str, out: int, inp: int) -> None:
        std = math.sqrt(2.0 / inp)
        self._add(name + ".w", self.rng.normal(0.0, std, (out, inp)))
        self._add(name + ".b", np.zeros(out))


def _bn(net: Network, name: str, x: Tensor, training: bool) -> Tensor:
    return T.batchnorm2d(x, net.params[name + ".gamma"], net.params[name + ".beta"], net.stats[name], training)


def _head_init(init: _Init, cfg: ArchConfig, feat_channels: int, num_outputs: int) -> None:
    widths = [feat_channels, *cfg.head_hidden, num_outputs]
    for i in range(len(widths) - 1):
        init.fc(f"head.fc{i}", widths[i + 1], widths[i])


# --- DenseNet analog ------------------------------------------------------


def dense_block_channels(c_in: int, num_layers: int, growth: int) -> int:
    return c_in + num_layers * growth


def _transition_channels(c: int, compression: float) -> int:
    return max(1, int(math.floor(c * compression)))


def build_micro_densenet(cfg: MicroDenseConfig, num_outputs: int, seed: int = 0) -> Network:
    """stem 3x3 conv -> [dense block -> transition]* -> BN -> ReLU -> GAP -> FC head.

    Transitions (BN, ReLU, 1x1 compressing conv, 2x2 average pool) sit between
    consecutive dense blocks.
    """
    if num_outputs < 1:
        raise ConfigError("num_outputs must be >= 1")
    net = Network("dense", cfg, num_outputs, seed)
    init = _Init(net)
    size = cfg.input_resolution
    c = cfg.stem_channels
    init.conv("stem.conv", c, 3, 3)
    for b, (n, k) in enumerate(cfg.blocks):
        for layer in range(n):
            init.bn(f"block{b}.layer{layer}.bn", c + layer * k)
            init.conv(f"block{b}.layer{layer}.conv", k, c + layer * k, 3)
        c = dense_block_channels(c, n, k)
        if b < len(cfg.blocks) - 1:
            if size // 2 < 1:
                raise ConfigError(
                    f"resolution {cfg.input_resolution} too small: transition {b} would reduce {size}x{size} below 1x1"
                )
            c_out = _transition_channels(c, cfg.transition_compression)
            init.bn(f"trans{b}.bn", c)
            init.conv(f"trans{b}.conv", c_out, c, 1)
            c = c_out
            size //= 2
    init.bn("final.bn", c)
    _head_init(init, cfg, c, num_outputs)
    return net


def _dense_features(net: Network, x: Tensor, training: bool) -> Tensor:
    cfg: MicroDenseConfig = net.config
    p = net.params
    h = T.conv2d(x, p["stem.conv.w"], stride=1, padding=1)
    for b, (n, _k) in enumerate(cfg.blocks):
        feats = [h]
        for layer in range(n):
            inp = feats[0] if len(feats) == 1 else T.concat_channels(feats)
            y = T.relu(_bn(net, f"block{b}.layer{layer}.bn", inp, training))
            feats.append(T.conv2d(y, p[f"block{b}.layer{layer}.conv.w"], stride=1, padding=1))
        h = T.concat_channels(feats)
        if b < len(cfg.blocks) - 1:
            y = T.relu(_bn(net, f"trans{b}.bn", h, training))
            y = T.conv2d(y, p[f"trans{b}.conv.w"])
            h = T.avg_pool2d(y, 2)
    return T.relu(_bn(net, "final.bn", h, training))


# --- EfficientNet analog --------------------------------------------------


def build_micro_efficientnet(cfg: MicroEffConfig, num_outputs: int, seed: int = 0) -> Network:
    """stem 3x3 conv+BN+ReLU (stride ``stem_stride``) -> MBConv-lite stages -> GAP -> FC head.

    MBConv-lite: [1x1 expand+BN+ReLU] -> 3x3 depthwise+BN+ReLU -> 1x1 project+BN,
    with an additive skip when stride is 1 and channel counts match.
    """
    if num_outputs < 1:
        raise ConfigError("num_outputs must be >= 1")
    net = Network("eff", cfg, num_outputs, seed)
    init = _Init(net)
    size = (cfg.input_resolution - 1) // cfg.stem_stride + 1
    c = cfg.stem_channels
    init.conv("stem.conv", c, 3, 3)
    init.bn("stem.bn", c)
    for s, stage in enumerate(cfg.blocks):
        for r in range(stage.repeats):
            stride = stage.stride if r == 0 else 1
            name = f"stage{s}.block{r}"
            if stride == 2:
                if size < 3:
                    raise ConfigError(
                        f"resolution {cfg.input_resolution} too small: {name} cannot stride a {size}x{size} map"
                    )
                size = (size - 1) // 2 + 1
            hidden = c * stage.expansion_ratio
            if stage.expansion_ratio != 1:
                init.conv(name + ".expand", hidden, c, 1)
                init.bn(name + ".expand.bn", hidden)
            init.depthwise(name + ".dw", hidden, 3)
            init.bn(name + ".dw.bn", hidden)
            init.conv(name + ".project", stage.out_channels, hidden, 1)
            init.bn(name + ".project.bn", stage.out_channels)
            c = stage.out_channels
    _head_init(init, cfg, c, num_outputs)
    return net


def mbconv_block(net: Network, name: str, x: Tensor, expansion: int, stride: int, training: bool) -> Tensor:
    p = net.params
    h = x
    if expansion != 1:
        h = T.relu(_bn(net, name + ".expand.bn", T.conv2d(h, p[name + ".expand.w"]), training))
    h = T.relu(_bn(net, name + ".dw.bn", T.depthwise_conv2d(h, p[name + ".dw.w"], stride=stride, padding=1), training))
    h = _bn(net, name + ".project.bn", T.conv2d(h, p[name + ".project.w"]), training)
    if stride == 1 and h.shape == x.shape:
        h = T.add(h, x)
    return h


def _eff_features(net: Network, x: Tensor, training: bool) -> Tensor:
    cfg: MicroEffConfig = net.config
    h = T.conv2d(x, net.params["stem.conv.w"], stride=cfg.stem_stride, padding=1)
    h = T.relu(_bn(net, "stem.bn", h, training))
    for s, stage in enumerate(cfg.blocks):
        for r in range(stage.repeats):
            stride = stage.stride if r == 0 else 1
            h = mbconv_block(net, f"stage{s}.block{r}", h, stage.expansion_ratio, stride, training)
    return h


BUILDERS: dict[str, Callable[..., Network]] = {
    "dense": build_micro_densenet,
    "eff": build_micro_efficientnet,
}

DEFAULT_CONFIGS: dict[str, ArchConfig] = {
    "dense": MicroDenseConfig(),
    "eff": MicroEffConfig(),
}


def build(kind: str, num_outputs: int, seed: int = 0, config: ArchConfig | None = None, resolution: int | None = None) -> Network:
    if kind not in BUILDERS:
        raise ConfigError(f"unknown backbone {kind!r} (expected one of {sorted(BUILDERS)})")
    cfg = config if config is not None else DEFAULT_CONFIGS[kind]
    if resolution is not None and resolution != cfg.input_resolution:
        cfg = replace(cfg, input_resolution=resolution)
    return BUILDERS[kind](cfg, num_outputs, seed)


# --------------------------------------------------------------------------
# architecture descriptor (canonical key=value text)


def describe(net: Network) -> str:
    cfg = net.config
    lines = [f"kind={net.kind}", f"num_outputs={net.num_outputs}", f"seed={net.seed}"]
    lines.append(f"input_resolution={cfg.input_resolution}")
    lines.append(f"stem_channels={cfg.stem_channels}")
    if isinstance(cfg, MicroDenseConfig):
        lines.append("blocks=" + ",".join(f"{n}x{k}" for n, k in cfg.blocks))
        lines.append(f"transition_compression={cfg.transition_compression!r}")
    else:
        lines.append("blocks=" + ",".join(f"{b.expansion_ratio}:{b.out_channels}:{b.stride}:{b.repeats}" for b in cfg.blocks))
        lines.append(f"stem_stride={cfg.stem_stride}")
    lines.append("head_hidden=" + ",".join(str(h) for h in cfg.head_hidden))
    return "".join(line + "\n" for line in lines)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def from_description(text: str) -> Network:
    """Rebuild an (untrained) network from :func:`describe` output."""
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed descriptor line {line!r}")
        kv[key] = value
    try:
        kind = kv["kind"]
        common = dict(
            input_resolution=int(kv["input_resolution"]),
            stem_channels=int(kv["stem_channels"]),
            head_hidden=_ints(kv["head_hidden"]),
        )
        if kind == "dense":
            blocks = tuple(tuple(int(v) for v in b.split("x")) for b in kv["blocks"].split(","))
            cfg: ArchConfig = MicroDenseConfig(
                blocks=blocks, transition_compression=float(kv["transition_compression"]), **common
            )
        elif kind == "eff":
            blocks = tuple(MBConvStage(*(int(v) for v in b.split(":"))) for b in kv["blocks"].split(","))
            cfg = MicroEffConfig(blocks=blocks, stem_stride=int(kv["stem_stride"]), **common)
        else:
            raise ConfigError(f"unknown backbone kind {kind!r}")
        return BUILDERS[kind](cfg, int(kv["num_outputs"]), int(kv["seed"]))
    except KeyError as exc:
        raise ConfigError(f"descriptor missing key {exc.args[0]!r}") from None

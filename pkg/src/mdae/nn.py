"""Parameter registry, conv blocks, encoder and decoders with merge connections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError


@dataclass(frozen=True)
class ModelSpec:
    """Channel schedule and topology.

    Encoder blocks use ``encoder_channels`` (each followed by a 2x2 max pool),
    then a ``bottleneck`` block. Decoder block widths mirror that schedule:
    ``(bottleneck, encoder_channels[-1], ..., encoder_channels[1])``.
    """

    encoder_channels: tuple[int, ...] = (32, 64, 128)
    bottleneck: int = 256
    decoders: int = 3
    merge: bool = True
    convs_per_block: int = 3
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.decoders < 1:
            raise ValueError("a model needs at least one decoder")
        if not self.encoder_channels or min(self.encoder_channels) < 1 or self.bottleneck < 1:
            raise ValueError(f"invalid channel schedule {self.encoder_channels} / {self.bottleneck}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        return (self.bottleneck,) + tuple(reversed(self.encoder_channels))[:-1]

    @property
    def downsample(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "encoder_channels": tuple(d["encoder_channels"])})

    def conv_layers(self) -> list[tuple[str, int, int, int]]:
        """``(name, in_channels, out_channels, scale)`` for every conv, scale = resolution divisor."""
        layers = []

        def block(prefix, cin, cout, scale):
            for j in range(self.convs_per_block):
                layers.append((f"{prefix}/conv{j}", cin if j == 0 else cout, cout, scale))

        cin = self.in_channels
        for k, c in enumerate(self.encoder_channels):
            block(f"encoder/block{k}", cin, c, 2 ** k)
            cin = c
        block(f"encoder/block{self.depth}", cin, self.bottleneck, self.downsample)
        for i in range(self.decoders):
            prev = self.bottleneck
            for k, c in enumerate(self.decoder_channels):
                level = self.depth - 1 - k
                skip = self.encoder_channels[level] if self.merge else 0
                block(f"decoder{i}/block{k}", prev + skip, c, 2 ** level)
                prev = c
            layers.append((f"decoder{i}/head", prev, 1, 1))
        return layers


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray | None
    trainable: bool


class ParameterRegistry:
    """Ordered ``name -> Param`` map. Names are slash paths; the first component is the group."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        grad = np.zeros_like(value) if trainable else None
        self._params[name] = Param(value, grad, trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def param(self, name: str) -> Param:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        g = self._params[name].grad
        if g is None:
            raise KeyError(f"{name!r} is a buffer and carries no gradient")
        return g

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._params[name].grad += g

    def names(self, prefix: str | None = None, trainable: bool | None = None) -> list[str]:
        return [
            n for n, p in self._params.items()
            if (prefix is None or n == prefix or n.startswith(prefix + "/"))
            and (trainable is None or p.trainable == trainable)
        ]

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def groups(self) -> list[str]:
        return list(dict.fromkeys(n.split("/", 1)[0] for n in self._params))

    def zero_grad(self, prefix: str | None = None) -> None:
        for n in self.names(prefix, trainable=True):
            self._params[n].grad[...] = 0

    def num_trainable(self) -> int:
        return sum(p.value.size for p in self._params.values() if p.trainable)

    def copy(self) -> "ParameterRegistry":
        out = ParameterRegistry()
        for n, p in self._params.items():
            out._params[n] = Param(
                p.value.copy(), None if p.grad is None else p.grad.copy(), p.trainable
            )
        return out

    def astype(self, dtype) -> "ParameterRegistry":
        out = ParameterRegistry()
        for n, p in self._params.items():
            out.add(n, p.value.astype(dtype), p.trainable)
        return out

    def copy_group(self, src: str, dst: str) -> None:
        """Overwrite every value under ``dst`` with the same-named value under ``src``."""
        for n in self.names(src):
            self._params[dst + n[len(src):]].value[...] = self._params[n].value


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _add_conv(reg, rng, name, cin, cout, dtype, k=3):
    bound = np.sqrt(6.0 / (cin * k * k))
    reg.add(f"{name}/w", rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype))
    reg.add(f"{name}/b", np.zeros(cout, dtype))


def _add_bn(reg, name, c, dtype):
    reg.add(f"{name}/gamma", np.ones(c, dtype))
    reg.add(f"{name}/beta", np.zeros(c, dtype))
    reg.add(f"{name}/running_mean", np.zeros(c, dtype), trainable=False)
    reg.add(f"{name}/running_var", np.ones(c, dtype), trainable=False)
    reg.add(f"{name}/num_updates", np.zeros(1, dtype), trainable=False)


def _add_block(reg, rng, prefix, cin, cout, n_convs, dtype):
    for j in range(n_convs):
        _add_conv(reg, rng, f"{prefix}/conv{j}", cin if j == 0 else cout, cout, dtype)
        _add_bn(reg, f"{prefix}/bn{j}", cout, dtype)


def group_rng(seed: int, stream: int) -> np.random.Generator:
    """Stream 0 is the encoder, stream 1 + i is decoder i."""
    return np.random.default_rng([seed, stream])


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ParameterRegistry:
    reg = ParameterRegistry()
    rng = group_rng(seed, 0)
    cin = spec.in_channels
    for k, c in enumerate(spec.encoder_channels + (spec.bottleneck,)):
        _add_block(reg, rng, f"encoder/block{k}", cin, c, spec.convs_per_block, dtype)
        cin = c
    for i in range(spec.decoders):
        rng = group_rng(seed, 1 + i)
        prev = spec.bottleneck
        for k, c in enumerate(spec.decoder_channels):
            skip = spec.encoder_channels[spec.depth - 1 - k] if spec.merge else 0
            _add_block(reg, rng, f"decoder{i}/block{k}", prev + skip, c, spec.convs_per_block, dtype)
            prev = c
        _add_conv(reg, rng, f"decoder{i}/head", prev, 1, dtype)
    return reg


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _conv_params(reg, name) -> T.ConvParams:
    return T.ConvParams(reg[f"{name}/w"], reg[f"{name}/b"])


def _bn_state(reg, name) -> T.BNState:
    return T.BNState(reg[f"{name}/running_mean"], reg[f"{name}/running_var"], reg[f"{name}/num_updates"])


def conv_block_forward(reg, prefix, x, mode, n_convs):
    caches = []
    for j in range(n_convs):
        x, c_conv = T.conv2d(x, _conv_params(reg, f"{prefix}/conv{j}"))
        bn = f"{prefix}/bn{j}"
        x, c_bn = T.batchnorm(x, reg[f"{bn}/gamma"], reg[f"{bn}/beta"], _bn_state(reg, bn), mode)
        x, c_act = T.relu(x)
        caches.append((c_conv, c_bn, c_act))
    return x, caches


def conv_block_backward(reg, prefix, caches, g):
    for j in reversed(range(len(caches))):
        c_conv, c_bn, c_act = caches[j]
        g = T.relu_backward(c_act, g)
        g, g_gamma, g_beta = T.batchnorm_backward(c_bn, g)
        reg.accumulate(f"{prefix}/bn{j}/gamma", g_gamma)
        reg.accumulate(f"{prefix}/bn{j}/beta", g_beta)
        g, g_w, g_b = T.conv2d_backward(c_conv, g)
        reg.accumulate(f"{prefix}/conv{j}/w", g_w)
        reg.accumulate(f"{prefix}/conv{j}/b", g_b)
    return g


@dataclass
class EncoderCache:
    blocks: list = field(default_factory=list)
    pools: list = field(default_factory=list)


@dataclass
class DecoderCache:
    index: int
    ups: list = field(default_factory=list)
    concats: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    head: object = None
    out: object = None


def encoder_forward(reg: ParameterRegistry, spec: ModelSpec, x: np.ndarray, mode: str = "train"):
    """Returns ``(bottleneck, skips, cache)``; ``skips[k]`` is block k's output before pooling."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"encoder expects (n, {spec.in_channels}, h, w) input, got {x.shape}")
    f = spec.downsample
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(
            f"input spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by {f}; "
            "pad the slice first (see mdae.data.pad_to_multiple)"
        )
    cache = EncoderCache()
    skips = []
    for k in range(spec.depth):
        x, bc = conv_block_forward(reg, f"encoder/block{k}", x, mode, spec.convs_per_block)
        skips.append(x)
        cache.blocks.append(bc)
        x, pc = T.maxpool2(x)
        cache.pools.append(pc)
    x, bc = conv_block_forward(reg, f"encoder/block{spec.depth}", x, mode, spec.convs_per_block)
    cache.blocks.append(bc)
    return x, skips, cache


def encoder_backward(reg, spec: ModelSpec, cache: EncoderCache, g_bottleneck, g_skips):
    """Accumulate encoder gradients; ``g_skips`` entries may be None. Returns the input gradient."""
    g = conv_block_backward(reg, f"encoder/block{spec.depth}", cache.blocks[spec.depth], g_bottleneck)
    for k in reversed(range(spec.depth)):
        g = T.maxpool2_backward(cache.pools[k], g)
        if g_skips[k] is not None:
            g = g + g_skips[k]
        g = conv_block_backward(reg, f"encoder/block{k}", cache.blocks[k], g)
    return g


def decoder_forward(reg, spec: ModelSpec, index: int, bottleneck, skips, mode: str = "train"):
    """Returns ``(y, cache)`` with y in (0, 1) at the input resolution."""
    cache = DecoderCache(index)
    x = bottleneck
    for k in range(spec.depth):
        x, uc = T.upsample_nearest2(x)
        cache.ups.append(uc)
        if spec.merge:
            skip = skips[spec.depth - 1 - k]
            if skip.shape[2:] != x.shape[2:]:
                raise ShapeError(
                    f"decoder{index} block{k}: skip resolution {skip.shape[2:]} "
                    f"!= upsampled feature resolution {x.shape[2:]}"
                )
            x, cc = T.concat_channels(x, skip)
        else:
            cc = None
        cache.concats.append(cc)
        x, bc = conv_block_forward(reg, f"decoder{index}/block{k}", x, mode, spec.convs_per_block)
        cache.blocks.append(bc)
    x, cache.head = T.conv2d(x, _conv_params(reg, f"decoder{index}/head"))
    y, cache.out = T.sigmoid(x)
    return y, cache


def decoder_backward(reg, spec: ModelSpec, cache: DecoderCache, g_y):
    """Accumulate decoder gradients; returns ``(g_bottleneck, g_skips)``."""
    i = cache.index
    g = T.sigmoid_backward(cache.out, g_y)
    g, g_w, g_b = T.conv2d_backward(cache.head, g)
    reg.accumulate(f"decoder{i}/head/w", g_w)
    reg.accumulate(f"decoder{i}/head/b", g_b)
    g_skips: list = [None] * spec.depth
    for k in reversed(range(spec.depth)):
        g = conv_block_backward(reg, f"decoder{i}/block{k}", cache.blocks[k], g)
        if cache.concats[k] is not None:
            g, g_skips[spec.depth - 1 - k] = T.concat_channels_backward(cache.concats[k], g)
        g = T.upsample_nearest2_backward(cache.ups[k], g)
    return g, g_skips


def backward_through(reg, spec: ModelSpec, enc_cache: EncoderCache, dec_cache: DecoderCache, g_y):
    """Full chain rule through one decoder and the encoder. Gradients add into ``reg``."""
    g_b, g_s = decoder_backward(reg, spec, dec_cache, g_y)
    return encoder_backward(reg, spec, enc_cache, g_b, g_s)


def count_params(spec: ModelSpec) -> int:
    """Trainable parameter count, derived from the layer list without allocating."""
    total = 0
    for name, cin, cout, _ in spec.conv_layers():
        total += cout * cin * 9 + cout
        if not name.endswith("/head"):
            total += 2 * cout  # batchnorm gamma, beta
    return total


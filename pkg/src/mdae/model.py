"""One encoder, several decoders: shared forward, averaged prediction, MAC counting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ModelSpec, ParameterRegistry


class MergedAutoencoder:
    def __init__(self, spec: ModelSpec, registry: ParameterRegistry):
        self.spec = spec
        self.registry = registry
        # instrumentation: forward_all must run the encoder exactly once
        self.encoder_calls = 0

    @classmethod
    def create(cls, spec: ModelSpec | None = None, seed: int = 0, dtype=np.float32) -> "MergedAutoencoder":
        spec = spec or ModelSpec()
        return cls(spec, nn.init_params(spec, seed, dtype))

    @property
    def groups(self) -> list[str]:
        return ["encoder"] + [f"decoder{i}" for i in range(self.spec.decoders)]

    def encode(self, x: np.ndarray, mode: str = "train"):
        self.encoder_calls += 1
        return nn.encoder_forward(self.registry, self.spec, x, mode)

    def forward_all(self, x: np.ndarray, mode: str = "train"):
        """Returns ``([y_0, ..., y_{D-1}], (enc_cache, [dec_cache_i]))``."""
        bottleneck, skips, enc_cache = self.encode(x, mode)
        outputs, dec_caches = [], []
        for i in range(self.spec.decoders):
            y, c = nn.decoder_forward(self.registry, self.spec, i, bottleneck, skips, mode)
            outputs.append(y)
            dec_caches.append(c)
        return outputs, (enc_cache, dec_caches)

    def predict_all(self, x: np.ndarray, batch_size: int = 16) -> list[np.ndarray]:
        """Per-decoder inference outputs, computed in chunks of ``batch_size``."""
        chunks = [self.forward_all(x[s:s + batch_size], "infer")[0] for s in range(0, len(x), batch_size)]
        return [np.concatenate([c[i] for c in chunks]) for i in range(self.spec.decoders)]

    def predict_average(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Elementwise mean of the decoder outputs (post-sigmoid), inference mode."""
        return average(self.predict_all(x, batch_size))

    def copy(self) -> "MergedAutoencoder":
        return MergedAutoencoder(self.spec, self.registry.copy())


def average(outputs: list[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack(outputs), axis=0, dtype=np.float64).astype(outputs[0].dtype)


# --------------------------------------------------------------------------
# multiply-accumulate counting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_channels: int
    out_channels: int
    out_h: int
    out_w: int
    kh: int = 3
    kw: int = 3
    kd: int = 1
    out_d: int = 1

    @property
    def macs(self) -> int:
        return (self.out_channels * self.in_channels * self.kd * self.kh * self.kw
                * self.out_d * self.out_h * self.out_w)


def conv_layer_table(spec: ModelSpec, h: int, w: int) -> list[ConvLayer]:
    return [
        ConvLayer(name, cin, cout, h // scale, w // scale)
        for name, cin, cout, scale in spec.conv_layers()
    ]


def count_macs(spec: ModelSpec | list[ConvLayer], input_dims: tuple[int, int] | None = None) -> int:
    """Per-sample multiply-accumulates over all convolutions.

    Pools, upsampling, batchnorm and activations count as zero. Accepts either
    a model spec plus ``(h, w)`` or an explicit list of :class:`ConvLayer`
    (e.g. a baseline network described by hand).
    """
    layers = spec if isinstance(spec, list) else conv_layer_table(spec, *input_dims)
    return sum(layer.macs for layer in layers)

"""Selective backpropagation training loop, LR schedule, validation and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .data import SliceSet, crop, make_batches
from .errors import ContractError, FormatError, TrainingAborted
from .metrics import psnr
from .model import MergedAutoencoder
from .nn import ModelSpec

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 20
    epochs: int = 500
    batch_size: int = 8
    seed: int = 0
    shuffle: bool = True
    loss: str = "mse"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("decay_every >= 1, batch_size >= 1 and epochs >= 0 are required")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r} (only 'mse')")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr0 * decay_factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


class Adam:
    def __init__(self, registry: nn.ParameterRegistry, beta1=0.9, beta2=0.999, eps=1e-8):
        self.registry = registry
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        names = registry.names(trainable=True)
        self.m = {n: np.zeros_like(registry[n]) for n in names}
        self.v = {n: np.zeros_like(registry[n]) for n in names}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, m in self.m.items():
            g = self.registry.grad(n)
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = self.registry[n]
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def select_decoder(losses) -> int:
    """Index of the smallest loss (first one on ties); non-finite losses abort training."""
    losses = list(losses)
    if not losses:
        raise ContractError("select_decoder needs at least one loss")
    if not all(math.isfinite(x) for x in losses):
        raise TrainingAborted(f"non-finite decoder loss encountered: {losses}")
    return int(np.argmin(losses))


@dataclass
class StepResult:
    losses: list[float]
    selected: int


def compute_gradients(model: MergedAutoencoder, lf: np.ndarray, hf: np.ndarray) -> StepResult:
    """Zero all gradients, then fill them by the selective rule.

    Every decoder gets the gradient of its own loss; the encoder gets the
    gradient flowing back from the minimum-loss decoder only.
    """
    reg, spec = model.registry, model.spec
    outputs, (enc_cache, dec_caches) = model.forward_all(lf, "train")
    losses, loss_caches = [], []
    for y in outputs:
        e, c = T.mse(y, hf)
        losses.append(e)
        loss_caches.append(c)
    k = select_decoder(losses)
    reg.zero_grad()
    upstream = None
    for i, (dc, lc) in enumerate(zip(dec_caches, loss_caches)):
        g_b, g_s = nn.decoder_backward(reg, spec, dc, T.mse_backward(lc))
        if i == k:
            upstream = (g_b, g_s)
    nn.encoder_backward(reg, spec, enc_cache, *upstream)
    return StepResult(losses, k)


def train_batch(model: MergedAutoencoder, opt: Adam, batch, lr: float) -> StepResult:
    lf, hf = batch
    res = compute_gradients(model, lf, hf)
    opt.step(lr)
    return res


def validate(model: MergedAutoencoder, val: SliceSet, batch_size: int = 16) -> float:
    """Mean per-slice PSNR (data range 1) of the averaged prediction against HF."""
    if len(val) == 0:
        raise ContractError("validation set is empty")
    pred = crop(model.predict_average(val.lf, batch_size), val.crop_hw)
    truth = crop(val.hf, val.crop_hw)
    return float(np.mean([psnr(p, t) for p, t in zip(pred, truth)]))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"MDAE"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    epoch: int = -1
    val_psnr: float = -math.inf

    @classmethod
    def from_model(cls, model: MergedAutoencoder, epoch: int = -1, val_psnr: float = -math.inf) -> "Checkpoint":
        tensors = {n: p.value.astype(np.float32, copy=True) for n, p in model.registry.items()}
        return cls(model.spec, tensors, epoch, val_psnr)

    def to_model(self) -> MergedAutoencoder:
        reg = nn.init_params(self.spec, 0)
        expected, got = reg.names(), list(self.tensors)
        if set(expected) != set(got):
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise FormatError(f"checkpoint tensors do not match the model spec: missing {missing[:5]}, extra {extra[:5]}")
        for n in expected:
            dst = reg[n]
            if dst.shape != self.tensors[n].shape:
                raise FormatError(f"tensor {n}: shape {self.tensors[n].shape} != expected {dst.shape}")
            dst[...] = self.tensors[n]
        return MergedAutoencoder(self.spec, reg)


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {"spec": ckpt.spec.to_dict(), "epoch": int(ckpt.epoch), "val_psnr": _json_float(ckpt.val_psnr)}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", 0, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad magic, expected {CKPT_MAGIC!r}", 0)
    (version,) = r.unpack("H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (blob_len,) = r.unpack("I", "spec length")
    try:
        meta = json.loads(r.take(blob_len, "spec blob").decode())
        spec = ModelSpec.from_dict(meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed spec blob: {exc}", 10) from exc
    (count,) = r.unpack("I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("H", "name length")
        name = r.take(nlen, "tensor name").decode()
        dtype, ndim = r.unpack("BB", f"{name} header")
        if dtype != 0:
            raise FormatError(f"tensor {name}: unknown dtype code {dtype}", r.pos - 2)
        dims = r.unpack(f"{ndim}I", f"{name} dims")
        n_elem = math.prod(dims)
        if n_elem * 4 > len(buf) - r.pos:
            raise FormatError(f"tensor {name}: dims {dims} overflow the remaining {len(buf) - r.pos} bytes", r.pos)
        tensors[name] = np.frombuffer(r.take(n_elem * 4, name), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor", r.pos)
    val = meta.get("val_psnr", "-inf")
    return Checkpoint(spec, tensors, int(meta.get("epoch", -1)), float(val))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# the epoch loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: list[float]
    selections: list[int]
    val_psnr: float


@dataclass
class FitResult:
    best: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)


def fit(model: MergedAutoencoder, train: SliceSet, val: SliceSet, cfg: TrainConfig,
        on_epoch=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, keeping the weights with the best validation PSNR.

    ``on_epoch(record, best)`` is called after each epoch (used for progress
    logging and periodic checkpoint writes).
    """
    if len(train) == 0:
        raise ContractError("training set is empty")
    if set(train.index) & set(val.index):
        raise ContractError("train and validation sets overlap")
    D = model.spec.decoders
    opt = Adam(model.registry)
    history: list[EpochRecord] = []
    best = Checkpoint.from_model(model)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        loss_sum = np.zeros(D)
        sel = [0] * D
        n_batches = 0
        try:
            for batch in make_batches(train, cfg.batch_size, [cfg.seed, epoch], cfg.shuffle):
                res = train_batch(model, opt, batch, lr)
                loss_sum += res.losses
                sel[res.selected] += 1
                n_batches += 1
            v = validate(model, val)
            if math.isnan(v):
                raise TrainingAborted(f"validation PSNR is NaN at epoch {epoch}")
        except TrainingAborted as exc:
            log.error("epoch %d aborted: %s", epoch, exc)
            raise TrainingAborted(f"epoch {epoch}: {exc}", best, history) from exc
        rec = EpochRecord(epoch, lr, [float(x) for x in loss_sum / n_batches], sel, float(v))
        history.append(rec)
        if v > best.val_psnr:
            best = Checkpoint.from_model(model, epoch, v)
        log.info("epoch %d lr %.3g losses %s sel %s val_psnr %.3f",
                 epoch, lr, " ".join(f"{x:.5f}" for x in rec.losses), sel, v)
        if on_epoch is not None:
            on_epoch(rec, best)
    return FitResult(best, history)


def history_csv(history: list[EpochRecord], decoders: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr"] + [f"loss_d{i}" for i in range(decoders)]
               + [f"sel_d{i}" for i in range(decoders)] + ["val_psnr"])
    for r in history:
        w.writerow([r.epoch, repr(r.lr)] + [repr(x) for x in r.losses] + r.selections
                   + [_json_float(r.val_psnr) if not math.isfinite(r.val_psnr) else repr(r.val_psnr)])
    return buf.getvalue()

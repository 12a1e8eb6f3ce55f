"""Volume files, manifests, normalization, splits, batching and synthetic LF/HF pairs."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError

# --------------------------------------------------------------------------
# MVOL container
# --------------------------------------------------------------------------

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
MVOL_HEADER = struct.Struct("<4sHBB3I12x")  # 32 bytes
MVOL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}


def encode_volume(vol: np.ndarray) -> bytes:
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ValueError(f"MVOL stores rank-3 (slices, h, w) volumes, got shape {vol.shape}")
    if vol.dtype.kind == "f":
        code = 0
    elif vol.dtype.kind in "ui":
        code = 1
        if vol.size and (vol.min() < 0 or vol.max() > 0xFFFF):
            raise ValueError("label volume values must fit in u16")
    else:
        raise ValueError(f"unsupported volume dtype {vol.dtype}")
    payload = np.ascontiguousarray(vol, dtype=MVOL_DTYPES[code]).tobytes()
    return MVOL_HEADER.pack(MVOL_MAGIC, MVOL_VERSION, code, 3, *vol.shape) + payload


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < MVOL_HEADER.size:
        raise FormatError(f"truncated MVOL header: {len(buf)} of {MVOL_HEADER.size} bytes", len(buf))
    magic, version, code, ndim, *dims = MVOL_HEADER.unpack_from(buf)
    if magic != MVOL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MVOL_MAGIC!r}", 0)
    if version != MVOL_VERSION:
        raise FormatError(f"unsupported MVOL version {version}", 4)
    if code not in MVOL_DTYPES:
        raise FormatError(f"unknown dtype code {code}", 6)
    if ndim != 3:
        raise FormatError(f"ndim must be 3, got {ndim}", 7)
    dtype = MVOL_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    have = len(buf) - MVOL_HEADER.size
    if have != expected:
        kind = "truncated" if have < expected else "oversized"
        raise FormatError(f"{kind} payload: {have} bytes, dims {tuple(dims)} need {expected}", len(buf))
    return np.frombuffer(buf, dtype=dtype, offset=MVOL_HEADER.size).reshape(dims).copy()


def save_volume(path, vol: np.ndarray) -> None:
    _atomic_write(Path(path), encode_volume(vol))


def load_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# PGM slices (16-bit import, 8-bit dumps)
# --------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM; 16-bit samples are big-endian per the netpbm format."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated PGM payload, need {need} bytes", len(data))
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def write_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(img)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + img.astype(dtype).tobytes())


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def volume_from_pgm_stack(paths: Sequence) -> np.ndarray:
    """Stack same-sized PGM slices (in the given order) into a float32 volume of raw intensities."""
    slices = [read_pgm(p) for p in paths]
    if len({s.shape for s in slices}) != 1:
        raise ValueError("PGM slices differ in size")
    return np.stack(slices).astype(np.float32)


# --------------------------------------------------------------------------
# manifests and subjects
# --------------------------------------------------------------------------

@dataclass
class SubjectVolume:
    id: str
    lf: np.ndarray
    hf: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.lf.shape != self.hf.shape:
            raise ValueError(f"subject {self.id}: LF {self.lf.shape} and HF {self.hf.shape} differ")
        if self.labels is not None and self.labels.shape != self.hf.shape:
            raise ValueError(f"subject {self.id}: labels {self.labels.shape} != volume {self.hf.shape}")


def read_manifest(path) -> list[dict]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    for e in entries:
        missing = {"id", "lf_path", "hf_path"} - set(e)
        if missing:
            raise ValueError(f"{path}: manifest entry {e} lacks {sorted(missing)}")
    return entries


def write_manifest(path, entries: list[dict]) -> None:
    _atomic_write(Path(path), (json.dumps(entries, indent=2) + "\n").encode())


def load_subjects(manifest_path, with_labels: bool = True) -> list[SubjectVolume]:
    root = Path(manifest_path).parent
    out = []
    for e in read_manifest(manifest_path):
        labels = None
        if with_labels and e.get("labels_path"):
            labels = load_volume(root / e["labels_path"])
        out.append(SubjectVolume(
            e["id"],
            load_volume(root / e["lf_path"]).astype(np.float32),
            load_volume(root / e["hf_path"]).astype(np.float32),
            labels,
        ))
    return out


# --------------------------------------------------------------------------
# normalization, slice selection, splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NormRecord:
    min: float
    max: float


def normalize_01(vol: np.ndarray):
    """Scale one volume to [0, 1]; a constant volume becomes all zeros."""
    lo, hi = float(np.min(vol)), float(np.max(vol))
    if hi == lo:
        return np.zeros_like(vol, dtype=np.float32), NormRecord(lo, hi)
    out = ((vol.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
    return out, NormRecord(lo, hi)


def denormalize(vol: np.ndarray, rec: NormRecord) -> np.ndarray:
    return (vol.astype(np.float64) * (rec.max - rec.min) + rec.min).astype(np.float32)


def central_slices(total: int, keep: int) -> range:
    """Indices of the ``keep`` central slices; the odd leftover slice is dropped at the back."""
    if keep > total:
        raise ContractError(f"cannot keep {keep} central slices of a {total}-slice volume")
    if keep < 0:
        raise ContractError("keep must be non-negative")
    front = (total - keep) // 2
    return range(front, front + keep)


@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]
    unused: list[str] = field(default_factory=list)

    def of(self, subject_id: str) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        return "unused"


def split_subjects(ids: Sequence[str], counts: tuple[int, int, int] = (22, 6, 11), seed: int = 0) -> SplitSpec:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ContractError("subject ids must be unique")
    if min(counts) < 0 or sum(counts) > len(ids):
        raise ContractError(f"split counts {tuple(counts)} exceed the {len(ids)} available subjects")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    a, b, c = counts
    return SplitSpec(order[:a], order[a:a + b], order[a + b:a + b + c], order[a + b + c:])


# --------------------------------------------------------------------------
# padding and batching
# --------------------------------------------------------------------------

def pad_to_multiple(img: np.ndarray, multiple: int = 8):
    """Reflect-pad the last two axes at the bottom/right. Returns ``(padded, (h, w))``."""
    h, w = img.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="reflect" if min(h, w) > 1 else "edge"), (h, w)


def crop(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    return img[..., :hw[0], :hw[1]]


@dataclass
class SliceSet:
    """Paired slices as (N, 1, H, W) float32 arrays, padded to the model's multiple."""

    lf: np.ndarray
    hf: np.ndarray
    crop_hw: tuple[int, int]
    index: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lf)

    def subset(self, idx) -> "SliceSet":
        idx = np.asarray(idx)
        return SliceSet(self.lf[idx], self.hf[idx], self.crop_hw, [self.index[i] for i in idx])


def slice_set(subjects: Sequence[SubjectVolume], keep: int | None = None, multiple: int = 8) -> SliceSet:
    lfs, hfs, index = [], [], []
    crop_hw = None
    for s in subjects:
        rng_ = central_slices(len(s.hf), keep) if keep is not None else range(len(s.hf))
        lf, hw = pad_to_multiple(s.lf[rng_.start:rng_.stop], multiple)
        hf, _ = pad_to_multiple(s.hf[rng_.start:rng_.stop], multiple)
        if crop_hw is not None and hw != crop_hw:
            raise ValueError(f"subject {s.id} has slice size {hw}, others {crop_hw}")
        crop_hw = hw
        lfs.append(lf)
        hfs.append(hf)
        index += [(s.id, i) for i in rng_]
    if not lfs:
        return SliceSet(np.zeros((0, 1, multiple, multiple), np.float32),
                        np.zeros((0, 1, multiple, multiple), np.float32), (multiple, multiple), [])
    lf = np.concatenate(lfs)[:, None].astype(np.float32)
    hf = np.concatenate(hfs)[:, None].astype(np.float32)
    return SliceSet(lf, hf, crop_hw, index)


def make_batches(data: SliceSet, batch_size: int, epoch_seed: int | None = None,
                 shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (LF, HF) batches; the final partial batch is kept."""
    if len(data) == 0:
        raise ContractError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(data))
    if shuffle:
        order = np.random.default_rng(epoch_seed).permutation(len(data))
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        yield data.lf[idx], data.hf[idx]


# --------------------------------------------------------------------------
# synthetic paired data
# --------------------------------------------------------------------------

# tissue label ids used by the phantoms (and documented for dice evaluation)
BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
TISSUE_LEVELS = {CSF: 0.3, GM: 0.6, WM: 1.0}


@dataclass
class SynthParams:
    blur: float = 1.5
    gamma: float = 0.7
    noise: float = 0.02
    size: int = 64
    count: int = 10
    slices: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.blur > 0:
            raise ValueError("blur sigma must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.size < 8 or self.count < 1 or self.slices < 1:
            raise ValueError("size >= 8, count >= 1 and slices >= 1 are required")


def _soft_ellipse(yy, xx, cy, cx, ry, rx, theta, edge):
    c, s = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    # signed distance in (approximate) pixels, positive inside
    d = (1 - r) * min(rx, ry)
    return 1 / (1 + np.exp(-d / edge)), d > 0


def phantom_volume(rng: np.random.Generator, slices: int, size: int):
    """Brain-like stack of layered soft ellipses. Returns (hf, labels)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = size / 2 - 0.5
    head_r = size * rng.uniform(0.36, 0.44, 2)
    wm_frac = rng.uniform(0.55, 0.7)
    n_blobs = int(rng.integers(2, 5))
    blobs = [(rng.uniform(-0.4, 0.4, 2), rng.uniform(0.08, 0.2), rng.uniform(0, np.pi),
              rng.choice([CSF, GM, WM])) for _ in range(n_blobs)]
    vent_off = rng.uniform(0.12, 0.2)
    hf = np.zeros((slices, size, size), np.float32)
    labels = np.zeros((slices, size, size), np.uint16)
    for z in range(slices):
        t = (z + 0.5) / slices * 2 - 1  # -1..1 through the stack
        shrink = np.sqrt(1 - 0.6 * t * t)
        jitter = rng.normal(0, 0.6, 2)
        cy, cx = c0 + jitter[0], c0 + jitter[1]
        ry, rx = head_r * shrink
        img = np.zeros((size, size))
        lab = np.zeros((size, size), np.uint16)
        layers = [(cy, cx, ry, rx, 0.0, GM)]
        layers.append((cy, cx, ry * wm_frac, rx * wm_frac, rng.normal(0, 0.05), WM))
        vr = max(ry, rx) * rng.uniform(0.12, 0.18) * shrink
        for sgn in (-1, 1):
            layers.append((cy - 0.1 * ry, cx + sgn * vent_off * rx, vr * 1.6, vr, sgn * 0.3, CSF))
        for (oy, ox), scale, theta, tissue in blobs:
            r = scale * min(ry, rx)
            layers.append((cy + oy * ry, cx + ox * rx, r, r * rng.uniform(0.6, 1.0), theta, tissue))
        for ly, lx, lry, lrx, th, tissue in layers:
            m, inside = _soft_ellipse(yy, xx, ly, lx, max(lry, 1.0), max(lrx, 1.0), th, 0.5)
            img = img * (1 - m) + TISSUE_LEVELS[tissue] * m
            lab[inside] = tissue
        # the head ellipse gates everything so the background is exactly zero
        head, head_in = _soft_ellipse(yy, xx, cy, cx, ry, rx, 0.0, 0.5)
        img = np.where(head > 1e-3, img * head, 0.0)
        lab[~head_in] = BACKGROUND
        hf[z] = img
        labels[z] = lab
    return hf, labels


def degrade(hf: np.ndarray, blur: float, gamma: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Low-field surrogate: clamp(gaussian_blur(hf)^gamma + N(0, noise^2)) applied slice-wise."""
    sigma = (0,) * (hf.ndim - 2) + (blur, blur)
    lf = ndimage.gaussian_filter(hf.astype(np.float64), sigma=sigma, mode="constant")
    lf = np.power(np.clip(lf, 0.0, None), gamma)
    if noise > 0:
        lf = lf + rng.normal(0.0, noise, lf.shape)
    return np.clip(lf, 0.0, 1.0).astype(np.float32)


def synth_subjects(params: SynthParams) -> list[SubjectVolume]:
    out = []
    for i in range(params.count):
        rng = np.random.default_rng([params.seed, i])
        hf, labels = phantom_volume(rng, params.slices, params.size)
        lf = degrade(hf, params.blur, params.gamma, params.noise, rng)
        out.append(SubjectVolume(f"sub{i:03d}", lf, hf, labels))
    return out


def synth_generate(params: SynthParams, out_dir=None) -> list[SubjectVolume]:
    """Generate phantoms and their degraded pairs; with ``out_dir``, write MVOL files + manifest."""
    subjects = synth_subjects(params)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in subjects:
            e = {"id": s.id, "lf_path": f"{s.id}_lf.mvol", "hf_path": f"{s.id}_hf.mvol",
                 "labels_path": f"{s.id}_labels.mvol"}
            save_volume(out / e["lf_path"], s.lf)
            save_volume(out / e["hf_path"], s.hf)
            save_volume(out / e["labels_path"], s.labels)
            entries.append(e)
        write_manifest(out / "manifest.json", entries)
        info = {"params": asdict(params), "baseline_psnr": degraded_baseline(subjects)}
        _atomic_write(out / "synth.json", (json.dumps(info, indent=2, sort_keys=True) + "\n").encode())
    return subjects


def degraded_baseline(subjects: Sequence[SubjectVolume]) -> float:
    """Mean per-slice PSNR of LF against HF (data range 1)."""
    from .metrics import psnr

    vals = [psnr(s.lf[z], s.hf[z]) for s in subjects for z in range(len(s.hf))]
    return float(np.mean(vals))

"""Command-line entry point: synth, train, reconstruct, evaluate, gradcheck, macs.

Exit codes: 0 success, 1 failed check (gradcheck), 2 usage or config error,
3 runtime abort.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcheck as G
from .data import (
    CSF, GM, TISSUE_LEVELS, WM, SubjectVolume, SynthParams, central_slices, crop, load_subjects, load_volume,
    normalize_01, pad_to_multiple, read_manifest, save_volume, slice_set, split_subjects,
    synth_generate, to_uint8, write_pgm,
)
from .errors import FormatError, ShapeError, TrainingAborted
from .metrics import MetricReport, evaluate_volume
from .model import ConvLayer, MergedAutoencoder, conv_layer_table, count_macs
from .nn import ModelSpec
from .train import TrainConfig, fit, history_csv, load_checkpoint, save_checkpoint

log = logging.getLogger("mdae")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything ``train`` needs. JSON keys mirror these fields one to one."""

    manifest: str | None = None
    out: str | None = None
    # train / val / test subject counts; None splits the manifest 22:6:11
    split: list[int] | None = None
    split_seed: int = 0
    # central slices per training volume; None trains on every slice
    train_keep: int | None = None
    normalize: bool = True
    deterministic: bool = True
    # model
    encoder_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    bottleneck: int = 256
    decoders: int = 3
    merge: bool = True
    convs_per_block: int = 3
    # optimization
    lr0: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 20
    epochs: int = 500
    batch_size: int = 8
    seed: int = 0
    shuffle: bool = True
    loss: str = "mse"

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {unknown}")
        # paths inside a config file are relative to that file
        for key in ("manifest", "out"):
            if doc.get(key) is not None:
                doc[key] = str(path.parent / doc[key])
        return cls(**doc)

    def merged(self, overrides: dict) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def model_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.encoder_channels), self.bottleneck, self.decoders, self.merge,
                         self.convs_per_block)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr0, self.decay_factor, self.decay_every, self.epochs, self.batch_size,
                           self.seed, self.shuffle, self.loss)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_split(n: int) -> tuple[int, int, int]:
    """Scale the 22/6/11 subject split to ``n`` subjects, keeping at least one per part."""
    if n < 3:
        raise UsageError(f"need at least 3 subjects to split, manifest has {n}")
    val = max(1, round(n * 6 / 39))
    test = max(1, round(n * 11 / 39))
    return n - val - test, val, test


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    """Single-threaded BLAS so reductions keep a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _load(manifest, with_labels=True) -> list[SubjectVolume]:
    try:
        return load_subjects(manifest, with_labels)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load dataset {manifest}: {exc}") from exc


def _normalized(subjects: list[SubjectVolume]) -> list[SubjectVolume]:
    return [SubjectVolume(s.id, normalize_01(s.lf)[0], normalize_01(s.hf)[0], s.labels) for s in subjects]


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def segment_tissues(vol: np.ndarray) -> np.ndarray:
    """Nearest-level tissue labels for a normalized volume (phantom intensity tiers)."""
    levels = np.array([0.0] + [TISSUE_LEVELS[c] for c in (CSF, GM, WM)])
    cuts = (levels[1:] + levels[:-1]) / 2
    return np.searchsorted(cuts, vol, side="right").astype(np.uint16)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        params = SynthParams(blur=args.blur, gamma=args.gamma, noise=args.noise, size=args.size,
                             count=args.count, slices=args.slices, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out)
    synth_generate(params, out)
    info = json.loads((out / "synth.json").read_text())
    log.info("wrote %d subjects to %s (baseline PSNR %.3f dB)", params.count, out, info["baseline_psnr"])
    return EXIT_OK


TRAIN_FLAGS = {
    "manifest": str, "out": str, "split_seed": int, "train_keep": int, "decoders": int,
    "bottleneck": int, "convs_per_block": int, "lr0": float, "decay_factor": float,
    "decay_every": int, "epochs": int, "batch_size": int, "seed": int,
}


def run_config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    if args.encoder_channels is not None:
        overrides["encoder_channels"] = [int(c) for c in args.encoder_channels.split(",")]
    if args.split is not None:
        overrides["split"] = [int(c) for c in args.split.split(",")]
    if args.no_merge:
        overrides["merge"] = False
    if args.no_shuffle:
        overrides["shuffle"] = False
    if args.nondeterministic:
        overrides["deterministic"] = False
    if args.no_normalize:
        overrides["normalize"] = False
    try:
        cfg = cfg.merged(overrides)
        cfg.model_spec()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if cfg.manifest is None:
        raise UsageError("no dataset: pass --manifest or set 'manifest' in the config")
    if cfg.split is not None and len(cfg.split) != 3:
        raise UsageError("split needs three counts: train,val,test")
    return cfg


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    out = _out_dir(cfg.out)
    log.info("config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    _write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    subjects = _load(cfg.manifest, with_labels=False)
    if cfg.normalize:
        subjects = _normalized(subjects)
    counts = tuple(cfg.split) if cfg.split is not None else default_split(len(subjects))
    try:
        split = split_subjects([s.id for s in subjects], counts, cfg.split_seed)
    except Exception as exc:
        raise UsageError(str(exc)) from exc
    by_id = {s.id: s for s in subjects}
    spec = cfg.model_spec()
    try:
        train = slice_set([by_id[i] for i in split.train], cfg.train_keep, spec.downsample)
        val = slice_set([by_id[i] for i in split.val], None, spec.downsample)
    except Exception as exc:
        raise UsageError(f"cannot build slice sets: {exc}") from exc
    log.info("split train=%s val=%s test=%s", split.train, split.val, split.test)

    ckpt_path = out / "best.mdae"

    def on_epoch(rec, best):
        if best.epoch == rec.epoch:
            save_checkpoint(ckpt_path, best)

    t0 = time.perf_counter()
    aborted = None
    with deterministic_mode(cfg.deterministic):
        model = MergedAutoencoder.create(spec, cfg.seed)
        try:
            res = fit(model, train, val, cfg.train_config(), on_epoch=on_epoch)
            best, history = res.best, res.history
        except TrainingAborted as exc:
            aborted = str(exc)
            best, history = exc.checkpoint, exc.history
    save_checkpoint(ckpt_path, best)
    _write_text(out / "history.csv", history_csv(history, spec.decoders))
    selections = [sum(r.selections[i] for r in history) for i in range(spec.decoders)]
    summary = {
        "best_epoch": best.epoch,
        "best_val_psnr": best.val_psnr if np.isfinite(best.val_psnr) else str(best.val_psnr),
        "epochs_run": len(history),
        "selection_counts": selections,
        "split": {"train": split.train, "val": split.val, "test": split.test},
        "aborted": aborted,
    }
    _write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    log.info("training took %.1f s; best epoch %d, val PSNR %.3f dB", time.perf_counter() - t0,
             best.epoch, best.val_psnr)
    if aborted:
        log.error("training aborted: %s (last good checkpoint kept at %s)", aborted, ckpt_path)
        return EXIT_ABORT
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint).to_model()
    except (OSError, FormatError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    subjects = _load(args.input, with_labels=False)
    out = _out_dir(args.out)
    mult = model.spec.downsample
    with deterministic_mode(not args.nondeterministic):
        for s in subjects:
            t0 = time.perf_counter()
            lf = normalize_01(s.lf)[0] if not args.no_normalize else s.lf
            padded, hw = pad_to_multiple(lf, mult)
            try:
                pred = model.predict_average(padded[:, None].astype(np.float32), args.batch_size)
            except ShapeError as exc:
                raise UsageError(f"subject {s.id}: volume {lf.shape} padded to {padded.shape} "
                                 f"does not fit the checkpoint: {exc}") from exc
            pred = crop(pred[:, 0], hw)
            save_volume(out / f"{s.id}_pred.mvol", pred)
            if args.dump_pgm:
                d = out / "pgm" / s.id
                d.mkdir(parents=True, exist_ok=True)
                for z, img in enumerate(pred):
                    write_pgm(d / f"slice{z:03d}.pgm", to_uint8(img))
            log.info("subject %s: %d slices reconstructed in %.2f s", s.id, len(pred), time.perf_counter() - t0)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    entries = read_manifest(args.truth)
    pred_dir = Path(args.pred)
    missing = [e["id"] for e in entries if not (pred_dir / f"{e['id']}_pred.mvol").exists()]
    if missing:
        raise UsageError(f"no prediction for subjects {missing} in {pred_dir}")
    subjects = _load(args.truth, with_labels=args.labels)
    pred_labels = {s.id: pred_dir / f"{s.id}_labels.mvol" for s in subjects}
    if args.labels:
        unlabeled = [s.id for s in subjects if pred_labels[s.id].exists() and s.labels is None]
        if unlabeled:
            raise UsageError(f"predicted labels given but subjects {unlabeled} have no labels_path")
    out = _out_dir(args.out)
    modes = [False, True] if args.hm else [False]
    for hm in modes:
        report = MetricReport()
        for s in subjects:
            pred = load_volume(pred_dir / f"{s.id}_pred.mvol").astype(np.float32)
            if pred.shape != s.hf.shape:
                raise UsageError(f"subject {s.id}: prediction {pred.shape} vs truth {s.hf.shape}")
            if args.no_normalize:
                truth, lf, rng_ = s.hf, s.lf, None
            else:
                truth, rec = normalize_01(s.hf)
                lf = normalize_01(s.lf)[0]
                rng_ = (rec.min, rec.max)
            ids = range(len(pred))
            if args.keep is not None:
                ids = central_slices(len(pred), args.keep)
                pred, truth, lf = (v[ids.start:ids.stop] for v in (pred, truth, lf))
            seg_pred = seg_truth = None
            if args.labels:
                # supplied label volumes are compared to the manifest labels; otherwise
                # prediction and truth go through the same intensity segmenter
                if pred_labels[s.id].exists():
                    seg_pred = load_volume(pred_labels[s.id])[ids.start:ids.stop]
                    seg_truth = s.labels[ids.start:ids.stop]
                else:
                    seg_pred, seg_truth = segment_tissues(pred), segment_tissues(truth)
            report.volumes.append(evaluate_volume(
                pred, truth, lf, apply_hm=hm, subject=s.id, slice_ids=ids, original_range=rng_,
                pred_labels=seg_pred, truth_labels=seg_truth,
            ))
        stem = "report_hm" if hm else "report"
        _write_text(out / f"{stem}.json", report.to_json() + "\n")
        _write_text(out / f"{stem}.csv", report.to_csv())
        agg = report.aggregate()
        log.info("%s: PSNR %.3f +- %.3f, SSIM %.4f +- %.4f", stem, *agg["psnr"], *agg["ssim"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = []
    for rep in G.run_suite(args.seed):
        ok = rep.passed(args.tol)
        print(f"{'ok  ' if ok else 'FAIL'} {rep.name:<24} max rel err {rep.worst:.3e}")
        if not ok:
            failed.append(rep.name)
    for name, err in G.adjoint_suite(args.seed).items():
        ok = err < args.adjoint_tol
        print(f"{'ok  ' if ok else 'FAIL'} adjoint {name:<16} error {err:.3e}")
        if not ok:
            failed.append(f"adjoint {name}")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_macs(args) -> int:
    if args.layers:
        try:
            doc = json.loads(Path(args.layers).read_text())
            layers = [ConvLayer(**d) for d in doc]
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read layer list {args.layers}: {exc}") from exc
    else:
        try:
            spec = ModelSpec(tuple(int(c) for c in args.encoder_channels.split(",")), args.bottleneck,
                             args.decoders, not args.no_merge)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if args.size % spec.downsample:
            raise UsageError(f"--size must be a multiple of {spec.downsample}")
        layers = conv_layer_table(spec, args.size, args.size)
    for layer in layers:
        print(f"{layer.name:<28} {layer.in_channels:>5} -> {layer.out_channels:<5} "
              f"{layer.out_h}x{layer.out_w}  {layer.macs:>14,d}")
    print(f"total {count_macs(layers)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired LF/HF dataset")
    s.add_argument("--out", required=True)
    d = SynthParams()
    s.add_argument("--count", type=int, default=d.count)
    s.add_argument("--size", type=int, default=d.size)
    s.add_argument("--slices", type=int, default=d.slices)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--blur", type=float, default=d.blur)
    s.add_argument("--gamma", type=float, default=d.gamma)
    s.add_argument("--noise", type=float, default=d.noise)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model (flags override --config keys)")
    t.add_argument("--config", help="JSON run config")
    for name, typ in TRAIN_FLAGS.items():
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    t.add_argument("--encoder-channels", help="comma separated, e.g. 32,64,128")
    t.add_argument("--split", help="train,val,test subject counts")
    t.add_argument("--no-merge", action="store_true", help="drop the encoder-decoder skip connections")
    t.add_argument("--no-shuffle", action="store_true")
    t.add_argument("--no-normalize", action="store_true", help="skip per-volume [0, 1] scaling")
    t.add_argument("--nondeterministic", action="store_true", help="allow multithreaded BLAS")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="averaged-decoder prediction for every subject of a manifest")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="manifest of LF volumes")
    r.add_argument("--out", required=True)
    r.add_argument("--dump-pgm", action="store_true", help="also write 8-bit PGM slices")
    r.add_argument("--batch-size", type=int, default=16)
    r.add_argument("--no-normalize", action="store_true")
    r.add_argument("--nondeterministic", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="PSNR/SSIM/edge metrics (and dice) against HF truth")
    e.add_argument("--pred", required=True, help="directory of <id>_pred.mvol files")
    e.add_argument("--truth", required=True, help="manifest with HF (and LF, labels) volumes")
    e.add_argument("--out", required=True)
    e.add_argument("--hm", action="store_true", help="also report after histogram matching to LF")
    e.add_argument("--labels", action="store_true",
                   help="dice per tissue class (uses <id>_labels.mvol from --pred when present)")
    e.add_argument("--keep", type=int, help="evaluate only this many central slices")
    e.add_argument("--no-normalize", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference and adjoint checks of every op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--adjoint-tol", type=float, default=1e-10)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("macs", help="per-layer multiply-accumulate counts")
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--encoder-channels", default="32,64,128")
    m.add_argument("--bottleneck", type=int, default=256)
    m.add_argument("--decoders", type=int, default=3)
    m.add_argument("--no-merge", action="store_true")
    m.add_argument("--layers", help="JSON list of conv layer dicts instead of a model spec")
    m.set_defaults(func=cmd_macs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_ABORT

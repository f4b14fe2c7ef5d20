"""Command line entry points: synth, preprocess, train, infer, eval.

Each verb is also importable as ``cmd_<verb>`` and returns the paths it
wrote.  Every command persists its resolved config (``config.ini``) in
its output directory.  Declared error cases exit with status 2 and a
one-line JSON message on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .config import ARCHS, ConfigError, RunConfig, load_config
from .edm import TrainState, optimizer_arrays, optimizer_from_arrays, train
from .metrics import MetricReport, error_heatmap, evaluate_volume, write_per_slice_csv, write_pgm, write_report
from .nifti_io import NiftiError, read_volume, write_volume
from .sr25d import SliceDataset, bicubic_baseline, super_resolve_25d
from .sr3d import PatchDataset, super_resolve_3d, trilinear_baseline
from .synth import synth_volume
from .unet import UNetConfig, build_denoiser
from .volume import Domain, Volume, VolumeError, VolumePair, block_average_downsample, percentile_normalize, to_unit

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SLICE_STORE = "slices.npz"
CHECKPOINT = "checkpoint.ckpt"
LOSS_LOG = "loss.csv"
METHODS = ("edm3d", "edm25d", "bicubic", "trilinear")


class CommandError(RuntimeError):
    """A declared failure case of a CLI verb."""


def _resolve(out, cfg: RunConfig) -> Path:
    out = Path(out)
    return out if out.is_absolute() else cfg.output_root() / out


def _read_manifest(directory: Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CommandError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- synth -------------------------------------------------------------------


def subject_split(ids: list[str], rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Subject-level split holding out ``max(1, n // 5)`` subjects."""
    if len(ids) < 2:
        raise CommandError(f"need at least 2 subjects to split, got {len(ids)}")
    n_test = max(1, len(ids) // 5)
    order = rng.permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train_ids = [s for s in ids if s not in test]
    return train_ids, test


def cmd_synth(cfg: RunConfig, out) -> Path:
    out = _resolve(out, cfg)
    d = cfg.data
    if min(d.dims) < 16:
        raise CommandError(f"synthetic dims must be at least 16 per axis, got {d.dims}")
    rng = np.random.default_rng(cfg.seed)
    ids = [f"sub-{k:03d}" for k in range(d.n_subjects)]
    train_ids, test_ids = subject_split(ids, rng)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        vol = Volume(synth_volume(tuple(d.dims), rng, d.n_blobs))
        write_volume(vol, out / f"{sid}.nii")
    _write_json(out / MANIFEST, {"subjects": ids, "train": train_ids, "test": test_ids,
                                 "dims": list(d.dims), "seed": cfg.seed})
    cfg.save(out)
    return out


# -- preprocess --------------------------------------------------------------


def preprocess_volume(raw: Volume, s: int) -> VolumePair:
    hr = to_unit(percentile_normalize(raw))
    return VolumePair(block_average_downsample(hr, s), hr, s)


def _unit(vol: Volume) -> Volume:
    # NIfTI carries no domain tag; stored unit volumes are re-tagged on load
    return Volume(np.clip(vol.data, -1.0, 1.0), Domain.UNIT, vol.voxel_size)


def load_pair(store: Path, sid: str, s: int) -> VolumePair:
    return VolumePair(_unit(read_volume(store / f"{sid}_lr.nii")),
                      _unit(read_volume(store / f"{sid}_hr.nii")), s)


def cmd_preprocess(cfg: RunConfig, in_dir, out) -> Path:
    in_dir = Path(in_dir)
    out = _resolve(out, cfg)
    manifest = _read_manifest(in_dir)
    s = cfg.data.scale
    out.mkdir(parents=True, exist_ok=True)
    lr_slices, hr_slices = [], []
    for sid in manifest["subjects"]:
        src = in_dir / f"{sid}.nii"
        if not src.exists():
            raise CommandError(f"missing volume {src}")
        pair = preprocess_volume(read_volume(src), s)
        write_volume(pair.lr, out / f"{sid}_lr.nii")
        write_volume(pair.hr, out / f"{sid}_hr.nii")
        if sid in manifest["train"]:
            # reload so the store holds exactly what the volume files hold
            stored = load_pair(out, sid, s)
            lr_slices.append(stored.lr.data)
            hr_slices.append(stored.hr.data)
    np.savez(out / SLICE_STORE, lr=np.stack(lr_slices), hr=np.stack(hr_slices),
             subjects=np.array(manifest["train"]))
    _write_json(out / MANIFEST, dict(manifest, scale=s))
    cfg.save(out)
    return out


def load_slice_store(store: Path, s: int) -> list[VolumePair]:
    with np.load(store / SLICE_STORE) as z:
        return [VolumePair(Volume(lr, Domain.UNIT), Volume(hr, Domain.UNIT), s)
                for lr, hr in zip(z["lr"], z["hr"])]


# -- train -------------------------------------------------------------------


def _check_arch(arch: str) -> str:
    if arch not in ARCHS:
        raise CommandError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    return arch


def save_training_checkpoint(path: Path, params, state: TrainState, arch: str, unet: UNetConfig,
                             cfg: RunConfig, fourier: np.ndarray) -> None:
    arrays = dict(params.state())
    arrays.update(optimizer_arrays(state.optimizer))
    arrays["fourier"] = fourier
    meta = {
        "arch": arch,
        "unet": unet.to_dict(),
        "update": state.update,
        "adamw_t": state.optimizer.t,
        "rng_state": state.rng.bit_generator.state,
        "sigma_data": cfg.edm.sigma_data,
        "seed": cfg.seed,
    }
    dg.save_checkpoint(path, arrays, meta)


def load_model(path, arch: str | None = None):
    """Load (params, net, metadata, arrays) from a training checkpoint."""
    try:
        arrays, meta = dg.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from exc
    if arch is not None and meta.get("arch") != arch:
        raise CommandError(f"checkpoint {path} holds a {meta.get('arch')!r} model, not {arch!r}")
    unet = UNetConfig(**meta["unet"])
    params, net = build_denoiser(unet)
    params.load_state(arrays)
    net.fourier = np.array(arrays["fourier"])
    return params, net, meta, arrays


def cmd_train(cfg: RunConfig, data_dir, out, arch: str | None = None, resume=None) -> Path:
    arch = _check_arch(arch or cfg.pipeline.arch)
    data_dir = Path(data_dir)
    out = _resolve(out, cfg)
    manifest = _read_manifest(data_dir)
    s = manifest.get("scale", cfg.data.scale)
    tc = cfg.train_config(arch)
    if arch == "3d":
        pairs = [load_pair(data_dir, sid, s) for sid in manifest["train"]]
        dataset = PatchDataset(pairs, cfg.pipeline.patch_dims, tc.patches_per_volume)
    else:
        dataset = SliceDataset(load_slice_store(data_dir, s))
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT
    log_path = out / LOSS_LOG
    if resume is not None:
        params, net, meta, arrays = load_model(resume, arch)
        unet = net.cfg
        state = TrainState(optimizer=optimizer_from_arrays(arrays, meta["adamw_t"]), update=meta["update"])
        state.rng = np.random.default_rng()
        state.rng.bit_generator.state = meta["rng_state"]
    else:
        unet = cfg.unet(arch)
        params, net = build_denoiser(unet, cfg.seed)
        state = TrainState(rng=np.random.default_rng(cfg.seed))
        if log_path.exists():
            log_path.unlink()

    def checkpoint(epoch, st):
        save_training_checkpoint(ckpt, params, st, arch, unet, cfg, net.fourier)

    train(params, net, dataset, cfg.preconditioner(), cfg.sigma_distribution(), tc,
          state=state, log_path=log_path, on_epoch_end=checkpoint)
    checkpoint(None, state)
    cfg.save(out)
    return ckpt


# -- infer -------------------------------------------------------------------


def infer_volume(net, cfg: RunConfig, arch: str, lr: Volume, s: int) -> Volume:
    pc = cfg.preconditioner()
    schedule = cfg.schedule(arch)
    p = cfg.pipeline
    if arch == "3d":
        return super_resolve_3d(net, pc, schedule, lr, s, patch_dims=p.patch_dims, overlap=p.overlap,
                                seed=cfg.seed, batch=p.batch, window_floor=p.window_floor)
    return super_resolve_25d(net, pc, schedule, lr, s, seed=cfg.seed)


def cmd_infer(cfg: RunConfig, checkpoint, out, arch: str | None = None, data_dir=None,
              input_path=None, split: str = "test") -> list[Path]:
    """Super-resolve one LR file (``input_path``) or a split of a store.

    With a store, predictions land in ``out/<subject>.nii``; otherwise
    ``out`` is the output file.
    """
    arch = _check_arch(arch or cfg.pipeline.arch)
    _, net, meta, _ = load_model(checkpoint, arch)
    s = cfg.data.scale
    if input_path is not None:
        target = _resolve(out, cfg)
        target.parent.mkdir(parents=True, exist_ok=True)
        pred = infer_volume(net, cfg, arch, _unit(read_volume(input_path)), s)
        write_volume(pred, target)
        cfg.save(target.parent)
        return [target]
    if data_dir is None:
        raise CommandError("infer needs --input or --data")
    data_dir = Path(data_dir)
    manifest = _read_manifest(data_dir)
    s = manifest.get("scale", s)
    out = _resolve(out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in manifest[split]:
        pred = infer_volume(net, cfg, arch, _unit(read_volume(data_dir / f"{sid}_lr.nii")), s)
        write_volume(pred, out / f"{sid}.nii")
        written.append(out / f"{sid}.nii")
    cfg.save(out)
    return written


# -- eval --------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, data_dir, out, predictions: dict[str, Path] | None = None,
             baselines=("bicubic", "trilinear"), split: str = "test") -> MetricReport:
    """Score every method on the HR volumes of ``split``.

    ``predictions`` maps a method label to a directory of
    ``<subject>.nii`` files; baselines are computed from the stored LR.
    Writes ``report.csv`` / ``report.json``, ``per_slice_psnr.csv`` and
    one PGM error heatmap per (subject, method).
    """
    data_dir = Path(data_dir)
    out = _resolve(out, cfg)
    manifest = _read_manifest(data_dir)
    s = manifest.get("scale", cfg.data.scale)
    predictions = dict(predictions or {})
    for m in list(predictions) + list(baselines):
        if m not in METHODS:
            raise CommandError(f"unknown method {m!r}; expected one of {METHODS}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(exist_ok=True)
    report = MetricReport()
    for sid in manifest[split]:
        pair = load_pair(data_dir, sid, s)
        volumes = {}
        for method, pred_dir in predictions.items():
            pred = _unit(read_volume(Path(pred_dir) / f"{sid}.nii"))
            if pred.dims != pair.hr.dims:
                raise CommandError(f"{method} prediction for {sid} has dims {pred.dims}, truth {pair.hr.dims}")
            volumes[method] = pred
        for b in baselines:
            volumes[b] = bicubic_baseline(pair.lr, s) if b == "bicubic" else trilinear_baseline(pair.lr, s)
        k = cfg.eval.heatmap_slice
        k = pair.hr.dims[0] // 2 if k < 0 else k
        for method, vol in volumes.items():
            label = method + ("_pooled" if cfg.eval.pooled else "")
            report.extend(evaluate_volume(vol, pair.hr, sid, label, pooled=cfg.eval.pooled))
            write_pgm(error_heatmap(vol, pair.hr, k), out / "heatmaps" / f"{sid}_{method}_slice{k:03d}.pgm")
    for fmt in cfg.eval.formats:
        write_report(report, out / f"report.{fmt}", fmt)
    write_per_slice_csv(report, out / "per_slice_psnr.csv")
    cfg.save(out)
    return report


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edmsr", description="EDM super-resolution for volumetric images")
    ap.add_argument("--config", help="INI run configuration")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config key (repeatable, last wins)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate synthetic HR volumes and a split manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--dims", help="D,H,W")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("preprocess", help="normalize, degrade and store LR/HR pairs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int)

    p = sub.add_parser("train", help="train a denoiser on a preprocessed store")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("infer", help="super-resolve LR volumes with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=ARCHS)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="single LR volume file")
    src.add_argument("--data", help="preprocessed store; writes <subject>.nii per subject")
    p.add_argument("--split", default="test")

    p = sub.add_parser("eval", help="score predictions and baselines against HR truth")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred", action="append", default=[], metavar="METHOD=DIR",
                   help="prediction directory for a method (edm3d or edm25d)")
    p.add_argument("--baselines", default="bicubic,trilinear", help="comma list, may be empty")
    p.add_argument("--split", default="test")
    return ap


def _overrides(args) -> list[str]:
    extra = []
    if args.verb == "synth":
        if args.n_subjects is not None:
            extra.append(f"data.n_subjects={args.n_subjects}")
        if args.dims is not None:
            extra.append(f"data.dims={args.dims}")
        if args.seed is not None:
            extra.append(f"run.seed={args.seed}")
    if args.verb == "preprocess" and args.scale is not None:
        extra.append(f"data.scale={args.scale}")
    return extra + list(args.overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.verb == "synth":
            result = cmd_synth(cfg, args.out)
        elif args.verb == "preprocess":
            result = cmd_preprocess(cfg, args.in_dir, args.out)
        elif args.verb == "train":
            result = cmd_train(cfg, args.data, args.out, args.arch, args.resume)
        elif args.verb == "infer":
            written = cmd_infer(cfg, args.checkpoint, args.out, args.arch, data_dir=args.data,
                                input_path=args.input, split=args.split)
            result = "\n".join(str(p) for p in written)
        else:
            preds = {}
            for item in args.pred:
                method, sep, path = item.partition("=")
                if not sep:
                    raise CommandError(f"--pred expects METHOD=DIR, got {item!r}")
                preds[method] = Path(path)
            baselines = [b for b in args.baselines.split(",") if b]
            report = cmd_eval(cfg, args.data, args.out, preds, baselines, args.split)
            result = json.dumps(report.aggregates()["overall"], default=str)
    except (CommandError, ConfigError, VolumeError, NiftiError, FileNotFoundError, KeyError) as exc:
        # KeyError quotes its argument in str(); report the bare text
        text = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        msg = {"error": type(exc).__name__, "verb": args.verb, "message": str(text)}
        print(json.dumps(msg), file=sys.stderr)
        return 2
    print(result)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

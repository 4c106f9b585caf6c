"""Command-line entry point: ``physzern <subcommand> ... --out DIR``.

Every subcommand writes its artifacts under ``--out`` together with a single
``run_manifest.json``; ``physzern replay`` re-executes a manifest into a new
directory.  Exit codes: 0 success, 2 usage or protocol violation, 3 I/O,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, io
from .grad import RecoverConfig, RecoveryDivergedError, recover_coefficients
from .optics import DegenerateApertureError, psf_from_coeffs, wavefront_from_coeffs

log = logging.getLogger("physzern")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

MANIFEST_NAME = "run_manifest.json"
# options whose values are filesystem paths; recorded as absolute paths
PATH_OPTIONS = {"--out", "--lenses", "--images", "--dataset", "--folds", "--config", "--checkpoint", "--psf", "--coeffs", "--manifest"}


class UsageError(Exception):
    pass


class ProtocolError(UsageError):
    """Train and test lens sets overlap."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _normalized_argv(argv: list[str]) -> list[str]:
    out = []
    expect_path = False
    # report takes its eval directories as positional arguments
    sub = next((i for i, tok in enumerate(argv) if not tok.startswith("-")), None)
    positional_paths = sub is not None and argv[sub] == "report"
    for i, tok in enumerate(argv):
        if expect_path or (positional_paths and i > sub and not tok.startswith("-")):
            out.append(str(Path(tok).resolve()))
            expect_path = False
            continue
        opt, eq, val = tok.partition("=")
        if opt in PATH_OPTIONS:
            if eq:
                out.append(f"{opt}={Path(val).resolve()}")
            else:
                out.append(tok)
                expect_path = True
            continue
        out.append(tok)
    return out


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(value):
    if isinstance(value, Path):
        return str(value.resolve())
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_run_manifest(out: Path, argv: list[str], args: argparse.Namespace, extra: dict | None = None) -> None:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    config = {k: _jsonable(v) for k, v in vars(args).items() if k != "func" and not k.startswith("_")}
    seeds = {k: v for k, v in config.items() if "seed" in k}
    manifest = {
        "command": ["physzern"] + _normalized_argv(argv),
        "subcommand": args.command,
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "started": args._started,
        "finished": _now(),
        "outputs": files,
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(path: Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_file(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


# -- gen-lenses -------------------------------------------------------------


def cmd_gen_lenses(args) -> dict:
    from .simulate import AmplitudeProfile, sample_lens_population, write_lens_set

    profile = AmplitudeProfile(args.sigma0, args.decay)
    lenses = sample_lens_population(args.count, profile, args.seed)
    out = _prepare_out(args.out)
    write_lens_set(out / "lenses.csv", lenses)
    print(f"wrote {len(lenses)} lenses to {out / 'lenses.csv'}")
    return {"amplitude_profile": asdict(profile)}


# -- simulate ---------------------------------------------------------------


def _sim_config(args):
    from .simulate import SimConfig

    return SimConfig(
        patch=args.patch,
        patches_per_lens=args.patches_per_lens,
        n_samples=args.grid,
        aperture_fraction=args.aperture_fraction,
        pad_factor=args.pad,
        psf_crop=args.psf_crop,
        noise_sigma=args.noise_sigma,
        clip=not args.no_clip,
        boundary=args.boundary,
        seed=args.seed,
        texture_size=args.texture_size,
        n_textures=args.n_textures,
    )


def cmd_simulate(args) -> dict:
    from .simulate import generate_dataset, load_clean_images, procedural_sources, read_lens_set

    lenses = read_lens_set(_require_file(args.lenses, "lens CSV"))
    cfg = _sim_config(args)
    if args.images is not None:
        sources = load_clean_images(args.images)
    else:
        if cfg.texture_size < cfg.patch:
            cfg.texture_size = cfg.patch
        sources = procedural_sources(cfg)
    out = _prepare_out(args.out)
    manifest = generate_dataset(lenses, sources, cfg, out)
    print(f"wrote {len(manifest)} samples for {len(lenses)} lenses to {out}")
    return {"sim_config": asdict(cfg)}


# -- split ------------------------------------------------------------------


def cmd_split(args) -> dict:
    from .simulate import read_lens_set, split_lens_folds, write_folds

    src = args.lenses if args.lenses is not None else Path(args.dataset) / "lenses.csv"
    ids = [lens.lens_id for lens in read_lens_set(_require_file(src, "lens CSV"))]
    folds = split_lens_folds(ids, args.k, args.seed)
    out = _prepare_out(args.out)
    write_folds(out / "folds.json", folds)
    print("fold sizes: " + ", ".join(str(len(f)) for f in folds))
    return {}


# -- train ------------------------------------------------------------------


def _train_config(args):
    from .regressor import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config is not None else TrainConfig()
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.seed = args.seed
    return cfg


def cmd_train(args) -> dict:
    from .regressor import LOSS_VARIANTS, load_dataset, save_checkpoint, train
    from .simulate import read_folds

    weights = LOSS_VARIANTS[args.loss]
    cfg = _train_config(args)
    data = load_dataset(args.dataset, cfg.map_size)
    folds = read_folds(_require_file(args.folds, "folds file"))
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"--fold must be in 0..{len(folds) - 1}")
    result = train(data, folds, args.fold, weights, cfg)
    out = _prepare_out(args.out)
    save_checkpoint(result, out / "checkpoint")
    cfg.save(out / "train_config.txt")
    io.write_jsonl(out / "history.jsonl", result.history)
    summary = {"loss": args.loss, "fold": args.fold, "weights": asdict(weights), "final": result.history[-1]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {args.loss} on fold {args.fold}: final train total {result.history[-1]['train']['total']:.4f}")
    return {"loss_weights": asdict(weights)}


# -- eval -------------------------------------------------------------------


def _test_lenses(args) -> list[str]:
    from .simulate import read_folds

    folds = read_folds(_require_file(args.folds, "folds file"))
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"--fold must be in 0..{len(folds) - 1}")
    return list(folds[args.fold])


def check_protocol(train_ids, test_ids, allow_leak: bool) -> list[str]:
    """Return the shared lens ids; raise unless leaking was explicitly allowed."""
    shared = sorted(set(train_ids) & set(test_ids))
    if shared and not allow_leak:
        raise ProtocolError(
            f"{len(shared)} test lens(es) were used for training (e.g. {shared[0]}); "
            "held-out evaluation requires disjoint lens sets (override with --allow-leak)"
        )
    return shared


def cmd_eval(args) -> dict:
    from .regressor import coefficient_metrics, load_checkpoint, load_dataset, predict, zero_predictor_metrics

    model, normalizer, meta = load_checkpoint(args.checkpoint)
    test_ids = _test_lenses(args)
    shared = check_protocol(meta["train_lens_ids"], test_ids, args.allow_leak)
    data = load_dataset(args.dataset, meta["config"]["map_size"])
    idx = data.samples_for(test_ids)
    if len(idx) == 0:
        raise UsageError("no samples for the requested test lenses")
    pred = predict(model, data.images[idx], normalizer)
    true = data.targets.coeffs[data.targets.subset([data.lens_of_sample[i] for i in idx])]
    metrics = coefficient_metrics(pred, true)
    out = _prepare_out(args.out)
    loss_tag = next((k for k, v in _variants().items() if asdict(v) == meta["weights"]), "custom")
    row = {
        "loss": loss_tag,
        "fold": args.fold,
        "train_seed": meta["config"]["seed"],
        "metrics": metrics.to_json(),
        "zero_predictor_mae": zero_predictor_metrics(data, test_ids).mae,
        "test_lens_ids": test_ids,
        "leak": shared,
    }
    (out / "metrics.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    with open(out / "predictions.csv", "w") as fh:
        fh.write("sample_id,lens_id," + ",".join(io.LENS_COLUMNS[1:]) + "\n")
        for i, p in zip(idx, pred):
            fh.write(f"{data.sample_ids[i]},{data.lens_of_sample[i]}," + ",".join(repr(float(v)) for v in p) + "\n")
    if args.visualize:
        _write_triptychs(out / "figures", data, test_ids, pred, idx, args.visualize)
    print(f"MAE {metrics.mae:.6f} waves, MSE {metrics.mse:.3e} waves^2 over {metrics.n_samples} samples")
    extra = {}
    if shared:
        extra["watermark"] = f"LEAKY EVALUATION: {len(shared)} lens(es) shared with training"
    return extra


def _variants():
    from .regressor import LOSS_VARIANTS

    return LOSS_VARIANTS


def montage(rows: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Tile equally sized maps into one image (rows x columns), NaN gaps."""
    h, w = rows[0][0].shape
    n_r, n_c = len(rows), max(len(r) for r in rows)
    canvas = np.full((n_r * (h + gap) - gap, n_c * (w + gap) - gap), np.nan)
    for i, row in enumerate(rows):
        for j, m in enumerate(row):
            canvas[i * (h + gap) : i * (h + gap) + h, j * (w + gap) : j * (w + gap) + w] = m
    return canvas


def _write_triptychs(out: Path, data, test_ids, pred, idx, count: int) -> None:
    """Oracle / predicted / difference wavefront and PSF maps for a few lenses."""
    out.mkdir(parents=True, exist_ok=True)
    geom = data.targets.geom
    for lid in sorted(test_ids)[:count]:
        li = data.targets.index[lid]
        mean_pred = pred[[k for k, i in enumerate(idx) if data.lens_of_sample[i] == lid]].mean(axis=0)
        w_true = data.targets.wavefronts[li]
        w_pred = wavefront_from_coeffs(mean_pred, geom.grid).values
        p_true = data.targets.psfs[li]
        p_pred = psf_from_coeffs(mean_pred, geom)
        for name, (a, b) in {"wavefront": (w_true, w_pred), "psf": (p_true, p_pred)}.items():
            tile = montage([[a], [b], [a - b]])
            io.export_visualization(out / f"{lid}_{name}.pgm", np.nan_to_num(tile, nan=float(np.nanmin(tile))))


# -- recover ----------------------------------------------------------------


def _recover_config(args) -> RecoverConfig:
    return RecoverConfig(
        n_samples=args.grid,
        aperture_fraction=args.aperture_fraction,
        pad_factor=args.pad,
        crop=args.crop,
        max_iter=args.iters,
        n_starts=args.starts,
        start_scale=args.start_scale,
        seed=args.seed,
    )


def cmd_recover(args) -> dict:
    psf = io.read_grid(_require_file(args.psf, "PSF grid"))
    cfg = _recover_config(args)
    if cfg.crop is None and psf.shape[0] != cfg.geometry().field_size:
        cfg.crop = psf.shape[0]
    result = recover_coefficients(psf, cfg)
    out = _prepare_out(args.out)
    io.write_jsonl(out / "trace.jsonl", result.trace)
    from .simulate import LensRecord, write_lens_set

    write_lens_set(out / "recovered.csv", [LensRecord(args.lens_id, result.coeffs)])
    (out / "result.json").write_text(
        json.dumps({"loss": result.loss, "init_loss": result.init_loss, "start_losses": result.start_losses}, indent=2) + "\n"
    )
    print(f"recovered coefficients: loss {result.loss:.3e} (init {result.init_loss:.3e})")
    return {"recover_config": asdict(cfg)}


# -- restore / report -------------------------------------------------------


def _coefficient_source(args, data, sample_idx):
    """Predicted coefficients per sample according to ``--source``."""
    t = data.targets
    if args.source == "oracle":
        return t.coeffs[t.subset([data.lens_of_sample[i] for i in sample_idx])]
    if args.source == "checkpoint":
        from .regressor import load_checkpoint, predict

        if args.checkpoint is None:
            raise UsageError("--source checkpoint requires --checkpoint")
        model, normalizer, meta = load_checkpoint(args.checkpoint)
        check_protocol(meta["train_lens_ids"], {data.lens_of_sample[i] for i in sample_idx}, args.allow_leak)
        return predict(model, data.images[sample_idx], normalizer)
    if args.source == "coeffs":
        from .simulate import read_lens_set

        if args.coeffs is None:
            raise UsageError("--source coeffs requires --coeffs")
        table = {lens.lens_id: lens.coeffs for lens in read_lens_set(args.coeffs)}
        missing = {data.lens_of_sample[i] for i in sample_idx} - set(table)
        if missing:
            raise UsageError(f"--coeffs lacks lens(es) {sorted(missing)[:3]}")
        return np.stack([table[data.lens_of_sample[i]] for i in sample_idx])
    # recover: solve for each lens once from its stored PSF
    g = t.geom
    per_lens = {}
    for i in sample_idx:
        lid = data.lens_of_sample[i]
        if lid not in per_lens:
            cfg = RecoverConfig(
                n_samples=g.grid.n_samples,
                aperture_fraction=g.grid.aperture_fraction,
                pad_factor=g.pad_factor,
                crop=g.crop,
                max_iter=args.iters,
                n_starts=args.starts,
                seed=args.seed,
            )
            per_lens[lid] = recover_coefficients(t.psfs[t.index[lid]], cfg).coeffs
    return np.stack([per_lens[data.lens_of_sample[i]] for i in sample_idx])


def _select_samples(args, data):
    if args.folds is not None:
        ids = _test_lenses(args)
    else:
        ids = data.targets.lens_ids
    idx = data.samples_for(ids)
    if args.limit:
        idx = np.concatenate([data.samples_for([lid])[: args.limit] for lid in sorted(ids)])
    return idx


def cmd_restore(args) -> dict:
    from .regressor import load_dataset
    from .restore import WienerConfig, oracle_gap_report, wiener_deconvolve

    data = load_dataset(args.dataset)
    idx = _select_samples(args, data)
    pred = _coefficient_source(args, data, idx)
    wcfg = WienerConfig(args.nsr, args.boundary)
    geom = data.targets.geom
    out = _prepare_out(args.out)
    (out / "restored").mkdir(exist_ok=True)
    rows = []
    for i, p in zip(idx, pred):
        rec = data.records[i]
        clean = io.read_pgm(data.root / rec["clean_path"])
        true = data.targets.coeffs[data.targets.index[rec["lens_id"]]]
        rep = oracle_gap_report(data.images[i], clean, p, true, geom, wcfg)
        io.write_pgm16(out / "restored" / f"{rec['sample_id']}.pgm", wiener_deconvolve(data.images[i], psf_from_coeffs(p, geom), wcfg))
        rows.append({"sample_id": rec["sample_id"], "lens_id": rec["lens_id"], **rep.to_json()})
    io.write_jsonl(out / "report.jsonl", rows)
    summary = summarize_restoration(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"mean PSNR blurred {summary['psnr_blurred']:.2f} dB, predicted {summary['psnr_pred']:.2f} dB, "
        f"oracle {summary['psnr_oracle']:.2f} dB, gap {summary['oracle_gap']:+.2f} dB"
    )
    return {"wiener": asdict(wcfg)}


def summarize_restoration(rows: list[dict]) -> dict:
    out = {"n": len(rows)}
    for key in ("psnr_blurred", "psnr_pred", "psnr_oracle", "oracle_gap"):
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def ablation_table(rows: list[dict]) -> list[dict]:
    """Group eval rows by loss variant: mean and std of MAE / MSE over runs."""
    order = list(_variants())
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["loss"], []).append(r)
    table = []
    for tag in sorted(groups, key=lambda t: (order.index(t) if t in order else len(order), t)):
        mae = np.array([g["metrics"]["mae"] for g in groups[tag]])
        mse = np.array([g["metrics"]["mse"] for g in groups[tag]])
        table.append(
            {
                "loss": tag,
                "runs": len(mae),
                "mae_mean": float(mae.mean()),
                "mae_std": float(mae.std()),
                "mae_median": float(np.median(mae)),
                "mse_mean": float(mse.mean()),
                "mse_std": float(mse.std()),
            }
        )
    return table


def cmd_report(args) -> dict:
    rows = []
    for d in args.evals:
        rows.append(json.loads(_require_file(Path(d) / "metrics.json", "eval metrics").read_text()))
    if not rows:
        raise UsageError("no eval directories given")
    table = ablation_table(rows)
    out = _prepare_out(args.out)
    cols = ["loss", "runs", "mae_mean", "mae_std", "mae_median", "mse_mean", "mse_std"]
    with open(out / "ablation.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in table:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    lines = [f"{'Model variant':<14}{'runs':>5}  {'MAE (waves)':>22}  {'MSE (waves^2)':>24}"]
    for r in table:
        lines.append(
            f"{r['loss']:<14}{r['runs']:>5}  {r['mae_mean']:.5f} +/- {r['mae_std']:.5f}  "
            f"{r['mse_mean']:.3e} +/- {r['mse_std']:.2e}"
        )
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return {}


# -- replay -----------------------------------------------------------------


def cmd_replay(args) -> dict:
    manifest = json.loads(_require_file(args.manifest, "run manifest").read_text())
    argv = list(manifest["command"][1:])
    new_out = str(Path(args.out).resolve())
    if "--out" in argv:
        argv[argv.index("--out") + 1] = new_out
    else:
        argv = [a if not a.startswith("--out=") else f"--out={new_out}" for a in argv]
    code = main(argv)
    if code != EXIT_OK:
        raise RuntimeError(f"replayed command exited with {code}")
    return None


# -- parser -----------------------------------------------------------------


def _add_geometry(p, grid=64):
    p.add_argument("--grid", type=_positive_int, default=grid, help="pupil samples per side")
    p.add_argument("--aperture-fraction", type=float, default=0.5)
    p.add_argument("--pad", type=_positive_int, default=2, help="zero-padding factor")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="physzern", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-lenses", help="sample a synthetic lens population")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sigma0", type=float, default=0.08, help="tilt amplitude (waves)")
    p.add_argument("--decay", type=float, default=2.0, help="amplitude ratio between radial orders")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_lenses)

    p = sub.add_parser("simulate", help="generate a blurred dataset")
    p.add_argument("--lenses", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", type=Path, help="directory of grayscale clean images")
    src.add_argument("--procedural", action="store_true", help="use procedural textures")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--patch", type=_positive_int, default=64)
    p.add_argument("--patches-per-lens", type=_positive_int, default=50)
    _add_geometry(p)
    p.add_argument("--psf-crop", type=_positive_int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.005)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--boundary", choices=("edge", "circular"), default="edge")
    p.add_argument("--texture-size", type=_positive_int, default=256)
    p.add_argument("--n-textures", type=_positive_int, default=16)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", help="lens-held-out k-fold partition")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--dataset", type=Path)
    g.add_argument("--lenses", type=Path)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the regressor on one fold")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--folds", type=Path, required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--loss", choices=sorted(_variants()), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", type=Path, help="key = value training config")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out coefficient metrics")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--folds", type=Path, required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--allow-leak", action="store_true", help="permit train/test lens overlap (watermarked)")
    p.add_argument("--visualize", type=int, default=0, metavar="N", help="write triptychs for N lenses")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recover", help="fit coefficients to a PSF by gradient descent")
    p.add_argument("--psf", type=Path, required=True, help="raw ABR1 PSF grid")
    p.add_argument("--lens-id", default="recovered")
    p.add_argument("--seed", type=int, required=True)
    _add_geometry(p)
    p.add_argument("--crop", type=_positive_int)
    p.add_argument("--iters", type=_positive_int, default=500)
    p.add_argument("--starts", type=_positive_int, default=10)
    p.add_argument("--start-scale", type=float, default=0.05)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("restore", help="Wiener restoration with predicted PSFs and oracle-gap report")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--source", choices=("checkpoint", "recover", "coeffs", "oracle"), default="recover")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--coeffs", type=Path, help="lens CSV of predicted coefficients")
    p.add_argument("--folds", type=Path)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--allow-leak", action="store_true")
    p.add_argument("--limit", type=int, default=0, help="samples per lens (0: all)")
    p.add_argument("--nsr", type=float, default=1e-3)
    p.add_argument("--boundary", choices=("edge", "circular"), default="edge")
    p.add_argument("--iters", type=_positive_int, default=500)
    p.add_argument("--starts", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("report", help="ablation table from eval directories")
    p.add_argument("evals", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-run a command from its run manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args._started = _now()
    try:
        extra = args.func(args)
        if extra is not None:
            write_run_manifest(Path(args.out), argv, args, extra)
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, DegenerateApertureError, RecoveryDivergedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK

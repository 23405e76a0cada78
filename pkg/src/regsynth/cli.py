"""Command-line interface: ``regsynth <command> [options]``.

Failures print one line ``error: <CODE>: <message>`` to stderr and exit with
a nonzero status specific to the error class.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig
from .dvf import default_spec, generate
from .errors import ConfigError, ParameterError, RegSynthError
from .intensity import NoiseParams, add_noise, apply_sponge, jacobian_determinant
from .io import read_field, read_landmarks, read_volume, write_image
from .metrics import LossParams, bending_energy, huber, jacobian_stats, total_loss, tre
from .pairs import expand_basis, sample_patches, save_pairs
from .pipeline import ExecPredictor, IdentityPredictor, TranslationPredictor, compose, run_pipeline, warp
from .report import fmt, write_csv, write_jacobian_histogram, write_tre_report


log = logging.getLogger("regsynth")

EXIT_CODES = {
    "E_GENERIC": 1,
    "E_USAGE": 2,
    "E_PARAM": 3,
    "E_SHAPE": 4,
    "E_COVERAGE": 5,
    "E_UNSUPPORTED": 6,
    "E_MASK": 7,
    "E_PARSE": 8,
    "E_PAIRING": 9,
    "E_EMPTY": 10,
    "E_CONTRACT": 11,
    "E_CONFIG": 12,
    "E_IO": 13,
}

_CATEGORY_ALIASES = {"single": "single", "mixed": "mixed", "respiratory": "respiratory", "resp": "respiratory", "identity": "identity"}


class UsageError(RegSynthError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _opt(p, flag, section, key, help, **kw):
    kw.setdefault("metavar", key.upper())
    p.add_argument(flag, dest=f"{section}.{key}", default=None, help=help, **kw)


def _flag(p, flag, section, key, help):
    p.add_argument(flag, dest=f"{section}.{key}", action="store_const", const="true", default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regsynth", description="Synthetic registration training data and evaluation.")
    parser.add_argument("--version", action="version", version=f"regsynth {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="INI file with defaults for any option")
        _opt(p, "--seed", "run", "seed", "master seed (64-bit)")
        return p

    p = command("gen-dvf", "generate one artificial displacement field")
    _opt(p, "--category", "dvf-synth", "category", "single | mixed | respiratory | identity")
    _opt(p, "--stage", "dvf-synth", "stage", "1, 2 or 4")
    _opt(p, "--class", "dvf-synth", "frequency_class", "lowest | low | intermediate | high | highest")
    _opt(p, "--dims", "dvf-synth", "dims", "NX,NY,NZ (ignored with --mask)")
    _opt(p, "--spacing", "dvf-synth", "spacing", "voxel spacing in mm, SX,SY,SZ")
    _opt(p, "--theta", "dvf-synth", "theta", "override the scheduled max displacement (mm)")
    _opt(p, "--mask", "io-cli", "mask", "lung mask volume (required for respiratory)")
    _opt(p, "--out", "io-cli", "out", "output field (.mhd)")
    _opt(p, "--hist-csv", "io-cli", "hist_csv", "write the Jacobian histogram as CSV")
    _opt(p, "--hist-bins", "metrics-loss", "hist_bins", "histogram bin count")
    _opt(p, "--hist-range", "metrics-loss", "hist_range", "histogram range LO,HI")
    _opt(p, "--plot", "io-cli", "plot", "PNG with a magnitude slice and the Jacobian histogram (default: beside --hist-csv)")

    p = command("make-pairs", "generate the full basis pair set for one source image")
    _opt(p, "--input", "io-cli", "input", "source volume (.mhd)")
    _opt(p, "--stage", "pair-factory", "stage", "1, 2 or 4")
    _opt(p, "--mask", "io-cli", "mask", "lung mask volume")
    _opt(p, "--out-dir", "io-cli", "out_dir", "output directory")
    _opt(p, "--workers", "pair-factory", "workers", "worker threads")
    _opt(p, "--noise-sigma", "intensity-model", "sigma_n", "noise std for fixed images")
    _opt(p, "--chain-noise-sigma", "intensity-model", "chain_sigma_n", "noise std for chained moving images")
    _opt(p, "--patch-size", "pair-factory", "patch_size", "also write balanced patch centres of this size")
    _opt(p, "--patches-per-pair", "pair-factory", "patches_per_pair", "patch count per pair (stage default)")
    _opt(p, "--source-id", "pair-factory", "source_id", "identifier recorded in provenance")

    p = command("deform", "warp a volume by a field, optionally with sponge model and noise")
    _opt(p, "--input", "io-cli", "input", "volume to deform")
    _opt(p, "--field", "io-cli", "field", "displacement field")
    _opt(p, "--out", "io-cli", "out", "output volume")
    _flag(p, "--sponge", "intensity-model", "sponge", "divide by the Jacobian determinant")
    _opt(p, "--noise-sigma", "intensity-model", "deform_sigma_n", "add Gaussian noise with this std")
    _opt(p, "--noise-seed", "intensity-model", "noise_seed", "noise seed (defaults to --seed)")

    p = command("compose", "compose two fields: out(x) = first(x) + second(x + first(x))")
    _opt(p, "--first", "io-cli", "first", "field applied first")
    _opt(p, "--second", "io-cli", "second", "field applied second")
    _opt(p, "--out", "io-cli", "out", "output field")

    p = command("register", "run the coarse-to-fine pipeline")
    _opt(p, "--fixed", "io-cli", "fixed", "fixed volume")
    _opt(p, "--moving", "io-cli", "moving", "moving volume")
    _opt(p, "--stages", "pipeline", "stages", "comma list drawn from 4,2,1")
    _opt(p, "--predictor", "pipeline", "predictor", "identity | translation | exec:<path>")
    _opt(p, "--out-dir", "io-cli", "out_dir", "output directory")

    p = command("evaluate", "TRE and Jacobian statistics of a field")
    _opt(p, "--field", "io-cli", "field", "predicted field")
    _opt(p, "--landmarks-fixed", "io-cli", "landmarks_fixed", "fixed landmarks (or a 6-column file)")
    _opt(p, "--landmarks-moving", "io-cli", "landmarks_moving", "moving landmarks")
    _opt(p, "--mask", "io-cli", "mask", "evaluation mask for Jacobian statistics")
    _flag(p, "--index-coords", "metrics-loss", "index_coords", "landmarks are voxel indices, not mm")
    _opt(p, "--out", "io-cli", "out", "CSV report")
    _opt(p, "--plot", "io-cli", "plot", "PNG of initial vs registered distances (default: beside --out)")

    p = command("loss", "Huber + bending-energy loss between two fields")
    _opt(p, "--truth", "io-cli", "truth", "ground-truth field")
    _opt(p, "--pred", "io-cli", "pred", "predicted field")
    _opt(p, "--gamma", "metrics-loss", "gamma", "bending-energy weight")
    _opt(p, "--grad-out", "io-cli", "grad_out", "write the loss gradient field")
    _opt(p, "--out", "io-cli", "out", "write the report as CSV")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            cfg.set(section, key, value)
    return cfg


def _require(cfg: RunConfig, key: str, flag: str) -> str:
    value = cfg.get("io-cli", key)
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _triple(cfg, section, key) -> tuple:
    vals = cfg.get_list(section, key)
    if vals is None or len(vals) != 3:
        raise ConfigError(f"[{section}] {key} needs 3 values, got {cfg.get(section, key)!r}")
    return tuple(vals)


def _config_path(out: Path) -> Path:
    return out.with_name(out.stem + ".resolved.ini")


# ---------------------------------------------------------------------------


def cmd_gen_dvf(cfg: RunConfig) -> int:
    out = Path(_require(cfg, "out", "--out"))
    category = _CATEGORY_ALIASES.get(cfg.get("dvf-synth", "category").lower())
    if category is None:
        raise ParameterError(f"unknown category {cfg.get('dvf-synth', 'category')!r}")
    stage = cfg.get_int("dvf-synth", "stage")
    cls = cfg.get("dvf-synth", "frequency_class") or None
    seed = cfg.get_int("run", "seed") or 0
    spec = default_spec(category, stage, None if category == "identity" else cls, seed=seed)
    theta = cfg.get_float("dvf-synth", "theta")
    if theta is not None:
        spec = replace(spec, theta=theta)

    mask = read_volume(cfg.get("io-cli", "mask")) if cfg.get("io-cli", "mask") else None
    if mask is not None:
        dims, spacing, origin = mask.dims, mask.spacing, mask.origin
    else:
        dims = tuple(int(n) for n in _triple(cfg, "dvf-synth", "dims"))
        spacing, origin = _triple(cfg, "dvf-synth", "spacing"), (0.0, 0.0, 0.0)
    field = generate(spec, dims, spacing, origin, mask)
    write_image(out, field)
    cfg.write(_config_path(out))

    jac = jacobian_determinant(field).data
    bins = cfg.get_int("metrics-loss", "hist_bins")
    lo, hi = _hist_range(cfg)
    hist_csv = cfg.get("io-cli", "hist_csv")
    if hist_csv:
        write_jacobian_histogram(hist_csv, jac, bins, (lo, hi))
    plot = _plot_path(cfg, hist_csv)
    if plot:
        from .plotting import plot_field_summary
        from .report import jacobian_histogram

        counts, edges, _, _ = jacobian_histogram(jac, bins, (lo, hi))
        plot_field_summary(field, jac, counts, edges, plot, spec.label)
    peak = np.abs(field.data).max(axis=(0, 1, 2))
    print(f"{spec.label} seed={seed} theta={fmt(spec.theta)} max_abs={','.join(fmt(v) for v in peak)} std_jac={fmt(float(np.std(jac)))}")
    return 0


def _plot_path(cfg, csv_path):
    """Explicit --plot, else a PNG beside the CSV report (if any)."""
    if cfg.get("io-cli", "plot"):
        return cfg.get("io-cli", "plot")
    return Path(csv_path).with_suffix(".png") if csv_path else None


def _hist_range(cfg):
    r = cfg.get_list("metrics-loss", "hist_range")
    if r is None or len(r) != 2 or not r[0] < r[1]:
        raise ConfigError(f"[metrics-loss] hist_range must be LO,HI with LO < HI, got {cfg.get('metrics-loss', 'hist_range')!r}")
    return r[0], r[1]


def cmd_make_pairs(cfg: RunConfig) -> int:
    source_path = Path(_require(cfg, "input", "--input"))
    out_dir = Path(_require(cfg, "out_dir", "--out-dir"))
    stage = cfg.get_int("pair-factory", "stage")
    seed = cfg.get_int("run", "seed") or 0
    source = read_volume(source_path)
    mask = read_volume(cfg.get("io-cli", "mask")) if cfg.get("io-cli", "mask") else None
    source_id = cfg.get("pair-factory", "source_id") or source_path.stem
    pairs = expand_basis(
        source, stage, mask, seed, source_id,
        workers=cfg.get_int("pair-factory", "workers") or 1,
        sigma_n=cfg.get_float("intensity-model", "sigma_n"),
        chain_sigma_n=cfg.get_float("intensity-model", "chain_sigma_n"),
    )
    manifest = save_pairs(pairs, out_dir, extra={"stage": stage, "seed": seed, "source": str(source_path)})
    patch_size = cfg.get_int("pair-factory", "patch_size")
    if patch_size:
        per_pair = cfg.get_int("pair-factory", "patches_per_pair")
        rows = []
        for k, pair in enumerate(pairs):
            plan = sample_patches(pair, stage, per_pair, patch_size, seed=pair.provenance.noise_seed)
            rows.extend((k, *c, int(b), f"[{plan.bins[b][0]:g},{plan.bins[b][1]:g})") for c, b in zip(plan.centers, plan.labels))
        write_csv(out_dir / "patches.csv", ("pair", "ix", "iy", "iz", "bin", "range_mm"), rows)
    cfg.write(out_dir / "resolved_config.ini")
    print(f"wrote {len(pairs)} pairs to {manifest}")
    return 0


def cmd_deform(cfg: RunConfig) -> int:
    vol = read_volume(_require(cfg, "input", "--input"))
    field = read_field(_require(cfg, "field", "--field"))
    out = Path(_require(cfg, "out", "--out"))
    result = warp(vol, field)
    if cfg.get_bool("intensity-model", "sponge"):
        result, folds = apply_sponge(result, jacobian_determinant(field))
        if folds:
            log.warning("sponge clamp applied at %d voxels", folds)
    sigma = cfg.get_float("intensity-model", "deform_sigma_n") or 0.0
    if sigma:
        noise_seed = cfg.get_int("intensity-model", "noise_seed")
        result = add_noise(result, NoiseParams(sigma, cfg.get_int("run", "seed") if noise_seed is None else noise_seed))
    write_image(out, result)
    cfg.write(_config_path(out))
    return 0


def cmd_compose(cfg: RunConfig) -> int:
    first = read_field(_require(cfg, "first", "--first"))
    second = read_field(_require(cfg, "second", "--second"))
    out = Path(_require(cfg, "out", "--out"))
    write_image(out, compose(first, second))
    cfg.write(_config_path(out))
    return 0


def make_predictor(name: str):
    if name == "identity":
        return IdentityPredictor()
    if name == "translation":
        return TranslationPredictor()
    if name.startswith("exec:") and len(name) > 5:
        return ExecPredictor(name[5:])
    raise ParameterError(f"unknown predictor {name!r} (identity | translation | exec:<path>)")


def cmd_register(cfg: RunConfig) -> int:
    fixed = read_volume(_require(cfg, "fixed", "--fixed"))
    moving = read_volume(_require(cfg, "moving", "--moving"))
    out_dir = Path(_require(cfg, "out_dir", "--out-dir"))
    stages = cfg.get_list("pipeline", "stages", int)
    name = cfg.get("pipeline", "predictor")
    result = run_pipeline(fixed, moving, [(s, make_predictor(name)) for s in stages])
    write_image(out_dir / "total.mhd", result.total)
    write_image(out_dir / "warped_moving.mhd", result.warped_moving)
    for s, f in result.stage_outputs.items():
        write_image(out_dir / f"stage{s}.mhd", f)
    write_csv(out_dir / "timings.csv", ("stage", "seconds"), sorted(result.timings.items(), reverse=True))
    cfg.write(out_dir / "resolved_config.ini")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    field = read_field(_require(cfg, "field", "--field"))
    out = Path(_require(cfg, "out", "--out"))
    grid = field if cfg.get_bool("metrics-loss", "index_coords") else None
    moving_lm = cfg.get("io-cli", "landmarks_moving") or None
    lm = read_landmarks(_require(cfg, "landmarks_fixed", "--landmarks-fixed"), moving_lm, grid)
    result = tre(lm, field)
    stats = None
    if cfg.get("io-cli", "mask"):
        stats = jacobian_stats(field, read_volume(cfg.get("io-cli", "mask")))
    write_tre_report(out, lm, result, stats)
    from .plotting import plot_tre

    plot_tre(lm.initial_distances()[result.indices], result.distances, _plot_path(cfg, out))
    cfg.write(_config_path(out))
    line = f"n={result.distances.size} tre_mean={fmt(result.mean)} tre_std={fmt(result.std)}"
    if stats is not None:
        line += f" pct_folding={fmt(stats[0])} std_jac={fmt(stats[1])}"
    print(line)
    return 0


def cmd_loss(cfg: RunConfig) -> int:
    truth = read_field(_require(cfg, "truth", "--truth"))
    pred = read_field(_require(cfg, "pred", "--pred"))
    params = LossParams(gamma=cfg.get_float("metrics-loss", "gamma"))
    hub = huber(truth, pred)
    be = bending_energy(pred)
    tot = total_loss(truth, pred, params)
    report = [("huber", hub.value), ("bending_energy", be.value), ("gamma", params.gamma), ("total", tot.value)]
    for key, value in report:
        print(f"{key}={fmt(value)}")
    if cfg.get("io-cli", "grad_out"):
        write_image(cfg.get("io-cli", "grad_out"), tot.gradient)
    if cfg.get("io-cli", "out"):
        out = Path(cfg.get("io-cli", "out"))
        write_csv(out, ("quantity", "value"), report)
        cfg.write(_config_path(out))
    return 0


COMMANDS = {
    "gen-dvf": cmd_gen_dvf,
    "make-pairs": cmd_make_pairs,
    "deform": cmd_deform,
    "compose": cmd_compose,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "loss": cmd_loss,
}


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except RegSynthError as exc:
        return _fail(exc.code, exc)
    except OSError as exc:
        return _fail("E_IO", exc)


def _fail(code: str, exc: Exception) -> int:
    msg = str(exc).replace("\n", " ")
    print(f"error: {code}: {msg}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())

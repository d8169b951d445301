"""Command-line entry point: ``acgan <subcommand> ...``.

Exit codes: 0 success, 2 configuration / usage error, 3 data or checkpoint
error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import EvalSection, ExperimentConfig, dump_config, load_config, parse_config
from .errors import ConfigError, DataError, ParameterDomainError, TrainingDivergenceError

log = logging.getLogger("ambientcyclegan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _claim_out(out: str | Path, force: bool) -> Path:
    """Refuse to reuse a non-empty output directory unless forced (then clear it)."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise DataError(f"{out} already exists; pass --force to overwrite")
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    return out


def _archive(out: Path, args: argparse.Namespace, resolved: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"command": args.command, "arguments": argv, "resolved": resolved or {}, "version": __version__}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=1, default=str))


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return vals[0], vals[1]


# ---------------------------------------------------------------- commands


def cmd_generate_clb(args) -> int:
    from .dataio import synthesize_corpus

    cfg = load_config(args.config)
    if args.domain == "x":
        section, measurement, seed = cfg.clb_x, None, cfg.seeds.data_x
    else:
        if cfg.clb_y is None:
            raise ConfigError("clb_y: required to generate Y-domain phantoms")
        section, seed = cfg.clb_y, cfg.seeds.data_y
        measurement = cfg.measurement.build() if args.domain == "y" else None
    count = args.count if args.count is not None else (cfg.train.n_images_x if args.domain == "x" else cfg.train.n_images_y)
    out = _claim_out(args.out, args.force)
    seed = args.seed if args.seed is not None else seed
    m = synthesize_corpus(
        section.params(), count, seed, out, measurement=measurement, domain_tag="Y" if args.domain != "x" else "X"
    )
    _archive(out, args, {"clb": section.params().to_dict(), "base_seed": seed, "count": count,
                         "measurement": measurement.to_dict() if measurement else None})
    print(m.path)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .dataio import DatasetManifest, simulate_measurements
    from .measurement import MeasurementConfig

    manifest = DatasetManifest.load(args.in_manifest)
    mc = MeasurementConfig(noise_std=args.noise_std, noise_mean=args.noise_mean)
    out = _claim_out(args.out, args.force)
    m = simulate_measurements(manifest, mc, out, base_seed=args.seed)
    _archive(out, args, {"measurement": mc.to_dict()})
    print(m.path)
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .dataio import ingest_directory

    out = _claim_out(args.out, args.force)
    m = ingest_directory(args.dir, args.size, out, normalization=args.normalization)
    _archive(out, args, {"count": m.count, "skipped": len(m.skipped)})
    print(m.path)
    return EXIT_OK


def cmd_train(args) -> int:
    from . import trainer
    from .experiments import prepare_training_data

    cfg = load_config(args.config)
    root = Path(args.out or cfg.output_dir)
    run_dir = root / "run"
    if run_dir.exists() and any(run_dir.iterdir()) and not args.force:
        raise DataError(f"{run_dir} already exists; pass --force to overwrite or use resume")
    xm, ym = prepare_training_data(cfg, root / "data", overwrite=args.force, reuse=not args.force)
    (root / "experiment.json").write_text(dump_config(cfg))
    result = trainer.train(cfg.train_config(), xm, ym, run_dir, stop_at=args.stop_at, overwrite=args.force)
    _archive(run_dir, args, cfg.model_dump(mode="json"))
    print(result.checkpoint)
    return EXIT_OK


def cmd_resume(args) -> int:
    from . import trainer

    result = trainer.resume(args.run_dir, stop_at=args.stop_at)
    print(result.checkpoint)
    return EXIT_OK


def cmd_translate(args) -> int:
    from .dataio import DatasetManifest
    from .experiments import generate
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.in_manifest)
    g = ckpt.bundle.g_x if args.direction == "x2y" else ckpt.bundle.g_y
    out = _claim_out(args.out, args.force)
    if args.direction == "x2y":
        m = generate(g, manifest, out, {"checkpoint": str(ckpt.path), "step": ckpt.step})
    else:
        from .dataio import write_corpus
        from .gan.step import translate_array

        m = write_corpus(
            translate_array(g, manifest.load_array()),
            out,
            domain_tag="X",
            normalization=manifest.normalization,
            provenance={"source": "translation", "input": str(manifest.root), "checkpoint": str(ckpt.path)},
        )
    _archive(out, args, {"checkpoint_step": ckpt.step, "direction": args.direction})
    print(m.path)
    return EXIT_OK


def _eval_section(args) -> EvalSection:
    base = load_config(args.config).eval.model_dump() if args.config else {}
    metrics = tuple(s.strip() for s in args.metrics.split(",") if s.strip())
    overrides = {"metrics": metrics}
    for key in ("embedder", "patch_size", "n_pairs", "ho_train", "ho_test", "seed"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    return parse_config({**base, **overrides}, EvalSection)


def cmd_evaluate(args) -> int:
    from .dataio import DatasetManifest
    from .experiments import evaluate_sets

    section = _eval_section(args)
    truth = DatasetManifest.load(args.truth_manifest)
    gen = DatasetManifest.load(args.gen_manifest)
    if truth.image_size != gen.image_size:
        raise DataError(f"truth images are {truth.image_size}, generated images are {gen.image_size}")
    out = _claim_out(args.out, args.force)
    report = evaluate_sets(_EvalOnly(section), truth.load_array(), gen.load_array())
    report.meta.update({"truth": str(truth.path), "generated": str(gen.path)})
    path = report.write(out, plots=not args.no_plots)
    _archive(out, args, {"eval": section.model_dump(mode="json")})
    print(path)
    return EXIT_OK


class _EvalOnly:
    """Stand-in carrying just the eval section for ``evaluate_sets``."""

    def __init__(self, section: EvalSection):
        self.eval = section


def cmd_interpret(args) -> int:
    from .experiments import interpret_checkpoint, parse_edit

    edit = parse_edit(args.edit)
    out = _claim_out(args.out, args.force)
    try:
        res = interpret_checkpoint(args.checkpoint, args.base_seed, edit, edit_seed=args.edit_seed, threshold=args.threshold)
    except IndexError as exc:
        raise ConfigError(f"edit {args.edit!r}: {exc}") from None
    path = res.write(out)
    _archive(out, args, res.to_dict())
    print(path)
    print(f"energy fraction inside edit region: {res.energy_fraction:.4f} (threshold {res.threshold})")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiments import compare

    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    if args.force:
        _claim_out(out, True)
    result = compare(cfg, out)
    _archive(out, args, cfg.model_dump(mode="json"))
    for name, ok in result.orderings.items():
        print(f"{name}: ambient better = {ok}")
    print(out / "comparison.json")
    return EXIT_OK


def cmd_show_config(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig(clb_y={"preset": "simpiso"})
    print(dump_config(cfg))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acgan", description="Measurement-aware CycleGAN stochastic object models.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    s = add("generate-clb", cmd_generate_clb, "synthesize a CLB phantom corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--domain", choices=["x", "y", "y-clean"], default="x",
                   help="x: clb_x phantoms; y: clb_y through the measurement operator; y-clean: clb_y without noise")
    s.add_argument("--seed", type=int, help="base seed (default: seeds.data_x / seeds.data_y)")
    s.add_argument("--force", action="store_true")

    s = add("simulate-measurements", cmd_simulate, "pass a clean corpus through the noise model")
    s.add_argument("--in-manifest", required=True)
    s.add_argument("--noise-std", type=float, default=0.04)
    s.add_argument("--noise-mean", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0, help="base seed for entries without a recorded seed")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = add("ingest", cmd_ingest, "convert a directory of images into a Y corpus")
    s.add_argument("--dir", required=True)
    s.add_argument("--size", type=_size, default=(256, 256))
    s.add_argument("--normalization", choices=["percentile", "minmax", "none"], default="percentile")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = add("train", cmd_train, "train from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="experiment directory (default: output_dir from the config)")
    s.add_argument("--stop-at", type=int, help="stop after this many steps (resume later)")
    s.add_argument("--force", action="store_true")

    s = add("resume", cmd_resume, "continue a run from its latest checkpoint")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--stop-at", type=int)

    s = add("translate", cmd_translate, "apply a trained generator to a corpus")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in-manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--direction", choices=["x2y", "y2x"], default="x2y")
    s.add_argument("--force", action="store_true")

    s = add("evaluate", cmd_evaluate, "compare a generated corpus with a truth corpus")
    s.add_argument("--truth-manifest", required=True)
    s.add_argument("--gen-manifest", required=True)
    s.add_argument("--metrics", default="fid,raps,ssim,ho")
    s.add_argument("--config", help="take evaluation settings from this experiment config")
    s.add_argument("--embedder", choices=["random_projection", "downsample", "canonical"])
    s.add_argument("--patch-size", type=int)
    s.add_argument("--n-pairs", type=int)
    s.add_argument("--ho-train", type=int)
    s.add_argument("--ho-test", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = add("interpret", cmd_interpret, "edit a phantom and localize the change in the translated output")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--base-seed", type=int, required=True)
    s.add_argument("--edit", required=True, help="add:cx,cy,n or move:idx,cx,cy")
    s.add_argument("--edit-seed", type=int, help="seed for the added lumps (default base-seed + 1)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = add("compare", cmd_compare, "train and evaluate AmbientCycleGAN and plain CycleGAN side by side")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")

    s = add("show-config", cmd_show_config, "print a resolved experiment config (defaults when none given)")
    s.add_argument("--config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterDomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

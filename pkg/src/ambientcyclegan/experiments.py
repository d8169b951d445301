"""Experiment drivers: corpus preparation, training, the ambient-vs-plain comparison and edit interpretation."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trainer as trainer_mod
from .clb import (
    ClbParams,
    ClbRealization,
    Normalization,
    add_cluster,
    cluster_support_radius,
    move_cluster,
    render,
    sample_clb,
)
from .config import ExperimentConfig, dump_config
from .dataio import DatasetManifest, ingest_directory, synthesize_corpus, write_corpus
from .errors import CheckpointError, ConfigError, DataError
from .evalsuite import EvalReport, SignalParams, evaluate, make_embedder
from .gan.step import translate_array

log = logging.getLogger(__name__)

# seed offsets keeping evaluation phantoms disjoint from the training corpora
EVAL_X_OFFSET = 10_000_000
EVAL_TRUTH_OFFSET = 20_000_000
VARIANTS = ("ambient", "cyclegan")


def _reuse(path: Path, count: int) -> DatasetManifest | None:
    try:
        m = DatasetManifest.load(path)
    except DataError:
        return None
    return m if m.count == count else None


def prepare_training_data(cfg: ExperimentConfig, data_root: str | Path, overwrite: bool = False, reuse: bool = False):
    """X phantoms and Y measurements for training; manifests named in the config take precedence."""
    data_root = Path(data_root)
    t = cfg.train
    if t.x_manifest:
        xm = DatasetManifest.load(t.x_manifest)
    else:
        xm = (reuse and _reuse(data_root / "x", t.n_images_x)) or synthesize_corpus(
            cfg.clb_x.params(), t.n_images_x, cfg.seeds.data_x, data_root / "x", name="x_train", overwrite=overwrite
        )
    if t.y_manifest:
        ym = DatasetManifest.load(t.y_manifest)
    elif cfg.clb_y is not None:
        ym = (reuse and _reuse(data_root / "y", t.n_images_y)) or synthesize_corpus(
            cfg.clb_y.params(),
            t.n_images_y,
            cfg.seeds.data_y,
            data_root / "y",
            measurement=cfg.measurement.build(),
            name="y_train",
            overwrite=overwrite,
        )
    else:
        ing = cfg.ingest_y
        ym = None
        if reuse and (data_root / "y").exists():
            ym = DatasetManifest.load(data_root / "y")
        if ym is None:
            ym = ingest_directory(ing.directory, ing.size, data_root / "y", normalization=ing.normalization, overwrite=overwrite)
    return xm, ym


def prepare_eval_data(cfg: ExperimentConfig, data_root: str | Path, y_manifest: DatasetManifest, overwrite=False, reuse=False):
    """Fresh X phantoms to translate, and the truth set the outputs are compared with.

    With a CLB Y domain the truth is clean (noise-free) Y phantoms; with ingested
    data only the measured images exist, so they serve as the truth.
    """
    data_root = Path(data_root)
    n = cfg.eval.n_images
    xe = (reuse and _reuse(data_root / "x_eval", n)) or synthesize_corpus(
        cfg.clb_x.params(), n, cfg.seeds.data_x + EVAL_X_OFFSET, data_root / "x_eval", name="x_eval", overwrite=overwrite
    )
    if cfg.clb_y is not None:
        truth = (reuse and _reuse(data_root / "truth", n)) or synthesize_corpus(
            cfg.clb_y.params(),
            n,
            cfg.seeds.data_y + EVAL_TRUTH_OFFSET,
            data_root / "truth",
            name="truth_clean",
            domain_tag="Y",
            overwrite=overwrite,
        )
    else:
        truth = y_manifest
    return xe, truth


def train_or_resume(cfg: ExperimentConfig, xm, ym, run_dir: Path, overwrite: bool = False):
    """Train in ``run_dir``, continuing from its latest checkpoint when one exists."""
    tc = cfg.train_config()
    if not overwrite:
        try:
            ckpt = trainer_mod.load_checkpoint(run_dir)
        except CheckpointError:
            ckpt = None
        if ckpt is not None:
            if ckpt.config != tc:
                raise DataError(f"{run_dir} holds a run with a different config (use force to replace it)")
            if ckpt.step >= tc.train.total_steps:
                log.info("%s already complete at step %d", run_dir, ckpt.step)
                return ckpt.bundle
            return trainer_mod.resume(run_dir).bundle
    return trainer_mod.train(tc, xm, ym, run_dir, overwrite=overwrite).bundle


def generate(g_x, x_eval: DatasetManifest, out_dir: Path, provenance: dict, overwrite: bool = False) -> DatasetManifest:
    images = translate_array(g_x, x_eval.load_array())
    return write_corpus(
        images,
        out_dir,
        domain_tag="Y",
        normalization=x_eval.normalization,
        provenance={"source": "translation", "input": str(x_eval.root), **provenance},
        overwrite=overwrite,
    )


def evaluate_sets(cfg: ExperimentConfig, truth: np.ndarray, generated: np.ndarray) -> EvalReport:
    e = cfg.eval
    emb = make_embedder(e.embedder, e.embedder_dim, e.embedder_seed, e.embedder_path)
    signal = SignalParams(e.signal_amplitude, e.signal_std, (e.patch_size, e.patch_size))
    return evaluate(
        truth,
        generated,
        metrics=e.metrics,
        embedder=emb,
        n_pairs=e.n_pairs,
        signal=signal,
        ho_regularization=e.ho_regularization,
        ho_train=e.ho_train,
        ho_test=e.ho_test,
        seed=e.seed,
    )


# ordering name -> summary key; each holds when ambient scores lower than plain CycleGAN
ORDERINGS = {
    "a_fid": "fid",
    "b_log_spectrum_distance": "log_spectrum_distance",
    "c_ssim_ks": "ssim_ks",
    "d_auc_gap": "auc_gap",
    "e_high_frequency_excess": "high_frequency_excess",
}
# reported alongside, not part of the pass/fail set: the detectability gap keeps
# ordering the models when both AUCs saturate at 1
DIAGNOSTICS = {"snr_gap": "snr_gap"}


@dataclass
class Comparison:
    reports: dict[str, EvalReport]
    orderings: dict[str, bool | None] = field(default_factory=dict)
    out_dir: Path | None = None

    @property
    def diagnostics(self) -> dict[str, bool | None]:
        return orderings(self.reports, DIAGNOSTICS)

    def to_dict(self) -> dict:
        return {
            "summary": {k: r.summary() for k, r in self.reports.items()},
            "ambient_better": self.orderings,
            "diagnostics_ambient_better": self.diagnostics,
        }


def orderings(reports: dict[str, EvalReport], keys: dict[str, str] = ORDERINGS) -> dict[str, bool | None]:
    amb, cyc = reports["ambient"].summary(), reports["cyclegan"].summary()
    out = {}
    for name, key in keys.items():
        a, c = amb[key], cyc[key]
        out[name] = None if a is None or c is None else bool(a < c)
    return out


def desk_config(
    image_size: int = 64,
    n_images: int = 2000,
    steps: int = 20000,
    n_eval: int = 6500,
    patch: int = 32,
    gen_width: int = 8,
    n_blocks: int = 3,
    disc_width: int = 8,
    disc_layers: int = 3,
    output_dir: str = "runs/desk",
    **train_overrides,
) -> ExperimentConfig:
    """Reduced-scale comparison: scaled opex phantoms (X) against noisy scaled simpiso phantoms (Y).

    Network widths default to a size that trains 2 x 20,000 steps at 64x64 in a
    few hours on one CPU core.
    """
    size = (image_size, image_size)
    doc = {
        "clb_x": {"preset": "opex", "image_size": size, "scale_density_from_256": True},
        "clb_y": {"preset": "simpiso", "image_size": size, "scale_density_from_256": True},
        "model": {
            "generator": {"base_width": gen_width, "n_residual_blocks": n_blocks},
            "discriminator": {"base_width": disc_width, "n_layers": disc_layers},
        },
        "train": {
            "total_steps": steps,
            "n_images_x": n_images,
            "n_images_y": n_images,
            "checkpoint_every": max(1, min(1000, steps)),
            **train_overrides,
        },
        "eval": {"n_images": n_eval, "patch_size": patch},
        "output_dir": output_dir,
    }
    return ExperimentConfig.model_validate(doc)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, overwrite: bool = False) -> EvalReport:
    """Synthesize data, train the configured variant, translate evaluation phantoms and evaluate."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(dump_config(cfg))
    xm, ym = prepare_training_data(cfg, out / "data", overwrite=overwrite, reuse=not overwrite)
    bundle = train_or_resume(cfg, xm, ym, out / "run", overwrite=overwrite)
    xe, truth = prepare_eval_data(cfg, out / "data", ym, overwrite=overwrite, reuse=not overwrite)
    gen = generate(bundle.g_x, xe, out / "generated", {"run": str(out / "run")}, overwrite=True)
    report = evaluate_sets(cfg, truth.load_array(), gen.load_array())
    report.write(out / "report")
    return report


def compare(cfg: ExperimentConfig, out_dir: str | Path | None = None, overwrite: bool = False) -> Comparison:
    """Train AmbientCycleGAN and plain CycleGAN on the same corpora, seeds and budget, then evaluate both."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(dump_config(cfg))
    reuse = not overwrite
    xm, ym = prepare_training_data(cfg, out / "data", overwrite=overwrite, reuse=reuse)
    xe, truth = prepare_eval_data(cfg, out / "data", ym, overwrite=overwrite, reuse=reuse)
    truth_images = truth.load_array()
    reports = {}
    for variant in VARIANTS:
        vcfg = cfg.model_copy(update={"model": cfg.model.model_copy(update={"variant": variant})})
        bundle = train_or_resume(vcfg, xm, ym, out / variant / "run", overwrite=overwrite)
        gen = generate(bundle.g_x, xe, out / variant / "generated", {"variant": variant}, overwrite=True)
        reports[variant] = evaluate_sets(vcfg, truth_images, gen.load_array())
        reports[variant].write(out / variant / "report")
    result = Comparison(reports, orderings(reports), out)
    (out / "comparison.json").write_text(json.dumps(result.to_dict(), indent=1))
    return result


# ---------------------------------------------------------------- edits

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_ADD = re.compile(rf"^add:({_NUM}),({_NUM}),(\d+)$")
_MOVE = re.compile(rf"^move:(\d+),({_NUM}),({_NUM})$")


@dataclass(frozen=True)
class Edit:
    kind: str  # "add" | "move"
    center: tuple[float, float]
    n_lumps: int = 0
    cluster_index: int = -1


def parse_edit(text: str) -> Edit:
    """``add:cx,cy,n`` or ``move:idx,cx,cy``; coordinates are (column, row) pixels."""
    s = text.replace(" ", "")
    if m := _ADD.match(s):
        n = int(m.group(3))
        if n < 1:
            raise ConfigError(f"edit {text!r}: an added cluster needs at least one lump")
        return Edit("add", (float(m.group(1)), float(m.group(2))), n_lumps=n)
    if m := _MOVE.match(s):
        return Edit("move", (float(m.group(2)), float(m.group(3))), cluster_index=int(m.group(1)))
    raise ConfigError(f"malformed edit {text!r}; expected add:cx,cy,n or move:idx,cx,cy")


def apply_edit(r: ClbRealization, edit: Edit, seed: int) -> ClbRealization:
    if edit.kind == "add":
        return add_cluster(r, edit.center, edit.n_lumps, seed)
    return move_cluster(r, edit.cluster_index, edit.center)


def edit_region(base: ClbRealization, edited: ClbRealization, edit: Edit, extra_radius: float = 0.0) -> tuple[np.ndarray, float]:
    """Pixels within the lump support bound of the touched cluster(s), plus ``extra_radius``."""
    params = base.params
    h, w = params.image_size
    if edit.kind == "add":
        cluster = edited.clusters[-1]
        centers = [cluster.center]
    else:
        cluster = base.clusters[edit.cluster_index]
        centers = [cluster.center, edited.clusters[edit.cluster_index].center]
    radius = cluster_support_radius(params, cluster) + extra_radius
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for cx, cy in centers:
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    return mask, radius


@dataclass
class InterpretResult:
    base_object: np.ndarray
    edited_object: np.ndarray
    base_output: np.ndarray
    edited_output: np.ndarray
    region: np.ndarray
    support_radius: float
    energy_fraction: float
    total_energy: float
    threshold: float

    @property
    def difference(self) -> np.ndarray:
        return self.edited_output - self.base_output

    @property
    def region_area_fraction(self) -> float:
        return float(self.region.mean())

    @property
    def localized(self) -> bool:
        return self.energy_fraction >= self.threshold

    def to_dict(self) -> dict:
        return {
            "energy_fraction": self.energy_fraction,
            "total_energy": self.total_energy,
            "support_radius": self.support_radius,
            "region_area_fraction": self.region_area_fraction,
            "threshold": self.threshold,
            "localized": self.localized,
        }

    def write(self, out_dir: str | Path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "difference.npy", self.difference)
        (out / "interpret.json").write_text(json.dumps(self.to_dict(), indent=1))
        panels = [
            (self.base_object, "base phantom", "gray"),
            (self.edited_object, "edited phantom", "gray"),
            (self.base_output, "G_x(base)", "gray"),
            (self.edited_output, "G_x(edited)", "gray"),
        ]
        fig, axes = plt.subplots(1, 5, figsize=(15, 3.4))
        for ax, (img, title, cmap) in zip(axes, panels):
            ax.imshow(img, cmap=cmap, vmin=-1, vmax=1)
            ax.set_title(title)
        diff = self.difference
        lim = float(np.abs(diff).max()) or 1.0
        im = axes[4].imshow(diff, cmap="RdBu_r", vmin=-lim, vmax=lim)
        axes[4].contour(self.region, levels=[0.5], colors="k", linewidths=0.8)
        axes[4].set_title(f"difference ({self.energy_fraction:.2f} inside)")
        fig.colorbar(im, ax=axes[4], fraction=0.046)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(out / "interpret.png", dpi=110)
        plt.close(fig)
        return out / "interpret.json"


def interpret(
    g_x,
    params: ClbParams,
    normalization: Normalization,
    base_seed: int,
    edit: Edit,
    edit_seed: int | None = None,
    threshold: float = 0.5,
    extra_radius: float = 0.0,
) -> InterpretResult:
    """Translate a phantom and its edited copy through G_x and measure how local the change is.

    An edit that changes nothing has zero difference energy; its fraction is reported as 1.
    """
    base = sample_clb(params, base_seed)
    edited = apply_edit(base, edit, base_seed + 1 if edit_seed is None else edit_seed)
    objs = np.stack([normalization.apply(render(base)), normalization.apply(render(edited))]).astype(np.float32)
    outs = translate_array(g_x, objs).astype(np.float64)
    region, radius = edit_region(base, edited, edit, extra_radius)
    energy = (outs[1] - outs[0]) ** 2
    total = float(energy.sum())
    frac = 1.0 if total == 0 else float(energy[region].sum() / total)
    return InterpretResult(objs[0], objs[1], outs[0], outs[1], region, radius, frac, total, threshold)


def interpret_checkpoint(path, base_seed: int, edit: Edit, **kw) -> InterpretResult:
    """``interpret`` with G_x, the phantom parameters and normalization taken from a checkpoint."""
    ckpt = trainer_mod.load_checkpoint(path)
    extra = ckpt.extra
    try:
        params = ClbParams.from_dict(extra["x_provenance"]["clb_params"])
    except (KeyError, TypeError):
        raise DataError("checkpoint was not trained on a CLB X corpus; cannot re-render phantoms") from None
    norm = Normalization.from_dict(extra["x_normalization"])
    return interpret(ckpt.bundle.g_x, params, norm, base_seed, edit, **kw)

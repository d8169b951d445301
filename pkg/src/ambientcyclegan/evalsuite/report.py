"""Evaluation battery over a truth set and a generated set, with JSON and PNG output."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedders import FeatureEmbedder, RandomProjectionEmbedder
from .metrics import (
    RadialSpectrum,
    SsimPairs,
    fid,
    high_frequency_power,
    log_spectrum_distance,
    radial_power_spectrum,
    ssim_pair_pdf,
)
from .observer import RocResult, SignalParams, ho_study

ALL_METRICS = ("fid", "raps", "ssim", "ho")


@dataclass
class EvalReport:
    fid: float | None = None
    spectrum_truth: RadialSpectrum | None = None
    spectrum_gen: RadialSpectrum | None = None
    ssim_truth: SsimPairs | None = None
    ssim_gen: SsimPairs | None = None
    roc_truth: RocResult | None = None
    roc_gen: RocResult | None = None
    meta: dict = field(default_factory=dict)

    @property
    def log_spectrum_distance(self) -> float | None:
        if self.spectrum_truth is None:
            return None
        return log_spectrum_distance(self.spectrum_truth, self.spectrum_gen)

    @property
    def high_frequency_excess(self) -> float | None:
        if self.spectrum_truth is None:
            return None
        return high_frequency_power(self.spectrum_gen) - high_frequency_power(self.spectrum_truth)

    @property
    def ssim_ks(self) -> float | None:
        return None if self.ssim_truth is None else self.ssim_truth.ks(self.ssim_gen)

    @property
    def auc_gap(self) -> float | None:
        return None if self.roc_truth is None else abs(self.roc_gen.auc - self.roc_truth.auc)

    @property
    def snr_gap(self) -> float | None:
        # still informative when both AUCs saturate at 1
        return None if self.roc_truth is None else abs(self.roc_gen.snr - self.roc_truth.snr)

    def summary(self) -> dict:
        return {
            "fid": self.fid,
            "log_spectrum_distance": self.log_spectrum_distance,
            "high_frequency_excess": self.high_frequency_excess,
            "ssim_ks": self.ssim_ks,
            "auc_truth": None if self.roc_truth is None else self.roc_truth.auc,
            "auc_gen": None if self.roc_gen is None else self.roc_gen.auc,
            "auc_gap": self.auc_gap,
            "snr_truth": None if self.roc_truth is None else self.roc_truth.snr,
            "snr_gen": None if self.roc_gen is None else self.roc_gen.snr,
            "snr_gap": self.snr_gap,
        }

    def to_dict(self) -> dict:
        def opt(x):
            return None if x is None else x.to_dict()

        return {
            "summary": self.summary(),
            "spectrum": {"truth": opt(self.spectrum_truth), "generated": opt(self.spectrum_gen)},
            "ssim": {"truth_truth": opt(self.ssim_truth), "generated_truth": opt(self.ssim_gen)},
            "roc": {"truth": opt(self.roc_truth), "generated": opt(self.roc_gen)},
            "meta": self.meta,
        }

    def write(self, out_dir: str | Path, plots: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1))
        if self.roc_gen is not None:
            (out / "roc.json").write_text(
                json.dumps({"truth": self.roc_truth.to_dict(), "generated": self.roc_gen.to_dict()})
            )
        if plots:
            self.plot(out)
        return out / "report.json"

    def plot(self, out: Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        if self.spectrum_truth is not None:
            fig, ax = plt.subplots(figsize=(4.5, 3.5))
            for s, label in ((self.spectrum_truth, "truth"), (self.spectrum_gen, "generated")):
                m = s.nyquist_mask
                ax.semilogy(s.radii[m], s.power[m], label=label)
            ax.set_xlabel("radial frequency (cycles / image)")
            ax.set_ylabel("mean power")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / "spectrum.png", dpi=120)
            plt.close(fig)
        if self.ssim_truth is not None:
            fig, ax = plt.subplots(figsize=(4.5, 3.5))
            ax.plot(self.ssim_truth.kde_x, self.ssim_truth.kde_y, label="truth-truth")
            ax.plot(self.ssim_gen.kde_x, self.ssim_gen.kde_y, label="generated-truth")
            ax.set_xlabel("SSIM")
            ax.set_ylabel("density")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / "ssim_pdf.png", dpi=120)
            plt.close(fig)
        if self.roc_truth is not None:
            fig, ax = plt.subplots(figsize=(3.8, 3.8))
            for r, label in ((self.roc_truth, "truth"), (self.roc_gen, "generated")):
                ax.plot(r.fpf, r.tpf, label=f"{label} (AUC {r.auc:.3f})")
            ax.plot([0, 1], [0, 1], "k:", lw=0.8)
            ax.set_xlabel("FPF")
            ax.set_ylabel("TPF")
            ax.legend(loc="lower right")
            fig.tight_layout()
            fig.savefig(out / "roc.png", dpi=120)
            plt.close(fig)


def _split_ho(images: np.ndarray, n_train: int, n_test: int) -> tuple[np.ndarray, np.ndarray]:
    """First n_train images train the template, the next 2*n_test form the two test classes."""
    n_train = min(n_train, len(images) // 2)
    rest = images[n_train:]
    n_test = min(n_test, len(rest) // 2)
    return images[:n_train], rest[: 2 * n_test]


def evaluate(
    truth: np.ndarray,
    generated: np.ndarray,
    metrics=ALL_METRICS,
    embedder: FeatureEmbedder | None = None,
    n_pairs: int = 2000,
    signal: SignalParams | None = None,
    ho_regularization: float = 1e-3,
    ho_train: int = 4500,
    ho_test: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Compare generated images against ground truth with the selected metrics."""
    truth = np.asarray(truth, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    report = EvalReport(meta={"n_truth": len(truth), "n_generated": len(generated), "metrics": list(metrics)})
    if "fid" in metrics:
        embedder = embedder or RandomProjectionEmbedder()
        report.fid = fid(embedder(truth), embedder(generated))
        report.meta["embedder"] = embedder.describe()
    if "raps" in metrics:
        report.spectrum_truth = radial_power_spectrum(truth)
        report.spectrum_gen = radial_power_spectrum(generated)
    if "ssim" in metrics:
        # same pair indices for both PDFs, so identical sets give a KS distance of 0
        report.ssim_truth = ssim_pair_pdf(truth, truth, n_pairs, seed)
        report.ssim_gen = ssim_pair_pdf(generated, truth, n_pairs, seed)
    if "ho" in metrics:
        signal = signal or SignalParams()
        tr_t, te_t = _split_ho(truth, ho_train, ho_test)
        tr_g, te_g = _split_ho(generated, ho_train, ho_test)
        report.roc_truth = ho_study(tr_t, te_t, signal, ho_regularization)
        report.roc_gen = ho_study(tr_g, te_g, signal, ho_regularization)
        report.meta["ho"] = {
            "amplitude": signal.amplitude,
            "spatial_std": signal.spatial_std,
            "patch_size": list(signal.patch_size),
            "n_train_truth": len(tr_t),
            "n_test_truth": len(te_t),
            "n_train_generated": len(tr_g),
            "n_test_generated": len(te_g),
            "regularization": ho_regularization,
        }
    return report

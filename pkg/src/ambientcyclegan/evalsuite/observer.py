"""Signal-known-exactly detection with the Hotelling observer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import stats

from ..errors import ParameterDomainError


@dataclass(frozen=True)
class SignalParams:
    """Gaussian bump ``amplitude * exp(-|p - c|^2 / (2 spatial_std^2))`` at the patch centre."""

    amplitude: float = 0.3
    spatial_std: float = 0.7
    patch_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if not np.isfinite(self.amplitude):
            raise ParameterDomainError("signal amplitude must be finite")
        if not self.spatial_std > 0:
            raise ParameterDomainError("signal spatial_std must be positive")

    def image(self) -> np.ndarray:
        h, w = self.patch_size
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = (yy - h // 2) ** 2 + (xx - w // 2) ** 2
        return self.amplitude * np.exp(-r2 / (2.0 * self.spatial_std**2))


def central_crop(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    images = np.asarray(images)
    h, w = images.shape[-2:]
    ph, pw = size
    if ph > h or pw > w:
        raise ParameterDomainError(f"background {h}x{w} smaller than patch {ph}x{pw}")
    top, left = (h - ph) // 2, (w - pw) // 2
    return images[..., top : top + ph, left : left + pw]


@dataclass
class SkeDataset:
    present: np.ndarray
    absent: np.ndarray
    signal: np.ndarray


def make_ske_dataset(backgrounds: np.ndarray, sp: SignalParams, seed: int | None = None) -> SkeDataset:
    """Central patches of every background, with and without the known signal.

    ``seed``, when given, shuffles the background order (both classes alike).
    """
    patches = central_crop(np.asarray(backgrounds, dtype=np.float64), sp.patch_size)
    if seed is not None:
        patches = patches[np.random.default_rng(seed).permutation(len(patches))]
    signal = sp.image()
    return SkeDataset(patches + signal, patches.copy(), signal)


def _flat(images: np.ndarray) -> np.ndarray:
    a = np.asarray(images, dtype=np.float64)
    return a.reshape(len(a), -1)


def ho_template(train_present: np.ndarray, train_absent: np.ndarray, regularization: float = 1e-3) -> np.ndarray:
    """(S + reg * tr(S)/D * I)^-1 (mean_present - mean_absent), S the mean class covariance."""
    gp, ga = _flat(train_present), _flat(train_absent)
    if len(gp) < 2 or len(ga) < 2:
        raise ParameterDomainError("need at least two images per class")
    if gp.shape[1] != ga.shape[1]:
        raise ParameterDomainError("class images differ in size")
    d = gp.shape[1]
    cov = 0.5 * (np.cov(gp, rowvar=False) + np.cov(ga, rowvar=False))
    cov = np.atleast_2d(cov)
    cov[np.diag_indices(d)] += regularization * np.trace(cov) / d
    delta = gp.mean(axis=0) - ga.mean(axis=0)
    try:
        return scipy.linalg.solve(cov, delta, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise ParameterDomainError(
            f"covariance is not positive definite after regularization {regularization}; increase it"
        ) from exc


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpf: np.ndarray
    fpf: np.ndarray
    auc: float
    t_present: np.ndarray
    t_absent: np.ndarray

    @property
    def snr(self) -> float:
        """Detectability (mean_p - mean_a) / sqrt((var_p + var_a) / 2) of the test statistics."""
        pooled = np.sqrt(0.5 * (self.t_present.var(ddof=1) + self.t_absent.var(ddof=1)))
        diff = self.t_present.mean() - self.t_absent.mean()
        return float(diff / pooled) if pooled > 0 else float(np.sign(diff) * np.inf)

    def trapezoid_auc(self) -> float:
        return float(np.sum((self.fpf[1:] - self.fpf[:-1]) * (self.tpf[1:] + self.tpf[:-1]) / 2.0))

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "snr": self.snr,
            "thresholds": [float(t) for t in self.thresholds],
            "tpf": self.tpf.tolist(),
            "fpf": self.fpf.tolist(),
        }


def mann_whitney_auc(t_present: np.ndarray, t_absent: np.ndarray) -> float:
    """P(t_p > t_a) + 0.5 P(t_p == t_a) from average ranks."""
    n_p, n_a = len(t_present), len(t_absent)
    ranks = stats.rankdata(np.concatenate([t_present, t_absent]))
    u = ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0
    return float(u / (n_p * n_a))


def roc_curve(t_present: np.ndarray, t_absent: np.ndarray) -> RocResult:
    t_present = np.asarray(t_present, dtype=np.float64)
    t_absent = np.asarray(t_absent, dtype=np.float64)
    if len(t_present) == 0 or len(t_absent) == 0:
        raise ParameterDomainError("both test classes must be nonempty")
    thresholds = np.unique(np.concatenate([t_present, t_absent]))[::-1]
    sp, sa = np.sort(t_present), np.sort(t_absent)
    # fraction of each class with t >= threshold
    tpf = (len(sp) - np.searchsorted(sp, thresholds, side="left")) / len(sp)
    fpf = (len(sa) - np.searchsorted(sa, thresholds, side="left")) / len(sa)
    thresholds = np.concatenate([[np.inf], thresholds])
    tpf = np.concatenate([[0.0], tpf])
    fpf = np.concatenate([[0.0], fpf])
    return RocResult(thresholds, tpf, fpf, mann_whitney_auc(t_present, t_absent), t_present, t_absent)


def ho_roc(template: np.ndarray, test_present: np.ndarray, test_absent: np.ndarray) -> RocResult:
    w = np.asarray(template, dtype=np.float64).ravel()
    return roc_curve(_flat(test_present) @ w, _flat(test_absent) @ w)


def ho_study(
    train_backgrounds: np.ndarray,
    test_backgrounds: np.ndarray,
    sp: SignalParams,
    regularization: float = 1e-3,
) -> RocResult:
    """Template from paired present/absent training patches; ROC on disjoint test halves."""
    train = make_ske_dataset(train_backgrounds, sp)
    w = ho_template(train.present, train.absent, regularization)
    test = make_ske_dataset(test_backgrounds, sp)
    half = len(test_backgrounds) // 2
    return ho_roc(w, test.present[:half], test.absent[half:])

"""Distribution-level image metrics: Frechet distance, radial power spectrum, SSIM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from ..errors import ParameterDomainError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_DATA_RANGE = 2.0
PDF_BINS = 200


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def feature_stats(features: np.ndarray, shrinkage: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance; Ledoit-Wolf shrinkage when samples < dim + 1 (or when forced)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    n, d = f.shape
    if n < 2:
        raise ParameterDomainError("need at least two feature vectors")
    mu = f.mean(axis=0)
    if shrinkage == "always" or (shrinkage == "auto" and n < d + 1):
        from sklearn.covariance import ledoit_wolf

        cov = ledoit_wolf(f)[0] * n / (n - 1)
    else:
        cov = np.atleast_2d(np.cov(f, rowvar=False))
    return mu, cov


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of the matrix square root is taken from the eigenvalues of the
    symmetric PSD product sqrt(S_a) S_b sqrt(S_a), which share the spectrum of S_a S_b.
    """
    root_a = _psd_sqrt(cov_a)
    mid = root_a @ cov_b @ root_a
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((mid + mid.T) / 2), 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def fid(features_a: np.ndarray, features_b: np.ndarray, shrinkage: str = "auto") -> float:
    fa, fb = np.asarray(features_a), np.asarray(features_b)
    da = fa.shape[1] if fa.ndim == 2 else 1
    db = fb.shape[1] if fb.ndim == 2 else 1
    if da != db:
        raise ParameterDomainError(f"feature dimension mismatch: {da} vs {db}")
    mu_a, cov_a = feature_stats(fa, shrinkage)
    mu_b, cov_b = feature_stats(fb, shrinkage)
    # average both orderings so the result is exactly symmetric
    return 0.5 * (frechet_distance(mu_a, cov_a, mu_b, cov_b) + frechet_distance(mu_b, cov_b, mu_a, cov_a))


@dataclass
class RadialSpectrum:
    radii: np.ndarray  # integer radii 1..max
    power: np.ndarray  # ensemble-mean power per annulus
    counts: np.ndarray  # spectral samples per annulus
    dc: float  # ensemble-mean DC power
    shape: tuple[int, int]

    @property
    def nyquist_mask(self) -> np.ndarray:
        return self.radii <= min(self.shape) // 2

    def to_dict(self) -> dict:
        return {
            "radii": self.radii.tolist(),
            "power": self.power.tolist(),
            "counts": self.counts.tolist(),
            "dc": self.dc,
            "shape": list(self.shape),
        }


def _radius_bins(h: int, w: int) -> np.ndarray:
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    return np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)


def power_spectra(images: np.ndarray) -> np.ndarray:
    """Per-image |DFT|^2 with the unnormalized forward transform."""
    f = np.fft.fft2(np.asarray(images, dtype=np.float64), axes=(-2, -1))
    return f.real**2 + f.imag**2


def radial_power_spectrum(image_set: np.ndarray) -> RadialSpectrum:
    imgs = np.asarray(image_set, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    h, w = imgs.shape[1:]
    bins = _radius_bins(h, w).ravel()
    mean_power = power_spectra(imgs).mean(axis=0).ravel()
    counts = np.bincount(bins)
    sums = np.bincount(bins, weights=mean_power)
    dc = float(sums[0])
    return RadialSpectrum(np.arange(1, len(counts)), sums[1:] / counts[1:], counts[1:], dc, (h, w))


def log_spectrum_distance(a: RadialSpectrum, b: RadialSpectrum) -> float:
    """L2 distance between log10 radial spectra over full annuli (radius <= Nyquist)."""
    m = a.nyquist_mask & b.nyquist_mask
    tiny = np.finfo(float).tiny
    return float(np.linalg.norm(np.log10(a.power[m] + tiny) - np.log10(b.power[m] + tiny)))


def high_frequency_power(s: RadialSpectrum, quantile: float = 0.75) -> float:
    """Mean power over the top-quartile radial bins (up to Nyquist)."""
    radii = s.radii[s.nyquist_mask]
    power = s.power[s.nyquist_mask]
    return float(power[radii > np.quantile(radii, quantile)].mean())


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over the last two axes, keeping only full windows."""
    g = _gaussian_window()
    out = ndimage.correlate1d(x, g, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, g, axis=-2, mode="constant")
    r = SSIM_WINDOW // 2
    return out[..., r:-r, r:-r]


def ssim_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM of corresponding images in two (N, H, W) stacks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterDomainError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ParameterDomainError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (SSIM_K1 * SSIM_DATA_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DATA_RANGE) ** 2
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a * mu_a
    var_b = _filter_valid(b * b) - mu_b * mu_b
    cov = _filter_valid(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=(-2, -1))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_batch(np.asarray(a)[None], np.asarray(b)[None])[0])


@dataclass
class SsimPairs:
    values: np.ndarray
    hist: np.ndarray  # density over PDF_BINS equal bins on [-1, 1]
    edges: np.ndarray
    kde_x: np.ndarray
    kde_y: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std())

    def ks(self, other: "SsimPairs") -> float:
        return ks_statistic(self.values, other.values)

    def to_dict(self) -> dict:
        return {
            "n_pairs": int(len(self.values)),
            "mean": self.mean,
            "std": self.std,
            "hist": self.hist.tolist(),
            "edges": self.edges.tolist(),
        }


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    return float(stats.ks_2samp(a, b).statistic)


def ssim_pair_pdf(set_a: np.ndarray, set_b: np.ndarray, n_pairs: int, seed: int = 0, batch: int = 256) -> SsimPairs:
    """SSIM of random (a, b) pairs; when both sets are the same set an image is never paired with itself."""
    set_a, set_b = np.asarray(set_a), np.asarray(set_b)
    if len(set_a) == 0 or len(set_b) == 0:
        raise ParameterDomainError("SSIM pair sets must be nonempty")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, len(set_a), n_pairs)
    same = set_a is set_b or (set_a.shape == set_b.shape and np.array_equal(set_a, set_b))
    if same and len(set_a) > 1:
        # draw from the other len-1 images, skipping the first index
        ib = rng.integers(0, len(set_a) - 1, n_pairs)
        ib = ib + (ib >= ia)
    else:
        ib = rng.integers(0, len(set_b), n_pairs)
    values = np.concatenate(
        [ssim_batch(set_a[ia[s : s + batch]], set_b[ib[s : s + batch]]) for s in range(0, n_pairs, batch)]
    )
    hist, edges = np.histogram(values, bins=PDF_BINS, range=(-1.0, 1.0), density=True)
    kde_x = np.linspace(-1.0, 1.0, 401)
    if np.ptp(values) > 0:
        kde_y = stats.gaussian_kde(values)(kde_x)
    else:
        kde_y = np.zeros_like(kde_x)
    return SsimPairs(values, hist, edges, kde_x, kde_y)

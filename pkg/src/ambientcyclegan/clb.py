"""Clustered lumpy background (CLB) phantoms.

A realization is a Poisson number of cluster centres spread uniformly over the
image domain padded by ``3 * cluster_spread``; each cluster holds a Poisson
number of lumps with isotropic Gaussian offsets and uniform orientations.
Every lump has the exponential-power elliptical profile

    A * exp(-alpha * r**beta / L(phi))

where ``L(phi)`` is the radius of the ellipse with semi-axes ``(L_x, L_y)`` in
the lump's own frame. Coordinates are ``(x, y) = (column, row)`` with pixel
centres on integer positions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterDomainError

FORMAT_VERSION = 1
# lumps are evaluated only where their value exceeds this fraction of |A|
TRUNCATION_LEVEL = 1e-4
CALIBRATION_SIZE = 256
CALIBRATION_SEED = 7_340_033

PRESETS = {
    "simpiso": dict(
        mean_clusters=150.0,
        mean_lumps_per_cluster=20.0,
        cluster_spread=12.0,
        lump_amplitude=1.0,
        lump_shape=2.1,
        lump_exponent=0.5,
        lump_lengths=(5.0, 2.0),
    ),
    "opex": dict(
        mean_clusters=150.0,
        mean_lumps_per_cluster=20.0,
        cluster_spread=8.0,
        lump_amplitude=1.0,
        lump_shape=2.1,
        lump_exponent=0.5,
        lump_lengths=(7.0, 3.0),
    ),
}


@dataclass(frozen=True)
class ClbParams:
    mean_clusters: float
    mean_lumps_per_cluster: float
    cluster_spread: float
    lump_amplitude: float
    lump_shape: float
    lump_exponent: float
    lump_lengths: tuple[float, float]
    image_size: tuple[int, int] = (256, 256)
    preset_name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "lump_lengths", tuple(float(v) for v in self.lump_lengths))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        positive = {
            "mean_clusters": self.mean_clusters,
            "mean_lumps_per_cluster": self.mean_lumps_per_cluster,
            "cluster_spread": self.cluster_spread,
            "lump_shape": self.lump_shape,
            "lump_exponent": self.lump_exponent,
            "lump_lengths[0]": self.lump_lengths[0],
            "lump_lengths[1]": self.lump_lengths[1],
        }
        for name, value in positive.items():
            if not (math.isfinite(value) and value > 0):
                raise ParameterDomainError(f"{name} must be a positive finite number, got {value!r}")
        if not math.isfinite(self.lump_amplitude):
            raise ParameterDomainError("lump_amplitude must be finite")
        if len(self.lump_lengths) != 2 or len(self.image_size) != 2:
            raise ParameterDomainError("lump_lengths and image_size must have two entries")
        if min(self.image_size) < 16:
            raise ParameterDomainError(f"image_size must be at least 16x16, got {self.image_size}")

    @classmethod
    def preset(cls, name: str, image_size: Sequence[int] = (256, 256), **overrides) -> "ClbParams":
        try:
            values = dict(PRESETS[name])
        except KeyError:
            raise ParameterDomainError(f"unknown CLB preset {name!r}; known: {sorted(PRESETS)}") from None
        values.update(overrides)
        return cls(**values, image_size=tuple(image_size), preset_name=name)

    @property
    def margin(self) -> float:
        return 3.0 * self.cluster_spread

    @property
    def truncation_radius(self) -> float:
        """Distance beyond which every lump is below ``TRUNCATION_LEVEL * |A|``."""
        ell_max = max(self.lump_lengths)
        return (ell_max * math.log(1.0 / TRUNCATION_LEVEL) / self.lump_shape) ** (1.0 / self.lump_exponent)

    def scaled_to(self, image_size: Sequence[int]) -> "ClbParams":
        """Same texture at a new image size, keeping cluster density per padded area."""
        h0, w0 = self.image_size
        h1, w1 = (int(v) for v in image_size)
        m = 2 * self.margin
        ratio = ((h1 + m) * (w1 + m)) / ((h0 + m) * (w0 + m))
        return replace(self, image_size=(h1, w1), mean_clusters=self.mean_clusters * ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lump_lengths"] = list(self.lump_lengths)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClbParams":
        return cls(**d)


@dataclass(frozen=True)
class Lump:
    offset: tuple[float, float]
    orientation: float


@dataclass(frozen=True)
class Cluster:
    center: tuple[float, float]
    lumps: tuple[Lump, ...]


@dataclass(frozen=True)
class ClbRealization:
    params: ClbParams
    clusters: tuple[Cluster, ...]
    seed: int

    @property
    def n_lumps(self) -> int:
        return sum(len(c.lumps) for c in self.clusters)

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "params": self.params.to_dict(),
            "seed": self.seed,
            "clusters": [
                {
                    "center": list(c.center),
                    "lumps": [{"offset": list(l.offset), "orientation": l.orientation} for l in c.lumps],
                }
                for c in self.clusters
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ClbRealization":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ParameterDomainError(f"unsupported realization format version {doc.get('format_version')!r}")
        clusters = tuple(
            Cluster(
                center=tuple(c["center"]),
                lumps=tuple(Lump(tuple(l["offset"]), l["orientation"]) for l in c["lumps"]),
            )
            for c in doc["clusters"]
        )
        return cls(ClbParams.from_dict(doc["params"]), clusters, int(doc["seed"]))


@dataclass(frozen=True)
class Normalization:
    """Affine map ``clip(raw * scale + offset, -1, 1)``."""

    scale: float = 1.0
    offset: float = 0.0

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "Normalization":
        if not hi > lo:
            return cls(1.0, -float(lo))
        scale = 2.0 / (hi - lo)
        return cls(float(scale), float(-1.0 - lo * scale))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return np.clip(raw * self.scale + self.offset, -1.0, 1.0)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "offset": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(float(d["scale"]), float(d["offset"]))


@dataclass
class ObjectImage:
    pixels: np.ndarray
    domain_tag: str = "X"
    normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        if self.domain_tag not in ("X", "Y_clean"):
            raise ParameterDomainError(f"bad object domain tag {self.domain_tag!r}")
        if self.pixels.ndim != 2 or not np.all(np.isfinite(self.pixels)):
            raise ParameterDomainError("object pixels must be a finite 2-D array")


def _check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ParameterDomainError(f"seed must be a nonnegative integer, got {seed!r}")
    return int(seed)


def _sample_lumps(rng: np.random.Generator, n: int, spread: float) -> tuple[Lump, ...]:
    offsets = rng.normal(0.0, spread, size=(n, 2))
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return tuple(Lump((float(o[0]), float(o[1])), float(a)) for o, a in zip(offsets, angles))


def sample_clb(params: ClbParams, seed: int) -> ClbRealization:
    seed = _check_seed(seed)
    rng = np.random.default_rng(seed)
    h, w = params.image_size
    m = params.margin
    k = int(rng.poisson(params.mean_clusters))
    centers = rng.uniform(low=(-m, -m), high=(w - 1 + m, h - 1 + m), size=(k, 2))
    clusters = []
    for c in centers:
        n = int(rng.poisson(params.mean_lumps_per_cluster))
        clusters.append(Cluster((float(c[0]), float(c[1])), _sample_lumps(rng, n, params.cluster_spread)))
    return ClbRealization(params, tuple(clusters), seed)


def _in_padded_bounds(params: ClbParams, center: Sequence[float]) -> bool:
    h, w = params.image_size
    m = params.margin
    x, y = center
    return -m <= x <= w - 1 + m and -m <= y <= h - 1 + m


def add_cluster(r: ClbRealization, center: Sequence[float], n_lumps: int, seed: int) -> ClbRealization:
    if len(center) != 2 or not all(math.isfinite(v) for v in center):
        raise ParameterDomainError(f"center must be a finite 2-vector, got {center!r}")
    if not _in_padded_bounds(r.params, center):
        raise ParameterDomainError(f"center {tuple(center)} lies outside the padded image domain")
    if int(n_lumps) < 1:
        raise ParameterDomainError(f"n_lumps must be at least 1, got {n_lumps}")
    rng = np.random.default_rng(_check_seed(seed))
    new = Cluster((float(center[0]), float(center[1])), _sample_lumps(rng, int(n_lumps), r.params.cluster_spread))
    return replace(r, clusters=r.clusters + (new,))


def move_cluster(r: ClbRealization, cluster_index: int, new_center: Sequence[float]) -> ClbRealization:
    if not 0 <= cluster_index < len(r.clusters):
        raise IndexError(f"cluster index {cluster_index} out of range for {len(r.clusters)} clusters")
    if len(new_center) != 2 or not _in_padded_bounds(r.params, new_center):
        raise ParameterDomainError(f"new center {tuple(new_center)} lies outside the padded image domain")
    clusters = list(r.clusters)
    old = clusters[cluster_index]
    clusters[cluster_index] = Cluster((float(new_center[0]), float(new_center[1])), old.lumps)
    return replace(r, clusters=tuple(clusters))


def cluster_support_radius(params: ClbParams, cluster: Cluster) -> float:
    """Radius around the cluster centre outside which its lumps render to exactly zero."""
    spread = max((math.hypot(*l.offset) for l in cluster.lumps), default=0.0)
    return max(params.margin, spread) + params.truncation_radius


def _lump_table(clusters: Iterable[Cluster]) -> np.ndarray:
    rows = [
        (c.center[0] + l.offset[0], c.center[1] + l.offset[1], l.orientation)
        for c in clusters
        for l in c.lumps
    ]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _lump_values(params: ClbParams, dx: np.ndarray, dy: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Truncated lump profile at displacements (dx, dy) from lumps oriented by ``theta``.

    With (u, v) the displacement in the lump frame, ``r**beta / L(phi)`` equals
    ``r**(beta - 1) * sqrt((u/L_x)**2 + (v/L_y)**2)``.
    """
    lx, ly = params.lump_lengths
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = dy * c - dx * s
    r2 = u * u + v * v
    ellipse = np.sqrt((u / lx) ** 2 + (v / ly) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        if params.lump_exponent == 0.5:
            expo = params.lump_shape * ellipse / np.sqrt(np.sqrt(r2))
        else:
            expo = params.lump_shape * ellipse * r2 ** ((params.lump_exponent - 1.0) / 2.0)
    expo = np.where(r2 > 0, expo, 0.0)
    return np.where(expo <= math.log(1.0 / TRUNCATION_LEVEL), np.exp(-expo), 0.0)


def render_clusters(params: ClbParams, clusters: Iterable[Cluster]) -> np.ndarray:
    """Unnormalized float64 lump field for the given clusters."""
    h, w = params.image_size
    reach = params.truncation_radius
    table = _lump_table(clusters)
    out = np.zeros((h, w), dtype=np.float64)
    px, py = table[:, 0], table[:, 1]
    visible = (px + reach >= 0) & (px - reach <= w - 1) & (py + reach >= 0) & (py - reach <= h - 1)
    table = table[visible]
    if 2 * reach < min(h, w):
        # compact lumps: evaluate each inside its own bounding window
        for px, py, theta in table:
            x0, x1 = max(0, math.ceil(px - reach)), min(w, math.floor(px + reach) + 1)
            y0, y1 = max(0, math.ceil(py - reach)), min(h, math.floor(py + reach) + 1)
            dx = np.arange(x0, x1, dtype=np.float64)[None, :] - px
            dy = np.arange(y0, y1, dtype=np.float64)[:, None] - py
            out[y0:y1, x0:x1] += _lump_values(params, dx, dy, theta)
    else:
        xs = np.arange(w, dtype=np.float64)[None, None, :]
        ys = np.arange(h, dtype=np.float64)[None, :, None]
        chunk = max(1, (1 << 21) // (h * w))
        for s in range(0, len(table), chunk):
            px, py, theta = (table[s : s + chunk, i][:, None, None] for i in range(3))
            out += _lump_values(params, xs - px, ys - py, theta).sum(axis=0)
    return params.lump_amplitude * out


def render(r: ClbRealization) -> np.ndarray:
    return render_clusters(r.params, r.clusters)


@lru_cache(maxsize=32)
def calibrate_normalization(params: ClbParams, n: int = CALIBRATION_SIZE, seed: int = CALIBRATION_SEED) -> Normalization:
    """Global min/max map over a fixed calibration batch drawn from ``params``."""
    lo, hi = math.inf, -math.inf
    for i in range(n):
        raw = render(sample_clb(params, seed + i))
        lo, hi = min(lo, float(raw.min())), max(hi, float(raw.max()))
    return Normalization.from_range(lo, hi)


def rasterize(r: ClbRealization, normalization: Normalization | None = None) -> ObjectImage:
    if normalization is None:
        normalization = calibrate_normalization(r.params)
    pixels = normalization.apply(render(r)).astype(np.float32)
    return ObjectImage(pixels, "X", normalization)

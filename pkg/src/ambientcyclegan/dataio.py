"""Image container, dataset manifests, corpus synthesis/ingestion and batching.

Images are stored one per file: a 16-byte little-endian header
``(magic, version, H, W)`` followed by row-major float32 pixels. A corpus is a
directory holding ``images/`` and ``manifest.json``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .clb import ClbParams, Normalization, calibrate_normalization, render, sample_clb
from .errors import DataError, ParameterDomainError
from .measurement import MeasurementConfig, apply_measurement

log = logging.getLogger(__name__)

MAGIC = b"ACGF"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sIII")
MANIFEST_VERSION = 1
NOISE_STREAM = 0x6E6F6973
MAX_UNDECODABLE_FRACTION = 0.10


def write_array(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ParameterDomainError(f"container holds 2-D arrays, got shape {arr.shape}")
    h, w = arr.shape
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, h, w))
        fh.write(data.tobytes())


def read_array(path: str | os.PathLike) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not an image container (bad magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    if len(raw) != _HEADER.size + 4 * h * w:
        raise DataError(f"{path}: size does not match {h}x{w} header")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def save_image(path: str | os.PathLike, pixels: np.ndarray, meta: dict | None = None) -> None:
    """Container file plus a ``.json`` sidecar carrying normalization metadata."""
    path = Path(path)
    write_array(path, pixels)
    path.with_suffix(".json").write_text(json.dumps(meta or {}, indent=2))


@dataclass
class DatasetManifest:
    name: str
    domain_tag: str
    entries: list[dict]
    image_size: tuple[int, int]
    normalization: dict
    count: int
    skipped: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.domain_tag not in ("X", "Y"):
            raise DataError(f"manifest domain tag must be X or Y, got {self.domain_tag!r}")
        if self.count != len(self.entries):
            raise DataError(f"manifest count {self.count} != {len(self.entries)} entries")

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i]["path"]

    def norm(self) -> Normalization:
        return Normalization.from_dict(self.normalization)

    def load_array(self) -> np.ndarray:
        """All images stacked as (count, H, W) float32."""
        out = np.empty((self.count, *self.image_size), dtype=np.float32)
        for i in range(self.count):
            img = read_array(self.image_path(i))
            if img.shape != self.image_size:
                raise DataError(f"{self.image_path(i)} has shape {img.shape}, manifest says {self.image_size}")
            out[i] = img
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "name": self.name,
            "domain_tag": self.domain_tag,
            "image_size": list(self.image_size),
            "normalization": self.normalization,
            "count": self.count,
            "entries": self.entries,
            "skipped": self.skipped,
            "provenance": self.provenance,
        }

    def save(self, root: str | os.PathLike) -> Path:
        self.root = Path(root)
        self.path.write_text(json.dumps(self.to_dict(), indent=1))
        return self.path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load manifest {path}: {exc}") from exc
        if doc.get("format_version") != MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
        doc.pop("format_version")
        return cls(**doc, root=path.parent)


class _CorpusWriter:
    """Writes into ``<out>.partial`` and renames on success; removes it on failure."""

    def __init__(self, out_dir, overwrite: bool):
        self.out = Path(out_dir)
        if self.out.exists() and not overwrite:
            raise DataError(f"{self.out} already exists (use force/overwrite to replace it)")
        self.tmp = self.out.with_name(self.out.name + ".partial")

    def __enter__(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
        (self.tmp / "images").mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        self.tmp.rename(self.out)
        return False


def noise_seed(seed: int) -> int:
    """Noise seed for an image, decoupled from the phantom seed it shares an index with."""
    return int(np.random.SeedSequence([int(seed), NOISE_STREAM]).generate_state(1)[0])


def synthesize_corpus(
    params: ClbParams,
    n: int,
    base_seed: int,
    out_dir: str | os.PathLike,
    measurement: MeasurementConfig | None = None,
    name: str | None = None,
    normalization: Normalization | None = None,
    overwrite: bool = False,
    domain_tag: str | None = None,
) -> DatasetManifest:
    """Render ``n`` phantoms with seeds ``base_seed + i``; measured (domain Y) when ``measurement`` is given."""
    if n < 1:
        raise ParameterDomainError(f"corpus size must be >= 1, got {n}")
    norm = normalization or calibrate_normalization(params)
    domain = domain_tag or ("X" if measurement is None else "Y")
    entries = []
    with _CorpusWriter(out_dir, overwrite) as tmp:
        for i in range(n):
            seed = base_seed + i
            pixels = norm.apply(render(sample_clb(params, seed))).astype(np.float32)
            if measurement is not None:
                pixels = apply_measurement(pixels, measurement, noise_seed(seed)).pixels
            rel = f"images/{i:06d}.f32"
            write_array(tmp / rel, pixels)
            entries.append({"path": rel, "seed": seed})
        manifest = DatasetManifest(
            name=name or Path(out_dir).name,
            domain_tag=domain,
            entries=entries,
            image_size=params.image_size,
            normalization={"policy": "calibrated_minmax", **norm.to_dict()},
            count=n,
            provenance={
                "source": "clb",
                "clb_params": params.to_dict(),
                "base_seed": base_seed,
                "measurement": measurement.to_dict() if measurement else None,
            },
        )
        manifest.save(tmp)
    manifest.root = Path(out_dir)
    return manifest


def write_corpus(
    images: np.ndarray,
    out_dir: str | os.PathLike,
    domain_tag: str,
    normalization: dict,
    provenance: dict,
    name: str | None = None,
    overwrite: bool = False,
) -> DatasetManifest:
    """Store an in-memory (N, H, W) stack as a corpus directory."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or len(images) == 0:
        raise DataError(f"expected a nonempty (N, H, W) stack, got shape {images.shape}")
    entries = []
    with _CorpusWriter(out_dir, overwrite) as tmp:
        for i, img in enumerate(images):
            rel = f"images/{i:06d}.f32"
            write_array(tmp / rel, img)
            entries.append({"path": rel})
        manifest = DatasetManifest(
            name=name or Path(out_dir).name,
            domain_tag=domain_tag,
            entries=entries,
            image_size=images.shape[1:],
            normalization=normalization,
            count=len(images),
            provenance=provenance,
        )
        manifest.save(tmp)
    manifest.root = Path(out_dir)
    return manifest


def simulate_measurements(
    manifest: DatasetManifest,
    cfg: MeasurementConfig,
    out_dir: str | os.PathLike,
    base_seed: int = 0,
    overwrite: bool = False,
) -> DatasetManifest:
    """Pass every image of a clean corpus through the measurement operator."""
    entries = []
    with _CorpusWriter(out_dir, overwrite) as tmp:
        for i in range(manifest.count):
            img = read_array(manifest.image_path(i))
            seed = manifest.entries[i].get("seed", base_seed + i)
            out = apply_measurement(img, cfg, noise_seed(seed)).pixels
            rel = f"images/{i:06d}.f32"
            write_array(tmp / rel, out)
            entries.append({**manifest.entries[i], "path": rel})
        out_manifest = DatasetManifest(
            name=Path(out_dir).name,
            domain_tag="Y",
            entries=entries,
            image_size=manifest.image_size,
            normalization=manifest.normalization,
            count=manifest.count,
            provenance={**manifest.provenance, "measurement": cfg.to_dict(), "measured_from": str(manifest.root)},
        )
        out_manifest.save(tmp)
    out_manifest.root = Path(out_dir)
    return out_manifest


def _decode_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F", "L"):
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).mean(axis=2)
    if arr.ndim != 2:
        raise ValueError(f"unexpected decoded shape {arr.shape}")
    return arr


def _resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    from PIL import Image

    if arr.shape == size:
        return arr.astype(np.float32)
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(img.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float32)


def ingest_directory(
    directory: str | os.PathLike,
    target_size: Sequence[int],
    out_dir: str | os.PathLike,
    normalization: str = "percentile",
    overwrite: bool = False,
) -> DatasetManifest:
    """Resize, normalize and store every decodable grayscale image in ``directory``.

    ``normalization`` is ``percentile`` (0.5th-99.5th corpus percentiles to
    [-1, 1], clamped), ``minmax`` (corpus min/max) or ``none``.
    """
    directory = Path(directory)
    size = tuple(int(v) for v in target_size)
    if normalization not in ("percentile", "minmax", "none"):
        raise ParameterDomainError(f"unknown normalization policy {normalization!r}")
    files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith(".")) if directory.is_dir() else []
    if not files:
        raise DataError(f"no files found in {directory}")

    decoded, skipped = [], []
    for p in files:
        try:
            decoded.append((p, _resize(_decode_gray(p), size)))
        except Exception as exc:  # any decoder failure means "not an image we can use"
            log.warning("skipping %s: %s", p, exc)
            skipped.append(p.name)
    if len(skipped) > MAX_UNDECODABLE_FRACTION * len(files):
        raise DataError(
            f"{len(skipped)} of {len(files)} files in {directory} could not be decoded; wrong directory?"
        )

    pixels_per_image = size[0] * size[1]
    stride = max(1, math.ceil(pixels_per_image * len(decoded) / 4_000_000))
    sample = np.concatenate([a.ravel()[::stride] for _, a in decoded]).astype(np.float64)
    if normalization == "percentile":
        lo, hi = np.percentile(sample, [0.5, 99.5])
        norm = Normalization.from_range(float(lo), float(hi))
    elif normalization == "minmax":
        norm = Normalization.from_range(float(sample.min()), float(sample.max()))
    else:
        norm = Normalization(1.0, 0.0)

    entries = []
    with _CorpusWriter(out_dir, overwrite) as tmp:
        for i, (p, arr) in enumerate(decoded):
            rel = f"images/{i:06d}.f32"
            write_array(tmp / rel, norm.apply(arr.astype(np.float64)).astype(np.float32))
            entries.append({"path": rel, "source_id": p.name})
        manifest = DatasetManifest(
            name=Path(out_dir).name,
            domain_tag="Y",
            entries=entries,
            image_size=size,
            normalization={"policy": normalization, **norm.to_dict()},
            count=len(entries),
            skipped=skipped,
            provenance={"source": "ingest", "directory": str(directory), "n_files": len(files)},
        )
        manifest.save(tmp)
    manifest.root = Path(out_dir)
    return manifest


@dataclass
class BatchStream:
    """Unpaired shuffled batches; order depends only on (shuffle_seed, stream_key, epoch)."""

    manifest: DatasetManifest
    batch_size: int
    shuffle_seed: int
    epoch: int = 0
    stream_key: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.batch_size > self.manifest.count:
            raise ParameterDomainError(
                f"batch_size must be in [1, {self.manifest.count}], got {self.batch_size}"
            )

    @property
    def batches_per_epoch(self) -> int:
        return self.manifest.count // self.batch_size

    def permutation(self, epoch: int | None = None) -> np.ndarray:
        epoch = self.epoch if epoch is None else epoch
        rng = np.random.default_rng([self.shuffle_seed, self.stream_key, epoch])
        return rng.permutation(self.manifest.count)

    def batch_indices(self, epoch: int, index: int) -> np.ndarray:
        b = self.batch_size
        return self.permutation(epoch)[index * b : (index + 1) * b]


def stream_batches(b: BatchStream, data: np.ndarray | None = None) -> Iterator[np.ndarray]:
    """Yield the (batch, H, W) arrays of epoch ``b.epoch``; the final short batch is dropped."""
    if data is None:
        data = b.manifest.load_array()
    perm = b.permutation()
    for i in range(b.batches_per_epoch):
        yield data[perm[i * b.batch_size : (i + 1) * b.batch_size]]

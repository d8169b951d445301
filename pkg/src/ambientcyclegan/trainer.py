"""Training orchestration: seeding, batching, checkpoints and the run log.

Run directory layout::

    config.json       archived TrainConfig
    runlog.jsonl      one JSON object per step (plus start/resume events)
    checkpoints/      step_XXXXXXXX/ directories and a ``latest`` pointer
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, dump_config, parse_config
from .dataio import BatchStream, DatasetManifest, read_array, write_array
from .errors import CheckpointError, DataError
from .gan.losses import ModelBundle
from .gan.step import OptimizerState, build_bundle, make_optimizers, train_step
from .measurement import MeasurementOperator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@contextmanager
def run_lock(run_dir: Path):
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{run_dir} is locked by another trainer (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _save_tensor(root: Path, name: str, t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    if arr.dtype != np.float32:
        raise CheckpointError(f"tensor {name} has dtype {arr.dtype}; checkpoints store float32")
    path = root / f"{name}.f32"
    write_array(path, arr.reshape(1, -1) if arr.ndim != 2 else arr)
    return {"file": path.name, "shape": list(arr.shape), "sha256": _sha256(path)}


def _load_tensor(root: Path, rec: dict) -> torch.Tensor:
    path = root / rec["file"]
    if not path.exists():
        raise CheckpointError(f"checkpoint file missing: {path}")
    if _sha256(path) != rec["sha256"]:
        raise CheckpointError(f"checkpoint file corrupt (checksum mismatch): {path}")
    try:
        arr = read_array(path)
    except DataError as exc:
        raise CheckpointError(str(exc)) from exc
    return torch.from_numpy(arr.reshape(rec["shape"]).copy())


def save_checkpoint(
    ckpt_dir: Path,
    cfg: TrainConfig,
    bundle: ModelBundle,
    opt: OptimizerState | None,
    step: int,
    noise_gen: torch.Generator,
    extra: dict | None = None,
) -> Path:
    tmp = ckpt_dir.with_name(ckpt_dir.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    (tmp / "tensors").mkdir(parents=True)
    tensors = {f"model.{k}": _save_tensor(tmp / "tensors", f"model.{k}", v) for k, v in bundle.state_dict().items()}
    optim = {}
    if opt is not None:
        for which, o in opt.items():
            sd = o.state_dict()
            state = {}
            for idx, entries in sd["state"].items():
                state[str(idx)] = {
                    key: _save_tensor(tmp / "tensors", f"opt.{which}.{idx}.{key}", val.to(torch.float32))
                    for key, val in entries.items()
                }
            optim[which] = {"state": state, "param_groups": sd["param_groups"]}
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "config": json.loads(dump_config(cfg)),
        "generator_spec": cfg.generator_spec().to_dict(),
        "discriminator_spec": cfg.discriminator_spec().to_dict(),
        "loss": {
            "loss_family": bundle.loss_family,
            "lambda_cyc": bundle.lambda_cyc,
            "cycle_norm": bundle.cycle_norm,
            "lambda_identity": bundle.lambda_identity,
            "variant": cfg.model.variant,
        },
        "tensors": tensors,
        "optimizers": optim,
        "optimizer_counters": {
            "consecutive_failures": opt.consecutive_failures if opt else 0,
            "skipped_steps": opt.skipped_steps if opt else 0,
        },
        "rng": {"noise": base64.b64encode(noise_gen.get_state().numpy().tobytes()).decode()},
        "extra": extra or {},
    }
    (tmp / "checkpoint.json").write_text(json.dumps(doc, indent=1))
    if ckpt_dir.exists():
        shutil.rmtree(ckpt_dir)
    tmp.rename(ckpt_dir)
    (ckpt_dir.parent / "latest").write_text(ckpt_dir.name)
    return ckpt_dir


@dataclass
class Checkpoint:
    path: Path
    step: int
    config: TrainConfig
    bundle: ModelBundle
    doc: dict

    def restore_optimizers(self) -> OptimizerState:
        opt = make_optimizers(self.bundle, self.config.train.learning_rate)
        root = self.path / "tensors"
        for which, o in opt.items():
            rec = self.doc["optimizers"].get(which)
            if rec is None:
                raise CheckpointError(f"{self.path}: optimizer state {which!r} missing")
            state = {
                int(idx): {key: _load_tensor(root, t) for key, t in entries.items()}
                for idx, entries in rec["state"].items()
            }
            groups = rec["param_groups"]
            for g in groups:
                g["betas"] = tuple(g["betas"])
            o.load_state_dict({"state": state, "param_groups": groups})
        counters = self.doc.get("optimizer_counters", {})
        opt.consecutive_failures = counters.get("consecutive_failures", 0)
        opt.skipped_steps = counters.get("skipped_steps", 0)
        return opt

    def noise_generator(self) -> torch.Generator:
        gen = torch.Generator()
        raw = base64.b64decode(self.doc["rng"]["noise"])
        gen.set_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8))
        return gen

    @property
    def extra(self) -> dict:
        return self.doc.get("extra", {})


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Load a checkpoint directory, a run directory (latest checkpoint) or its ``checkpoints/``."""
    path = Path(path)
    if (path / "checkpoints").is_dir():
        path = path / "checkpoints"
    if (path / "latest").is_file():
        path = path / (path / "latest").read_text().strip()
    meta = path / "checkpoint.json"
    if not meta.is_file():
        raise CheckpointError(f"no checkpoint found at {path}")
    try:
        doc = json.loads(meta.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{meta} is corrupt: {exc}") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{meta}: checkpoint version {doc.get('format_version')!r} != {CHECKPOINT_VERSION}")
    cfg = parse_config(doc["config"], TrainConfig)
    loss = doc["loss"]
    bundle = build_bundle(
        cfg.generator_spec(),
        cfg.discriminator_spec(),
        seed=cfg.seeds.model_init,
        loss_family=loss["loss_family"],
        lambda_cyc=loss["lambda_cyc"],
        cycle_norm=loss["cycle_norm"],
        lambda_identity=loss["lambda_identity"],
    )
    expected = set(bundle.state_dict())
    stored = {k.removeprefix("model."): v for k, v in doc["tensors"].items()}
    if set(stored) != expected:
        raise CheckpointError(f"{path}: parameter set does not match the configured architecture")
    state = {k: _load_tensor(path / "tensors", rec) for k, rec in stored.items()}
    bundle.load_state_dict(state)
    return Checkpoint(path, int(doc["step"]), cfg, bundle, doc)


class RunLog:
    """Append-only JSONL log; step indices are kept strictly increasing."""

    def __init__(self, path: Path):
        self.path = path

    def truncate_from(self, step: int) -> None:
        if not self.path.exists():
            return
        kept = [l for l in self.path.read_text().splitlines() if l and json.loads(l).get("step", -1) < step]
        self.path.write_text("".join(l + "\n" for l in kept))

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def steps(self) -> list[dict]:
        if not self.path.exists():
            return []
        records = [json.loads(l) for l in self.path.read_text().splitlines() if l]
        return [r for r in records if "step" in r]


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    bundle: ModelBundle
    runlog: RunLog
    step: int


class Trainer:
    def __init__(self, cfg: TrainConfig, x_manifest: DatasetManifest, y_manifest: DatasetManifest, run_dir: Path):
        if x_manifest.domain_tag != "X" or y_manifest.domain_tag != "Y":
            raise DataError("training needs an X-domain manifest and a Y-domain manifest")
        for m in (x_manifest, y_manifest):
            if tuple(m.image_size) != tuple(cfg.image_size):
                raise DataError(f"manifest {m.name} has size {m.image_size}, config says {cfg.image_size}")
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.x_manifest, self.y_manifest = x_manifest, y_manifest
        self.x_data = torch.from_numpy(x_manifest.load_array())[:, None]
        self.y_data = torch.from_numpy(y_manifest.load_array())[:, None]
        bs, shuffle = cfg.train.batch_size, cfg.seeds.data_shuffle
        self.x_stream = BatchStream(x_manifest, bs, shuffle, stream_key=0)
        self.y_stream = BatchStream(y_manifest, bs, shuffle, stream_key=1)
        self._perm_cache: dict = {}
        self.runlog = RunLog(self.run_dir / "runlog.jsonl")
        self.ckpt_root = self.run_dir / "checkpoints"

    def fresh(self):
        cfg = self.cfg
        self.bundle = build_bundle(
            cfg.generator_spec(),
            cfg.discriminator_spec(),
            seed=cfg.seeds.model_init,
            loss_family=cfg.model.loss_family,
            lambda_cyc=cfg.model.lambda_cyc,
            cycle_norm=cfg.model.cycle_norm,
            lambda_identity=cfg.model.lambda_identity,
        )
        self.opt = make_optimizers(self.bundle, cfg.train.learning_rate)
        self.noise_gen = torch.Generator().manual_seed(cfg.seeds.noise)
        self.step = 0

    def restore(self, ckpt: Checkpoint):
        self.bundle = ckpt.bundle
        self.opt = ckpt.restore_optimizers()
        self.noise_gen = ckpt.noise_generator()
        self.step = ckpt.step

    @property
    def measure(self):
        if self.cfg.model.variant == "cyclegan":
            return None
        return MeasurementOperator(self.cfg.measurement.build(), seed=self.cfg.seeds.noise, generator=self.noise_gen)

    def _batch(self, stream: BatchStream, data: torch.Tensor, step: int) -> torch.Tensor:
        epoch, index = divmod(step, stream.batches_per_epoch)
        key = (stream.stream_key, epoch)
        if key not in self._perm_cache:
            self._perm_cache = {k: v for k, v in self._perm_cache.items() if k[0] != stream.stream_key}
            self._perm_cache[key] = stream.permutation(epoch)
        b = stream.batch_size
        return data[self._perm_cache[key][index * b : (index + 1) * b]]

    def _extra(self) -> dict:
        return {
            "x_normalization": self.x_manifest.normalization,
            "x_provenance": self.x_manifest.provenance,
            "y_normalization": self.y_manifest.normalization,
        }

    def checkpoint(self) -> Path:
        return save_checkpoint(
            self.ckpt_root / f"step_{self.step:08d}", self.cfg, self.bundle, self.opt, self.step, self.noise_gen, self._extra()
        )

    def run(self, stop_at: int | None = None) -> TrainResult:
        total = self.cfg.train.total_steps if stop_at is None else min(stop_at, self.cfg.train.total_steps)
        every = self.cfg.train.checkpoint_every
        measure = self.measure
        last = None
        self.bundle.train()
        while self.step < total:
            x = self._batch(self.x_stream, self.x_data, self.step)
            y = self._batch(self.y_stream, self.y_data, self.step)
            t0 = time.perf_counter()
            logs = train_step(self.bundle, x, y, measure, self.opt)
            record = {"step": self.step, **logs, "wall_time": time.perf_counter() - t0}
            self.runlog.append(record)
            self.step += 1
            if self.step % every == 0 or self.step == total:
                last = self.checkpoint()
        if last is None:
            last = self.checkpoint()
        return TrainResult(self.run_dir, last, self.bundle, self.runlog, self.step)


def _provenance(cfg: TrainConfig) -> dict:
    return {"seeds": cfg.seeds.model_dump(), "torch": torch.__version__, "numpy": np.__version__}


def train(
    cfg: TrainConfig,
    x_manifest: DatasetManifest,
    y_manifest: DatasetManifest,
    run_dir: str | os.PathLike,
    stop_at: int | None = None,
    overwrite: bool = False,
) -> TrainResult:
    """Train from scratch in ``run_dir``; ``stop_at`` ends early (for later resumption)."""
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not overwrite:
            raise DataError(f"{run_dir} is not empty (use force/overwrite to replace it)")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(dump_config(cfg))
    (run_dir / "manifests.json").write_text(
        json.dumps({"x": str(x_manifest.path.resolve()), "y": str(y_manifest.path.resolve())}, indent=1)
    )
    with run_lock(run_dir):
        trainer = Trainer(cfg, x_manifest, y_manifest, run_dir)
        trainer.fresh()
        trainer.runlog.append({"event": "start", "rng": _provenance(cfg), "time": time.time()})
        return trainer.run(stop_at)


def resume(run_dir: str | os.PathLike, stop_at: int | None = None) -> TrainResult:
    """Continue a run from its latest checkpoint with parameters, optimizer and RNG restored."""
    run_dir = Path(run_dir)
    try:
        refs = json.loads((run_dir / "manifests.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{run_dir} is not a resumable run directory: {exc}") from None
    ckpt = load_checkpoint(run_dir)
    with run_lock(run_dir):
        trainer = Trainer(ckpt.config, DatasetManifest.load(refs["x"]), DatasetManifest.load(refs["y"]), run_dir)
        trainer.restore(ckpt)
        trainer.runlog.truncate_from(ckpt.step)
        trainer.runlog.append({"event": "resume", "from_step": ckpt.step, "rng": _provenance(ckpt.config), "time": time.time()})
        return trainer.run(stop_at)

"""Deterministic data-parallel training runs on the simulated device group.

The orchestrator builds the dataset, model, and schedule from an
ExperimentConfig, spawns one worker per device, and owns all file output.
Workers keep identical parameter replicas: every iteration they compute
gradients on their shard, average them with a world AllReduce, and apply
the same SGD step. Sharding is a seeded epoch permutation split into
contiguous per-rank slices, which is what makes an n-device run directly
comparable to a single device training on the concatenated batch.

Every byte of the output files (metrics CSV, manifest, checkpoint) is a
function of the config alone. The wall_ms column therefore reports a
fixed idealized cost model, not measured time; measured duration goes to
stdout only.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .collectives import (
    SCOPE_WORLD,
    CollectiveError,
    DeviceGroup,
    allreduce_sum,
    broadcast,
)
from .data import DataError, Dataset, DatasetSpec, generate_dataset, load_dataset
from .model import (
    LayerSpec,
    ModelSpec,
    ModelError,
    accuracy,
    backward,
    forward,
    init_buffers,
    init_params,
)
from .optim import (
    DivergenceError,
    LRPolicy,
    SGDState,
    ScheduleError,
    default_warmup_iters,
    lr_at,
    make_policy,
    sgd_step,
)
from .tensor import NonFiniteError, Tensor

CSV_HEADER = "epoch,iter,lr,task_loss,reg_loss,total_loss,eval_acc,wall_ms"

# Idealized per-iteration cost model (documented, deterministic):
# a training step costs SAMPLE_STEP_MS per local sample plus one latency
# term per AllReduce round; evaluation costs SAMPLE_EVAL_MS per sample.
SAMPLE_STEP_MS = 1.0
SAMPLE_EVAL_MS = 0.25
ALLREDUCE_ROUND_MS = 0.5

DIVERGENCE_LOSS_FACTOR = 1e3
DIVERGENCE_STREAK = 100


class DivergenceMonitor:
    """Watches the per-iteration mean loss for runaway growth.

    Two triggers: a non-finite loss raises DivergenceError on the spot,
    and a loss staying above `factor` times the first observed magnitude
    for `streak` consecutive iterations makes observe() return True so the
    caller can stop cleanly. All ranks feed this the same allreduced loss,
    so every replica reaches the same verdict on the same iteration.
    """

    def __init__(self, factor: float = DIVERGENCE_LOSS_FACTOR,
                 streak: int = DIVERGENCE_STREAK):
        self.factor = factor
        self.streak = streak
        self.initial: float | None = None
        self.run_length = 0

    def observe(self, mean_loss: float, context: str = "") -> bool:
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"{context}: mean loss is non-finite")
        if self.initial is None:
            self.initial = max(abs(mean_loss), float(np.finfo(float).tiny))
        if abs(mean_loss) > self.factor * self.initial:
            self.run_length += 1
        else:
            self.run_length = 0
        return self.run_length >= self.streak

DEFAULT_MODEL = (
    {"kind": "conv3x3", "out_channels": 4},
    {"kind": "bn", "variant": "cross"},
    {"kind": "relu"},
    {"kind": "global_mean_pool"},
    {"kind": "dense", "out_features": None},  # None: filled with the class count
)


class ConfigError(ValueError):
    """One or more invalid experiment-config fields."""


class TrainerError(RuntimeError):
    """Replica-consistency violation or orchestration failure."""


@dataclass
class ExperimentConfig:
    # parallel layout
    world_size: int = 1
    per_device_batch: int = 8
    bn_group_size: int | None = None      # None: world_size
    # schedule
    policy: str = "normal"                # "normal" or "long"
    base_lr: float = 0.02
    base_batch: int = 16
    warmup_iters: int | None = None       # None: min(500, one epoch)
    half_lr: bool = False
    epochs: int | None = None             # None: the policy's end epoch
    # optimizer
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # model and data
    model: list | None = None             # layer dicts; None: small conv net
    one_pass_bn: bool = False
    dataset: dict = field(default_factory=lambda: {"size": 256, "classes": 4})
    # run plumbing
    seed: int = 0
    out_dir: str | None = None
    checksum_interval: int = 10           # iterations between replica checks; 0 disables
    collective_timeout_s: float = 30.0

    @property
    def total_batch(self) -> int:
        return self.world_size * self.per_device_batch

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        problems = []
        if self.world_size < 1:
            problems.append(f"world_size must be >= 1, got {self.world_size}")
        if self.per_device_batch < 1:
            problems.append(f"per_device_batch must be >= 1, got {self.per_device_batch}")
        g = self.world_size if self.bn_group_size is None else self.bn_group_size
        if self.world_size >= 1 and (g < 1 or self.world_size % g != 0):
            problems.append(f"bn_group_size {g} must divide world_size {self.world_size}")
        if self.policy not in ("normal", "long"):
            problems.append(f"policy must be 'normal' or 'long', got {self.policy!r}")
        if self.base_lr <= 0:
            problems.append(f"base_lr must be positive, got {self.base_lr}")
        if self.base_batch < 1:
            problems.append(f"base_batch must be >= 1, got {self.base_batch}")
        if self.warmup_iters is not None and self.warmup_iters < 0:
            problems.append("warmup_iters must be >= 0")
        if self.epochs is not None and self.epochs < 1:
            problems.append("epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.checksum_interval < 0:
            problems.append("checksum_interval must be >= 0 (0 disables)")
        if self.collective_timeout_s <= 0:
            problems.append("collective_timeout_s must be positive")
        if not isinstance(self.dataset, dict):
            problems.append("dataset must be a mapping")
        elif "dir" not in self.dataset:
            try:
                spec = DatasetSpec(**self.dataset)
                if not problems and spec.size < self.total_batch:
                    problems.append(
                        f"dataset size {spec.size} is smaller than the total batch "
                        f"{self.total_batch}")
            except (TypeError, DataError) as e:
                problems.append(f"dataset spec: {e}")
        if problems:
            raise ConfigError("; ".join(problems))


def resolve_dataset(config: ExperimentConfig) -> Dataset:
    if "dir" in config.dataset:
        return load_dataset(config.dataset["dir"])
    return generate_dataset(DatasetSpec(**config.dataset), config.seed)


def build_model(config: ExperimentConfig, classes: int, in_shape: tuple) -> ModelSpec:
    """ModelSpec from the config's layer dicts, loss head appended."""
    raw = config.model if config.model is not None else [dict(d) for d in DEFAULT_MODEL]
    layers = []
    for entry in raw:
        entry = dict(entry)
        if entry.get("kind") == "dense" and entry.get("out_features") is None:
            entry["out_features"] = classes
        entry.pop("name", None)
        try:
            layers.append(LayerSpec(**entry))
        except (TypeError, ModelError) as e:
            raise ConfigError(f"model layer {entry}: {e}") from None
    if not layers or layers[-1].kind != "softmax_xent":
        layers.append(LayerSpec(kind="softmax_xent"))
    try:
        spec = ModelSpec(layers=layers, in_shape=in_shape)
    except ModelError as e:
        raise ConfigError(f"model: {e}") from None
    if spec.classes != classes:
        raise ConfigError(
            f"model emits {spec.classes} classes but the dataset has {classes}")
    return spec


@dataclass
class Resolved:
    """Every default made explicit; serialized into the run manifest."""

    bn_group_size: int
    total_batch: int
    iters_per_epoch: int
    dropped_per_epoch: int
    epochs: int
    warmup_iters: int
    policy: LRPolicy
    eval_size: int

    def as_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = {
            "base_lr": self.policy.base_lr,
            "base_batch": self.policy.base_batch,
            "actual_batch": self.policy.actual_batch,
            "warmup_iters": self.policy.warmup_iters,
            "milestones": [list(m) for m in self.policy.milestones],
            "end_epoch": self.policy.end_epoch,
            "half_lr": self.policy.half_lr,
        }
        return d


def resolve(config: ExperimentConfig, dataset: Dataset) -> Resolved:
    total = config.total_batch
    if dataset.images.shape[0] < total:
        raise ConfigError(
            f"dataset size {dataset.images.shape[0]} is smaller than the total "
            f"batch {total}")
    iters = dataset.images.shape[0] // total
    warmup = (default_warmup_iters(iters) if config.warmup_iters is None
              else config.warmup_iters)
    try:
        policy = make_policy(config.policy, actual_batch=total,
                             base_lr=config.base_lr, base_batch=config.base_batch,
                             warmup_iters=warmup, half_lr=config.half_lr)
    except ScheduleError as e:
        raise ConfigError(str(e)) from None
    return Resolved(
        bn_group_size=config.world_size if config.bn_group_size is None
        else config.bn_group_size,
        total_batch=total,
        iters_per_epoch=iters,
        dropped_per_epoch=dataset.images.shape[0] - iters * total,
        epochs=policy.end_epoch if config.epochs is None else config.epochs,
        warmup_iters=warmup,
        policy=policy,
        eval_size=dataset.eval_images.shape[0],
    )


@dataclass
class MetricsRow:
    epoch: int
    iter: int
    lr: float
    task_loss: float | None
    reg_loss: float | None
    total_loss: float | None
    eval_acc: float | None
    wall_ms: float

    def csv_line(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return ",".join([
            str(self.epoch), str(self.iter), fmt(self.lr), fmt(self.task_loss),
            fmt(self.reg_loss), fmt(self.total_loss), fmt(self.eval_acc),
            fmt(self.wall_ms),
        ])


def iteration_wall_ms(config: ExperimentConfig, allreduce_rounds: int) -> float:
    latency = ALLREDUCE_ROUND_MS * (config.world_size - 1).bit_length()
    return config.per_device_batch * SAMPLE_STEP_MS + allreduce_rounds * latency


def _params_checksum(params: dict) -> int:
    crc = 0
    for key in sorted(params):
        crc = zlib.crc32(np.ascontiguousarray(params[key]).tobytes(), crc)
    return crc


def check_replica_sync(handle, params: dict, context: str) -> None:
    """Raise TrainerError if this rank's parameter bytes differ from rank 0's.

    Every rank in the world scope must call this together; rank 0
    broadcasts its checksum and the others compare. Catches silent replica
    drift (a missed gradient exchange, a stray in-place edit) close to
    where it happened instead of at the end of the run.
    """
    crc = _params_checksum(params)
    ref = broadcast(handle, SCOPE_WORLD, 0,
                    np.array([float(crc)]) if handle.rank == 0 else None)
    if int(ref[0]) != crc:
        raise TrainerError(
            f"replica checksum mismatch on rank {handle.rank} at {context}")


@dataclass
class TrainResult:
    status: str                      # "ok" or "diverged"
    rows: list
    eval_history: list               # (epoch, accuracy) pairs
    final_params: dict | None
    final_buffers: dict | None
    diverged_at: str | None
    manifest: dict
    measured_wall_s: float


@dataclass
class _WorkerOut:
    status: str
    diverged_at: str | None
    rows: list
    eval_history: list
    params: dict | None
    buffers: dict | None


def _count_allreduce_rounds(model: ModelSpec, one_pass: bool) -> int:
    """Collective rounds per iteration under the wall-clock cost model."""
    rounds = 1  # gradient AllReduce
    per_bn = 2 if not one_pass else 1
    for layer in model.layers:
        if layer.kind == "bn" and layer.variant == "cross":
            rounds += per_bn + 1  # forward stats + backward sums
    return rounds


def run_training(config: ExperimentConfig) -> TrainResult:
    """Execute one experiment; pure computation, no file output here."""
    import time

    config.validate()
    t0 = time.perf_counter()
    dataset = resolve_dataset(config)
    res = resolve(config, dataset)
    model = build_model(config, dataset.spec.classes,
                        (1, dataset.spec.height, dataset.spec.width))
    iter_ms = iteration_wall_ms(config, _count_allreduce_rounds(model, config.one_pass_bn))
    eval_ms = res.eval_size * SAMPLE_EVAL_MS
    world = config.world_size

    images, labels = dataset.images, dataset.labels

    def worker(handle):
        params = init_params(model, config.seed)
        buffers = init_buffers(model)
        sgd = SGDState.create(params, config.momentum, config.weight_decay)
        grad_keys = sorted(params)
        rows, evals = [], []
        monitor = DivergenceMonitor()
        status, diverged_at = "ok", None
        for epoch in range(res.epochs):
            perm = np.random.default_rng((config.seed, 3, epoch)).permutation(
                images.shape[0])
            for it in range(res.iters_per_epoch):
                base = it * res.total_batch
                sl = perm[base + handle.rank * config.per_device_batch:
                          base + (handle.rank + 1) * config.per_device_batch]
                x = Tensor(images[sl], _context="batch")
                y = labels[sl]
                lr = lr_at(res.policy, epoch, it, res.iters_per_epoch)
                try:
                    out = forward(model, params, buffers, x, y, mode="train",
                                  handle=handle, weight_decay=config.weight_decay,
                                  one_pass_bn=config.one_pass_bn)
                    grads = backward(model, params, out.caches, handle=handle)
                except NonFiniteError as e:
                    raise DivergenceError(f"epoch {epoch} iter {it}: {e}") from e
                flat = np.concatenate(
                    [grads[k].ravel() for k in grad_keys]
                    + [np.array([out.loss.task_loss])])
                mean = allreduce_sum(handle, SCOPE_WORLD, flat) / world
                offset = 0
                for k in grad_keys:
                    n = params[k].size
                    grads[k] = mean[offset:offset + n].reshape(params[k].shape)
                    offset += n
                mean_task = float(mean[-1])
                sgd_step(params, grads, sgd, lr)
                if config.checksum_interval and it % config.checksum_interval == 0:
                    check_replica_sync(handle, params, f"epoch {epoch} iter {it}")
                tripped = monitor.observe(mean_task, f"epoch {epoch} iter {it}")
                if handle.rank == 0:
                    reg = out.loss.reg_loss
                    rows.append(MetricsRow(epoch, it, lr, mean_task, reg,
                                           mean_task + reg, None, iter_ms))
                if tripped:
                    status = "diverged"
                    diverged_at = f"epoch {epoch} iter {it}"
                    break
            if status == "diverged":
                break
            if handle.rank == 0:
                ev = forward(model, params, buffers,
                             Tensor(dataset.eval_images, _context="eval"),
                             labels=None, mode="eval")
                acc = accuracy(ev.logits, dataset.eval_labels)
                evals.append((epoch, acc))
                last_lr = lr_at(res.policy, epoch, res.iters_per_epoch - 1,
                                res.iters_per_epoch)
                rows.append(MetricsRow(epoch, res.iters_per_epoch, last_lr,
                                       None, None, None, acc, eval_ms))
        if handle.rank == 0:
            return _WorkerOut(status, diverged_at, rows, evals, params, buffers)
        return _WorkerOut(status, diverged_at, [], [], None, None)

    group = DeviceGroup(world, bn_group_size=res.bn_group_size, seed=config.seed,
                        timeout_s=config.collective_timeout_s)
    outcomes = group.run(worker, return_exceptions=True)

    status, diverged_at = "ok", None
    rows, evals, params, buffers = [], [], None, None
    hard_error = None
    for rank, oc in enumerate(outcomes):
        if isinstance(oc, _WorkerOut):
            if oc.status == "diverged":
                status, diverged_at = "diverged", oc.diverged_at
            if rank == 0:
                rows, evals = oc.rows, oc.eval_history
                params, buffers = oc.params, oc.buffers
        elif isinstance(oc, DivergenceError):
            status = "diverged"
            diverged_at = diverged_at or str(oc)
        elif isinstance(oc, BaseException):
            if hard_error is None or isinstance(hard_error, CollectiveError):
                hard_error = oc
    if hard_error is not None and status != "diverged":
        raise hard_error

    manifest = {
        "config": config.to_dict(),
        "resolved": res.as_dict(),
        "model": [asdict(layer) for layer in model.layers],
        "dataset_hash": dataset.content_hash(),
        "dataset_spec": asdict(dataset.spec),
        "status": status,
        "diverged_at": diverged_at,
        "wall_model_ms": {
            "per_iteration": iter_ms,
            "per_eval": eval_ms,
            "sample_step_ms": SAMPLE_STEP_MS,
            "sample_eval_ms": SAMPLE_EVAL_MS,
            "allreduce_round_ms": ALLREDUCE_ROUND_MS,
        },
    }
    return TrainResult(
        status=status, rows=rows, eval_history=evals, final_params=params,
        final_buffers=buffers, diverged_at=diverged_at, manifest=manifest,
        measured_wall_s=time.perf_counter() - t0,
    )


def write_outputs(result: TrainResult, out_dir) -> None:
    """Metrics CSV, run manifest, and final checkpoint under `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER] + [row.csv_line() for row in result.rows]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(
        json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    if result.final_params is not None:
        arrays = {f"param/{k}": v for k, v in sorted(result.final_params.items())}
        arrays.update({f"buffer/{k}": v
                       for k, v in sorted(result.final_buffers.items())})
        np.savez(out / "checkpoint.npz", **arrays)

"""Optimization, early stopping, Hydra's two-phase protocol and cross-validation."""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    PLACEHOLDER,
    CatchmentDataset,
    ConfigurationError,
    NormalizationStats,
    SplitPlan,
    feature_matrix,
    forecast_indices,
    gather_windows,
    make_batches,
    make_split_plans,
    mask_optional,
    record_years,
    shared_variables,
    validation_plan,
)
from .evaluation import EvaluationReport, evaluate_predictions
from .models import (
    SEARCH_GRIDS,
    FlagLstm,
    HydraModel,
    Hyperparameters,
    ModelSpec,
    QuantileLstm,
    build_head,
    declared_inputs,
    head_forward,
    hydra_forward,
)
from .objectives import climatology_fit, quantile_loss_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, record: TrainingRunRecord | None = None):
        super().__init__(message)
        self.record = record


class OrderingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    window: int = 60
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    clip_norm: float | None = 1.0
    eval_batch_size: int = 1024
    flag_probability: float = 0.5
    months: tuple[int, ...] | None = None
    # None: precompute body encodings for phase 2 when they fit in ~256 MB
    precompute_encodings: bool | None = None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["months"] = list(self.months) if self.months else None
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> TrainingConfig:
        unknown = sorted(set(doc) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"unknown training settings: {unknown}")
        doc = dict(doc)
        if doc.get("months"):
            doc["months"] = tuple(doc["months"])
        return cls(**doc)


def job_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for one job, derived from (seed, job key)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; gradients are cleared after each step."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.grad = None


def clip_gradients(params: Mapping[str, Tensor], max_norm: float) -> tuple[float, bool]:
    """Rescale gradients to a global L2 norm of at most ``max_norm``."""
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
        return norm, True
    return norm, False


class EarlyStopper:
    """Stops after ``patience`` epochs without a new minimum, or at ``max_epochs``."""

    def __init__(self, patience: int = 20, max_epochs: int = 200):
        if patience < 1 or max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        self.patience = patience
        self.max_epochs = max_epochs
        self.epoch = 0
        self.best_loss = math.inf
        self.best_epoch = 0
        self.since_best = 0
        self.stop_reason: str | None = None

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True when training should stop."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.since_best = 0
        else:
            self.since_best += 1
        if self.since_best >= self.patience:
            self.stop_reason = "patience"
        elif self.epoch >= self.max_epochs:
            self.stop_reason = "max_epochs"
        return self.stop_reason is not None

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


@dataclass
class TrainingRunRecord:
    label: str
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str | None = None
    clipped_batches: int = 0
    checkpoint: str | None = None
    children: dict[str, TrainingRunRecord] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        doc = {
            "label": self.label,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "clipped_batches": self.clipped_batches,
            "checkpoint": self.checkpoint,
            "children": {k: v.to_dict(include_timing) for k, v in sorted(self.children.items())},
        }
        if include_timing:
            doc["wall_time"] = self.wall_time
        return doc

    def timings(self) -> dict:
        out = {self.label: self.wall_time}
        for child in self.children.values():
            out.update(child.timings())
        return out


def fit(
    label: str,
    params: Mapping[str, Tensor],
    set_training: Callable[[bool], None],
    epoch_batches: Callable[[np.random.Generator], Iterable],
    batch_loss: Callable[[object, np.random.Generator], Tensor],
    validation_loss: Callable[[], float],
    config: TrainingConfig,
    learning_rate: float,
    rng: np.random.Generator,
    seed: int = 0,
) -> TrainingRunRecord:
    """Generic epoch loop; leaves ``params`` at the best-validation epoch."""
    start = time.perf_counter()
    record = TrainingRunRecord(label, seed)
    adam = Adam(learning_rate)
    stopper = EarlyStopper(config.patience, config.max_epochs)
    best = {k: p.data.copy() for k, p in params.items()}
    for p in params.values():
        p.grad = None
    while True:
        set_training(True)
        total, count = 0.0, 0
        for batch in epoch_batches(rng):
            loss = batch_loss(batch, rng)
            ad.backward(loss)
            if config.clip_norm is not None:
                _, clipped = clip_gradients(params, config.clip_norm)
                record.clipped_batches += int(clipped)
            adam.step(params)
            n = len(batch.indices)
            total += loss.item() * n
            count += n
        set_training(False)
        val = validation_loss()
        record.train_loss.append(total / max(count, 1))
        record.val_loss.append(val)
        if not math.isfinite(val):
            record.stop_reason = "diverged"
            record.wall_time = time.perf_counter() - start
            raise TrainingError(f"{label}: validation loss is {val} at epoch {stopper.epoch + 1}", record)
        stop = stopper.update(val)
        if stopper.improved:
            best = {k: p.data.copy() for k, p in params.items()}
        log.debug("%s epoch %d train %.5f val %.5f", label, stopper.epoch, record.train_loss[-1], val)
        if stop:
            break
    for k, p in params.items():
        p.data[...] = best[k]
    record.best_epoch = stopper.best_epoch
    record.best_val_loss = stopper.best_loss
    record.stop_reason = stopper.stop_reason
    record.wall_time = time.perf_counter() - start
    return record


# ---------------------------------------------------------------- example access


class ExampleStore:
    """Normalized feature matrices and targets for a fixed variable roster."""

    def __init__(
        self,
        datasets: Sequence[CatchmentDataset],
        names: Sequence[str],
        stats: NormalizationStats,
        window: int,
    ):
        self.names = tuple(names)
        self.window = window
        self.datasets = {d.catchment_id: d for d in datasets}
        self.features = {d.catchment_id: feature_matrix(d, self.names, stats) for d in datasets}
        self.targets = {
            d.catchment_id: stats.normalize_target(d.catchment_id, d.discharge) for d in datasets
        }

    def windows(self, catchment_id: str, indices: np.ndarray) -> np.ndarray:
        return gather_windows(self.features[catchment_id], np.asarray(indices), self.window)

    def pools(
        self,
        years: Sequence[int],
        window_years: Sequence[int] | None = None,
        months: Sequence[int] | None = None,
        catchments: Sequence[str] | None = None,
        also: ExampleStore | None = None,
    ) -> dict[str, np.ndarray]:
        out = {}
        for cid in catchments or sorted(self.datasets):
            feats = self.features[cid]
            if also is not None:
                feats = np.concatenate([feats, also.features[cid]], axis=1)
            out[cid] = forecast_indices(
                self.datasets[cid], years, self.window, feats, window_years, months
            )
        return out


def _window_years_for_training(split: SplitPlan) -> tuple[int, ...]:
    return split.training_years


def _window_years_for_validation(split: SplitPlan) -> tuple[int, ...]:
    return tuple(sorted(split.training_years + split.validation_years))


def _pools_or_fail(pools: dict[str, np.ndarray], what: str) -> dict[str, np.ndarray]:
    if not any(len(v) for v in pools.values()):
        raise ConfigurationError(f"no {what} examples: the window does not fit the chosen years")
    return pools


def _chunked(indices: np.ndarray, size: int):
    for start in range(0, len(indices), size):
        yield indices[start : start + size]


def _mean_loss(pools, predict, targets, chunk) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for cid, idx in sorted(pools.items()):
            for part in _chunked(idx, chunk):
                pred = predict(cid, part)
                loss = quantile_loss_tensor(Tensor(pred), targets[cid][part])
                total += loss.item() * len(part)
                count += len(part)
    return total / count if count else math.nan


# ---------------------------------------------------------------- tasks


class BaselineTask:
    """Batches, loss and predictions for a single-stack model."""

    def __init__(self, model: QuantileLstm, datasets, stats, config: TrainingConfig):
        self.model = model
        self.config = config
        self.flag = isinstance(model, FlagLstm)
        names = model.input_names
        if self.flag:
            names = names[: len(names) - len(model.optional_names)]
            self.k_optional = len(model.optional_names)
        self.store = ExampleStore(datasets, names, stats, config.window)

    def inputs(self, cid, idx, rng=None, setting="gauged") -> np.ndarray:
        x = self.store.windows(cid, idx)
        if not self.flag:
            return x
        k = self.k_optional
        opt = x[..., -k:]
        if rng is not None:
            values, flags = mask_optional(opt, self.config.flag_probability, rng)
        elif setting == "gauged":
            values, flags = opt, np.ones_like(opt)
        else:
            values, flags = np.full_like(opt, PLACEHOLDER), np.zeros_like(opt)
        return np.concatenate([x[..., :-k], values, flags], axis=-1)

    def batch_loss(self, batch, rng) -> Tensor:
        x = self.inputs(batch.catchment_id, batch.indices, rng)
        pred = self.model.forward(Tensor(x), rng)
        return quantile_loss_tensor(pred, self.store.targets[batch.catchment_id][batch.indices])

    def predict(self, cid, idx, setting="gauged") -> np.ndarray:
        with ad.no_grad():
            return self.model.forward(Tensor(self.inputs(cid, idx, setting=setting))).data

    def validation_loss(self, pools) -> float:
        if not self.flag:
            return _mean_loss(pools, self.predict, self.store.targets, self.config.eval_batch_size)
        losses = [
            _mean_loss(
                pools,
                lambda c, i, s=s: self.predict(c, i, s),
                self.store.targets,
                self.config.eval_batch_size,
            )
            for s in ("gauged", "ungauged")
        ]
        return 0.5 * (losses[0] + losses[1])


class HydraPhase1Task:
    def __init__(self, model: HydraModel, datasets, stats, config: TrainingConfig):
        self.model = model
        self.config = config
        self.store = ExampleStore(datasets, model.body.input_names, stats, config.window)

    def params(self) -> dict[str, Tensor]:
        out = self.model.body.named_parameters()
        out.update(self.model.multi_head.named_parameters("head"))
        return out

    def set_training(self, mode: bool) -> None:
        self.model.body.stack.training = mode
        self.model.multi_head.stack.training = mode

    def batch_loss(self, batch, rng) -> Tensor:
        x = Tensor(self.store.windows(batch.catchment_id, batch.indices))
        pred = hydra_forward(self.model.body, self.model.multi_head, x, rng=rng)
        return quantile_loss_tensor(pred, self.store.targets[batch.catchment_id][batch.indices])

    def predict(self, cid, idx) -> np.ndarray:
        with ad.no_grad():
            x = Tensor(self.store.windows(cid, idx))
            return hydra_forward(self.model.body, self.model.multi_head, x).data

    def validation_loss(self, pools) -> float:
        return _mean_loss(pools, self.predict, self.store.targets, self.config.eval_batch_size)


class EncodingCache:
    """Frozen-body encodings for a fixed set of forecast indices of one catchment."""

    def __init__(self, body, store: ExampleStore, cid: str, indices: np.ndarray, chunk: int):
        indices = np.unique(np.asarray(indices))
        self.position = {int(t): k for k, t in enumerate(indices)}
        W = store.window
        self.values = np.empty((W, len(indices), body.hidden_size))
        with ad.no_grad():
            for start in range(0, len(indices), chunk):
                part = indices[start : start + chunk]
                enc = body.encode(Tensor(store.windows(cid, part)))
                self.values[:, start : start + len(part)] = enc.data

    def get(self, indices: np.ndarray) -> np.ndarray:
        return self.values[:, [self.position[int(t)] for t in indices]]


class HydraHeadTask:
    """Phase 2: one single-catchment head on top of the frozen body."""

    def __init__(
        self,
        model: HydraModel,
        head,
        shared_store: ExampleStore,
        extra_store: ExampleStore,
        config: TrainingConfig,
        cache_indices: np.ndarray | None = None,
    ):
        self.model = model
        self.head = head
        self.cid = head.catchment_id
        self.shared = shared_store
        self.extra = extra_store
        self.config = config
        self.cache = None
        if cache_indices is not None:
            self.cache = EncodingCache(
                model.body, shared_store, self.cid, cache_indices, config.eval_batch_size
            )

    def encoding(self, idx) -> Tensor:
        if self.cache is not None:
            return Tensor(self.cache.get(idx))
        with ad.no_grad():
            return self.model.body.encode(Tensor(self.shared.windows(self.cid, idx)))

    def batch_loss(self, batch, rng) -> Tensor:
        idx = batch.indices
        pred = head_forward(self.head, self.encoding(idx), Tensor(self.extra.windows(self.cid, idx)), rng)
        return quantile_loss_tensor(pred, self.shared.targets[self.cid][idx])

    def predict(self, cid, idx) -> np.ndarray:
        with ad.no_grad():
            return head_forward(self.head, self.encoding(idx), Tensor(self.extra.windows(cid, idx))).data

    def predict_on_the_fly(self, idx) -> np.ndarray:
        with ad.no_grad():
            x = Tensor(self.shared.windows(self.cid, idx))
            return hydra_forward(self.model.body, self.head, x, self.extra.windows(self.cid, idx)).data

    def validation_loss(self, pools) -> float:
        return _mean_loss(pools, self.predict, self.shared.targets, self.config.eval_batch_size)


# ---------------------------------------------------------------- training entry points


@dataclass
class TrainedModel:
    spec: ModelSpec
    model: object  # QuantileLstm | FlagLstm | HydraModel | dict[str, QuantileLstm]
    stats: NormalizationStats
    record: TrainingRunRecord
    config: TrainingConfig
    shared: tuple[str, ...]
    tasks: dict = field(default_factory=dict, repr=False)

    def settings(self) -> list[str]:
        arch = self.spec.architecture
        if arch == "hydra":
            return ["hydra_multi_head"] + (["hydra_single_head"] if self.model.single_heads else [])
        if arch == "flag":
            return ["flag_ungauged", "flag_gauged"]
        return [arch]

    def predict(self, setting: str, cid: str, idx: np.ndarray) -> np.ndarray:
        """Normalized (q10, q50, q90) for forecast indices of one catchment."""
        arch = self.spec.architecture
        if arch == "hydra":
            if setting == "hydra_multi_head":
                return self.tasks["phase1"].predict(cid, idx)
            return self.tasks[f"head_{cid}"].predict_on_the_fly(idx)
        if arch == "single_catchment":
            return self.tasks[f"model_{cid}"].predict(cid, idx)
        if arch == "flag":
            return self.tasks["model"].predict(cid, idx, setting.split("_")[1])
        return self.tasks["model"].predict(cid, idx)

    def catchments_for(self, setting: str) -> list[str]:
        if setting == "hydra_single_head":
            return sorted(self.model.single_heads)
        return sorted(self.stats.target)


def _prepare(spec: ModelSpec, datasets, split: SplitPlan):
    if not datasets:
        raise ConfigurationError("no datasets given")
    shared = tuple(shared_variables(datasets))
    needed = list(shared)
    if spec.architecture != "multi_catchment_no_q":
        needed += [v for v in spec.extra_variables if v not in needed]
    stats = NormalizationStats.fit(datasets, split.training_years, needed)
    shared = tuple(n for n in shared if n not in stats.dropped)
    return shared, stats


def _epoch_fn(pools, batch_size):
    return lambda rng: make_batches(pools, batch_size, rng)


def _train_baseline(spec, datasets, split, seed, config, shared, stats, catchment=None, key=0):
    hp = spec.hyperparameters
    rng = job_rng(seed, split.fold_id + 1, key)
    if spec.architecture == "flag":
        model = FlagLstm.build_flag(shared, spec.extra_variables, hp, rng)
    else:
        names = declared_inputs(spec.architecture, shared)
        model = QuantileLstm.build(spec.architecture, names, hp, rng, catchment)
    if spec.architecture != "multi_catchment_no_q":
        missing = [
            (d.catchment_id, v)
            for d in datasets
            for v in (spec.extra_variables if spec.architecture == "flag" else ("discharge_m3_s",))
            if not d.has(v)
        ]
        if missing:
            raise ConfigurationError(f"{spec.architecture}: variables unavailable: {missing}")
    task = BaselineTask(model, datasets, stats, config)
    catchments = [catchment] if catchment else None
    train = _pools_or_fail(
        task.store.pools(split.training_years, _window_years_for_training(split), config.months, catchments),
        "training",
    )
    val = _pools_or_fail(
        task.store.pools(split.validation_years, _window_years_for_validation(split), config.months, catchments),
        "validation",
    )
    label = f"{spec.architecture}" + (f"/{catchment}" if catchment else "")
    record = fit(
        label,
        model.named_parameters(),
        model.train,
        _epoch_fn(train, config.batch_size),
        task.batch_loss,
        lambda: task.validation_loss(val),
        config,
        hp.learning_rate,
        rng,
        seed,
    )
    return model, task, record


def train_model(
    spec: ModelSpec,
    datasets: Sequence[CatchmentDataset],
    split: SplitPlan,
    seed: int | None = None,
    config: TrainingConfig | None = None,
    jobs: int = 1,
) -> TrainedModel:
    """Train any architecture on one split; Hydra runs both phases."""
    config = config or TrainingConfig()
    seed = spec.seed if seed is None else seed
    if spec.architecture == "hydra":
        return train_hydra(spec, datasets, split, seed, config, jobs=jobs)
    shared, stats = _prepare(spec, datasets, split)
    if spec.architecture == "single_catchment":
        models, tasks = {}, {}
        record = TrainingRunRecord("single_catchment", seed)
        start = time.perf_counter()
        for k, d in enumerate(sorted(datasets, key=lambda d: d.catchment_id)):
            m, task, rec = _train_baseline(
                spec, [d], split, seed, config, shared, stats, d.catchment_id, key=2000 + k
            )
            models[d.catchment_id] = m
            tasks[f"model_{d.catchment_id}"] = task
            record.children[d.catchment_id] = rec
        record.best_val_loss = float(np.mean([r.best_val_loss for r in record.children.values()]))
        record.stop_reason = "children"
        record.wall_time = time.perf_counter() - start
        return TrainedModel(spec, models, stats, record, config, shared, tasks)
    model, task, record = _train_baseline(spec, datasets, split, seed, config, shared, stats)
    return TrainedModel(spec, model, stats, record, config, shared, {"model": task})


def train_hydra_phase1(
    spec: ModelSpec, datasets, split: SplitPlan, seed: int, config: TrainingConfig
) -> TrainedModel:
    """Train the body and the multi-catchment head jointly."""
    shared, stats = _prepare(spec, datasets, split)
    hp = spec.hyperparameters
    rng = job_rng(seed, split.fold_id + 1, 0)
    model = HydraModel.build(shared, hp, rng)
    task = HydraPhase1Task(model, datasets, stats, config)
    train = _pools_or_fail(
        task.store.pools(split.training_years, _window_years_for_training(split), config.months),
        "training",
    )
    val = _pools_or_fail(
        task.store.pools(split.validation_years, _window_years_for_validation(split), config.months),
        "validation",
    )
    record = fit(
        "hydra/body+multi_head",
        task.params(),
        task.set_training,
        _epoch_fn(train, config.batch_size),
        task.batch_loss,
        lambda: task.validation_loss(val),
        config,
        hp.learning_rate,
        rng,
        seed,
    )
    model.phase1_complete = True
    top = TrainingRunRecord("hydra", seed, best_epoch=record.best_epoch, best_val_loss=record.best_val_loss)
    top.stop_reason = record.stop_reason
    top.children["body+multi_head"] = record
    top.wall_time = record.wall_time
    return TrainedModel(spec, model, stats, top, config, shared, {"phase1": task})


def _encoding_bytes(n_examples, config, hidden) -> int:
    return n_examples * config.window * hidden * 8


def train_single_heads(
    trained: TrainedModel,
    datasets,
    split: SplitPlan,
    seed: int,
    catchments: Sequence[str] | None = None,
    jobs: int = 1,
) -> TrainedModel:
    """Phase 2: fit one head per catchment on the frozen body.

    Each job gets its own random stream keyed by the catchment's position in
    the sorted id list, so results do not depend on scheduling.
    """
    model: HydraModel = trained.model
    if not isinstance(model, HydraModel) or not model.phase1_complete:
        raise OrderingError("single-catchment heads need a body trained in phase 1 first")
    spec, config, stats = trained.spec, trained.config, trained.stats
    hp = spec.hyperparameters
    extras = tuple(spec.extra_variables)
    by_id = {d.catchment_id: d for d in datasets}
    order = sorted(by_id)
    if catchments is None:
        catchments = [c for c in order if all(by_id[c].has(v) for v in extras)]
    for cid in catchments:
        lacking = [v for v in extras if not by_id[cid].has(v)]
        if lacking:
            raise ConfigurationError(f"catchment {cid!r} lacks extra variables {lacking}")
    for v in extras:
        if v not in stats.dynamic and v != "discharge_m3_s" and v not in stats.static:
            raise ConfigurationError(f"no normalization statistics for extra variable {v!r}")
    for p in model.body.named_parameters().values():
        p.grad = None
    model.body.stack.training = False
    shared_store = trained.tasks["phase1"].store

    def job(cid: str):
        d = [by_id[cid]]
        rng = job_rng(seed, split.fold_id + 1, 1000 + order.index(cid))
        head = build_head(model.body.hidden_size, hp, rng, cid, extras)
        extra_store = ExampleStore(d, extras, stats, config.window)
        train = _pools_or_fail(
            shared_store.pools(split.training_years, _window_years_for_training(split), config.months, [cid], extra_store),
            f"training ({cid})",
        )
        val = _pools_or_fail(
            shared_store.pools(split.validation_years, _window_years_for_validation(split), config.months, [cid], extra_store),
            f"validation ({cid})",
        )
        cache_idx = np.concatenate([train[cid], val[cid]])
        precompute = config.precompute_encodings
        if precompute is None:
            precompute = _encoding_bytes(len(cache_idx), config, model.body.hidden_size) < 256e6
        task = HydraHeadTask(
            model, head, shared_store, extra_store, config, cache_idx if precompute else None
        )

        def set_training(mode: bool) -> None:
            head.stack.training = mode

        record = fit(
            f"hydra/head_{cid}",
            head.named_parameters(),
            set_training,
            _epoch_fn(train, config.batch_size),
            task.batch_loss,
            lambda: task.validation_loss(val),
            config,
            hp.learning_rate,
            rng,
            seed,
        )
        task.cache = None  # release memory; later predictions run on the fly
        return cid, head, task, record

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, catchments))
    else:
        results = [job(cid) for cid in catchments]
    for cid, head, task, record in sorted(results, key=lambda r: r[0]):
        model.single_heads[cid] = head
        trained.tasks[f"head_{cid}"] = task
        trained.record.children[f"head_{cid}"] = record
    return trained


def train_hydra(
    spec: ModelSpec,
    datasets,
    split: SplitPlan,
    seed: int | None = None,
    config: TrainingConfig | None = None,
    head_catchments: Sequence[str] | None = None,
    jobs: int = 1,
) -> TrainedModel:
    config = config or TrainingConfig()
    seed = spec.seed if seed is None else seed
    trained = train_hydra_phase1(spec, datasets, split, seed, config)
    return train_single_heads(trained, datasets, split, seed, head_catchments, jobs)


# ---------------------------------------------------------------- evaluation


def predict_frame(
    trained: TrainedModel,
    datasets,
    years: Sequence[int],
    climatology,
    fold: int = 0,
) -> pd.DataFrame:
    """Physical-unit predictions and climatology for every forecast date in ``years``."""
    by_id = {d.catchment_id: d for d in datasets}
    frames = []
    window = trained.config.window
    for setting in trained.settings():
        for cid in trained.catchments_for(setting):
            d = by_id[cid]
            idx = forecast_indices(d, years, window, months=trained.config.months)
            if not len(idx):
                continue
            z = np.concatenate(
                [trained.predict(setting, cid, part) for part in _chunked(idx, trained.config.eval_batch_size)]
            )
            q = trained.stats.denormalize_target(cid, z)
            clim = climatology.predict(cid, d.dates[idx])
            frames.append(
                pd.DataFrame(
                    {
                        "catchment_id": cid,
                        "date": np.datetime_as_string(d.dates[idx], unit="D"),
                        "q10": q[:, 0],
                        "q50": q[:, 1],
                        "q90": q[:, 2],
                        "observed": d.discharge[idx],
                        "clim_q10": clim[:, 0],
                        "clim_q50": clim[:, 1],
                        "clim_q90": clim[:, 2],
                        "label": setting,
                        "fold": fold,
                    }
                )
            )
    if not frames:
        raise ConfigurationError(f"no forecast dates available in years {list(years)}")
    return pd.concat(frames, ignore_index=True)


def fit_climatology(datasets, years: Sequence[int]):
    obs = {}
    for d in datasets:
        keep = np.isin(d.years, np.asarray(list(years)))
        obs[d.catchment_id] = (d.dates[keep], d.discharge[keep])
    return climatology_fit(obs)


@dataclass
class FoldResult:
    split: SplitPlan
    trained: TrainedModel
    predictions: pd.DataFrame
    reports: dict[str, EvaluationReport]


@dataclass
class CrossValidationResult:
    folds: list[FoldResult]
    predictions: pd.DataFrame
    reports: dict[str, EvaluationReport]


def run_fold(spec, datasets, split: SplitPlan, seed: int, config: TrainingConfig, jobs: int = 1) -> FoldResult:
    trained = train_model(spec, datasets, split, seed, config, jobs=jobs)
    clim = fit_climatology(datasets, split.training_years)
    frame = predict_frame(trained, datasets, [split.test_year], clim, split.fold_id)
    return FoldResult(split, trained, frame, evaluate_predictions(frame))


def cross_validate(
    spec: ModelSpec,
    datasets: Sequence[CatchmentDataset],
    n_folds: int,
    seed: int | None = None,
    config: TrainingConfig | None = None,
    jobs: int = 1,
    test_years: Sequence[int] | None = None,
    n_validation: int = 2,
) -> CrossValidationResult:
    """Leave-one-year-out evaluation: one fold per test year."""
    config = config or TrainingConfig()
    seed = spec.seed if seed is None else seed
    plans = make_split_plans(record_years(datasets), n_folds, n_validation, test_years)
    tests = [p.test_year for p in plans]
    assert len(set(tests)) == len(tests), "fold test years overlap"
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(lambda p: run_fold(spec, datasets, p, seed, config), plans))
    else:
        folds = [run_fold(spec, datasets, p, seed, config) for p in plans]
    predictions = pd.concat([f.predictions for f in folds], ignore_index=True)
    return CrossValidationResult(folds, predictions, evaluate_predictions(predictions))


# ---------------------------------------------------------------- grid sweep


def expand_grid(grid: Mapping[str, Sequence]) -> list[Hyperparameters]:
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        out.append(Hyperparameters(**dict(zip(keys, combo))))
    return out


def grid_sweep(
    architecture: str,
    datasets,
    validation_years: Sequence[int],
    grid: Mapping[str, Sequence] | None = None,
    seed: int = 0,
    config: TrainingConfig | None = None,
) -> list[dict]:
    """Train each grid cell once and rank cells by validation loss.

    For Hydra the ranked loss is that of phase 1 (body + multi-catchment
    head). Failed cells are kept with their error and ranked last.
    """
    config = config or TrainingConfig()
    grid = SEARCH_GRIDS[architecture] if grid is None else grid
    split = validation_plan(record_years(datasets), validation_years)
    results = []
    for k, hp in enumerate(expand_grid(grid)):
        spec = ModelSpec(architecture, hp, seed)
        try:
            if architecture == "hydra":
                trained = train_hydra_phase1(spec, datasets, split, seed, config)
            else:
                trained = train_model(spec, datasets, split, seed, config)
            results.append(
                {"cell": k, "hyperparameters": asdict(hp), "val_loss": trained.record.best_val_loss, "error": None}
            )
        except (TrainingError, ConfigurationError) as exc:
            log.warning("grid cell %s failed: %s", hp.label(), exc)
            results.append({"cell": k, "hyperparameters": asdict(hp), "val_loss": None, "error": str(exc)})
    results.sort(key=lambda r: (r["val_loss"] is None, r["val_loss"] or 0.0, r["cell"]))
    for rank, r in enumerate(results, 1):
        r["rank"] = rank
    return results


__all__ = [
    "Adam",
    "CrossValidationResult",
    "EarlyStopper",
    "OrderingError",
    "TrainedModel",
    "TrainingConfig",
    "TrainingError",
    "TrainingRunRecord",
    "clip_gradients",
    "cross_validate",
    "expand_grid",
    "fit",
    "grid_sweep",
    "job_rng",
    "predict_frame",
    "run_fold",
    "train_hydra",
    "train_model",
    "train_single_heads",
]

"""Seeded training runs: Adam on softmax cross-entropy with best-validation
checkpoint selection over a fixed epoch budget."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .datasets import Dataset, DatasetView, batches, resize_bilinear_28, split_train_validation
from .models import Model, ModelSpec, build_model
from .rng import derive_seed

STATUS_OK = "OK"
STATUS_DIVERGED = "DIVERGED"
STATUS_FAILED = "FAILED"


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.001
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    repetitions: int | None = None
    validation_fraction: float = 0.10

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate < 0 or self.epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and epsilon > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.repetitions is not None and self.repetitions < 1:
            raise ValueError("repetitions must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")

    def repetitions_for(self, family: str) -> int:
        if self.repetitions is not None:
            return self.repetitions
        return 30 if family == "MLP" else 10

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: list
    v: list

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list, grads: list, state: AdamState, t: int, cfg: TrainConfig):
    """In-place Adam update of numpy ``params``; returns ``(params, state)``."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    if len(params) != len(grads):
        raise RuntimeError(f"{len(params)} parameters but {len(grads)} gradients")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise RuntimeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return params, state


@dataclass
class RunRecord:
    spec: ModelSpec
    seed: int
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0
    test_accuracy: float = 0.0
    param_count: int = 0
    wall_time: float = 0.0
    status: str = STATUS_OK
    diverged_epoch: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def train_test_gap(self) -> float:
        if self.best_epoch < 1:
            return 0.0
        return self.train_accuracy[self.best_epoch - 1] - self.test_accuracy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["spec"] = ModelSpec.from_dict(d["spec"])
        return cls(**d)

    def numeric_fields(self) -> dict:
        """Everything except timing, for determinism comparisons."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


@dataclass
class Benchmark:
    """Normalised train and test sets for one dataset."""

    train: Dataset
    test: Dataset

    @property
    def name(self) -> str:
        return self.train.name


def prepare_for_family(data: Benchmark, family: str) -> Benchmark:
    if family == "VIT" and data.train.images.shape[-1] != 28:
        return Benchmark(resize_bilinear_28(data.train), resize_bilinear_28(data.test))
    return data


def predict(model, images: np.ndarray, quant=None) -> np.ndarray:
    with T.no_grad():
        out = model(images) if quant is None else model(images, quant)
    logits = out.data if isinstance(out, T.Tensor) else np.asarray(out)
    return np.argmax(logits, axis=1)  # ties -> lowest class index


def evaluate(model, view: Dataset | DatasetView, quant=None, batch_size: int = 1000) -> float:
    """Top-1 accuracy of ``model`` over ``view``."""
    if isinstance(view, Dataset):
        view = view.view()
    n = len(view)
    if n == 0:
        return 0.0
    correct = 0
    for xb, yb in batches(view, batch_size, None):
        correct += int((predict(model, xb, quant) == yb).sum())
    return correct / n


def train_model(spec: ModelSpec, cfg: TrainConfig, seed: int, data: Benchmark,
                quant=None) -> tuple[Model, RunRecord]:
    """Train one seeded run and return the model restored to its best-validation epoch."""
    started = time.perf_counter()
    data = prepare_for_family(data, spec.family)
    model = build_model(spec.with_seed(seed))
    params = model.parameters()
    arrays = [p.data for p in params]
    train_view, val_view, _ = split_train_validation(data.train, seed, cfg.validation_fraction)
    state = AdamState.zeros(arrays)
    record = RunRecord(spec=spec.with_seed(seed), seed=int(seed), param_count=model.param_count)

    best_acc = -1.0
    best_state = model.state()
    best_quant = quant.state() if quant is not None else None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, correct, seen, n_batches = 0.0, 0, 0, 0
        diverged = False
        if quant is not None:
            quant.train()
        for xb, yb in batches(train_view, cfg.batch_size, derive_seed(seed, "epoch", epoch)):
            logits = model(xb) if quant is None else model(xb, quant)
            loss = T.softmax_cross_entropy(logits, yb)
            value = loss.item()
            if not math.isfinite(value):
                diverged = True
                break
            for p in params:
                p.grad = None
            loss.backward()
            step += 1
            adam_step(arrays, [p.grad for p in params], state, step, cfg)
            loss_sum += value
            n_batches += 1
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            seen += len(yb)
        if diverged:
            record.status = STATUS_DIVERGED
            record.diverged_epoch = epoch
            break
        if quant is not None:
            quant.eval()
        val_acc = evaluate(model, val_view, quant)
        record.train_loss.append(loss_sum / max(n_batches, 1))
        record.train_accuracy.append(correct / max(seen, 1))
        record.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = model.state()
            best_quant = quant.state() if quant is not None else None
            record.best_epoch = epoch

    model.load_state(best_state)
    if quant is not None:
        quant.load_state(best_quant)
        quant.eval()
    record.test_accuracy = evaluate(model, data.test, quant)
    record.wall_time = time.perf_counter() - started
    return model, record


def train_one(spec: ModelSpec, cfg: TrainConfig, seed: int, data: Benchmark) -> RunRecord:
    return train_model(spec, cfg, seed, data)[1]

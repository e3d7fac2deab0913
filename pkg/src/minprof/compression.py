"""One-shot L1 magnitude pruning and simulated W8A8 quantization-aware training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Model, ModelSpec, Param
from .tensor import Tensor
from .trainer import Benchmark, RunRecord, TrainConfig, evaluate, train_model

DEFAULT_RATES = tuple(round(0.1 * i, 1) for i in range(1, 11))
_TINY_SCALE = float(np.finfo(np.float32).eps)


# -- pruning --------------------------------------------------------------------
def prune_array(w: np.ndarray, rate: float) -> np.ndarray:
    """Zero the floor(rate * size) smallest-magnitude entries; ties go to the lower flat index."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"pruning rate must lie in [0, 1], got {rate}")
    flat = np.array(w, copy=True).reshape(-1)
    k = int(np.floor(rate * flat.size + 1e-9))
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:k]] = 0
    return flat.reshape(w.shape)


def copy_model(model: Model) -> Model:
    params = [Param(p.name, Tensor(p.tensor.data.copy(), requires_grad=True), p.kind) for p in model.params]
    return type(model)(model.spec, params)


def l1_prune(model: Model, rate: float) -> Model:
    """Per-tensor magnitude pruning of weight matrices and kernels; biases, norms and tokens are kept."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"pruning rate must lie in [0, 1], got {rate}")
    pruned = copy_model(model)
    for p in pruned.params:
        if p.kind == "weight":
            p.tensor.data = prune_array(p.tensor.data, rate)
    return pruned


@dataclass
class PruneProfile:
    spec: ModelSpec
    rates: list
    mean: list
    std: list
    baseline: float
    baseline_std: float = 0.0
    per_seed: list = field(default_factory=list)  # [seed][rate]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError("pruning rates must be strictly increasing")
        if self.rates and not (0 < self.rates[0] and self.rates[-1] <= 1):
            raise ValueError("pruning rates must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"spec": self.spec.identity(), "rates": list(self.rates), "mean": list(self.mean),
                "std": list(self.std), "baseline": self.baseline, "baseline_std": self.baseline_std}


def prune_accuracies(model: Model, rates, test) -> list[float]:
    return [evaluate(l1_prune(model, r), test) for r in rates]


def profile_from_accuracies(spec: ModelSpec, rates, baselines, per_seed) -> PruneProfile:
    acc = np.asarray(per_seed, dtype=np.float64).reshape(len(per_seed), len(rates))
    base = np.asarray(baselines, dtype=np.float64)
    return PruneProfile(spec, [float(r) for r in rates], acc.mean(axis=0).tolist(), acc.std(axis=0).tolist(),
                        float(base.mean()), float(base.std()), acc.tolist())


def prune_sweep(trained, rates=DEFAULT_RATES, test=None) -> PruneProfile:
    """Prune each trained model one-shot at every rate (no fine-tuning) and aggregate test accuracy.

    ``trained`` holds ``(model, record)`` pairs, or bare models when ``test``
    is used to compute the unpruned baseline.
    """
    pairs = [t if isinstance(t, tuple) else (t, None) for t in trained]
    if not pairs:
        raise ValueError("prune_sweep needs at least one trained run")
    if test is None:
        raise ValueError("prune_sweep needs a test set")
    baselines, per_seed = [], []
    for model, record in pairs:
        baselines.append(record.test_accuracy if record is not None else evaluate(model, test))
        per_seed.append(prune_accuracies(model, rates, test))
    return profile_from_accuracies(pairs[0][0].spec, rates, baselines, per_seed)


# -- quantization ---------------------------------------------------------------
def _fake_quant_array(x: np.ndarray, scale: float, zero_point: int, qmin: int, qmax: int):
    q = np.round(x.astype(np.float64) / scale) + zero_point
    inside = (q >= qmin) & (q <= qmax)
    out = ((np.clip(q, qmin, qmax) - zero_point) * scale).astype(x.dtype)
    return out, inside


def fake_quantize(x: Tensor, scale: float, zero_point: int, qmin: int, qmax: int) -> Tensor:
    """Quantize-dequantize round trip with a straight-through gradient inside the clamp range."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out, inside = _fake_quant_array(x.data, scale, zero_point, qmin, qmax)

    def backward(g):
        return (g * inside,)

    return Tensor._result(out, (x,), backward)


def observe_moving_minmax(state, batch, averaging_constant: float = 0.01):
    """Moving-average (min, max): the first batch sets the range, later ones blend in."""
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    lo, hi = float(arr.min()), float(arr.max())
    if state is None:
        return lo, hi
    m_lo, m_hi = state
    c = averaging_constant
    return m_lo + c * (lo - m_lo), m_hi + c * (hi - m_hi)


def symmetric_qparams(state, qmax: int) -> tuple[float, int]:
    """Max-abs scale, zero point 0."""
    lo, hi = state
    return max(max(abs(lo), abs(hi)) / qmax, _TINY_SCALE), 0


def affine_qparams(state, qmin: int, qmax: int) -> tuple[float, int]:
    """Map the running range (widened to include 0) onto [qmin, qmax]."""
    lo, hi = min(state[0], 0.0), max(state[1], 0.0)
    scale = max((hi - lo) / (qmax - qmin), _TINY_SCALE)
    zero_point = int(np.clip(qmin - np.round(lo / scale), qmin, qmax))
    return scale, zero_point


@dataclass(frozen=True)
class QuantSpec:
    weight_qmin: int = -127
    weight_qmax: int = 127
    act_qmin: int = 0
    act_qmax: int = 255
    averaging_constant: float = 0.01

    @classmethod
    def int32(cls) -> "QuantSpec":
        return cls(-(2 ** 31 - 1), 2 ** 31 - 1, 0, 2 ** 32 - 1)


class QATContext:
    """Fake-quantizes weights (symmetric) and layer outputs (affine) inside a model's forward.

    Observers update on every forward in training mode and are frozen in
    evaluation mode.
    """

    def __init__(self, qspec: QuantSpec = QuantSpec()):
        self.qspec = qspec
        self.ranges: dict = {}
        self.training = True

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def _range(self, key, x: Tensor):
        if self.training:
            self.ranges[key] = observe_moving_minmax(self.ranges.get(key), x.data, self.qspec.averaging_constant)
        return self.ranges.get(key)

    def weight(self, name: str, w: Tensor) -> Tensor:
        state = self._range(("w", name), w)
        if state is None:
            return w
        scale, zp = symmetric_qparams(state, self.qspec.weight_qmax)
        return fake_quantize(w, scale, zp, self.qspec.weight_qmin, self.qspec.weight_qmax)

    def act(self, name: str, x: Tensor) -> Tensor:
        state = self._range(("a", name), x)
        if state is None:
            return x
        scale, zp = affine_qparams(state, self.qspec.act_qmin, self.qspec.act_qmax)
        return fake_quantize(x, scale, zp, self.qspec.act_qmin, self.qspec.act_qmax)

    def state(self) -> dict:
        return dict(self.ranges)

    def load_state(self, state: dict):
        self.ranges = dict(state)


def qat_train(spec: ModelSpec, cfg: TrainConfig, seed: int, data: Benchmark,
              qspec: QuantSpec = QuantSpec()) -> RunRecord:
    """Train with fake quantization in the loop; test accuracy uses the frozen quantizers."""
    _, record = train_model(spec, cfg, seed, data, quant=QATContext(qspec))
    record.extras["precision"] = "int8" if qspec == QuantSpec() else "custom"
    return record


@dataclass
class QuantProfile:
    capacities: list
    fp32: list
    int8: list
    gap_pp: list

    def gap_at(self, capacity) -> float:
        return self.gap_pp[self.capacities.index(capacity)]

    def to_dict(self) -> dict:
        return {"capacities": list(self.capacities), "fp32": list(self.fp32),
                "int8": list(self.int8), "gap_pp": list(self.gap_pp)}


def _points(sweep):
    if hasattr(sweep, "capacities"):
        return list(sweep.capacities), list(sweep.mean)
    items = sorted(dict(sweep).items())
    return [c for c, _ in items], [a for _, a in items]


def quant_gap(fp32_sweep, qat_sweep) -> QuantProfile:
    """Per-capacity fp32 minus int8 mean accuracy, in percentage points (negative is legal)."""
    caps, fp = _points(fp32_sweep)
    caps_q, q8 = _points(qat_sweep)
    if caps != caps_q:
        raise ValueError(f"capacity grids differ: {caps} vs {caps_q}")
    gaps = [100.0 * (a - b) for a, b in zip(fp, q8)]
    return QuantProfile(caps, fp, q8, gaps)

"""Experiment plans, their expansion into seeded run descriptors, and
resumable parallel execution into a :class:`~minprof.store.ResultStore`.

Plan files are YAML documents::

    version: 1
    plan_id: mnist-dnn
    phase: SECOND_PHASE          # FIRST_PHASE | SECOND_PHASE | PRUNE | QUANT
    datasets: [mnist]
    families: [MLP]
    capacities: {MLP: [1, 2, 3, 5, 10, 20, 30, 50, 100, 200, 500, 1000]}
    hidden_layers: [1, 2, 3, 4]  # MLP depths; other families use 1
    repetitions: 30              # omitted: 30 for MLP, 10 otherwise
    base_seed: 0
    training: {epochs: 20, batch_size: 100, learning_rate: 0.001}
    prune_rates: [0.1, 0.2, ..., 1.0]
    subset: {train: 2000, test: 500}   # optional stratified subsample, either key
    thresholds: {tau_std: 0.02, delta: 0.02}
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .analysis import Thresholds
from .compression import DEFAULT_RATES, QuantSpec, prune_accuracies, qat_train
from .datasets import DATASET_NAMES, load_dataset, stratified_subsample
from .models import DEFAULT_GRIDS, FAMILIES, ModelSpec, enumerate_first_phase
from .rng import derive_seed
from .store import ResultStore, content_key
from .trainer import STATUS_FAILED, Benchmark, RunRecord, TrainConfig, train_model

log = logging.getLogger(__name__)

PLAN_VERSION = 1
PHASES = ("FIRST_PHASE", "SECOND_PHASE", "PRUNE", "QUANT")
QUANT_VARIANTS = ("fp32", "int8")
TOY_SUBSET = {"train": 2000, "test": 500}
TOY_REPETITIONS = 3
_TRAINING_KEYS = {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "validation_fraction"}


class PlanError(ValueError):
    """Invalid plan; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentPlan:
    plan_id: str
    phase: str
    datasets: list
    families: list
    capacities: dict = field(default_factory=dict)
    hidden_layers: list = field(default_factory=lambda: [1])
    repetitions: int | None = None
    base_seed: int = 0
    training: dict = field(default_factory=dict)
    prune_rates: list = field(default_factory=lambda: list(DEFAULT_RATES))
    subset: dict | None = None
    thresholds: dict = field(default_factory=dict)
    version: int = PLAN_VERSION

    def __post_init__(self):
        if self.version != PLAN_VERSION:
            raise PlanError("version", f"unsupported plan version {self.version}")
        if not self.plan_id or not isinstance(self.plan_id, str):
            raise PlanError("plan_id", "must be a non-empty string")
        if self.phase not in PHASES:
            raise PlanError("phase", f"must be one of {PHASES}, got {self.phase!r}")
        if not self.datasets:
            raise PlanError("datasets", "must list at least one dataset")
        for d in self.datasets:
            if d not in DATASET_NAMES:
                raise PlanError("datasets", f"unknown dataset {d!r}; known: {DATASET_NAMES}")
        if not self.families:
            raise PlanError("families", "must list at least one family")
        for f in self.families:
            if f not in FAMILIES:
                raise PlanError("families", f"unknown family {f!r}; known: {FAMILIES}")
        if self.phase == "FIRST_PHASE" and set(self.families) != {"MLP"}:
            raise PlanError("families", "FIRST_PHASE enumerates MLP topologies only")
        for f in self.capacities:
            if f not in FAMILIES:
                raise PlanError("capacities", f"unknown family {f!r}")
        self.capacities = {f: [int(c) for c in self.capacities.get(f, DEFAULT_GRIDS[f])] for f in self.families}
        for f, grid in self.capacities.items():
            if not grid:
                raise PlanError(f"capacities.{f}", "grid must not be empty")
            if any(c < 1 for c in grid) or len(set(grid)) != len(grid):
                raise PlanError(f"capacities.{f}", "grid needs distinct positive values")
        if not self.hidden_layers or any(not 1 <= int(d) <= 4 for d in self.hidden_layers):
            raise PlanError("hidden_layers", "depths must lie in 1..4")
        self.hidden_layers = [int(d) for d in self.hidden_layers]
        if self.repetitions is not None and int(self.repetitions) < 1:
            raise PlanError("repetitions", "must be positive")
        unknown = set(self.training) - _TRAINING_KEYS
        if unknown:
            raise PlanError("training", f"unknown key(s) {sorted(unknown)}")
        try:
            self.train_config()
        except ValueError as exc:
            raise PlanError("training", str(exc)) from exc
        rates = [float(r) for r in self.prune_rates]
        if not rates or any(b <= a for a, b in zip(rates, rates[1:])) or not (0 < rates[0] and rates[-1] <= 1):
            raise PlanError("prune_rates", "must be strictly increasing within (0, 1]")
        self.prune_rates = rates
        if self.subset is not None:
            if set(self.subset) - {"train", "test"}:
                raise PlanError("subset", "only 'train' and 'test' sizes are allowed")
            if any(int(v) < 1 for v in self.subset.values()):
                raise PlanError("subset", "sizes must be positive")
        try:
            Thresholds.from_dict(self.thresholds)
        except (TypeError, ValueError) as exc:
            raise PlanError("thresholds", str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(repetitions=self.repetitions, **self.training)

    def repetitions_for(self, family: str) -> int:
        return self.train_config().repetitions_for(family)

    def with_overrides(self, repetitions: int | None = None, toy: bool = False) -> "ExperimentPlan":
        plan = self
        if toy:
            plan = replace(plan, subset=dict(TOY_SUBSET), repetitions=TOY_REPETITIONS)
        if repetitions is not None:
            plan = replace(plan, repetitions=int(repetitions))
        return plan

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        if not isinstance(d, dict):
            raise PlanError("plan", "top level must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise PlanError(sorted(unknown)[0], "unknown plan field")
        for req in ("plan_id", "phase", "datasets", "families"):
            if req not in d:
                raise PlanError(req, "required field missing")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise PlanError("plan", f"cannot read {path}: {exc.strerror or exc}") from exc
        except yaml.YAMLError as exc:
            raise PlanError("plan", f"not valid YAML: {exc}") from exc
        return cls.from_dict(doc or {})

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


@dataclass(frozen=True)
class RunDescriptor:
    plan_id: str
    phase: str
    spec: ModelSpec
    seed: int
    repetition: int
    variant: str = ""

    @property
    def key(self) -> str:
        return content_key(self.plan_id, self.spec.identity(), self.seed, self.phase, self.variant)


def run_seed(base_seed: int, spec: ModelSpec, repetition: int) -> int:
    """Seed from the architecture and repetition index; phase and variant are left out so
    the same network is trained identically wherever it appears."""
    identity = json.dumps(spec.identity(), sort_keys=True)
    return derive_seed(base_seed, identity, repetition)


def _specs(plan: ExperimentPlan, dataset: str, family: str) -> list:
    grid = plan.capacities[family]
    if plan.phase == "FIRST_PHASE":
        return [s for depth in plan.hidden_layers for s in enumerate_first_phase(depth, dataset, grid)]
    depths = plan.hidden_layers if family == "MLP" else [1]
    return [ModelSpec(family, dataset, c, d) for d in depths for c in grid]


def expand_plan(plan: ExperimentPlan) -> list:
    """Deterministic, order-stable list of run descriptors covering the whole plan."""
    variants = QUANT_VARIANTS if plan.phase == "QUANT" else ("",)
    out = []
    for dataset in plan.datasets:
        for family in plan.families:
            reps = plan.repetitions_for(family)
            for spec in _specs(plan, dataset, family):
                for rep in range(reps):
                    seed = run_seed(plan.base_seed, spec, rep)
                    for variant in variants:
                        out.append(RunDescriptor(plan.plan_id, plan.phase, spec.with_seed(seed), seed, rep, variant))
    return out


# -- execution ------------------------------------------------------------------
@dataclass(frozen=True)
class RunContext:
    """Everything a worker needs besides the descriptor; must stay picklable."""

    data_dir: str | None
    training: dict
    prune_rates: tuple
    subset: tuple | None = None  # (train, test); None keeps the full split


_DATA_CACHE: dict = {}


def load_benchmark(dataset: str, data_dir=None, subset=None) -> Benchmark:
    key = (dataset, str(data_dir), tuple(subset) if subset else None)
    if key not in _DATA_CACHE:
        train = load_dataset(dataset, "train", data_dir)
        test = load_dataset(dataset, "test", data_dir)
        if subset and subset[0]:
            train = stratified_subsample(train, subset[0], seed=0)
        if subset and subset[1]:
            test = stratified_subsample(test, subset[1], seed=0)
        _DATA_CACHE.clear()  # one dataset resident per process
        _DATA_CACHE[key] = Benchmark(train, test)
    return _DATA_CACHE[key]


def check_data(plan: ExperimentPlan, data_dir=None):
    """Raise ``MissingDataError`` early when a plan's dataset is not cached."""
    for d in plan.datasets:
        load_benchmark(d, data_dir, _subset_tuple(plan.subset))


def _subset_tuple(subset):
    if not subset:
        return None
    return tuple(int(subset[k]) if subset.get(k) else None for k in ("train", "test"))


def execute(desc: RunDescriptor, ctx: RunContext) -> dict:
    """Train (and prune or quantize) one descriptor; returns a store entry."""
    data = load_benchmark(desc.spec.dataset, ctx.data_dir, ctx.subset)
    cfg = TrainConfig(**ctx.training)
    if desc.phase == "QUANT" and desc.variant == "int8":
        record = qat_train(desc.spec, cfg, desc.seed, data, QuantSpec())
    else:
        model, record = train_model(desc.spec, cfg, desc.seed, data)
        if desc.phase == "PRUNE":
            record.extras["prune"] = {"rates": list(ctx.prune_rates),
                                      "accuracy": prune_accuracies(model, ctx.prune_rates, data.test)}
        if desc.phase == "QUANT":
            record.extras["precision"] = "fp32"
    return make_entry(desc, record)


def make_entry(desc: RunDescriptor, record: RunRecord) -> dict:
    return {"key": desc.key, "plan_id": desc.plan_id, "phase": desc.phase, "variant": desc.variant,
            "repetition": desc.repetition, "record": record.to_dict()}


def failed_entry(desc: RunDescriptor, error: str) -> dict:
    record = RunRecord(spec=desc.spec, seed=desc.seed, status=STATUS_FAILED, extras={"error": error})
    if desc.variant:
        record.extras["precision"] = desc.variant
    return make_entry(desc, record)


def pending(plan: ExperimentPlan, store: ResultStore) -> list:
    return [d for d in expand_plan(plan) if d.key not in store]


def run_plan(plan: ExperimentPlan, store: ResultStore, workers: int = 1, data_dir=None,
             progress=None, runner=execute) -> dict:
    """Run every descriptor not yet stored. A failing run is retried once, then stored as FAILED.

    Returns counts ``{"total", "skipped", "completed", "failed"}``. ``progress``
    is called as ``progress(entry, done, todo)`` after each stored entry.
    """
    todo = pending(plan, store)
    total = len(expand_plan(plan))
    ctx = RunContext(None if data_dir is None else str(data_dir), dict(plan.training),
                     tuple(plan.prune_rates), _subset_tuple(plan.subset))
    stats = {"total": total, "skipped": total - len(todo), "completed": 0, "failed": 0}
    attempts = {d.key: 0 for d in todo}

    def record(desc, entry):
        store.insert(entry)
        if entry["record"]["status"] == STATUS_FAILED:
            stats["failed"] += 1
        else:
            stats["completed"] += 1
        if progress is not None:
            progress(entry, stats["completed"] + stats["failed"], len(todo))

    def on_error(desc, exc) -> bool:
        attempts[desc.key] += 1
        if attempts[desc.key] < 2:
            log.warning("run %s failed (%s); retrying", desc.key[:12], exc)
            return True
        record(desc, failed_entry(desc, f"{type(exc).__name__}: {exc}"))
        return False

    if workers <= 1:
        queue = list(todo)
        while queue:
            desc = queue.pop(0)
            try:
                entry = runner(desc, ctx)
            except Exception as exc:  # noqa: BLE001 - any worker error is recorded
                if on_error(desc, exc):
                    queue.insert(0, desc)
                continue
            record(desc, entry)
        return stats

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(runner, d, ctx): d for d in todo}
        try:
            while futures:
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for fut in done:
                    desc = futures.pop(fut)
                    exc = fut.exception()
                    if exc is None:
                        record(desc, fut.result())
                    elif on_error(desc, exc):
                        futures[pool.submit(runner, desc, ctx)] = desc
        except BaseException:
            pool.shutdown(wait=False, cancel_futures=True)
            raise
    return stats


# -- querying -------------------------------------------------------------------
_FILTER_KEYS = {"dataset", "family", "phase", "plan_id", "variant", "hidden_layers", "capacity", "status"}


def query(store: ResultStore, flt: dict | None = None) -> list:
    """Entries matching ``flt`` sorted by (capacity, seed).

    Filter keys: dataset, family, phase, plan_id, variant, hidden_layers,
    status (exact match) and capacity, given either as an exact value or an
    inclusive ``[lo, hi]`` range.
    """
    flt = dict(flt or {})
    unknown = set(flt) - _FILTER_KEYS
    if unknown:
        raise ValueError(f"unknown filter key(s): {sorted(unknown)}")
    cap = flt.pop("capacity", None)
    if cap is not None and not isinstance(cap, int):
        if not (isinstance(cap, (list, tuple)) and len(cap) == 2 and all(isinstance(v, (int, float)) for v in cap)):
            raise ValueError("capacity filter must be a number or a [lo, hi] pair")
        if cap[0] > cap[1]:
            raise ValueError("capacity range needs lo <= hi")

    def matches(e: dict) -> bool:
        spec = e["record"]["spec"]
        fields = {"dataset": spec["dataset"], "family": spec["family"], "hidden_layers": spec["hidden_layers"],
                  "phase": e["phase"], "plan_id": e["plan_id"], "variant": e["variant"],
                  "status": e["record"]["status"]}
        if any(fields[k] != v for k, v in flt.items()):
            return False
        c = spec["capacity"]
        if cap is None:
            return True
        return c == cap if isinstance(cap, int) else cap[0] <= c <= cap[1]

    hits = [e for e in store.entries() if matches(e)]
    return sorted(hits, key=lambda e: (e["record"]["spec"]["capacity"], e["record"]["seed"]))

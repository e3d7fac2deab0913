"""Characterise sweep records: learning regimes, minimal stable parameter
count, safe pruning ratio, pruning phases, and the 8-bit gap summary table."""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .compression import PruneProfile, QuantProfile, profile_from_accuracies, quant_gap
from .models import ModelSpec
from .trainer import STATUS_DIVERGED, STATUS_FAILED, RunRecord

UNSTABLE = "UNSTABLE"
LEARNING = "LEARNING"
OVERFITTING = "OVERFITTING"
NOT_STABLE = "NOT_STABLE"
REDUNDANT = "REDUNDANT"
TRANSITION = "TRANSITION"
COLLAPSED = "COLLAPSED"
NA = "N/A"

CHANCE = 0.1
TABLE_COLUMNS = ("dataset", "architecture", "min_params_stability", "safe_pruning_pct", "gap_8bit_pct")
FAMILY_LABELS = {"MLP": "DNN", "CNN": "CNN", "VIT": "ViT"}


@dataclass
class Thresholds:
    tau_std: float = 0.02
    tau_gain: float = 0.005
    tau_overfit: float = 0.01
    delta: float = 0.02
    plateau_margin: float = 0.02

    @classmethod
    def from_dict(cls, d: dict | None) -> "Thresholds":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown threshold(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class SweepResult:
    family: str
    dataset: str
    capacities: list
    param_counts: list
    mean: list
    std: list
    diverged_fraction: list = field(default_factory=list)
    gap_mean: list = field(default_factory=list)
    hidden_layers: int = 1
    n_runs: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.capacities)
        if any(b <= a for a, b in zip(self.capacities, self.capacities[1:])):
            raise ValueError("capacity points must be strictly increasing")
        if any(s < 0 for s in self.std):
            raise ValueError("standard deviations must be non-negative")
        self.diverged_fraction = list(self.diverged_fraction) or [0.0] * n
        self.gap_mean = list(self.gap_mean) or [0.0] * n
        self.n_runs = list(self.n_runs) or [0] * n

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sweep_from_records(records) -> SweepResult:
    """Aggregate runs of one (dataset, family, depth) cell across seeds, per capacity."""
    records = [r for r in records if r.status != STATUS_FAILED]
    if not records:
        raise ValueError("no usable records")
    by_cap = defaultdict(list)
    for r in records:
        by_cap[r.spec.capacity].append(r)
    caps = sorted(by_cap)
    first = records[0].spec
    acc = [np.array([r.test_accuracy for r in by_cap[c]]) for c in caps]
    return SweepResult(
        family=first.family, dataset=first.dataset, capacities=caps,
        param_counts=[int(round(np.mean([r.param_count for r in by_cap[c]]))) for c in caps],
        mean=[float(a.mean()) for a in acc], std=[float(a.std()) for a in acc],
        diverged_fraction=[float(np.mean([r.status == STATUS_DIVERGED for r in by_cap[c]])) for c in caps],
        gap_mean=[float(np.mean([r.train_test_gap for r in by_cap[c]])) for c in caps],
        hidden_layers=first.hidden_layers, n_runs=[len(by_cap[c]) for c in caps],
    )


# -- regimes ----------------------------------------------------------------------
def detect_regimes(sr: SweepResult, tau_std: float = 0.02, tau_gain: float = 0.005,
                   tau_overfit: float = 0.01, plateau_margin: float = 0.02) -> list[str]:
    """Label capacity points UNSTABLE -> LEARNING -> OVERFITTING.

    A point is stable when its cross-seed std is at most ``tau_std`` and its
    mean is within ``plateau_margin`` of the best mean. Everything before the
    first stable point is UNSTABLE. From there on points are LEARNING until the
    mean falls more than ``tau_overfit`` below the running maximum while the
    train-test gap has grown by more than ``tau_gain`` over the gap at that
    maximum; that point and all later ones are OVERFITTING.
    """
    n = len(sr.capacities)
    if n < 3:
        raise ValueError(f"regime detection needs at least 3 capacity points, got {n}")
    mean, std, gap = sr.mean, sr.std, sr.gap_mean
    plateau = max(mean)
    stable = [s <= tau_std and m >= plateau - plateau_margin for m, s in zip(mean, std)]
    if not any(stable):
        return [UNSTABLE] * n
    start = stable.index(True)
    labels = [UNSTABLE] * start + [LEARNING]
    best, best_gap = mean[start], gap[start]
    overfit = False
    for i in range(start + 1, n):
        if not overfit and best - mean[i] > tau_overfit and gap[i] > best_gap + tau_gain:
            overfit = True
        labels.append(OVERFITTING if overfit else LEARNING)
        if mean[i] > best:
            best, best_gap = mean[i], gap[i]
    return labels


def round_sig(x: float, digits: int = 1) -> float:
    if x == 0:
        return 0.0
    return float(round(x, -int(math.floor(math.log10(abs(x)))) + digits - 1))


def min_stable_params(sr: SweepResult, labels) -> int | str:
    """Parameter count of the first LEARNING point, or ``NOT_STABLE``."""
    for count, label in zip(sr.param_counts, labels):
        if label == LEARNING:
            return int(count)
    return NOT_STABLE


# -- pruning ----------------------------------------------------------------------
def safe_pruning_pct(pp: PruneProfile, delta: float = 0.02) -> int:
    """Largest grid rate whose mean accuracy stays within ``delta`` of the baseline, in percent."""
    safe = [r for r, m in zip(pp.rates, pp.mean) if m >= pp.baseline - delta - 1e-12]
    return int(round(100 * max(safe))) if safe else 0


def pruning_phases(pp: PruneProfile, delta: float = 0.02, chance: float = CHANCE) -> dict:
    """Split the rate grid into REDUNDANT / TRANSITION / COLLAPSED bands by first crossings."""
    n = len(pp.rates)
    first_drop = next((i for i, m in enumerate(pp.mean) if m < pp.baseline - delta - 1e-12), n)
    first_collapse = next((i for i, m in enumerate(pp.mean) if m <= chance + 0.05), n)
    first_collapse = max(first_collapse, first_drop)
    return {
        REDUNDANT: list(pp.rates[:first_drop]),
        TRANSITION: list(pp.rates[first_drop:first_collapse]),
        COLLAPSED: list(pp.rates[first_collapse:]),
    }


# -- reports ----------------------------------------------------------------------
@dataclass
class RegimeReport:
    dataset: str
    family: str
    hidden_layers: int = 1
    capacities: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    min_stable_params_raw: int | str | None = None
    safe_pruning_pct: int | None = None
    pruning_bands: dict | None = None
    gap_8bit_pp: float | None = None

    @property
    def min_stable_params(self):
        raw = self.min_stable_params_raw
        return round_sig(raw) if isinstance(raw, int) else raw

    def row(self) -> dict:
        def fmt(v, f):
            return NA if v is None else (v if isinstance(v, str) else f(v))

        return {
            "dataset": self.dataset,
            "architecture": FAMILY_LABELS.get(self.family, self.family),
            "min_params_stability": fmt(self.min_stable_params, lambda v: f"{v:.0e}".replace("e+0", "e")),
            "safe_pruning_pct": fmt(self.safe_pruning_pct, str),
            "gap_8bit_pct": fmt(self.gap_8bit_pp, lambda v: f"{v:.2f}"),
        }

    def complete(self) -> bool:
        return None not in (self.min_stable_params_raw, self.safe_pruning_pct, self.gap_8bit_pp)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "family": self.family, "hidden_layers": self.hidden_layers,
                "capacities": self.capacities, "labels": self.labels,
                "min_stable_params_raw": self.min_stable_params_raw,
                "min_stable_params": self.min_stable_params, "safe_pruning_pct": self.safe_pruning_pct,
                "pruning_bands": self.pruning_bands, "gap_8bit_pp": self.gap_8bit_pp}


def summarize_table(reports) -> list[dict]:
    """One row per (dataset, family) cell; missing analyses become N/A with a warning."""
    rows = []
    for rep in reports:
        if not rep.complete():
            warnings.warn(f"incomplete analysis for {rep.dataset}/{rep.family}; missing cells reported as {NA}",
                          stacklevel=2)
        rows.append(rep.row())
    return rows


def table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def table_text(rows) -> str:
    widths = {c: max([len(c)] + [len(str(r[c])) for r in rows]) for c in TABLE_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in TABLE_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in TABLE_COLUMNS))
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in TABLE_COLUMNS) for r in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


# -- assembling reports from stored run records ----------------------------------------
def _cell_key(spec: ModelSpec):
    return spec.dataset, spec.family


def group_sweeps(records) -> dict:
    """``{(dataset, family, hidden_layers): SweepResult}`` over uniform-shape runs."""
    groups = defaultdict(list)
    for r in records:
        if any(p.value != "equal" for p in r.spec.shape_pattern):
            continue
        groups[(r.spec.dataset, r.spec.family, r.spec.hidden_layers)].append(r)
    return {k: sweep_from_records(v) for k, v in sorted(groups.items())}


def prune_profiles(records) -> dict:
    """``{(dataset, family, hidden_layers, capacity): PruneProfile}`` from runs carrying prune results."""
    groups = defaultdict(list)
    for r in records:
        if "prune" in r.extras and r.status != STATUS_FAILED:
            s = r.spec
            groups[(s.dataset, s.family, s.hidden_layers, s.capacity)].append(r)
    out = {}
    for key, runs in sorted(groups.items()):
        rates = runs[0].extras["prune"]["rates"]
        out[key] = profile_from_accuracies(runs[0].spec, rates, [r.test_accuracy for r in runs],
                                           [r.extras["prune"]["accuracy"] for r in runs])
    return out


def analyze_records(phase_records: dict, th: Thresholds = Thresholds()) -> list[RegimeReport]:
    """Build one report per (dataset, family) from records keyed by phase name.

    Convergence cells come from SECOND_PHASE (or FIRST_PHASE) runs at the deepest
    depth present; safe pruning from the deepest, widest stable PRUNE profile;
    the 8-bit gap from QUANT runs at the minimal stable capacity.
    """
    conv = list(phase_records.get("SECOND_PHASE", [])) or list(phase_records.get("FIRST_PHASE", []))
    prune = list(phase_records.get("PRUNE", []))
    quant = list(phase_records.get("QUANT", []))
    cells = sorted({_cell_key(r.spec) for r in conv + prune + quant})
    sweeps = group_sweeps(conv)
    profiles = prune_profiles(prune)
    reports = []
    for dataset, family in cells:
        rep = RegimeReport(dataset, family)
        depths = sorted(d for (ds, fam, d) in sweeps if (ds, fam) == (dataset, family))
        stable_caps = set()
        if depths:
            sr = sweeps[(dataset, family, depths[-1])]
            rep.hidden_layers = depths[-1]
            rep.capacities = list(sr.capacities)
            if len(sr.capacities) >= 3:
                rep.labels = detect_regimes(sr, th.tau_std, th.tau_gain, th.tau_overfit, th.plateau_margin)
                rep.min_stable_params_raw = min_stable_params(sr, rep.labels)
                stable_caps = {c for c, lab in zip(sr.capacities, rep.labels) if lab == LEARNING}
        cell_profiles = {k: v for k, v in profiles.items() if k[:2] == (dataset, family)}
        if cell_profiles:
            ranked = sorted(cell_profiles, key=lambda k: (k[3] in stable_caps or not stable_caps, k[2], k[3]))
            pp = cell_profiles[ranked[-1]]
            rep.safe_pruning_pct = safe_pruning_pct(pp, th.delta)
            rep.pruning_bands = pruning_phases(pp, th.delta)
        qp, anchor = quant_profile(quant, dataset, family, th)
        if qp is not None and anchor is not None:
            rep.gap_8bit_pp = qp.gap_at(anchor)
        reports.append(rep)
    return reports


def quant_profile(quant_records, dataset: str, family: str, th: Thresholds = Thresholds()):
    """QuantProfile for one cell plus the capacity its summary gap is taken at."""
    runs = [r for r in quant_records if _cell_key(r.spec) == (dataset, family)]
    fp32 = [r for r in runs if r.extras.get("precision") == "fp32"]
    int8 = [r for r in runs if r.extras.get("precision") == "int8"]
    if not fp32 or not int8:
        return None, None
    depth = max(r.spec.hidden_layers for r in fp32)
    sf = sweep_from_records([r for r in fp32 if r.spec.hidden_layers == depth])
    sq = sweep_from_records([r for r in int8 if r.spec.hidden_layers == depth])
    common = sorted(set(sf.capacities) & set(sq.capacities))
    fp = {c: m for c, m in zip(sf.capacities, sf.mean) if c in common}
    q8 = {c: m for c, m in zip(sq.capacities, sq.mean) if c in common}
    qp = quant_gap(fp, q8)
    anchor = None
    if len(sf.capacities) >= 3:
        labels = detect_regimes(sf, th.tau_std, th.tau_gain, th.tau_overfit, th.plateau_margin)
        anchor = next((c for c, lab in zip(sf.capacities, labels) if lab == LEARNING and c in common), None)
    elif len(common) == 1:
        anchor = common[0]
    return qp, anchor


def records_by_phase(entries) -> dict:
    """Split store entries (dicts with ``phase`` and ``record``) into RunRecords per phase."""
    out = defaultdict(list)
    for e in entries:
        if e.get("record") is not None:
            out[e["phase"]].append(RunRecord.from_dict(e["record"]))
    return dict(out)

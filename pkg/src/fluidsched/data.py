"""Appointment data: ingestion, empirical models and paired policy comparison."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy import stats

from .distributions import Empirical, UnpunctualityModel, service_for_rate
from .fluid import Costs, FluidProblem, Grid, zu_control
from .qp import assemble_qp, recover_control, solve
from .scheduling import DegenerateDayError, Schedule, extract_schedule, normalize_day
from .simulation import draw, replication_rngs, simulate_draws

log = logging.getLogger(__name__)

HEADER = ("clinic_id", "doctor_id", "day_id", "scheduled", "arrived")


class DataError(ValueError):
    """Input data that cannot be used as given."""


@dataclass(frozen=True)
class AppointmentRecord:
    clinic_id: str
    doctor_id: str
    day_id: str
    scheduled: float  # hours
    arrived: float

    @property
    def unpunctuality(self) -> float:
        return self.arrived - self.scheduled


@dataclass
class IngestReport:
    records: list[AppointmentRecord]
    skipped: list[tuple[int, str]] = field(default_factory=list)


def _timestamp_kind(text: str) -> str:
    try:
        float(text)
        return "hours"
    except ValueError:
        pass
    try:
        datetime.fromisoformat(text)
        return "iso"
    except ValueError:
        raise ValueError(f"unparseable timestamp {text!r}") from None


def _parse_timestamp(text: str, kind: str) -> float:
    if kind == "hours":
        v = float(text)
    else:
        dt = datetime.fromisoformat(text)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        v = dt.timestamp() / 3600.0
    if not math.isfinite(v):
        raise ValueError(f"non-finite timestamp {text!r}")
    return v


def ingest(source, strict: bool = False) -> IngestReport:
    """Read appointment records from a CSV path or file object.

    Timestamps are decimal hours or ISO-8601; each column's format is fixed
    by the first data row, and a later row in the other format is fatal.
    Other malformed rows are skipped and reported, or fatal when ``strict``.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return ingest(io.StringIO(fh.read()), strict)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != HEADER:
        raise DataError(f"expected header {','.join(HEADER)}, got {header!r}")
    kinds: dict[str, str] = {}
    report = IngestReport([])
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) != len(HEADER):
                raise ValueError(f"expected {len(HEADER)} fields, got {len(row)}")
            cells = [c.strip() for c in row]
            if not all(cells[:3]):
                raise ValueError("empty identifier")
            stamps = []
            for name, text in zip(HEADER[3:], cells[3:]):
                if not text:
                    raise ValueError(f"{name} is blank")
                kind = _timestamp_kind(text)
                locked = kinds.setdefault(name, kind)
                if kind != locked:
                    raise DataError(f"line {line_no}: {name} is {kind} but the column "
                                    f"format is {locked}")
                stamps.append(_parse_timestamp(text, kind))
        except DataError:
            raise
        except ValueError as exc:
            if strict:
                raise DataError(f"line {line_no}: {exc}") from exc
            report.skipped.append((line_no, str(exc)))
            continue
        report.records.append(AppointmentRecord(*cells[:3], *stamps))
    if report.skipped:
        log.warning("skipped %d malformed rows", len(report.skipped))
    return report


@dataclass(frozen=True)
class Day:
    key: tuple[str, str, str]
    times: np.ndarray  # normalized, sorted
    unpunctuality: np.ndarray  # normalized, paired with times

    @property
    def m(self) -> int:
        return int(self.times.size)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.times, 1.0)


@dataclass
class EmpiricalData:
    model: Empirical
    days: list[Day]
    excluded: list[tuple[tuple[str, str, str], str]] = field(default_factory=list)


def group_days(records, clinic=None, doctor=None):
    days: OrderedDict[tuple, list[AppointmentRecord]] = OrderedDict()
    for r in records:
        if clinic is not None and r.clinic_id != clinic:
            continue
        if doctor is not None and r.doctor_id != doctor:
            continue
        days.setdefault((r.clinic_id, r.doctor_id, r.day_id), []).append(r)
    return days


def build_empirical(records, clinic=None, doctor=None, min_patients_per_day: int = 60,
                    bucket_edges=None) -> EmpiricalData:
    """Normalize qualifying days and pool their unpunctualities."""
    groups = group_days(records, clinic, doctor)
    if not groups:
        raise DataError("no records left after filtering")
    days, excluded = [], []
    for key, recs in groups.items():
        if len(recs) < min_patients_per_day:
            excluded.append((key, f"{len(recs)} patients < {min_patients_per_day}"))
            continue
        try:
            t, u = normalize_day([r.scheduled for r in recs], [r.arrived for r in recs])
        except DegenerateDayError as exc:
            excluded.append((key, str(exc)))
            continue
        order = np.argsort(t, kind="stable")
        days.append(Day(key, t[order], u[order]))
    if not days:
        raise DataError("no day qualifies")
    values = np.concatenate([d.unpunctuality for d in days])
    if bucket_edges is None:
        model = Empirical(values)
    else:
        model = Empirical(values, np.concatenate([d.times for d in days]), tuple(bucket_edges))
    return EmpiricalData(model, days, excluded)


def bonferroni_ci(samples, family_size: int = 1, level: float = 0.95):
    """Per-column mean and Student-t half-width at the Bonferroni-adjusted level.

    Returns ``(mean, half_width)`` arrays.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two observations per column")
    if family_size < 1:
        raise ValueError("family size must be at least 1")
    adjusted = 1 - (1 - level) / family_size
    q = stats.t.ppf(0.5 + adjusted / 2, n - 1)
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    return mean, q * sd / math.sqrt(n)


# ---------------------------------------------------------------------------
# paired comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompareSettings:
    c_i: tuple[float, ...] = (50.0, 75.0, 100.0, 150.0)
    overtime_ratio: float = 1.5
    r: float = 0.0
    c_w: float = 1.0
    service: str = "deterministic"
    log_sd: float = 2.0
    replications: int = 50
    seed: int = 0
    K: int = 200
    reference_mu: float | None = None
    policies: tuple[str, ...] = ("Actual", "ZU", "QP")
    level: float = 0.95
    family_size: int | None = None
    tol: float = 1e-8

    def costs(self, c_i: float) -> Costs:
        return Costs(self.r, self.c_w, c_i, self.overtime_ratio * c_i)


@dataclass
class ComparisonRow:
    c_i: float
    cost_mean: dict[str, float]
    cost_hw: dict[str, float]
    improvement_mean: dict[str, float]
    improvement_hw: dict[str, float]


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    policies: tuple[str, ...]
    family_size: int
    level: float
    # (day index, policy, c_i) -> per-replication costs
    replications: dict = field(repr=False, default_factory=dict)

    def day_costs(self, policy: str, c_i: float) -> np.ndarray:
        """Mean cost per day, in day order."""
        n_days = 1 + max(d for d, _, _ in self.replications)
        return np.array([np.mean(self.replications[(d, policy, c_i)]) for d in range(n_days)])

    def paired(self, policy: str, other: str, c_i: float, level: float = 0.95):
        """Mean and half-width of the per-day cost difference ``policy - other``."""
        diff = self.day_costs(policy, c_i) - self.day_costs(other, c_i)
        m, h = bonferroni_ci(diff, 1, level)
        return float(m[0]), float(h[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["c_i"]
            for p in self.policies:
                head += [f"{p}_cost", f"{p}_cost_hw"]
                if p != "Actual":
                    head += [f"{p}_rel_imp", f"{p}_rel_imp_hw"]
            w.writerow(head)
            for row in self.rows:
                out = [repr(row.c_i)]
                for p in self.policies:
                    out += [repr(row.cost_mean[p]), repr(row.cost_hw[p])]
                    if p != "Actual":
                        out += [repr(row.improvement_mean[p]), repr(row.improvement_hw[p])]
                w.writerow(out)

    def to_text(self) -> str:
        cols = ["c_i"]
        for p in self.policies:
            cols.append(p)
            if p != "Actual":
                cols.append(f"{p} rel. imp. (%)")
        lines = [[f"{row.c_i:g}"] + sum(
            ([f"{row.cost_mean[p]:.2f} ± {row.cost_hw[p]:.2f}"]
             + ([] if p == "Actual" else
                [f"{row.improvement_mean[p]:.2f} ± {row.improvement_hw[p]:.2f}"])
             for p in self.policies), []) for row in self.rows]
        widths = [max(len(c), *(len(r[i]) for r in lines)) for i, c in enumerate(cols)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [fmt.format(*cols), fmt.format(*("-" * w for w in widths))]
        out += [fmt.format(*r) for r in lines]
        pct = 100 * self.level
        out.append(f"intervals: {pct:g}% Bonferroni simultaneous, family size {self.family_size}")
        return "\n".join(out) + "\n"

    def write_replications(self, path, days: list[Day]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clinic_id", "doctor_id", "day_id", "policy", "c_i", "rep", "cost"])
            for (d, p, c_i), costs in self.replications.items():
                for rep, v in enumerate(costs):
                    w.writerow([*days[d].key, p, repr(c_i), rep, repr(float(v))])


class PolicyBuilder:
    """Schedules of a given size for the ZU and QP policies.

    One QP per cost level is solved at a reference capacity (by default the
    median day size); a day with ``m`` patients gets the optimal profile
    scaled to mass ``m``.
    """

    def __init__(self, model: UnpunctualityModel, settings: CompareSettings,
                 reference_mu: float = 100.0):
        self.model = model
        self.settings = settings
        self.mu = settings.reference_mu or reference_mu
        self.grid = Grid(settings.K)
        self._qp: dict[float, np.ndarray] = {}

    def control(self, policy: str, c_i: float) -> np.ndarray:
        s = self.settings
        problem = FluidProblem(self.mu, 1.0, s.costs(c_i), self.model)
        if policy == "ZU":
            return zu_control(problem, self.grid)
        if policy == "QP":
            if c_i not in self._qp:
                sol = solve(assemble_qp(problem, self.grid), s.tol, s.tol)
                self._qp[c_i] = recover_control(sol).a
            return self._qp[c_i]
        raise ValueError(f"unknown policy {policy!r}")

    def schedule(self, policy: str, day: Day, c_i: float) -> Schedule:
        # "X@label" is a second copy of policy X, for sanity comparisons
        policy = policy.split("@", 1)[0]
        if policy == "Actual":
            return day.schedule
        a = self.control(policy, c_i)
        sched = extract_schedule(a, self.grid, day.m / a.sum())
        if sched.m != day.m:
            raise DataError(f"{policy} schedule has {sched.m} patients, day has {day.m}")
        return sched


def compare_policies(days: list[Day], model: UnpunctualityModel,
                     settings: CompareSettings | None = None) -> ComparisonTable:
    """Paired comparison of scheduling policies with common random numbers.

    Every policy on a day sees the same unpunctuality uniforms (by patient
    index) and the same service times (by service order).  Costs are
    reported as positive numbers; the relative improvement of a policy on a
    day is ``(Actual - policy) / |Actual| * 100`` on mean costs.
    """
    s = settings or CompareSettings()
    if len(days) < 2:
        raise DataError("a paired comparison needs at least two days")
    builder = PolicyBuilder(model, s, float(np.median([d.m for d in days])))
    policies = tuple(s.policies)
    if "Actual" not in policies:
        raise ValueError("the Actual policy is the baseline and must be included")
    if len(set(policies)) != len(policies):
        raise ValueError("policy names must be unique; use 'X@label' for a second copy of X")
    n_cells = len(policies) + (len(policies) - 1)
    family = s.family_size or n_cells * len(s.c_i)
    day_rngs = np.random.SeedSequence(s.seed).spawn(len(days))
    per_day: dict[tuple[int, str, float], float] = {}
    reps: dict[tuple[int, str, float], np.ndarray] = {}
    for d, day in enumerate(days):
        svc = service_for_rate(s.service, day.m, s.log_sd)
        seed = int(day_rngs[d].generate_state(1)[0])
        rngs, _ = replication_rngs(seed, s.replications)
        draws = [draw(day.m, svc, rng) for rng in rngs]
        for c_i in s.c_i:
            costs = s.costs(c_i)
            for p in policies:
                sched = builder.schedule(p, day, c_i)
                vals = np.array([-simulate_draws(sched, model, dr, costs).objective
                                 for dr in draws])
                reps[(d, p, c_i)] = vals
                per_day[(d, p, c_i)] = float(np.mean(vals))
    rows = []
    for c_i in s.c_i:
        base = np.array([per_day[(d, "Actual", c_i)] for d in range(len(days))])
        cost_mean, cost_hw, imp_mean, imp_hw = {}, {}, {}, {}
        for p in policies:
            v = np.array([per_day[(d, p, c_i)] for d in range(len(days))])
            m, h = bonferroni_ci(v, family, s.level)
            cost_mean[p], cost_hw[p] = float(m[0]), float(h[0])
            if p != "Actual":
                imp = (base - v) / np.abs(base) * 100
                m, h = bonferroni_ci(imp, family, s.level)
                imp_mean[p], imp_hw[p] = float(m[0]), float(h[0])
        rows.append(ComparisonRow(float(c_i), cost_mean, cost_hw, imp_mean, imp_hw))
    return ComparisonTable(rows, policies, family, s.level, reps)


def synthetic_records(model: UnpunctualityModel, days: int, patients: int, seed: int,
                      start: float = 8.0, end: float = 17.0, clinic: str = "c0",
                      doctor: str = "d0") -> list[AppointmentRecord]:
    """Evenly spaced appointments with unpunctuality drawn from ``model``.

    The model is in normalized-day units; draws are scaled by the day length.
    """
    rng = np.random.default_rng(seed)
    span = end - start
    out = []
    for d in range(days):
        a = np.linspace(0.0, 1.0, patients)
        u = model.sample(a, rng)
        for ai, ui in zip(a, u):
            out.append(AppointmentRecord(clinic, doctor, f"day{d:03d}", start + span * ai,
                                         start + span * (ai + ui)))
    return out


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow([r.clinic_id, r.doctor_id, r.day_id, repr(float(r.scheduled)),
                        repr(float(r.arrived))])


__all__ = ["AppointmentRecord", "CompareSettings", "ComparisonRow", "ComparisonTable",
           "DataError", "Day", "EmpiricalData", "IngestReport", "PolicyBuilder",
           "bonferroni_ci", "build_empirical", "compare_policies", "group_days", "ingest",
           "synthetic_records", "write_records"]

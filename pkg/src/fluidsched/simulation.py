"""Monte Carlo evaluation of a schedule on the single-server clinic model.

Patients arrive at ``a_i + U_i``; anyone arriving after the horizon is
turned away.  Admitted patients are served first come, first served from
time 0 on.  Per replication we record the admissions, the waiting integral
``int_0^inf Q(t) dt`` (counting patients in service), idle time within the
horizon, and overtime past it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .distributions import ServiceModel, UnpunctualityModel, service_for_rate
from .fluid import Costs, Discretization, FluidProblem, Grid, fluid_objective
from .scheduling import Schedule, extract_schedule


@dataclass(frozen=True)
class SimOutcome:
    admitted: int
    wait_integral: float
    idle: float
    overtime: float
    objective: float

    @classmethod
    def from_parts(cls, admitted, wait, idle, overtime, costs: Costs) -> "SimOutcome":
        obj = costs.r * admitted - costs.c_w * wait - costs.c_i * idle - costs.c_o * overtime
        return cls(int(admitted), float(wait), float(idle), float(overtime), float(obj))


@dataclass(frozen=True)
class Draws:
    """Randomness for one replication.

    ``uniforms[i]`` drives the unpunctuality of the i-th scheduled patient
    through the quantile function at that patient's appointment time;
    ``services[j]`` is the service time of the j-th patient to be served.
    Keeping these fixed across schedules of the same size gives common
    random numbers.
    """

    uniforms: np.ndarray
    services: np.ndarray


def draw(m: int, svc: ServiceModel, rng: np.random.Generator) -> Draws:
    u = rng.random(m)
    s = np.asarray(svc.sample(rng, m), dtype=float)
    return Draws(u, s)


@dataclass(frozen=True)
class SamplePath:
    """Admitted patients in service order."""

    arrivals: np.ndarray  # actual arrival times, possibly negative
    starts: np.ndarray
    completions: np.ndarray
    horizon: float


def sample_path(schedule: Schedule, unp: UnpunctualityModel, draws: Draws) -> SamplePath:
    T = schedule.horizon
    m = schedule.m
    if draws.uniforms.size != m or draws.services.size != m:
        raise ValueError(f"draws sized for {draws.uniforms.size} patients, schedule has {m}")
    if m == 0:
        empty = np.zeros(0)
        return SamplePath(empty, empty, empty, T)
    arrivals = schedule.times + unp.quantile(draws.uniforms, schedule.times)
    # stable sort: ties keep patient index order
    arrivals = np.sort(arrivals, kind="stable")
    arrivals = arrivals[arrivals <= T]
    n = arrivals.size
    nu = draws.services[:n]
    ready = np.maximum(arrivals, 0.0)
    # C_j = max(ready_j, C_{j-1}) + nu_j unrolls to
    # C_j = S_j + max_{i<=j} (ready_i - S_{i-1}) with S the partial sums of nu
    S = np.cumsum(nu)
    S_prev = np.concatenate(([0.0], S[:-1]))
    completions = S + np.maximum.accumulate(ready - S_prev)
    starts = np.maximum(ready, np.concatenate(([-np.inf], completions[:-1])))
    completions = np.maximum(completions, starts + nu)
    return SamplePath(arrivals, starts, completions, T)


def outcome(path: SamplePath, costs: Costs) -> SimOutcome:
    T = path.horizon
    n = path.arrivals.size
    if n == 0:
        return SimOutcome.from_parts(0, 0.0, T, 0.0, costs)
    wait = float(np.sum(path.completions - np.maximum(path.arrivals, 0.0)))
    busy = float(np.sum(np.minimum(path.completions, T) - np.minimum(path.starts, T)))
    idle = min(max(T - busy, 0.0), T)
    overtime = max(0.0, float(path.completions[-1]) - T)
    return SimOutcome.from_parts(n, wait, idle, overtime, costs)


def simulate_draws(schedule: Schedule, unp: UnpunctualityModel, draws: Draws,
                   costs: Costs) -> SimOutcome:
    return outcome(sample_path(schedule, unp, draws), costs)


def simulate_once(schedule: Schedule, unp: UnpunctualityModel, svc: ServiceModel,
                  costs: Costs, seed) -> SimOutcome:
    rng = np.random.default_rng(seed)
    return simulate_draws(schedule, unp, draw(schedule.m, svc, rng), costs)


def t_half_width(x, level: float = 0.95) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two observations for a confidence interval")
    sd = float(np.std(x, ddof=1))
    return float(stats.t.ppf(0.5 + level / 2, x.size - 1)) * sd / math.sqrt(x.size)


@dataclass
class ReplicationReport:
    outcomes: list[SimOutcome]
    seeds: list[str]
    level: float = 0.95
    draws: list[Draws] | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(o, name) for o in self.outcomes], dtype=float)

    @property
    def mean(self) -> float:
        return float(np.mean(self.column("objective")))

    @property
    def sd(self) -> float:
        return float(np.std(self.column("objective"), ddof=1))

    @property
    def half_width(self) -> float:
        return t_half_width(self.column("objective"), self.level)

    def summary(self) -> dict:
        out = {"replications": len(self.outcomes), "level": self.level,
               "objective_mean": self.mean, "objective_sd": self.sd,
               "objective_half_width": self.half_width}
        for name in ("admitted", "wait_integral", "idle", "overtime"):
            out[f"{name}_mean"] = float(np.mean(self.column(name)))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "admitted", "wait_integral", "idle", "overtime", "objective",
                        "seed"])
            for i, (o, s) in enumerate(zip(self.outcomes, self.seeds)):
                w.writerow([i, o.admitted, repr(o.wait_integral), repr(o.idle),
                            repr(o.overtime), repr(o.objective), s])


def replication_rngs(base_seed: int, replications: int):
    """Independent generators split from one seed, with printable labels."""
    children = np.random.SeedSequence(base_seed).spawn(replications)
    return ([np.random.default_rng(c) for c in children],
            [f"{base_seed}/{i}" for i in range(replications)])


def simulate_many(schedule: Schedule, unp: UnpunctualityModel, svc: ServiceModel,
                  costs: Costs, replications: int, base_seed: int, level: float = 0.95,
                  record_draws: bool = False) -> ReplicationReport:
    if replications < 2:
        raise ValueError("need at least two replications")
    rngs, labels = replication_rngs(base_seed, replications)
    outcomes, kept = [], []
    for rng in rngs:
        d = draw(schedule.m, svc, rng)
        outcomes.append(simulate_draws(schedule, unp, d, costs))
        if record_draws:
            kept.append(d)
    return ReplicationReport(outcomes, labels, level, kept if record_draws else None)


@dataclass(frozen=True)
class GapResult:
    n: float
    scaled_mean: float
    reference: float
    gap: float
    report: ReplicationReport = field(repr=False)

    @property
    def normalized(self) -> float:
        return self.gap * math.sqrt(self.n)


def nth_system(problem: FluidProblem, control, grid: Grid, n: float,
               service: str = "exponential", log_sd: float = 2.0):
    """Schedule, service model and costs of the n-th system.

    Capacity and the idle and overtime rates grow by ``n``; the schedule is
    the profile scaled by ``n``.
    """
    scaled = problem.scaled(n)
    schedule = extract_schedule(control, grid, n)
    return schedule, service_for_rate(service, scaled.mu, log_sd), scaled.costs


def fluid_scaled_gap(problem: FluidProblem, control, grid: Grid, n: float, replications: int,
                     seed: int, reference: float | None = None, service: str = "exponential",
                     log_sd: float = 2.0) -> GapResult:
    """Distance between the simulated objective of the n-th system over n and the fluid value.

    ``reference`` defaults to the discretized fluid objective of ``control``.
    """
    if reference is None:
        reference = fluid_objective(Discretization(problem, grid), control)
    schedule, svc, costs = nth_system(problem, control, grid, n, service, log_sd)
    report = simulate_many(schedule, problem.unpunctuality, svc, costs, replications, seed)
    scaled = report.mean / n
    return GapResult(n, scaled, reference, abs(scaled - reference), report)


__all__ = ["Draws", "GapResult", "ReplicationReport", "SamplePath", "SimOutcome", "draw",
           "fluid_scaled_gap", "nth_system", "outcome", "replication_rngs", "sample_path",
           "simulate_draws", "simulate_many", "simulate_once", "t_half_width"]

"""The parametric scenarios used for the numerical study.

All share ``mu = 100``, ``T = 1`` and costs ``c_w = 1, c_i = 50, c_o = 75``.
Distribution labels follow the (mean, variance) convention of the study;
the constructors below take standard deviations.
"""

from __future__ import annotations

from .distributions import GeneralizedLaplace, MiddaySplit, Normal, ParametricDrift, Uniform
from .fluid import Costs, FluidProblem

MU = 100.0
HORIZON = 1.0

# (mean, variance) pairs and the matching generalized Laplace parameters
MOMENT_PAIRS = ((-0.1, 0.0025), (-0.05, 0.01), (0.0, 0.04))
LAPLACE_PARAMS = ((-0.1211, 0.35, 45.0, 22.5), (-0.05, 0.5, 14.15, 14.15),
                  (0.085, 0.65, 5.59, 11.18))
UNIFORM_PARAMS = ((-0.1866, -0.0134), (-0.2232, 0.1232), (-0.3464, 0.3464))
REWARDS = (0.0, 1.0, 1.2, 1.5)


def costs(r: float = 0.0) -> Costs:
    return Costs(r=r, c_w=1.0, c_i=50.0, c_o=75.0)


def problem(unp, r: float = 0.0) -> FluidProblem:
    return FluidProblem(MU, HORIZON, costs(r), unp)


def normal_split() -> MiddaySplit:
    return MiddaySplit(Normal(0.0, 0.2), Normal(-0.1, 0.05), 0.5)


def normal_drift() -> ParametricDrift:
    # mean -0.1 t, sd 0.2 - 0.15 t
    return ParametricDrift("normal", {"mean": (0.0, -0.1), "sd": (0.2, -0.15)}, HORIZON)


def laplace_split() -> MiddaySplit:
    return MiddaySplit(GeneralizedLaplace(*LAPLACE_PARAMS[2]),
                       GeneralizedLaplace(*LAPLACE_PARAMS[0]), 0.5)


def laplace_drift() -> ParametricDrift:
    return ParametricDrift("laplace", {"mu": (0.085, -0.2061), "pi": (0.65, -0.3),
                                       "lambda_l": (5.59, 39.41), "lambda_r": (11.18, 11.32)},
                           HORIZON)


def suite() -> dict[str, FluidProblem]:
    """Six scenarios: one per distribution family, two time-varying, one with reward."""
    return {
        "normal": problem(Normal(-0.05, 0.1)),
        "uniform": problem(Uniform(*UNIFORM_PARAMS[1])),
        "laplace": problem(GeneralizedLaplace(*LAPLACE_PARAMS[0])),
        "midday_split": problem(normal_split()),
        "drift": problem(normal_drift()),
        "reward": problem(Normal(-0.05, 0.1), r=1.2),
    }


__all__ = ["HORIZON", "LAPLACE_PARAMS", "MOMENT_PAIRS", "MU", "REWARDS", "UNIFORM_PARAMS",
           "costs", "laplace_drift", "laplace_split", "normal_drift", "normal_split", "problem",
           "suite"]

"""Sampling-period certification via a family of scalar Riccati ODEs.

For each admissible in-flight count l the scalar variable phi_l decays
along ``phi' = -2 L_l phi - gamma_l (phi^2 + 1)``.  A sampling-period
upper bound is certified when the terminal/initial coupling between
consecutive levels and the pointwise ordering of ``gamma_l phi_l`` both
hold on the integration grid.  The largest certified bound is located by
bisection, and the constants the runtime trigger needs are read off the
solved trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CertificationError, ConfigError
from .storage import DelayAdjustedCertificate

_DIVERGED = -1e12  # fill value once a trajectory escapes

#: relative run-off allowed when interpolating at the grid edge
_EDGE_TOL = 1e-9


@dataclass
class PhiTrajectory:
    """One level's solution on a uniform grid with linear interpolation."""

    decay_rate: float           # L
    gain: float                 # gamma
    start: float                # phi(0)
    step: float
    values: np.ndarray
    diverged: bool = False

    @property
    def horizon(self) -> float:
        return self.step * (len(self.values) - 1)

    def __call__(self, tau: float) -> float:
        horizon = self.horizon
        if tau < -_EDGE_TOL * (1 + horizon) or tau > horizon * (1 + _EDGE_TOL) + 1e-15:
            raise CertificationError(
                f"phi lookup at {tau:.6g} s outside certified horizon {horizon:.6g} s"
            )
        tau = min(max(tau, 0.0), horizon)
        pos = tau / self.step
        idx = min(int(pos), len(self.values) - 2)
        frac = pos - idx
        return float((1.0 - frac) * self.values[idx] + frac * self.values[idx + 1])

    def end(self) -> float:
        return float(self.values[-1])


def _integrate(decay_rate: float, gain: float, start: float, horizon: float, n: int):
    """Classical 4th-order fixed-step integration; clamps after escape."""
    h = horizon / n
    values = np.empty(n + 1)
    values[0] = start
    p = start
    diverged = False

    def f(phi):
        return -2.0 * decay_rate * phi - gain * (phi * phi + 1.0)

    for k in range(n):
        if diverged:
            values[k + 1] = _DIVERGED
            continue
        k1 = f(p)
        k2 = f(p + 0.5 * h * k1)
        k3 = f(p + 0.5 * h * k2)
        k4 = f(p + h * k3)
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(p) or p < -1e6:
            diverged = True
            p = _DIVERGED
        values[k + 1] = p
    return values, diverged


def solve_phi(
    decay_rate: float,
    gain: float,
    start: float,
    horizon: float,
    step: float | None = None,
    agree_tol: float = 1e-9,
) -> PhiTrajectory:
    """Solve one level's decay ODE on [0, horizon].

    The grid is refined by halving until two successive resolutions agree
    to ``agree_tol`` at the endpoint.  A zero crossing before the horizon
    is not an error; it simply marks the feasibility boundary for the
    conditions checked downstream.
    """
    if decay_rate < 0 or gain <= 0 or start <= 0:
        raise ConfigError("decay_rate >= 0, gain > 0 and start > 0 are required")
    if horizon <= 0:
        raise ConfigError("horizon must be positive")
    if step is not None:
        n = max(2, int(np.ceil(horizon / step)))
        values, diverged = _integrate(decay_rate, gain, start, horizon, n)
        return PhiTrajectory(decay_rate, gain, start, horizon / n, values, diverged)
    n = 64
    values, diverged = _integrate(decay_rate, gain, start, horizon, n)
    while True:
        values2, diverged2 = _integrate(decay_rate, gain, start, horizon, 2 * n)
        agreed = (
            (diverged and diverged2)
            or (not diverged and not diverged2 and abs(values2[-1] - values[-1]) <= agree_tol)
        )
        n, values, diverged = 2 * n, values2, diverged2
        if agreed:
            break
        if n > 1 << 22:
            raise CertificationError("grid refinement did not converge")
    return PhiTrajectory(decay_rate, gain, start, horizon / n, values, diverged)


@dataclass(frozen=True)
class CertificationProblem:
    """Inputs the period certification needs for one channel."""

    madns: int
    lam_tilde: float
    growth_rates: np.ndarray    # L_l, l = 0..D+1
    gains: np.ndarray           # gamma_l
    starts: np.ndarray          # phi_l(0)

    def __post_init__(self):
        want = self.madns + 2
        for name in ("growth_rates", "gains", "starts"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (want,):
                raise ConfigError(f"{name} must have one entry per level 0..{want - 1}")
            object.__setattr__(self, name, arr)
        if np.any(self.starts <= 0) or np.any(self.gains <= 0):
            raise ConfigError("gains and initial values must be positive")
        if not 0 < self.lam_tilde < 1:
            raise ConfigError("lam_tilde must lie in (0, 1)")

    @staticmethod
    def from_certificate(
        lifted: DelayAdjustedCertificate, starts: float | np.ndarray
    ) -> "CertificationProblem":
        starts = np.broadcast_to(np.asarray(starts, dtype=float), (lifted.madns + 2,))
        return CertificationProblem(
            madns=lifted.madns,
            lam_tilde=lifted.lam_tilde,
            growth_rates=lifted.growth_rates,
            gains=lifted.gains,
            starts=np.array(starts),
        )


@dataclass
class FeasibilityReport:
    feasible: bool
    margin: float
    period: float
    grid_step: float
    trajectories: list[PhiTrajectory] = field(default_factory=list)


def _solve_family(problem: CertificationProblem, period: float, agree_tol: float = 1e-9):
    """Solve all levels on a shared grid, refined jointly."""
    n = 64
    while True:
        sols = [
            _integrate(problem.growth_rates[l], problem.gains[l], problem.starts[l], period, n)
            for l in range(problem.madns + 2)
        ]
        sols2 = [
            _integrate(problem.growth_rates[l], problem.gains[l], problem.starts[l], period, 2 * n)
            for l in range(problem.madns + 2)
        ]
        any_div = any(d for _, d in sols) or any(d for _, d in sols2)
        if any_div:
            # infeasible regardless of resolution; report the finer grid
            break
        if all(
            abs(v2[-1] - v1[-1]) <= agree_tol
            for (v1, _), (v2, _) in zip(sols, sols2)
        ):
            break
        n *= 2
        if n > 1 << 22:
            raise CertificationError("grid refinement did not converge")
    trajs = [
        PhiTrajectory(
            problem.growth_rates[l],
            problem.gains[l],
            problem.starts[l],
            period / (2 * n),
            vals,
            div,
        )
        for l, (vals, div) in enumerate(sols2)
    ]
    return trajs


def check_conditions(
    problem: CertificationProblem, period: float, step: float | None = None
) -> FeasibilityReport:
    """Check the certification conditions at one candidate period.

    Condition one couples each level's terminal value to the next level's
    initial value through ``lam_tilde^2``; condition two orders
    ``gain_l * phi_l`` pointwise across consecutive levels on the grid.
    The margin is the smallest slack over all checks; infeasibility is a
    result, not an error.
    """
    if period <= 0:
        raise ConfigError("period must be positive")
    if step is not None:
        trajs = [
            solve_phi(
                problem.growth_rates[l],
                problem.gains[l],
                problem.starts[l],
                period,
                step=step,
            )
            for l in range(problem.madns + 2)
        ]
    else:
        trajs = _solve_family(problem, period)
    if any(t.diverged for t in trajs):
        return FeasibilityReport(False, -np.inf, period, trajs[0].step, trajs)
    margin = np.inf
    lam_sq = problem.lam_tilde**2
    for l in range(problem.madns + 1):
        slack = problem.gains[l] * trajs[l].end() - lam_sq * problem.gains[l + 1] * problem.starts[l + 1]
        margin = min(margin, slack)
    for l in range(1, problem.madns + 2):
        diff = problem.gains[l] * trajs[l].values - problem.gains[l - 1] * trajs[l - 1].values
        margin = min(margin, float(diff.min()))
    # the conditions imply positivity; keep it explicit for robustness
    margin = min(margin, min(float(t.values.min()) for t in trajs))
    return FeasibilityReport(bool(margin >= 0.0), float(margin), period, trajs[0].step, trajs)


@dataclass
class MASPResult:
    period: float               # largest grid-certified feasible bound found
    report: FeasibilityReport   # solved at that bound
    tol: float
    iterations: int


def max_admissible_period(
    problem: CertificationProblem,
    t_lo: float,
    t_hi: float,
    tol: float = 1e-5,
) -> MASPResult:
    """Largest certified sampling-period bound in [t_lo, t_hi] by bisection."""
    if not 0 < t_lo < t_hi:
        raise ConfigError("need 0 < t_lo < t_hi")
    lo = check_conditions(problem, t_lo)
    if not lo.feasible:
        raise CertificationError("no admissible MASP above lower bound")
    hi = check_conditions(problem, t_hi)
    if hi.feasible:
        return MASPResult(t_hi, hi, tol, 0)
    best = lo
    a, b = t_lo, t_hi
    iterations = 0
    while b - a > tol:
        mid = 0.5 * (a + b)
        rep = check_conditions(problem, mid)
        if rep.feasible:
            a, best = mid, rep
        else:
            b = mid
        iterations += 1
    return MASPResult(a, best, tol, iterations)


@dataclass(frozen=True)
class RuntimeConstants:
    """Constants the trigger and the monitor read off a certification."""

    rho_bar: float
    rho_hat: float
    rho_tilde: float
    phi_floor: float
    phi_ceil: float
    gamma_floor: float
    gamma_ceil: float
    pi: float
    period: float               # certified sampling-period bound

    @property
    def varpi_floor(self) -> float:
        return self.pi

    def varpi(self, tau: float) -> float:
        """Linear sampling-budget weight: 1 at a fresh sample, pi at the bound."""
        return 1.0 - (1.0 - self.pi) * tau / self.period


def compute_runtime_constants(
    trajectories: list[PhiTrajectory],
    gains: np.ndarray,
    pi: float,
    eps_levels: np.ndarray,
    period: float,
) -> RuntimeConstants:
    """Select the runtime constants at their largest admissible values."""
    if not 0 < pi < 1:
        raise ConfigError("pi must lie in (0, 1)")
    phi_floor = min(float(t.values.min()) for t in trajectories)
    phi_ceil = max(float(t.values.max()) for t in trajectories)
    if phi_floor <= 0:
        raise CertificationError("phi trajectories must stay positive on the horizon")
    gamma_floor = float(np.min(gains))
    gamma_ceil = float(np.max(gains))
    rho_bar = float(np.min(eps_levels))
    rho_hat = 0.5 * min(1.0, phi_floor / gamma_ceil)
    rho_tilde = min(rho_bar * (1.0 - pi) / period, pi / 2.0)
    return RuntimeConstants(
        rho_bar=rho_bar,
        rho_hat=rho_hat,
        rho_tilde=rho_tilde,
        phi_floor=phi_floor,
        phi_ceil=phi_ceil,
        gamma_floor=gamma_floor,
        gamma_ceil=gamma_ceil,
        pi=float(pi),
        period=float(period),
    )


@dataclass
class ChannelCertification:
    """Everything one channel's trigger needs after certification."""

    period: float
    trajectories: list[PhiTrajectory]
    gains: np.ndarray
    constants: RuntimeConstants
    margin: float
    grid_step: float
    feasible: bool

    def gamma_phi(self, l: int, tau: float) -> float:
        return float(self.gains[l]) * self.trajectories[l](tau)


def certify_channel(
    problem: CertificationProblem,
    pi: float,
    eps_levels: np.ndarray,
    period: float | None = None,
    t_lo: float = 1e-4,
    t_hi: float = 0.5,
    tol: float = 1e-5,
) -> ChannelCertification:
    """Certify one channel, either at a given period or at the largest one.

    With ``period`` given, the conditions are checked there and the
    result keeps the (possibly negative) margin; otherwise the largest
    admissible period is located by bisection.
    """
    if period is None:
        masp = max_admissible_period(problem, t_lo, t_hi, tol)
        report = masp.report
        period = masp.period
    else:
        report = check_conditions(problem, period)
    constants = compute_runtime_constants(
        report.trajectories, problem.gains, pi, eps_levels, period
    )
    return ChannelCertification(
        period=float(period),
        trajectories=report.trajectories,
        gains=problem.gains,
        constants=constants,
        margin=report.margin,
        grid_step=report.grid_step,
        feasible=report.feasible,
    )

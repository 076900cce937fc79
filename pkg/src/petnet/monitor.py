"""Runtime evaluation of the closed loop's Lyapunov certificate.

The certified function combines the state part, a sampled-signal budget
term, an envelope over the delay-adjusted error storage, and the trigger
variables.  Along a certified disturbance-free run it never increases:
not across jumps, and not along flow segments.  These checks turn the
stability argument into executable trace tests; with a disturbance
active, only boundedness is checked and reported as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .certify import ChannelCertification
from .errors import CertificationError
from .netsim import PHASE_POST, PHASE_PRE, Trace

#: default relative tolerance for jump/flow monotonicity checks
DEFAULT_TOL = 1e-9


@dataclass
class ChannelMonitor:
    delta: Callable[[np.ndarray], float]
    w_tilde: Callable[[int, int, np.ndarray, np.ndarray], float]
    certification: ChannelCertification

    def envelope(self, l: int, tau: float, w2: float, d_v: float) -> float:
        k = self.certification.constants
        return max(self.certification.gamma_phi(l, tau) * w2, k.rho_hat * d_v)

    def budget(self, d_v: float, d_vtilde: float, tau: float) -> float:
        k = self.certification.constants
        return k.rho_bar * max(d_v, k.varpi(tau) * d_vtilde)


@dataclass
class MonitorCertificate:
    """Everything needed to evaluate the certificate on states or rows."""

    lyapunov: Callable[[np.ndarray], float]
    signal: Callable[[np.ndarray], np.ndarray]
    channels: list[ChannelMonitor]
    slices: list[slice]

    def evaluate_state(self, loop, state) -> float:
        v_full = self.signal(state.x)
        total = float(self.lyapunov(state.x))
        for i, (mon, sl) in enumerate(zip(self.channels, self.slices)):
            ch = state.channels[i]
            v_i = v_full[sl]
            d_v = mon.delta(v_i)
            tau = ch.tau_hat
            w = mon.w_tilde(ch.k_bar, ch.l, ch.theta, ch.v_hat - v_i)
            total += mon.budget(d_v, mon.delta(ch.v_tilde), tau)
            total += mon.envelope(ch.l, tau, w * w, d_v)
            total += ch.eta
        return total

    def evaluate_row(self, trace: Trace, row: int) -> float:
        """Recompute the certificate from a recorded trace row."""
        schema = trace.schema
        data = trace.data[row]
        x = trace.x(row)
        v_full = self.signal(x)
        total = float(self.lyapunov(x))
        for i, (mon, sl) in enumerate(zip(self.channels, self.slices)):
            dim = schema.channel_dims[i]
            cap = schema.capacities[i]
            base = schema.col(f"vhat{i}_0")
            v_hat = data[base : base + dim]
            base = schema.col(f"vtilde{i}_0")
            v_tilde = data[base : base + dim]
            base = schema.col(f"theta{i}_0_0")
            theta = data[base : base + (cap + 1) * dim].reshape(cap + 1, dim)
            tau = float(data[schema.col(f"tau{i}")])
            eta = float(data[schema.col(f"eta{i}")])
            l = int(data[schema.col(f"l{i}")])
            k_bar = int(data[schema.col(f"kbar{i}")])
            v_i = v_full[sl]
            d_v = mon.delta(v_i)
            horizon = mon.certification.trajectories[0].horizon
            if tau > horizon * (1 + 1e-9) + 1e-15:
                raise CertificationError(
                    f"trace row {row}: elapsed time {tau:.6g} s not covered by the "
                    f"certified envelope horizon {horizon:.6g} s"
                )
            w = mon.w_tilde(k_bar, l, theta, v_hat - v_i)
            total += mon.budget(d_v, mon.delta(v_tilde), tau)
            total += mon.envelope(l, tau, w * w, d_v)
            total += eta
        return total


@dataclass
class JumpViolation:
    row: int
    t: float
    j: int
    kind: int
    channel: int
    u_pre: float
    u_post: float
    excess: float


@dataclass
class FlowViolation:
    row: int
    t_from: float
    t_to: float
    u_from: float
    u_to: float
    excess: float


@dataclass
class FlowReport:
    mode: str                   # "strict" or "bounded"
    violations: list[FlowViolation]
    worst_increase: float       # most positive flow increment observed
    max_value: float
    ceiling: float | None = None

    @property
    def passed(self) -> bool:
        return not self.violations


def _recompute(trace: Trace, cert: MonitorCertificate) -> np.ndarray:
    return np.array([cert.evaluate_row(trace, r) for r in range(len(trace))])


def check_jump_monotone(
    trace: Trace, cert: MonitorCertificate, tol: float = DEFAULT_TOL
) -> list[JumpViolation]:
    """Flag jumps where the certificate increased beyond tolerance.

    Jump rows come in pre/post pairs at one timestamp; the check is
    ``U_post <= U_pre + tol * (1 + U_pre)`` for every pair.
    """
    violations = []
    phases = trace.column("phase").astype(int)
    for r in range(len(trace) - 1):
        if phases[r] == PHASE_PRE and phases[r + 1] == PHASE_POST:
            u_pre = cert.evaluate_row(trace, r)
            u_post = cert.evaluate_row(trace, r + 1)
            excess = u_post - u_pre - tol * (1.0 + abs(u_pre))
            if excess > 0:
                violations.append(
                    JumpViolation(
                        row=r,
                        t=float(trace.data[r, 0]),
                        j=int(trace.data[r, 1]),
                        kind=int(trace.data[r, 2]),
                        channel=int(trace.data[r, 4]),
                        u_pre=u_pre,
                        u_post=u_post,
                        excess=excess,
                    )
                )
    return violations


def check_flow_decrease(
    trace: Trace,
    cert: MonitorCertificate,
    tol: float = DEFAULT_TOL,
    disturbed: bool = False,
    ceiling: float | None = None,
) -> FlowReport:
    """Check the certificate along flow segments of a trace.

    Disturbance-free, the certificate must not increase between
    consecutive records that no jump separates (consecutive rows with an
    unchanged jump counter).  With a disturbance active, only
    boundedness against ``ceiling`` is checked; the default ceiling is
    ten times (1 + the initial value).
    """
    if len(trace) == 0:
        return FlowReport("strict" if not disturbed else "bounded", [], -math.inf, -math.inf)
    values = _recompute(trace, cert)
    j_col = trace.column("j").astype(int)
    t_col = trace.column("t")
    if disturbed:
        lid = 10.0 * (1.0 + values[0]) if ceiling is None else ceiling
        violations = [
            FlowViolation(r, t_col[r], t_col[r], values[r], values[r], values[r] - lid)
            for r in range(len(trace))
            if values[r] > lid
        ]
        return FlowReport("bounded", violations, float(np.max(np.diff(values), initial=-math.inf)), float(values.max()), lid)
    violations = []
    worst = -math.inf
    for r in range(len(trace) - 1):
        if j_col[r + 1] != j_col[r]:
            continue
        increase = values[r + 1] - values[r]
        worst = max(worst, increase)
        if increase > tol * (1.0 + abs(values[r])):
            violations.append(
                FlowViolation(
                    row=r,
                    t_from=float(t_col[r]),
                    t_to=float(t_col[r + 1]),
                    u_from=float(values[r]),
                    u_to=float(values[r + 1]),
                    excess=float(increase - tol * (1.0 + abs(values[r]))),
                )
            )
    return FlowReport("strict", violations, worst, float(values.max()))


def verdict(
    trace: Trace,
    cert: MonitorCertificate,
    disturbed: bool = False,
    tol: float = DEFAULT_TOL,
    ceiling: float | None = None,
) -> dict:
    """Combined monitor verdict over one trace, JSON-serializable."""
    if len(trace) == 0:
        return {
            "passed": True,
            "vacuous": True,
            "warning": "empty trace: nothing to check",
            "jump_violations": 0,
            "flow": {"mode": "strict" if not disturbed else "bounded", "violations": 0},
        }
    jumps = check_jump_monotone(trace, cert, tol)
    flow = check_flow_decrease(trace, cert, tol, disturbed=disturbed, ceiling=ceiling)
    worst_jump = None
    if jumps:
        w = max(jumps, key=lambda v: v.excess)
        worst_jump = {"t": w.t, "channel": w.channel, "kind": w.kind, "excess": w.excess}
    return {
        "passed": not jumps and flow.passed,
        "vacuous": False,
        "tol": tol,
        "jump_violations": len(jumps),
        "worst_jump": worst_jump,
        "flow": {
            "mode": flow.mode,
            "violations": len(flow.violations),
            "worst_increase": flow.worst_increase,
            "max_value": flow.max_value,
            "ceiling": flow.ceiling,
        },
    }

"""Event-trigger policies evaluated at sampling instants.

Four capability profiles are supported per channel:

* ``full``    - the trigger integrates its auxiliary variable online,
  receives delay-free delivery acknowledgements, and reads the true
  in-flight ledger.
* ``no_ode``  - no online integration: elapsed-time lookups are replaced
  by their worst-case endpoint values and the auxiliary variable only
  jumps, with the flow contribution folded into the jump conservatively.
* ``no_ack``  - no acknowledgements: the in-flight count is replaced by a
  transmitter-side upper bound and every quantity that depends on it by
  the worst case over the hypotheses it allows.
* ``static``  - the auxiliary variable is pinned to zero.

All profiles implement the certified bounds with equality: the largest
admissible trigger variable, hence the fewest transmissions the
certificate allows.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .certify import ChannelCertification
from .errors import CertificationError, ConfigError

CAPABILITIES = ("full", "no_ode", "no_ack", "static")

#: tolerated undershoot of a post-transmission trigger value before the
#: run is declared in violation of its certificate
ETA_TOL = 1e-12


@dataclass
class TriggerViolation:
    t: float
    channel: int
    kind: str
    value: float


class ChannelTrigger:
    """One channel's trigger: decision function and variable updates."""

    def __init__(
        self,
        capability: str,
        certification: ChannelCertification,
        delta,
        delta_hat,
        w_tilde,
        decay: float,
        eps: float,
        lam_tilde: float,
        madns: int,
        t_min: float,
        signal_dim: int,
    ):
        if capability not in CAPABILITIES:
            raise ConfigError(f"unknown trigger capability {capability!r}")
        if decay <= 0:
            raise ConfigError("trigger decay rate must be positive")
        if not 0 < eps < 1:
            raise ConfigError("trigger eps must lie in (0, 1)")
        self.capability = capability
        self.cert = certification
        self.delta = delta
        self.delta_hat = delta_hat
        self.w_tilde = w_tilde
        self.decay = float(decay)
        self.eps = float(eps)
        self.lam_tilde = float(lam_tilde)
        self.madns = int(madns)
        self.t_min = float(t_min)
        self.signal_dim = int(signal_dim)
        # transmitter-side memory (maintained for every profile; only the
        # no-ack profile decides with it)
        self.decision_window: deque = deque(maxlen=max(self.madns, 1))
        self.vbar_history: deque = deque(maxlen=self.madns + 2)
        self.vbar_history.append(np.zeros(signal_dim))
        self.loop = None
        self.index = -1

    # -- wiring -----------------------------------------------------------

    def attach(self, loop, index: int):
        self.loop = loop
        self.index = index

    @property
    def period(self) -> float:
        return self.cert.period

    @property
    def constants(self):
        return self.cert.constants

    def gamma_phi(self, l: int, tau: float) -> float:
        return self.cert.gamma_phi(l, tau)

    # -- transmitter-side bookkeeping --------------------------------------

    @property
    def lhat(self) -> int:
        """Upper bound on the in-flight count from local data only."""
        if self.madns == 0:
            return 0
        return int(sum(self.decision_window))

    def after_sample(self, transmitted: bool, vbar_new: np.ndarray | None):
        """Record this sampling instant's decision (and scheduled value)."""
        if self.madns >= 1:
            self.decision_window.append(bool(transmitted))
        if transmitted:
            if vbar_new is None:
                raise ConfigError("a transmission must record its scheduled value")
            self.vbar_history.append(np.array(vbar_new, dtype=float))

    def _hypothesis(self, n: int, v: np.ndarray):
        """Held value, error, and ledger under an assumed in-flight count."""
        hist = self.vbar_history
        v_hat_n = hist[-(n + 1)]
        e_n = v_hat_n - v
        theta_n = np.zeros((max(n, 1), self.signal_dim))
        for j in range(1, n + 1):
            theta_n[j - 1] = hist[-(n - j + 1)] - hist[-(n - j + 2)]
        return v_hat_n, e_n, theta_n

    def _hypothesis_range(self) -> range:
        # all counts up to the local upper bound, so the true one is included
        return range(0, min(self.lhat, len(self.vbar_history) - 1) + 1)

    # -- observation ---------------------------------------------------------

    def _observe(self, state):
        ch = state.channels[self.index]
        tau = ch.tau_hat
        if tau > self.period * (1.0 + 1e-9) + 1e-15:
            raise CertificationError(
                f"channel {self.index} sampled {tau:.6g} s after the previous sample, "
                f"beyond the certified bound {self.period:.6g} s"
            )
        v = self.loop.channel_signal(state.x, self.index)
        return ch, v, min(tau, self.period)

    # -- the auxiliary variable's flow ----------------------------------------

    def eta_flow_coeffs(self, state) -> tuple[float, float]:
        """(decay, drive) with the variable flowing as ``-decay*eta + drive``;
        the drive is constant between events."""
        if self.capability in ("no_ode", "static"):
            return 0.0, 0.0
        ch = state.channels[self.index]
        k = self.constants
        drive_tilde = (1.0 - self.eps) * k.rho_tilde * self.delta(ch.v_tilde)
        if self.capability == "full":
            return self.decay, self.delta_hat(ch.v_hat) + drive_tilde
        # no_ack: worst case of the held-signal weight over the hypotheses
        v = self.loop.channel_signal(state.x, self.index)
        held = min(
            self.delta_hat(self._hypothesis(n, v)[0]) for n in self._hypothesis_range()
        )
        return self.decay, held + drive_tilde

    def eta_flow(self, state) -> float:
        a, c = self.eta_flow_coeffs(state)
        return -a * state.channels[self.index].eta + c

    # -- shared pieces of the decision functions ------------------------------

    def _budget_terms(self, d_v: float, d_vtilde: float, varpi_value: float) -> float:
        k = self.constants
        return -k.rho_bar * d_v + k.rho_bar * max(d_v, varpi_value * d_vtilde)

    def _sample_gap(self, l: int, w2: float, d_v: float, tau_phi: float) -> float:
        """Gap between the elapsed-time and fresh-sample envelope terms."""
        rho_hat_dv = self.constants.rho_hat * d_v
        return -max(self.gamma_phi(l, 0.0) * w2, rho_hat_dv) + max(
            self.gamma_phi(l, tau_phi) * w2, rho_hat_dv
        )

    def _transmit_gap(self, l: int, w2: float, d_v: float, tau_phi: float) -> float:
        rho_hat_dv = self.constants.rho_hat * d_v
        contracted = self.gamma_phi(l + 1, 0.0) * self.lam_tilde**2 * w2
        return -max(contracted, rho_hat_dv) + max(
            self.gamma_phi(l, tau_phi) * w2, rho_hat_dv
        )

    def _no_ode_carry(self, ch, v_hat) -> float:
        """Conservative jump replacement for the flow the trigger cannot run."""
        k = self.constants
        gain = (1.0 - math.exp(-self.decay * self.t_min)) / self.decay
        carried = gain * (
            self.delta_hat(v_hat)
            + (1.0 - self.eps) * k.rho_tilde * self.delta(ch.v_tilde)
        )
        return math.exp(-self.decay * self.period) * ch.eta + carried

    def _true_w2(self, ch, e) -> float:
        w = self.w_tilde(ch.k_bar, ch.l, ch.theta, e)
        return w * w

    # -- decision and updates ---------------------------------------------------

    def decision_value(self, state) -> float:
        """Trigger function at a sampling instant; transmit iff negative."""
        ch, v, tau = self._observe(state)
        d_v = self.delta(v)
        d_vt = self.delta(ch.v_tilde)
        if self.capability in ("full", "static"):
            w2 = self._true_w2(ch, ch.v_hat - v)
            value = self._budget_terms(d_v, d_vt, self.constants.varpi(tau))
            value += self._sample_gap(ch.l, w2, d_v, tau)
            return value if self.capability == "static" else ch.eta + value
        if self.capability == "no_ode":
            w2 = self._true_w2(ch, ch.v_hat - v)
            value = self._no_ode_carry(ch, ch.v_hat)
            value += self._budget_terms(d_v, d_vt, self.constants.varpi_floor)
            value += self._sample_gap(ch.l, w2, d_v, self.period)
            return value
        # no_ack
        value = ch.eta + self._budget_terms(d_v, d_vt, self.constants.varpi(tau))
        gaps = []
        for n in self._hypothesis_range():
            _, e_n, theta_n = self._hypothesis(n, v)
            w_n = self.w_tilde(ch.k_bar, n, theta_n, e_n)
            gaps.append(self._sample_gap(n, w_n * w_n, d_v, tau))
        return value + min(gaps)

    def sample_update(self, state) -> float:
        """Post-sample value of the trigger variable (no transmission)."""
        if self.capability == "static":
            return 0.0
        return self.decision_value(state)

    def transmit_value(self, state) -> float:
        """Raw post-transmission trigger value.

        A certified run keeps this nonnegative; a value below ``-ETA_TOL``
        means the certification conditions failed at run time.
        """
        ch, v, tau = self._observe(state)
        d_v = self.delta(v)
        d_vt = self.delta(ch.v_tilde)
        if self.capability in ("full", "static"):
            w2 = self._true_w2(ch, ch.v_hat - v)
            value = self._budget_terms(d_v, d_vt, self.constants.varpi(tau))
            value += self._transmit_gap(ch.l, w2, d_v, tau)
            value += 0.0 if self.capability == "static" else ch.eta
        elif self.capability == "no_ode":
            w2 = self._true_w2(ch, ch.v_hat - v)
            value = self._no_ode_carry(ch, ch.v_hat)
            value += self._budget_terms(d_v, d_vt, self.constants.varpi_floor)
            value += self._transmit_gap(ch.l, w2, d_v, self.period)
        else:  # no_ack
            value = ch.eta + self._budget_terms(d_v, d_vt, self.constants.varpi(tau))
            gaps = []
            for n in self._hypothesis_range():
                _, e_n, theta_n = self._hypothesis(n, v)
                w_n = self.w_tilde(ch.k_bar, n, theta_n, e_n)
                gaps.append(self._transmit_gap(n, w_n * w_n, d_v, tau))
            value += min(gaps)
        return value

    def transmit_assignment(self, raw: float) -> float:
        if self.capability == "static":
            return 0.0
        return max(raw, 0.0)


class TriggerPolicy:
    """Per-channel triggers behind the interface the hybrid model calls.

    With ``strict`` unset, runtime certificate violations are recorded
    and the trigger variable clamped at zero instead of aborting the run
    (used by sabotage harnesses and negative tests).
    """

    def __init__(self, channels: list[ChannelTrigger], strict: bool = True):
        self.channels = channels
        self.strict = strict
        self.violations: list[TriggerViolation] = []

    def attach(self, loop):
        if loop.n_channels != len(self.channels):
            raise ConfigError("one trigger per channel is required")
        for i, ch in enumerate(self.channels):
            ch.attach(loop, i)
        return self

    def reset(self):
        """Clear transmitter-side memory so a policy can be rerun."""
        self.violations.clear()
        for ch in self.channels:
            ch.decision_window.clear()
            ch.vbar_history.clear()
            ch.vbar_history.append(np.zeros(ch.signal_dim))
        return self

    def eta_flow(self, state, i: int) -> float:
        return self.channels[i].eta_flow(state)

    def eta_flow_coeffs(self, state, i: int) -> tuple[float, float]:
        return self.channels[i].eta_flow_coeffs(state)

    def decision_value(self, state, i: int) -> float:
        return self.channels[i].decision_value(state)

    def sample_update(self, state, i: int) -> float:
        return self.channels[i].sample_update(state)

    def transmit_update(self, state, i: int) -> float:
        ch = self.channels[i]
        raw = ch.transmit_value(state)
        if raw < -ETA_TOL:
            if self.strict:
                raise CertificationError(
                    f"post-transmission trigger value {raw:.3e} on channel {i} at "
                    f"t={state.t:.6g} s: certified conditions violated at run time"
                )
            self.violations.append(
                TriggerViolation(state.t, i, "transmit_update", float(raw))
            )
        return ch.transmit_assignment(raw)

    def after_sample(self, i: int, transmitted: bool, vbar_new=None):
        self.channels[i].after_sample(transmitted, vbar_new)

    def lhat(self, i: int) -> int:
        return self.channels[i].lhat

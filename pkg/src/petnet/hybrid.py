"""Hybrid closed-loop model: flow field, jump maps, and channel bookkeeping.

The loop state couples the plant/controller state with, per channel, the
held signal, the in-flight correction ledger, the latest sample, the
elapsed time since it, transmission/update counters, and the trigger
variable.  Updating errors are never integrated: the held signal is
constant between updates, so the error is recomputed on demand as
``held - current``, which is exact under zero-order hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ProtocolViolation
from .protocols import Protocol

_TIME_TOL = 1e-12


@dataclass(frozen=True)
class PlantModel:
    """Plant and (possibly static) output-feedback controller.

    With ``static_controller`` set there is no controller state: the
    actuation is computed from the held plant output directly and only
    the plant outputs travel over the network.  Disturbances are scalar.
    """

    n_p: int
    n_c: int
    n_y: int
    n_u: int
    f_p: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    g_p: Callable[[np.ndarray], np.ndarray]
    g_c: Callable[[np.ndarray], np.ndarray]
    f_c: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    static_controller: bool = True
    name: str = ""

    def __post_init__(self):
        if self.static_controller:
            if self.n_c != 0:
                raise ConfigError("a static controller carries no controller state")
        elif self.f_c is None:
            raise ConfigError("a dynamic controller needs controller dynamics")
        zp, zu, zy = np.zeros(self.n_p), np.zeros(self.n_u), np.zeros(self.n_y)
        checks = [
            ("f_p(0,0,0)", self.f_p(zp, zu, 0.0), self.n_p),
            ("g_p(0)", self.g_p(zp), self.n_y),
            ("g_c(0)", self.g_c(np.zeros(self.n_c) if not self.static_controller else zy), self.n_u),
        ]
        if not self.static_controller:
            checks.append(("f_c(0,0)", self.f_c(np.zeros(self.n_c), zy), self.n_c))
        for label, value, dim in checks:
            value = np.asarray(value, dtype=float)
            if value.shape != (dim,):
                raise ConfigError(f"{label} has shape {value.shape}, expected ({dim},)")
            if np.max(np.abs(value)) > 1e-9:
                raise ConfigError(f"{label} must vanish, got {value}")

    @property
    def n_x(self) -> int:
        return self.n_p + self.n_c

    @property
    def n_v(self) -> int:
        """Dimension of the transmitted signal vector."""
        return self.n_y if self.static_controller else self.n_y + self.n_u

    def signal(self, x: np.ndarray) -> np.ndarray:
        """Current value of the transmitted signal."""
        x_p = x[: self.n_p]
        y = np.asarray(self.g_p(x_p), dtype=float)
        if self.static_controller:
            return y
        u = np.asarray(self.g_c(x[self.n_p:]), dtype=float)
        return np.concatenate([y, u])

    def flow(self, x: np.ndarray, v_hat: np.ndarray, w: float) -> np.ndarray:
        """State derivative under held signals ``v_hat``."""
        x_p = x[: self.n_p]
        if self.static_controller:
            u_hat = np.asarray(self.g_c(v_hat), dtype=float)
            return np.asarray(self.f_p(x_p, u_hat, w), dtype=float)
        y_hat = v_hat[: self.n_y]
        u_hat = v_hat[self.n_y:]
        dx_p = np.asarray(self.f_p(x_p, u_hat, w), dtype=float)
        dx_c = np.asarray(self.f_c(x[self.n_p:], y_hat), dtype=float)
        return np.concatenate([dx_p, dx_c])


@dataclass
class ChannelState:
    """One channel's bookkeeping.

    ``theta`` holds, oldest first, the increments between consecutive
    scheduled values of the packets still in flight; blocks beyond the
    in-flight count stay zero.  ``m_hat`` tags the next channel event:
    +1 for a sampling instant, -1 for a packet arrival.
    """

    v_hat: np.ndarray
    v_tilde: np.ndarray
    theta: np.ndarray           # (capacity + 1, dim), row j-1 = ledger block j
    tau_hat: float = 0.0
    k_bar: int = 0
    k_tilde: int = 0
    l: int = 0
    m_hat: int = 1
    eta: float = 0.0

    @property
    def capacity(self) -> int:
        """Delay budget: how many sampling periods one delay may span."""
        return self.theta.shape[0] - 1

    def copy(self) -> "ChannelState":
        return ChannelState(
            v_hat=self.v_hat.copy(),
            v_tilde=self.v_tilde.copy(),
            theta=self.theta.copy(),
            tau_hat=self.tau_hat,
            k_bar=self.k_bar,
            k_tilde=self.k_tilde,
            l=self.l,
            m_hat=self.m_hat,
            eta=self.eta,
        )

    def check_invariants(self):
        if not 0 <= self.l <= self.capacity + 1:
            raise ProtocolViolation(f"in-flight count {self.l} outside [0, {self.capacity + 1}]")
        if self.l != self.k_bar - self.k_tilde:
            raise ProtocolViolation("in-flight count disagrees with the counters")
        if self.l < self.capacity + 1 and np.any(self.theta[self.l:] != 0.0):
            raise ProtocolViolation("ledger has nonzero blocks beyond the in-flight count")
        if self.l == 0 and self.m_hat != 1:
            raise ProtocolViolation("with nothing in flight the next event must be a sample")
        if self.l == self.capacity + 1 and self.m_hat != -1:
            raise ProtocolViolation("with a full ledger the next event must be an arrival")
        if self.eta < 0:
            raise ProtocolViolation(f"trigger variable went negative: {self.eta}")


@dataclass
class HybridState:
    x: np.ndarray
    channels: list[ChannelState]
    t: float = 0.0
    j: int = 0

    def copy(self) -> "HybridState":
        return HybridState(
            x=self.x.copy(),
            channels=[c.copy() for c in self.channels],
            t=self.t,
            j=self.j,
        )


@dataclass
class FlowDerivative:
    x_dot: np.ndarray
    tau_dot: np.ndarray
    eta_dot: np.ndarray


def _resolve_m_hat(l_next: int, capacity: int, requested: int | None) -> int:
    """Apply the boundary rule; the caller supplies ground truth otherwise."""
    forced = None
    if l_next == 0:
        forced = 1
    elif l_next == capacity + 1:
        forced = -1
    if forced is not None:
        if requested is not None and requested != forced:
            raise ProtocolViolation(
                f"next-event tag {requested} conflicts with the forced value {forced}"
            )
        return forced
    if requested is None:
        # unforced and unspecified: packets are in flight, default to arrival
        return -1
    if requested not in (-1, 1):
        raise ConfigError("next-event tag must be +1 or -1")
    return requested


class NetworkedLoop:
    """Plant plus N independent channels: the closed hybrid loop.

    Owns the channel partition of the transmitted signal, the scheduling
    protocols, the per-channel delay budgets, and the sampling-time
    bounds; exposes the flow field and the three jump maps.
    """

    def __init__(
        self,
        plant: PlantModel,
        protocols: Sequence[Protocol],
        madns: Sequence[int],
        t_min: Sequence[float],
        t_max: Sequence[float],
    ):
        self.plant = plant
        self.protocols = list(protocols)
        self.madns = [int(d) for d in madns]
        self.t_min = [float(t) for t in t_min]
        self.t_max = [float(t) for t in t_max]
        n = len(self.protocols)
        if not (len(self.madns) == len(self.t_min) == len(self.t_max) == n):
            raise ConfigError("per-channel argument lengths disagree")
        if any(d < 0 for d in self.madns):
            raise ConfigError("delay budgets must be nonnegative")
        for lo, hi in zip(self.t_min, self.t_max):
            if not 0 < lo <= hi:
                raise ConfigError("need 0 < t_min <= t_max per channel")
        dims = [p.dim for p in self.protocols]
        if sum(dims) != plant.n_v:
            raise ConfigError(
                f"channel dimensions {dims} do not partition the signal of size {plant.n_v}"
            )
        self.slices: list[slice] = []
        start = 0
        for d in dims:
            self.slices.append(slice(start, start + d))
            start += d

    @property
    def n_channels(self) -> int:
        return len(self.protocols)

    # -- signals and errors ----------------------------------------------

    def signal(self, x: np.ndarray) -> np.ndarray:
        return self.plant.signal(x)

    def channel_signal(self, x: np.ndarray, i: int) -> np.ndarray:
        return self.plant.signal(x)[self.slices[i]]

    def held_signal(self, state: HybridState) -> np.ndarray:
        return np.concatenate([c.v_hat for c in state.channels])

    def updating_error(self, state: HybridState, i: int) -> np.ndarray:
        """Held minus current signal on channel i (derived, never integrated)."""
        return state.channels[i].v_hat - self.channel_signal(state.x, i)

    def transmission_error(self, state: HybridState, i: int) -> np.ndarray:
        """Latest-scheduled minus current signal, recovered from the ledger."""
        ch = state.channels[i]
        return self.updating_error(state, i) + ch.theta[: ch.l].sum(axis=0)

    # -- state construction ------------------------------------------------

    def initial_state(self, x0: np.ndarray) -> HybridState:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (self.plant.n_x,):
            raise ConfigError(f"initial state must have shape ({self.plant.n_x},)")
        v0 = self.signal(x0)
        channels = []
        for i, proto in enumerate(self.protocols):
            channels.append(
                ChannelState(
                    v_hat=np.zeros(proto.dim),
                    v_tilde=v0[self.slices[i]].copy(),
                    theta=np.zeros((self.madns[i] + 1, proto.dim)),
                )
            )
        return HybridState(x=x0.copy(), channels=channels)

    # -- flow ---------------------------------------------------------------

    def flow_field(self, state: HybridState, w: float, trig) -> FlowDerivative:
        """Continuous dynamics of (x, elapsed times, trigger variables)."""
        v_hat = self.held_signal(state)
        x_dot = self.plant.flow(state.x, v_hat, w)
        bad = np.flatnonzero(~np.isfinite(x_dot))
        if bad.size:
            raise NumericalError(f"non-finite state derivative in component {bad[0]}")
        eta_dot = np.empty(self.n_channels)
        for i in range(self.n_channels):
            eta_dot[i] = trig.eta_flow(state, i)
            if not np.isfinite(eta_dot[i]):
                raise NumericalError(f"non-finite trigger-variable rate on channel {i}")
        return FlowDerivative(
            x_dot=x_dot,
            tau_dot=np.ones(self.n_channels),
            eta_dot=eta_dot,
        )

    def flow_closure(self, v_hat: np.ndarray):
        """Fast per-segment flow map: held signals are frozen into the
        closure, so a static controller's actuation is computed once."""
        plant = self.plant
        if plant.static_controller:
            u_hat = np.asarray(plant.g_c(v_hat), dtype=float)
            f_p = plant.f_p

            def flow(x, w):
                return np.asarray(f_p(x, u_hat, w), dtype=float)

            return flow
        y_hat = v_hat[: plant.n_y].copy()
        u_hat = v_hat[plant.n_y :].copy()
        f_p, f_c, n_p = plant.f_p, plant.f_c, plant.n_p

        def flow(x, w):
            return np.concatenate(
                [
                    np.asarray(f_p(x[:n_p], u_hat, w), dtype=float),
                    np.asarray(f_c(x[n_p:], y_hat), dtype=float),
                ]
            )

        return flow

    # -- flow/jump sets -----------------------------------------------------

    def in_flow_set(self, state: HybridState) -> bool:
        return all(
            c.tau_hat <= tm + _TIME_TOL for c, tm in zip(state.channels, self.t_max)
        )

    def in_jump_set(self, state: HybridState, i: int) -> bool:
        tau = state.channels[i].tau_hat
        return self.t_min[i] - _TIME_TOL <= tau <= self.t_max[i] + _TIME_TOL

    # -- jump maps ------------------------------------------------------------

    def _require_sampling_window(self, state: HybridState, i: int):
        ch = state.channels[i]
        # the first sampling instant sits at time zero by convention
        if ch.k_bar == 0 and ch.k_tilde == 0 and ch.tau_hat <= _TIME_TOL:
            return
        if not self.in_jump_set(state, i):
            raise ProtocolViolation(
                f"channel {i} sampled at elapsed time {ch.tau_hat:.6g} s "
                f"outside [{self.t_min[i]:.6g}, {self.t_max[i]:.6g}]"
            )

    def jump_transmit(
        self, state: HybridState, i: int, trig, m_hat_next: int | None = None
    ) -> HybridState:
        """Sample channel i and send the scheduled packet.

        Appends the ledger block that maps the pre-jump scheduled value to
        the new one, refreshes the latest sample, and advances the
        transmission counter.  The trigger variable takes the policy's
        post-transmission value evaluated on the pre-jump state.
        """
        self._require_sampling_window(state, i)
        ch = state.channels[i]
        if ch.l > self.madns[i]:
            raise ProtocolViolation(
                f"channel {i} ledger is full: transmitting would exceed the delay budget"
            )
        if ch.m_hat != 1:
            raise ProtocolViolation("transmission attempted while an arrival is due")
        eta_next = float(trig.transmit_update(state, i))
        e_bar = self.transmission_error(state, i)
        residual = self.protocols[i].residual(ch.k_bar, e_bar)
        new = state.copy()
        nch = new.channels[i]
        nch.theta[ch.l] = residual - e_bar
        nch.v_tilde = self.channel_signal(state.x, i)
        nch.tau_hat = 0.0
        nch.k_bar += 1
        nch.l += 1
        nch.eta = eta_next
        nch.m_hat = _resolve_m_hat(nch.l, nch.capacity, m_hat_next)
        new.j += 1
        return new

    def jump_sample_only(
        self, state: HybridState, i: int, trig, m_hat_next: int | None = None
    ) -> HybridState:
        """Sample channel i without transmitting: only the latest sample,
        the elapsed time, the trigger variable, and (optionally) the
        next-event tag change."""
        self._require_sampling_window(state, i)
        ch = state.channels[i]
        eta_next = float(trig.sample_update(state, i))
        new = state.copy()
        nch = new.channels[i]
        nch.v_tilde = self.channel_signal(state.x, i)
        nch.tau_hat = 0.0
        nch.eta = eta_next
        requested = ch.m_hat if m_hat_next is None else m_hat_next
        nch.m_hat = _resolve_m_hat(nch.l, nch.capacity, requested)
        new.j += 1
        return new

    def jump_arrival(
        self, state: HybridState, i: int, m_hat_next: int | None = None
    ) -> HybridState:
        """Deliver channel i's oldest in-flight packet.

        The held signal absorbs the first ledger block, the ledger shifts
        down, and the update counter advances; the elapsed time and the
        trigger variable are untouched.
        """
        ch = state.channels[i]
        if ch.l == 0:
            raise ProtocolViolation(f"arrival on channel {i} with nothing in flight")
        if ch.m_hat != -1:
            raise ProtocolViolation("arrival processed while a sample was due")
        new = state.copy()
        nch = new.channels[i]
        nch.v_hat = ch.v_hat + ch.theta[0]
        nch.theta[:-1] = ch.theta[1:]
        nch.theta[-1] = 0.0
        nch.k_tilde += 1
        nch.l -= 1
        nch.m_hat = _resolve_m_hat(nch.l, nch.capacity, m_hat_next)
        new.j += 1
        return new

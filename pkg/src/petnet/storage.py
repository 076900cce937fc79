"""Delay-adjusted error storage built from a delay-free certificate.

The delay-free certificate collects what the emulation step provides for
one channel: the protocol contract, a growth bound on the transmitted
signal's rate, and a Lyapunov flow budget.  This module lifts it to the
constants indexed by the in-flight packet count and builds the storage
norm over (updating error, in-flight ledger) that the trigger and the
runtime monitor evaluate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .protocols import Protocol


@dataclass(frozen=True)
class DelayFreeCertificate:
    """Per-channel data certifying the loop when the network is ideal.

    flow_growth(x, e, w) bounds the channel signal's rate together with
    ``error_growth_gain * ||e_i||``.  The Lyapunov flow budget pays
    ``gamma^2`` per squared unit of error norm and keeps ``eps_margin``
    of it strictly; ``eps_slack`` is the headroom factor on the squared
    growth terms that the trigger may spend on sampled-signal terms.
    """

    protocol: Protocol
    state_dim: int
    error_growth_gain: float                       # gain on ||e_i||
    flow_growth: Callable[..., float]              # H(x, e, w)
    lyapunov: Callable[[np.ndarray], float]        # V(x)
    delta: Callable[[np.ndarray], float]           # output weight, on v_i
    delta_hat: Callable[[np.ndarray], float]       # held-signal weight, on v_hat_i
    residual_budget: Callable[..., float]          # J(x, e, w)
    gamma: float
    eps_margin: float                              # in (0, gamma^2)
    eps_slack: float                               # >= 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if not 0 < self.eps_margin < self.gamma**2:
            raise ConfigError("eps_margin must lie in (0, gamma^2)")
        if self.eps_slack < 0:
            raise ConfigError("eps_slack must be nonnegative")
        if self.error_growth_gain < 0:
            raise ConfigError("error growth gain must be nonnegative")
        zero_v = np.zeros(self.protocol.dim)
        if abs(self.delta(zero_v)) > 1e-12:
            raise ConfigError("delta(0) must be 0")
        if abs(self.lyapunov(np.zeros(self.state_dim))) > 1e-12:
            raise ConfigError("V(0) must be 0")


def young_augment(surplus_gain: float, eps_check: float) -> tuple[float, float]:
    """Split a spare quadratic output term into a held-signal weight and
    an error-gain increase.

    Given a surplus ``surplus_gain * ||v||^2`` in the flow budget and a
    split parameter ``eps_check`` in (0, 1], returns the coefficient of
    ``||v_hat||^2`` retained and the increment to ``gamma^2`` paid for it.
    ``eps_check = 1`` keeps nothing and pays nothing.
    """
    if not 0.0 < eps_check <= 1.0:
        raise ConfigError("eps_check must lie in (0, 1]")
    if surplus_gain < 0:
        raise ConfigError("surplus gain must be nonnegative")
    kept = surplus_gain * (1.0 - eps_check)
    return kept, kept / eps_check


def delay_adjusted_norm(
    cert: DelayFreeCertificate, lam_tilde: float
) -> Callable[[int, int, np.ndarray, np.ndarray], float]:
    """Build the storage norm over (error, in-flight ledger).

    The value is the largest, over m = 0..l, of the error norm after
    applying the first m ledger corrections, discounted by
    ``(lam_tilde / growth)^(l - m)``.  With nothing in flight it reduces
    to the plain protocol norm.  Ledger blocks beyond l are ignored.
    """
    proto = cert.protocol
    if not proto.contraction < lam_tilde < 1.0:
        raise ConfigError(
            f"lam_tilde must lie in ({proto.contraction}, 1), got {lam_tilde}"
        )
    ratio = lam_tilde / proto.growth

    def w_tilde(k: int, l: int, theta: np.ndarray, e: np.ndarray) -> float:
        acc = np.array(e, dtype=float)
        best = ratio**l * proto.error_norm(k, acc)
        for m in range(1, l + 1):
            acc = acc + theta[m - 1]
            best = max(best, ratio ** (l - m) * proto.error_norm(k, acc))
        return best

    return w_tilde


def small_delay_norm_reference(
    cert: DelayFreeCertificate, lam_tilde: float
) -> Callable[[int, int, np.ndarray, np.ndarray], float]:
    """Two-term storage norm used by earlier small-delay designs.

    Only meaningful for a one-slot ledger (delay budget 0); kept as a
    cross-check against :func:`delay_adjusted_norm` on that domain.
    """
    proto = cert.protocol
    ratio = lam_tilde / proto.growth

    def w_ref(k: int, l: int, theta: np.ndarray, e: np.ndarray) -> float:
        e = np.asarray(e, dtype=float)
        block = np.asarray(theta, dtype=float).reshape(-1, proto.dim)[0]
        if l == 0:
            return max(proto.error_norm(k, e), proto.error_norm(k, e + block))
        if l == 1:
            return max(ratio * proto.error_norm(k, e), proto.error_norm(k, e + block))
        raise ConfigError("reference norm is defined for in-flight counts 0 and 1 only")

    return w_ref


@dataclass(frozen=True)
class DelayAdjustedCertificate:
    """Per-in-flight-count constants lifted from a delay-free certificate."""

    base: DelayFreeCertificate
    lam_tilde: float
    madns: int                      # delay budget D: delays span at most D+1 sampling periods
    growth_rates: np.ndarray        # flow growth rate of the storage norm, per l = 0..D+1
    gains: np.ndarray               # error-norm gain in the flow budget, per l
    margin_gains: np.ndarray        # strict-margin coefficient per l
    w_tilde: Callable[[int, int, np.ndarray, np.ndarray], float]

    @property
    def eps_levels(self) -> np.ndarray:
        return np.full(self.madns + 2, self.base.eps_slack)

    @property
    def delta(self) -> Callable[[np.ndarray], float]:
        return self.base.delta

    @property
    def delta_hat(self) -> Callable[[np.ndarray], float]:
        return self.base.delta_hat


def lift_constants(
    cert: DelayFreeCertificate, lam_tilde: float, madns: int
) -> DelayAdjustedCertificate:
    """Lift the delay-free constants to every admissible in-flight count.

    The growth rate and error gain scale by ``(growth / lam_tilde)^l``,
    the strict margin by its square; the growth function, output weights
    and slack are unchanged.
    """
    if madns < 0:
        raise ConfigError("delay budget must be >= 0")
    proto = cert.protocol
    w_tilde = delay_adjusted_norm(cert, lam_tilde)
    levels = np.arange(madns + 2)
    factor = (proto.growth / lam_tilde) ** levels
    growth_rates = factor * (cert.error_growth_gain / proto.norm_lower)
    gains = factor * cert.gamma
    margin_gains = factor**2 * cert.eps_margin
    # growth / lam_tilde >= 1, so both families are nondecreasing in l
    assert np.all(np.diff(growth_rates) >= -1e-15)
    assert np.all(np.diff(gains) >= -1e-15)
    return DelayAdjustedCertificate(
        base=cert,
        lam_tilde=float(lam_tilde),
        madns=int(madns),
        growth_rates=growth_rates,
        gains=gains,
        margin_gains=margin_gains,
        w_tilde=w_tilde,
    )

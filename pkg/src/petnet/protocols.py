"""Sensor-node scheduling protocols and their error storage norms.

A channel carries a signal split into one or more sensor nodes.  At a
transmission only the scheduled nodes enter the packet; the rest of the
transmission error is left uncorrected.  Each protocol comes with the
constants of its storage contract: a contraction factor across
transmissions, a growth factor when only the transmission counter
advances, and a bound on the norm gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KINDS = ("sd", "rr", "tod")


@dataclass(frozen=True)
class Protocol:
    """One channel's node schedule and its storage-contract constants.

    kind: "sd" transmits the full signal vector, "rr" cycles through the
    nodes, "tod" picks the node with the largest per-node error norm
    (ties broken toward the lowest node index).
    """

    kind: str
    node_sizes: tuple[int, ...]
    contraction: float          # decay factor of the error norm across a transmission
    growth: float = 1.0         # norm growth when only the counter advances
    gradient_bound: float = 1.0
    norm_lower: float = 1.0
    norm_upper: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown protocol kind {self.kind!r}")
        if not self.node_sizes or any(int(s) <= 0 for s in self.node_sizes):
            raise ConfigError("node sizes must be positive")
        if not 0.0 <= self.contraction < 1.0:
            raise ConfigError("contraction factor must lie in [0, 1)")
        if self.growth < 1.0:
            raise ConfigError("growth factor must be >= 1")
        if self.norm_lower <= 0 or self.norm_upper < self.norm_lower:
            raise ConfigError("norm envelope constants must satisfy 0 < lower <= upper")

    @property
    def dim(self) -> int:
        return int(sum(self.node_sizes))

    @property
    def node_count(self) -> int:
        return len(self.node_sizes)

    def node_slices(self) -> list[slice]:
        out, start = [], 0
        for s in self.node_sizes:
            out.append(slice(start, start + int(s)))
            start += int(s)
        return out

    # -- factory helpers -------------------------------------------------

    @staticmethod
    def sd(dim: int) -> "Protocol":
        """Full-vector transmission: every node scheduled, zero residual."""
        return Protocol("sd", (dim,), contraction=0.0)

    @staticmethod
    def tod(node_sizes: tuple[int, ...]) -> "Protocol":
        """Largest-error-node schedule with its standard contraction factor."""
        m = len(node_sizes)
        lam = float(np.sqrt((m - 1) / m)) if m > 1 else 0.0
        return Protocol("tod", tuple(node_sizes), contraction=lam)

    @staticmethod
    def rr(node_sizes: tuple[int, ...], contraction: float) -> "Protocol":
        """Cyclic schedule.  The contraction factor is caller-supplied and
        should be validated with :func:`verify_protocol_contract`."""
        return Protocol("rr", tuple(node_sizes), contraction=float(contraction))

    # -- the protocol map and its storage norm ---------------------------

    def residual(self, k: int, e_bar: np.ndarray) -> np.ndarray:
        """Error left uncorrected after the transmission with counter ``k``.

        The scheduled value is ``v + residual(k, e_bar)`` where ``e_bar`` is
        the transmission error just before scheduling.
        """
        e_bar = np.asarray(e_bar, dtype=float)
        if e_bar.shape != (self.dim,):
            raise ConfigError(f"expected error of dimension {self.dim}, got {e_bar.shape}")
        if self.kind == "sd":
            return np.zeros_like(e_bar)
        out = e_bar.copy()
        if self.kind == "rr":
            out[self.node_slices()[k % self.node_count]] = 0.0
            return out
        # tod: zero the node with the largest Euclidean norm, min index on ties
        norms = [float(np.linalg.norm(e_bar[sl])) for sl in self.node_slices()]
        out[self.node_slices()[int(np.argmax(norms))]] = 0.0
        return out

    def error_norm(self, k: int, e: np.ndarray) -> float:
        """Storage norm of the updating error (counter-independent)."""
        return float(np.linalg.norm(e))


@dataclass
class ProtocolCheckReport:
    """Empirical check of the storage contract over random error samples."""

    contraction_emp: float
    growth_emp: float
    gradient_emp: float
    passed: bool
    failures: list[str] = field(default_factory=list)
    samples: int = 0


def verify_protocol_contract(
    protocol: Protocol, sample_count: int = 2000, seed: int = 0
) -> ProtocolCheckReport:
    """Check the four storage-contract items on random errors.

    Items checked: the norm envelope, the contraction across a
    transmission, the growth under a counter advance, and the gradient
    bound.  The empirical contraction is the observed worst ratio; the
    report fails if it exceeds the declared factor beyond 1e-9.
    """
    if sample_count < 1:
        raise ConfigError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    n = protocol.dim
    failures: list[str] = []
    lam_emp = 0.0
    growth_emp = 0.0
    grad_emp = 0.0
    for _ in range(sample_count):
        scale = float(np.exp(rng.uniform(-3, 3)))
        e = rng.standard_normal(n) * scale
        k = int(rng.integers(0, 10))
        w = protocol.error_norm(k, e)
        norm = float(np.linalg.norm(e))
        if not (
            protocol.norm_lower * norm - 1e-12 <= w <= protocol.norm_upper * norm + 1e-12
        ):
            failures.append("norm envelope violated")
        if norm > 0:
            lam_emp = max(lam_emp, protocol.error_norm(k + 1, protocol.residual(k, e)) / w)
            growth_emp = max(growth_emp, protocol.error_norm(k + 1, e) / w)
            # one-sided finite-difference gradient; step scaled to the point
            h = 1e-8 * norm
            g = np.array(
                [
                    (protocol.error_norm(k, e + h * unit) - w) / h
                    for unit in np.eye(n)
                ]
            )
            grad_emp = max(grad_emp, float(np.linalg.norm(g)))
    if lam_emp > protocol.contraction + 1e-9:
        failures.append(
            f"contraction violated: observed {lam_emp:.6g} > declared {protocol.contraction:.6g}"
        )
    if growth_emp > protocol.growth + 1e-9:
        failures.append("growth factor violated")
    if grad_emp > protocol.gradient_bound * (1 + 1e-5) + 1e-9:
        failures.append("gradient bound violated")
    return ProtocolCheckReport(
        contraction_emp=lam_emp,
        growth_emp=growth_emp,
        gradient_emp=grad_emp,
        passed=not failures,
        failures=sorted(set(failures)),
        samples=sample_count,
    )

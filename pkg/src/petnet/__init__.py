"""Event-triggered networked control over delayed channels.

A library for simulating periodic event-triggered control loops whose
sensor/actuator channels are sampled aperiodically, scheduled node by
node, and subject to transmission delays that may span several sampling
periods.  It certifies admissible sampling-period bounds for a given
delay budget, executes the closed hybrid loop under several trigger
capability profiles, and monitors a Lyapunov certificate along traces.
"""

from .errors import (
    CertificationError,
    ConfigError,
    HorizonError,
    NumericalError,
    PetnetError,
    ProtocolViolation,
)

__all__ = [
    "CertificationError",
    "ConfigError",
    "HorizonError",
    "NumericalError",
    "PetnetError",
    "ProtocolViolation",
]

__version__ = "0.1.0"

"""Exception types shared across the package."""


class PetnetError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PetnetError):
    """A scenario or parameter value is outside its admissible range."""


class NumericalError(PetnetError):
    """A computed quantity became non-finite."""


class ProtocolViolation(PetnetError):
    """A jump was requested that the channel bookkeeping forbids."""


class CertificationError(PetnetError):
    """A certified stability condition failed, at design or run time."""


class HorizonError(PetnetError):
    """A pregenerated schedule was exhausted before the run finished."""

"""Exception types shared across the package."""


class HCDefectError(Exception):
    pass


class ConstraintViolation(HCDefectError, ValueError):
    """Invalid parameters or a violated geometric / resolution requirement."""


class ConfigurationError(HCDefectError, ValueError):
    pass


class DomainError(HCDefectError, ValueError):
    pass


class PoleProximityError(HCDefectError, ValueError):
    """Spectral parameter too close to a Dirichlet eigenvalue of an inclusion."""


class FactorizationError(HCDefectError, RuntimeError):
    pass


class ConvergenceError(HCDefectError, RuntimeError):
    pass

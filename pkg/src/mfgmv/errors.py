"""Exception hierarchy.

Every error carries a short ``code`` used in log lines (``ERROR code=...``)
and an ``exit_code`` used by the command-line driver.
"""


class MFGError(Exception):
    code = "mfg_error"
    exit_code = 1


class ConfigError(MFGError):
    code = "config"
    exit_code = 1


class CheckpointError(MFGError):
    code = "checkpoint"
    exit_code = 1


class SingularVolatility(MFGError):
    code = "singular_volatility"


class DegenerateLambda(MFGError):
    code = "degenerate_lambda"


class PicardDivergence(MFGError):
    code = "picard_divergence"
    exit_code = 3


class InvariantViolation(MFGError):
    code = "invariant_violation"
    exit_code = 3


class DomainTooSmall(MFGError):
    code = "domain_too_small"
    exit_code = 1


class NonMonotone(InvariantViolation):
    code = "non_monotone"


class OutOfRange(MFGError):
    code = "out_of_range"
    exit_code = 3


class MassLoss(InvariantViolation):
    code = "mass_loss"


class NegativeDensity(InvariantViolation):
    code = "negative_density"


class NoConvergence(MFGError):
    code = "no_convergence"
    exit_code = 2

    def __init__(self, message, history=None, last=None):
        super().__init__(message)
        self.history = list(history or [])
        self.last = last


class InvalidParameter(MFGError, ValueError):
    code = "invalid_parameter"
    exit_code = 1

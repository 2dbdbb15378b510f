"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument violates an operation's documented precondition."""


class DegenerateFitError(RuntimeError):
    """A Gaussian moment fit could not produce a usable precision matrix."""


class DegenerateProposalError(RuntimeError):
    """A composed proposal distribution is not positive definite."""


class ConfigError(ValueError):
    """Experiment configuration is malformed; the message names the key path."""

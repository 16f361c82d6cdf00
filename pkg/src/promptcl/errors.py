"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class InputError(ValueError):
    """Caller-supplied data is malformed (bad labels, sizes, paths, config values)."""


class ContractError(RuntimeError):
    """An API precondition was violated (wrong call order, guarded access, bad state)."""


class ConfigError(InputError):
    """A configuration file or dict contains unknown or invalid keys."""


class TrainingError(RuntimeError):
    """Training could not meet a required quality bar within its budget."""

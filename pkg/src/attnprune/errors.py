class AttnPruneError(Exception):
    pass


class ShapeError(AttnPruneError, ValueError):
    pass


class DomainError(AttnPruneError, ValueError):
    pass


class DegenerateBatchError(AttnPruneError, ValueError):
    pass


class NumericalError(AttnPruneError, ArithmeticError):
    pass


class MaskError(AttnPruneError, ValueError):
    """Mask construction failed or a mask does not fit the model it is applied to."""


class CheckpointError(AttnPruneError, ValueError):
    pass


class ConfigError(AttnPruneError, ValueError):
    pass

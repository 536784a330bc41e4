"""Exception hierarchy shared across the package."""


class S4DecError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(S4DecError, ValueError):
    pass


class LengthMismatchError(S4DecError, ValueError):
    pass


class ShapeMismatchError(S4DecError, ValueError):
    pass


class SingularMatrixError(S4DecError, ValueError):
    pass


class NonPositiveDeltaError(S4DecError, ValueError):
    pass


class EmptyInputError(S4DecError, ValueError):
    pass


class OddStateSizeError(S4DecError, ValueError):
    pass


class OddModelDimError(S4DecError, ValueError):
    pass


class AllMaskedRowError(S4DecError, ValueError):
    """A query row has every key masked out, so its softmax is undefined."""


class VariantMismatchError(S4DecError, ValueError):
    pass


class StateCorruptError(S4DecError, RuntimeError):
    pass


class UnknownOpError(S4DecError, KeyError):
    pass


class NotScalarError(S4DecError, ValueError):
    pass


class DetachedLossError(S4DecError, ValueError):
    pass


class TapeConsumedError(S4DecError, RuntimeError):
    """``backward`` was called a second time on the same tape."""


class NonFiniteGradientError(S4DecError, FloatingPointError):
    pass


class ConfigError(S4DecError, ValueError):
    pass


class ManifestMismatchError(S4DecError, ValueError):
    pass


class CheckpointMismatchError(S4DecError, ValueError):
    pass


class NonFiniteLossError(S4DecError, FloatingPointError):
    pass

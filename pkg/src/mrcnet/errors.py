"""Exception hierarchy shared across the package."""


class MRCNetError(Exception):
    """Base class for every error raised by mrcnet."""


class ConfigError(MRCNetError, ValueError):
    pass


class FusionError(ConfigError):
    """Encoder and decoder features cannot be paired (spatial or channel mismatch)."""


class PairingError(ConfigError):
    """Image and vessel map given to the discriminator do not share a grid."""


class NumericError(MRCNetError, ArithmeticError):
    pass


class UndefinedMetricError(MRCNetError, ValueError):
    """A metric's denominator is zero, e.g. the ground truth has a single class."""


class DatasetError(MRCNetError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnreadableImageError(DatasetError):
    pass

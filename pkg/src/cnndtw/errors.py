"""Exception hierarchy shared by every stage of the toolkit."""


class KwsError(Exception):
    """Base class for all toolkit errors."""


# features
class EmptyInput(KwsError, ValueError):
    pass


class CorruptAudio(KwsError, ValueError):
    pass


class TooShort(KwsError, ValueError):
    pass


class DimensionMismatch(KwsError, ValueError):
    pass


class ZeroNormFrame(KwsError, ValueError):
    pass


# binary formats
class CorruptArchive(KwsError, ValueError):
    pass


class CorruptModel(CorruptArchive):
    pass


class VersionError(KwsError, ValueError):
    pass


# dtw / targets
class BandTooNarrow(KwsError, ValueError):
    pass


class RangeError(KwsError, ValueError):
    pass


# nn / training
class InputTooShort(KwsError, ValueError):
    pass


class StaleActivations(KwsError, RuntimeError):
    pass


class MissingTarget(KwsError, KeyError):
    pass


class InvalidExemplar(KwsError, ValueError):
    pass


# evaluation / cli
class DegenerateLabels(KwsError, ValueError):
    pass


class MissingInput(KwsError, FileNotFoundError):
    pass


class ConfigError(KwsError, ValueError):
    pass

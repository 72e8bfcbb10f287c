"""Exception types shared across the package.

Each error carries a short machine-readable ``code`` and the process exit
status the CLI should use when it escapes to the top level.
"""


class SysDirectError(Exception):
    code = "error"
    exit_code = 3


# --- usage / configuration (exit 2) ---------------------------------------

class ConfigError(SysDirectError, ValueError):
    code = "config"
    exit_code = 2


class UnsupportedVariantError(SysDirectError, ValueError):
    code = "unsupported-variant"
    exit_code = 2


# --- data (exit 3) ----------------------------------------------------------

class FormatError(SysDirectError, ValueError):
    code = "format"


class UnsupportedCodecError(SysDirectError, ValueError):
    code = "unsupported-codec"


class EmptyAudioError(SysDirectError, ValueError):
    code = "empty-audio"


class TooShortError(SysDirectError, ValueError):
    code = "too-short"


class EmptyCorpusError(SysDirectError, ValueError):
    code = "empty-corpus"


class ClassMissingError(SysDirectError, ValueError):
    code = "class-missing"


class DataError(SysDirectError, ValueError):
    code = "data"


class VersionError(SysDirectError, ValueError):
    code = "version"


class CorruptionError(SysDirectError, ValueError):
    code = "corrupt"


# --- numerics (exit 4) ------------------------------------------------------

class ShapeError(SysDirectError, ValueError):
    code = "shape"
    exit_code = 4


class RankError(ShapeError):
    code = "rank"


class DoubleBackwardError(SysDirectError, RuntimeError):
    code = "double-backward"
    exit_code = 4


class NumericError(SysDirectError, ArithmeticError):
    code = "numeric"
    exit_code = 4


class EvaluationError(NumericError):
    code = "evaluation"

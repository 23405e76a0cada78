"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the CLI prints
ahead of the human message.
"""


class RegSynthError(Exception):
    code = "E_GENERIC"


class ParameterError(RegSynthError, ValueError):
    code = "E_PARAM"


class ShapeError(RegSynthError, ValueError):
    code = "E_SHAPE"


class CoverageError(RegSynthError, ValueError):
    code = "E_COVERAGE"


class UnsupportedCombinationError(RegSynthError, ValueError):
    code = "E_UNSUPPORTED"


class MaskError(RegSynthError, ValueError):
    code = "E_MASK"


class ParseError(RegSynthError, ValueError):
    code = "E_PARSE"


class PairingError(ParseError):
    code = "E_PAIRING"


class EmptySetError(RegSynthError, ValueError):
    code = "E_EMPTY"


class ContractError(RegSynthError, RuntimeError):
    code = "E_CONTRACT"


class ConfigError(RegSynthError, ValueError):
    code = "E_CONFIG"

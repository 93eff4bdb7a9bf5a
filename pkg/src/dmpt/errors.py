"""Exception hierarchy shared by all dmpt modules."""


class DMPTError(Exception):
    pass


class DimensionError(DMPTError, ValueError):
    pass


class ConfigurationError(DMPTError, ValueError):
    pass


class ContractError(DMPTError, ValueError):
    pass


class NumericError(DMPTError, ArithmeticError):
    pass


class IntegrityError(DMPTError, RuntimeError):
    pass


class SamplingError(DMPTError, ValueError):
    pass


class FormatError(DMPTError, ValueError):
    pass


class LengthError(FormatError):
    pass


class ProtocolError(DMPTError, ValueError):
    pass


class InputError(DMPTError, ValueError):
    pass


class UnknownModalityError(DMPTError, KeyError):
    pass

class HarmaskError(Exception):
    pass


class ConfigError(HarmaskError, ValueError):
    pass


class DimensionError(HarmaskError, ValueError):
    pass


class NumericError(HarmaskError, ArithmeticError):
    pass


class SelectionError(HarmaskError, ValueError):
    pass


class EmptyBatchError(HarmaskError, ValueError):
    pass


class DegenerateLossError(HarmaskError, ValueError):
    pass


class CheckpointError(HarmaskError):
    pass

#!/usr/bin/python3

class StyleCraftError(Exception):
    pass

class ShapeError(StyleCraftError, ValueError):
    pass

class ConfigurationError(StyleCraftError, ValueError):
    pass

class ArgumentError(StyleCraftError, ValueError):
    pass

class GenerationError(StyleCraftError, ValueError):
    pass

class NumericalError(StyleCraftError, ArithmeticError):
    pass

class ScheduleError(StyleCraftError, IndexError):
    pass

class BundleError(StyleCraftError, IOError):
    pass

class FreezeViolation(StyleCraftError, RuntimeError):
    pass

class ProbeGateError(StyleCraftError, RuntimeError):
    pass

class UsageError(StyleCraftError):
    pass

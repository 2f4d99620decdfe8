"""Exception hierarchy shared by every service module."""

from typing import Optional


class CouplingError(Exception):
    """Base class for every error raised by the toolkit."""


# Series preprocessing

class SeriesError(CouplingError, ValueError):
    pass


class TooShort(SeriesError):
    pass


class ConstantSeries(SeriesError):
    pass


class InsufficientLength(SeriesError):
    pass


class IncompatibleLengths(SeriesError):
    pass


# Linear algebra and inference

class DimensionMismatch(CouplingError, ValueError):
    pass


class NumericalFailure(CouplingError, ArithmeticError):
    pass


class Divergence(NumericalFailure):
    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"ELBO became non-finite at iteration {iteration}")


class FamilyMismatch(CouplingError, ValueError):
    pass


class EmptyNull(CouplingError, ValueError):
    pass


class NoNullTests(CouplingError, ValueError):
    pass


# Simulation

class SimulationError(CouplingError):
    pass


class NumericalBlowup(SimulationError, ArithmeticError):
    def __init__(self, step: int, system: str = ""):
        self.step = step
        self.system = system
        label = f"{system} " if system else ""
        super().__init__(f"{label}state exceeded the blow-up bound at step {step}")


class NonPositiveState(SimulationError, ArithmeticError):
    def __init__(self, step: int, variable: str):
        self.step = step
        self.variable = variable
        super().__init__(f"hemodynamic state {variable} became non-positive at step {step}")


class ZeroPowerSignal(SimulationError, ValueError):
    pass


# Configuration

class ConfigError(CouplingError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class UnknownKeyError(ParseError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"unknown config key '{key}'")


class ValidationError(ConfigError, ValueError):
    def __init__(self, field: str, constraint: str):
        self.field = field
        self.constraint = constraint
        super().__init__(f"{field}: {constraint}")


# Reporting

class EmptyRecords(CouplingError, ValueError):
    pass

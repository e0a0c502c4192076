# utils/errors.py
"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI reports for it.
"""


class PipelineError(Exception):
    """Base class for all pipeline errors"""
    exit_code = 4


class InputError(PipelineError):
    """Invalid user input: files, configs, indices, parameters"""
    exit_code = 2


class ConfigError(InputError):
    """Configuration document failed validation"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class GridBoundsError(InputError, IndexError):
    """Node index outside the grid geometry"""


class PropertyError(InputError, KeyError):
    """Unregistered property channel"""

    def __str__(self):
        return str(self.args[0]) if self.args else 'unknown property'


class GeometryError(InputError):
    """Geometry construction produced nothing usable"""


class AnalysisError(InputError):
    """Analysis request is degenerate (empty or whole-phase regions)"""


class StabilityError(PipelineError):
    """Time step violates the explicit stability bound"""
    exit_code = 3

    def __init__(self, dt: float, bound: float):
        self.dt = dt
        self.bound = bound
        super().__init__(
            f"dt={dt:.6g} violates the explicit stability bound dt < {bound:.6g}"
        )


class NumericalError(PipelineError):
    """Non-finite values produced during a run"""
    exit_code = 4

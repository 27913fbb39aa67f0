"""
Exception hierarchy shared by every module.

Each error also derives from the closest builtin so callers that only know
about ValueError / RuntimeError / OSError still catch them.
"""

from typing import Optional, Sequence, Tuple


class PhysFaceError(Exception):
    """Base class for all errors raised by this project."""


class InvalidInputError(PhysFaceError, ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class AmbiguityError(PhysFaceError, ValueError):
    """The requested factor is not unique (e.g. polar rotation of a rank-1 matrix)."""


class DegenerateConfigurationError(PhysFaceError, ValueError):
    """Point sets are collinear or otherwise too degenerate for a rigid fit."""


class InvertedElementError(PhysFaceError, ValueError):
    """A deformation gradient with det <= 0 was passed where orientation must be preserved."""


class ConvergenceError(PhysFaceError, RuntimeError):
    """An iterative kernel ran out of iterations."""


class ParseError(PhysFaceError, ValueError):
    def __init__(self, message: str, line: int, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")


class TopologyError(PhysFaceError, ValueError):
    def __init__(self, message: str, open_edges: Sequence[Tuple[int, int]] = ()):
        self.open_edges = [tuple(int(i) for i in e) for e in open_edges]
        preview = ", ".join(str(e) for e in self.open_edges[:8])
        more = "" if len(self.open_edges) <= 8 else f" (+{len(self.open_edges) - 8} more)"
        super().__init__(f"{message}; open edges: {preview}{more}" if self.open_edges else message)


class DomainError(PhysFaceError, ValueError):
    """A field was evaluated outside its bounding box."""


class CoverageError(PhysFaceError, ValueError):
    def __init__(self, message: str, vertex: int):
        self.vertex = int(vertex)
        super().__init__(f"{message} (vertex {self.vertex})")


class RefinementError(PhysFaceError, ValueError):
    """Lattice cell size too coarse for the anatomy."""


class SetupError(PhysFaceError, RuntimeError):
    """Solver setup cannot be assembled (floating system, conflicting constraints)."""


class NumericalFailureError(PhysFaceError, RuntimeError):
    def __init__(self, message: str, report_path: Optional[str] = None):
        self.report_path = report_path
        super().__init__(message if report_path is None else f"{message} (report: {report_path})")


class UsageError(PhysFaceError, RuntimeError):
    """API used out of order (e.g. a consumed gradient tape)."""


class DivergenceError(PhysFaceError, RuntimeError):
    def __init__(self, message: str, checkpoint_path: Optional[str] = None, step: int = -1):
        self.checkpoint_path = checkpoint_path
        self.step = step
        super().__init__(message if checkpoint_path is None else f"{message} (last good checkpoint: {checkpoint_path})")


class ConfigError(PhysFaceError, ValueError):
    def __init__(self, message: str, key: str = ""):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class CorpusError(PhysFaceError, OSError):
    """Corpus directory unreadable, unwritable or inconsistent."""

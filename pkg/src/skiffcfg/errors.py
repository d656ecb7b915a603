"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI maps it to:
2 for usage/resolution/parse problems, 3 for conflicts and validation
failures, 4 for I/O and transport failures.
"""

from __future__ import annotations


class SkiffError(Exception):
    exit_code = 1


class UsageError(SkiffError):
    exit_code = 2


class ResolutionError(SkiffError):
    exit_code = 2


class CycleError(ResolutionError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        path = " -> ".join(str(c) for c in self.cycle + self.cycle[:1])
        super().__init__(f"dependency cycle: {path}")


class ParseError(SkiffError, ValueError):
    exit_code = 2

    def __init__(self, message, source=None, line=None):
        self.source = source
        self.line = line
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


class RoutingError(SkiffError):
    exit_code = 2


class ConflictError(SkiffError):
    exit_code = 3


class ValidationError(SkiffError):
    exit_code = 3

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class StorageError(SkiffError, OSError):
    exit_code = 4


class TransportError(StorageError):
    pass

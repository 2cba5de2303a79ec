"""Exception types shared across the toolkit."""


class PeriomatchError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(PeriomatchError, ValueError):
    """An argument violates an operation's preconditions."""


class DataError(PeriomatchError):
    """Input data (manifest, image files, score files) is unusable."""


class ModelLoadError(PeriomatchError):
    """A network file could not be parsed into a usable graph."""


class UnsupportedOperatorError(ModelLoadError):
    """The graph uses an operator the runtime does not implement."""

    def __init__(self, op_type: str, node_name: str = ""):
        self.op_type = op_type
        self.node_name = node_name
        where = f" (node {node_name!r})" if node_name else ""
        super().__init__(f"unsupported operator {op_type!r}{where}")


class InvalidLayerError(PeriomatchError, KeyError):
    """A requested activation layer does not exist in the network."""

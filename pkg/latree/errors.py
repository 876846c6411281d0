"""Exception hierarchy. The CLI maps these onto its documented exit codes."""


class LatentTreeError(Exception):
    """Base class for every error raised by latree."""


class ModelError(LatentTreeError):
    """Invalid model, generator precondition or unknown node."""


class SampleFormatError(LatentTreeError):
    """Malformed samples / group-map input. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DisconnectedGraphError(LatentTreeError):
    """Finite distances do not connect every node."""

    def __init__(self, components: list[list[int]]):
        self.components = components
        listing = "; ".join("{" + ", ".join(map(str, c)) + "}" for c in components)
        super().__init__(f"distance graph is disconnected: {len(components)} components: {listing}")


class NonConvergenceError(LatentTreeError):
    """A full grouping pass classified no pair of the active set."""

    def __init__(self, leader: int, active_set: list[int]):
        self.leader = leader
        self.active_set = list(active_set)
        super().__init__(
            f"local grouping for leader {leader} made no progress; active set {self.active_set}"
        )


class DecompositionError(LatentTreeError):
    """Triplet decomposition could not produce valid parameters."""


class AlignmentError(LatentTreeError):
    """Structures disagree where alignment or comparison needs them to match."""


class LeafSetMismatchError(LatentTreeError):
    """Two trees compared over different observed leaves."""

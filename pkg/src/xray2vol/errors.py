"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary or text artifact on disk is malformed; message names the byte offset."""


class TopologyError(ValueError):
    """A weight set does not match the network topology; message names the first bad layer."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

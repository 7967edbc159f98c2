"""Exception hierarchy shared by every stage of the pipeline."""


class TrapFilterError(Exception):
    pass


# imageio
class DecodeError(TrapFilterError):
    pass


class InvalidDimensions(TrapFilterError, ValueError):
    pass


class AlreadyGray(TrapFilterError, ValueError):
    pass


class AlreadySplit(TrapFilterError, ValueError):
    pass


class EmptyClass(TrapFilterError, ValueError):
    """A required label has no items."""


# clustering
class ModeMismatch(TrapFilterError, ValueError):
    pass


class TooFewPoints(TrapFilterError, ValueError):
    pass


class DimensionMismatch(TrapFilterError, ValueError):
    pass


class SingleCluster(TrapFilterError, ValueError):
    pass


# nnengine / rae
class ShapeMismatch(TrapFilterError, ValueError):
    pass


class StaleCache(TrapFilterError, RuntimeError):
    pass


class NonPositiveSigma(TrapFilterError, ValueError):
    pass


class IndivisibleDims(TrapFilterError, ValueError):
    pass


class EmptyTrainingSet(TrapFilterError, ValueError):
    pass


class EmptyCluster(TrapFilterError, ValueError):
    def __init__(self, cluster_id, msg=None):
        self.cluster_id = cluster_id
        super().__init__(msg or f"cluster {cluster_id} has no training images")


# errfeatures
class IndivisibleGrid(TrapFilterError, ValueError):
    pass


class TooSmall(TrapFilterError, ValueError):
    pass


# forest / eval
class SingleClass(TrapFilterError, ValueError):
    pass


class BadThreshold(TrapFilterError, ValueError):
    pass


class LengthMismatch(TrapFilterError, ValueError):
    pass


class EmptyInput(TrapFilterError, ValueError):
    pass


# pipeline
class StageError(TrapFilterError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class CorruptBundle(TrapFilterError):
    pass


class ChecksumMismatch(CorruptBundle):
    pass


class VersionMismatch(CorruptBundle):
    pass

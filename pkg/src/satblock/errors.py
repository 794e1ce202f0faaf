"""Exception hierarchy shared by all satblock modules."""


class SatblockError(Exception):
    """Base class for every error raised by this package."""


class SingularEvaluationError(SatblockError):
    """An RPC denominator vanished at the evaluation point."""


class InverseDivergenceError(SatblockError):
    """Backward projection failed to converge."""


class SamplingError(SatblockError):
    """A raster was sampled outside its valid domain."""


class UndefinedCorrelationError(SatblockError):
    """A window has zero intensity variance."""


class UnderdeterminedError(SatblockError):
    """Fewer than two active rays."""


class DegenerateGeometryError(SatblockError):
    """Ray geometry too weak to determine a ground point."""

    def __init__(self, message, track_id=None):
        super().__init__(message)
        self.track_id = track_id


class SelectionError(SatblockError):
    """No usable window pairing to pick a reference image."""


class EmptySystemError(SatblockError):
    """No active tracks contribute to an adjustment."""


class GaugeError(SatblockError):
    """Reduced camera system is singular (datum not fixed)."""


class AdjustmentDivergenceError(SatblockError):
    """Bias adjustment residual kept growing."""


class PipelineError(SatblockError):
    """The pipeline ran out of usable tracks."""


class EvaluationError(SatblockError):
    """External accuracy could not be evaluated."""


class SceneFormatError(SatblockError):
    """A scene file failed to parse or validate.

    ``line`` is the 1-based line number when the failure is tied to one.
    """

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class IntegrityError(SatblockError):
    """Tracks and images do not fit together (missing image, duplicate id)."""

    def __init__(self, message, track_id=None, image_id=None):
        super().__init__(message)
        self.track_id = track_id
        self.image_id = image_id

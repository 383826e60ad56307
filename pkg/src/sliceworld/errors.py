"""Exception types shared across the package."""


class SliceWorldError(Exception):
    """Base class for all package errors."""


class ValidationError(SliceWorldError):
    """Input violates a documented precondition or invariant."""


class ShapeMismatchError(ValidationError):
    """Array shape incompatible with a parametric map; names the map."""

    def __init__(self, map_name: str, detail: str):
        super().__init__(f"{map_name}: {detail}")
        self.map_name = map_name


class SequenceTooShortError(SliceWorldError):
    """Study too short for the requested horizon; callers skip the study."""


class DegenerateInput(SliceWorldError):
    """Metric undefined on this input (single-class labels, zero variance)."""


class ConfigError(SliceWorldError):
    """Malformed or unknown configuration key/value."""


class CheckpointError(SliceWorldError):
    """Checkpoint missing, corrupt, or from an incompatible format version."""


class ReportParseError(SliceWorldError):
    """Generated token sequence does not parse into finding phrases."""


class TrainingAborted(SliceWorldError):
    """Non-finite loss or gradient; carries the offending study id."""

    def __init__(self, study_id: str, detail: str = "non-finite loss"):
        super().__init__(f"aborted at study {study_id}: {detail}")
        self.study_id = study_id

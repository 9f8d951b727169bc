class SynthError(Exception):
    """Base class for every failure the pipeline reports to the user."""


class ConfigError(SynthError):
    pass


class AudioFormatError(SynthError):
    """Unreadable audio, wrong channel layout or sample-rate mismatch."""


class GeometryError(SynthError):
    """Tensor shapes that do not match the configured analysis geometry."""


class DatasetError(SynthError):
    pass


class CheckpointError(SynthError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class TrainingDiverged(SynthError):
    """Raised when a loss goes non-finite. The last good checkpoint is left on disk."""

    def __init__(self, step, parts):
        self.step = step
        self.parts = dict(parts)
        detail = ", ".join(f"{k}={v:.4g}" for k, v in self.parts.items())
        super().__init__(f"Non-finite loss at step {step}: {detail}")


class OutputExistsError(SynthError):
    """An output is already present and --force was not given."""

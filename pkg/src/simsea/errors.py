"""Exception types shared across the package."""


class SimseaError(Exception):
    """Base class for every error this package raises on purpose."""


class ManifestError(SimseaError):
    """Manifest file missing, unparsable, or structurally invalid."""


class DecodeError(SimseaError):
    """Image bytes could not be decoded to a supported raster."""


class CodebookError(SimseaError):
    """Codebook training, sampling, or encoding failed."""


class DegenerateVectorError(SimseaError):
    """A distance was requested for a histogram with no descriptors."""


class MatchingError(SimseaError):
    """Similarity matrix construction is impossible for this input."""


class LabelsError(SimseaError):
    """Ground-truth label file is malformed or incomplete."""


class ConfigError(SimseaError):
    """Pipeline configuration file or overrides are invalid."""


class MissingPrerequisiteError(SimseaError):
    """A stage was requested before the stage it depends on has run."""

    def __init__(self, stage: str, missing: str):
        super().__init__(
            f"stage '{stage}' requires artifacts from stage '{missing}' "
            f"which has not been run (or was run with a different config)"
        )
        self.stage = stage
        self.missing = missing


class StaleArtifactError(SimseaError):
    """An existing artifact was built under a different config digest."""


class PipelineLockedError(SimseaError):
    """Another pipeline instance holds the work-directory lock."""

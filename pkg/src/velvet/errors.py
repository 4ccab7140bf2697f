"""Exception hierarchy shared across the package."""


class VelvetError(Exception):
    """Base class for all errors raised by this package."""


# --- text pipeline ---

class EmptyReport(VelvetError):
    """No sentence survived segmentation filtering."""


class EmptyCorpus(VelvetError):
    """Statistics requested over an empty corpus."""


class CapExceeded(VelvetError):
    """A tokenized report violates the configured length caps."""


# --- encoders ---

class ShapeMismatch(VelvetError):
    """Weights, config, and inputs disagree on tensor shapes."""


class EmptyContext(VelvetError):
    """Cross-attention received zero context tokens."""


# --- volume pipeline ---

class RejectedRecord(VelvetError):
    """A volume record failed the slice-count filter."""


class CropLargerThanVolume(VelvetError):
    """Requested crop exceeds the volume extent."""


class BadBlockSize(VelvetError):
    """Inpainting block size does not divide the volume size."""


class NonSquarePlane(VelvetError):
    """In-plane rotation requires equal x/y extents."""


# --- objectives ---

class BatchTooSmall(VelvetError):
    """Contrastive objectives need at least two pairs."""


class NoValidUnits(VelvetError):
    """A pair contributed no valid local units to a local contrastive loss."""


class NoMaskedPositions(VelvetError):
    """MLM loss requested but no position carries a label."""


# --- harness ---

class MissingComponent(VelvetError):
    """A loss flag is enabled but its inputs were not computed."""


class NonFiniteLoss(VelvetError):
    """A loss component became NaN or infinite during training."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})


class VersionMismatch(VelvetError):
    """Checkpoint was written by an incompatible format version."""


class CorruptFile(VelvetError):
    """Checkpoint payload failed its checksum or is truncated."""


class ConfigError(VelvetError):
    """Run configuration is malformed or carries unknown keys."""

"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Iterable


class PosteriorMappingError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


# ============================================================================
# Configuration
# ============================================================================

class ConfigError(PosteriorMappingError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class UnsatisfiableFamilyError(ConfigError):
    """The requested language family cannot be realized."""


# ============================================================================
# Input validation
# ============================================================================

class DimensionMismatchError(PosteriorMappingError, ValueError):
    """Two arrays that must agree in shape do not."""


class InvalidDistributionError(PosteriorMappingError, ValueError):
    """A vector is not a probability distribution."""


class EmptyInputError(PosteriorMappingError, ValueError):
    """An operation received no data to work on."""


# ============================================================================
# Numerics
# ============================================================================

class NumericalError(PosteriorMappingError):
    exit_code = 4


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


# ============================================================================
# Artifacts
# ============================================================================

class ArtifactError(PosteriorMappingError):
    exit_code = 3


class MissingArtifactError(ArtifactError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"missing artifact: {path}")


class ChecksumMismatchError(ArtifactError):
    def __init__(self, paths: Iterable[str]):
        self.paths = sorted(paths)
        super().__init__("checksum mismatch: " + ", ".join(self.paths))


class FormatError(ArtifactError):
    """A binary or manifest file is malformed."""


class FingerprintMismatchError(ArtifactError, ValueError):
    """Streams computed from different corpora were combined."""


class ConfigHashMismatchError(ArtifactError):
    def __init__(self, path, expected: str, found: str):
        super().__init__(
            f"{path} was produced by config {found}, current config is {expected}"
        )


class MissingPairError(ArtifactError):
    def __init__(self, pairs: Iterable[tuple]):
        self.pairs = sorted(pairs)
        listed = ", ".join(f"{t}<-{s}" for t, s in self.pairs)
        super().__init__(f"missing language pairs: {listed}")

"""Exception types shared across the package.

Every failure mode that callers are expected to catch gets its own class so
that the command-line layer can map them onto exit codes without string
matching.
"""


class KslabError(Exception):
    """Base class for all package-specific errors."""


class DomainError(KslabError):
    """Inputs outside an operation's domain (grid mismatch, bad window, ...)."""


class BracketError(KslabError):
    """A root/transition bracket does not actually bracket what it should."""


class NonConvergenceError(KslabError):
    """An iterative method exhausted its budget without meeting tolerance."""


class OutsideTubeError(KslabError):
    """A field handed to the decomposition is not close to any rescaled profile."""


class SingularModulationError(KslabError):
    """The projected modulation system lost rank (scaling direction degenerate)."""


class CertificationError(KslabError):
    """A computed object failed its own a-posteriori certificate."""


class ConfigError(KslabError):
    """Malformed or unknown configuration input."""


class MissingArtifactError(KslabError):
    """A requested artifact does not exist on disk."""

"""kslab: a numerical laboratory for self-similar collapse in radial
aggregation-diffusion equations.

The package studies the radially symmetric parabolic-elliptic chemotaxis
system in three space dimensions through its partial-mass reduction, which
turns the coupled system into a scalar semilinear heat equation in five
effective dimensions. It computes the countable family of self-similar
collapse profiles by shooting, analyzes the linearized operator's spectrum in
Gaussian-weighted spaces, and integrates the renormalized (modulated) flow to
probe the stability of the ground profile and the codimension-one stable set
of the first excited one.
"""

__version__ = "0.1.0"

from .errors import (KslabError, DomainError, BracketError,  # noqa: E402
                     NonConvergenceError, OutsideTubeError,
                     SingularModulationError, CertificationError,
                     ConfigError, MissingArtifactError)

__all__ = ["__version__", "KslabError", "DomainError", "BracketError",
           "NonConvergenceError", "OutsideTubeError",
           "SingularModulationError", "CertificationError", "ConfigError",
           "MissingArtifactError"]

"""Exception hierarchy shared across the pipeline.

Every error raised on a user-facing path derives from PipelineError so the
command-line layer can map failures to a stable exit code.
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""


class SurfaceError(PipelineError):
    """Invalid or unusable triangulated surface."""


class MeshError(PipelineError):
    """Background-mesh construction or refinement failure."""


class CouplingError(PipelineError):
    """Marker/mesh coupling failure (location, conditioning, residuals)."""


class SolverError(PipelineError):
    """Flow-solver failure (divergence, non-finite fields, no convergence)."""


class InflowError(PipelineError):
    """Waveform or inflow-profile failure."""


class PostError(PipelineError):
    """Post-processing failure (interpolation, gradient recovery, export)."""


class ConfigError(PipelineError):
    """Malformed configuration file or invalid parameter combination."""

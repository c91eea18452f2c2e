"""labci: a miniature CI/CD system for reproducible computational experiments.

A coordination server hands jobs to attachable runner agents; every run binds
a content-addressed source snapshot to its logs and artifacts through an
append-only ledger, so an experiment can be re-run and byte-compared.
"""

from .config import (
    ConfigError,
    ConfigSyntaxError,
    ConfigValidationError,
    JobSpec,
    PipelineConfig,
    effective_stages,
    expand_matrix,
    lint,
    parse_config,
)
from .pipeline import JobResult, LocalBackend, run_job
from .server import Coordinator, LabCIServer, ServerConfig
from .store import Store, compare_builds

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConfigSyntaxError",
    "ConfigValidationError",
    "Coordinator",
    "JobResult",
    "JobSpec",
    "LabCIServer",
    "LocalBackend",
    "PipelineConfig",
    "ServerConfig",
    "Store",
    "__version__",
    "compare_builds",
    "effective_stages",
    "expand_matrix",
    "lint",
    "parse_config",
    "run_job",
]

from .backends import HttpBackend, InProcessBackend, SubprocessBackend
from .images import ImageThresholds, ImageVerdict, validate_image
from .manager import Artifact, ExecutionResult, SandboxConfig, SandboxManager, SessionHandle

__all__ = [
    "Artifact",
    "ExecutionResult",
    "HttpBackend",
    "ImageThresholds",
    "ImageVerdict",
    "InProcessBackend",
    "SandboxConfig",
    "SandboxManager",
    "SessionHandle",
    "SubprocessBackend",
    "validate_image",
]

"""Exception types raised across the amalgamation pipeline."""

from __future__ import annotations

from typing import Any, Dict, Optional, Sequence


class AmalgamationError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AmalgamationError, ValueError):
    """Two tensors (or a tensor and a layer) disagree on shape."""

    def __init__(self, message: str, *shapes: Sequence[int]) -> None:
        if shapes:
            rendered = " vs ".join(str(tuple(s)) for s in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)


class ConfigError(AmalgamationError, ValueError):
    """The pipeline configuration is malformed or violates a constraint."""


class CheckpointError(AmalgamationError, ValueError):
    """A checkpoint cannot be read back faithfully."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        self.path = path
        super().__init__(f"{message} [{path}]" if path else message)


class PipelineOrderError(AmalgamationError, RuntimeError):
    """A pipeline step was requested before the steps it depends on."""


class TrainingDivergedError(AmalgamationError, RuntimeError):
    """A training loss became NaN or infinite."""

    def __init__(
        self,
        stage: str,
        iteration: int,
        components: Dict[str, Any],
        block: Optional[int] = None,
    ) -> None:
        self.stage = stage
        self.iteration = iteration
        self.block = block
        self.components = dict(components)
        where = f"{stage}" + (f" block {block}" if block is not None else "")
        rendered = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"Non-finite loss during {where} at iteration {iteration} ({rendered})")

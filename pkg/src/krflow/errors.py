from __future__ import annotations

from typing import Optional, Tuple


class KRFlowError(RuntimeError):
    """Base class for every error raised by krflow."""


class ModelError(KRFlowError):
    """The polytope does not describe a toric Fano model."""


class ConfigError(KRFlowError):
    """Invalid or inconsistent run configuration."""


class CheckpointError(KRFlowError):
    """Checkpoint cannot be resumed (format version or config hash mismatch)."""


class ConvexityLossError(KRFlowError):
    def __init__(self, node: Tuple[int, ...], ratio: float):
        self.node = tuple(int(i) for i in node)
        self.ratio = float(ratio)
        super().__init__(f"Hessian not positive definite at node {self.node} (relative eigenvalue {self.ratio:.3e})")


class QuadratureTailError(KRFlowError):
    def __init__(self, ratio: float, tolerance: float, m: Optional[int] = None):
        self.ratio = float(ratio)
        self.tolerance = float(tolerance)
        self.m = m
        where = f" for m={m}" if m is not None else ""
        super().__init__(
            f"quadrature tail too heavy{where}: boundary/max integrand {self.ratio:.3e} > {self.tolerance:.1e}; widen L"
        )


class StepFailure(KRFlowError):
    def __init__(self, t: float, dt: float, reason: str):
        self.t = float(t)
        self.dt = float(dt)
        self.suggested_dt = 0.5 * float(dt)
        super().__init__(f"step from t={t:.6g} with dt={dt:.3e} failed ({reason}); retry with dt={self.suggested_dt:.3e}")

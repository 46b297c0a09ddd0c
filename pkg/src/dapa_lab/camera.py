"""Weak-perspective camera: ``p2d = s * (x, y) + (tx, ty)``, depth dropped."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor

MAX_SCALE = 10.0


@dataclass(frozen=True)
class WeakPerspective:
    scale: float
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.scale <= MAX_SCALE):
            raise ValueError(f"camera scale must lie in (0, {MAX_SCALE}], got {self.scale}")
        if not (np.isfinite(self.tx) and np.isfinite(self.ty)):
            raise ValueError("camera translation must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.tx, self.ty])

    @classmethod
    def from_array(cls, arr) -> "WeakPerspective":
        s, tx, ty = (float(v) for v in arr)
        return cls(s, tx, ty)


def project(points, cam):
    """Project ``(..., N, 3)`` points with camera ``(..., 3)`` = (s, tx, ty).

    ``cam`` may also be a :class:`WeakPerspective`. Tensor inputs give a
    differentiable tensor output.
    """
    if isinstance(cam, WeakPerspective):
        cam = cam.as_array()
    tensor_in = isinstance(points, Tensor) or isinstance(cam, Tensor)
    pts, cam = as_tensor(points), as_tensor(cam)
    lead = cam.shape[:-1]
    scale = cam[..., 0:1].reshape(lead + (1, 1))
    trans = cam[..., 1:3].reshape(lead + (1, 2))
    out = pts[..., :2] * scale + trans
    return out if tensor_in else out.data

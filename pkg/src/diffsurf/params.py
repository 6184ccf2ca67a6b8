"""Differentiable scene parameters: Tensor leaves over the surfel arrays.

The renderers (raster, transient) consume `SceneParams`, whose fields are
autodiff leaves. Rotation quaternions are stored unnormalized and normalized
differentiably inside `frames()`, so finite-difference perturbations of raw
parameters agree with analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import Scene


@dataclass
class SceneParams:
    """Tensor view of a scene; leaves are shared across all render calls."""

    positions: Tensor     # (N, 3)
    rotations: Tensor     # (N, 4), not necessarily unit norm
    scales: Tensor        # (N, 2)
    opacities: Tensor     # (N,)
    color_coeffs: Tensor  # (N, B, 3); only B = 1 is differentiable

    @staticmethod
    def from_scene(scene: Scene, requires_grad: bool = True,
                   dtype=np.float64) -> "SceneParams":
        def leaf(a):
            return Tensor(np.asarray(a, dtype=dtype).copy(), requires_grad=requires_grad)

        return SceneParams(leaf(scene.positions), leaf(scene.rotations),
                           leaf(scene.scales), leaf(scene.opacities),
                           leaf(scene.color_coeffs))

    def to_scene(self) -> Scene:
        rot = self.rotations.data
        rot = rot / np.linalg.norm(rot, axis=-1, keepdims=True)
        return Scene(self.positions.data.copy(), rot, self.scales.data.copy(),
                     self.opacities.data.copy(), self.color_coeffs.data.copy())

    @property
    def n_surfels(self) -> int:
        return self.positions.data.shape[0]

    def leaves(self) -> dict:
        return {"positions": self.positions, "rotations": self.rotations,
                "scales": self.scales, "opacities": self.opacities,
                "color_coeffs": self.color_coeffs}

    def subset(self, indices: np.ndarray) -> "SceneParams":
        """View of selected surfels; gradients scatter back into the leaves."""
        return SceneParams(self.positions[indices], self.rotations[indices],
                           self.scales[indices], self.opacities[indices],
                           self.color_coeffs[indices])

    def frames(self) -> tuple:
        """Differentiable rotation columns (e1, e2, normal), each (N, 3)."""
        q = self.rotations
        norm = ad.sqrt((q * q).sum(axis=-1, keepdims=True))
        q = q / norm
        w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        e1 = ad.stack([1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z),
                       2.0 * (x * z - w * y)], axis=-1)
        e2 = ad.stack([2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z),
                       2.0 * (y * z + w * x)], axis=-1)
        nrm = ad.stack([2.0 * (x * z + w * y), 2.0 * (y * z - w * x),
                        1.0 - 2.0 * (x * x + y * y)], axis=-1)
        return e1, e2, nrm

    def base_colors(self) -> Tensor:
        """Differentiable degree-0 colors (N, 3); higher SH bands are rendered
        view-independently through their DC term only."""
        from .core import SH_C0

        return self.color_coeffs[:, 0, :] * SH_C0 + 0.5


def as_params(scene, dtype=np.float64) -> SceneParams:
    """Coerce a Scene to constant SceneParams; pass SceneParams through."""
    if isinstance(scene, SceneParams):
        return scene
    return SceneParams.from_scene(scene, requires_grad=False, dtype=dtype)

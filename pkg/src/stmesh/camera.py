"""Pinhole camera used by the scene generator and detection decoding.

Camera frame follows the usual computer-vision convention: x right, y down,
z forward; u = cx + f*X/Z, v = cy + f*Y/Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float

    @staticmethod
    def default_for_image(height, width):
        return CameraIntrinsics(float(max(height, width)), width / 2.0, height / 2.0)

    def project(self, points):
        """N x 3 camera-space points -> (N x 2 pixel coords, N depths)."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        u = self.cx + self.focal * points[..., 0] / z
        v = self.cy + self.focal * points[..., 1] / z
        return np.stack([u, v], axis=-1), z

    def back_project(self, u, v, depth):
        if depth <= 0:
            raise ValueError(f"nonpositive depth {depth}")
        return np.array(
            [
                (u - self.cx) * depth / self.focal,
                (v - self.cy) * depth / self.focal,
                depth,
            ]
        )

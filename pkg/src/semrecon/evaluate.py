"""Quantitative evaluation: hard mask IoU, keypoint transfer through the
texture flow and through the camera (PCK), and camera rotation error.

Keypoint coordinates live in the rasterizer's normalized [-1, 1]^2 image
frame; the PCK threshold is alpha times the longer image side (2.0 in
normalized units).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera, project
from .mesh import Mesh, UVMapping
from .texflow import TextureFlow

PCK_SIDE = 2.0  # length of the longer image side in normalized coordinates


@dataclass
class KeypointSet:
    names: list[str]
    xy: np.ndarray       # (N, 2) in [-1, 1]^2
    visible: np.ndarray  # (N,) bool

    @staticmethod
    def from_dict(d: dict) -> "KeypointSet":
        names = sorted(d.keys())
        xy = np.array([d[n]["xy"] for n in names], dtype=np.float64)
        vis = np.array([bool(d[n]["visible"]) for n in names])
        return KeypointSet(names, xy, vis)


def mask_iou(rendered: torch.Tensor, gt: torch.Tensor,
             threshold: float = 0.5) -> float:
    """Hard IoU after thresholding the rendered silhouette; 1.0 if both empty."""
    r = torch.as_tensor(rendered) > threshold
    g = torch.as_tensor(gt, dtype=torch.float64) > 0.5
    if r.shape != g.shape:
        raise ValueError("mask dims differ")
    union = (r | g).sum()
    if int(union) == 0:
        return 1.0
    return float((r & g).sum() / union)


def _pck(hits: list[bool | None]) -> float:
    scored = [h for h in hits if h is not None]
    if not scored:
        return 0.0
    return 100.0 * sum(bool(h) for h in scored) / len(scored)


def kt_flow(src_flow: TextureFlow, tgt_flow: TextureFlow, mapping: UVMapping,
            src_kp: KeypointSet, tgt_kp: KeypointSet,
            alpha: float = 0.1) -> float:
    """Transfer keypoints source -> template face (via the source flow) ->
    target image (center of the target texels on that face); PCK at alpha."""
    src_grid = src_flow.grid.reshape(-1, 2).numpy()
    tgt_grid = tgt_flow.grid.reshape(-1, 2).numpy()
    fidx = mapping.face_index.reshape(-1)
    thresh = alpha * PCK_SIDE
    hits: list[bool | None] = []
    for i in range(len(src_kp.names)):
        if not (src_kp.visible[i] and tgt_kp.visible[i]):
            hits.append(None)
            continue
        texel = int(np.argmin(((src_grid - src_kp.xy[i]) ** 2).sum(axis=1)))
        face = fidx[texel]
        members = fidx == face
        if not members.any():
            hits.append(False)
            continue
        pred = tgt_grid[members].mean(axis=0)
        hits.append(bool(np.linalg.norm(pred - tgt_kp.xy[i]) <= thresh))
    return _pck(hits)


def kt_camera(src_cam: Camera, tgt_cam: Camera, template: Mesh,
              src_kp: KeypointSet, tgt_kp: KeypointSet,
              alpha: float = 0.1) -> float:
    """Transfer via the nearest projected template vertex re-projected with the
    target camera; PCK at alpha. Occlusion is not filtered."""
    src_proj = project(template.vertices, src_cam).numpy()
    tgt_proj = project(template.vertices, tgt_cam).numpy()
    thresh = alpha * PCK_SIDE
    hits: list[bool | None] = []
    for i in range(len(src_kp.names)):
        if not (src_kp.visible[i] and tgt_kp.visible[i]):
            hits.append(None)
            continue
        v = int(np.argmin(((src_proj - src_kp.xy[i]) ** 2).sum(axis=1)))
        hits.append(bool(np.linalg.norm(tgt_proj[v] - tgt_kp.xy[i]) <= thresh))
    return _pck(hits)


def rotation_error(cam: Camera, gt_quat) -> float:
    """Geodesic angle between rotations in degrees, double-cover safe."""
    q = cam.quaternion / cam.quaternion.norm()
    g = torch.as_tensor(gt_quat, dtype=torch.float64)
    g = g / g.norm()
    dot = float((q * g).sum().abs().clamp(max=1.0))
    return float(np.degrees(2.0 * np.arccos(dot)))

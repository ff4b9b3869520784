"""Flat per-instance parameter vector (vertex offsets, cameras, flow grid),
reverse-mode gradients of a scalar objective over it, and a central
finite-difference checker used as the universal gradient oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .camera import Camera
from .texflow import TextureFlow

CAMERA_DOF = 7  # scale, tx, ty, qw, qx, qy, qz


@dataclass(frozen=True)
class ParamLayout:
    n_vertices: int
    k_hyp: int
    h_uv: int
    w_uv: int

    @property
    def n_dv(self) -> int:
        return 3 * self.n_vertices

    @property
    def n_cam(self) -> int:
        return CAMERA_DOF * self.k_hyp

    @property
    def n_flow(self) -> int:
        return 2 * self.h_uv * self.w_uv

    @property
    def size(self) -> int:
        return self.n_dv + self.n_cam + self.n_flow

    def segments(self) -> dict[str, tuple[int, int]]:
        o1 = self.n_dv
        o2 = o1 + self.n_cam
        return {"dv": (0, o1), "cameras": (o1, o2), "flow": (o2, self.size)}

    # Views into a flat torch tensor; slicing keeps the autograd graph.
    def dv(self, flat: torch.Tensor) -> torch.Tensor:
        return flat[: self.n_dv].reshape(self.n_vertices, 3)

    def camera(self, flat: torch.Tensor, hyp: int = 0) -> Camera:
        o = self.n_dv + CAMERA_DOF * hyp
        seg = flat[o: o + CAMERA_DOF]
        return Camera(seg[0], seg[1:3], seg[3:7])

    def flow(self, flat: torch.Tensor) -> TextureFlow:
        o = self.n_dv + self.n_cam
        return TextureFlow(flat[o:].reshape(self.h_uv, self.w_uv, 2))


@dataclass
class ParamVector:
    layout: ParamLayout
    data: np.ndarray  # (layout.size,) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.layout.size,):
            raise ValueError("parameter vector length does not match layout")

    @staticmethod
    def zeros(layout: ParamLayout) -> "ParamVector":
        return ParamVector(layout, np.zeros(layout.size))

    @staticmethod
    def pack(layout: ParamLayout, dv: torch.Tensor, cameras: list[Camera],
             flow: TextureFlow) -> "ParamVector":
        if len(cameras) != layout.k_hyp:
            raise ValueError("camera count does not match layout")
        parts = [np.asarray(dv.detach() if torch.is_tensor(dv) else dv,
                            dtype=np.float64).reshape(-1)]
        for cam in cameras:
            parts.append(np.concatenate([
                [float(cam.scale)],
                cam.translation.detach().numpy(),
                cam.quaternion.detach().numpy()]))
        parts.append(flow.grid.detach().numpy().reshape(-1))
        return ParamVector(layout, np.concatenate(parts))

    def unpack(self) -> tuple[torch.Tensor, list[Camera], TextureFlow]:
        flat = torch.as_tensor(self.data)
        return (self.layout.dv(flat),
                [self.layout.camera(flat, k) for k in range(self.layout.k_hyp)],
                self.layout.flow(flat))

    def torch_leaf(self) -> torch.Tensor:
        return torch.tensor(self.data, dtype=torch.float64, requires_grad=True)


Objective = Callable[[torch.Tensor], torch.Tensor]


def grad(objective: Objective, params: ParamVector) -> ParamVector:
    """Reverse-mode gradient of the scalar objective at the given parameters."""
    flat = params.torch_leaf()
    value = objective(flat)
    if not torch.isfinite(value):
        raise ArithmeticError(
            f"objective is non-finite: {float(value.detach())}")
    value.backward()
    g = flat.grad
    if g is None:
        g = torch.zeros_like(flat)
    return ParamVector(params.layout, g.detach().numpy().copy())


def fd_errors(objective: Objective, params: ParamVector, step: float = 1e-6,
              indices: np.ndarray | None = None) -> np.ndarray:
    """Per-coordinate relative error between the analytic gradient and central
    differences, denominator max(|g|, |g_fd|, 1e-8)."""
    if step <= 0:
        raise ValueError("step must be positive")
    g = grad(objective, params).data
    if indices is None:
        indices = np.arange(params.data.shape[0])
    indices = np.asarray(indices)
    errs = np.zeros(indices.shape[0])
    for j, i in enumerate(indices):
        hi = params.data.copy(); hi[i] += step
        lo = params.data.copy(); lo[i] -= step
        f_hi = float(objective(torch.as_tensor(hi)))
        f_lo = float(objective(torch.as_tensor(lo)))
        g_fd = (f_hi - f_lo) / (2.0 * step)
        denom = max(abs(g[i]), abs(g_fd), 1e-8)
        errs[j] = abs(g[i] - g_fd) / denom
    return errs


def fd_check(objective: Objective, params: ParamVector, step: float = 1e-6,
             indices: np.ndarray | None = None) -> float:
    """Max relative error between the analytic gradient and central differences
    over the sampled coordinates."""
    return float(fd_errors(objective, params, step, indices).max(initial=0.0))

"""Texture flow: per-texel source-image sampling coordinates, bilinear image
sampling, instance semantic UV maps and their canonical aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .camera import Camera, project
from .mesh import Mesh, UVMapping


def _as_f64(x):
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class TextureFlow:
    grid: torch.Tensor  # (H_uv, W_uv, 2), coordinates in [-1, 1]^2

    def __post_init__(self):
        self.grid = _as_f64(self.grid)


@dataclass
class PartMap:
    probs: torch.Tensor  # (H, W, N_p + 1), background last, rows on the simplex

    def __post_init__(self):
        self.probs = _as_f64(self.probs)

    @property
    def n_parts(self) -> int:
        return self.probs.shape[-1] - 1

    def foreground(self) -> torch.Tensor:
        """(H, W, N_p) part channels without the background."""
        return self.probs[..., :-1]


@dataclass
class CanonicalUV:
    probs: torch.Tensor  # (H_uv, W_uv, N_p)
    sample_count: int = 0

    def __post_init__(self):
        self.probs = _as_f64(self.probs)


def sample_image(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample an (H, W, C) image at (..., 2) coords in [-1, 1]^2.

    Coordinates use the normalized pixel-center convention of the rasterizer
    (x right, y up); samples outside the image clamp to the border. The result
    is differentiable w.r.t. both the image and the coordinates.
    """
    image = _as_f64(image)
    coords = _as_f64(coords)
    h, w = image.shape[0], image.shape[1]
    cf = torch.clamp((coords[..., 0] + 1.0) / 2.0 * w - 0.5, 0.0, w - 1.0)
    rf = torch.clamp((1.0 - coords[..., 1]) / 2.0 * h - 0.5, 0.0, h - 1.0)
    c0 = cf.detach().floor().long().clamp(0, w - 1)
    r0 = rf.detach().floor().long().clamp(0, h - 1)
    c1 = (c0 + 1).clamp(0, w - 1)
    r1 = (r0 + 1).clamp(0, h - 1)
    fc = (cf - c0.double())[..., None]
    fr = (rf - r0.double())[..., None]
    top = image[r0, c0] * (1 - fc) + image[r0, c1] * fc
    bot = image[r1, c0] * (1 - fc) + image[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def semantic_uv(flow: TextureFlow, parts: PartMap) -> torch.Tensor:
    """Instance semantic UV map: part probabilities sampled at the flow coords.

    The background channel is dropped; the remaining channels are kept as
    sampled (not renormalized). Shape (H_uv, W_uv, N_p).
    """
    return sample_image(parts.foreground(), flow.grid)


def aggregate_canonical(maps: list[torch.Tensor]) -> CanonicalUV:
    """Elementwise mean of instance semantic UV maps."""
    if not maps:
        raise ValueError("need at least one semantic UV map to aggregate")
    stack = torch.stack([_as_f64(m) for m in maps])
    return CanonicalUV(stack.mean(dim=0), sample_count=len(maps))


def init_flow_from_projection(mesh: Mesh, cam: Camera,
                              mapping: UVMapping) -> TextureFlow:
    """Warm-start flow: each texel samples where its surface point projects."""
    points = mapping.surface_points(mesh)           # (H_uv, W_uv, 3)
    coords = project(points.reshape(-1, 3), cam)
    coords = coords.clamp(-1.0, 1.0).reshape(*mapping.shape, 2)
    return TextureFlow(coords.detach())

"""Soft rasterization: per-face pixel-coverage probabilities, silhouettes and
softly-blended attribute maps.

Coverage of face j at pixel m is sigmoid(sign * d^2 / sigma) with d the 2D
distance from the pixel center to the projected triangle boundary (sign
positive inside). The silhouette composites coverages as
1 - prod_j (1 - W_j^m); attributes blend by a softmax over
(log coverage + depth / gamma), gated by the silhouette with a background
term. Everything is differentiable w.r.t. vertices, camera and attributes.

Coverage is only evaluated on (face, pixel) pairs inside each face's
bounding box dilated by 6 * sqrt(sigma) plus one pixel; truncated entries
are below sigmoid(-36) ~ 2e-16, so the dense coverage map reconstructed
from the sparse pairs is numerically indistinguishable from the full one.

Image coordinates are normalized to [-1, 1] with y up; pixel (row, col) is
centered at ((col+0.5)/W*2-1, 1-(row+0.5)/H*2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera, camera_depths, project
from .mesh import Mesh, UVMapping, sample_uv_grid


@dataclass
class RasterConfig:
    height: int = 64
    width: int = 64
    sigma: float = 1e-4
    gamma: float = 1e-4
    background: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("sigma and gamma must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image must have at least one pixel")


@dataclass
class SparseCoverage:
    """Per-(face, pixel) coverage probabilities within dilated face bboxes."""
    n_faces: int
    n_pixels: int
    pair_face: torch.Tensor   # (N,) int64
    pair_pixel: torch.Tensor  # (N,) int64
    weight: torch.Tensor      # (N,) coverage in [0, 1)

    def dense(self) -> torch.Tensor:
        """(F, H*W) coverage map; zeros outside the dilated bboxes."""
        out = torch.zeros(self.n_faces, self.n_pixels, dtype=torch.float64)
        return out.index_put((self.pair_face, self.pair_pixel), self.weight,
                             accumulate=True)

    def face_weight_sums(self) -> torch.Tensor:
        return torch.zeros(self.n_faces, dtype=torch.float64).index_add_(
            0, self.pair_face, self.weight)

    def face_centers(self, pixel_coords: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Coverage-weighted mean pixel coordinate per face, plus weight sums."""
        wsum = self.face_weight_sums()
        wxy = torch.zeros(self.n_faces, 2, dtype=torch.float64).index_add_(
            0, self.pair_face, self.weight[:, None] * pixel_coords[self.pair_pixel])
        return wxy / wsum.clamp_min(1e-30)[:, None], wsum


@dataclass
class RasterOutput:
    silhouette: torch.Tensor    # (H, W) in [0, 1]
    attributes: torch.Tensor    # (H, W, C)
    coverage: SparseCoverage
    pixel_coords: torch.Tensor  # (H*W, 2) pixel centers in [-1, 1]

    @property
    def face_probs(self) -> torch.Tensor:
        """Dense (F, H*W) per-face coverage probability map."""
        return self.coverage.dense()


def pixel_grid(height: int, width: int) -> torch.Tensor:
    """(H*W, 2) normalized pixel-center coordinates, row-major, y up."""
    x = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    y = 1.0 - (np.arange(height) + 0.5) / height * 2.0
    xx, yy = np.meshgrid(x, y)
    return torch.as_tensor(np.stack([xx, yy], axis=-1).reshape(-1, 2))


def _bbox_pairs(tri2d: np.ndarray, height: int, width: int,
                dilate: float) -> tuple[np.ndarray, np.ndarray]:
    """(face, pixel) candidate pairs from dilated face bounding boxes."""
    xmin = tri2d[:, :, 0].min(axis=1) - dilate
    xmax = tri2d[:, :, 0].max(axis=1) + dilate
    ymin = tri2d[:, :, 1].min(axis=1) - dilate
    ymax = tri2d[:, :, 1].max(axis=1) + dilate
    overlap = (xmax > -1.0) & (xmin < 1.0) & (ymax > -1.0) & (ymin < 1.0)

    c0 = np.clip(np.floor((xmin + 1.0) / 2.0 * width - 0.5), 0, width - 1).astype(np.int64)
    c1 = np.clip(np.ceil((xmax + 1.0) / 2.0 * width - 0.5), 0, width - 1).astype(np.int64)
    r0 = np.clip(np.floor((1.0 - ymax) / 2.0 * height - 0.5), 0, height - 1).astype(np.int64)
    r1 = np.clip(np.ceil((1.0 - ymin) / 2.0 * height - 0.5), 0, height - 1).astype(np.int64)

    widths = np.where(overlap, c1 - c0 + 1, 0)
    heights = np.where(overlap, r1 - r0 + 1, 0)
    counts = widths * heights
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    pair_face = np.repeat(np.arange(tri2d.shape[0]), counts)
    cum = np.concatenate([[0], np.cumsum(counts)])
    local = np.arange(total) - cum[pair_face]
    w_f = widths[pair_face]
    dr = local // w_f
    dc = local - dr * w_f
    pair_pixel = (r0[pair_face] + dr) * width + (c0[pair_face] + dc)
    return pair_face, pair_pixel


def _pair_coverage(tri2d: torch.Tensor, pair_face: torch.Tensor,
                   pix_xy: torch.Tensor, sigma: float
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Coverage and clipped barycentrics for each (face, pixel) pair."""
    tri = tri2d[pair_face]                     # (N, 3, 2)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
             - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))
    valid = area2.abs() > 1e-12

    d2 = None
    crosses = []
    for e0, e1 in ((a, b), (b, c), (c, a)):
        ev = e1 - e0
        pv = pix_xy - e0
        ee = (ev * ev).sum(-1).clamp_min(1e-30)
        t = ((pv * ev).sum(-1) / ee).clamp(0.0, 1.0)
        diff = pv - ev * t[:, None]
        dd = (diff * diff).sum(-1)
        d2 = dd if d2 is None else torch.minimum(d2, dd)
        crosses.append(ev[:, 0] * pv[:, 1] - ev[:, 1] * pv[:, 0])
    cr = torch.stack(crosses)
    inside = (cr >= 0).all(0) | (cr <= 0).all(0)
    sign = torch.where(inside, 1.0, -1.0)
    cov = torch.sigmoid(sign * d2 / sigma) * valid

    safe_det = torch.where(area2.abs() > 1e-12, area2, torch.ones_like(area2))
    px = pix_xy[:, 0] - a[:, 0]
    py = pix_xy[:, 1] - a[:, 1]
    w1 = ((c[:, 1] - a[:, 1]) * px - (c[:, 0] - a[:, 0]) * py) / safe_det
    w2 = ((b[:, 0] - a[:, 0]) * py - (b[:, 1] - a[:, 1]) * px) / safe_det
    bary = torch.stack([1.0 - w1 - w2, w1, w2], dim=-1).clamp_min(0.0)
    bary = bary / bary.sum(-1, keepdim=True).clamp_min(1e-12)
    return cov, bary


def sparse_coverage(tri2d: torch.Tensor, cfg: RasterConfig,
                    pixel_coords: torch.Tensor) -> SparseCoverage:
    """Soft coverage of projected triangles (F, 3, 2) over the pixel grid,
    evaluated on dilated-bbox (face, pixel) pairs."""
    h, w = cfg.height, cfg.width
    dilate = 6.0 * np.sqrt(cfg.sigma) + 2.0 / max(h, w)
    pf_np, pp_np = _bbox_pairs(tri2d.detach().numpy(), h, w, dilate)
    pair_face = torch.as_tensor(pf_np)
    pair_pixel = torch.as_tensor(pp_np)
    if pf_np.size == 0:
        return SparseCoverage(tri2d.shape[0], h * w, pair_face, pair_pixel,
                              torch.zeros(0, dtype=torch.float64))
    cov, _ = _pair_coverage(tri2d, pair_face, pixel_coords[pair_pixel], cfg.sigma)
    return SparseCoverage(tri2d.shape[0], h * w, pair_face, pair_pixel, cov)


def soft_coverage(tri2d: torch.Tensor, pixels: torch.Tensor,
                  sigma: float) -> torch.Tensor:
    """Dense coverage (F, P) of projected triangles at arbitrary pixel points.

    Direct (untruncated) evaluation; used as the closed-form reference for
    the sparse path and for small scenes.
    """
    n_faces, n_pix = tri2d.shape[0], pixels.shape[0]
    pair_face = torch.arange(n_faces).repeat_interleave(n_pix)
    pair_pixel = torch.arange(n_pix).repeat(n_faces)
    cov, _ = _pair_coverage(tri2d, pair_face, pixels[pair_pixel], sigma)
    return cov.reshape(n_faces, n_pix)


def rasterize(mesh: Mesh, cam: Camera, per_vertex_attrs: torch.Tensor,
              cfg: RasterConfig) -> RasterOutput:
    """Render per-vertex attributes (V, C) to an (H, W, C) map plus coverage."""
    attrs = torch.as_tensor(per_vertex_attrs, dtype=torch.float64)
    if attrs.dim() == 1:
        attrs = attrs[:, None]
    if attrs.shape[0] != mesh.n_vertices:
        raise ValueError("attribute count does not match vertex count")
    h, w, n_ch = cfg.height, cfg.width, attrs.shape[1]
    pixels = pixel_grid(h, w)
    n_pix = h * w

    if mesh.n_faces == 0:
        empty = torch.zeros(0, dtype=torch.int64)
        return RasterOutput(
            silhouette=torch.zeros(h, w, dtype=torch.float64),
            attributes=torch.full((h, w, n_ch), cfg.background,
                                  dtype=torch.float64),
            coverage=SparseCoverage(0, n_pix, empty, empty,
                                    torch.zeros(0, dtype=torch.float64)),
            pixel_coords=pixels)

    verts2d = project(mesh.vertices, cam)
    depth = camera_depths(mesh.vertices, cam)
    tri2d = verts2d[mesh.faces]            # (F, 3, 2)
    triz = depth[mesh.faces]               # (F, 3)

    dilate = 6.0 * np.sqrt(cfg.sigma) + 2.0 / max(h, w)
    pf_np, pp_np = _bbox_pairs(tri2d.detach().numpy(), h, w, dilate)
    pair_face = torch.as_tensor(pf_np)
    pair_pixel = torch.as_tensor(pp_np)

    if pf_np.size == 0:
        return RasterOutput(
            silhouette=torch.zeros(h, w, dtype=torch.float64),
            attributes=torch.full((h, w, n_ch), cfg.background,
                                  dtype=torch.float64),
            coverage=SparseCoverage(mesh.n_faces, n_pix, pair_face, pair_pixel,
                                    torch.zeros(0, dtype=torch.float64)),
            pixel_coords=pixels)

    pix_xy = pixels[pair_pixel]
    cov, bary = _pair_coverage(tri2d, pair_face, pix_xy, cfg.sigma)

    # Silhouette: 1 - prod_j (1 - W_j), accumulated per pixel in log space.
    log_miss = torch.log1p(-cov.clamp(max=1.0 - 1e-15))
    sil_log = torch.zeros(n_pix, dtype=torch.float64).index_add_(
        0, pair_pixel, log_miss)
    silhouette = 1.0 - torch.exp(sil_log)

    # Face weights per pixel: softmax over (log coverage + depth / gamma).
    z = (bary * triz[pair_face]).sum(-1)
    logits = torch.log(cov.clamp_min(1e-300)) + z / cfg.gamma
    peak = torch.full((n_pix,), -np.inf, dtype=torch.float64)
    peak = peak.scatter_reduce(0, pair_pixel, logits.detach(), reduce="amax")
    peak = torch.where(torch.isinf(peak), torch.zeros_like(peak), peak)
    expo = torch.exp(logits - peak[pair_pixel])
    denom = torch.zeros(n_pix, dtype=torch.float64).index_add_(
        0, pair_pixel, expo)
    weight = expo / denom.clamp_min(1e-300)[pair_pixel]

    face_attr = attrs[mesh.faces[pair_face]]        # (N, 3, C)
    contrib = (weight[:, None] * (bary[:, :, None] * face_attr).sum(1))
    blended = torch.zeros(n_pix, n_ch, dtype=torch.float64).index_add_(
        0, pair_pixel, contrib)
    out = silhouette[:, None] * blended + \
        (1.0 - silhouette[:, None]) * cfg.background

    return RasterOutput(
        silhouette=silhouette.reshape(h, w),
        attributes=out.reshape(h, w, n_ch),
        coverage=SparseCoverage(mesh.n_faces, n_pix, pair_face, pair_pixel, cov),
        pixel_coords=pixels)


def render_silhouette(mesh: Mesh, cam: Camera, cfg: RasterConfig) -> torch.Tensor:
    ones = torch.ones(mesh.n_vertices, 1, dtype=torch.float64)
    return rasterize(mesh, cam, ones, cfg).silhouette


def render_part_probs(mesh: Mesh, cam: Camera, canonical_probs: torch.Tensor,
                      mapping: UVMapping, cfg: RasterConfig) -> torch.Tensor:
    """Render the canonical per-part probabilities onto the image, (H, W, N_p).

    Per-vertex probabilities are the canonical map sampled at each vertex uv;
    the grid dims must match the uv mapping used elsewhere.
    """
    probs = torch.as_tensor(canonical_probs, dtype=torch.float64)
    if probs.shape[:2] != mapping.shape:
        raise ValueError("canonical grid dims do not match the uv mapping")
    vert_probs = sample_uv_grid(probs, mesh.uv)
    return rasterize(mesh, cam, vert_probs, cfg).attributes

"""The fitting objective: silhouette IoU, image reconstruction, semantic
probability/vertex consistency, texture cycle consistency and mesh
regularizers. Every term returns a scalar tensor differentiable w.r.t. the
optimized parameters (vertex offsets, camera fields, flow grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .camera import Camera, project
from .mesh import (Mesh, UVMapping, apply_deformation, edge_regularizer,
                   laplacian_energy, sample_uv_grid)
from .softras import RasterConfig, RasterOutput, rasterize, sparse_coverage
from .texflow import PartMap, TextureFlow, sample_image


@dataclass
class LossWeights:
    w_iou: float = 1.0
    w_img: float = 1.0
    w_sp: float = 1.0
    w_sv: float = 0.1
    w_tcyc: float = 0.5
    w_lap: float = 0.1
    w_edge: float = 0.1

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    total: torch.Tensor = None

    def to_dict(self) -> dict:
        d = {k: float(v.detach()) for k, v in self.terms.items()}
        d["total"] = float(self.total.detach())
        return d


def neg_iou(rendered: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Negative soft IoU, in [-1, 0]; 0 when both masks are empty."""
    r = rendered.reshape(-1)
    g = torch.as_tensor(gt_mask, dtype=torch.float64).reshape(-1)
    inter = (r * g).sum()
    union = (r + g - r * g).sum()
    if float(union.detach()) == 0.0:
        return torch.zeros((), dtype=torch.float64)
    return -inter / union


def image_loss(rendered: torch.Tensor, target: torch.Tensor,
               fg_mask: torch.Tensor,
               scales: tuple[float, ...] = (1.0, 0.5, 0.25)) -> torch.Tensor:
    """Multi-scale foreground-masked mean squared error between RGB images.

    Stands in for a perceptual distance; mean over pixels and channels at
    scales 1, 1/2 and 1/4, averaged over scales.
    """
    rendered = rendered.permute(2, 0, 1)[None]  # (1, C, H, W)
    target = torch.as_tensor(target, dtype=torch.float64).permute(2, 0, 1)[None]
    mask = torch.as_tensor(fg_mask, dtype=torch.float64)[None, None]
    losses = []
    for s in scales:
        k = int(round(1.0 / s))
        if k > 1:
            r = F.avg_pool2d(rendered, k)
            t = F.avg_pool2d(target, k)
            m = F.avg_pool2d(mask, k)
        else:
            r, t, m = rendered, target, mask
        denom = m.sum()
        if float(denom.detach()) == 0.0:
            losses.append(torch.zeros((), dtype=torch.float64))
            continue
        err = ((r - t) ** 2).mean(dim=1, keepdim=True)
        losses.append((err * m).sum() / denom)
    return torch.stack(losses).mean()


def semantic_prob_loss(parts: PartMap, rendered_parts: torch.Tensor) -> torch.Tensor:
    """MSE between the input part probabilities and the rendered canonical map."""
    target = parts.foreground()
    if rendered_parts.shape != target.shape:
        raise ValueError("rendered part map dims do not match the part map")
    return ((rendered_parts - target) ** 2).mean()


def chamfer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Symmetric Chamfer with squared distances and per-direction means."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def part_pixel_sets(parts: PartMap, pixel_coords: torch.Tensor,
                    samples_per_part: int, seed: int) -> list[torch.Tensor | None]:
    """Per part: coordinates of pixels whose argmax channel is that part,
    subsampled to at most samples_per_part with a seeded draw."""
    labels = parts.probs.argmax(dim=-1).reshape(-1)
    rng = np.random.default_rng(seed)
    out = []
    for p in range(parts.n_parts):
        idx = torch.nonzero(labels == p, as_tuple=False).reshape(-1)
        if idx.numel() == 0:
            out.append(None)
            continue
        if idx.numel() > samples_per_part:
            pick = rng.choice(idx.numel(), size=samples_per_part, replace=False)
            idx = idx[np.sort(pick)]
        out.append(pixel_coords[idx])
    return out


def semantic_vertex_loss(template: Mesh, labels: torch.Tensor, cam: Camera,
                         parts: PartMap, pixel_coords: torch.Tensor,
                         samples_per_part: int = 256, seed: int = 0) -> torch.Tensor:
    """Sum over parts of Chamfer(projected part vertices, part pixels) / |V_p|.

    Uses the category template's vertices (not the instance mesh) so the
    gradient drives the camera. Parts without vertices or pixels are skipped.
    """
    if labels.shape[0] != template.n_vertices:
        raise ValueError("label count does not match template vertex count")
    proj = project(template.vertices, cam)
    pix_sets = part_pixel_sets(parts, pixel_coords, samples_per_part, seed)
    total = torch.zeros((), dtype=torch.float64)
    for p, pix in enumerate(pix_sets):
        vidx = torch.nonzero(labels == p, as_tuple=False).reshape(-1)
        if pix is None or vidx.numel() == 0:
            continue
        total = total + chamfer(proj[vidx], pix) / vidx.numel()
    return total


def _face_flow_centers_texel(flow: TextureFlow, mapping: UVMapping,
                             n_faces: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-face mean flow coordinate over the texels assigned to the face."""
    fidx = torch.as_tensor(mapping.face_index.reshape(-1))
    coords = flow.grid.reshape(-1, 2)
    sums = torch.zeros(n_faces, 2, dtype=torch.float64).index_add_(0, fidx, coords)
    counts = torch.zeros(n_faces, dtype=torch.float64).index_add_(
        0, fidx, torch.ones(fidx.shape[0], dtype=torch.float64))
    centers = sums / counts.clamp_min(1.0)[:, None]
    return centers, counts > 0


def _face_flow_centers_pixel(flow: TextureFlow, mapping: UVMapping,
                             raster: RasterOutput, n_faces: int,
                             sigma: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-face soft centroid of the image pixels the flow maps to the face.

    Each face's texels give (barycentric, flow coordinate) samples; the affine
    image-space triangle implied by the flow is recovered by a least-squares
    fit, and the centroid is taken under the same soft coverage used by the
    rasterizer. When the flow equals the camera projection this reproduces the
    rendered centroid exactly.
    """
    fidx = torch.as_tensor(mapping.face_index.reshape(-1))
    bary = torch.as_tensor(mapping.barycentric.reshape(-1, 3))
    coords = flow.grid.reshape(-1, 2)
    n_tex = fidx.shape[0]

    btb = torch.zeros(n_faces, 3, 3, dtype=torch.float64).index_add_(
        0, fidx, bary[:, :, None] * bary[:, None, :])
    btf = torch.zeros(n_faces, 3, 2, dtype=torch.float64).index_add_(
        0, fidx, bary[:, :, None] * coords[:, None, :])
    det = torch.linalg.det(btb)
    ok = det.abs() > 1e-10
    eye = torch.eye(3, dtype=torch.float64).expand(n_faces, 3, 3)
    safe = torch.where(ok[:, None, None], btb, eye)
    corners = torch.linalg.solve(safe, btf)            # (F, 3, 2)

    h, w = raster.silhouette.shape
    cov = sparse_coverage(corners, RasterConfig(h, w, sigma=sigma),
                          raster.pixel_coords)
    centers, wsum = cov.face_centers(raster.pixel_coords)
    return centers, ok & (wsum > 1e-8)


def texture_cycle_loss(flow: TextureFlow, mapping: UVMapping,
                       raster: RasterOutput, sigma: float = 1e-4,
                       mode: str = "pixel") -> torch.Tensor:
    """Mean over faces of the squared gap between the flow-side center and the
    coverage-weighted rendered center of each face.

    mode "pixel" recovers the flow-implied image-space triangle per face and
    takes its soft pixel centroid (exact cycle closure for projection-derived
    flows); mode "texel" averages the raw flow coordinates of the face's
    texels. Faces with negligible coverage or no texels are excluded.
    """
    n_faces = raster.coverage.n_faces
    if n_faces == 0:
        return torch.zeros((), dtype=torch.float64)
    if mode == "pixel":
        c_in, in_ok = _face_flow_centers_pixel(flow, mapping, raster, n_faces, sigma)
    elif mode == "texel":
        c_in, in_ok = _face_flow_centers_texel(flow, mapping, n_faces)
    else:
        raise ValueError(f"unknown texture cycle mode: {mode!r}")

    c_out, wsum = raster.coverage.face_centers(raster.pixel_coords)
    out_ok = wsum > 1e-8

    valid = in_ok & out_ok
    if not bool(valid.any()):
        return torch.zeros((), dtype=torch.float64)
    gap = ((c_in - c_out) ** 2).sum(-1)
    return gap[valid].mean()


def total_loss(template: Mesh, dv: torch.Tensor, cam: Camera, flow: TextureFlow,
               image: torch.Tensor, mask: torch.Tensor, parts: PartMap,
               mapping: UVMapping, cfg: RasterConfig, weights: LossWeights,
               canonical_probs: torch.Tensor | None = None,
               labels: torch.Tensor | None = None,
               tcyc_mode: str = "pixel",
               samples_per_part: int = 256, seed: int = 0) -> LossReport:
    """Weighted sum of all enabled terms for one instance; zero-weight terms
    are skipped entirely."""
    from .mesh import Deformation

    mesh = apply_deformation(template, Deformation(dv))
    report = LossReport(terms={})
    w = weights

    need_raster = w.w_iou > 0 or w.w_img > 0 or w.w_sp > 0 or w.w_tcyc > 0
    raster = None
    if need_raster:
        chans = []
        if w.w_img > 0:
            vert_coords = sample_uv_grid(flow.grid, mesh.uv)
            chans.append(sample_image(image, vert_coords))
        if w.w_sp > 0:
            if canonical_probs is None:
                raise ValueError("semantic probability loss needs a canonical map")
            chans.append(sample_uv_grid(
                torch.as_tensor(canonical_probs, dtype=torch.float64), mesh.uv))
        attrs = torch.cat(chans, dim=1) if chans else \
            torch.ones(mesh.n_vertices, 1, dtype=torch.float64)
        raster = rasterize(mesh, cam, attrs, cfg)

    if w.w_iou > 0:
        report.terms["iou"] = neg_iou(raster.silhouette, mask)
    if w.w_img > 0:
        report.terms["img"] = image_loss(raster.attributes[..., :3], image, mask)
    if w.w_sp > 0:
        off = 3 if w.w_img > 0 else 0
        n_p = parts.n_parts
        report.terms["sp"] = semantic_prob_loss(
            parts, raster.attributes[..., off:off + n_p])
    if w.w_sv > 0:
        if labels is None:
            raise ValueError("semantic vertex loss needs per-vertex labels")
        from .softras import pixel_grid
        coords = pixel_grid(cfg.height, cfg.width)
        report.terms["sv"] = semantic_vertex_loss(
            template, labels, cam, parts, coords, samples_per_part, seed)
    if w.w_tcyc > 0:
        report.terms["tcyc"] = texture_cycle_loss(
            flow, mapping, raster, cfg.sigma, mode=tcyc_mode)
    if w.w_lap > 0:
        report.terms["lap"] = laplacian_energy(mesh)
    if w.w_edge > 0:
        report.terms["edge"] = edge_regularizer(mesh)

    total = torch.zeros((), dtype=torch.float64)
    wmap = {"iou": w.w_iou, "img": w.w_img, "sp": w.w_sp, "sv": w.w_sv,
            "tcyc": w.w_tcyc, "lap": w.w_lap, "edge": w.w_edge}
    for name, value in report.terms.items():
        total = total + wmap[name] * value
    report.total = total
    return report

"""Synthetic scene bundles: a seeded asymmetric blob (icosphere + head and tail
protrusions), four surface part regions, and renders from random cameras.
Bundles are the on-disk supervision format consumed by the fitting loop:

    image.png       8-bit RGB
    mask.png        8-bit, >127 = foreground
    parts.tnsr      H x W x (N_p + 1) float32, background last, simplex rows
    keypoints.json  named 2D points in [-1, 1]^2 with visibility flags
    truth.json      ground-truth camera, deformation and vertex labels
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import tensorio
from .camera import Camera, normalize_rotation, quat_from_axis_angle, quat_multiply
from .mesh import Deformation, Mesh, apply_deformation, make_sphere
from .softras import RasterConfig, rasterize
from .texflow import PartMap

N_PARTS = 4
PART_COLORS = np.array([
    [0.85, 0.15, 0.15],   # head
    [0.15, 0.70, 0.20],   # neck
    [0.20, 0.30, 0.85],   # belly
    [0.90, 0.80, 0.15],   # tail/back
])


def part_labels_for_sphere(unit_vertices: np.ndarray) -> np.ndarray:
    """Four bands along x: head (x>0.5), neck, belly, tail."""
    x = unit_vertices[:, 0]
    labels = np.full(x.shape[0], 3, dtype=np.int64)
    labels[x > -0.5] = 2
    labels[x > 0.0] = 1
    labels[x > 0.5] = 0
    return labels


def _lobe(unit_verts: np.ndarray, direction: np.ndarray, amplitude: float,
          width: float) -> np.ndarray:
    d = direction / np.linalg.norm(direction)
    align = unit_verts @ d
    return amplitude * np.exp((align - 1.0) / width)


def blob_radii(unit_verts: np.ndarray, rng: np.random.Generator,
               instance_wobble: float = 0.08) -> np.ndarray:
    """Radial scale per vertex: elongated head at +x, smaller tail lobe at -x,
    plus small seeded bumps for per-instance variation."""
    r = np.ones(unit_verts.shape[0])
    r += _lobe(unit_verts, np.array([1.0, 0.0, 0.0]), 0.65, 0.18)
    r += _lobe(unit_verts, np.array([-0.9, 0.35, 0.0]), 0.35, 0.08)
    for _ in range(3):
        axis = rng.normal(size=3)
        r += _lobe(unit_verts, axis, rng.uniform(-1, 1) * instance_wobble, 0.2)
    return r


def make_truth_shape(subdivisions: int, rng: np.random.Generator) -> tuple[Mesh, Deformation]:
    sphere = make_sphere(subdivisions)
    unit = sphere.vertices.numpy()
    radii = blob_radii(unit, rng)
    verts = unit * radii[:, None]
    offsets = verts - unit
    return apply_deformation(sphere, Deformation(offsets)), Deformation(offsets)


def random_camera(rng: np.random.Generator) -> Camera:
    # Azimuths cluster around the frontal view: with a free global gauge,
    # absolute cameras are unrecoverable from silhouettes and parts alone.
    azimuth = np.clip(rng.normal(0.0, np.deg2rad(5)),
                      -np.deg2rad(10), np.deg2rad(10))
    elevation = np.clip(rng.normal(0.0, np.deg2rad(3)),
                        -np.deg2rad(6), np.deg2rad(6))
    q = quat_multiply(quat_from_axis_angle([1, 0, 0], elevation),
                      quat_from_axis_angle([0, 1, 0], azimuth))
    cam = Camera(rng.uniform(0.45, 0.55),
                 rng.uniform(-0.08, 0.08, size=2), q)
    return normalize_rotation(cam)


@dataclass
class SceneBundle:
    image: np.ndarray        # (H, W, 3) float in [0, 1]
    mask: np.ndarray         # (H, W) binary float
    parts: PartMap
    keypoints: dict | None
    truth: dict | None
    path: str | None = None


def render_truth(mesh: Mesh, labels: np.ndarray, cam: Camera,
                 cfg: RasterConfig):
    """Sharp flat-shaded render: image, silhouette, per-part probability maps."""
    onehot = np.eye(N_PARTS)[labels]
    colors = PART_COLORS[labels]
    attrs = torch.as_tensor(np.concatenate([colors, onehot], axis=1))
    sharp = RasterConfig(cfg.height, cfg.width, sigma=1e-5, gamma=cfg.gamma)
    out = rasterize(mesh, cam, attrs, sharp)
    image = out.attributes[..., :3].clamp(0, 1)
    part_fg = out.attributes[..., 3:].clamp(0, 1)
    return image.numpy(), out.silhouette.numpy(), part_fg.numpy()


def parts_with_background(part_fg: np.ndarray, silhouette: np.ndarray) -> np.ndarray:
    bg = np.clip(1.0 - silhouette, 0.0, 1.0)[..., None]
    probs = np.concatenate([part_fg * silhouette[..., None], bg], axis=-1)
    return probs / probs.sum(axis=-1, keepdims=True).clip(1e-12)


def synth(n: int, seed: int, out_dir: str, subdivisions: int = 2,
          height: int = 64, width: int = 64, n_keypoints: int = 12) -> list[str]:
    """Write n scene bundles under out_dir/scene_###; returns their paths."""
    if n < 1:
        raise ValueError("need n >= 1 scenes")
    cfg = RasterConfig(height, width)
    paths = []
    # Keypoint names must mean the same surface point in every scene, so the
    # vertex indices behind them are drawn once and shared across instances.
    n_verts = make_sphere(subdivisions).n_vertices
    kp_idx = np.random.default_rng(seed + 777).choice(
        n_verts, size=n_keypoints, replace=False)
    for i in range(n):
        rng = np.random.default_rng(seed + 1000 * i)
        mesh, deformation = make_truth_shape(subdivisions, rng)
        sphere_unit = make_sphere(subdivisions).vertices.numpy()
        labels = part_labels_for_sphere(sphere_unit)
        cam = random_camera(rng)
        image, sil, part_fg = render_truth(mesh, labels, cam, cfg)
        mask = (sil > 0.5).astype(np.float64)

        from .camera import camera_depths, project
        kp2d = project(mesh.vertices[kp_idx], cam).numpy()
        kpz = camera_depths(mesh.vertices[kp_idx], cam).numpy()
        keypoints = {
            f"kp{j}": {"xy": [float(kp2d[j, 0]), float(kp2d[j, 1])],
                       "visible": bool(kpz[j] > 0),
                       "vertex": int(kp_idx[j])}
            for j in range(n_keypoints)
        }

        d = os.path.join(out_dir, f"scene_{i:03d}")
        os.makedirs(d, exist_ok=True)
        tensorio.save_png(os.path.join(d, "image.png"), image)
        tensorio.save_png(os.path.join(d, "mask.png"), mask)
        tensorio.write_tnsr(os.path.join(d, "parts.tnsr"),
                            parts_with_background(part_fg, sil))
        with open(os.path.join(d, "keypoints.json"), "w") as f:
            json.dump(keypoints, f, indent=1, sort_keys=True)
        truth = {
            "camera": cam.to_dict(),
            "deformation": deformation.offsets.numpy().tolist(),
            "labels": labels.tolist(),
            "subdivisions": subdivisions,
            "seed": seed + 1000 * i,
        }
        with open(os.path.join(d, "truth.json"), "w") as f:
            json.dump(truth, f, sort_keys=True)
        paths.append(d)
    return paths


def load_bundle(path: str) -> SceneBundle:
    image = tensorio.load_png(os.path.join(path, "image.png"))
    mask = (tensorio.load_png(os.path.join(path, "mask.png")) > 127.0 / 255.0)
    if mask.ndim == 3:
        mask = mask[..., 0]
    probs = tensorio.read_tnsr(os.path.join(path, "parts.tnsr")).astype(np.float64)
    sums = probs.sum(axis=-1, keepdims=True)
    if np.abs(sums - 1.0).max() > 1e-3:
        raise ValueError(f"parts map rows too far off the simplex in {path}")
    probs = probs / sums.clip(1e-12)
    keypoints = truth = None
    kp_path = os.path.join(path, "keypoints.json")
    if os.path.exists(kp_path):
        with open(kp_path) as f:
            keypoints = json.load(f)
    truth_path = os.path.join(path, "truth.json")
    if os.path.exists(truth_path):
        with open(truth_path) as f:
            truth = json.load(f)
    return SceneBundle(image, mask.astype(np.float64), PartMap(probs),
                       keypoints, truth, path)

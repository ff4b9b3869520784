"""Texture flow, bilinear sampling, semantic UV maps and their aggregation."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semrecon.camera import Camera
from semrecon.mesh import build_uv_mapping, make_sphere
from semrecon.softras import pixel_grid
from semrecon.texflow import (PartMap, TextureFlow, aggregate_canonical,
                              init_flow_from_projection, sample_image,
                              semantic_uv)


def _pixel_center(row, col, h, w):
    return torch.tensor([(col + 0.5) / w * 2 - 1, 1 - (row + 0.5) / h * 2],
                        dtype=torch.float64)


def test_sample_image_at_pixel_center():
    rng = np.random.default_rng(0)
    img = torch.as_tensor(rng.uniform(size=(8, 6, 3)))
    val = sample_image(img, _pixel_center(3, 4, 8, 6))
    assert float((val - img[3, 4]).abs().max()) < 1e-12


def test_sample_image_midway_is_mean():
    rng = np.random.default_rng(1)
    img = torch.as_tensor(rng.uniform(size=(8, 8, 2)))
    mid = (_pixel_center(2, 3, 8, 8) + _pixel_center(2, 4, 8, 8)) / 2
    val = sample_image(img, mid)
    assert float((val - (img[2, 3] + img[2, 4]) / 2).abs().max()) < 1e-12


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10**6))
def test_sample_image_constant(seed):
    rng = np.random.default_rng(seed)
    img = torch.full((5, 7, 3), 0.42, dtype=torch.float64)
    coords = torch.as_tensor(rng.uniform(-1.5, 1.5, size=(10, 2)))
    val = sample_image(img, coords)
    assert float((val - 0.42).abs().max()) < 1e-12


def test_sample_image_gradients_match_fd():
    rng = np.random.default_rng(2)
    img = torch.as_tensor(rng.uniform(size=(8, 8, 1)))
    base = rng.uniform(-0.8, 0.8, size=(4, 2))
    # Keep away from pixel-grid lines where the interpolant kinks.
    base = np.round((base + 1) / 2 * 8 - 0.5) / 8 * 2 - 1 + 0.07

    leaf = torch.tensor(base, requires_grad=True)
    sample_image(img, leaf).sum().backward()
    g = leaf.grad.numpy()
    for i in range(4):
        for j in range(2):
            hi = base.copy(); hi[i, j] += 1e-6
            lo = base.copy(); lo[i, j] -= 1e-6
            fd = (float(sample_image(img, torch.as_tensor(hi)).sum())
                  - float(sample_image(img, torch.as_tensor(lo)).sum())) / 2e-6
            denom = max(abs(g[i, j]), abs(fd), 1e-8)
            assert abs(g[i, j] - fd) / denom < 1e-3


def test_semantic_uv_pixel_lookup():
    # Flow grid equal to the pixel-center grid reproduces the partition.
    h = w = 16
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, size=(h, w))
    probs = np.concatenate([np.eye(3)[labels], np.zeros((h, w, 1))], axis=-1)
    parts = PartMap(probs)
    flow = TextureFlow(pixel_grid(h, w).reshape(h, w, 2))
    uv = semantic_uv(flow, parts)
    assert float((uv - parts.foreground()).abs().max()) < 1e-9


def test_semantic_uv_uniform_and_constant():
    parts = PartMap(torch.full((8, 8, 5), 0.2, dtype=torch.float64))
    flow = TextureFlow(torch.zeros(16, 16, 2, dtype=torch.float64))
    uv = semantic_uv(flow, parts)
    assert float((uv - 0.2).abs().max()) < 1e-12

    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(4), size=(8, 8))
    parts = PartMap(probs)
    one_pixel = _pixel_center(5, 2, 8, 8).expand(16, 16, 2).clone()
    uv = semantic_uv(TextureFlow(one_pixel), parts)
    expect = torch.as_tensor(probs[5, 2, :3])
    assert float((uv - expect).abs().max()) < 1e-12


@settings(deadline=None, max_examples=15)
@given(st.integers(0, 10**6))
def test_semantic_uv_linear_in_parts(seed):
    rng = np.random.default_rng(seed)
    p1 = torch.as_tensor(rng.dirichlet(np.ones(4), size=(8, 8)))
    p2 = torch.as_tensor(rng.dirichlet(np.ones(4), size=(8, 8)))
    flow = TextureFlow(torch.as_tensor(rng.uniform(-1, 1, size=(12, 12, 2))))
    a, b = 0.3, 0.7
    mix = semantic_uv(flow, PartMap(a * p1 + b * p2))
    split = a * semantic_uv(flow, PartMap(p1)) + b * semantic_uv(flow, PartMap(p2))
    assert float((mix - split).abs().max()) < 1e-6


def test_aggregate_canonical_mean():
    rng = np.random.default_rng(5)
    a = torch.as_tensor(rng.uniform(size=(8, 8, 4)))
    b = torch.as_tensor(rng.uniform(size=(8, 8, 4)))
    single = aggregate_canonical([a])
    assert torch.equal(single.probs, a)
    assert single.sample_count == 1

    two = aggregate_canonical([a, b])
    assert float((two.probs - (a + b) / 2).abs().max()) < 1e-12
    assert two.sample_count == 2

    five = aggregate_canonical([a] * 5)
    assert float((five.probs - a).abs().max()) < 1e-7


def test_aggregate_canonical_empty_rejected():
    with pytest.raises(ValueError):
        aggregate_canonical([])


@settings(deadline=None, max_examples=15)
@given(st.integers(0, 10**6))
def test_aggregate_canonical_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    maps = [torch.as_tensor(rng.uniform(size=(6, 6, 3))) for _ in range(4)]
    fwd = aggregate_canonical(maps).probs
    rev = aggregate_canonical(maps[::-1]).probs
    assert float((fwd - rev).abs().max()) < 1e-12


def test_init_flow_drops_z_under_identity_camera():
    mesh = make_sphere(1)
    mapping = build_uv_mapping(mesh, 16, 16)
    flow = init_flow_from_projection(mesh, Camera.identity(), mapping)
    pts = mapping.surface_points(mesh)
    assert float((flow.grid - pts[..., :2]).abs().max()) < 1e-12


def test_init_flow_translation_shift():
    mesh = make_sphere(1)
    mapping = build_uv_mapping(mesh, 16, 16)
    base = init_flow_from_projection(mesh, Camera(0.4, [0.0, 0.0], [1, 0, 0, 0]),
                                     mapping)
    moved = init_flow_from_projection(mesh, Camera(0.4, [0.2, 0.0], [1, 0, 0, 0]),
                                      mapping)
    delta = moved.grid - base.grid
    assert float((delta[..., 0] - 0.2).abs().max()) < 1e-12
    assert float(delta[..., 1].abs().max()) < 1e-12


def test_init_flow_clamped_to_frame():
    mesh = make_sphere(1)
    mapping = build_uv_mapping(mesh, 16, 16)
    flow = init_flow_from_projection(mesh, Camera(3.0, [0.0, 0.0], [1, 0, 0, 0]),
                                     mapping)
    assert float(flow.grid.min()) >= -1.0
    assert float(flow.grid.max()) <= 1.0


def test_part_map_foreground_drops_background():
    rng = np.random.default_rng(6)
    probs = rng.dirichlet(np.ones(5), size=(4, 4))
    parts = PartMap(probs)
    assert parts.n_parts == 4
    assert parts.foreground().shape == (4, 4, 4)
    assert float((parts.foreground() - torch.as_tensor(probs[..., :4]))
                 .abs().max()) == 0.0

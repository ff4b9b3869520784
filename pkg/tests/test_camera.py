"""Weak-perspective projection, quaternion handling and camera hypotheses."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semrecon.camera import (Camera, CameraHypotheses, camera_depths,
                             init_hypotheses, normalize_rotation, project,
                             quat_from_axis_angle, quat_multiply, quat_rotate)


def test_project_drops_z():
    p = project(torch.tensor([[0.3, -0.2, 0.7]], dtype=torch.float64), Camera.identity())
    assert torch.allclose(p, torch.tensor([[0.3, -0.2]], dtype=torch.float64),
                          atol=1e-12)


def test_project_translation_shift():
    pts = torch.as_tensor(np.random.default_rng(0).normal(size=(5, 3)))
    base = project(pts, Camera.identity())
    moved = project(pts, Camera(1.0, [0.1, 0.1], [1, 0, 0, 0]))
    assert torch.allclose(moved - base, torch.full((5, 2), 0.1,
                                                   dtype=torch.float64),
                          atol=1e-12)


def test_project_90deg_z_rotation():
    cam = Camera(1.0, [0.0, 0.0], quat_from_axis_angle([0, 0, 1], np.pi / 2))
    p = project(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64), cam)
    assert torch.allclose(p, torch.tensor([[0.0, 1.0]], dtype=torch.float64),
                          atol=1e-9)


def test_project_scale():
    p = project(torch.tensor([[0.4, -0.6, 0.2]], dtype=torch.float64),
                Camera(2.5, [0.0, 0.0], [1, 0, 0, 0]))
    assert torch.allclose(p, torch.tensor([[1.0, -1.5]], dtype=torch.float64),
                          atol=1e-12)


def test_depth_is_rotated_z():
    cam = Camera(3.0, [0.5, 0.5], quat_from_axis_angle([1, 0, 0], np.pi / 2))
    # 90 deg about x maps (0, 1, 0) -> (0, 0, 1): depth 1 regardless of scale.
    z = camera_depths(torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64), cam)
    assert abs(float(z) - 1.0) < 1e-9


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10**6))
def test_rotation_composition(seed):
    rng = np.random.default_rng(seed)
    q1 = quat_from_axis_angle(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
    q2 = quat_from_axis_angle(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
    pts = torch.as_tensor(rng.normal(size=(4, 3)))
    two_step = quat_rotate(q1, quat_rotate(q2, pts))
    one_step = quat_rotate(quat_multiply(q1, q2), pts)
    assert float((two_step - one_step).abs().max()) < 1e-9


def test_normalize_rotation():
    cam = normalize_rotation(Camera(1.0, [0.0, 0.0], [2.0, 0.0, 0.0, 0.0]))
    assert torch.allclose(cam.quaternion,
                          torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
    unit = Camera(1.0, [0.0, 0.0], quat_from_axis_angle([0, 1, 0], 0.3))
    again = normalize_rotation(unit)
    assert float((again.quaternion - unit.quaternion).abs().max()) < 1e-12
    rng = np.random.default_rng(3)
    rand = normalize_rotation(Camera(1.0, [0.0, 0.0], rng.normal(size=4)))
    assert abs(float(rand.quaternion.norm()) - 1.0) < 1e-12


def test_normalize_rotation_near_zero():
    with pytest.raises(ArithmeticError):
        normalize_rotation(Camera(1.0, [0.0, 0.0], [1e-12, 0, 0, 0]))


def test_init_hypotheses_spread_and_determinism():
    one = init_hypotheses(1, 0)
    assert len(one.cameras) == 1

    hyp = init_hypotheses(8, 0)
    assert len(hyp.cameras) == 8
    for i, cam in enumerate(hyp.cameras):
        assert abs(float(cam.quaternion.norm()) - 1.0) < 1e-9
        # Azimuth recovered from the rotated x axis, up to the ~5 deg jitter.
        rx = quat_rotate(cam.quaternion, torch.eye(3, dtype=torch.float64))[0]
        az = np.arctan2(-float(rx[2]), float(rx[0])) % (2 * np.pi)
        target = 2 * np.pi * i / 8
        diff = min(abs(az - target), 2 * np.pi - abs(az - target))
        assert diff < np.deg2rad(25)

    again = init_hypotheses(8, 0)
    for a, b in zip(hyp.cameras, again.cameras):
        assert torch.equal(a.quaternion, b.quaternion)
    other = init_hypotheses(8, 1)
    assert any(not torch.equal(a.quaternion, b.quaternion)
               for a, b in zip(hyp.cameras, other.cameras))

    with pytest.raises(ValueError):
        init_hypotheses(0, 0)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_best_hypothesis_invariant_to_score_rescaling(seed, factor):
    rng = np.random.default_rng(seed)
    cams = init_hypotheses(4, seed).cameras
    scores = list(rng.uniform(0.1, 5.0, size=4))
    a = CameraHypotheses(cams, scores).best()
    b = CameraHypotheses(cams, [s * factor for s in scores]).best()
    assert torch.equal(a.quaternion, b.quaternion)


def test_project_gradients_match_fd():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(6, 3))
    cam7 = np.concatenate([[0.8], [0.05, -0.1],
                           init_hypotheses(1, 2).cameras[0].quaternion.numpy()])

    def f(flat):
        flat = torch.as_tensor(flat)
        cam = Camera(flat[0], flat[1:3], flat[3:7])
        p = project(torch.as_tensor(pts), cam)
        return (p * p).sum()

    leaf = torch.tensor(cam7, requires_grad=True)
    f(leaf).backward()
    g = leaf.grad.numpy()
    for i in range(7):
        hi = cam7.copy(); hi[i] += 1e-6
        lo = cam7.copy(); lo[i] -= 1e-6
        fd = (float(f(hi)) - float(f(lo))) / 2e-6
        denom = max(abs(g[i]), abs(fd), 1e-8)
        assert abs(g[i] - fd) / denom < 1e-4


def test_camera_dict_round_trip():
    cam = Camera(0.7, [0.1, -0.2], quat_from_axis_angle([1, 2, 3], 0.4))
    back = Camera.from_dict(cam.to_dict())
    assert abs(float(back.scale) - 0.7) < 1e-15
    assert float((back.quaternion - cam.quaternion).abs().max()) < 1e-15

"""Mask IoU, keypoint transfer (PCK) and rotation error metrics."""

import numpy as np
import pytest
import torch

from semrecon.camera import Camera, project, quat_from_axis_angle
from semrecon.evaluate import (KeypointSet, kt_camera, kt_flow, mask_iou,
                               rotation_error)
from semrecon.mesh import build_uv_mapping, make_sphere
from semrecon.texflow import init_flow_from_projection


def _kp_from_xy(xy, visible=None):
    xy = np.asarray(xy, dtype=np.float64)
    if visible is None:
        visible = [True] * len(xy)
    return KeypointSet([f"kp{i}" for i in range(len(xy))], xy,
                       np.asarray(visible))


def test_mask_iou_basic_values():
    a = torch.zeros(8, 8)
    b = torch.zeros(8, 8)
    a[:4], b[:4] = 1.0, 1.0
    assert mask_iou(a, b) == 1.0

    c = torch.zeros(8, 8)
    c[4:] = 1.0
    assert mask_iou(a, c) == 0.0

    half = torch.zeros(8, 8)
    half[:2] = 1.0  # covers half of a's area, overlap 16, union 32
    assert abs(mask_iou(half, a) - 0.5) < 1e-12

    assert mask_iou(torch.zeros(4, 4), torch.zeros(4, 4)) == 1.0


def test_mask_iou_thresholds_soft_input():
    soft = torch.full((8, 8), 0.6)
    hard = torch.ones(8, 8)
    assert mask_iou(soft, hard) == 1.0
    assert mask_iou(soft, hard, threshold=0.7) == 0.0


def test_mask_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(torch.zeros(4, 4), torch.zeros(4, 5))


def test_rotation_error_values():
    cam = Camera(1.0, [0, 0], quat_from_axis_angle([0, 0, 1], 0.0))
    assert rotation_error(cam, [1.0, 0, 0, 0]) < 1e-9

    q = quat_from_axis_angle([0, 1, 0], np.pi / 2)
    cam = Camera(1.0, [0, 0], q)
    assert abs(rotation_error(cam, [1.0, 0, 0, 0]) - 90.0) < 1e-6
    # Double cover: q and -q encode the same rotation.
    assert rotation_error(cam, (-q).numpy()) < 1e-6
    assert abs(rotation_error(Camera(1.0, [0, 0], -q), q.numpy())
               - rotation_error(cam, q.numpy())) < 1e-9


def test_kt_camera_self_transfer_is_perfect():
    template = make_sphere(1)
    cam = Camera(0.6, [0.1, -0.05], quat_from_axis_angle([1, 1, 0], 0.7))
    proj = project(template.vertices, cam).numpy()
    kp = _kp_from_xy(proj[[0, 5, 11, 20]])
    assert kt_camera(cam, cam, template, kp, kp) == 100.0


def test_kt_camera_rotated_pair():
    # Keypoints taken at projected vertices: re-projecting the same vertices
    # with the target camera recovers the target keypoints exactly.
    template = make_sphere(1)
    src_cam = Camera(0.5, [0.0, 0.0], [1, 0, 0, 0])
    tgt_cam = Camera(0.5, [0.1, 0.0], quat_from_axis_angle([0, 0, 1], 0.9))
    idx = [0, 3, 17, 25, 40]
    src_kp = _kp_from_xy(project(template.vertices, src_cam).numpy()[idx])
    tgt_kp = _kp_from_xy(project(template.vertices, tgt_cam).numpy()[idx])
    assert kt_camera(src_cam, tgt_cam, template, src_kp, tgt_kp) == 100.0


def test_kt_camera_invisible_points_skipped():
    template = make_sphere(1)
    cam = Camera(0.5, [0.0, 0.0], [1, 0, 0, 0])
    proj = project(template.vertices, cam).numpy()
    # One visible hit and one invisible far-off point: the latter is excluded
    # rather than counted as a miss.
    kp_src = _kp_from_xy([proj[0], [5.0, 5.0]], visible=[True, False])
    kp_tgt = _kp_from_xy([proj[0], [5.0, 5.0]], visible=[True, False])
    assert kt_camera(cam, cam, template, kp_src, kp_tgt) == 100.0
    # No scored points at all.
    none = _kp_from_xy([[0.0, 0.0]], visible=[False])
    assert kt_camera(cam, cam, template, none, none) == 0.0


def test_kt_flow_self_transfer_is_perfect():
    mesh = make_sphere(1)
    mapping = build_uv_mapping(mesh, 16, 16)
    cam = Camera(0.5, [0.05, 0.0], quat_from_axis_angle([0, 1, 0], 0.4))
    flow = init_flow_from_projection(mesh, cam, mapping)
    grid = flow.grid.reshape(-1, 2).numpy()
    kp = _kp_from_xy(grid[[3, 40, 100, 200]])
    assert kt_flow(flow, flow, mapping, kp, kp) == 100.0


def test_kt_flow_hit_uses_face_average():
    # Target flow collapsed to one corner: a prediction at that corner is a
    # hit only when the target keypoint sits within the PCK radius of it.
    mesh = make_sphere(1)
    mapping = build_uv_mapping(mesh, 16, 16)
    cam = Camera(0.5, [0.0, 0.0], [1, 0, 0, 0])
    src = init_flow_from_projection(mesh, cam, mapping)
    from semrecon.texflow import TextureFlow
    tgt = TextureFlow(torch.full((16, 16, 2), 0.9, dtype=torch.float64))
    src_xy = src.grid.reshape(-1, 2).numpy()[[0, 50]]
    near = _kp_from_xy(src_xy), _kp_from_xy([[0.9, 0.9], [0.9, 0.9]])
    far = _kp_from_xy(src_xy), _kp_from_xy([[-0.9, -0.9], [-0.9, -0.9]])
    assert kt_flow(src, tgt, mapping, near[0], near[1]) == 100.0
    assert kt_flow(src, tgt, mapping, far[0], far[1]) == 0.0


def test_kt_pck_monotone_in_alpha():
    template = make_sphere(1)
    src_cam = Camera(0.5, [0.0, 0.0], [1, 0, 0, 0])
    tgt_cam = Camera(0.5, [0.0, 0.0], quat_from_axis_angle([0, 1, 0], 0.5))
    rng = np.random.default_rng(0)
    proj = project(template.vertices, src_cam).numpy()
    idx = rng.choice(template.n_vertices, size=10, replace=False)
    src_kp = _kp_from_xy(proj[idx])
    # Noisy targets: different alphas admit different numbers of hits.
    tgt_kp = _kp_from_xy(project(template.vertices, tgt_cam).numpy()[idx]
                         + rng.normal(0, 0.15, size=(10, 2)))
    scores = [kt_camera(src_cam, tgt_cam, template, src_kp, tgt_kp, alpha=a)
              for a in (0.02, 0.05, 0.1, 0.2, 0.5)]
    assert all(a <= b for a, b in zip(scores, scores[1:]))
    assert scores[-1] == 100.0


def test_keypoint_set_from_dict_sorted_names():
    d = {"b": {"xy": [0.1, 0.2], "visible": True},
         "a": {"xy": [-0.3, 0.4], "visible": False}}
    kp = KeypointSet.from_dict(d)
    assert kp.names == ["a", "b"]
    assert np.allclose(kp.xy[0], [-0.3, 0.4])
    assert list(kp.visible) == [False, True]

"""Shared fixtures: the synthetic scene corpus, the full recovery fit reused by
several acceptance checks, and a pair of identical tiny CLI runs."""

import json
import os
import time

import pytest
import torch

torch.set_num_threads(1)

TINY_CONFIG = {
    "train": {"rounds": 2, "e_epochs": 8, "hyp_epochs": 4, "k_hyp": 2,
              "seed": 3, "subdivisions": 1, "h_uv": 16, "w_uv": 16},
    "raster": {"height": 32, "width": 32},
    "weights": {"w_sp": 2.0, "w_sv": 1.0},
}


@pytest.fixture(scope="session")
def scene_dir8(tmp_path_factory):
    """Eight 64x64 scene bundles over 320-face truth meshes."""
    from semrecon import scenes
    d = str(tmp_path_factory.mktemp("scenes8"))
    scenes.synth(8, 0, d, subdivisions=2, height=64, width=64)
    return d


@pytest.fixture(scope="session")
def recovery_fit(scene_dir8):
    """Full two-round fit of the eight scenes; shared by the recovery and
    keypoint-transfer checks."""
    from semrecon import scenes
    from semrecon.losses import LossWeights
    from semrecon.softras import RasterConfig
    from semrecon.train import TrainConfig, fit

    bundles = [scenes.load_bundle(os.path.join(scene_dir8, f"scene_{i:03d}"))
               for i in range(8)]
    weights = LossWeights(1, 1, 8, 3, 0.5, 0.2, 0.2)
    cfg = TrainConfig(rounds=2, e_epochs=150, hyp_epochs=30, lr=1e-2,
                      refine_lr=3e-3, cam_lr_scale=10.0, k_hyp=8, k_select=6,
                      seed=0, weights=weights)
    raster = RasterConfig(64, 64)
    t0 = time.time()
    state, instances = fit(bundles, cfg, raster, out_dir=None)
    return {"state": state, "instances": instances, "bundles": bundles,
            "truths": [b.truth for b in bundles],
            "elapsed": time.time() - t0, "raster": raster}


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """Two CLI fits with the same tiny config and seed, plus their scenes."""
    from semrecon.cli import main
    base = tmp_path_factory.mktemp("tiny")
    cfg_path = os.path.join(str(base), "config.json")
    with open(cfg_path, "w") as f:
        json.dump(TINY_CONFIG, f)
    scenes_dir = os.path.join(str(base), "scenes")
    rc = main(["synth", "--config", cfg_path, "--out", scenes_dir,
               "--seed", "11", "--instances", "2"])
    assert rc == 0
    runs = []
    for name in ("run_a", "run_b"):
        out = os.path.join(str(base), name)
        rc = main(["fit", "--config", cfg_path, "--scenes", scenes_dir,
                   "--out", out])
        assert rc == 0
        runs.append(out)
    return {"config": cfg_path, "scenes": scenes_dir, "runs": runs}

"""Command-line surface: scene synthesis, fitting, per-term gradient checks,
rendering and evaluation. Every verb exits 0 on success, 2 on usage or input
errors and 3 on numerical failure, with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import scenes, tensorio
from .camera import Camera
from .config import RunConfig
from .evaluate import KeypointSet, kt_camera, kt_flow, mask_iou, rotation_error
from .losses import LossWeights, total_loss
from .mesh import (Deformation, Mesh, apply_deformation, build_uv_mapping,
                   load_obj, make_sphere, vertex_part_labels)
from .params import ParamLayout, ParamVector, fd_check, fd_errors
from .softras import RasterConfig, render_silhouette
from .texflow import CanonicalUV, PartMap, TextureFlow, init_flow_from_projection
from .train import (CategoryState, Instance, TrainConfig, fit, m_step,
                    pseudo_labels, save_checkpoint)

USAGE_ERROR, NUMERICAL_ERROR = 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = USAGE_ERROR):
        super().__init__(message)
        self.code = code


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise CliError(f"bad config: {e}") from e


def _load_scenes(path: str, limit: int | None = None) -> list[scenes.SceneBundle]:
    if not os.path.isdir(path):
        raise CliError(f"scene directory not found: {path}")
    dirs = sorted(d for d in os.listdir(path)
                  if os.path.isdir(os.path.join(path, d)))
    if limit is not None:
        dirs = dirs[:limit]
    if not dirs:
        raise CliError(f"no scene bundles under {path}")
    try:
        return [scenes.load_bundle(os.path.join(path, d)) for d in dirs]
    except (OSError, ValueError) as e:
        raise CliError(f"bad scene bundle: {e}") from e


def _restore_run(run_dir: str, cfg: RunConfig,
                 bundles: list[scenes.SceneBundle]):
    """Rebuild (state, instances) from a round checkpoint directory."""
    if not os.path.isdir(run_dir):
        raise CliError(f"run directory not found: {run_dir}")
    template = load_obj(os.path.join(run_dir, "template.obj"))
    mapping = build_uv_mapping(template, cfg.train.h_uv, cfg.train.w_uv)
    canonical = labels = None
    can_path = os.path.join(run_dir, "canonical.tnsr")
    if os.path.exists(can_path):
        canonical = CanonicalUV(tensorio.read_tnsr(can_path).astype(np.float64))
        labels = torch.as_tensor(
            tensorio.read_tnsr(os.path.join(run_dir, "labels.tnsr")).astype(np.int64))
    state = CategoryState(template=template, mapping=mapping,
                          canonical=canonical, labels=labels, round_index=1)
    layout = ParamLayout(template.n_vertices, 1, cfg.train.h_uv, cfg.train.w_uv)
    instances = []
    for i, b in enumerate(bundles):
        name = f"inst{i:03d}"
        inst = Instance.from_bundle(b, layout, name=name)
        with open(os.path.join(run_dir, f"{name}_params.json")) as f:
            doc = json.load(f)
        inst.params = ParamVector.pack(
            layout, torch.as_tensor(doc["dv"], dtype=torch.float64),
            [Camera.from_dict(doc["camera"])],
            TextureFlow(torch.as_tensor(doc["flow"], dtype=torch.float64)))
        inst.failed = bool(doc.get("failed", False))
        instances.append(inst)
    return state, instances


def _latest_round(out_dir: str) -> str:
    rounds = sorted(d for d in os.listdir(out_dir) if d.startswith("round"))
    if not rounds:
        raise CliError(f"no round checkpoint under {out_dir}")
    return os.path.join(out_dir, rounds[-1])


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    n = args.instances or 8
    scenes.synth(n, args.seed, args.out, subdivisions=cfg.train.subdivisions,
                 height=cfg.raster.height, width=cfg.raster.width)
    cfg.echo(args.out)
    print(json.dumps({"scenes": n, "out": args.out}))
    return 0


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.rounds is not None:
        cfg.train.rounds = args.rounds
    if args.threads is not None:
        torch.set_num_threads(args.threads)
    scene_dir = args.scenes or cfg.paths.scenes
    if not scene_dir:
        raise CliError("no scene directory given (--scenes or paths.scenes)")
    bundles = _load_scenes(scene_dir, args.instances)
    cfg.echo(args.out)
    try:
        state, instances = fit(bundles, cfg.train, cfg.raster, args.out)
    except ArithmeticError as e:
        raise CliError(str(e), NUMERICAL_ERROR) from e
    print(json.dumps({"rounds": state.round_index,
                      "failed": sum(i.failed for i in instances)}))
    return 0


def cmd_template_update(args) -> int:
    cfg = _load_config(args.config)
    bundles = _load_scenes(args.scenes or cfg.paths.scenes, args.instances)
    state, instances = _restore_run(args.run, cfg, bundles)
    new_state = m_step(instances, state, cfg.train, cfg.raster)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(args.out, new_state, instances)
    cfg.echo(args.out)
    print(json.dumps({"out": args.out, "round": new_state.round_index}))
    return 0


def cmd_canonical_uv(args) -> int:
    from .texflow import aggregate_canonical, semantic_uv
    cfg = _load_config(args.config)
    bundles = _load_scenes(args.scenes or cfg.paths.scenes, args.instances)
    state, instances = _restore_run(args.run, cfg, bundles)
    canonical = aggregate_canonical(
        [semantic_uv(i.flow(), i.parts) for i in instances if not i.failed])
    os.makedirs(args.out, exist_ok=True)
    tensorio.write_tnsr(os.path.join(args.out, "canonical.tnsr"),
                        canonical.probs.numpy())
    argmax = canonical.probs.argmax(dim=-1).numpy()
    preview = scenes.PART_COLORS[np.clip(argmax, 0, len(scenes.PART_COLORS) - 1)]
    tensorio.save_png(os.path.join(args.out, "canonical_preview.png"), preview)
    cfg.echo(args.out)
    print(json.dumps({"out": args.out, "samples": canonical.sample_count}))
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args.config)
    try:
        with open(args.params) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"bad params file: {e}") from e
    template = make_sphere(cfg.train.subdivisions)
    if "deformation" in doc:       # truth.json layout
        offsets = doc["deformation"]
        cam = Camera.from_dict(doc["camera"])
    else:                          # checkpoint params layout
        offsets = doc["dv"]
        cam = Camera.from_dict(doc["camera"])
    mesh = apply_deformation(template, Deformation(torch.as_tensor(offsets)))
    sharp = RasterConfig(cfg.raster.height, cfg.raster.width,
                         sigma=1e-5, gamma=cfg.raster.gamma)
    sil = render_silhouette(mesh, cam, sharp)
    tensorio.save_png(args.out, sil.numpy())
    print(json.dumps({"out": args.out}))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    rows, ok = gradcheck_table(seed=args.seed, threshold=args.threshold)
    for name, err in rows:
        print(f"{name:>6s}  max_rel_err={err:.3e}  "
              f"{'ok' if err < args.threshold else 'FAIL'}")
    print(json.dumps({"ok": ok, "threshold": args.threshold}))
    return 0 if ok else NUMERICAL_ERROR


def gradcheck_table(seed: int = 0, threshold: float = 1e-3,
                    n_indices: int = 24) -> tuple[list[tuple[str, float]], bool]:
    """Per-term finite-difference check on a small synthetic scene."""
    rng = np.random.default_rng(seed)
    template = make_sphere(1)
    mapping = build_uv_mapping(template, 16, 16)
    cfg = RasterConfig(16, 16)
    truth_mesh, _ = scenes.make_truth_shape(1, rng)
    labels_gt = scenes.part_labels_for_sphere(make_sphere(1).vertices.numpy())
    cam_t = scenes.random_camera(rng)
    image, sil, part_fg = scenes.render_truth(truth_mesh, labels_gt, cam_t, cfg)
    mask = (sil > 0.5).astype(np.float64)
    parts = PartMap(scenes.parts_with_background(part_fg, sil))
    onehot = np.eye(scenes.N_PARTS)[labels_gt]
    fv = template.faces.numpy()[mapping.face_index.reshape(-1)]
    can = (mapping.barycentric.reshape(-1, 3)[:, :, None] * onehot[fv]).sum(1)
    can = torch.as_tensor(can.reshape(16, 16, scenes.N_PARTS))
    vlabels = vertex_part_labels(template, can)

    layout = ParamLayout(template.n_vertices, 1, 16, 16)
    cam0 = scenes.random_camera(rng)
    flow0 = init_flow_from_projection(template, cam0, mapping)
    pv = ParamVector.pack(
        layout, torch.as_tensor(rng.normal(0, 0.05, (template.n_vertices, 3))),
        [cam0], flow0)
    fseg = layout.segments()["flow"]
    pv.data[fseg[0]:] = np.clip(
        pv.data[fseg[0]:] + rng.normal(0, 0.01, layout.n_flow), -0.95, 0.95)

    image_t = torch.as_tensor(image)
    mask_t = torch.as_tensor(mask)

    def objective_for(weights: LossWeights):
        def objective(flat):
            rep = total_loss(template, layout.dv(flat), layout.camera(flat),
                             layout.flow(flat), image_t, mask_t, parts,
                             mapping, cfg, weights, canonical_probs=can,
                             labels=vlabels, seed=seed)
            return rep.total
        return objective

    term_weights = {
        "iou": LossWeights(1, 0, 0, 0, 0, 0, 0),
        "img": LossWeights(0, 1, 0, 0, 0, 0, 0),
        "sp": LossWeights(0, 0, 1, 0, 0, 0, 0),
        "sv": LossWeights(0, 0, 0, 1, 0, 0, 0),
        "tcyc": LossWeights(0, 0, 0, 0, 1, 0, 0),
        "lap": LossWeights(0, 0, 0, 0, 0, 1, 0),
        "edge": LossWeights(0, 0, 0, 0, 0, 0, 1),
        "total": LossWeights(),
    }
    idx = np.concatenate([
        rng.choice(layout.n_dv, n_indices // 3, replace=False),
        np.arange(layout.n_dv, layout.n_dv + 7),
        fseg[0] + rng.choice(layout.n_flow, n_indices // 3, replace=False)])
    rows = []
    for name, w in term_weights.items():
        # Two step sizes, best per coordinate: the small step resolves kinked
        # regions while the large one beats round-off on near-zero gradients.
        errs = np.minimum(
            fd_errors(objective_for(w), pv, step=1e-6, indices=idx),
            fd_errors(objective_for(w), pv, step=1e-5, indices=idx))
        rows.append((name, float(errs.max(initial=0.0))))
    return rows, all(err < threshold for _, err in rows)


def cmd_eval_iou(args) -> int:
    cfg = _load_config(args.config)
    bundles = _load_scenes(args.scenes or cfg.paths.scenes, args.instances)
    run = args.run or _latest_round(args.out)
    state, instances = _restore_run(run, cfg, bundles)
    sharp = RasterConfig(cfg.raster.height, cfg.raster.width,
                         sigma=1e-5, gamma=cfg.raster.gamma)
    ious = [mask_iou(render_silhouette(i.mesh(state.template), i.camera(), sharp),
                     i.silhouette) for i in instances]
    print(json.dumps({"mean_iou": float(np.mean(ious)),
                      "per_instance": [round(v, 4) for v in ious]}))
    return 0


def cmd_eval_kt(args) -> int:
    cfg = _load_config(args.config)
    bundles = _load_scenes(args.scenes or cfg.paths.scenes, args.instances)
    run = args.run or _latest_round(args.out)
    state, instances = _restore_run(run, cfg, bundles)
    kps = [KeypointSet.from_dict(b.keypoints) for b in bundles]
    pf, pc, n_pairs = [], [], 0
    ious = []
    sharp = RasterConfig(cfg.raster.height, cfg.raster.width,
                         sigma=1e-5, gamma=cfg.raster.gamma)
    for s in range(len(instances)):
        ious.append(mask_iou(
            render_silhouette(instances[s].mesh(state.template),
                              instances[s].camera(), sharp),
            instances[s].silhouette))
        for t in range(len(instances)):
            if s == t:
                continue
            pf.append(kt_flow(instances[s].flow(), instances[t].flow(),
                              state.mapping, kps[s], kps[t], args.alpha))
            pc.append(kt_camera(instances[s].camera(), instances[t].camera(),
                                state.template, kps[s], kps[t], args.alpha))
            n_pairs += 1
    print(json.dumps({"pck_flow": float(np.mean(pf)) if pf else 0.0,
                      "pck_camera": float(np.mean(pc)) if pc else 0.0,
                      "mean_iou": float(np.mean(ious)),
                      "n_pairs": n_pairs}))
    return 0


def cmd_pseudo_labels(args) -> int:
    cfg = _load_config(args.config)
    bundles = _load_scenes(args.scenes or cfg.paths.scenes, args.instances)
    state, instances = _restore_run(args.run, cfg, bundles)
    if state.canonical is None:
        raise CliError("run has no canonical map; fit at least one round")
    maps, flags = pseudo_labels(instances, state, cfg.train, cfg.raster,
                                args.threshold)
    os.makedirs(args.out, exist_ok=True)
    for inst, m, flag in zip(instances, maps, flags):
        if flag:
            tensorio.write_tnsr(os.path.join(args.out, f"{inst.name}_labels.tnsr"),
                                m.astype(np.float32))
    with open(os.path.join(args.out, "selection.json"), "w") as f:
        json.dump({i.name: bool(fl) for i, fl in zip(instances, flags)}, f,
                  indent=1, sort_keys=True)
    print(json.dumps({"selected": int(sum(flags)), "total": len(flags)}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semrecon",
                                description="Single-view mesh fitting with "
                                            "semantic part consistency")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out=True, seed_default=0):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--instances", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="generate synthetic scene bundles")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="run the progressive EM fit")
    common(sp, seed_default=None)
    sp.add_argument("--scenes", default=None)
    sp.add_argument("--rounds", type=int, default=None)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("template-update", help="M-step template refresh")
    common(sp)
    sp.add_argument("--scenes", default=None)
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_template_update)

    sp = sub.add_parser("canonical-uv", help="aggregate the canonical UV map")
    common(sp)
    sp.add_argument("--scenes", default=None)
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_canonical_uv)

    sp = sub.add_parser("render", help="render silhouette from a params file")
    common(sp)
    sp.add_argument("--params", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("gradcheck", help="per-term finite-difference check")
    common(sp, out=False)
    sp.add_argument("--threshold", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("eval-iou", help="mask IoU of a fitted run")
    common(sp, out=False)
    sp.add_argument("--scenes", default=None)
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_eval_iou)

    sp = sub.add_parser("eval-kt", help="keypoint transfer PCK of a fitted run")
    common(sp, out=False)
    sp.add_argument("--scenes", default=None)
    sp.add_argument("--run", required=True)
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.set_defaults(func=cmd_eval_kt)

    sp = sub.add_parser("pseudo-labels", help="export pseudo part labels")
    common(sp)
    sp.add_argument("--scenes", default=None)
    sp.add_argument("--run", required=True)
    sp.add_argument("--threshold", type=float, required=True)
    sp.set_defaults(func=cmd_pseudo_labels)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(json.dumps({"error": str(e), "code": e.code}), file=sys.stderr)
        return e.code
    except ArithmeticError as e:
        print(json.dumps({"error": str(e), "code": NUMERICAL_ERROR}),
              file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())

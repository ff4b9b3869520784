"""EM-style progressive fitting: an E-step that optimizes per-instance
parameters (vertex offsets, camera hypotheses, texture flow) against the full
objective, and an M-step that refreshes the category template, the canonical
semantic UV map and the per-vertex part labels from selected subsets.

Round 1 runs silhouette/image-only with a single camera hypothesis; the
semantic terms switch on once a canonical map exists.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import tensorio
from .camera import Camera, CameraHypotheses, init_hypotheses, project
from .losses import (LossWeights, image_loss, semantic_prob_loss,
                     semantic_vertex_loss, total_loss)
from .mesh import (Mesh, UVMapping, build_uv_mapping, make_sphere, save_obj,
                   vertex_part_labels)
from .params import ParamLayout, ParamVector
from .scenes import SceneBundle
from .softras import RasterConfig, pixel_grid, rasterize, render_part_probs
from .texflow import (CanonicalUV, PartMap, TextureFlow, aggregate_canonical,
                      init_flow_from_projection, sample_image, semantic_uv)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    rounds: int = 2
    e_epochs: int = 200
    hyp_epochs: int = 40
    lr: float = 1e-2
    refine_lr: float | None = None  # dv/flow rate in semantic rounds
    cam_lr_scale: float = 3.0   # camera group steps faster than dv/flow
    lr_halve_every: int = 50
    k_select: int | None = None     # default: max(3, 20% of instances)
    k_hyp: int = 8
    seed: int = 0
    subdivisions: int = 2
    h_uv: int = 32
    w_uv: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    tcyc_mode: str = "pixel"
    samples_per_part: int = 256

    def __post_init__(self):
        if self.rounds < 1 or self.e_epochs < 0 or self.lr <= 0 or self.k_hyp < 1:
            raise ValueError("invalid training configuration")

    def subset_size(self, n_instances: int) -> int:
        if self.k_select is not None:
            return min(self.k_select, n_instances)
        return min(max(3, int(round(0.2 * n_instances))), n_instances)


@dataclass
class Instance:
    image: torch.Tensor       # (H, W, 3)
    silhouette: torch.Tensor  # (H, W) binary
    parts: PartMap
    params: ParamVector       # layout with k_hyp = 1 (the selected camera)
    hypotheses: CameraHypotheses
    keypoints: dict | None = None
    failed: bool = False
    name: str = ""

    @staticmethod
    def from_bundle(bundle: SceneBundle, layout: ParamLayout,
                    name: str = "") -> "Instance":
        pv = ParamVector.zeros(layout)
        return Instance(
            image=torch.as_tensor(bundle.image, dtype=torch.float64),
            silhouette=torch.as_tensor(bundle.mask, dtype=torch.float64),
            parts=bundle.parts,
            params=pv,
            hypotheses=CameraHypotheses([Camera.identity()]),
            keypoints=bundle.keypoints,
            name=name or (os.path.basename(bundle.path or "") or "instance"))

    def mesh(self, template: Mesh) -> Mesh:
        dv, _, _ = self.params.unpack()
        return template.with_vertices(template.vertices + dv)

    def camera(self) -> Camera:
        _, cams, _ = self.params.unpack()
        return cams[0]

    def flow(self) -> TextureFlow:
        _, _, flow = self.params.unpack()
        return flow


@dataclass
class CategoryState:
    template: Mesh
    mapping: UVMapping
    canonical: CanonicalUV | None = None
    labels: torch.Tensor | None = None
    round_index: int = 0

    @staticmethod
    def initial(cfg: TrainConfig) -> "CategoryState":
        template = make_sphere(cfg.subdivisions)
        mapping = build_uv_mapping(template, cfg.h_uv, cfg.w_uv)
        return CategoryState(template=template, mapping=mapping)


def _round_weights(cfg: TrainConfig, state: CategoryState) -> LossWeights:
    w = cfg.weights
    if state.round_index == 0 or state.canonical is None:
        return replace(w, w_sp=0.0, w_sv=0.0)
    return w


def optimize_instance(inst: Instance, state: CategoryState, cfg: TrainConfig,
                      raster_cfg: RasterConfig, weights: LossWeights,
                      cam_init: Camera, epochs: int,
                      log_fn=None, tag: str = "",
                      fresh: bool = False) -> tuple[ParamVector, float]:
    """Adam fit of one (instance, camera hypothesis); returns packed params and
    the final total loss.

    A fresh start discards the instance's offsets and flow: the hypothesis
    begins at the bare template with a projection-matched flow, so it is not
    handicapped by a shape baked in under a different camera.
    """
    layout = inst.params.layout
    if fresh:
        dv0 = torch.zeros(layout.n_vertices, 3, dtype=torch.float64)
        flow0 = init_flow_from_projection(state.template, cam_init,
                                          state.mapping)
    else:
        dv0, _, flow0 = inst.params.unpack()
    dv = dv0.detach().clone().requires_grad_(True)
    cam7 = torch.cat([cam_init.scale.reshape(1), cam_init.translation,
                      cam_init.quaternion]).detach().clone().requires_grad_(True)
    flowg = flow0.grid.detach().clone().requires_grad_(True)

    # The camera only has an anchored signal once the semantic terms are on.
    # Without them every orientation is explainable by a counter-deformation,
    # so a fast camera group just wanders in the gauge direction; keep the
    # camera close to its initialization in that regime.
    semantic = weights.w_sp > 0 or weights.w_sv > 0
    cam_scale = cfg.cam_lr_scale if semantic else 0.1
    base_lr = cfg.refine_lr if (semantic and cfg.refine_lr) else cfg.lr
    opt = torch.optim.Adam([{"params": [dv, flowg], "lr": base_lr},
                            {"params": [cam7],
                             "lr": base_lr * cam_scale}])
    canonical = state.canonical.probs if state.canonical is not None else None
    final = float("inf")
    for step in range(epochs):
        decay = 0.5 ** (step // cfg.lr_halve_every)
        opt.param_groups[0]["lr"] = base_lr * decay
        opt.param_groups[1]["lr"] = base_lr * cam_scale * decay
        opt.zero_grad()
        cam = Camera(cam7[0], cam7[1:3], cam7[3:7])
        report = total_loss(
            state.template, dv, cam, TextureFlow(flowg), inst.image,
            inst.silhouette, inst.parts, state.mapping, raster_cfg, weights,
            canonical_probs=canonical, labels=state.labels,
            tcyc_mode=cfg.tcyc_mode, samples_per_part=cfg.samples_per_part,
            seed=cfg.seed)
        if not torch.isfinite(report.total):
            return inst.params, float("nan")
        report.total.backward()
        opt.step()
        with torch.no_grad():
            cam7[0].clamp_(min=1e-3)
            cam7[3:7] /= cam7[3:7].norm()
            flowg.clamp_(-1.0, 1.0)
        final = float(report.total.detach())
        if log_fn is not None:
            entry = {"tag": tag, "step": step}
            entry.update(report.to_dict())
            log_fn(entry)
    cam = Camera(cam7[0].detach(), cam7[1:3].detach(), cam7[3:7].detach())
    packed = ParamVector.pack(layout, dv.detach(), [cam],
                              TextureFlow(flowg.detach()))
    return packed, final


def e_step(instances: list[Instance], state: CategoryState, cfg: TrainConfig,
           raster_cfg: RasterConfig, log_fn=None) -> list[Instance]:
    """Fit every instance against the frozen category state. Round 1 uses a
    single camera hypothesis and no semantic terms; later rounds optimize all
    hypotheses independently and keep the argmin."""
    weights = _round_weights(cfg, state)
    k = 1 if state.round_index == 0 else cfg.k_hyp
    for idx, inst in enumerate(instances):
        if state.round_index == 0:
            cams = [inst.camera()]
        else:
            cams = [inst.camera()] + init_hypotheses(
                k, cfg.seed + 7919 * idx).cameras[: max(0, k - 1)]
        # Screening pass: every hypothesis gets a short budget; only the
        # argmin survivor is optimized for the full epoch count.
        screen = min(cfg.hyp_epochs, cfg.e_epochs) if len(cams) > 1 \
            else cfg.e_epochs
        best_params, best_loss, scores = None, float("inf"), []
        for h, cam0 in enumerate(cams):
            packed, loss = optimize_instance(
                inst, state, cfg, raster_cfg, weights, cam0, screen,
                log_fn, tag=f"r{state.round_index}/i{idx}/h{h}", fresh=h > 0)
            scores.append(loss)
            if np.isfinite(loss) and loss < best_loss:
                best_params, best_loss = packed, loss
        if best_params is not None and screen < cfg.e_epochs:
            _, survivors, _ = best_params.unpack()
            inst.params = best_params
            best_params, best_loss = optimize_instance(
                inst, state, cfg, raster_cfg, weights, survivors[0],
                cfg.e_epochs - screen, log_fn,
                tag=f"r{state.round_index}/i{idx}/best")
        if best_params is None:
            inst.failed = True
            log.warning("instance %s diverged; excluded from M-step", inst.name)
            continue
        inst.failed = False
        inst.params = best_params
        inst.hypotheses = CameraHypotheses(
            [inst.params.unpack()[1][0] for _ in range(1)], [best_loss])
        if log_fn is not None:
            log_fn({"tag": f"r{state.round_index}/i{idx}/select",
                    "scores": scores, "best": best_loss})
    return instances


def _rendered_silhouettes(instances, state, raster_cfg) -> list[torch.Tensor]:
    sils = []
    for inst in instances:
        mesh = inst.mesh(state.template)
        ones = torch.ones(mesh.n_vertices, 1, dtype=torch.float64)
        sils.append(rasterize(mesh, inst.camera(), ones, raster_cfg).silhouette)
    return sils


def _hard_iou(a: torch.Tensor, b: torch.Tensor) -> float:
    ha, hb = a > 0.5, b > 0.5
    union = (ha | hb).sum()
    if int(union) == 0:
        return 1.0
    return float((ha & hb).sum() / union)


def select_shape_subset(instances: list[Instance], k: int,
                        state: CategoryState,
                        raster_cfg: RasterConfig) -> list[int]:
    """Exemplar = best ground-truth silhouette IoU; members = top-k instances
    whose rendered silhouettes best match the exemplar's."""
    alive = [i for i, inst in enumerate(instances) if not inst.failed]
    if not alive:
        raise ValueError("no usable instance for subset selection")
    sils = _rendered_silhouettes([instances[i] for i in alive], state, raster_cfg)
    gt_iou = [_hard_iou(s, instances[i].silhouette) for s, i in zip(sils, alive)]
    ex = int(np.argmax(gt_iou))
    sim = [_hard_iou(s, sils[ex]) for s in sils]
    order = sorted(range(len(alive)), key=lambda j: (-sim[j], alive[j]))
    chosen = {alive[ex]}
    for j in order:
        if len(chosen) >= min(k, len(alive)):
            break
        chosen.add(alive[j])
    return sorted(chosen)


def select_uv_subset(instances: list[Instance], k: int,
                     state: CategoryState,
                     raster_cfg: RasterConfig) -> list[int]:
    """Exemplar = smallest image reconstruction loss; members = top-k by L2
    similarity between semantic UV maps, ties broken by index."""
    alive = [i for i, inst in enumerate(instances) if not inst.failed]
    if not alive:
        raise ValueError("no usable instance for subset selection")
    uv_maps, img_losses = [], []
    for i in alive:
        inst = instances[i]
        mesh = inst.mesh(state.template)
        flow = inst.flow()
        uv_maps.append(semantic_uv(flow, inst.parts))
        from .mesh import sample_uv_grid
        colors = sample_image(inst.image, sample_uv_grid(flow.grid, mesh.uv))
        rendered = rasterize(mesh, inst.camera(), colors, raster_cfg).attributes
        img_losses.append(float(image_loss(rendered, inst.image, inst.silhouette)))
    ex = int(np.argmin(img_losses))
    dists = [float(((m - uv_maps[ex]) ** 2).sum().sqrt()) for m in uv_maps]
    order = sorted(range(len(alive)), key=lambda j: (dists[j], alive[j]))
    chosen = {alive[ex]}
    for j in order:
        if len(chosen) >= min(k, len(alive)):
            break
        chosen.add(alive[j])
    return sorted(chosen)


def m_step(instances: list[Instance], state: CategoryState,
           cfg: TrainConfig, raster_cfg: RasterConfig) -> CategoryState:
    """Template += mean deformation over the shape subset; canonical map =
    mean semantic UV over the uv subset; labels refreshed; instance offsets
    re-based so template + offsets is unchanged."""
    alive = [i for i, inst in enumerate(instances) if not inst.failed]
    if not alive:
        log.warning("M-step skipped: no usable instances")
        return state
    k = cfg.subset_size(len(alive))
    q_set = select_shape_subset(instances, k, state, raster_cfg)
    u_set = select_uv_subset(instances, k, state, raster_cfg)

    mean_dv = torch.stack(
        [instances[i].params.unpack()[0] for i in q_set]).mean(dim=0)
    new_template = state.template.with_vertices(state.template.vertices + mean_dv)
    for inst in instances:
        dv, cams, flow = inst.params.unpack()
        inst.params = ParamVector.pack(inst.params.layout, dv - mean_dv,
                                       cams, flow)

    canonical = aggregate_canonical(
        [semantic_uv(instances[i].flow(), instances[i].parts) for i in u_set])
    labels = vertex_part_labels(new_template, canonical.probs)
    return CategoryState(template=new_template, mapping=state.mapping,
                         canonical=canonical, labels=labels,
                         round_index=state.round_index + 1)


def semantic_losses(inst: Instance, state: CategoryState, cfg: TrainConfig,
                    raster_cfg: RasterConfig) -> float:
    """Combined L_sp + L_sv value of the instance at its current parameters."""
    mesh = inst.mesh(state.template)
    cam = inst.camera()
    rendered = render_part_probs(mesh, cam, state.canonical.probs,
                                 state.mapping, raster_cfg)
    sp = float(semantic_prob_loss(inst.parts, rendered))
    coords = pixel_grid(raster_cfg.height, raster_cfg.width)
    sv = float(semantic_vertex_loss(state.template, state.labels, cam,
                                    inst.parts, coords,
                                    cfg.samples_per_part, cfg.seed))
    return sp + sv


def pseudo_labels(instances: list[Instance], state: CategoryState,
                  cfg: TrainConfig, raster_cfg: RasterConfig,
                  threshold: float) -> tuple[list[np.ndarray | None], list[bool]]:
    """Per instance: argmax part-index map rendered from the canonical map
    (background = N_p where the silhouette is < 0.5), for instances whose
    combined semantic loss is below the threshold."""
    if state.canonical is None or state.labels is None:
        raise ValueError("pseudo labels need a canonical map (run >= 1 round)")
    maps: list[np.ndarray | None] = []
    flags: list[bool] = []
    n_p = state.canonical.probs.shape[-1]
    for inst in instances:
        score = semantic_losses(inst, state, cfg, raster_cfg) \
            if not inst.failed else float("inf")
        if not (score < threshold):
            maps.append(None)
            flags.append(False)
            continue
        mesh = inst.mesh(state.template)
        cam = inst.camera()
        rendered = render_part_probs(mesh, cam, state.canonical.probs,
                                     state.mapping, raster_cfg)
        ones = torch.ones(mesh.n_vertices, 1, dtype=torch.float64)
        sil = rasterize(mesh, cam, ones, raster_cfg).silhouette
        label_map = rendered.argmax(dim=-1).numpy()
        label_map[(sil < 0.5).numpy()] = n_p
        maps.append(label_map)
        flags.append(True)
    if not any(flags):
        log.warning("pseudo-label selection is empty at threshold %g", threshold)
    return maps, flags


def save_checkpoint(out_dir: str, state: CategoryState,
                    instances: list[Instance]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_obj(os.path.join(out_dir, "template.obj"), state.template)
    if state.canonical is not None:
        tensorio.write_tnsr(os.path.join(out_dir, "canonical.tnsr"),
                            state.canonical.probs.numpy())
    if state.labels is not None:
        tensorio.write_tnsr(os.path.join(out_dir, "labels.tnsr"),
                            state.labels.numpy().astype(np.float32))
    for inst in instances:
        dv, cams, flow = inst.params.unpack()
        doc = {
            "name": inst.name,
            "failed": inst.failed,
            "camera": cams[0].to_dict(),
            "dv": dv.numpy().tolist(),
            "flow": flow.grid.numpy().tolist(),
        }
        with open(os.path.join(out_dir, f"{inst.name}_params.json"), "w") as f:
            json.dump(doc, f, sort_keys=True)


def fit(bundles: list[SceneBundle], cfg: TrainConfig, raster_cfg: RasterConfig,
        out_dir: str | None = None) -> tuple[CategoryState, list[Instance]]:
    """Full progressive fit over scene bundles; writes per-round checkpoints
    and a JSONL loss log when out_dir is given."""
    state = CategoryState.initial(cfg)
    layout = ParamLayout(state.template.n_vertices, 1, cfg.h_uv, cfg.w_uv)
    instances = [Instance.from_bundle(b, layout, name=f"inst{i:03d}")
                 for i, b in enumerate(bundles)]
    for idx, inst in enumerate(instances):
        cam0 = init_hypotheses(1, cfg.seed + 7919 * idx).cameras[0]
        flow0 = init_flow_from_projection(state.template, cam0, state.mapping)
        inst.params = ParamVector.pack(layout, torch.zeros(layout.n_vertices, 3,
                                                           dtype=torch.float64),
                                       [cam0], flow0)

    log_f = None
    log_fn = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "loss_log.jsonl"), "w")

        def log_fn(entry):
            log_f.write(json.dumps(entry, sort_keys=True) + "\n")

    try:
        for _ in range(cfg.rounds):
            instances = e_step(instances, state, cfg, raster_cfg, log_fn)
            # Flow warm restart before aggregation: the optimized flow drifts
            # off the projection, which degrades the semantic UV lift.
            for inst in instances:
                if inst.failed:
                    continue
                dv, cams, _ = inst.params.unpack()
                mesh = inst.mesh(state.template)
                flow = init_flow_from_projection(mesh, cams[0], state.mapping)
                inst.params = ParamVector.pack(layout, dv, cams, flow)
            state = m_step(instances, state, cfg, raster_cfg)
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir,
                                             f"round{state.round_index}"),
                                state, instances)
    finally:
        if log_f is not None:
            log_f.close()
    return state, instances

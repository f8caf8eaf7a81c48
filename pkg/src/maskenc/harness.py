"""Training loop, evaluation, NMS and average precision.

Everything is deterministic: scene, proposal and init randomness all
derive from (seed, namespace, index) seed sequences, so a (seed, config,
variant) triple maps to one loss curve, one AP and one weight file.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import encoder as enc
from .detector import (
    DETECTOR_VARIANTS,
    apply_deltas,
    encoder_config,
    encoder_params_view,
    init_detector_params,
    make_proposals,
    scene_loss_and_grads,
    scene_predict,
    uses_mwn_l,
)
from .ops import sgd_momentum_step
from .scenes import box_iou, generate_scene, scene_rng

# seed-sequence namespaces (scenes shared with dump-scenes; eval held out)
NS_TRAIN_SCENE = 0
NS_TRAIN_PROP = 2
NS_INIT = 3
NS_EVAL_SCENE = 10
NS_EVAL_PROP = 11


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainConfig:
    """Optimizer schedule, sampling counts and encoder sizes."""

    seed: int = 0
    steps: int = 2500
    lr: float = 0.01
    lr_decay_step: int = 2000
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    proposals_per_scene: int = 16
    min_fg_fraction: float = 0.25
    nms_threshold: float = 0.3
    n_scenes: int = 2000
    eval_scenes: int = 200
    eval_seed: int = 900913
    n_prime: int = 7
    d_conv: int = 32
    d_fc: int = 64
    k_classes: int = 3
    i_l: float = 1.0
    i_in_g: float = 1.0
    i_out_g: float = -1.0
    bias_enabled: bool = True

    def __post_init__(self):
        for name in ("steps", "proposals_per_scene", "n_scenes",
                     "eval_scenes", "k_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay_step < self.steps:
            raise ValueError("lr_decay_step must lie inside (0, steps)")


def train(variant, cfg):
    """Jointly train all parameters of one detector variant.

    Returns (params dict, loss curve array). Raises TrainingDiverged if
    the loss goes non-finite.
    """
    if variant not in DETECTOR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; "
                         f"choose from {DETECTOR_VARIANTS}")
    rng = scene_rng(cfg.seed, NS_INIT, 0)
    params = init_detector_params(variant, cfg, rng)
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    scene_cache = {}
    losses = np.zeros(cfg.steps)
    for step in range(cfg.steps):
        idx = step % cfg.n_scenes
        if idx not in scene_cache:
            scene_cache[idx] = generate_scene(
                scene_rng(cfg.seed, NS_TRAIN_SCENE, idx))
        scene = scene_cache[idx]
        proposals = make_proposals(
            scene, scene_rng(cfg.seed, NS_TRAIN_PROP, step), cfg)
        loss, grads = scene_loss_and_grads(
            scene.image, proposals, variant, cfg, params)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"loss {loss!r} at step {step} (variant {variant})")
        lr = cfg.lr if step < cfg.lr_decay_step else cfg.lr / cfg.lr_decay_factor
        for name in params:
            params[name], velocity[name] = sgd_momentum_step(
                params[name], grads[name], velocity[name], lr,
                cfg.momentum, cfg.weight_decay)
        losses[step] = loss
    return params, losses


def greedy_nms(boxes, scores, threshold):
    """Indices kept by greedy NMS (suppress IoU > threshold), score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= threshold for j in keep):
            keep.append(int(i))
    return keep


def average_precision(detections, gt_boxes, iou_threshold=0.5):
    """Area under the interpolated precision/recall curve for one class.

    detections: list of (scene_index, box, score); gt_boxes: {scene_index:
    [box, ...]}. Detections match the highest-IoU unclaimed ground truth
    at IoU >= iou_threshold; duplicates count as false positives.
    """
    npos = sum(len(v) for v in gt_boxes.values())
    if npos == 0:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    claimed = {scene: np.zeros(len(v), dtype=bool)
               for scene, v in gt_boxes.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        scene, box, _ = detections[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes.get(scene, ())):
            iou = box_iou(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_iou >= iou_threshold and not claimed[scene][best_j]:
            claimed[scene][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, 1e-12)
    # interpolated area under the precision/recall curve
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def collect_detections(params, variant, n_scenes, cfg):
    """Score held-out scenes; returns (per-class detections, per-class GT).

    Per proposal and class, the refined box (deltas applied) and the
    class probability form a detection; detections are filtered per
    scene and class by greedy NMS at cfg.nms_threshold. Local masks are
    precomputed once (inference-time waiver).
    """
    ecfg = encoder_config(variant, cfg)
    eview = encoder_params_view(params, cfg.bias_enabled)
    masks_l = enc.precompute_masks_l(ecfg, eview) if uses_mwn_l(variant) else None
    k = cfg.k_classes
    detections = {c: [] for c in range(k)}
    gt_boxes = {c: {} for c in range(k)}
    for j in range(n_scenes):
        scene = generate_scene(scene_rng(cfg.eval_seed, NS_EVAL_SCENE, j))
        proposals = make_proposals(
            scene, scene_rng(cfg.eval_seed, NS_EVAL_PROP, j), cfg)
        preds = scene_predict(scene.image, proposals, variant, cfg, params,
                              masks_l=masks_l)
        for c in range(k):
            gt_boxes[c][j] = [box for cls, box in scene.objects if cls == c]
            boxes = [apply_deltas(p.box, d) for p, (_, d) in zip(proposals, preds)]
            scores = [probs[c] for probs, _ in preds]
            for i in greedy_nms(boxes, scores, cfg.nms_threshold):
                detections[c].append((j, boxes[i], float(scores[i])))
    return detections, gt_boxes


def evaluate(params, variant, n_scenes, cfg):
    """Mean AP at IoU 0.5 over classes, on n_scenes held-out scenes."""
    detections, gt_boxes = collect_detections(params, variant, n_scenes, cfg)
    aps = [average_precision(detections[c], gt_boxes[c], 0.5)
           for c in range(cfg.k_classes)]
    return float(np.mean(aps))


def config_from_mapping(values):
    """Build a TrainConfig from {key: string} config values."""
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        try:
            if f.type == "bool" or isinstance(f.default, bool):
                from .config import parse_bool
                kwargs[f.name] = parse_bool(raw)
            elif isinstance(f.default, int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        except ValueError:
            raise ValueError(
                f"config key {f.name!r}: cannot parse {raw!r}") from None
    return TrainConfig(**kwargs)

"""Tiny detection model: backbone, proposal sampling, loss and gradients.

The backbone is three 3x3 convolutions with two 2x2 max pools (total
stride 4, receptive field 14 px), so a 64x64 scene becomes a d_conv x
16 x 16 feature map. Proposals are ground-truth boxes jittered in scale
and position plus random background boxes, labeled foreground at IoU >=
0.5. Five detector wirings share the same backbone, FC and heads and
differ only in how the encoder branch vector is produced.
"""

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .ops import (
    conv2d_backward,
    conv2d_forward,
    ConvParams,
    max_pool2x2,
    max_pool2x2_backward,
    relu_backward,
    relu_forward,
    smooth_l1,
    softmax_cross_entropy,
)
from .roi import ImageExtent, Roi, image_pool, image_pool_backward
from .scenes import IMAGE_SIZE, box_iou

STRIDE = 4
FMAP_SIZE = IMAGE_SIZE // STRIDE

DETECTOR_VARIANTS = ("baseline-local", "baseline-global",
                     "m-frcn-l", "m-frcn-g", "m-frcn-lg")


def uses_local_branch(variant):
    return variant != "m-frcn-g"


def uses_global_branch(variant):
    return variant in ("m-frcn-g", "m-frcn-lg", "baseline-global")


def uses_mwn_l(variant):
    # baseline-local applies the raw unary mask directly (network bypassed)
    return variant in ("m-frcn-l", "m-frcn-lg", "baseline-global")


def uses_mwn_g(variant):
    # baseline-global pools the full image without ROI-specific masking
    return variant in ("m-frcn-g", "m-frcn-lg")


def encoder_variant(variant):
    """The encoder wiring (and hence FC input width) behind each detector."""
    if variant not in DETECTOR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; "
                         f"choose from {DETECTOR_VARIANTS}")
    return {"baseline-local": "l", "m-frcn-l": "l", "m-frcn-g": "g",
            "baseline-global": "lg", "m-frcn-lg": "lg"}[variant]


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def init_backbone_params(rng, channels=(16, 32, 32), scale=None):
    """He-initialized conv stacks as a flat {name: array} dict.

    `scale` switches to uniform(-scale, scale) kernels (used by the
    gradient checker, which wants O(1) activations on tiny inputs).
    """
    c1, c2, c3 = channels
    shapes = {"backbone.conv1.kernels": (c1, 1, 3, 3),
              "backbone.conv2.kernels": (c2, c1, 3, 3),
              "backbone.conv3.kernels": (c3, c2, 3, 3)}
    params = {}
    for name, shape in shapes.items():
        fan_in = shape[1] * shape[2] * shape[3]
        if scale is None:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        else:
            params[name] = rng.uniform(-scale, scale, shape)
        params[name.replace("kernels", "bias")] = np.zeros(shape[0])
    return params


@dataclass
class BackboneCache:
    image: np.ndarray
    params: dict
    pre_relu: list
    post_relu: list
    pool_in: list


def _conv_params(params, layer):
    return ConvParams(params[f"backbone.{layer}.kernels"],
                      params[f"backbone.{layer}.bias"])


def backbone_forward(image, params):
    """conv-relu, pool, conv-relu, conv-relu, pool; returns (fmap, cache)."""
    a1 = conv2d_forward(image, _conv_params(params, "conv1"), pad=1)
    r1 = relu_forward(a1)
    p1 = max_pool2x2(r1)
    a2 = conv2d_forward(p1, _conv_params(params, "conv2"), pad=1)
    r2 = relu_forward(a2)
    a3 = conv2d_forward(r2, _conv_params(params, "conv3"), pad=1)
    r3 = relu_forward(a3)
    out = max_pool2x2(r3)
    cache = BackboneCache(image, params, [a1, a2, a3], [r1, r2, r3], [r1, r3])
    return out, cache


def backbone_backward(cache, grad_out):
    """Returns (grad_image, {param name: gradient})."""
    params = cache.params
    a1, a2, a3 = cache.pre_relu
    r1, r2, r3 = cache.post_relu
    p1 = max_pool2x2(r1)
    g_r3 = max_pool2x2_backward(r3, grad_out)
    g_a3 = relu_backward(a3, g_r3)
    g_r2, gk3, gb3 = conv2d_backward(r2, _conv_params(params, "conv3"), 1, g_a3)
    g_a2 = relu_backward(a2, g_r2)
    g_p1, gk2, gb2 = conv2d_backward(p1, _conv_params(params, "conv2"), 1, g_a2)
    g_r1 = max_pool2x2_backward(r1, g_p1)
    g_a1 = relu_backward(a1, g_r1)
    g_img, gk1, gb1 = conv2d_backward(cache.image,
                                      _conv_params(params, "conv1"), 1, g_a1)
    grads = {"backbone.conv1.kernels": gk1, "backbone.conv1.bias": gb1,
             "backbone.conv2.kernels": gk2, "backbone.conv2.bias": gb2,
             "backbone.conv3.kernels": gk3, "backbone.conv3.bias": gb3}
    return g_img, grads


def tiny_backbone(image, params):
    """Feature map only (see backbone_forward for the cached version)."""
    fmap, _ = backbone_forward(image, params)
    return fmap


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

@dataclass
class Proposal:
    """One candidate box: feature-map roi, image box, label and target.

    label in 0..k-1 is a foreground class; label == k means background.
    target holds normalized regression deltas for foreground only.
    """

    roi: Roi
    box: tuple
    label: int
    target: np.ndarray | None


def roi_from_box(box):
    """Image box -> feature-map cells (floor/ceil at the stride)."""
    x0 = max(0, box[0] // STRIDE)
    y0 = max(0, box[1] // STRIDE)
    x1 = min(FMAP_SIZE, -(-box[2] // STRIDE))
    y1 = min(FMAP_SIZE, -(-box[3] // STRIDE))
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    return Roi(x0, y0, x1, y1)


def box_deltas(src, dst):
    """Normalized (dx, dy, dw, dh) regression target from src to dst."""
    sw, sh = src[2] - src[0], src[3] - src[1]
    dw, dh = dst[2] - dst[0], dst[3] - dst[1]
    return np.array([
        ((dst[0] + dst[2]) - (src[0] + src[2])) / (2.0 * sw),
        ((dst[1] + dst[3]) - (src[1] + src[3])) / (2.0 * sh),
        np.log(dw / sw),
        np.log(dh / sh),
    ])


def apply_deltas(box, deltas):
    """Invert box_deltas; returns a float box clipped to the image."""
    sw, sh = box[2] - box[0], box[3] - box[1]
    cx = (box[0] + box[2]) / 2.0 + deltas[0] * sw
    cy = (box[1] + box[3]) / 2.0 + deltas[1] * sh
    w = sw * np.exp(deltas[2])
    h = sh * np.exp(deltas[3])
    x0 = min(max(cx - w / 2.0, 0.0), IMAGE_SIZE - 1.0)
    y0 = min(max(cy - h / 2.0, 0.0), IMAGE_SIZE - 1.0)
    x1 = min(max(cx + w / 2.0, x0 + 1.0), float(IMAGE_SIZE))
    y1 = min(max(cy + h / 2.0, y0 + 1.0), float(IMAGE_SIZE))
    return (x0, y0, x1, y1)


def _jitter_box(box, rng):
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    cx = (x0 + x1) / 2.0 + rng.uniform(-0.2, 0.2) * w
    cy = (y0 + y1) / 2.0 + rng.uniform(-0.2, 0.2) * h
    nw = w * rng.uniform(0.75, 1.25)
    nh = h * rng.uniform(0.75, 1.25)
    jx0 = int(round(cx - nw / 2.0))
    jy0 = int(round(cy - nh / 2.0))
    jx1 = int(round(cx + nw / 2.0))
    jy1 = int(round(cy + nh / 2.0))
    jx0 = min(max(jx0, 0), IMAGE_SIZE - 2)
    jy0 = min(max(jy0, 0), IMAGE_SIZE - 2)
    jx1 = min(max(jx1, jx0 + 2), IMAGE_SIZE)
    jy1 = min(max(jy1, jy0 + 2), IMAGE_SIZE)
    return (jx0, jy0, jx1, jy1)


def _random_box(rng):
    w = int(rng.integers(10, 49))
    h = int(rng.integers(10, 49))
    x0 = int(rng.integers(0, IMAGE_SIZE - w + 1))
    y0 = int(rng.integers(0, IMAGE_SIZE - h + 1))
    return (x0, y0, x0 + w, y0 + h)


def _label_box(box, objects, k_classes):
    best_iou, best = 0.0, None
    for cls, gt in objects:
        iou = box_iou(box, gt)
        if iou > best_iou:
            best_iou, best = iou, (cls, gt)
    if best_iou >= 0.5:
        cls, gt = best
        return Proposal(roi_from_box(box), box, cls, box_deltas(box, gt))
    return Proposal(roi_from_box(box), box, k_classes, None)


def make_proposals(scene, rng, cfg):
    """Jittered ground truth plus random background boxes, labeled by IoU.

    Produces cfg.proposals_per_scene proposals and re-jitters until at
    least cfg.min_fg_fraction of them are foreground, when possible.
    """
    count = cfg.proposals_per_scene
    k = cfg.k_classes
    boxes = []
    for slot in range(count // 2):
        _, gt = scene.objects[slot % len(scene.objects)]
        boxes.append(_jitter_box(gt, rng))
    while len(boxes) < count:
        boxes.append(_random_box(rng))
    proposals = [_label_box(b, scene.objects, k) for b in boxes]
    want_fg = int(np.ceil(count * cfg.min_fg_fraction))
    for attempt in range(50):
        n_fg = sum(p.label < k for p in proposals)
        if n_fg >= want_fg:
            break
        idx = next(i for i in reversed(range(count)) if proposals[i].label == k)
        _, gt = scene.objects[attempt % len(scene.objects)]
        proposals[idx] = _label_box(_jitter_box(gt, rng), scene.objects, k)
    return proposals


# ---------------------------------------------------------------------------
# full-model forward / backward
# ---------------------------------------------------------------------------

def encoder_config(variant, cfg):
    return enc.EncoderConfig(
        variant=encoder_variant(variant), n_prime=cfg.n_prime,
        d_conv=cfg.d_conv, d_fc=cfg.d_fc, i_l=cfg.i_l,
        i_in_g=cfg.i_in_g, i_out_g=cfg.i_out_g, bias_enabled=cfg.bias_enabled)


def init_detector_params(variant, cfg, rng):
    """Backbone + encoder + heads as one flat {name: array} dict."""
    params = init_backbone_params(rng, channels=(16, 32, cfg.d_conv))
    ecfg = encoder_config(variant, cfg)
    eparams = enc.init_encoder_params(
        ecfg, cfg.k_classes, rng,
        include_mwn_l=uses_mwn_l(variant), include_mwn_g=uses_mwn_g(variant))
    params.update(dict(eparams.named_tensors()))
    return params


def encoder_params_view(params, bias_enabled=True):
    """EncoderParams referencing the arrays of a flat param dict."""
    return enc.EncoderParams.from_tensors(params, bias_enabled)


def _constant_masks(cfg):
    # baseline-local: the raw unary mask applied directly, network bypassed
    return enc.MaskSet(np.full((cfg.d_conv, cfg.n_prime, cfg.n_prime),
                               float(cfg.i_l)))


def _branch_forward(variant, ecfg, fmap, img_pooled, proposal, masks_l, eview):
    extent = ImageExtent(FMAP_SIZE, FMAP_SIZE)
    caches = {}
    vecs = []
    if uses_local_branch(variant):
        vec_l, caches["l"] = enc.local_branch_forward(
            fmap, proposal.roi, ecfg.n_prime, masks_l)
        vecs.append(vec_l)
    if uses_global_branch(variant):
        if uses_mwn_g(variant):
            vec_g, caches["g"] = enc.global_branch_forward(
                img_pooled, proposal.roi, extent, ecfg, eview.mwn_g)
        else:
            vec_g, caches["g_bypass"] = enc.global_branch_bypass_forward(
                img_pooled)
        vecs.append(vec_g)
    return np.concatenate(vecs) if len(vecs) > 1 else vecs[0], caches


def scene_predict(image, proposals, variant, cfg, params, masks_l=None):
    """Class probabilities and box deltas per proposal (forward only).

    `masks_l` may carry precomputed local masks (they are input
    independent); the output is bit-identical to the live path.
    """
    ecfg = encoder_config(variant, cfg)
    eview = encoder_params_view(params, cfg.bias_enabled)
    if uses_local_branch(variant) and masks_l is None:
        if uses_mwn_l(variant):
            masks_l = enc.precompute_masks_l(ecfg, eview)
        else:
            masks_l = _constant_masks(ecfg)
    fmap, _ = backbone_forward(image, params)
    img_pooled = (image_pool(fmap, ecfg.n_prime, "avg")
                  if uses_global_branch(variant) else None)
    out = []
    for proposal in proposals:
        vec, _ = _branch_forward(variant, ecfg, fmap, img_pooled, proposal,
                                 masks_l, eview)
        feat, _ = enc._fc_relu_forward(vec, eview)
        scores, deltas = enc.heads(feat, eview)
        z = scores - scores.max()
        probs = np.exp(z)
        probs /= probs.sum()
        out.append((probs, deltas))
    return out


def scene_loss_and_grads(image, proposals, variant, cfg, params):
    """Joint loss over one scene's proposals and gradients for every tensor.

    loss = mean cross-entropy over proposals + summed foreground
    regression loss / max(1, #foreground).
    """
    ecfg = encoder_config(variant, cfg)
    eview = encoder_params_view(params, cfg.bias_enabled)
    k = cfg.k_classes
    fmap, bcache = backbone_forward(image, params)
    img_pooled = (image_pool(fmap, ecfg.n_prime, "avg")
                  if uses_global_branch(variant) else None)
    if uses_mwn_l(variant):
        masks_l = enc.precompute_masks_l(ecfg, eview)
    elif uses_local_branch(variant):
        masks_l = _constant_masks(ecfg)
    else:
        masks_l = None

    n_props = len(proposals)
    n_fg = max(1, sum(p.label < k for p in proposals))
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    grad_fmap = np.zeros_like(fmap)
    grad_img_pooled = np.zeros_like(img_pooled) if img_pooled is not None else None
    grad_masks_l = None
    loss = 0.0

    for proposal in proposals:
        vec, caches = _branch_forward(variant, ecfg, fmap, img_pooled,
                                      proposal, masks_l, eview)
        feat, pre = enc._fc_relu_forward(vec, eview)
        scores, deltas = enc.heads(feat, eview)
        loss_c, g_scores = softmax_cross_entropy(scores, proposal.label)
        loss += loss_c / n_props
        g_scores = g_scores / n_props
        g_deltas = np.zeros(4)
        if proposal.label < k:
            loss_r, g_r = smooth_l1(deltas, proposal.target)
            loss += loss_r / n_fg
            g_deltas = g_r / n_fg
        g_feat, head_grads = enc.heads_backward(feat, eview, g_scores, g_deltas)
        for name, g in head_grads.items():
            grads[name] += g
        g_vec, fc_grads = enc._fc_relu_backward(vec, eview, pre, g_feat)
        for name, g in fc_grads.items():
            grads[name] += g
        pos = 0
        if "l" in caches:
            g_l = g_vec[pos:pos + ecfg.d_conv]
            pos += ecfg.d_conv
            g_fmap_p, g_masks = enc.local_branch_backward(caches["l"], g_l)
            grad_fmap += g_fmap_p
            if uses_mwn_l(variant):
                grad_masks_l = (g_masks if grad_masks_l is None
                                else grad_masks_l + g_masks)
        if "g" in caches:
            g_g = g_vec[pos:pos + ecfg.d_conv]
            g_pooled, gk, gb = enc.global_branch_backward(caches["g"], g_g)
            grad_img_pooled += g_pooled
            grads["mwn_g.kernels"] += gk
            grads["mwn_g.bias"] += gb
        elif "g_bypass" in caches:
            g_g = g_vec[pos:pos + ecfg.d_conv]
            grad_img_pooled += enc.global_branch_bypass_backward(
                caches["g_bypass"], g_g)

    if grad_masks_l is not None:
        raw = enc.unary_raw_mask(ecfg.n_prime, ecfg.i_l)
        gk, gb = enc.mwn_backward(raw, eview.mwn_l, grad_masks_l)
        grads["mwn_l.kernels"] += gk
        grads["mwn_l.bias"] += gb
    if grad_img_pooled is not None:
        grad_fmap += image_pool_backward(fmap.shape, ecfg.n_prime,
                                         grad_img_pooled)
    _, backbone_grads = backbone_backward(bcache, grad_fmap)
    for name, g in backbone_grads.items():
        grads[name] += g
    return loss, grads

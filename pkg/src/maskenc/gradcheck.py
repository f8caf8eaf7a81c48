"""Finite-difference oracle for every analytic backward pass.

`finite_diff` estimates gradients by central differences; `check_all`
runs it against the analytic backward of each operation (and of the
composed encoders, backbone and detector loss) on small randomized
instances. Instances are drawn so that max-pool argmaxes are tie-free
and ReLU/Huber inputs sit away from their kinks, where the comparison
would be meaningless.
"""

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .ops import (
    ConvParams,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    global_max_pool,
    global_max_pool_backward,
    max_pool2x2,
    max_pool2x2_backward,
    relu_backward,
    relu_forward,
    smooth_l1,
    softmax_cross_entropy,
)
from .roi import Roi, ImageExtent, roi_avg_pool, roi_avg_pool_backward, \
    roi_max_pool, roi_max_pool_backward

DEFAULT_TOL = 1e-4
ABS_FALLBACK = 1e-7


@dataclass
class GradReport:
    """Outcome of one operation's gradient check."""

    op: str
    max_rel: float
    max_abs: float
    n_checked: int
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.op:<24} {status}  coords={self.n_checked:<5d} "
                f"max_rel={self.max_rel:.3e} max_abs={self.max_abs:.3e}")


def finite_diff(f, x, eps=1e-5):
    """Central-difference gradient estimate of scalar f at x, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_grad = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy()
        xp.reshape(-1)[i] += eps
        xm = x.copy()
        xm.reshape(-1)[i] -= eps
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite evaluation while differencing coordinate {i}")
        flat_grad[i] = (fp - fm) / (2.0 * eps)
    return grad


class _Accumulator:
    """Collects (analytic, numeric) gradient pairs for one operation."""

    def __init__(self, tol, corrupt=False):
        self.tol = tol
        self.corrupt = corrupt
        self.pairs = []

    def add(self, analytic, numeric):
        a = np.asarray(analytic, dtype=np.float64).reshape(-1)
        if self.corrupt:
            # negative-control fixture: a deliberately wrong backward
            a = a * 1.01 + 1e-5
        n = np.asarray(numeric, dtype=np.float64).reshape(-1)
        if a.shape != n.shape:
            raise ValueError("analytic/numeric gradient shapes differ")
        self.pairs.append((a, n))

    def report(self, op):
        a = np.concatenate([p[0] for p in self.pairs])
        n = np.concatenate([p[1] for p in self.pairs])
        diff = np.abs(a - n)
        covered = diff <= ABS_FALLBACK
        denom = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
        passed = bool(np.all(covered | (rel <= self.tol)))
        max_rel = float(rel[~covered].max()) if np.any(~covered) else 0.0
        return GradReport(op, max_rel, float(diff.max()), int(a.size), passed)


def _distinct(rng, shape, lo=-1.0, hi=1.0):
    # permuted linspace: all values distinct with gaps >> the FD step
    n = int(np.prod(shape))
    vals = np.linspace(lo, hi, n) if n > 1 else np.array([(lo + hi) / 2.0])
    return rng.permutation(vals).reshape(shape)


def _away_from_zero(rng, shape, margin=0.05):
    vals = _distinct(rng, shape)
    return np.where(np.abs(vals) < margin, vals + 2 * margin * np.sign(vals + 0.5),
                    vals)


def _gmp_gap_ok(masked, min_gap=1e-3):
    flat = masked.reshape(masked.shape[0], -1)
    if flat.shape[1] < 2:
        return True
    top2 = np.partition(flat, flat.shape[1] - 2, axis=1)[:, -2:]
    return bool(np.all(top2[:, 1] - top2[:, 0] > min_gap))


def _check_conv2d(rng, acc, eps):
    x = rng.uniform(-1, 1, (1, 5, 5))
    params = ConvParams(rng.uniform(-1, 1, (2, 1, 3, 3)), rng.uniform(-1, 1, 2))
    proj = rng.uniform(-1, 1, (2, 5, 5))
    gx, gk, gb = conv2d_backward(x, params, 1, proj)
    acc.add(gx, finite_diff(
        lambda v: np.sum(conv2d_forward(v, params, 1) * proj), x, eps))
    acc.add(gk, finite_diff(
        lambda v: np.sum(conv2d_forward(
            x, ConvParams(v, params.bias), 1) * proj), params.kernels, eps))
    acc.add(gb, finite_diff(
        lambda v: np.sum(conv2d_forward(
            x, ConvParams(params.kernels, v), 1) * proj), params.bias, eps))


def _check_fc(rng, acc, eps):
    x = rng.uniform(-1, 1, 5)
    w = rng.uniform(-1, 1, (4, 5))
    b = rng.uniform(-1, 1, 4)
    proj = rng.uniform(-1, 1, 4)
    gx, gw, gb = fc_backward(x, w, proj)
    acc.add(gx, finite_diff(lambda v: np.dot(fc_forward(v, w, b), proj), x, eps))
    acc.add(gw, finite_diff(lambda v: np.dot(fc_forward(x, v, b), proj), w, eps))
    acc.add(gb, finite_diff(lambda v: np.dot(fc_forward(x, w, v), proj), b, eps))


def _check_relu(rng, acc, eps):
    x = _away_from_zero(rng, (9,))
    proj = rng.uniform(-1, 1, 9)
    acc.add(relu_backward(x, proj),
            finite_diff(lambda v: np.dot(relu_forward(v), proj), x, eps))


def _check_global_max_pool(rng, acc, eps):
    x = _distinct(rng, (3, 4, 4))
    proj = rng.uniform(-1, 1, 3)
    _, argmax = global_max_pool(x)
    analytic = global_max_pool_backward(x.shape, argmax, proj)
    acc.add(analytic, finite_diff(
        lambda v: np.dot(global_max_pool(v)[0], proj), x, eps))


def _check_max_pool2x2(rng, acc, eps):
    x = _distinct(rng, (2, 4, 4))
    proj = rng.uniform(-1, 1, (2, 2, 2))
    acc.add(max_pool2x2_backward(x, proj),
            finite_diff(lambda v: np.sum(max_pool2x2(v) * proj), x, eps))


def _check_roi_avg_pool(rng, acc, eps):
    fmap = rng.uniform(-1, 1, (2, 6, 7))
    roi = Roi(1, 0, 6, 5)
    proj = rng.uniform(-1, 1, (2, 3, 3))
    acc.add(roi_avg_pool_backward(fmap.shape, roi, 3, proj),
            finite_diff(lambda v: np.sum(roi_avg_pool(v, roi, 3) * proj),
                        fmap, eps))


def _check_roi_max_pool(rng, acc, eps):
    fmap = _distinct(rng, (2, 6, 7))
    roi = Roi(1, 0, 6, 5)
    proj = rng.uniform(-1, 1, (2, 3, 3))
    acc.add(roi_max_pool_backward(fmap, roi, 3, proj),
            finite_diff(lambda v: np.sum(roi_max_pool(v, roi, 3) * proj),
                        fmap, eps))


def _check_apply_masks(rng, acc, eps):
    f = rng.uniform(-1, 1, (3, 4, 4))
    masks = enc.MaskSet(rng.uniform(-1, 1, (3, 4, 4)))
    proj = rng.uniform(-1, 1, (3, 4, 4))
    gf, gm = enc.apply_masks_backward(f, masks, proj)
    acc.add(gf, finite_diff(
        lambda v: np.sum(enc.apply_masks(v, masks) * proj), f, eps))
    acc.add(gm, finite_diff(
        lambda v: np.sum(enc.apply_masks(f, enc.MaskSet(v)) * proj),
        masks.masks, eps))


def _check_mwn_forward(rng, acc, eps):
    raw = enc.unary_raw_mask(3, 1.0)
    params = ConvParams(rng.uniform(-1, 1, (4, 1, 3, 3)), rng.uniform(-1, 1, 4))
    proj = rng.uniform(-1, 1, (4, 3, 3))
    gk, gb = enc.mwn_backward(raw, params, proj)
    acc.add(gk, finite_diff(
        lambda v: np.sum(enc.mwn_forward(
            raw, ConvParams(v, params.bias)).masks * proj), params.kernels, eps))
    acc.add(gb, finite_diff(
        lambda v: np.sum(enc.mwn_forward(
            raw, ConvParams(params.kernels, v)).masks * proj), params.bias, eps))


def _check_softmax_cross_entropy(rng, acc, eps):
    logits = rng.uniform(-2, 2, 5)
    label = int(rng.integers(0, 5))
    _, grad = softmax_cross_entropy(logits, label)
    acc.add(grad, finite_diff(
        lambda v: softmax_cross_entropy(v, label)[0], logits, eps))


def _check_smooth_l1(rng, acc, eps):
    # keep |pred - target| away from the kink at 1
    target = rng.uniform(-1, 1, 4)
    d = np.array([-1.7, -0.45, 0.3, 1.5])
    pred = target + rng.permutation(d)
    _, grad = smooth_l1(pred, target)
    acc.add(grad, finite_diff(lambda v: smooth_l1(v, target)[0], pred, eps))


def _head_loss(feature, params, label, target):
    scores, deltas = enc.heads(feature, params)
    loss_c, _ = softmax_cross_entropy(scores, label)
    loss_r, _ = smooth_l1(deltas, target)
    return loss_c + loss_r


def _make_head_params(rng, d_fc, n_classes):
    return enc.EncoderParams(
        fc_weight=rng.uniform(-1, 1, (d_fc, d_fc)),  # unused by heads
        fc_bias=np.zeros(d_fc),
        cls_weight=rng.uniform(-0.5, 0.5, (n_classes + 1, d_fc)),
        cls_bias=rng.uniform(-0.5, 0.5, n_classes + 1),
        reg_weight=rng.uniform(-0.5, 0.5, (4, d_fc)),
        reg_bias=rng.uniform(-0.5, 0.5, 4),
    )


def _check_heads(rng, acc, eps):
    for _ in range(50):
        feature = rng.uniform(-1, 1, 6)
        params = _make_head_params(rng, 6, 3)
        label = int(rng.integers(0, 4))
        target = rng.uniform(-1, 1, 4)
        _, deltas = enc.heads(feature, params)
        if np.all(np.abs(np.abs(deltas - target) - 1.0) > 1e-3):
            break
    else:
        raise RuntimeError("no kink-free heads instance found")
    scores, deltas = enc.heads(feature, params)
    _, g_scores = softmax_cross_entropy(scores, label)
    _, g_deltas = smooth_l1(deltas, target)
    g_feat, grads = enc.heads_backward(feature, params, g_scores, g_deltas)
    acc.add(g_feat, finite_diff(
        lambda v: _head_loss(v, params, label, target), feature, eps))
    for name in ("cls.weight", "cls.bias", "reg.weight", "reg.bias"):
        attr = name.replace(".", "_")
        base = getattr(params, attr)

        def f(v, attr=attr):
            trial = _make_head_params(rng, 6, 3)  # shapes only
            for other in ("cls_weight", "cls_bias", "reg_weight", "reg_bias"):
                setattr(trial, other, getattr(params, other))
            setattr(trial, attr, v)
            return _head_loss(feature, trial, label, target)

        acc.add(grads[name], finite_diff(f, base, eps))


def _tiny_encoder_setup(rng, variant):
    cfg = enc.EncoderConfig(variant=variant, n_prime=3, d_conv=3, d_fc=4)
    params = enc.init_encoder_params(cfg, 2, rng)
    # larger-than-default scales so activations clear the kink guards
    params.fc_weight = rng.uniform(-1, 1, params.fc_weight.shape)
    params.fc_bias = rng.uniform(-1, 1, params.fc_bias.shape)
    if params.mwn_l is not None:
        params.mwn_l = ConvParams(rng.uniform(-1, 1, (3, 1, 3, 3)),
                                  rng.uniform(-0.5, 0.5, 3))
    if params.mwn_g is not None:
        params.mwn_g = ConvParams(rng.uniform(-1, 1, (3, 1, 3, 3)),
                                  rng.uniform(-0.5, 0.5, 3))
    return cfg, params


def _encoder_instance_ok(cache, min_gap=1e-3):
    # at least one live ReLU unit, or every upstream gradient vanishes
    # and the comparison is vacuous
    if not np.all(np.abs(cache.pre_fc) > 1e-4) or not np.any(cache.pre_fc > 0):
        return False
    for bc in cache.branch_caches:
        if isinstance(bc, enc.LocalBranchCache):
            masked = enc.apply_masks(bc.pooled, bc.masks)
        elif isinstance(bc, enc.GlobalBranchCache):
            masked = enc.apply_masks(bc.image_pooled, bc.masks)
        else:
            continue
        if not _gmp_gap_ok(masked, min_gap):
            return False
    return True


def _substitute(params, name, value):
    sub = enc.EncoderParams(fc_weight=params.fc_weight, fc_bias=params.fc_bias,
                            cls_weight=params.cls_weight, cls_bias=params.cls_bias,
                            reg_weight=params.reg_weight, reg_bias=params.reg_bias,
                            mwn_l=params.mwn_l, mwn_g=params.mwn_g)
    if name == "mwn_l.kernels":
        sub.mwn_l = ConvParams(value, params.mwn_l.bias, params.mwn_l.bias_enabled)
    elif name == "mwn_l.bias":
        sub.mwn_l = ConvParams(params.mwn_l.kernels, value, params.mwn_l.bias_enabled)
    elif name == "mwn_g.kernels":
        sub.mwn_g = ConvParams(value, params.mwn_g.bias, params.mwn_g.bias_enabled)
    elif name == "mwn_g.bias":
        sub.mwn_g = ConvParams(params.mwn_g.kernels, value, params.mwn_g.bias_enabled)
    else:
        setattr(sub, name.replace(".", "_"), value)
    return sub


def _check_encode_l(rng, acc, eps):
    roi = Roi(1, 2, 7, 8)
    for _ in range(100):
        cfg, params = _tiny_encoder_setup(rng, "l")
        fmap = _distinct(rng, (3, 9, 9))
        _, cache = enc.encode_l_forward(fmap, roi, cfg, params)
        if _encoder_instance_ok(cache):
            break
    else:
        raise RuntimeError("no tie-free encode_l instance found")
    proj = rng.uniform(-1, 1, cfg.d_fc)
    feat, cache = enc.encode_l_forward(fmap, roi, cfg, params)
    grad_fmap, grads = enc.encode_l_backward(cache, proj)
    acc.add(grad_fmap, finite_diff(
        lambda v: np.dot(enc.encode_l(v, roi, cfg, params), proj), fmap, eps))
    for name in ("mwn_l.kernels", "mwn_l.bias", "fc.weight", "fc.bias"):
        base = dict(params.named_tensors())[name]
        acc.add(grads[name], finite_diff(
            lambda v, name=name: np.dot(
                enc.encode_l(fmap, roi, cfg, _substitute(params, name, v)), proj),
            base, eps))


def _check_encode_g(rng, acc, eps):
    extent = ImageExtent(9, 8)
    roi = Roi(2, 1, 7, 6)
    for _ in range(100):
        cfg, params = _tiny_encoder_setup(rng, "g")
        pooled = _distinct(rng, (3, 3, 3))
        _, cache = enc.encode_g_forward(pooled, roi, extent, cfg, params)
        if _encoder_instance_ok(cache):
            break
    else:
        raise RuntimeError("no tie-free encode_g instance found")
    proj = rng.uniform(-1, 1, cfg.d_fc)
    _, cache = enc.encode_g_forward(pooled, roi, extent, cfg, params)
    grad_pooled, grads = enc.encode_g_backward(cache, proj)
    acc.add(grad_pooled, finite_diff(
        lambda v: np.dot(enc.encode_g(v, roi, extent, cfg, params), proj),
        pooled, eps))
    for name in ("mwn_g.kernels", "mwn_g.bias", "fc.weight", "fc.bias"):
        base = dict(params.named_tensors())[name]
        acc.add(grads[name], finite_diff(
            lambda v, name=name: np.dot(
                enc.encode_g(pooled, roi, extent, cfg,
                             _substitute(params, name, v)), proj),
            base, eps))


def _check_encode_lg(rng, acc, eps):
    extent = ImageExtent(9, 9)
    roi = Roi(1, 2, 7, 8)
    for _ in range(100):
        cfg, params = _tiny_encoder_setup(rng, "lg")
        fmap = _distinct(rng, (3, 9, 9))
        pooled = _distinct(rng, (3, 3, 3))
        _, cache = enc.encode_lg_forward(fmap, pooled, roi, extent, cfg, params)
        if _encoder_instance_ok(cache):
            break
    else:
        raise RuntimeError("no tie-free encode_lg instance found")
    proj = rng.uniform(-1, 1, cfg.d_fc)
    _, cache = enc.encode_lg_forward(fmap, pooled, roi, extent, cfg, params)
    grad_fmap, grad_pooled, grads = enc.encode_lg_backward(cache, proj)
    acc.add(grad_fmap, finite_diff(
        lambda v: np.dot(enc.encode_lg(v, pooled, roi, extent, cfg, params), proj),
        fmap, eps))
    acc.add(grad_pooled, finite_diff(
        lambda v: np.dot(enc.encode_lg(fmap, v, roi, extent, cfg, params), proj),
        pooled, eps))
    for name in ("mwn_l.kernels", "mwn_l.bias", "mwn_g.kernels", "mwn_g.bias",
                 "fc.weight", "fc.bias"):
        base = dict(params.named_tensors())[name]
        acc.add(grads[name], finite_diff(
            lambda v, name=name: np.dot(
                enc.encode_lg(fmap, pooled, roi, extent, cfg,
                              _substitute(params, name, v)), proj),
            base, eps))


def _check_backbone(rng, acc, eps):
    from .detector import backbone_backward, backbone_forward, init_backbone_params

    for _ in range(100):
        params = init_backbone_params(rng, channels=(2, 3, 3), scale=0.5)
        image = _distinct(rng, (1, 16, 16))
        out, cache = backbone_forward(image, params)
        # stay off the ReLU kinks and pooling ties
        pre_ok = all(np.all(np.abs(p) > 1e-4) for p in cache.pre_relu)
        if pre_ok:
            break
    else:
        raise RuntimeError("no kink-free backbone instance found")
    proj = rng.uniform(-1, 1, out.shape)
    grad_image, grads = backbone_backward(cache, proj)
    acc.add(grad_image, finite_diff(
        lambda v: np.sum(backbone_forward(v, params)[0] * proj), image, eps))
    for name, base in params.items():
        def f(v, name=name):
            trial = dict(params)
            trial[name] = v
            return np.sum(backbone_forward(image, trial)[0] * proj)

        acc.add(grads[name], finite_diff(f, base, eps))


def _check_detector_loss(rng, acc, eps):
    # one-ROI classification + regression loss through a local encoder
    roi = Roi(1, 1, 8, 8)
    label, target = 1, None
    for _ in range(100):
        cfg, params = _tiny_encoder_setup(rng, "l")
        fmap = _distinct(rng, (3, 9, 9))
        target = rng.uniform(-1, 1, 4)
        feat, cache = enc.encode_l_forward(fmap, roi, cfg, params)
        _, deltas = enc.heads(feat, params)
        kink_free = np.all(np.abs(np.abs(deltas - target) - 1.0) > 1e-3)
        if _encoder_instance_ok(cache) and kink_free:
            break
    else:
        raise RuntimeError("no kink-free detector instance found")

    def loss_fn(fmap_v, params_v):
        feat = enc.encode_l(fmap_v, roi, cfg, params_v)
        scores, deltas = enc.heads(feat, params_v)
        return softmax_cross_entropy(scores, label)[0] + smooth_l1(deltas, target)[0]

    feat, cache = enc.encode_l_forward(fmap, roi, cfg, params)
    scores, deltas = enc.heads(feat, params)
    _, g_scores = softmax_cross_entropy(scores, label)
    _, g_deltas = smooth_l1(deltas, target)
    g_feat, head_grads = enc.heads_backward(feat, params, g_scores, g_deltas)
    grad_fmap, grads = enc.encode_l_backward(cache, g_feat)
    grads.update(head_grads)
    acc.add(grad_fmap, finite_diff(lambda v: loss_fn(v, params), fmap, eps))
    for name in ("mwn_l.kernels", "fc.weight", "cls.weight", "reg.weight"):
        base = dict(params.named_tensors())[name]
        acc.add(grads[name], finite_diff(
            lambda v, name=name: loss_fn(fmap, _substitute(params, name, v)),
            base, eps))


_REGISTRY = (
    ("conv2d", _check_conv2d),
    ("fc", _check_fc),
    ("relu", _check_relu),
    ("global_max_pool", _check_global_max_pool),
    ("max_pool2x2", _check_max_pool2x2),
    ("roi_avg_pool", _check_roi_avg_pool),
    ("roi_max_pool", _check_roi_max_pool),
    ("apply_masks", _check_apply_masks),
    ("mwn_forward", _check_mwn_forward),
    ("softmax_cross_entropy", _check_softmax_cross_entropy),
    ("smooth_l1", _check_smooth_l1),
    ("heads", _check_heads),
    ("encode_l", _check_encode_l),
    ("encode_g", _check_encode_g),
    ("encode_lg", _check_encode_lg),
    ("backbone", _check_backbone),
    ("detector_loss", _check_detector_loss),
)

OP_NAMES = tuple(name for name, _ in _REGISTRY)


def check_all(seed=0, eps=1e-5, tol=DEFAULT_TOL, corrupt=None):
    """Run every registered gradient check; returns reports sorted by op.

    `corrupt` names one op whose analytic gradient is deliberately
    perturbed before comparison (negative-control fixture; that report
    must fail).
    """
    if corrupt is not None and corrupt not in OP_NAMES:
        raise ValueError(f"unknown op {corrupt!r}; choose from {OP_NAMES}")
    reports = []
    for index, (name, check) in enumerate(_REGISTRY):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, index])))
        acc = _Accumulator(tol, corrupt=(name == corrupt))
        check(rng, acc, eps)
        reports.append(acc.report(name))
    return sorted(reports, key=lambda r: r.op)

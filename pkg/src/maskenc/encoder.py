"""Mask-generating ROI feature encoders.

One convolution layer (the mask network) turns a raw mask into one
learned mask per feature channel; the masks multiply the pooled feature
map channel-wise, and a global max pool plus a small FC layer produce
the encoded feature. Three assemblies are provided: local (unary raw
mask over the pooled ROI), global (ROI-position context mask over the
pooled full image) and their concatenation.

Forward-only entry points (`encode_l`, `encode_g`, `encode_lg`) implement
the encoder contracts; the `*_forward` / `*_backward` pairs additionally
carry a cache so training code and the gradient checker can push exact
gradients back to every parameter and to the feature map.
"""

from dataclasses import dataclass

import numpy as np

from .ops import (
    ConvParams,
    _require,
    fc_backward,
    fc_forward,
    global_max_pool,
    global_max_pool_backward,
    relu_backward,
    relu_forward,
)
from .roi import context_raw_mask, roi_avg_pool, roi_avg_pool_backward

VARIANTS = ("l", "g", "lg")


@dataclass
class EncoderConfig:
    """Hyperparameters of one encoder instance."""

    variant: str
    n_prime: int = 7
    d_conv: int = 32
    d_fc: int = 64
    i_l: float = 1.0
    i_in_g: float = 1.0
    i_out_g: float = -1.0
    bias_enabled: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_prime < 1 or self.n_prime % 2 == 0:
            raise ValueError(f"n_prime must be odd and >= 1, got {self.n_prime}")
        if self.d_conv < 1 or self.d_fc < 1:
            raise ValueError("d_conv and d_fc must be >= 1")
        if self.i_l <= 0:
            raise ValueError(f"i_l must be > 0, got {self.i_l}")
        if self.i_in_g == self.i_out_g:
            raise ValueError("i_in_g and i_out_g must differ")

    @property
    def fc_input_dim(self):
        return 2 * self.d_conv if self.variant == "lg" else self.d_conv


@dataclass
class MaskSet:
    """The learned masks, one n x n mask per feature channel."""

    masks: np.ndarray  # (d_conv, n, n)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        _require(self.masks.ndim == 3 and self.masks.shape[1] == self.masks.shape[2],
                 f"masks must be (d, n, n), got {self.masks.shape}")


@dataclass
class EncoderParams:
    """All trainable tensors of one encoder plus its two heads.

    `mwn_l` / `mwn_g` may be None when the corresponding branch is absent
    or bypassed (the baselines). fc_weight must take d_conv inputs for
    the single-branch variants and 2*d_conv for the combined one.
    """

    fc_weight: np.ndarray
    fc_bias: np.ndarray
    cls_weight: np.ndarray
    cls_bias: np.ndarray
    reg_weight: np.ndarray
    reg_bias: np.ndarray
    mwn_l: ConvParams | None = None
    mwn_g: ConvParams | None = None

    _NAMES = ("fc.weight", "fc.bias", "cls.weight", "cls.bias",
              "reg.weight", "reg.bias")

    def named_tensors(self):
        """Yield (canonical name, array) pairs for the tensors present."""
        if self.mwn_l is not None:
            yield "mwn_l.kernels", self.mwn_l.kernels
            yield "mwn_l.bias", self.mwn_l.bias
        if self.mwn_g is not None:
            yield "mwn_g.kernels", self.mwn_g.kernels
            yield "mwn_g.bias", self.mwn_g.bias
        for name in self._NAMES:
            yield name, getattr(self, name.replace(".", "_"))

    @classmethod
    def from_tensors(cls, tensors, bias_enabled=True):
        """Rebuild from a {canonical name: array} mapping."""
        mwn_l = mwn_g = None
        if "mwn_l.kernels" in tensors:
            mwn_l = ConvParams(tensors["mwn_l.kernels"], tensors["mwn_l.bias"],
                               bias_enabled)
        if "mwn_g.kernels" in tensors:
            mwn_g = ConvParams(tensors["mwn_g.kernels"], tensors["mwn_g.bias"],
                               bias_enabled)
        return cls(fc_weight=tensors["fc.weight"], fc_bias=tensors["fc.bias"],
                   cls_weight=tensors["cls.weight"], cls_bias=tensors["cls.bias"],
                   reg_weight=tensors["reg.weight"], reg_bias=tensors["reg.bias"],
                   mwn_l=mwn_l, mwn_g=mwn_g)


def init_encoder_params(cfg, n_classes, rng, include_mwn_l=None, include_mwn_g=None):
    """Fresh parameters, all biases zero.

    Mask-network kernels are Gaussian(0, 0.01) (new-layer convention);
    the FC and head weights are fan-in scaled so the from-scratch toy
    model trains in a few thousand steps. Branch networks default to the
    config's variant; pass the include_* flags to build the bypassed
    baselines.
    """
    if include_mwn_l is None:
        include_mwn_l = "l" in cfg.variant
    if include_mwn_g is None:
        include_mwn_g = "g" in cfg.variant
    n, d = cfg.n_prime, cfg.d_conv

    def conv(shape):
        return ConvParams(rng.normal(0.0, 0.01, shape), np.zeros(shape[0]),
                          cfg.bias_enabled)

    d_in = cfg.fc_input_dim
    return EncoderParams(
        mwn_l=conv((d, 1, n, n)) if include_mwn_l else None,
        mwn_g=conv((d, 1, n, n)) if include_mwn_g else None,
        fc_weight=rng.normal(0.0, np.sqrt(2.0 / d_in), (cfg.d_fc, d_in)),
        fc_bias=np.zeros(cfg.d_fc),
        cls_weight=rng.normal(0.0, np.sqrt(1.0 / cfg.d_fc),
                              (n_classes + 1, cfg.d_fc)),
        cls_bias=np.zeros(n_classes + 1),
        reg_weight=rng.normal(0.0, np.sqrt(1.0 / cfg.d_fc), (4, cfg.d_fc)),
        reg_bias=np.zeros(4),
    )


def unary_raw_mask(n, i_l):
    """Constant n x n raw mask of value i_l (> 0)."""
    if i_l <= 0:
        raise ValueError(f"i_l must be > 0, got {i_l}")
    return np.full((n, n), float(i_l))


_MWN_GATHER = {}


def _mwn_cols(raw):
    # patch matrix of the zero-padded raw mask via one cached gather; the
    # raw values change per ROI but the index pattern only depends on n
    n = raw.shape[0]
    idx = _MWN_GATHER.get(n)
    if idx is None:
        pad = (n - 1) // 2
        idx = np.full((n * n, n * n), n * n, dtype=np.intp)  # n*n = zero slot
        for u in range(n):
            for v in range(n):
                for i in range(n):
                    for j in range(n):
                        yy, xx = i + u - pad, j + v - pad
                        if 0 <= yy < n and 0 <= xx < n:
                            idx[u * n + v, i * n + j] = yy * n + xx
        _MWN_GATHER[n] = idx
    flat = np.append(raw.ravel(), 0.0)
    return flat[idx]


def _check_mwn_args(raw, params):
    raw = np.asarray(raw, dtype=np.float64)
    _require(raw.ndim == 2 and raw.shape[0] == raw.shape[1],
             f"raw mask must be square, got {raw.shape}")
    n = raw.shape[0]
    if n % 2 == 0:
        raise ValueError(f"raw mask extent must be odd, got {n}")
    _require(params.kernel_size == n,
             f"kernel size {params.kernel_size} != raw mask size {n}")
    _require(params.kernels.shape[1] == 1,
             "mask-network kernels must have one input channel")
    return raw, n


def mwn_forward(raw, params):
    """Convolve a raw mask into one learned mask per channel.

    The raw n x n mask is zero-padded by (n-1)/2 and convolved with n x n
    kernels at stride 1, giving same-size masks.
    """
    raw, n = _check_mwn_args(raw, params)
    d = params.kernels.shape[0]
    out = params.kernels.reshape(d, -1) @ _mwn_cols(raw)
    if params.bias_enabled:
        out = out + params.bias[:, None]
    return MaskSet(out.reshape(d, n, n))


def mwn_backward(raw, params, grad_masks):
    """Gradients of mwn_forward w.r.t. kernels and bias (raw is constant)."""
    raw, n = _check_mwn_args(raw, params)
    d = params.kernels.shape[0]
    grad_masks = np.asarray(grad_masks, dtype=np.float64)
    _require(grad_masks.shape == (d, n, n),
             f"grad_masks shape {grad_masks.shape} != ({d}, {n}, {n})")
    g = grad_masks.reshape(d, -1)
    grad_kernels = (g @ _mwn_cols(raw).T).reshape(params.kernels.shape)
    if params.bias_enabled:
        grad_bias = g.sum(axis=1)
    else:
        grad_bias = np.zeros(d)
    return grad_kernels, grad_bias


def apply_masks(f, maskset):
    """Channel-wise masking: out[k, i, j] = f[k, i, j] * mask[k, i, j]."""
    f = np.asarray(f, dtype=np.float64)
    _require(f.shape == maskset.masks.shape,
             f"feature shape {f.shape} != mask shape {maskset.masks.shape}")
    return f * maskset.masks


def apply_masks_backward(f, maskset, grad_out):
    """Gradients of apply_masks: (grad_f, grad_masks)."""
    f = np.asarray(f, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _require(grad_out.shape == f.shape == maskset.masks.shape,
             f"mismatched shapes {grad_out.shape}, {f.shape}, {maskset.masks.shape}")
    return grad_out * maskset.masks, grad_out * f


def precompute_masks_l(cfg, params):
    """Run the local mask network once; its masks are input-independent.

    Passing the result as `masks` to encode_l skips the convolution and is
    bit-identical to the live path. Recompute whenever params change.
    """
    raw = unary_raw_mask(cfg.n_prime, cfg.i_l)
    return mwn_forward(raw, params.mwn_l)


# ---------------------------------------------------------------------------
# branch-level forward/backward (shared by the encoders and the baselines)
# ---------------------------------------------------------------------------

@dataclass
class LocalBranchCache:
    fmap_shape: tuple
    roi: object
    n: int
    pooled: np.ndarray
    masks: MaskSet
    argmax: np.ndarray


def local_branch_forward(fmap, roi, n, masks):
    """pool ROI -> mask -> per-channel max; returns (vector, cache)."""
    pooled = roi_avg_pool(fmap, roi, n)
    masked = apply_masks(pooled, masks)
    vec, argmax = global_max_pool(masked)
    return vec, LocalBranchCache(fmap.shape, roi, n, pooled, masks, argmax)


def local_branch_backward(cache, grad_vec):
    """Returns (grad_fmap, grad_masks)."""
    d, n = cache.pooled.shape[0], cache.n
    grad_masked = global_max_pool_backward((d, n, n), cache.argmax, grad_vec)
    grad_pooled, grad_masks = apply_masks_backward(cache.pooled, cache.masks,
                                                   grad_masked)
    grad_fmap = roi_avg_pool_backward(cache.fmap_shape, cache.roi, n, grad_pooled)
    return grad_fmap, grad_masks


@dataclass
class GlobalBranchCache:
    raw: np.ndarray
    params: ConvParams
    image_pooled: np.ndarray
    masks: MaskSet
    argmax: np.ndarray


def global_branch_forward(image_pooled, roi, extent, cfg, params):
    """context mask -> mask network -> mask pooled image -> per-channel max."""
    raw = context_raw_mask(roi, extent, cfg.n_prime, cfg.i_in_g, cfg.i_out_g)
    masks = mwn_forward(raw, params)
    masked = apply_masks(image_pooled, masks)
    vec, argmax = global_max_pool(masked)
    return vec, GlobalBranchCache(raw, params, image_pooled, masks, argmax)


def global_branch_backward(cache, grad_vec):
    """Returns (grad_image_pooled, grad_kernels, grad_bias)."""
    grad_masked = global_max_pool_backward(cache.image_pooled.shape,
                                           cache.argmax, grad_vec)
    grad_pooled, grad_masks = apply_masks_backward(cache.image_pooled,
                                                   cache.masks, grad_masked)
    grad_kernels, grad_bias = mwn_backward(cache.raw, cache.params, grad_masks)
    return grad_pooled, grad_kernels, grad_bias


def global_branch_bypass_forward(image_pooled):
    """Plain per-channel max of the pooled image (no masking)."""
    vec, argmax = global_max_pool(image_pooled)
    return vec, (image_pooled.shape, argmax)


def global_branch_bypass_backward(cache, grad_vec):
    shape, argmax = cache
    return global_max_pool_backward(shape, argmax, grad_vec)


def _fc_relu_forward(x, params):
    pre = fc_forward(x, params.fc_weight, params.fc_bias)
    return relu_forward(pre), pre


def _fc_relu_backward(x, params, pre, grad_out):
    grad_pre = relu_backward(pre, grad_out)
    grad_x, grad_w, grad_b = fc_backward(x, params.fc_weight, grad_pre)
    return grad_x, {"fc.weight": grad_w, "fc.bias": grad_b}


# ---------------------------------------------------------------------------
# encoder assemblies
# ---------------------------------------------------------------------------

@dataclass
class EncodeCache:
    variant: str
    branch_caches: tuple
    branch_vec: np.ndarray
    pre_fc: np.ndarray
    params: EncoderParams
    masks_learned: bool
    i_l: float | None = None


def encode_l_forward(fmap, roi, cfg, params, masks=None):
    """Local-ROI encoder; returns (d_fc feature, cache).

    When `masks` is None the mask network runs live on the unary raw
    mask; passing a precomputed MaskSet gives bit-identical output and
    treats the masks as constants in the backward pass.
    """
    if "l" not in cfg.variant:
        raise ValueError(f"variant {cfg.variant!r} has no local branch")
    learned = masks is None
    if learned:
        masks = precompute_masks_l(cfg, params)
    vec, bcache = local_branch_forward(fmap, roi, cfg.n_prime, masks)
    feat, pre = _fc_relu_forward(vec, params)
    return feat, EncodeCache("l", (bcache,), vec, pre, params, learned, cfg.i_l)


def encode_l(fmap, roi, cfg, params, masks=None):
    """Local-ROI encoder: pooled ROI, channel-wise masks, GMP, FC, ReLU."""
    feat, _ = encode_l_forward(fmap, roi, cfg, params, masks)
    return feat


def encode_l_backward(cache, grad_feat):
    """Returns (grad_fmap, {param name: gradient})."""
    grad_vec, grads = _fc_relu_backward(cache.branch_vec, cache.params,
                                        cache.pre_fc, grad_feat)
    grad_fmap, grad_masks = local_branch_backward(cache.branch_caches[0], grad_vec)
    if cache.masks_learned:
        raw = unary_raw_mask(cache.branch_caches[0].n, cache.i_l)
        gk, gb = mwn_backward(raw, cache.params.mwn_l, grad_masks)
        grads["mwn_l.kernels"] = gk
        grads["mwn_l.bias"] = gb
    return grad_fmap, grads


def encode_g_forward(image_fmap_pooled, roi, extent, cfg, params):
    """Global-context encoder; returns (d_fc feature, cache).

    `image_fmap_pooled` is the full image pooled once per image (average
    mode); the raw mask depends only on the ROI's position in the image.
    """
    if "g" not in cfg.variant:
        raise ValueError(f"variant {cfg.variant!r} has no global branch")
    vec, bcache = global_branch_forward(image_fmap_pooled, roi, extent, cfg,
                                        params.mwn_g)
    feat, pre = _fc_relu_forward(vec, params)
    return feat, EncodeCache("g", (bcache,), vec, pre, params, True)


def encode_g(image_fmap_pooled, roi, extent, cfg, params):
    """Global-context encoder: masked pooled image, GMP, FC, ReLU."""
    feat, _ = encode_g_forward(image_fmap_pooled, roi, extent, cfg, params)
    return feat


def encode_g_backward(cache, grad_feat):
    """Returns (grad_image_pooled, {param name: gradient})."""
    grad_vec, grads = _fc_relu_backward(cache.branch_vec, cache.params,
                                        cache.pre_fc, grad_feat)
    grad_pooled, gk, gb = global_branch_backward(cache.branch_caches[0], grad_vec)
    grads["mwn_g.kernels"] = gk
    grads["mwn_g.bias"] = gb
    return grad_pooled, grads


def encode_lg_forward(fmap, image_fmap_pooled, roi, extent, cfg, params,
                      masks_l=None):
    """Combined encoder; returns (d_fc feature, cache).

    The two per-channel max vectors (local branch first, then global) are
    concatenated to 2*d_conv before the single FC layer.
    """
    if cfg.variant != "lg":
        raise ValueError(f"variant {cfg.variant!r} is not the combined encoder")
    learned = masks_l is None
    if learned:
        masks_l = precompute_masks_l(cfg, params)
    vec_l, lcache = local_branch_forward(fmap, roi, cfg.n_prime, masks_l)
    vec_g, gcache = global_branch_forward(image_fmap_pooled, roi, extent, cfg,
                                          params.mwn_g)
    vec = np.concatenate([vec_l, vec_g])
    feat, pre = _fc_relu_forward(vec, params)
    return feat, EncodeCache("lg", (lcache, gcache), vec, pre, params, learned,
                             cfg.i_l)


def encode_lg(fmap, image_fmap_pooled, roi, extent, cfg, params):
    """Combined local+global encoder (concatenated GMP vectors, one FC)."""
    feat, _ = encode_lg_forward(fmap, image_fmap_pooled, roi, extent, cfg, params)
    return feat


def encode_lg_backward(cache, grad_feat):
    """Returns (grad_fmap, grad_image_pooled, {param name: gradient})."""
    grad_vec, grads = _fc_relu_backward(cache.branch_vec, cache.params,
                                        cache.pre_fc, grad_feat)
    d = cache.branch_caches[0].pooled.shape[0]
    grad_fmap, grad_masks = local_branch_backward(cache.branch_caches[0],
                                                  grad_vec[:d])
    grad_pooled, gk_g, gb_g = global_branch_backward(cache.branch_caches[1],
                                                     grad_vec[d:])
    grads["mwn_g.kernels"] = gk_g
    grads["mwn_g.bias"] = gb_g
    if cache.masks_learned:
        raw = unary_raw_mask(cache.branch_caches[0].n, cache.i_l)
        gk_l, gb_l = mwn_backward(raw, cache.params.mwn_l, grad_masks)
        grads["mwn_l.kernels"] = gk_l
        grads["mwn_l.bias"] = gb_l
    return grad_fmap, grad_pooled, grads


def heads(feature, params):
    """Class scores (k+1,) and class-agnostic box deltas (4,)."""
    scores = fc_forward(feature, params.cls_weight, params.cls_bias)
    deltas = fc_forward(feature, params.reg_weight, params.reg_bias)
    return scores, deltas


def heads_backward(feature, params, grad_scores, grad_deltas):
    """Returns (grad_feature, {param name: gradient})."""
    gx_c, gw_c, gb_c = fc_backward(feature, params.cls_weight, grad_scores)
    gx_r, gw_r, gb_r = fc_backward(feature, params.reg_weight, grad_deltas)
    grads = {"cls.weight": gw_c, "cls.bias": gb_c,
             "reg.weight": gw_r, "reg.bias": gb_r}
    return gx_c + gx_r, grads

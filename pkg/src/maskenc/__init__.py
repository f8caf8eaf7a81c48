"""maskenc: mask-based ROI feature encoding for region-based detection.

A small dense-tensor engine with exact hand-written gradients, ROI
pooling and context-mask construction, mask-generating encoders in
local / global / combined flavors, a constructive equivalence oracle
against grid ROI pooling, a finite-difference gradient checker, and a
deterministic toy detection experiment with a CLI front end.
"""

from .encoder import (
    EncoderConfig,
    EncoderParams,
    MaskSet,
    apply_masks,
    encode_g,
    encode_l,
    encode_lg,
    heads,
    init_encoder_params,
    mwn_forward,
    precompute_masks_l,
    unary_raw_mask,
)
from .gradcheck import GradReport, check_all, finite_diff
from .gridequiv import GridMaskSpec, grid_masks, masked_grid_pool
from .harness import TrainConfig, evaluate, greedy_nms, train
from .ops import (
    ConvParams,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    global_max_pool,
    relu_backward,
    relu_forward,
    sgd_momentum_step,
    smooth_l1,
    softmax_cross_entropy,
)
from .roi import ImageExtent, Roi, context_raw_mask, image_pool, roi_avg_pool, \
    roi_max_pool
from .scenes import ToyScene, generate_scene
from .weights import load_weights, save_weights

__version__ = "0.1.0"

"""Synthetic detection scenes for the desk-scale experiment.

Each 64x64 grayscale scene holds 1-3 boxed objects over textured
background noise. The three classes share the same parts and differ
only in part layout, so telling them apart requires knowing *where* in
the box a pattern sits, not merely that it occurs:

  class 0: bright bar across the top of the box, dark bar across the bottom
  class 1: the mirror image (dark top, bright bottom)
  class 2: bright centered cross

Classes 0 and 1 are indistinguishable to an encoder that only pools
"what patterns are present" over the whole ROI. Objects stay 8 px away
from the image border (zero-pad convolution artifacts must not leak
position into ROI features), and an object's vertical position in the
image is softly correlated with its class (70% band adherence), which
is the global-context signal an ROI-position-aware encoder can use.
"""

from dataclasses import dataclass

import numpy as np

from .pgmio import write_pgm

IMAGE_SIZE = 64
N_CLASSES = 3
BORDER_MARGIN = 8
SIDE_RANGE = (28, 44)  # box side min/max, inclusive
BAND_ADHERENCE = 0.7   # probability an object sits in its class's vertical band
MIN_BOX_SIDE = 12      # contract floor; generated sides are far above it


@dataclass
class ToyScene:
    """One image (1, 64, 64) in [0, 1] plus (class_id, box) ground truth.

    Boxes are half-open (x0, y0, x1, y1) in image pixels.
    """

    image: np.ndarray
    objects: list


def scene_rng(seed, namespace, index):
    """Deterministic per-index generator; streams never collide."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(namespace), int(index)])))


def box_iou(a, b):
    """IoU of two half-open pixel boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _sample_box(rng, cls):
    w = int(rng.integers(SIDE_RANGE[0], SIDE_RANGE[1] + 1))
    h = int(rng.integers(SIDE_RANGE[0], SIDE_RANGE[1] + 1))
    x_lo, x_hi = BORDER_MARGIN, IMAGE_SIZE - BORDER_MARGIN - w
    y_lo, y_hi = BORDER_MARGIN, IMAGE_SIZE - BORDER_MARGIN - h
    x0 = int(rng.integers(x_lo, x_hi + 1))
    # vertical band per class: 0 -> top, 2 -> middle, 1 -> bottom
    if rng.uniform() < BAND_ADHERENCE and y_hi > y_lo:
        band = {0: 0, 2: 1, 1: 2}[cls]
        span = (y_hi - y_lo) / 3.0
        b_lo = y_lo + band * span
        b_hi = y_lo + (band + 1) * span
        y0 = int(round(rng.uniform(b_lo, b_hi)))
    else:
        y0 = int(rng.integers(y_lo, y_hi + 1))
    return (x0, y0, x0 + w, y0 + h)


def _render_object(image, cls, box, rng):
    x0, y0, x1, y1 = box
    h = y1 - y0
    w = x1 - x0
    t = max(4, h // 6)
    bright = rng.uniform(0.78, 0.95)
    dark = rng.uniform(0.05, 0.22)
    if cls == 0:
        image[y0:y0 + t, x0:x1] = bright
        image[y1 - t:y1, x0:x1] = dark
    elif cls == 1:
        image[y0:y0 + t, x0:x1] = dark
        image[y1 - t:y1, x0:x1] = bright
    else:
        tv = max(4, w // 6)
        cy = (y0 + y1) // 2
        cx = (x0 + x1) // 2
        image[cy - t // 2:cy - t // 2 + t, x0:x1] = bright
        image[y0:y1, cx - tv // 2:cx - tv // 2 + tv] = bright


def generate_scene(rng):
    """Render one scene from the given generator (fully deterministic)."""
    image = 0.5 + rng.uniform(-0.05, 0.05, (IMAGE_SIZE, IMAGE_SIZE))
    n_objects = int(rng.integers(1, 4))
    objects = []
    for k in range(n_objects):
        cls = int(rng.integers(0, N_CLASSES))
        for _ in range(25):
            box = _sample_box(rng, cls)
            if all(box_iou(box, other) <= 0.05 for _, other in objects):
                objects.append((cls, box))
                break
        # first object always lands; later ones may be dropped when crowded
    for cls, box in objects:
        _render_object(image, cls, box, rng)
    np.clip(image, 0.0, 1.0, out=image)
    return ToyScene(image=image[None], objects=objects)


def dump_scenes(out_dir, seed, count):
    """Write `count` scenes as PGM files plus a boxes.txt sidecar.

    boxes.txt lines: `scene_index class x0 y0 x1 y1`.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(count):
        scene = generate_scene(scene_rng(seed, 0, i))
        gray = np.rint(scene.image[0] * 255.0).astype(np.uint8)
        write_pgm(os.path.join(out_dir, f"scene_{i:05d}.pgm"), gray)
        for cls, (x0, y0, x1, y1) in scene.objects:
            lines.append(f"{i} {cls} {x0} {y0} {x1} {y1}")
    with open(os.path.join(out_dir, "boxes.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return count

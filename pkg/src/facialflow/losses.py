"""
Image-space losses for training the conditional generator.

These are plain functions over arrays: images are (3, H, W) in [0, 1],
masks are (H, W), feature pyramids are lists of (C, H, W) maps. The
callers own the generator, discriminator and encoder that produce them.
"""

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .morphable_model import LEFT_EYE, MOUTH, NOSE, RIGHT_EYE, LandmarkSet

LAMBDA_WP = 100.0
LAMBDA_PERC = 10.0

MASK_PADDING = 4
# (landmark group, weight). The nose weight is our own choice.
MASK_REGIONS = (
    (RIGHT_EYE, 5.0),
    (LEFT_EYE, 5.0),
    (NOSE, 3.0),
    (MOUTH, 10.0),
)


def weighted_mask(landmarks, size, padding=MASK_PADDING, regions=MASK_REGIONS) -> np.ndarray:
    """Pixel weights emphasising the eyes, nose and mouth.

    ``landmarks`` are 68 points in image coordinates (x = column, y = row
    going down); pass a :class:`LandmarkSet` or a (68, 2) array. Every
    pixel starts at weight 1. For each region the bounding box of its
    landmarks is grown by ``padding`` pixels, rounded outward to whole
    pixels, clamped to the frame, and filled with the region weight;
    overlapping boxes keep the larger weight.

    Args:
        landmarks: 68 landmark positions.
        size: (W, H) of the mask.

    Returns:
        float64 array of shape (H, W), minimum 1.
    """
    points = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, float)
    if points.shape != (68, 2):
        raise ShapeError(f"expected (68, 2) landmarks, got {points.shape}")
    width, height = (int(v) for v in size)
    if width < 1 or height < 1:
        raise InvalidParameterError("mask size must be positive")
    mask = np.ones((height, width))
    for group, weight in regions:
        pts = points[list(group)]
        c0, r0 = np.floor(pts.min(axis=0) - padding).astype(int)
        c1, r1 = np.ceil(pts.max(axis=0) + padding).astype(int)
        c0, c1 = np.clip([c0, c1], 0, width - 1)
        r0, r1 = np.clip([r0, r1], 0, height - 1)
        box = mask[r0:r1 + 1, c0:c1 + 1]
        np.maximum(box, weight, out=box)
    return mask


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def loss_weighted_pixel(generated, target, mask) -> float:
    """Mean over channels and pixels of mask * |generated - target|."""
    generated, target = _same_shape(generated, target, "weighted pixel loss")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != generated.shape[-2:]:
        raise ShapeError(f"mask {mask.shape} does not match image {generated.shape}")
    return float(np.mean(mask * np.abs(generated - target)))


def loss_adversarial(scores_real, scores_fake) -> float:
    """Critic score difference mean(D(real)) - mean(D(generated)).

    Signed; whether a player minimises or maximises it is up to the caller.
    """
    scores_real, scores_fake = _same_shape(scores_real, scores_fake, "adversarial loss")
    return float(np.mean(scores_real) - np.mean(scores_fake))


def loss_perceptual(features_generated, features_target) -> float:
    """Sum over pyramid levels of the mean absolute feature difference."""
    if len(features_generated) != len(features_target):
        raise ShapeError("feature pyramids have different depths")
    total = 0.0
    for level, (fg, ft) in enumerate(zip(features_generated, features_target)):
        fg, ft = _same_shape(fg, ft, f"perceptual loss level {level}")
        total += float(np.mean(np.abs(fg - ft)))
    return total


def loss_total(adv, wp, perc, lambda_wp=LAMBDA_WP, lambda_perc=LAMBDA_PERC) -> float:
    """adv + 100 * wp + 10 * perc."""
    values = (adv, wp, perc)
    if not all(np.isfinite(v) for v in values):
        raise InvalidParameterError("loss terms must be finite")
    return float(adv + lambda_wp * wp + lambda_perc * perc)

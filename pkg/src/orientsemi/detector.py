"""A linear dense detector over handcrafted local features.

Per grid cell the model predicts class scores, a box relative to the
cell center, centerness, and a localisation-quality (predicted IoU)
score.  Every head is a linear readout of the same feature column, so
the full Jacobian is available in closed form and one matrix multiply
runs the dense forward pass for a whole scene.

Head rows of the weight matrix, for K classes:

    0..K-1   class logits (sigmoid)
    K + 0/1  dx, dy offsets in pixels
    K + 2/3  log width, log height (exp-decoded, clipped to side bounds)
    K + 4/5  cos(2a), sin(2a) direction pair (unit-normalised on decode)
    K + 6    centerness logit (sigmoid)
    K + 7    predicted-IoU logit (sigmoid)

Features are raw channels plus box-filter means at three scales, two
wider luminance means, a luminance gradient magnitude, and a bias, so a
(K+3)-channel scene yields 3(K+3) + 4 features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import expit

from orientsemi.sampling import DensePrediction

NUM_EXTRA_HEADS = 8
OFF_DX = 0
OFF_DY = 1
OFF_LOGW = 2
OFF_LOGH = 3
OFF_COS = 4
OFF_SIN = 5
OFF_CTR = 6
OFF_IOU = 7

# Keeps the direction pair's normalisation differentiable at the origin.
DIRECTION_EPS = 1e-6


@dataclass
class DetectorConfig:
    num_classes: int = 3
    min_side: float = 0.5
    max_side: float = 64.0
    cls_bias_init: float = -4.0
    size_bias_init: float = math.log(8.0)
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if not 0.0 < self.min_side < self.max_side:
            raise ValueError("need 0 < min_side < max_side")

    @property
    def num_heads(self) -> int:
        return self.num_classes + NUM_EXTRA_HEADS

    def num_features(self, num_channels: int) -> int:
        return 3 * num_channels + 4


def extract_features(channels: np.ndarray) -> np.ndarray:
    """Feature matrix (F, H*W) float32 from a (C, H, W) channel stack.

    Rows: C raw channels, C three-cell means, C seven-cell means, two
    wide luminance means (15, 31), luminance gradient magnitude, ones.
    The luminance channel is assumed at index C-3 (just before the two
    orientation channels).
    """
    channels = np.asarray(channels, dtype=np.float32)
    c, h, w = channels.shape
    lum = channels[c - 3]
    rows = [channels]
    for size in (3, 7):
        rows.append(uniform_filter(channels, size=(1, size, size), mode="nearest"))
    wide = np.empty((2, h, w), dtype=np.float32)
    wide[0] = uniform_filter(lum, size=15, mode="nearest")
    wide[1] = uniform_filter(lum, size=31, mode="nearest")
    gy, gx = np.gradient(lum.astype(np.float32))
    grad = np.sqrt(gx * gx + gy * gy, dtype=np.float32)[None]
    ones = np.ones((1, h, w), dtype=np.float32)
    stack = np.concatenate(rows + [wide, grad, ones], axis=0)
    return stack.reshape(stack.shape[0], h * w)


@dataclass
class ToyDetectorParams:
    """Weight matrix (num_heads, num_features), float64."""

    weights: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a matrix")
        if self.weights.shape[0] != self.num_classes + NUM_EXTRA_HEADS:
            raise ValueError(
                f"weights have {self.weights.shape[0]} rows, expected "
                f"{self.num_classes + NUM_EXTRA_HEADS} for {self.num_classes} classes"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @classmethod
    def initialize(
        cls, num_channels: int, rng: np.random.Generator, config: DetectorConfig
    ) -> "ToyDetectorParams":
        k = config.num_classes
        shape = (config.num_heads, config.num_features(num_channels))
        weights = config.init_scale * rng.standard_normal(shape)
        # Bias feature is the last column: start classes rare and boxes
        # at a plausible prior size.
        weights[:k, -1] = config.cls_bias_init
        weights[k + OFF_LOGW, -1] = config.size_bias_init
        weights[k + OFF_LOGH, -1] = config.size_bias_init
        return cls(weights=weights, num_classes=k)

    def copy(self) -> "ToyDetectorParams":
        return ToyDetectorParams(weights=self.weights.copy(), num_classes=self.num_classes)

    @property
    def num_params(self) -> int:
        return self.weights.size


def forward(params: ToyDetectorParams, features: np.ndarray) -> np.ndarray:
    """Raw head outputs (num_heads, N) for a feature matrix (F, N)."""
    return params.weights @ features


def decode_angle(cos_raw: np.ndarray, sin_raw: np.ndarray) -> np.ndarray:
    """Angle from an unnormalised direction pair, in (-pi/2, pi/2]."""
    return 0.5 * np.arctan2(sin_raw, cos_raw)


def decode_dense(
    params: ToyDetectorParams,
    raw: np.ndarray,
    height: int,
    width: int,
    config: DetectorConfig,
) -> DensePrediction:
    """Decode raw head outputs into per-cell boxes and probabilities."""
    k = params.num_classes
    n = height * width
    if raw.shape != (params.weights.shape[0], n):
        raise ValueError(f"raw shape {raw.shape} does not match grid {height}x{width}")
    cls_prob = expit(raw[:k]).T.reshape(height, width, k)
    ys, xs = np.divmod(np.arange(n), width)
    log_lo, log_hi = math.log(config.min_side), math.log(config.max_side)
    cx = xs + 0.5 + raw[k + OFF_DX]
    cy = ys + 0.5 + raw[k + OFF_DY]
    bw = np.exp(np.clip(raw[k + OFF_LOGW], log_lo, log_hi))
    bh = np.exp(np.clip(raw[k + OFF_LOGH], log_lo, log_hi))
    angle = decode_angle(raw[k + OFF_COS], raw[k + OFF_SIN])
    angle = np.where(angle >= math.pi / 2, angle - math.pi, angle)
    boxes = np.stack([cx, cy, bw, bh, angle], axis=1).reshape(height, width, 5)
    centerness = expit(raw[k + OFF_CTR]).reshape(height, width)
    predicted_iou = expit(raw[k + OFF_IOU]).reshape(height, width)
    return DensePrediction(
        class_scores=cls_prob,
        boxes=boxes,
        centerness=centerness,
        predicted_iou=predicted_iou,
    )


def predict_dense(
    params: ToyDetectorParams,
    channels: np.ndarray,
    config: DetectorConfig,
) -> DensePrediction:
    """Features -> forward -> decode, for a (C, H, W) channel stack."""
    _, height, width = channels.shape
    raw = forward(params, extract_features(channels))
    return decode_dense(params, raw, height, width, config)

"""Pose-aware attention blocks: soft gate, DRM, CAM, PAM and the DREAM baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Linear, Module, PReLU, uniform_fan_in
from .tensor import ConvSpec, Tensor

YAW_LIMIT = 90.0


@dataclass(frozen=True)
class GateConfig:
    k_slope: float = 10.0
    yaw_half_range: float = 45.0

    def __post_init__(self):
        if not self.k_slope > 0 or not self.yaw_half_range > 0:
            raise ValueError("GateConfig: k_slope and yaw_half_range must be positive")


def _check_yaw(yaw) -> np.ndarray:
    y = np.asarray(yaw, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("yaw must be finite")
    if np.any(np.abs(y) > YAW_LIMIT):
        raise ValueError(f"yaw must lie in [-90, 90] degrees, got {y[np.abs(y) > YAW_LIMIT].tolist()}")
    return y


def soft_gate(yaw_deg: float, cfg: GateConfig = GateConfig()) -> float:
    """Yaw coefficient ``1 / (1 + exp(-k (|y|/45 - 1)))``, strictly inside (0, 1)."""
    y = float(_check_yaw(yaw_deg))
    z = cfg.k_slope * (abs(y) / cfg.yaw_half_range - 1.0)
    return 1.0 / (1.0 + math.exp(-z))


def soft_gates(yaws, cfg: GateConfig = GateConfig()) -> np.ndarray:
    """Vectorized :func:`soft_gate` over a batch of yaw angles."""
    y = _check_yaw(yaws)
    z = cfg.k_slope * (np.abs(y) / cfg.yaw_half_range - 1.0)
    return 1.0 / (1.0 + np.exp(-z))


class DRM(Module):
    """Depthwise residual module: ``x + gate * BN(DConv(PReLU(DConv(BN(x)))))``.

    ``conv="dense"`` swaps both depthwise kernels for full 3x3 convolutions
    (the conventional-convolution ablation). With ``zero_init`` the scale
    of the closing batch norm starts at 0.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 conv: str = "depthwise", zero_init: bool = True, dtype=np.float64):
        super().__init__()
        if conv not in ("depthwise", "dense"):
            raise ValueError(f"DRM: conv must be 'depthwise' or 'dense', got {conv!r}")
        groups = channels if conv == "depthwise" else 1
        spec = ConvSpec(channels, channels, 3, stride=1, padding=1, groups=groups)
        self.channels = channels
        self.conv = conv
        self.bn1 = BatchNorm(channels, dtype=dtype)
        self.dconv1 = Conv2d(spec, rng, dtype=dtype)
        self.prelu = PReLU(channels, dtype=dtype)
        self.dconv2 = Conv2d(spec, rng, dtype=dtype)
        self.bn2 = BatchNorm(channels, dtype=dtype)
        if zero_init:
            # the block starts as an exact identity and grows its residual
            self.bn2.gamma.data[...] = 0.0

    def residual(self, x: Tensor) -> Tensor:
        return self.bn2(self.dconv2(self.prelu(self.dconv1(self.bn1(x)))))

    def forward(self, x: Tensor, gate) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"DRM: expected {self.channels} channels, got input shape {x.shape}")
        return T.add(x, T.scale_per_sample(self.residual(x), gate))


class CAM(Module):
    """Channel attention from pooled statistics through a shared bias-free MLP.

    ``variant="cbam"`` sums the MLP outputs of average- and max-pooled
    descriptors; ``variant="se"`` uses the average-pooled one only.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 variant: str = "cbam", identity_mapping: bool = False, reduction: int = 16,
                 dtype=np.float64):
        super().__init__()
        if variant not in ("cbam", "se"):
            raise ValueError(f"CAM: variant must be 'cbam' or 'se', got {variant!r}")
        if reduction < 1 or channels % reduction:
            raise ValueError(f"CAM: reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.channels = channels
        self.variant = variant
        self.identity_mapping = identity_mapping
        self.reduction = reduction
        if rng is not None:
            w1 = uniform_fan_in(rng, (hidden, channels), channels, dtype=dtype)
            w2 = uniform_fan_in(rng, (channels, hidden), hidden, dtype=dtype)
        else:
            w1 = np.zeros((hidden, channels), dtype=dtype)
            w2 = np.zeros((channels, hidden), dtype=dtype)
        self.mlp_w1 = Tensor(w1, requires_grad=True)
        self.mlp_w2 = Tensor(w2, requires_grad=True)

    def mlp(self, v: Tensor) -> Tensor:
        return T.affine(T.relu(T.affine(v, self.mlp_w1)), self.mlp_w2)

    def attention(self, x: Tensor) -> Tensor:
        logits = self.mlp(T.global_pool(x, "avg"))
        if self.variant == "cbam":
            logits = T.add(logits, self.mlp(T.global_pool(x, "max")))
        return T.sigmoid(logits)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"CAM: expected {self.channels} channels, got input shape {x.shape}")
        out = T.scale_channels(x, self.attention(x))
        return T.add(x, out) if self.identity_mapping else out


class PAM(Module):
    """DRM followed by CAM. Either half can be switched off for ablations."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 conv: str = "depthwise", cam_variant: str = "cbam",
                 identity_mapping: bool = False, reduction: int = 16,
                 use_drm: bool = True, use_cam: bool = True, dtype=np.float64):
        super().__init__()
        if not (use_drm or use_cam):
            raise ValueError("PAM: at least one of DRM and CAM must be enabled")
        self.channels = channels
        self.drm = DRM(channels, rng, conv=conv, dtype=dtype) if use_drm else None
        self.cam = (CAM(channels, rng, variant=cam_variant, identity_mapping=identity_mapping,
                        reduction=reduction, dtype=dtype) if use_cam else None)

    def forward(self, x: Tensor, gate) -> Tensor:
        if self.drm is not None:
            x = self.drm(x, gate)
        if self.cam is not None:
            x = self.cam(x)
        return x


class DREAM(Module):
    """Gated residual on the embedding: ``e + gate * fc2(relu(fc1(e)))``."""

    def __init__(self, dim: int = 512, rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.fc1 = Linear(dim, dim, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Linear(dim, dim, bias=True, rng=rng, dtype=dtype)

    def forward(self, e: Tensor, gate) -> Tensor:
        if e.ndim != 2 or e.shape[1] != self.dim:
            raise ValueError(f"DREAM: expected embedding dimension {self.dim}, got shape {e.shape}")
        return T.add(e, T.scale_per_sample(self.fc2(T.relu(self.fc1(e))), gate))


def drm_forward(x: Tensor, p: DRM, gate) -> Tensor:
    return p(x, gate)


def cam_forward(x: Tensor, p: CAM) -> Tensor:
    return p(x)


def pam_forward(x: Tensor, drm: DRM, cam: CAM, gate) -> Tensor:
    return cam(drm(x, gate))


def dream_forward(e: Tensor, p: DREAM, gate) -> Tensor:
    return p(e, gate)


def drm_param_count(channels: int, conv: str = "depthwise") -> int:
    """Closed-form trainable count: 4C affine BN, C PReLU, two 3x3 kernels."""
    kernels = 9 * channels if conv == "depthwise" else 9 * channels * channels
    return 4 * channels + channels + 2 * kernels


def cam_param_count(channels: int, reduction: int = 16) -> int:
    return 2 * channels * (channels // reduction)


def pam_param_count(channels: int, conv: str = "depthwise", reduction: int = 16) -> int:
    return drm_param_count(channels, conv) + cam_param_count(channels, reduction)


def dream_param_count(dim: int = 512) -> int:
    return 2 * (dim * dim + dim)

"""Momentum-pair encoder: local eye branches, pluggable global backbone,
multi-head spatial attention, projection/prediction heads, and the EMA update
that couples the online and target networks.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn

LOCAL_PATCH_SHAPE = (3, 36, 60)
LOCAL_OUT_DIM = 52


class NetworkError(ValueError):
    """Raised on shape/contract violations in network construction or forward."""


# --- backbone registry -------------------------------------------------------

# name -> factory() -> (module mapping (B,3,H,W) to (B,C,H',W'), C)
_BACKBONES: dict[str, Callable[[], tuple[nn.Module, int]]] = {}


def register_backbone(name: str, factory: Callable[[], tuple[nn.Module, int]]) -> None:
    """Register a global-branch backbone under ``name``.

    The factory must return ``(module, feature_channels)`` where the module
    maps a (B, 3, H, W) image batch to a (B, feature_channels, H', W')
    feature map.  Large pretrained backbones are injected this way rather
    than shipped with the package.
    """
    _BACKBONES[name] = factory


def make_backbone(name: str) -> tuple[nn.Module, int]:
    if name not in _BACKBONES:
        raise NetworkError(f"unknown backbone {name!r}; registered: {sorted(_BACKBONES)}")
    return _BACKBONES[name]()


class ToyBackbone(nn.Module):
    """Four stride-2 conv blocks (32, 64, 128, 256); 112x112 -> 7x7x256."""

    channels = 256

    def __init__(self):
        super().__init__()
        dims = [3, 32, 64, 128, 256]
        layers = []
        for c_in, c_out in zip(dims[:-1], dims[1:]):
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


register_backbone("toy-cnn", lambda: (ToyBackbone(), ToyBackbone.channels))


# --- attention over spatial tokens -------------------------------------------


class SpatialAttention(nn.Module):
    """Multi-head self-attention where tokens are the H*W positions of a
    feature map and the embedding is the channel vector at each position."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise NetworkError(f"{heads} heads do not divide {channels} channels")
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        b, c, h, w = fmap.shape
        tokens = fmap.flatten(2).transpose(1, 2)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return out  # (B, H*W, C)


# --- branches ------------------------------------------------------------------


@dataclass
class LocalBranchConfig:
    filters: tuple[int, int, int] = (32, 64, 128)
    kernels: tuple[int, int, int] = (3, 3, 3)
    strides: tuple[int, int, int] = (2, 2, 2)
    paddings: tuple[int, int, int] = (1, 1, 1)
    attention_heads: int = 8
    out_dim: int = LOCAL_OUT_DIM
    use_attention: bool = True


class LocalBranch(nn.Module):
    """Eye-patch branch: three conv+BN+ReLU stages, spatial attention,
    global average pooling, and a fully connected layer to 52 features."""

    def __init__(self, config: LocalBranchConfig | None = None):
        super().__init__()
        cfg = config or LocalBranchConfig()
        self.config = cfg
        layers = []
        c_in = 3
        for c_out, k, s, p in zip(cfg.filters, cfg.kernels, cfg.strides, cfg.paddings):
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=k, stride=s, padding=p),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.convs = nn.Sequential(*layers)
        self.attention = SpatialAttention(c_in, cfg.attention_heads) if cfg.use_attention else None
        self.fc = nn.Linear(c_in, cfg.out_dim)

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        if patch.ndim == 3:
            patch = patch.unsqueeze(0)
        if patch.shape[1:] != LOCAL_PATCH_SHAPE:
            raise NetworkError(
                f"local branch expects {LOCAL_PATCH_SHAPE} patches, got {tuple(patch.shape[1:])}"
            )
        fmap = self.convs(patch)
        if self.attention is not None:
            tokens = self.attention(fmap)
        else:
            tokens = fmap.flatten(2).transpose(1, 2)
        pooled = tokens.mean(dim=1)
        return self.fc(pooled)


@dataclass
class GlobalBranchConfig:
    backbone: str = "toy-cnn"
    input_size: tuple[int, int] = (112, 112)
    attention_heads: int = 8
    use_attention: bool = True


class GlobalBranch(nn.Module):
    """Face branch: configurable backbone, spatial attention, pooled feature."""

    def __init__(self, config: GlobalBranchConfig | None = None):
        super().__init__()
        cfg = config or GlobalBranchConfig()
        self.config = cfg
        self.backbone, self.feature_dim = make_backbone(cfg.backbone)
        self.attention = (
            SpatialAttention(self.feature_dim, cfg.attention_heads) if cfg.use_attention else None
        )

    def forward(self, face: torch.Tensor) -> torch.Tensor:
        if face.ndim == 3:
            face = face.unsqueeze(0)
        expected = (3,) + tuple(self.config.input_size)
        if face.shape[1:] != expected:
            raise NetworkError(f"global branch expects {expected} faces, got {tuple(face.shape[1:])}")
        fmap = self.backbone(face)
        if self.attention is not None:
            tokens = self.attention(fmap)
        else:
            tokens = fmap.flatten(2).transpose(1, 2)
        return tokens.mean(dim=1)


# --- encoder -------------------------------------------------------------------


@dataclass
class EncoderConfig:
    global_branch: GlobalBranchConfig = field(default_factory=GlobalBranchConfig)
    local_branch: LocalBranchConfig = field(default_factory=LocalBranchConfig)
    use_global: bool = True
    use_local: bool = True

    def __post_init__(self):
        if not (self.use_global or self.use_local):
            raise NetworkError("encoder needs at least one of the global/local branches")


class Encoder(nn.Module):
    """Concatenates global face features with left/right eye-branch features,
    in that fixed order: y = (y_global | y_left | y_right)."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        cfg = config or EncoderConfig()
        self.config = cfg
        self.global_branch = GlobalBranch(cfg.global_branch) if cfg.use_global else None
        if cfg.use_local:
            self.left_branch = LocalBranch(cfg.local_branch)
            self.right_branch = LocalBranch(cfg.local_branch)
        else:
            self.left_branch = None
            self.right_branch = None

    @property
    def global_dim(self) -> int:
        return self.global_branch.feature_dim if self.global_branch is not None else 0

    @property
    def out_dim(self) -> int:
        local = 2 * self.config.local_branch.out_dim if self.left_branch is not None else 0
        return self.global_dim + local

    def forward(self, face, left_patch=None, right_patch=None) -> torch.Tensor:
        parts = []
        if self.global_branch is not None:
            parts.append(self.global_branch(face))
        if self.left_branch is not None:
            if left_patch is None or right_patch is None:
                raise NetworkError("encoder with local branches requires both eye patches")
            parts.append(self.left_branch(left_patch))
            parts.append(self.right_branch(right_patch))
        return torch.cat(parts, dim=-1)


# --- projection / prediction heads ----------------------------------------------


class ProjectionHead(nn.Module):
    """Two-layer MLP (hidden_in, hidden, out) with ReLU; a learned input
    adapter reconciles the encoder width with hidden_in when they differ."""

    def __init__(self, in_dim: int, dims: tuple[int, int, int] = (1536, 1024, 1024)):
        super().__init__()
        hidden_in, hidden, out = dims
        self.dims = tuple(dims)
        self.adapter = nn.Linear(in_dim, hidden_in) if in_dim != hidden_in else None
        self.mlp = nn.Sequential(
            nn.Linear(hidden_in, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out)
        )
        self.in_dim = in_dim
        self.out_dim = out

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.in_dim:
            raise NetworkError(f"projection expects dim {self.in_dim}, got {y.shape[-1]}")
        if self.adapter is not None:
            y = self.adapter(y)
        return self.mlp(y)


class PredictionHead(nn.Module):
    """Two-layer MLP (in, hidden, out) with ReLU; online network only."""

    def __init__(self, dims: tuple[int, int, int] = (1024, 1024, 1024)):
        super().__init__()
        d_in, hidden, out = dims
        self.dims = tuple(dims)
        self.mlp = nn.Sequential(
            nn.Linear(d_in, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out)
        )
        self.in_dim = d_in
        self.out_dim = out

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise NetworkError(f"prediction expects dim {self.in_dim}, got {z.shape[-1]}")
        return self.mlp(z)


class SslNetwork(nn.Module):
    """Encoder + projection (+ prediction on the online side)."""

    def __init__(self, encoder: Encoder, projector: ProjectionHead, predictor: Optional[PredictionHead]):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor

    def forward(self, face, left_patch, right_patch):
        y = self.encoder(face, left_patch, right_patch)
        z = self.projector(y)
        q = self.predictor(z) if self.predictor is not None else None
        return y, z, q


# --- online/target pair ----------------------------------------------------------


@dataclass
class NetworkPair:
    """The trainable online network and its EMA-tracked target copy."""

    online: SslNetwork
    target: SslNetwork
    tau_base: float = 0.996
    step: int = 0
    total_steps: int = 1


def build_network_pair(
    encoder_config: EncoderConfig | None = None,
    proj_dims: tuple[int, int, int] = (1536, 1024, 1024),
    pred_dims: tuple[int, int, int] = (1024, 1024, 1024),
    tau_base: float = 0.996,
    total_steps: int = 1,
) -> NetworkPair:
    """Construct the online network and an identical (predictor-free) target.

    The target starts as an exact parameter copy of the online network and is
    never touched by the optimizer.
    """
    if pred_dims[0] != proj_dims[2]:
        raise NetworkError(
            f"prediction input dim {pred_dims[0]} must equal projection output {proj_dims[2]}"
        )
    encoder = Encoder(encoder_config)
    projector = ProjectionHead(encoder.out_dim, proj_dims)
    predictor = PredictionHead(pred_dims)
    online = SslNetwork(encoder, projector, predictor)

    target_encoder = copy.deepcopy(encoder)
    target_projector = copy.deepcopy(projector)
    target = SslNetwork(target_encoder, target_projector, predictor=None)
    for p in target.parameters():
        p.requires_grad_(False)
    return NetworkPair(online=online, target=target, tau_base=tau_base, total_steps=total_steps)


@torch.no_grad()
def ema_update_modules(online: nn.Module, target: nn.Module, tau: float) -> None:
    """In-place EMA of target parameters toward the online parameters:
    xi <- tau * xi + (1 - tau) * theta.  Online parameters are untouched."""
    if not 0.0 <= tau <= 1.0:
        raise NetworkError(f"tau {tau} outside [0, 1]")
    online_params = dict(online.named_parameters())
    # The target lacks the prediction head; every target parameter must have
    # an online twin of identical shape.
    for name, xi in target.named_parameters():
        theta = online_params.get(name)
        if theta is None or theta.shape != xi.shape:
            raise NetworkError(f"online/target parameter mismatch at {name!r}")
        xi.mul_(tau).add_(theta, alpha=1.0 - tau)


def ema_update(pair: NetworkPair, tau: float) -> None:
    ema_update_modules(pair.online, pair.target, tau)


def tau_schedule(k: int, total_steps: int, tau_base: float) -> float:
    """Cosine-increasing decay rate: tau_base at step 0, exactly 1 at the end."""
    if total_steps <= 0:
        raise NetworkError("total_steps must be positive")
    if not 0 <= k <= total_steps:
        raise NetworkError(f"step {k} outside [0, {total_steps}]")
    if not 0.0 < tau_base < 1.0:
        raise NetworkError(f"tau_base {tau_base} outside (0, 1)")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * k / total_steps) + 1.0) / 2.0

"""Downstream patch-module stage: per-region bottleneck extractors, feature
fusion, and the gaze / expression-classification heads.

Feature layout (default dims): each bottleneck emits 512 features regardless
of input resolution; the two eye vectors are averaged into F_e (512); the
encoder feature y is projected to F_f (256) and concatenated with the face
bottleneck F_fb (512) into F_F (768); F_T = F_F | F_e has 1280 entries and
feeds the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .networks import Encoder

BOTTLENECK_OUT_DIM = 512
DEFAULT_FF_DIM = 256

# Bounded-head label scaling: pitch in (-pi/2, pi/2) and yaw in (-pi, pi]
# map onto (-1, 1) per component.
PITCH_SCALE = math.pi / 2
YAW_SCALE = math.pi


class PmnError(ValueError):
    """Raised on dimension/contract violations in the patch-module stage."""


@dataclass
class BottleneckConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    kernel: int = 3
    padding: int = 1
    out_dim: int = BOTTLENECK_OUT_DIM


class Bottleneck(nn.Module):
    """Three conv+BN stages, adaptive 1x1 average pooling, FC to 512.

    Adaptive pooling makes the output dimension independent of the input
    resolution, so one architecture serves 36x60 eye patches and full faces.
    """

    def __init__(self, config: BottleneckConfig | None = None):
        super().__init__()
        cfg = config or BottleneckConfig()
        self.config = cfg
        c1, c2, c3 = cfg.channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, kernel_size=cfg.kernel, padding=cfg.padding),
            nn.BatchNorm2d(c1),
            nn.Conv2d(c1, c2, kernel_size=cfg.kernel, padding=cfg.padding),
            nn.BatchNorm2d(c2),
            nn.Conv2d(c2, c3, kernel_size=cfg.kernel, padding=cfg.padding),
            nn.BatchNorm2d(c3),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(c3, cfg.out_dim)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim == 3:
            img = img.unsqueeze(0)
        if img.ndim != 4 or img.shape[1] != 3:
            raise PmnError(f"bottleneck expects (n, 3, H, W) input, got {tuple(img.shape)}")
        pooled = self.features(img).flatten(1)
        return self.fc(pooled)


def fuse_eyes(f_el: torch.Tensor, f_er: torch.Tensor) -> torch.Tensor:
    """Average-pool the stacked eye features pairwise: the elementwise mean."""
    if f_el.shape != f_er.shape:
        raise PmnError(f"eye feature shape mismatch {tuple(f_el.shape)} vs {tuple(f_er.shape)}")
    return (f_el + f_er) / 2.0


def fuse_face(f_f: torch.Tensor, f_fb: torch.Tensor) -> torch.Tensor:
    """Concatenate encoder face features with the face-bottleneck features."""
    if f_f.shape[:-1] != f_fb.shape[:-1]:
        raise PmnError("batch shape mismatch in fuse_face")
    return torch.cat([f_f, f_fb], dim=-1)


def assemble(f_face: torch.Tensor, f_e: torch.Tensor) -> torch.Tensor:
    """Concatenate the comprehensive face vector with the fused eye vector."""
    if f_face.shape[:-1] != f_e.shape[:-1]:
        raise PmnError("batch shape mismatch in assemble")
    return torch.cat([f_face, f_e], dim=-1)


class GazeHead(nn.Module):
    """Regression MLP in -> 1024 (BN) -> 256 -> 2.

    The bounded variant adds dropout and a final tanh so both outputs stay
    strictly inside (-1, 1); the unbounded variant omits both.
    """

    def __init__(
        self,
        in_dim: int = 1280,
        hidden: tuple[int, int] = (1024, 256),
        out_dim: int = 2,
        bounded: bool = True,
        dropout: float = 0.1,
    ):
        super().__init__()
        h1, h2 = hidden
        self.in_dim = in_dim
        self.bounded = bounded
        layers: list[nn.Module] = [nn.Linear(in_dim, h1), nn.BatchNorm1d(h1), nn.ReLU(inplace=True)]
        if bounded and dropout > 0:
            layers.append(nn.Dropout(dropout))
        layers += [nn.Linear(h1, h2), nn.ReLU(inplace=True), nn.Linear(h2, out_dim)]
        if bounded:
            layers.append(nn.Tanh())
        self.mlp = nn.Sequential(*layers)

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        if f_t.shape[-1] != self.in_dim:
            raise PmnError(f"gaze head expects dim {self.in_dim}, got {f_t.shape[-1]}")
        out = self.mlp(f_t)
        if self.bounded:
            # tanh rounds to exactly +/-1 in float32 once saturated; nudge back
            # inside the open interval so outputs always decode to valid angles.
            out = out.clamp(-1.0 + 1e-6, 1.0 - 1e-6)
        return out


class FerHead(nn.Module):
    """Classification head sharing the gaze-head trunk; final width = classes."""

    def __init__(self, in_dim: int = 1280, hidden: tuple[int, int] = (1024, 256), classes: int = 7):
        super().__init__()
        if classes < 2:
            raise PmnError("classification head needs at least 2 classes")
        h1, h2 = hidden
        self.in_dim = in_dim
        self.classes = classes
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, h1),
            nn.BatchNorm1d(h1),
            nn.ReLU(inplace=True),
            nn.Linear(h1, h2),
            nn.ReLU(inplace=True),
            nn.Linear(h2, classes),
        )

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        if f_t.shape[-1] != self.in_dim:
            raise PmnError(f"classification head expects dim {self.in_dim}, got {f_t.shape[-1]}")
        return self.mlp(f_t)


def normalize_angles(angles: torch.Tensor) -> torch.Tensor:
    """Map (pitch, yaw) radians onto the (-1, 1)^2 training range."""
    scale = angles.new_tensor([PITCH_SCALE, YAW_SCALE])
    return angles / scale


def denormalize_angles(normed: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`normalize_angles`."""
    scale = normed.new_tensor([PITCH_SCALE, YAW_SCALE])
    return normed * scale


class GazeRegressor(nn.Module):
    """The full fine-tuning graph: pretrainable encoder, patch bottlenecks,
    fusion, and the gaze head.

    Flags:
        use_pmn: include the three bottleneck modules; when off, the head
            regresses from the projected encoder feature F_f alone.
        bounded: tanh-bounded head trained against normalized labels.
        freeze_encoder: keep the encoder in eval mode with gradients off.
    """

    def __init__(
        self,
        encoder: Encoder,
        use_pmn: bool = True,
        bounded: bool = True,
        dropout: float = 0.1,
        ff_dim: int = DEFAULT_FF_DIM,
        freeze_encoder: bool = False,
        head_hidden: tuple[int, int] = (1024, 256),
    ):
        super().__init__()
        self.encoder = encoder
        self.use_pmn = use_pmn
        self.bounded = bounded
        self.freeze_encoder = freeze_encoder
        self.ff_proj = nn.Linear(encoder.out_dim, ff_dim)
        if use_pmn:
            self.face_bottleneck = Bottleneck()
            self.left_bottleneck = Bottleneck()
            self.right_bottleneck = Bottleneck()
            head_in = ff_dim + 2 * BOTTLENECK_OUT_DIM
        else:
            self.face_bottleneck = None
            self.left_bottleneck = None
            self.right_bottleneck = None
            head_in = ff_dim
        self.head_in_dim = head_in
        self.head = GazeHead(head_in, head_hidden, bounded=bounded, dropout=dropout)
        if freeze_encoder:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_encoder:
            self.encoder.eval()
        return self

    def features(self, face, left_patch, right_patch) -> torch.Tensor:
        y = self.encoder(face, left_patch, right_patch)
        f_f = self.ff_proj(y)
        if not self.use_pmn:
            return f_f
        f_fb = self.face_bottleneck(face)
        f_el = self.left_bottleneck(left_patch)
        f_er = self.right_bottleneck(right_patch)
        f_e = fuse_eyes(f_el, f_er)
        return assemble(fuse_face(f_f, f_fb), f_e)

    def forward(self, face, left_patch, right_patch) -> torch.Tensor:
        """Raw head output: normalized pair for the bounded variant, radians
        otherwise."""
        return self.head(self.features(face, left_patch, right_patch))

    def predict_angles(self, face, left_patch, right_patch) -> torch.Tensor:
        """Predicted (pitch, yaw) in radians regardless of head variant."""
        out = self.forward(face, left_patch, right_patch)
        return denormalize_angles(out) if self.bounded else out

    def target_from_angles(self, angles: torch.Tensor) -> torch.Tensor:
        """Training target in the head's output space."""
        return normalize_angles(angles) if self.bounded else angles

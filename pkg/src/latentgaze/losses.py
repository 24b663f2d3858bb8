"""Training objectives: symmetrized negative-cosine pretraining loss, the
inverse-explained-variance weighted gaze loss, and weighted cross-entropy.

All functions accept torch tensors (1D vectors or batched 2D) and preserve the
input dtype, so float64 oracle checks and gradient checks run at full
precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

DEFAULT_OMEGA_MAX = 10.0
DEFAULT_SST_FLOOR = 1e-12


class LossError(ValueError):
    """Raised when a loss-function contract is violated."""


def _as_batch(t, name: str) -> torch.Tensor:
    t = torch.as_tensor(t)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise LossError(f"{name} must be a vector or a batch of vectors, got shape {tuple(t.shape)}")
    return t


def negative_cosine(a, b) -> torch.Tensor:
    """Negative cosine similarity, -<a/||a||, b/||b||>, averaged over the batch.

    Args:
        a, b: vectors of shape (d,) or batches of shape (n, d).

    Returns:
        Scalar tensor in [-1, 1].
    """
    a = _as_batch(a, "a")
    b = _as_batch(b, "b")
    if a.shape != b.shape:
        raise LossError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if torch.any(na == 0) or torch.any(nb == 0):
        raise LossError("negative_cosine requires nonzero-norm inputs")
    cos = (a * b).sum(dim=-1) / (na * nb)
    return -cos.mean()


@dataclass
class SslLossInputs:
    """The six vectors entering the pretraining loss, one pair per view.

    ``q_v``/``q_v_prime`` are online-network predictions, ``z_on_*`` online
    projections, ``z_t_*`` target-network projections.  All must share batch
    size and feature dimension; target projections are treated as constants.
    """

    q_v: torch.Tensor
    q_v_prime: torch.Tensor
    z_on_v: torch.Tensor
    z_on_v_prime: torch.Tensor
    z_t_v: torch.Tensor
    z_t_v_prime: torch.Tensor

    def __post_init__(self):
        fields = {
            "q_v": self.q_v,
            "q_v_prime": self.q_v_prime,
            "z_on_v": self.z_on_v,
            "z_on_v_prime": self.z_on_v_prime,
            "z_t_v": self.z_t_v,
            "z_t_v_prime": self.z_t_v_prime,
        }
        shapes = {}
        for name, t in fields.items():
            t = _as_batch(t, name)
            setattr(self, name, t)
            shapes[name] = tuple(t.shape)
        if len(set(shapes.values())) != 1:
            raise LossError(f"ssl loss inputs must share one shape, got {shapes}")


def ssl_loss(inputs: SslLossInputs) -> torch.Tensor:
    """Four-term symmetrized negative-cosine loss over two augmented views.

    Averages the negative cosine similarity of (prediction, target projection)
    and (online projection, target projection) across both view orderings:

        1/4 * [ NS(q_v, z_t_v') + NS(q_v', z_t_v)
              + NS(z_on_v, z_t_v') + NS(z_on_v', z_t_v) ]

    Target projections are detached, so gradients reach online parameters only.

    Returns:
        Scalar tensor in [-1, 1].
    """
    z_t_v = inputs.z_t_v.detach()
    z_t_v_prime = inputs.z_t_v_prime.detach()
    return 0.25 * (
        negative_cosine(inputs.q_v, z_t_v_prime)
        + negative_cosine(inputs.q_v_prime, z_t_v)
        + negative_cosine(inputs.z_on_v, z_t_v_prime)
        + negative_cosine(inputs.z_on_v_prime, z_t_v)
    )


def mae(y, y_hat) -> torch.Tensor:
    """Mean absolute error: batch mean of per-sample Euclidean residual norms."""
    y = _as_batch(y, "y")
    y_hat = _as_batch(y_hat, "y_hat")
    if y.shape != y_hat.shape:
        raise LossError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.shape[0] < 1:
        raise LossError("mae requires a nonempty batch")
    return torch.linalg.vector_norm(y - y_hat, dim=-1).mean()


class EvWeight(NamedTuple):
    omega: torch.Tensor
    v_ex: torch.Tensor
    degenerate: bool


def ev_weight(
    y,
    y_hat,
    omega_max: float = DEFAULT_OMEGA_MAX,
    sst_floor: float = DEFAULT_SST_FLOOR,
) -> EvWeight:
    """Inverse-explained-variance weight for a batch of gaze targets.

    SST = sum_i ||y_i - mean(y)||^2, SSE = sum_i ||y_i - y_hat_i||^2,
    V_EX = 1 - SSE/SST, omega = SSE/SST clipped to [0, omega_max].

    A batch whose targets are (numerically) all identical has SST below
    ``sst_floor``; explained variance is then undefined, so omega is forced
    to 0, v_ex to NaN, and the batch is flagged degenerate.

    Args:
        y: actual targets, shape (n, d) with n >= 2.
        y_hat: predictions, same shape.

    Returns:
        EvWeight(omega, v_ex, degenerate) with scalar tensors.
    """
    y = _as_batch(y, "y")
    y_hat = _as_batch(y_hat, "y_hat")
    if y.shape != y_hat.shape:
        raise LossError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.shape[0] < 2:
        raise LossError("ev_weight requires a batch of at least 2 samples")
    y_bar = y.mean(dim=0, keepdim=True)
    sst = torch.linalg.vector_norm(y - y_bar, dim=-1).square().sum()
    sse = torch.linalg.vector_norm(y - y_hat, dim=-1).square().sum()
    if sst < sst_floor:
        nan = torch.tensor(float("nan"), dtype=y.dtype, device=y.device)
        return EvWeight(torch.zeros((), dtype=y.dtype, device=y.device), nan, True)
    omega = torch.clamp(sse / sst, 0.0, omega_max)
    return EvWeight(omega, 1.0 - sse / sst, False)


@dataclass
class SupLossBreakdown:
    """Per-batch terms of the weighted gaze loss: total = mae * (omega + 1)."""

    mae: torch.Tensor
    sst: torch.Tensor
    sse: torch.Tensor
    v_ex: torch.Tensor
    omega: torch.Tensor
    total: torch.Tensor
    degenerate: bool = False


def sup_loss(
    y,
    y_hat,
    omega_max: float = DEFAULT_OMEGA_MAX,
    omega_in_graph: bool = False,
) -> SupLossBreakdown:
    """Weighted gaze regression loss: mean absolute error scaled by (omega + 1).

    omega is the batch ratio SSE/SST.  By default it is treated as a constant
    coefficient (gradient flows only through the MAE factor); set
    ``omega_in_graph=True`` to let gradients propagate through SSE/SST too.

    Args:
        y: actual gaze targets, shape (n, d), n >= 2.
        y_hat: predicted gaze, same shape.

    Returns:
        SupLossBreakdown with mae, sst, sse, v_ex, omega and total.
    """
    y = _as_batch(y, "y")
    y_hat = _as_batch(y_hat, "y_hat")
    if y.shape != y_hat.shape:
        raise LossError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.shape[0] < 2:
        raise LossError("sup_loss requires a batch of at least 2 samples")
    l_mae = mae(y, y_hat)
    y_hat_for_omega = y_hat if omega_in_graph else y_hat.detach()
    y_bar = y.mean(dim=0, keepdim=True)
    sst = torch.linalg.vector_norm(y - y_bar, dim=-1).square().sum()
    sse = torch.linalg.vector_norm(y - y_hat_for_omega, dim=-1).square().sum()
    ev = ev_weight(y, y_hat_for_omega, omega_max=omega_max)
    total = l_mae * (ev.omega + 1.0)
    return SupLossBreakdown(
        mae=l_mae,
        sst=sst,
        sse=sse,
        v_ex=ev.v_ex,
        omega=ev.omega,
        total=total,
        degenerate=ev.degenerate,
    )


def weighted_cross_entropy(logits, labels, class_weights) -> torch.Tensor:
    """Cross-entropy with per-class weights, normalized by the selected weights.

    loss = sum_i w[labels_i] * (-log softmax(logits_i)[labels_i]) / sum_i w[labels_i]

    Args:
        logits: shape (n, C).
        labels: integer class ids, shape (n,), each in [0, C).
        class_weights: positive weights, shape (C,).

    Returns:
        Scalar tensor.
    """
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    weights = torch.as_tensor(class_weights, dtype=logits.dtype)
    if logits.ndim != 2:
        raise LossError(f"logits must be (n, C), got {tuple(logits.shape)}")
    n, c = logits.shape
    if labels.shape[0] != n:
        raise LossError(f"got {labels.shape[0]} labels for {n} logit rows")
    if weights.shape != (c,):
        raise LossError(f"expected {c} class weights, got shape {tuple(weights.shape)}")
    if torch.any(weights <= 0):
        raise LossError("class weights must be positive")
    if torch.any(labels < 0) or torch.any(labels >= c):
        raise LossError(f"labels must lie in [0, {c})")
    log_probs = torch.log_softmax(logits, dim=-1)
    picked = log_probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    w = weights[labels]
    return -(w * picked).sum() / w.sum()

"""Distillation and segmentation losses.

All losses operate on torch tensors and are differentiable with respect to the
student logits.  Teacher logits are always detached, so no gradient can reach
the teacher even if the caller forgets to freeze it.

Shapes follow the usual segmentation layout: logits are ``[B, C, H, W]`` and
label masks are ``[B, H, W]``.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from aicsd.errors import (
    DegenerateBatchError,
    InvalidInputError,
    InvalidLabelError,
    ScheduleError,
    ShapeError,
)

DEFAULT_EPSILON = 1e-12
DEFAULT_IGNORE_INDEX = 255
_NORMALIZATION_TOL = 1e-5


@dataclass
class LossConfig:
    """Hyperparameters shared by the loss functions.

    Attributes:
        temperature: softening temperature of the pixel-wise KD loss.
        lam: scale of the inter-class similarity term (``lambda`` is reserved).
        epsilon: probability floor used inside logarithms.
        ignore_index: label value excluded from cross entropy.
        lambda_in_aicsd: scale the ICS term by ``lam`` inside the adaptive
            combined loss as well as in the plain ICSD objective.
    """

    temperature: float = 1.0
    lam: float = 9500.0
    epsilon: float = DEFAULT_EPSILON
    ignore_index: int = DEFAULT_IGNORE_INDEX
    lambda_in_aicsd: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInputError(f"temperature must be > 0, got {self.temperature}")
        if self.lam < 0:
            raise InvalidInputError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.epsilon <= 1e-3:
            raise InvalidInputError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")


@dataclass
class LossBreakdown:
    """Individual loss terms and the value of the active combination rule.

    Fields may hold 0-dim tensors (during training, ``total`` carries the
    autograd graph) or plain floats.
    """

    ce: object = 0.0
    ics: object = 0.0
    icsd: object = 0.0
    kd: object = 0.0
    alpha: float = 1.0
    total: object = 0.0
    active: tuple = field(default_factory=tuple)

    def as_floats(self):
        def f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return {
            "ce": f(self.ce),
            "ics": f(self.ics),
            "icsd": f(self.icsd),
            "kd": f(self.kd),
            "alpha": f(self.alpha),
            "total": f(self.total),
        }


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains NaN or Inf")


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def spatial_softmax(sample_logits):
    """Softmax of each class channel over its flattened spatial positions.

    Args:
        sample_logits: ``[C, H, W]`` logits of one image, or ``[B, C, H, W]``.

    Returns:
        ``[C, H*W]`` (or ``[B, C, H*W]``) tensor whose rows are probability
        distributions over space.
    """
    sample_logits = _as_tensor(sample_logits)
    if sample_logits.dim() not in (3, 4):
        raise ShapeError(f"expected [C, H, W] or [B, C, H, W], got {tuple(sample_logits.shape)}")
    _check_finite(sample_logits, "logits")
    flat = sample_logits.flatten(start_dim=-2)
    # torch.softmax subtracts the row max internally
    return torch.softmax(flat, dim=-1)


def _check_distribution(p, name):
    if (p < 0).any():
        raise InvalidInputError(f"{name} has negative entries")
    sums = p.sum(dim=-1)
    if ((sums - 1).abs() > _NORMALIZATION_TOL).any():
        raise InvalidInputError(f"{name} does not sum to 1 (max deviation {float((sums - 1).abs().max()):.3g})")


def kl_divergence(p, q, epsilon=DEFAULT_EPSILON):
    """KL(p || q) in nats with both arguments floored at ``epsilon`` inside the log.

    Works on the last dimension, so batches of distributions are accepted.
    """
    p = _as_tensor(p)
    q = _as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    with torch.no_grad():
        _check_distribution(p, "p")
        _check_distribution(q, "q")
    log_ratio = torch.log(p.clamp(min=epsilon)) - torch.log(q.clamp(min=epsilon))
    return (p * log_ratio).sum(dim=-1)


def ics_matrix(dist, epsilon=DEFAULT_EPSILON):
    """Inter-class similarity matrix: ``ICS[i, j] = KL(dist[i] || dist[j])``.

    Args:
        dist: ``[C, N]`` intra-class distributions, or a ``[B, C, N]`` batch.
        epsilon: probability floor inside the logarithm.

    Returns:
        ``[C, C]`` (or ``[B, C, C]``) matrix with an exactly zero diagonal.
        The matrix is not symmetric in general.
    """
    dist = _as_tensor(dist)
    if dist.dim() not in (2, 3):
        raise ShapeError(f"expected [C, N] or [B, C, N], got {tuple(dist.shape)}")
    with torch.no_grad():
        _check_distribution(dist, "intra-class distribution")
    log_p = torch.log(dist.clamp(min=epsilon))
    # KL(i||j) = sum_k p_ik log p_ik - sum_k p_ik log p_jk
    neg_entropy = (dist * log_p).sum(dim=-1)
    cross = dist @ log_p.transpose(-1, -2)
    ics = neg_entropy.unsqueeze(-1) - cross
    # KL(p||p) is identically zero, so masking the diagonal keeps the gradient exact
    c = ics.shape[-1]
    off_diag = 1.0 - torch.eye(c, dtype=ics.dtype, device=ics.device)
    return ics * off_diag


def ics_loss(ics_teacher, ics_student):
    """Mean squared difference between two ICS matrices.

    Batched ``[B, C, C]`` inputs give the mean of the per-sample losses.
    """
    ics_teacher = _as_tensor(ics_teacher)
    ics_student = _as_tensor(ics_student)
    if ics_teacher.shape != ics_student.shape or ics_teacher.shape[-1] != ics_teacher.shape[-2]:
        raise ShapeError(
            f"ICS matrices must be square and equal-sized, got "
            f"{tuple(ics_teacher.shape)} and {tuple(ics_student.shape)}"
        )
    return ((ics_teacher - ics_student) ** 2).mean()


def _check_pair(teacher, student):
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher {tuple(teacher.shape)} and student {tuple(student.shape)} logits differ in shape")
    if student.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W] logits, got {tuple(student.shape)}")
    if student.shape[1] < 2:
        raise ShapeError("at least two classes are required")


def inter_class_similarity_loss(teacher, student, epsilon=DEFAULT_EPSILON):
    """ICS loss between teacher and student logits, averaged over the batch."""
    _check_pair(teacher, student)
    teacher = teacher.detach()
    ics_t = ics_matrix(spatial_softmax(teacher), epsilon)
    ics_s = ics_matrix(spatial_softmax(student), epsilon)
    return ics_loss(ics_t, ics_s)


def pixelwise_kd_loss(teacher, student, temperature=1.0):
    """Per-pixel KL between softened teacher and student class distributions.

    The KL is averaged over pixels and then over the batch.  No ``tau**2``
    rescaling is applied.
    """
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be > 0, got {temperature}")
    _check_pair(teacher, student)
    teacher = teacher.detach()
    log_p_t = F.log_softmax(teacher / temperature, dim=1)
    log_p_s = F.log_softmax(student / temperature, dim=1)
    per_pixel = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
    return per_pixel.mean()


def cross_entropy_loss(student, labels, ignore_index=DEFAULT_IGNORE_INDEX):
    """Mean negative log-likelihood of the true class over non-ignored pixels."""
    if student.dim() != 4 or labels.dim() != 3:
        raise ShapeError("expected [B, C, H, W] logits and [B, H, W] labels")
    if student.shape[0] != labels.shape[0] or student.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"logits {tuple(student.shape)} and labels {tuple(labels.shape)} do not align")
    num_classes = student.shape[1]
    labels = labels.long()
    valid = labels != ignore_index
    if not valid.any():
        raise DegenerateBatchError("every pixel is labelled ignore_index")
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise InvalidLabelError(
            f"label value {int(labels[bad][0])} outside 0..{num_classes - 1} and not ignore_index={ignore_index}"
        )
    return F.cross_entropy(student, labels, ignore_index=ignore_index, reduction="mean")


def icsd_total_loss(ce, ics, lam):
    """ICSD objective ``ce + lam * ics``, returned as a populated breakdown."""
    icsd = lam * ics
    return LossBreakdown(ce=ce, ics=ics, icsd=icsd, kd=0.0, alpha=1.0, total=ce + icsd, active=("ce", "ics"))


def aicsd_loss(ce, icsd, kd, alpha):
    """Adaptive combination ``alpha * (ce + icsd) + (1 - alpha) * kd``.

    ``icsd`` is expected to be already scaled by lambda.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ScheduleError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * (ce + icsd) + (1.0 - alpha) * kd


def gradient(loss_fn, student):
    """Gradient of ``loss_fn(student)`` with respect to the student logits.

    ``loss_fn`` is any callable mapping student logits to a scalar; teacher
    logits captured in it stay constant.
    """
    s = _as_tensor(student).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = loss_fn(s)
        if not loss.requires_grad:
            return torch.zeros_like(s)
        (grad,) = torch.autograd.grad(loss, s, allow_unused=True)
    return torch.zeros_like(s) if grad is None else grad

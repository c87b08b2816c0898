"""Training losses and teacher dynamics.

Two objectives are combined: a symmetric InfoNCE loss over matched
caption/image embedding pairs, and a self-distillation loss where a student
matches the centered/sharpened output distribution of an EMA teacher across
global and local views.  The combined loss is their plain average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ModelParams
from .errors import ContractError, DomainError, NumericError, ShapeError

DEFAULT_STUDENT_TAU = 0.1
DEFAULT_TEACHER_TAU = 0.04
DEFAULT_CENTER_MOMENTUM = 0.9
DEFAULT_EMA_MOMENTUM = 0.996

DIST_SUM_TOL = 1e-4


@dataclass
class ContrastiveBatch:
    """Matched caption embeddings U and image embeddings V, row i paired."""

    captions: Tensor      # [N, m]
    images: Tensor        # [N, m]
    tau: Tensor | float   # positive temperature, may be a learnable tensor

    def __post_init__(self):
        u, v = self.captions, self.images
        if u.ndim != 2 or v.ndim != 2 or u.shape != v.shape:
            raise ShapeError(f"contrastive batch needs matching [N, m] matrices, "
                             f"got {u.shape} and {v.shape}")
        tau = self.tau.item() if isinstance(self.tau, Tensor) else float(self.tau)
        if not tau > 0:
            raise DomainError(f"temperature must be positive, got {tau}")

    @property
    def n(self) -> int:
        return self.captions.shape[0]


@dataclass
class TeacherState:
    """EMA copy of the student plus the centering vector and temperatures."""

    params: ModelParams
    center: np.ndarray                                   # [K]
    ema_momentum: float = DEFAULT_EMA_MOMENTUM           # lambda
    tau_teacher: float = DEFAULT_TEACHER_TAU
    center_momentum: float = DEFAULT_CENTER_MOMENTUM

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float32)
        k = self.params.config.dino.output_dim
        if self.center.shape != (k,):
            raise ShapeError(f"center must have shape ({k},), got {self.center.shape}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise DomainError(f"EMA momentum must lie in [0, 1], got {self.ema_momentum}")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise DomainError(f"center momentum must lie in [0, 1], got {self.center_momentum}")
        if not self.tau_teacher > 0:
            raise DomainError(f"teacher temperature must be positive, got {self.tau_teacher}")


def make_teacher(student: ModelParams, **kwargs) -> TeacherState:
    """Teacher initialized as an exact copy of the student, zero center."""
    k = student.config.dino.output_dim
    return TeacherState(params=student.clone(), center=np.zeros(k, dtype=np.float32), **kwargs)


@dataclass
class ViewBundle:
    """Augmented views of one image: >= 2 global crops plus local crops,
    all at model input size.  global_views[first_global] feeds the
    contrastive branch."""

    global_views: list
    local_views: list = field(default_factory=list)
    first_global: int = 0

    def __post_init__(self):
        if len(self.global_views) < 2:
            raise ContractError(f"need >= 2 global views, got {len(self.global_views)}")
        if not 0 <= self.first_global < len(self.global_views):
            raise ContractError(f"first_global {self.first_global} out of range")

    @property
    def total(self) -> int:
        return len(self.global_views) + len(self.local_views)

    def all_views(self) -> list:
        return list(self.global_views) + list(self.local_views)


@dataclass
class DistributionSet:
    """Teacher distributions per global view, student distributions per view.

    Student views are ordered with the global views first, so view index i of
    the teacher list and of the student list name the same crop.
    """

    teacher: list   # G tensors of shape [K]
    student: list   # S tensors of shape [K]

    def __post_init__(self):
        if len(self.teacher) < 2:
            raise ContractError(f"need >= 2 teacher (global) views, got {len(self.teacher)}")
        if len(self.student) < len(self.teacher):
            raise ContractError("student must cover at least the global views")
        for name, dists in (("teacher", self.teacher), ("student", self.student)):
            for d in dists:
                vals = d.data if isinstance(d, Tensor) else np.asarray(d)
                if vals.min() < 0 or abs(vals.sum() - 1.0) > DIST_SUM_TOL:
                    raise ContractError(f"{name} entry is not a distribution "
                                        f"(sum {vals.sum():.6f}, min {vals.min():.3e})")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """(a . b) / (||a|| ||b||), eps-guarded; scalar in [-1, 1]."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, "
                         f"got {a.shape} and {b.shape}")
    return ad.sum_(ad.mul(ad.l2_normalize(a), ad.l2_normalize(b)))


def cross_entropy_soft(p_target, p_pred) -> Tensor:
    """-sum(p_target * log(p_pred)) for two distributions over the same
    support.  The target is a constant: gradient reaches only p_pred."""
    pred = p_pred if isinstance(p_pred, Tensor) else Tensor(p_pred)
    target = p_target.data if isinstance(p_target, Tensor) else np.asarray(p_target)
    if target.shape != pred.shape:
        raise ShapeError(f"cross_entropy_soft: lengths disagree: "
                         f"{target.shape} vs {pred.shape}")
    for name, vals in (("target", target), ("prediction", pred.data)):
        if abs(vals.sum() - 1.0) > DIST_SUM_TOL:
            raise ContractError(f"{name} does not sum to 1 (got {vals.sum():.6f})")
    return ad.soft_cross_entropy(target, pred)


def info_nce_loss(batch: ContrastiveBatch) -> Tensor:
    """Symmetric InfoNCE over the N x N cosine-similarity matrix.

    Per direction the loss is the mean negative log-probability of the
    matched column (softmax over in-batch negatives at temperature tau);
    the two directions are averaged.
    """
    n = batch.n
    if n == 0:
        raise ContractError("empty contrastive batch")
    u = ad.l2_normalize(batch.captions, axis=-1)
    v = ad.l2_normalize(batch.images, axis=-1)
    sims = ad.matmul(u, ad.transpose(v))                      # [N, N], row i = caption i
    if isinstance(batch.tau, Tensor):
        logits = ad.div(sims, batch.tau)
    else:
        logits = ad.mul(sims, 1.0 / float(batch.tau))
    eye = np.eye(n, dtype=logits.dtype)
    t2i = ad.neg(ad.mul(ad.sum_(ad.mul(ad.log_softmax(logits, axis=1), eye)), 1.0 / n))
    i2t = ad.neg(ad.mul(ad.sum_(ad.mul(ad.log_softmax(logits, axis=0), eye)), 1.0 / n))
    return ad.mul(ad.add(t2i, i2t), 0.5)


def teacher_distribution(logits, state: TeacherState) -> Tensor:
    """Centered and sharpened teacher output: softmax((z - c) / tau_t).

    Pure value computation (the teacher never joins the tape); accepts [K]
    or a stacked [B, K] logit block.
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    k = state.center.shape[0]
    if z.shape[-1] != k:
        raise ShapeError(f"teacher logits last dim {z.shape} vs center ({k},)")
    shifted = (z - state.center.astype(z.dtype)) / state.tau_teacher
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return Tensor(e / e.sum(axis=-1, keepdims=True), dtype=z.dtype)


def student_distribution(logits, tau_student: float) -> Tensor:
    """softmax(z / tau_s); differentiable when logits are on the tape."""
    if tau_student <= 0:
        raise DomainError(f"student temperature must be positive, got {tau_student}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return ad.softmax(logits, axis=-1, temperature=tau_student)


def self_distillation_loss(dists: DistributionSet, average_pairs: bool = True) -> Tensor:
    """Cross entropy from each teacher global view to every other student
    view, averaged over the summed pairs (raw sum when average_pairs is
    False).  2 global + 8 local views make 2 * (10 - 1) = 18 pairs."""
    g = len(dists.teacher)
    s = len(dists.student)
    terms = []
    for ti in range(g):
        target = dists.teacher[ti]
        target = target.data if isinstance(target, Tensor) else np.asarray(target)
        for si in range(s):
            if si == ti:
                continue
            terms.append(ad.soft_cross_entropy(target, dists.student[si]))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    if average_pairs:
        total = ad.mul(total, 1.0 / len(terms))
    return total


def distillation_pair_count(n_global: int, n_views: int) -> int:
    return n_global * (n_views - 1)


def soft_distillation_terms(teacher_dists, student_dists, average_pairs: bool = True) -> Tensor:
    """Batched form of self_distillation_loss: entries are [B, K] blocks
    (teacher blocks constant, student blocks on the tape); each pair term is
    the batch-mean cross entropy."""
    g, s = len(teacher_dists), len(student_dists)
    if g < 2:
        raise ContractError(f"need >= 2 teacher (global) view blocks, got {g}")
    total = None
    count = 0
    for ti in range(g):
        target = teacher_dists[ti]
        target = target.data if isinstance(target, Tensor) else np.asarray(target)
        for si in range(s):
            if si == ti:
                continue
            term = ad.soft_cross_entropy(target, student_dists[si])
            total = term if total is None else ad.add(total, term)
            count += 1
    if average_pairs:
        total = ad.mul(total, 1.0 / count)
    return total


def combined_loss(contrastive, distillation) -> Tensor:
    """Average of the two objectives."""
    c = contrastive if isinstance(contrastive, Tensor) else Tensor(np.asarray(contrastive))
    d = distillation if isinstance(distillation, Tensor) else Tensor(np.asarray(distillation))
    if not (np.isfinite(c.data).all() and np.isfinite(d.data).all()):
        raise NumericError(f"non-finite loss inputs: {c.data}, {d.data}")
    return ad.mul(ad.add(c, d), 0.5)


# ---------------------------------------------------------------------------
# teacher updates (value-level, outside any tape)
# ---------------------------------------------------------------------------

def ema_update(teacher: TeacherState, student: ModelParams) -> TeacherState:
    """theta_t <- lambda * theta_t + (1 - lambda) * theta_s, elementwise."""
    t_params, s_params = teacher.params, student
    if list(t_params.names()) != list(s_params.names()):
        raise ContractError("teacher and student parameter trees differ")
    lam = teacher.ema_momentum
    if lam == 1.0:
        return teacher
    for name, s_tensor in s_params.items():
        t_tensor = t_params[name]
        if t_tensor.shape != s_tensor.shape:
            raise ContractError(f"parameter {name!r}: teacher shape {t_tensor.shape} "
                                f"vs student {s_tensor.shape}")
        if lam == 0.0:
            new = s_tensor.data.copy()
        else:
            new = lam * t_tensor.data + (1.0 - lam) * s_tensor.data
        t_params.tensors[name] = Tensor(new, requires_grad=False, name=name, dtype=new.dtype)
    return teacher


def update_center(state: TeacherState, teacher_logits_batch) -> TeacherState:
    """c <- momentum * c + (1 - momentum) * batch mean of teacher logits."""
    z = (teacher_logits_batch.data if isinstance(teacher_logits_batch, Tensor)
         else np.asarray(teacher_logits_batch))
    if z.ndim != 2 or z.shape[0] < 1:
        raise ContractError(f"need a non-empty [B, K] logit batch, got shape {z.shape}")
    if z.shape[1] != state.center.shape[0]:
        raise ShapeError(f"logit width {z.shape[1]} vs center {state.center.shape[0]}")
    m = state.center_momentum
    batch_mean = z.mean(axis=0).astype(np.float32)
    state.center = (m * state.center + (1.0 - m) * batch_mean).astype(np.float32)
    return state

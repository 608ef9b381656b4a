"""Loss functions for mutual contrastive low-rank training.

All functions accept torch tensors (or anything ``torch.as_tensor`` understands)
laid out one row per sample, and return torch scalars so they can sit inside an
autograd graph. The nuclear-norm loss carries its own backward pass built from
the thresholded SVD subgradient rather than differentiating through the SVD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import BatchTooSmallError, DegenerateVectorError, InvalidInputError, InvalidParameterError

DEFAULT_EPS = 1e-5
DEFAULT_TAU = 0.5
DEFAULT_DELTA = 1.0
DEFAULT_TAYLOR_T = 3
DEFAULT_SV_THRESHOLD = 1e-6
KL_CLAMP = 1e-12

STACKINGS = ("vertical", "horizontal")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "iub":
        return torch.as_tensor(arr)
    return torch.as_tensor(arr, dtype=torch.float64)


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise InvalidInputError(f"{name} contains non-finite values")


def _check_matrix(x: torch.Tensor, name: str) -> None:
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D matrix, got shape {tuple(x.shape)}")
    _check_finite(x, name)


def layer_normalize(g, eps: float = DEFAULT_EPS, mode: str = "row") -> torch.Tensor:
    """Center and rescale latent vectors.

    ``mode="row"`` normalizes each sample over its features (layer norm, the
    default). ``mode="batch"`` uses per-feature statistics over the batch and is
    kept only for ablations. Variances use divisor ``d`` (resp. ``N``).
    """
    g = _as_tensor(g)
    _check_matrix(g, "g")
    if eps <= 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    if mode == "row":
        dim = 1
    elif mode == "batch":
        dim = 0
    else:
        raise InvalidParameterError(f"unknown normalization mode {mode!r}")
    mu = g.mean(dim=dim, keepdim=True)
    var = g.var(dim=dim, unbiased=False, keepdim=True)
    return (g - mu) / torch.sqrt(var + eps)


def cosine_similarity_matrix(a, b) -> torch.Tensor:
    """Entry ``(k, i)`` is the cosine similarity between row ``a[k]`` and row ``b[i]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_matrix(a, "A")
    _check_matrix(b, "B")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateVectorError("cosine similarity is undefined for zero-norm rows")
    return (a / na) @ (b / nb).T


def _validate_tau(tau: float) -> None:
    if not tau > 0:
        raise InvalidParameterError(f"temperature tau must be > 0, got {tau}")


def nmc_loss(ga, gb, tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS, norm_mode: str = "row") -> torch.Tensor:
    """Normalized modality contrastive loss between paired rows of ``ga`` and ``gb``.

    Row ``k`` of each input comes from the same patient. Both inputs are layer
    normalized, then every anchor is scored against its partner with the other
    N-1 cross-modal rows as negatives. The positive pair is *excluded* from the
    denominator, so the value can be negative; it lies in
    ``[-2/tau + log(N-1), 2/tau + log(N-1)]``.

    The softmax ratio is evaluated literally (exp then divide). At very small
    temperatures this overflows to NaN, which the trainer reports as collapse.
    """
    ga, gb = _as_tensor(ga), _as_tensor(gb)
    _validate_tau(tau)
    _check_matrix(ga, "ga")
    _check_matrix(gb, "gb")
    if ga.shape != gb.shape:
        raise InvalidInputError(f"shape mismatch {tuple(ga.shape)} vs {tuple(gb.shape)}")
    n = ga.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"nmc_loss needs at least 2 pairs, got {n}")
    sim = cosine_similarity_matrix(layer_normalize(ga, eps, norm_mode), layer_normalize(gb, eps, norm_mode))
    negatives = ~torch.eye(n, dtype=torch.bool, device=sim.device)

    def one_side(s: torch.Tensor) -> torch.Tensor:
        e = torch.exp(s / tau)
        num = torch.diagonal(e)
        den = (e * negatives).sum(dim=1)
        return -torch.log(num / den)

    # sim[k, i] = sim(a_k, b_i); the b-anchored side reads it transposed.
    return (one_side(sim).sum() + one_side(sim.T).sum()) / (2 * n)


def nuclear_norm(m) -> torch.Tensor:
    m = _as_tensor(m)
    if m.ndim != 2:
        raise InvalidInputError("nuclear_norm expects a 2-D matrix")
    _check_finite(m, "M")
    return torch.linalg.svdvals(m).sum()


def _labels_array(labels, n: int, num_classes: int | None) -> tuple[np.ndarray, int]:
    lab = np.asarray(labels.detach().cpu() if isinstance(labels, torch.Tensor) else labels)
    if lab.ndim != 1 or lab.shape[0] != n:
        raise InvalidInputError(f"labels must be a vector of length {n}")
    if lab.size and (lab.dtype.kind not in "iu" or lab.min() < 0):
        raise InvalidInputError("labels must be non-negative integers")
    lab = lab.astype(np.int64)
    c = int(lab.max()) + 1 if num_classes is None else int(num_classes)
    if lab.size and lab.max() >= c:
        raise InvalidInputError(f"label {int(lab.max())} out of range for {c} classes")
    return lab, c


def count_empty_classes(labels, num_classes: int) -> int:
    """Number of classes with no sample in the batch (each adds a constant ``delta``)."""
    lab = np.asarray(labels).astype(np.int64)
    return int(np.sum(np.bincount(lab, minlength=num_classes)[:num_classes] == 0))


def _stack(xa: torch.Tensor, xb: torch.Tensor, lab: np.ndarray, stacking: str):
    """Return the column-per-sample matrix M and the label of each column."""
    if stacking == "vertical":
        return torch.cat([xa.T, xb.T], dim=0), lab
    if stacking == "horizontal":
        return torch.cat([xa.T, xb.T], dim=1), np.concatenate([lab, lab])
    raise InvalidParameterError(f"unknown stacking {stacking!r}; expected one of {STACKINGS}")


def _unstack(g: torch.Tensor, d: int, n: int, stacking: str):
    if stacking == "vertical":
        return g[:d].T, g[d:].T
    return g[:, :n].T, g[:, n:].T


def _svd_part(a: torch.Tensor, threshold: float):
    """Nuclear norm of ``a`` and ``U1 V1^T`` restricted to singular values above ``threshold``."""
    u, s, vh = torch.linalg.svd(a, full_matrices=False)
    keep = s > threshold
    return s.sum(), u[:, keep] @ vh[keep]


def _lowrank_value_and_grad(xa, xb, labels, delta, num_classes, sv_threshold, stacking):
    xa, xb = _as_tensor(xa), _as_tensor(xb)
    _check_matrix(xa, "xa")
    _check_matrix(xb, "xb")
    if xa.shape != xb.shape:
        raise InvalidInputError(f"shape mismatch {tuple(xa.shape)} vs {tuple(xb.shape)}")
    if not sv_threshold > 0:
        raise InvalidParameterError(f"sv_threshold must be > 0, got {sv_threshold}")
    n, d = xa.shape
    lab, c = _labels_array(labels, n, num_classes)
    with torch.no_grad():
        m, col_labels = _stack(xa.detach().double(), xb.detach().double(), lab, stacking)
        s_max = torch.linalg.svdvals(m)[0].item() if min(m.shape) else 0.0
        threshold = sv_threshold * s_max
        total_norm, grad = _svd_part(m, threshold)
        grad = -grad
        value = -total_norm
        for cls in range(c):
            cols = np.flatnonzero(col_labels == cls)
            if cols.size == 0:
                value = value + delta
                continue
            idx = torch.as_tensor(cols)
            norm_c, g_c = _svd_part(m[:, idx], threshold)
            if norm_c > delta:
                value = value + norm_c
                grad[:, idx] += g_c
            else:
                value = value + delta
        ga, gb = _unstack(grad, d, n, stacking)
    return value.to(xa.dtype), ga.to(xa.dtype), gb.to(xb.dtype)


class _LowRankFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, xa, xb, labels, delta, num_classes, sv_threshold, stacking):
        value, ga, gb = _lowrank_value_and_grad(xa, xb, labels, delta, num_classes, sv_threshold, stacking)
        ctx.save_for_backward(ga, gb)
        return value

    @staticmethod
    def backward(ctx, grad_out):
        ga, gb = ctx.saved_tensors
        return grad_out * ga, grad_out * gb, None, None, None, None, None


def lowrank_loss(
    xa,
    xb,
    labels,
    delta: float = DEFAULT_DELTA,
    num_classes: int | None = None,
    sv_threshold: float = DEFAULT_SV_THRESHOLD,
    stacking: str = "vertical",
) -> torch.Tensor:
    """Sum over classes of ``max(delta, ||M_c||_*)`` minus ``||M||_*``.

    ``M`` has one column per pair, formed by stacking the two modality
    embeddings along the feature axis (``stacking="vertical"``); the
    ``"horizontal"`` option instead treats every sample of both modalities as
    its own column. A class with no samples contributes ``delta``.

    Backpropagation uses the thresholded SVD subgradient (see
    :func:`lowrank_subgradient`); ``sv_threshold`` is relative to the largest
    singular value of ``M``.
    """
    xa, xb = _as_tensor(xa), _as_tensor(xb)
    return _LowRankFn.apply(xa, xb, labels, float(delta), num_classes, float(sv_threshold), stacking)


def lowrank_subgradient(
    xa,
    xb,
    labels,
    delta: float = DEFAULT_DELTA,
    num_classes: int | None = None,
    sv_threshold: float = DEFAULT_SV_THRESHOLD,
    stacking: str = "vertical",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Subgradient of :func:`lowrank_loss` with respect to ``xa`` and ``xb``.

    Per class, ``U_c V_c^T`` (singular directions above the threshold) is
    scattered back into that class's columns of ``M``, but only when the class
    norm exceeds ``delta``; ``U V^T`` of the whole of ``M`` is subtracted. The
    result is split into the two ``(N, d)`` modality gradients.
    """
    _, ga, gb = _lowrank_value_and_grad(xa, xb, labels, float(delta), num_classes, float(sv_threshold), stacking)
    return ga, gb


def taylor_ce(probs, labels, t: int = DEFAULT_TAYLOR_T) -> torch.Tensor:
    """Truncated Taylor series of ``-log p_y``: ``sum_{i=1..t} (1 - p_y)^i / i``.

    ``probs`` is a probability vector with an integer ``labels``, or an
    ``(N, C)`` matrix with a label vector, in which case the batch mean is
    returned. Bounded by the harmonic number ``H_t`` even when ``p_y = 0``.
    """
    probs = _as_tensor(probs)
    if int(t) != t or t < 1:
        raise InvalidParameterError(f"taylor term count t must be a positive integer, got {t}")
    single = probs.ndim == 1
    if single:
        probs = probs.unsqueeze(0)
    if probs.ndim != 2:
        raise InvalidInputError("probs must be a vector or an (N, C) matrix")
    _check_finite(probs, "probs")
    if bool((probs < 0).any()) or bool((probs > 1).any()):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    lab = torch.as_tensor(np.atleast_1d(np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)))
    lab = lab.to(torch.long).reshape(-1)
    if lab.shape[0] != probs.shape[0]:
        raise InvalidInputError("one label per probability row is required")
    if bool((lab < 0).any()) or bool((lab >= probs.shape[1]).any()):
        raise InvalidInputError("label out of range")
    miss = 1 - probs.gather(1, lab.unsqueeze(1)).squeeze(1)
    loss = sum(miss**i / i for i in range(1, int(t) + 1))
    return loss[0] if single else loss.mean()


@dataclass
class LossBreakdown:
    """Loss terms of one branch. ``total`` is always ``cls + nmc + lr``."""

    cls: float
    nmc: float
    lr: float
    total: float

    @classmethod
    def from_terms(cls, cls_term, nmc_term, lr_term):
        return cls(cls_term, nmc_term, lr_term, cls_term + nmc_term + lr_term)

    def as_floats(self) -> "LossBreakdown":
        c, n, r = (float(v.detach() if isinstance(v, torch.Tensor) else v) for v in (self.cls, self.nmc, self.lr))
        return LossBreakdown.from_terms(c, n, r)

    def to_dict(self) -> dict:
        return {"cls": self.cls, "nmc": self.nmc, "lr": self.lr, "total": self.total}


def total_loss(cls_a, cls_b, nmc, lr, weights: Sequence[float] = (1.0, 1.0, 1.0)):
    """Per-modality totals: each branch gets its own classification term plus the shared terms.

    The weights scale the terms before they are stored, so the breakdown stays additive.
    """
    w_cls, w_nmc, w_lr = weights
    shared_nmc = w_nmc * nmc
    shared_lr = w_lr * lr
    return (
        LossBreakdown.from_terms(w_cls * cls_a, shared_nmc, shared_lr),
        LossBreakdown.from_terms(w_cls * cls_b, shared_nmc, shared_lr),
    )


def kl_mutual(probs_a, probs_b) -> torch.Tensor:
    """Symmetric KL divergence between two batches of distributions (batch mean).

    Probabilities are clamped at ``1e-12`` before taking logs.
    """
    pa = _as_tensor(probs_a)
    pb = _as_tensor(probs_b)
    if pa.shape != pb.shape:
        raise InvalidInputError("probability tensors must have the same shape")
    pa, pb = pa.clamp_min(KL_CLAMP), pb.clamp_min(KL_CLAMP)
    la, lb = torch.log(pa), torch.log(pb)
    kl_ab = (pa * (la - lb)).sum(dim=-1)
    kl_ba = (pb * (lb - la)).sum(dim=-1)
    return (0.5 * (kl_ab + kl_ba)).mean()


def nt_xent(ga, gb, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Cross-modal NT-Xent with l2-normalized rows and the positive kept in the denominator.

    Averaged over both anchor directions. Never negative.
    """
    _validate_tau(tau)
    sim = cosine_similarity_matrix(ga, gb) / tau
    target = torch.arange(sim.shape[0])
    loss_a = torch.nn.functional.cross_entropy(sim, target)
    loss_b = torch.nn.functional.cross_entropy(sim.T, target)
    return 0.5 * (loss_a + loss_b)

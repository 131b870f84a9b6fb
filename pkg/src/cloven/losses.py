"""CLOVEN objective: asymmetric contrastive module plus DDC clustering guidance.

All functions take and return :class:`~cloven.autodiff.Tensor` so the total
objective is differentiable end to end. Contrastive sums run over anchors and
views without averaging, as the objective is written.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

EPS = 1e-9
ENTROPY_MODES = ("per_sample", "marginal")


@dataclass
class LossConfig:
    tau: float = 0.5
    sigma: float = 0.15
    sigma_relative: bool = False
    entropy_mode: str = "per_sample"
    use_icl: bool = True
    use_ccl: bool = True
    use_ddc: bool = True
    asymmetric: bool = True

    def validate(self) -> list[str]:
        errors = []
        if not self.tau > 0:
            errors.append(f"tau must be > 0, got {self.tau}")
        if not self.sigma > 0:
            errors.append(f"sigma must be > 0, got {self.sigma}")
        if self.entropy_mode not in ENTROPY_MODES:
            errors.append(f"entropy_mode must be one of {ENTROPY_MODES}, got {self.entropy_mode!r}")
        if not (self.use_icl or self.use_ccl or self.use_ddc):
            errors.append("at least one of use_icl, use_ccl, use_ddc must be enabled")
        return errors


@dataclass
class LossBreakdown:
    icl: float
    ccl: float
    entropy: float
    contrast: float
    ddc_term1: float
    ddc_term2: float
    ddc_term3: float
    ddc: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# similarity instrumentation

_similarity_log: Optional[list] = None


@contextlib.contextmanager
def record_similarities() -> Iterator[list]:
    """Collect ``(source_a, source_b, n_pairs)`` for every similarity evaluated."""
    global _similarity_log
    prev = _similarity_log
    _similarity_log = log = []
    try:
        yield log
    finally:
        _similarity_log = prev


def _note(tags, a: Tensor, b: Tensor) -> None:
    if _similarity_log is not None and tags is not None:
        _similarity_log.append((tags[0], tags[1], a.shape[0] * b.shape[0]))


# ----------------------------------------------------------------------------
# building blocks


def _row_normalize(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=1, keepdims=True)
    return x / ad.sqrt(ad.clamp_min(sq, EPS * EPS))


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors; norms are floored at ``EPS``."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"cosine_sim: need two equal-length vectors, got {a.shape} and {b.shape}")
    return cosine_matrix(ad.reshape(a, (1, -1)), ad.reshape(b, (1, -1))).sum()


def cosine_matrix(a: Tensor, b: Tensor, tags=None) -> Tensor:
    """All pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    _note(tags, a, b)
    return _row_normalize(a) @ _row_normalize(b).T


def _nt_xent(anchor: Tensor, target: Tensor, tau: float, tags) -> Tensor:
    """Sum over anchors of ``-log(exp(s_ii/tau) / sum over the other 2N-1 candidates)``.

    Candidates for anchor ``i`` are every target row (the positive ``i`` and
    ``N-1`` negatives) plus the other ``N-1`` anchor rows.
    """
    n = anchor.shape[0]
    if n < 2:
        raise ContractError("instance contrastive loss needs at least 2 samples")
    if target.shape != anchor.shape:
        raise ContractError(f"anchor {anchor.shape} and target {target.shape} must match")
    off_diag = Tensor(1.0 - np.eye(n))
    eye = Tensor(np.eye(n))
    s_at = cosine_matrix(anchor, target, tags)
    s_aa = cosine_matrix(anchor, anchor, (tags[0], tags[0]) if tags else None)
    denom = ad.exp(s_at * (1.0 / tau)).sum(axis=1) + (ad.exp(s_aa * (1.0 / tau)) * off_diag).sum(axis=1)
    positive = (s_at * eye).sum(axis=1) * (1.0 / tau)
    return (ad.log(denom) - positive).sum()


def _cluster_nce(a_anchor: Tensor, a_target: Tensor, tau: float, tags) -> Tensor:
    """Contrast assignment columns: column ``i`` of the anchor against all target columns."""
    k = a_anchor.shape[1]
    if k < 2:
        raise ContractError("category contrastive loss needs k >= 2")
    if a_target.shape != a_anchor.shape:
        raise ContractError(f"assignment shapes differ: {a_anchor.shape} vs {a_target.shape}")
    s = cosine_matrix(a_anchor.T, a_target.T, tags)
    positive = (s * Tensor(np.eye(k))).sum(axis=1) * (1.0 / tau)
    return (ad.log(ad.exp(s * (1.0 / tau)).sum(axis=1)) - positive).sum()


# ----------------------------------------------------------------------------
# the objective terms


def instance_contrastive(z_proj: Tensor, h_proj: Sequence[Tensor], tau: float = 0.5) -> Tensor:
    """Instance-level loss between projected ``Z`` and each projected ``H``, summed over views."""
    total = None
    for v, hp in enumerate(h_proj):
        term = _nt_xent(z_proj, hp, tau, ("Z", f"H{v}"))
        total = term if total is None else total + term
    return total


def category_contrastive(a_z: Tensor, a_h: Sequence[Tensor], tau: float = 0.5) -> Tensor:
    """Category-level loss between cluster columns of ``g(Z)`` and each ``g(H)``."""
    total = None
    for v, ah in enumerate(a_h):
        term = _cluster_nce(a_z, ah, tau, ("Z", f"H{v}"))
        total = term if total is None else total + term
    return total


def assignment_entropy(a: Tensor, b: Tensor, mode: str = "per_sample") -> Tensor:
    """``-(1/k) * sum_i [a_i log a_i + b_i log b_i]``.

    ``per_sample`` averages the expression over rows; ``marginal`` applies it
    once to the batch-mean assignment of each side.
    """
    k = a.shape[1]
    if mode == "per_sample":
        s = (ad.xlogx(a) + ad.xlogx(b)).sum(axis=1).mean()
    elif mode == "marginal":
        s = (ad.xlogx(a.mean(axis=0)) + ad.xlogx(b.mean(axis=0))).sum()
    else:
        raise ContractError(f"unknown entropy mode {mode!r}")
    return s * (-1.0 / k)


def contrast_loss(icl, ccl, entropies: Sequence, views: int):
    """``(icl + ccl - sum(entropies)) / V``; accepts tensors or floats."""
    ent = entropies[0]
    for e in entropies[1:]:
        ent = ent + e
    return (icl + ccl - ent) * (1.0 / views)


def pairwise_sq_dists(x: Tensor) -> Tensor:
    n = x.shape[0]
    sq = (x * x).sum(axis=1, keepdims=True)
    d = sq + sq.T - (x @ x.T) * 2.0
    return ad.clamp_min(d, 0.0) * Tensor(1.0 - np.eye(n))


def kernel_matrix(hidden: Tensor, sigma: float = 0.15, sigma_relative: bool = False) -> Tensor:
    """Gaussian kernel ``exp(-||x_i - x_j||^2 / (2 sigma)^2)`` over rows of ``hidden``.

    With ``sigma_relative`` the bandwidth is ``sigma`` times the median pairwise
    distance of the batch. The median selects one or two distances, and the
    gradient flows through them.
    """
    n = hidden.shape[0]
    if n < 2:
        raise ContractError("kernel_matrix needs at least 2 rows")
    d2 = pairwise_sq_dists(hidden)
    if not sigma_relative:
        return ad.exp(d2 * (-1.0 / (2.0 * sigma) ** 2))
    flat = np.ravel_multi_index(np.triu_indices(n, 1), (n, n))
    order = flat[np.argsort(d2.data.ravel()[flat], kind="stable")]
    mid = len(order) // 2
    picks = order[[mid]] if len(order) % 2 else order[[mid - 1, mid]]
    dists = ad.sqrt(ad.clamp_min(ad.take_rows(ad.reshape(d2, (-1, 1)), picks), EPS * EPS))
    bw = ad.clamp_min(dists.mean() * sigma, EPS)
    return ad.exp(d2 / ((bw * bw) * -4.0))


def _cs_divergence(m: Tensor, q: Tensor) -> Tensor:
    k = m.shape[1]
    nom = m.T @ q @ m
    diag = ad.diagonal(nom)
    col = ad.reshape(diag, (-1, 1))
    dnom = ad.sqrt(ad.clamp_min(col @ col.T, EPS * EPS))
    upper = Tensor(np.triu(np.ones((k, k)), 1))
    return ((nom / dnom) * upper).sum() * (1.0 / k)


def ddc_loss(a: Tensor, hidden: Tensor, sigma: float = 0.15, sigma_relative: bool = False):
    """Return ``(loss, (term1, term2, term3))`` for assignments ``a`` and head features ``hidden``."""
    n, k = a.shape
    if hidden.shape[0] != n:
        raise ContractError(f"ddc_loss: A has {n} rows but hidden has {hidden.shape[0]}")
    q = kernel_matrix(hidden, sigma, sigma_relative)
    term1 = _cs_divergence(a, q)
    upper_n = Tensor(np.triu(np.ones((n, n)), 1))
    term2 = ((a @ a.T) * upper_n).sum() * (2.0 / (n * (n - 1)))
    # distance from each row to each simplex corner: |a|^2 - 2 a_j + 1
    corner_d2 = (a * a).sum(axis=1, keepdims=True) - a * 2.0 + 1.0
    m = ad.exp(-corner_d2)
    term3 = _cs_divergence(m, q)
    return term1 + term2 + term3, (term1, term2, term3)


def total_loss(out, cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Total objective ``contrast + ddc`` for a :class:`~cloven.model.ForwardOutput`."""
    views = len(out.H)
    zero = Tensor(0.0)
    if cfg.asymmetric:
        pairs = [(out.Z_proj, hp, out.A_Z, ah, ("Z", f"H{v}")) for v, (hp, ah) in enumerate(zip(out.H_proj, out.A_H))]
    else:
        pairs = [
            (out.H_proj[i], out.H_proj[j], out.A_H[i], out.A_H[j], (f"H{i}", f"H{j}"))
            for i in range(views) for j in range(i + 1, views)
        ]
    icl, ccl, ent = zero, zero, zero
    for anchor_p, target_p, anchor_a, target_a, tags in pairs:
        if cfg.use_icl:
            icl = icl + _nt_xent(anchor_p, target_p, cfg.tau, tags)
        if cfg.use_ccl:
            ccl = ccl + _cluster_nce(anchor_a, target_a, cfg.tau, tags)
            ent = ent + assignment_entropy(anchor_a, target_a, cfg.entropy_mode)
    contrast = contrast_loss(icl, ccl, [ent], views)
    if cfg.use_ddc:
        ddc, (t1, t2, t3) = ddc_loss(out.A_Z, out.hidden_Z, cfg.sigma, cfg.sigma_relative)
    else:
        ddc, t1, t2, t3 = zero, zero, zero, zero
    total = contrast + ddc
    breakdown = LossBreakdown(
        icl=icl.item(), ccl=ccl.item(), entropy=ent.item(), contrast=contrast.item(),
        ddc_term1=t1.item(), ddc_term2=t2.item(), ddc_term3=t3.item(), ddc=ddc.item(),
        total=total.item(),
    )
    return total, breakdown

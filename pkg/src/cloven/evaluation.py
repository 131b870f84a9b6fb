"""Clustering and classification evaluation of learned representations."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import ContractError, Rng, Tensor
from .data import MultiViewDataset, write_matrix

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(0, n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(0, n)
        else:
            idx = int(rng.choice(n, 1, p=closest / total)[0])
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    labels = None
    history = []
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(centers.shape[0]):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d = _sq_dists(x, centers)
    inertia = float(d[np.arange(len(x)), labels].sum())
    return KMeansResult(labels, centers, inertia, it, history)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, restarts: int = 10) -> KMeansResult:
    """k-means++ seeding and Lloyd iterations; the lowest-inertia restart wins."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ContractError(f"kmeans: need at least k={k} points, got {x.shape[0]}")
    if k < 1:
        raise ContractError("kmeans: k must be >= 1")
    best = None
    for r in range(restarts):
        res = _lloyd(x, _kmeans_pp(x, k, Rng(seed, 0x4B, r)), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ----------------------------------------------------------------------------
# partition metrics


def contingency(y, c) -> np.ndarray:
    """``q[i, j]`` = number of samples with true label ``i`` and predicted label ``j``."""
    y, c = np.asarray(y), np.asarray(c)
    if y.shape != c.shape:
        raise ContractError(f"partitions differ in length: {y.shape} vs {c.shape}")
    _, yi = np.unique(y, return_inverse=True)
    _, ci = np.unique(c, return_inverse=True)
    q = np.zeros((yi.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(q, (yi, ci), 1)
    return q


def hungarian_acc(y, c) -> float:
    """Accuracy under the best one-to-one mapping of clusters to labels."""
    q = contingency(y, c)
    rows, cols = linear_sum_assignment(-q)
    return float(q[rows, cols].sum()) / len(np.asarray(y))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _same_partition(q: np.ndarray) -> bool:
    # every row and column of a contingency table has a nonzero entry, so this
    # means exactly one per row and column: a relabeling
    return q.shape[0] == q.shape[1] == np.count_nonzero(q)


def nmi(y, c) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Two constant partitions score 1.
    """
    q = contingency(y, c)
    if _same_partition(q):
        return 1.0
    n = q.sum()
    hy, hc = _entropy(q.sum(1)), _entropy(q.sum(0))
    nz = q > 0
    outer = np.outer(q.sum(1), q.sum(0))
    mi = float((q[nz] / n * np.log(q[nz] * n / outer[nz])).sum())
    return max(0.0, mi / ((hy + hc) / 2.0))


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(y, c) -> float:
    """Adjusted Rand index from pair counts.

    When the chance-corrected denominator vanishes (e.g. fewer than two
    samples) the result is 1 for identical partitions and 0 otherwise.
    """
    q = contingency(y, c)
    if _same_partition(q):
        return 1.0
    index = _comb2(q).sum()
    sa, sb = _comb2(q.sum(1)).sum(), _comb2(q.sum(0)).sum()
    expected = sa * sb / _comb2(q.sum())
    max_index = (sa + sb) / 2.0
    if max_index == expected:
        return 0.0
    return float((index - expected) / (max_index - expected))


# ----------------------------------------------------------------------------
# classification


@dataclass
class ClassificationReport:
    acc: float
    precision: float
    fscore: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_fscore: list[float]
    confusion: list[list[int]]


def classification_metrics(y_true, y_pred, n_classes: Optional[int] = None,
                           skip: Sequence[int] = ()) -> ClassificationReport:
    """Accuracy plus macro-averaged precision and F-score from the confusion matrix.

    A class with no predicted positives gets precision 0 (with a warning).
    Classes absent from ``y_true`` or listed in ``skip`` are left out of the
    macro averages.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    k = n_classes or int(max(y_true.max(), y_pred.max())) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(0)
    actual = cm.sum(1)
    precision = np.zeros(k)
    recall = np.zeros(k)
    fscore = np.zeros(k)
    for j in range(k):
        if pred_pos[j] == 0:
            if actual[j]:
                warnings.warn(f"class {j} is never predicted; precision set to 0", RuntimeWarning, stacklevel=2)
        else:
            precision[j] = tp[j] / pred_pos[j]
        if actual[j]:
            recall[j] = tp[j] / actual[j]
        if precision[j] + recall[j] > 0:
            fscore[j] = 2 * precision[j] * recall[j] / (precision[j] + recall[j])
    present = actual > 0
    present[list(skip)] = False
    return ClassificationReport(
        acc=float(tp.sum() / cm.sum()),
        precision=float(precision[present].mean()) if present.any() else 0.0,
        fscore=float(fscore[present].mean()) if present.any() else 0.0,
        per_class_precision=precision.tolist(),
        per_class_recall=recall.tolist(),
        per_class_fscore=fscore.tolist(),
        confusion=cm.tolist(),
    )


@dataclass
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-4
    margin: float = 1.0
    seed: int = 0


def _multiclass_hinge(scores: Tensor, y: np.ndarray, margin: float) -> Tensor:
    n, k = scores.shape
    onehot = np.eye(k)[y]
    true_score = (scores * Tensor(onehot)).sum(axis=1, keepdims=True)
    slack = ad.relu(scores - true_score + Tensor(margin * (1.0 - onehot)))
    # Crammer-Singer takes the max violation; summing the violations is the
    # Weston-Watkins variant and keeps the subgradient dense
    return slack.sum(axis=1).mean()


def train_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig):
    """Fit ``W, b`` of a linear multiclass hinge classifier with full-batch Adam."""
    from .train import Adam

    mu, sd = x.mean(0), x.std(0) + 1e-8
    xs = Tensor((x - mu) / sd)
    rng = Rng(cfg.seed, 0x9B0B)
    w = Tensor(rng.normal((x.shape[1], n_classes), 0.01), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = Adam([w, b], lr=cfg.lr)
    for _ in range(cfg.epochs):
        w.grad = b.grad = None
        loss = _multiclass_hinge(xs @ w + b, y, cfg.margin) + (w * w).sum() * cfg.weight_decay
        ad.backward(loss)
        opt.step()

    def predict(z: np.ndarray) -> np.ndarray:
        return (((z - mu) / sd) @ w.data + b.data).argmax(axis=1)

    return predict


def linear_probe(z_train, y_train, z_test, y_test, cfg: Optional[ProbeConfig] = None) -> ClassificationReport:
    cfg = cfg or ProbeConfig()
    y_train, y_test = np.asarray(y_train), np.asarray(y_test)
    k = int(max(y_train.max(), y_test.max())) + 1
    missing = sorted(set(range(k)) - set(np.unique(y_train).tolist()))
    if missing:
        warnings.warn(f"classes {missing} absent from the probe's training split", RuntimeWarning, stacklevel=2)
    predict = train_linear_probe(np.asarray(z_train), y_train, k, cfg)
    return classification_metrics(y_test, predict(np.asarray(z_test)), k, skip=missing)


def split_indices(n: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    order = Rng(seed, 0x5917).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    acc: float
    nmi: float
    ari: float
    head_acc: float
    head_nmi: float
    head_ari: float
    acc_cls: Optional[float] = None
    precision: Optional[float] = None
    fscore: Optional[float] = None
    seed: Optional[int] = None
    epoch: Optional[int] = None
    loss: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [(k, v) for k, v in self.as_dict().items() if v is not None]
        width = max(len(k) for k, _ in rows)
        return "\n".join(
            f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}" for k, v in rows
        )


def clustering_scores(y, c) -> tuple[float, float, float]:
    return hungarian_acc(y, c), nmi(y, c), ari(y, c)


def evaluate_clustering(model, dataset: MultiViewDataset, seed: int = 0, restarts: int = 10,
                        probe: bool = False, probe_cfg: Optional[ProbeConfig] = None) -> MetricsReport:
    """k-means on eval-mode ``Z`` (k = class count) plus the head's argmax assignment."""
    if dataset.labels is None:
        raise ContractError("evaluate_clustering needs ground-truth labels")
    k = dataset.n_classes
    z, _ = model.embed(dataset.views)
    km = kmeans(z, k, seed=seed, restarts=restarts)
    acc, nmi_, ari_ = clustering_scores(dataset.labels, km.labels)
    head = model.assign(dataset.views).argmax(axis=1)
    hacc, hnmi, hari = clustering_scores(dataset.labels, head)
    report = MetricsReport(acc, nmi_, ari_, hacc, hnmi, hari)
    if probe:
        tr, te = split_indices(dataset.n, 0.8, seed)
        cls = linear_probe(z[tr], dataset.labels[tr], z[te], dataset.labels[te], probe_cfg)
        report.acc_cls, report.precision, report.fscore = cls.acc, cls.precision, cls.fscore
    return report


def export_embeddings(model, dataset: MultiViewDataset, directory) -> list[Path]:
    """Write eval-mode ``Z`` and each ``H`` in the dataset binary matrix format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    z, hs = model.embed(dataset.views)
    paths = [directory / "Z.bin"]
    write_matrix(paths[0], z)
    for i, h in enumerate(hs):
        paths.append(directory / f"H{i}.bin")
        write_matrix(paths[-1], h)
    if dataset.labels is not None:
        paths.append(directory / "labels.bin")
        write_matrix(paths[-1], dataset.labels.reshape(-1, 1))
    return paths

"""Server side of the one-shot round.

Data generation from uploaded decoders, per-class centroid filtering of the
synthetic set, parameter-averaged initialisation of the global model, and
the three fusion variants (plain cross-entropy, multi-teacher distillation,
self-distillation against the initial global model).
"""

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import DimensionError, ValidationError, as_float_array, check_labels
from .client import STREAM_FUSION, STREAM_SAMPLING, ClassifierUpdate, derive_rng
from .data import largest_remainder
from .models import MLPClassifier, mlp_backward, mlp_forward


class Variant(str, enum.Enum):
    FEDMHO = "fedmho"
    MD = "md"
    SD = "sd"
    MD_SD = "mdsd"

    @property
    def label(self):
        return {"fedmho": "fedmho", "md": "fedmho_md", "sd": "fedmho_sd",
                "mdsd": "fedmho_mdsd"}[self.value]


@dataclass(frozen=True)
class SyntheticDataset:
    samples: np.ndarray
    labels: np.ndarray
    source_client: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(self.samples[idx], self.labels[idx], self.source_client[idx])


@dataclass(frozen=True)
class FusionConfig:
    variant: Variant = Variant.MD
    lam: float = 0.5
    global_epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 64
    total_synthetic: int = 2000
    retention_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")
        if not 0.0 < self.retention_ratio <= 1.0:
            raise ValidationError("retention_ratio must lie in (0, 1]")
        if self.global_epochs < 0 or self.batch_size < 1 or self.total_synthetic < 1:
            raise ValidationError("global_epochs >= 0, batch_size >= 1, total_synthetic >= 1")


@dataclass
class GlobalModel:
    """The global classifier plus a read-only snapshot of its initial weights."""

    model: MLPClassifier
    initial_params: tuple

    def __post_init__(self):
        frozen = []
        for p in self.initial_params:
            a = np.array(p, dtype=np.float64)
            a.setflags(write=False)
            frozen.append(a)
        self.initial_params = tuple(frozen)

    @classmethod
    def from_params(cls, params):
        dims = [params[0].shape[0]] + [params[i].shape[1] for i in range(0, len(params), 2)]
        model = MLPClassifier(hidden_layer_sizes=tuple(dims[1:-1])).set_weights(params)
        return cls(model, tuple(params))


# --------------------------------------------------------------------------
# Initialisation


def init_global(updates):
    """Unweighted parameter mean of the classifier uploads.

    Summation runs in ascending client-id order so the result does not depend
    on the order of ``updates``.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValidationError("need at least one classifier update")
    shapes = [tuple(p.shape for p in u.params) for u in updates]
    if any(s != shapes[0] for s in shapes):
        raise ValidationError("classifier updates have different architectures")
    n = len(updates)
    mean = []
    for i in range(len(updates[0].params)):
        acc = np.zeros_like(updates[0].params[i], dtype=np.float64)
        for u in updates:
            acc = acc + u.params[i]
        mean.append(acc / n)
    return GlobalModel.from_params(mean)


# --------------------------------------------------------------------------
# Data generation


def split_quota(total, client_ids, weights=None):
    """Samples per generator: equal split with the remainder going to the
    lowest ids, or largest-remainder proportional to ``weights``."""
    ids = sorted(client_ids)
    if weights is None:
        base, extra = divmod(total, len(ids))
        return {cid: base + (1 if i < extra else 0) for i, cid in enumerate(ids)}
    counts = largest_remainder([weights[c] for c in ids], total)
    return dict(zip(ids, (int(c) for c in counts)))


def generate_samples(updates, total, seed, quota="equal"):
    """Draw ``total`` labelled samples from the uploaded decoders.

    Each decoder's share is spread over classes in proportion to its label
    histogram (largest-remainder rounding), and every sample decodes a fresh
    ``z ~ N(0, I)``. ``quota="proportional"`` splits ``total`` by client data
    size instead of equally.
    """
    if total < 1:
        raise ValidationError("total must be >= 1")
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValidationError("need at least one generative update")
    active = []
    for u in updates:
        if np.sum(u.label_counts) <= 0:
            warnings.warn(f"generator {u.client_id} has an empty label histogram; skipped")
        else:
            active.append(u)
    if not active:
        raise ValidationError("no generator has a non-empty label histogram")
    if quota == "equal":
        quotas = split_quota(total, [u.client_id for u in active])
    elif quota == "proportional":
        quotas = split_quota(total, [u.client_id for u in active],
                             {u.client_id: float(np.sum(u.label_counts)) for u in active})
    else:
        raise ValidationError(f"unknown quota rule {quota!r}")

    samples, labels, sources = [], [], []
    for u in active:
        per_class = largest_remainder(u.label_counts, quotas[u.client_id])
        y = np.repeat(np.arange(len(per_class)), per_class)
        if y.size == 0:
            continue
        rng = derive_rng(seed, STREAM_SAMPLING, u.client_id)
        samples.append(u.decoder.sample(y, rng))
        labels.append(y)
        sources.append(np.full(y.size, u.client_id, dtype=np.int64))
    return SyntheticDataset(np.vstack(samples), np.concatenate(labels), np.concatenate(sources))


# --------------------------------------------------------------------------
# Centroid filtering


def removal_count(n, retention_ratio):
    """Number of samples dropped from a class of size ``n``.

    ``floor((1 - R) * n)``; the 1e-9 guard keeps binary-float artefacts such
    as ``(1 - 0.9) * 10 = 0.999...`` from losing a whole sample. At least one
    sample always survives.
    """
    drop = math.floor((1.0 - retention_ratio) * n + 1e-9)
    return min(drop, n - 1) if n > 0 else 0


class SyntheticSampleFilter(BaseEstimator):
    """Per-class distance-to-centroid filter for labelled synthetic samples.

    Each class is summarised by one cluster centre (the single-cluster
    K-means solution, i.e. the class mean of the flattened samples). The
    ``floor((1 - retention_ratio) * n_c)`` samples furthest from their centre
    are dropped; among equal distances the lower row index is kept.

    Use :meth:`fit_resample` to obtain the retained rows; ``support_`` marks
    them in the fitted input.
    """

    def __init__(self, retention_ratio=0.8):
        self.retention_ratio = retention_ratio

    def fit(self, X, y):
        if not 0.0 < self.retention_ratio <= 1.0:
            raise ValidationError("retention_ratio must lie in (0, 1]")
        X = as_float_array(X, ndim=2, name="X")
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] != y.shape[0]:
            raise DimensionError(f"{X.shape[0]} samples but {y.shape[0]} labels")
        self.classes_ = np.unique(y)
        self.centroids_ = np.vstack([X[y == c].mean(axis=0) for c in self.classes_]) \
            if self.classes_.size else np.zeros((0, X.shape[1]))
        self.n_features_in_ = X.shape[1]
        return self

    def distances(self, X, y):
        """Euclidean distance of each row to the centre of its own class."""
        check_is_fitted(self, "centroids_")
        X = as_float_array(X, ndim=2, name="X")
        y = np.asarray(y, dtype=np.int64)
        pos = np.searchsorted(self.classes_, y)
        if np.any(pos >= len(self.classes_)) or np.any(self.classes_[np.minimum(pos, len(self.classes_) - 1)] != y):
            raise ValidationError("labels unseen during fit")
        return np.sqrt(np.sum((X - self.centroids_[pos]) ** 2, axis=1))

    def fit_resample(self, X, y):
        self.fit(X, y)
        X = as_float_array(X, ndim=2, name="X")
        y = np.asarray(y, dtype=np.int64)
        dist = self.distances(X, y)
        keep = np.zeros(len(y), dtype=bool)
        for c in self.classes_:
            idx = np.flatnonzero(y == c)
            n_keep = len(idx) - removal_count(len(idx), self.retention_ratio)
            order = np.lexsort((idx, dist[idx]))
            keep[idx[order[:n_keep]]] = True
        self.support_ = keep
        self.distances_ = dist
        return X[keep], y[keep]


def optimize_samples(ds, retention_ratio):
    """Filter a :class:`SyntheticDataset` class by class, keeping row order."""
    filt = SyntheticSampleFilter(retention_ratio)
    if len(ds) == 0:
        filt.fit(ds.samples.reshape(0, -1), ds.labels)
        return ds
    filt.fit_resample(ds.samples, ds.labels)
    return ds.subset(np.flatnonzero(filt.support_))


# --------------------------------------------------------------------------
# Distillation targets


def _logits(params, X):
    return mlp_forward(list(params), X)[0]


def multi_teacher_log_probs(teachers, X):
    """log softmax of the teachers' mean logits (summed in client-id order)."""
    teachers = sorted(teachers, key=lambda u: u.client_id)
    if not teachers:
        raise ValidationError("need at least one teacher")
    X = as_float_array(X, ndim=2, name="X")
    if teachers[0].params[0].shape[0] != X.shape[1]:
        raise DimensionError("batch width does not match the teachers' input layer")
    acc = np.zeros((X.shape[0], teachers[0].params[-1].shape[0]))
    for t in teachers:
        acc = acc + _logits(t.params, X)
    return nn.log_softmax(acc / len(teachers))


def multi_teacher_distribution(teachers, X):
    """Soft targets of the multi-teacher variant: softmax of the mean logits."""
    return np.exp(multi_teacher_log_probs(teachers, X))


# --------------------------------------------------------------------------
# Fusion


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    ce: float
    kl: float
    test_acc: float = float("nan")


def fuse(global_model, ds, teachers, config, evaluate=None):
    """Train a copy of the global model on the synthetic set.

    Per mini-batch the objective is

    * ``fedmho``: mean cross-entropy,
    * ``md``: ``lam * CE + (1 - lam) * KL(softmax(mean teacher logits) || student)``,
    * ``sd``: ``lam * CE + (1 - lam) * KL(softmax(initial-model logits) || student)``,
    * ``mdsd``: ``lam * CE + (1 - lam) * (KL_md + KL_sd)``,

    with both KL and CE averaged over the batch rows. Teacher targets come
    from frozen weights and are computed once up front. ``evaluate`` is an
    optional callable ``model -> accuracy`` run after every epoch.

    Returns ``(GlobalModel, list[EpochMetrics])``; the input model is untouched.
    """
    if len(ds) == 0:
        raise ValidationError("synthetic dataset is empty")
    variant = config.variant
    model = global_model.model
    n_classes = len(model.classes_)
    X = as_float_array(ds.samples, ndim=2, name="samples")
    y = check_labels(ds.labels, n_classes)

    targets = []
    if variant in (Variant.MD, Variant.MD_SD):
        teachers = [t for t in teachers if isinstance(t, ClassifierUpdate)]
        targets.append(multi_teacher_log_probs(teachers, X))
    if variant in (Variant.SD, Variant.MD_SD):
        targets.append(nn.log_softmax(_logits(global_model.initial_params, X)))
    kl_weight = 0.0 if variant is Variant.FEDMHO else 1.0 - config.lam
    ce_weight = 1.0 if variant is Variant.FEDMHO else config.lam

    params = [nn.Parameter(p) for p in model.get_weights()]
    opt = nn.Adam(params, lr=config.learning_rate)
    rng = derive_rng(config.seed, STREAM_FUSION)
    student = MLPClassifier(hidden_layer_sizes=model.hidden_layer_sizes)
    history = []
    n = len(y)
    for epoch in range(1, config.global_epochs + 1):
        ce_total = kl_total = 0.0
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            logits, caches = mlp_forward(params, X[idx])
            ce, g_ce = nn.cross_entropy(logits, y[idx], reduction="mean")
            kl, g_kl = 0.0, np.zeros_like(logits)
            for t in targets:
                k, g = nn.distillation_kl(t[idx], logits, reduction="mean")
                kl += k
                g_kl = g_kl + g
            if kl_weight == 0.0:
                grad = g_ce if ce_weight == 1.0 else ce_weight * g_ce
            else:
                grad = ce_weight * g_ce + kl_weight * g_kl
            mlp_backward(params, caches, grad)
            opt.step()
            ce_total += ce * len(idx)
            kl_total += kl * len(idx)
        acc = float("nan")
        if evaluate is not None:
            acc = float(evaluate(student.set_weights([p.value for p in params])))
        history.append(EpochMetrics(epoch, ce_total / n, kl_total / n, acc))

    trained = MLPClassifier(hidden_layer_sizes=model.hidden_layer_sizes)
    trained.set_weights([p.value for p in params])
    return GlobalModel(trained, global_model.initial_params), history

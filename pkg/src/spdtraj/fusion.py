"""Combining per-region channels: score-level fusion, kernel fusion and
log-matrix feature concatenation, plus the simplex grid search that picks
fusion weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .spdcore import KernelMatrix, check_psd
from .validation import check_weights

STRATEGIES = ("late_product", "late_weighted_sum", "kernel_weighted_sum", "feature_concat")
WEIGHTED_STRATEGIES = ("late_weighted_sum", "kernel_weighted_sum")


@dataclass(eq=False)
class FusionConfig:
    """A fusion strategy, its ordered channels and their weights.

    Weights are normalized to sum to one on construction. Strategies
    without weights (late_product, feature_concat) carry uniform
    placeholders.
    """

    strategy: str
    channels: tuple
    weights: tuple

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(
                f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        self.channels = tuple(str(c) for c in self.channels)
        if len(self.channels) == 0:
            raise ValidationError("fusion requires at least one channel")
        if len(set(self.channels)) != len(self.channels):
            raise ValidationError("duplicate channel ids")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.channels),):
            raise ValidationError(
                f"expected {len(self.channels)} weights, got shape {w.shape}"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite and non-negative")
        total = float(w.sum())
        if total <= 0:
            raise ValidationError("weights must not all be zero")
        self.weights = tuple(float(v) for v in (w / total))

    @classmethod
    def uniform(cls, strategy: str, channels) -> "FusionConfig":
        channels = tuple(channels)
        return cls(strategy=strategy, channels=channels,
                   weights=tuple(1.0 / len(channels) for _ in channels))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "channels": list(self.channels),
                "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, obj: dict) -> "FusionConfig":
        try:
            return cls(strategy=obj["strategy"], channels=tuple(obj["channels"]),
                       weights=tuple(obj["weights"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed fusion config: {exc}") from exc


def _check_score_stack(channel_scores) -> list:
    mats = [np.atleast_2d(np.asarray(S, dtype=np.float64)) for S in channel_scores]
    if len(mats) == 0:
        raise ValidationError("need at least one channel of scores")
    shape = mats[0].shape
    if any(M.shape != shape for M in mats):
        raise ValidationError("channel score arrays have inconsistent shapes")
    for M in mats:
        if np.any(M < 0) or not np.all(np.isfinite(M)):
            raise ValidationError("scores must be finite and non-negative")
    return mats


def late_product(channel_scores) -> np.ndarray:
    """Element-wise product of per-channel score vectors, renormalized.

    A class scored zero by any channel stays zero. A sample whose product
    vanishes for every class cannot be renormalized and is rejected.
    """
    mats = _check_score_stack(channel_scores)
    P = mats[0].copy()
    for M in mats[1:]:
        P *= M
    sums = P.sum(axis=1, keepdims=True)
    if np.any(sums == 0.0):
        raise NumericalError("product fusion collapsed every class score to zero")
    return P / sums


def late_weighted_sum(channel_scores, weights) -> np.ndarray:
    """Convex combination of per-channel score vectors."""
    mats = _check_score_stack(channel_scores)
    w = check_weights(weights, n_channels=len(mats))
    out = np.zeros_like(mats[0])
    for wk, M in zip(w, mats):
        if wk != 0.0:
            out += wk * M
    return out


def kernel_weighted_sum(kernels, weights) -> KernelMatrix:
    """Convex combination of per-channel Gram matrices.

    A conic combination of PSD matrices is PSD; the check still runs and
    a failure (i.e. a non-PSD input slipped through) raises. A one-hot
    weight vector returns the selected channel's values bit-exactly.
    """
    kernels = list(kernels)
    if len(kernels) == 0:
        raise ValidationError("need at least one channel kernel")
    w = check_weights(weights, n_channels=len(kernels))
    mats = []
    gamma = None
    for K in kernels:
        if isinstance(K, KernelMatrix):
            mats.append(K.values)
            gamma = K.gamma if gamma is None else gamma
        else:
            mats.append(np.asarray(K, dtype=np.float64))
    n = mats[0].shape[0]
    if any(M.shape != (n, n) for M in mats):
        raise ValidationError("channel kernels have inconsistent shapes")
    # skipping zero-weight terms keeps a one-hot selection bit-exact
    terms = [wk * M for wk, M in zip(w, mats) if wk != 0.0]
    fused = terms[0]
    for T in terms[1:]:
        fused = fused + T
    result = check_psd(fused, tol=1e-9)
    if not result.passed:
        raise NumericalError(
            f"fused kernel lost positive semidefiniteness "
            f"(min eigenvalue {result.min_eigenvalue:.6e})"
        )
    return KernelMatrix(values=fused, kind="fused", gamma=gamma,
                        min_eig_estimate=result.min_eigenvalue)


def sym_to_vec(S: np.ndarray) -> np.ndarray:
    """Vectorize a symmetric matrix so the dot product matches the
    Frobenius inner product: diagonal entries, then sqrt(2)-scaled
    upper off-diagonal entries."""
    S = np.asarray(S, dtype=np.float64)
    m = S.shape[0]
    iu = np.triu_indices(m, k=1)
    return np.concatenate([np.diag(S), np.sqrt(2.0) * S[iu]])


def feature_concat(channel_logs) -> np.ndarray:
    """Concatenate per-channel log-matrix vectorizations per sample.

    Parameters
    ----------
    channel_logs : sequence over channels of sequences of (m, m) arrays
        One log matrix per sample per channel; channels may have
        different m, but each channel must be consistent.

    Returns
    -------
    ndarray of shape (n_samples, sum of m_c * (m_c + 1) / 2)
    """
    channel_logs = [list(ch) for ch in channel_logs]
    if len(channel_logs) == 0 or len(channel_logs[0]) == 0:
        raise ValidationError("need at least one channel with at least one sample")
    n = len(channel_logs[0])
    if any(len(ch) != n for ch in channel_logs):
        raise ValidationError("channels disagree on the number of samples")
    blocks = []
    for ch in channel_logs:
        m = np.asarray(ch[0]).shape[0]
        vecs = []
        for S in ch:
            S = np.asarray(S, dtype=np.float64)
            if S.shape != (m, m):
                raise ValidationError("inconsistent matrix sizes within a channel")
            vecs.append(sym_to_vec(S))
        blocks.append(np.stack(vecs))
    return np.hstack(blocks)


def simplex_grid(n_channels: int, step: float = 0.1) -> list:
    """All weight vectors on the simplex with coordinates in multiples of
    ``step``, in lexicographic order."""
    if n_channels < 1:
        raise ValidationError("need at least one channel")
    total = round(1.0 / step)
    if total < 1 or abs(total * step - 1.0) > 1e-9:
        raise ValidationError(f"step {step} must evenly divide 1")
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for k in range(remaining + 1):
            rec(prefix + (k,), remaining - k, slots - 1)

    rec((), total, n_channels)
    return [tuple(k / total for k in comb) for comb in out]


def search_weights(channel_kernels, labels, strategy: str, folds: int,
                   channel_names=None, C: float = 1.0, step: float = 0.1,
                   fold_assignment=None, return_trace: bool = False):
    """Exhaustive simplex grid search for fusion weights.

    Every candidate weight vector is scored by cross-validated accuracy
    of an SVM over the fused representation; ties resolve to the
    lexicographically smallest grid point. For ``late_weighted_sum`` the
    per-channel fold models are trained once and only the score blend is
    swept, so the sweep itself is cheap.

    Parameters
    ----------
    channel_kernels : sequence of KernelMatrix or ndarray
        One Gram matrix per channel over the same samples.
    labels : sequence
        Per-sample labels.
    strategy : str
        One of the weighted strategies.
    folds : int
        Number of cross-validation folds (>= 2). Default fold assignment
        is round-robin by sample index; pass ``fold_assignment`` to
        override (e.g. with subject-independent folds).
    """
    from .svm import KernelSVC  # local import to avoid cycles

    if strategy not in WEIGHTED_STRATEGIES:
        raise ValidationError(
            f"weight search applies to {WEIGHTED_STRATEGIES}, not {strategy!r}"
        )
    kernels = [K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
               for K in channel_kernels]
    if len(kernels) == 0:
        raise ValidationError("need at least one channel kernel")
    n = kernels[0].shape[0]
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValidationError("labels do not match kernel size")
    if folds < 2:
        raise ValidationError(f"need at least 2 folds, got {folds}")
    if fold_assignment is None:
        fold_assignment = np.arange(n) % folds
    else:
        fold_assignment = np.asarray(fold_assignment)
        if fold_assignment.shape != (n,):
            raise ValidationError("fold assignment does not match sample count")
    names = tuple(channel_names) if channel_names is not None else tuple(
        f"ch{k}" for k in range(len(kernels)))
    candidates = simplex_grid(len(kernels), step)
    fold_ids = sorted(set(int(f) for f in fold_assignment))

    splits = []
    for f in fold_ids:
        test = np.flatnonzero(fold_assignment == f)
        train = np.flatnonzero(fold_assignment != f)
        if test.size == 0 or train.size == 0:
            raise ValidationError(f"fold {f} is empty")
        splits.append((train, test))

    best_beta, best_acc = None, -1.0
    trace = []
    if strategy == "late_weighted_sum":
        # Per-channel fold scores are independent of beta: compute once.
        fold_scores = []
        for train, test in splits:
            per_channel = []
            for K in kernels:
                model = KernelSVC(C=C).fit(K[np.ix_(train, train)], y[train])
                per_channel.append(model.predict_proba(K[np.ix_(test, train)]))
            fold_scores.append(per_channel)
        classes = np.unique(y)
        for beta in candidates:
            per_fold = []
            correct = 0
            for (train, test), per_channel in zip(splits, fold_scores):
                fused = late_weighted_sum(per_channel, beta)
                pred = classes[np.argmax(fused, axis=1)]
                ok = int(np.sum(pred == y[test]))
                correct += ok
                per_fold.append(ok / test.size)
            acc = correct / n
            trace.append((beta, tuple(per_fold), acc))
            if acc > best_acc:
                best_beta, best_acc = beta, acc
    else:
        for beta in candidates:
            fused = kernel_weighted_sum(kernels, beta).values
            per_fold = []
            correct = 0
            for train, test in splits:
                model = KernelSVC(C=C).fit(fused[np.ix_(train, train)], y[train])
                pred = model.predict(fused[np.ix_(test, train)])
                ok = int(np.sum(pred == y[test]))
                correct += ok
                per_fold.append(ok / test.size)
            acc = correct / n
            trace.append((beta, tuple(per_fold), acc))
            if acc > best_acc:
                best_beta, best_acc = beta, acc
    config = FusionConfig(strategy=strategy, channels=names, weights=best_beta)
    if return_trace:
        return config, trace
    return config


def write_weight_trace_csv(trace, path) -> None:
    """Weight-search trace as CSV: the weight vector, per-fold accuracies
    and the mean accuracy, one candidate per row."""
    with open(path, "w", encoding="utf-8") as fh:
        for beta, per_fold, acc in trace:
            cells = [f"{b:.17g}" for b in beta] + [f"{a:.17g}" for a in per_fold]
            cells.append(f"{acc:.17g}")
            fh.write(",".join(cells) + "\n")

"""Kernel SVM over precomputed Gram matrices.

One-vs-rest multiclass training on top of a two-variable dual ascent
(SMO with maximal-violating-pair working-set selection). The kernel must
pass the PSD check before any training happens; per-class decision
values map onto a probability simplex through a softmax, which preserves
the argmax.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import NumericalError, ValidationError
from .spdcore import KernelMatrix, check_psd
from .validation import as_float_matrix, check_finite, check_square, check_symmetric, symmetrize


def _kernel_values(K) -> np.ndarray:
    if isinstance(K, KernelMatrix):
        return K.values
    return as_float_matrix(K, "K")


def softmax_scores(decisions: np.ndarray) -> np.ndarray:
    """Row-wise softmax onto the probability simplex (max-shifted for stability)."""
    F = np.atleast_2d(np.asarray(decisions, dtype=np.float64))
    F = F - F.max(axis=1, keepdims=True)
    E = np.exp(F)
    return E / E.sum(axis=1, keepdims=True)


def _smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int):
    """Two-variable dual ascent for one binary problem.

    Minimizes (1/2) a^T Q a - sum(a) subject to 0 <= a <= C and
    y^T a = 0, with Q = (y y^T) * K. Each step picks the pair with the
    largest KKT violation; the gap between the most violating scores is
    the stopping criterion.

    Returns (alpha, bias, iterations).
    """
    n = y.size
    Q = (y[:, None] * y[None, :]) * K
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the dual objective at alpha = 0
    snap = 1e-12 * max(1.0, C)

    def masks():
        pos, neg = y > 0, y < 0
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (neg & (alpha < C)) | (pos & (alpha > 0))
        return up, low

    it = 0
    while True:
        yg = -y * grad
        up, low = masks()
        if not up.any() or not low.any():
            break
        cand_up = np.where(up, yg, -np.inf)
        cand_low = np.where(low, yg, np.inf)
        i = int(np.argmax(cand_up))
        j = int(np.argmin(cand_low))
        gap = yg[i] - yg[j]
        if gap <= tol:
            break
        if it >= max_iter:
            raise NumericalError(
                f"SMO failed to converge within {max_iter} iterations "
                f"(KKT gap {gap:.3e}); the kernel/C combination is ill-conditioned"
            )
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        t = gap / max(eta, 1e-12)
        # keep both multipliers inside the box; movement directions are
        # alpha_i += y_i * t and alpha_j -= y_j * t with t > 0
        cap_i = C - alpha[i] if y[i] > 0 else alpha[i]
        cap_j = alpha[j] if y[j] > 0 else C - alpha[j]
        t = min(t, cap_i, cap_j)
        d_i = y[i] * t
        d_j = -y[j] * t
        alpha[i] += d_i
        alpha[j] += d_j
        for k in (i, j):
            if abs(alpha[k]) < snap:
                alpha[k] = 0.0
            elif abs(alpha[k] - C) < snap:
                alpha[k] = C
        grad += Q[:, i] * d_i + Q[:, j] * d_j
        it += 1
    # for a free support vector, -y_i * grad_i equals the bias exactly
    yg = -y * grad
    up, low = masks()
    hi = float(yg[up].max()) if up.any() else 0.0
    lo = float(yg[low].min()) if low.any() else 0.0
    bias = (hi + lo) / 2.0
    return alpha, bias, it


class KernelSVC(BaseEstimator, ClassifierMixin):
    """Multiclass SVM on a precomputed kernel, one binary problem per class.

    Parameters
    ----------
    C : float
        Box constraint on the dual variables.
    kkt_tol : float
        Stopping tolerance on the KKT violation gap.
    max_iter : int
        Hard cap on SMO iterations per binary problem.
    psd_tol : float
        Relative tolerance of the PSD acceptance check run on the
        training kernel; a failing kernel is refused.

    Attributes
    ----------
    classes_ : ndarray
        Class labels in ascending order; score columns follow this order.
    support_ : list of ndarray
        Per-class indices of the support vectors in the training set.
    dual_coef_ : list of ndarray
        Per-class products alpha_i * y_i at the support indices.
    intercept_ : ndarray
        Per-class bias terms.
    """

    def __init__(self, C: float = 1.0, kkt_tol: float = 1e-3,
                 max_iter: int = 100_000, psd_tol: float = 1e-6):
        self.C = C
        self.kkt_tol = kkt_tol
        self.max_iter = max_iter
        self.psd_tol = psd_tol

    def fit(self, K, y, sample_ids=None):
        if self.C <= 0:
            raise ValidationError(f"C must be positive, got {self.C}")
        values = _kernel_values(K)
        check_square(values, "K")
        check_symmetric(values, tol=1e-8, name="K")
        values = symmetrize(values)
        y = np.asarray(y)
        if y.shape != (values.shape[0],):
            raise ValidationError(
                f"labels shape {y.shape} does not match kernel size {values.shape[0]}"
            )
        result = check_psd(values, tol=self.psd_tol)
        if not result.passed:
            raise NumericalError(
                f"training kernel is not positive semidefinite "
                f"(min eigenvalue {result.min_eigenvalue:.6e}); refusing to train"
            )
        classes = np.unique(y)
        if classes.size < 2:
            raise ValidationError("training labels are all identical; need >= 2 classes")
        self.classes_ = classes
        self.n_train_ = values.shape[0]
        self.sample_ids_ = None if sample_ids is None else list(sample_ids)
        if self.sample_ids_ is not None and len(self.sample_ids_) != self.n_train_:
            raise ValidationError("sample_ids length does not match kernel size")
        self.support_ = []
        self.dual_coef_ = []
        intercepts = []
        self.n_iter_ = []
        for c in classes:
            y_pm = np.where(y == c, 1.0, -1.0)
            alpha, bias, iters = _smo_solve(values, y_pm, float(self.C),
                                            float(self.kkt_tol), int(self.max_iter))
            sv = np.flatnonzero(alpha > 1e-12)
            self.support_.append(sv)
            self.dual_coef_.append(alpha[sv] * y_pm[sv])
            intercepts.append(bias)
            self.n_iter_.append(iters)
        self.intercept_ = np.asarray(intercepts)
        return self

    def _check_fitted(self):
        if not hasattr(self, "classes_"):
            raise ValidationError("this estimator is not fitted yet")

    def _check_columns(self, K_test: np.ndarray, sample_ids=None):
        if K_test.shape[1] != self.n_train_:
            raise ValidationError(
                f"kernel has {K_test.shape[1]} columns but the model was "
                f"trained on {self.n_train_} samples"
            )
        if sample_ids is not None and self.sample_ids_ is not None:
            if list(sample_ids) != self.sample_ids_:
                raise ValidationError("kernel columns are not aligned with the training ids")

    def decision_function(self, K_test, sample_ids=None) -> np.ndarray:
        """Raw per-class decision values, shape (n_test, n_classes)."""
        self._check_fitted()
        values = np.atleast_2d(_kernel_values(K_test))
        check_finite(values, "K_test")
        self._check_columns(values, sample_ids)
        out = np.empty((values.shape[0], self.classes_.size))
        for k in range(self.classes_.size):
            sv, coef = self.support_[k], self.dual_coef_[k]
            out[:, k] = values[:, sv] @ coef + self.intercept_[k]
        return out

    def predict_proba(self, K_test, sample_ids=None) -> np.ndarray:
        """Score vectors on the simplex (softmax of the decision values)."""
        return softmax_scores(self.decision_function(K_test, sample_ids))

    def predict(self, K_test, sample_ids=None) -> np.ndarray:
        """Predicted labels; ties resolve to the lowest class index."""
        F = self.decision_function(K_test, sample_ids)
        return self.classes_[np.argmax(F, axis=1)]


class PpfSVC(KernelSVC):
    """SVM over pairwise-proximity embeddings.

    Each trajectory is represented by its row of dissimilarities to the
    training set; training uses the linear kernel on those rows,
    K = G G^T, which is positive semidefinite by construction. Predict-
    time inputs are proximity rows against the same training set, in the
    same column order.
    """

    def fit(self, proximity, y, sample_ids=None):
        G = as_float_matrix(proximity, "proximity")
        check_square(G, "proximity")
        check_finite(G, "proximity")
        self.proximity_train_ = G.copy()
        K = symmetrize(G @ G.T)
        return super().fit(K, y, sample_ids=sample_ids)

    def _test_kernel(self, proximity_test) -> np.ndarray:
        self._check_fitted()
        G = np.atleast_2d(as_float_matrix(proximity_test, "proximity_test"))
        if G.shape[1] != self.proximity_train_.shape[1]:
            raise ValidationError(
                f"proximity rows have width {G.shape[1]} but the model "
                f"expects {self.proximity_train_.shape[1]}"
            )
        return G @ self.proximity_train_.T

    def decision_function(self, proximity_test, sample_ids=None) -> np.ndarray:
        return super().decision_function(self._test_kernel(proximity_test), sample_ids)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _round17(x: float) -> float:
    # 17 significant digits round-trip float64 exactly
    return float(f"{float(x):.17g}")


def _listify(a) -> list:
    return [_round17(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]


def model_to_dict(model: KernelSVC, kernel_info: dict | None = None) -> dict:
    model._check_fitted()
    out = {
        "type": type(model).__name__,
        "params": {"C": _round17(model.C), "kkt_tol": _round17(model.kkt_tol),
                   "max_iter": int(model.max_iter), "psd_tol": _round17(model.psd_tol)},
        "classes": [str(c) for c in model.classes_],
        "n_train": int(model.n_train_),
        "sample_ids": model.sample_ids_,
        "problems": [
            {
                "class": str(c),
                "support": [int(i) for i in model.support_[k]],
                "dual_coef": _listify(model.dual_coef_[k]),
                "intercept": _round17(model.intercept_[k]),
            }
            for k, c in enumerate(model.classes_)
        ],
        "kernel": kernel_info or {},
    }
    if isinstance(model, PpfSVC):
        out["proximity_train"] = [_listify(row) for row in model.proximity_train_]
    return out


def model_from_dict(obj: dict) -> KernelSVC:
    try:
        cls = {"KernelSVC": KernelSVC, "PpfSVC": PpfSVC}[obj["type"]]
        model = cls(**obj["params"])
        model.classes_ = np.asarray(obj["classes"])
        model.n_train_ = int(obj["n_train"])
        model.sample_ids_ = obj.get("sample_ids")
        model.support_ = [np.asarray(p["support"], dtype=np.int64) for p in obj["problems"]]
        model.dual_coef_ = [np.asarray(p["dual_coef"], dtype=np.float64) for p in obj["problems"]]
        model.intercept_ = np.asarray([p["intercept"] for p in obj["problems"]], dtype=np.float64)
        if obj["type"] == "PpfSVC":
            model.proximity_train_ = np.asarray(obj["proximity_train"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model record: {exc}") from exc
    return model


def save_model(model: KernelSVC, path, kernel_info: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, kernel_info), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> KernelSVC:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))

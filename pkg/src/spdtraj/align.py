"""Trajectories of SPD points and the alignment machinery over them.

An alignment of two trajectories is a monotone lattice path: it starts at
(1, 1), ends at (L1, L2), and each step increments the first index, the
second, or both by exactly one. Two dissimilarity notions are built on
these paths:

* mean-normalized dynamic time warping, minimizing sum-cost / path-length
  exactly via a path-length-stratified dynamic program, and
* the global alignment kernel, the sum over all paths of the product of
  local kernel values, accumulated in the log domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .parallel import thread_map
from .spdcore import KernelMatrix, SpdPoint, check_psd, lerm_sq_distance_matrix, symmetrize
from .validation import check_gamma

# Enumeration is exponential; beyond this combined length it is refused.
MAX_ENUMERATION_LENGTH = 14

# Below this log value, exp() leaves the double-precision normal range.
_LOG_FLOOR = -700.0

_NEG_INF = float("-inf")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """An ordered sequence of same-dimension SPD points."""

    points: tuple
    sample_id: str = ""
    region_id: str | None = None

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValidationError("trajectory must contain at least one point")
        dim = self.points[0].dim
        if any(p.dim != dim for p in self.points):
            raise ValidationError("trajectory points have inconsistent dimensions")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points[0].dim


@dataclass(frozen=True)
class Alignment:
    """A monotone lattice path as a tuple of 1-based index pairs."""

    pairs: tuple

    def __post_init__(self):
        if len(self.pairs) == 0:
            raise ValidationError("alignment must contain at least one pair")
        if self.pairs[0] != (1, 1):
            raise ValidationError(f"alignment must start at (1, 1), got {self.pairs[0]}")
        for (a, b), (c, d) in zip(self.pairs, self.pairs[1:]):
            step = (c - a, d - b)
            if step not in ((1, 0), (0, 1), (1, 1)):
                raise ValidationError(f"invalid alignment step {step} at pair ({a}, {b})")

    def __len__(self) -> int:
        return len(self.pairs)

    def check_endpoints(self, len1: int, len2: int) -> "Alignment":
        if self.pairs[-1] != (len1, len2):
            raise ValidationError(
                f"alignment must end at ({len1}, {len2}), got {self.pairs[-1]}"
            )
        return self

    def to_index_lists(self) -> list:
        """JSON-friendly [[i, j], ...] form."""
        return [[i, j] for i, j in self.pairs]

    def to_json(self) -> str:
        """The path as a JSON array of index pairs, for debug exports."""
        return json.dumps(self.to_index_lists())


def build_trajectory(descriptors, sample_id: str = "",
                     region_id: str | None = None) -> Trajectory:
    """Lift a sequence of covariance descriptors onto the manifold.

    Forces each descriptor's log; a non-positive-definite descriptor
    raises here rather than later inside a kernel computation.
    """
    points = tuple(SpdPoint(matrix=d.matrix, log_matrix=d.log_matrix) for d in descriptors)
    return Trajectory(points=points, sample_id=sample_id, region_id=region_id)


def resample_trajectory(traj: Trajectory, target_len: int) -> Trajectory:
    """Uniform index resampling to exactly ``target_len`` points.

    Output point k is input point round(k * (L - 1) / (target_len - 1)),
    so endpoints are always preserved. A single-point target takes the
    first point; a single-point source repeats.
    """
    if target_len < 1:
        raise ValidationError(f"target length must be >= 1, got {target_len}")
    L = len(traj)
    if target_len == 1:
        idx = [0]
    elif L == 1:
        idx = [0] * target_len
    else:
        scale = (L - 1) / (target_len - 1)
        idx = [int(math.floor(k * scale + 0.5)) for k in range(target_len)]
    points = tuple(traj.points[i] for i in idx)
    return Trajectory(points=points, sample_id=traj.sample_id, region_id=traj.region_id)


def delannoy_number(a: int, b: int) -> int:
    """Number of monotone lattice paths from (0, 0) to (a, b) with unit steps."""
    if a < 0 or b < 0:
        raise ValidationError("indices must be non-negative")
    row = [1] * (b + 1)
    for _ in range(a):
        new = [1] * (b + 1)
        for j in range(1, b + 1):
            new[j] = new[j - 1] + row[j] + row[j - 1]
        row = new
    return row[b]


def enumerate_alignments(len1: int, len2: int) -> list:
    """All alignments of trajectories of lengths len1, len2.

    Exponential in len1 + len2 and therefore refused beyond
    ``MAX_ENUMERATION_LENGTH``; intended as the ground-truth oracle for
    the dynamic programs on tiny instances.
    """
    if len1 < 1 or len2 < 1:
        raise ValidationError("trajectory lengths must be >= 1")
    if len1 + len2 > MAX_ENUMERATION_LENGTH:
        raise ValidationError(
            f"enumeration refused for len1 + len2 = {len1 + len2} > "
            f"{MAX_ENUMERATION_LENGTH}; use the dynamic programs instead"
        )
    out = []
    stack = [((1, 1),)]
    while stack:
        path = stack.pop()
        i, j = path[-1]
        if (i, j) == (len1, len2):
            out.append(Alignment(pairs=path))
            continue
        for di, dj in ((1, 1), (0, 1), (1, 0)):
            ni, nj = i + di, j + dj
            if ni <= len1 and nj <= len2:
                stack.append(path + ((ni, nj),))
    out.sort(key=lambda a: a.pairs)
    return out


def trajectory_sq_distances(t1: Trajectory, t2: Trajectory) -> np.ndarray:
    """Pairwise squared log-Euclidean distances, shape (len1, len2)."""
    if t1.dim != t2.dim:
        raise ValidationError(f"trajectory dimension mismatch: {t1.dim} vs {t2.dim}")
    if t1 is t2:
        # same-set path gives an exactly zero diagonal, so self-comparisons
        # (dtw of a trajectory with itself) come out exactly zero
        return lerm_sq_distance_matrix(t1.points)
    return lerm_sq_distance_matrix(t1.points, t2.points)


def alignment_cost(t1: Trajectory, t2: Trajectory, alignment: Alignment) -> float:
    """Sum of pointwise distances along an alignment path."""
    alignment.check_endpoints(len(t1), len(t2))
    d = np.sqrt(trajectory_sq_distances(t1, t2))
    return float(sum(d[i - 1, j - 1] for i, j in alignment.pairs))


# ---------------------------------------------------------------------------
# Dynamic time warping
# ---------------------------------------------------------------------------

def dtw_dissimilarity(t1: Trajectory, t2: Trajectory):
    """Minimum mean-per-step alignment cost, with its minimizing path.

    The dynamic program stratifies states by path length: F[q][i, j] is
    the cheapest cumulative cost of reaching (i, j) in exactly q steps.
    Minimizing F[q][L1, L2] / q over q is therefore exact, matching a
    brute-force search over all alignments.

    Returns
    -------
    (float, Alignment)
        The mean-normalized cost and one optimal path (ties broken
        toward shorter paths, then diagonal steps first).
    """
    d = np.sqrt(trajectory_sq_distances(t1, t2))
    L1, L2 = d.shape
    q_max = L1 + L2 - 1
    inf = np.inf
    # layers[q] is F for paths of length q+1; back[q] codes the predecessor
    layers = np.full((q_max, L1, L2), inf)
    back = np.zeros((q_max, L1, L2), dtype=np.int8)
    layers[0, 0, 0] = d[0, 0]
    for q in range(1, q_max):
        prev = layers[q - 1]
        diag = np.full((L1, L2), inf)
        up = np.full((L1, L2), inf)
        left = np.full((L1, L2), inf)
        diag[1:, 1:] = prev[:-1, :-1]
        up[1:, :] = prev[:-1, :]
        left[:, 1:] = prev[:, :-1]
        stacked = np.stack([diag, up, left])
        choice = np.argmin(stacked, axis=0)
        best = np.min(stacked, axis=0)
        layers[q] = best + d
        layers[q, best == inf] = inf
        back[q] = choice
    q_lo = max(L1, L2) - 1
    finals = layers[q_lo:q_max, L1 - 1, L2 - 1]
    means = finals / np.arange(q_lo + 1, q_max + 1)
    k = int(np.argmin(means))
    q_star = q_lo + k
    # backtrack
    steps = ((-1, -1), (-1, 0), (0, -1))
    i, j, q = L1 - 1, L2 - 1, q_star
    rev = [(i + 1, j + 1)]
    while q > 0:
        di, dj = steps[back[q, i, j]]
        i, j, q = i + di, j + dj, q - 1
        rev.append((i + 1, j + 1))
    path = Alignment(pairs=tuple(reversed(rev)))
    return float(means[k]), path


def dtw_proximity_matrix(train, queries=None) -> np.ndarray:
    """Rows of DTW dissimilarities against a fixed training set.

    Row i of the result embeds trajectory ``queries[i]`` as its
    dissimilarity to every training trajectory. With ``queries`` omitted
    the training set is compared against itself: the diagonal is zero and,
    the step set and pointwise distance both being symmetric, only the
    upper triangle is computed.
    """
    train = list(train)
    if len(train) == 0:
        raise ValidationError("training set must be non-empty")
    if queries is None:
        n = len(train)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        vals = thread_map(lambda ij: dtw_dissimilarity(train[ij[0]], train[ij[1]])[0], pairs)
        G = np.zeros((n, n))
        for (i, j), v in zip(pairs, vals):
            G[i, j] = v
            G[j, i] = v
        return G
    queries = list(queries)
    cells = [(i, j) for i in range(len(queries)) for j in range(len(train))]
    vals = thread_map(lambda ij: dtw_dissimilarity(queries[ij[0]], train[ij[1]])[0], cells)
    G = np.empty((len(queries), len(train)))
    for (i, j), v in zip(cells, vals):
        G[i, j] = v
    return G


# ---------------------------------------------------------------------------
# Global alignment kernel
# ---------------------------------------------------------------------------

def _local_log_kernel(D2: np.ndarray, gamma: float, use_ratio_kernel: bool) -> np.ndarray:
    logk = -gamma * D2
    if use_ratio_kernel:
        # log(k / (1 + k)) = log k - log1p(k); k <= 1 so exp never overflows
        logk = logk - np.log1p(np.exp(logk))
    return logk


def _gak_log_from_sq(D2: np.ndarray, gamma: float, use_ratio_kernel: bool) -> float:
    logk = _local_log_kernel(D2, gamma, use_ratio_kernel)
    L1, L2 = logk.shape
    # prev[j], cur[j] hold log M over a virtual (L1+1) x (L2+1) grid with
    # log M[0, 0] = 0 and -inf borders.
    prev = [0.0] + [_NEG_INF] * L2
    log = math.log
    exp = math.exp
    for i in range(1, L1 + 1):
        row = logk[i - 1]
        cur = [_NEG_INF] * (L2 + 1)
        for j in range(1, L2 + 1):
            a = prev[j]        # (i-1, j)
            b = cur[j - 1]     # (i, j-1)
            c = prev[j - 1]    # (i-1, j-1)
            hi = a if a >= b else b
            if c > hi:
                hi = c
            if hi == _NEG_INF:
                continue
            s = exp(a - hi) + exp(b - hi) + exp(c - hi)
            cur[j] = row[j - 1] + hi + log(s)
        prev = cur
    return prev[L2]


def gak_log_similarity(t1: Trajectory, t2: Trajectory, gamma: float,
                       use_ratio_kernel: bool = False) -> float:
    """Natural log of the global alignment kernel value.

    The kernel sums, over every alignment path, the product of local
    kernel values k = exp(-gamma * d^2) (or k / (1 + k) when
    ``use_ratio_kernel`` is set, which carries a positive-definiteness
    guarantee for the resulting Gram). Recursion per cell:
    M[i, j] = k(x_i, y_j) * (M[i-1, j] + M[i, j-1] + M[i-1, j-1]),
    accumulated here entirely in the log domain via log-sum-exp.
    """
    check_gamma(gamma)
    return _gak_log_from_sq(trajectory_sq_distances(t1, t2), gamma, use_ratio_kernel)


def gak_similarity(t1: Trajectory, t2: Trajectory, gamma: float,
                   use_ratio_kernel: bool = False) -> float:
    """Global alignment kernel value (always > 0).

    Raises
    ------
    NumericalError
        If the value underflows double precision; use
        ``gak_log_similarity`` in that regime.
    """
    log_val = gak_log_similarity(t1, t2, gamma, use_ratio_kernel)
    val = math.exp(log_val) if log_val < 700 else math.inf
    if val == 0.0 or not math.isfinite(val):
        raise NumericalError(
            f"global alignment kernel value exp({log_val:.6g}) leaves the "
            f"double-precision range; use gak_log_similarity instead"
        )
    return val


def gak_pair_sq(trajectories) -> list:
    """Upper-triangle (i <= j) pairwise squared-distance blocks.

    A reusable cache for sweeping ``gak_gram`` over several gamma values
    without recomputing point distances.
    """
    trajectories = list(trajectories)
    n = len(trajectories)
    if n == 0:
        raise ValidationError("need at least one trajectory")
    dim = trajectories[0].dim
    if any(t.dim != dim for t in trajectories):
        raise ValidationError("trajectories have inconsistent dimensions")
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    return thread_map(
        lambda ij: trajectory_sq_distances(trajectories[ij[0]], trajectories[ij[1]]),
        pairs,
    )


def gak_gram(trajectories, gamma: float, use_ratio_kernel: bool = False,
             normalize: bool = False, pair_sq=None) -> KernelMatrix:
    """Global-alignment Gram matrix over a set of trajectories.

    Parameters
    ----------
    trajectories : sequence of Trajectory
    gamma : float
        Local kernel width.
    use_ratio_kernel : bool
        Replace the local kernel k by k / (1 + k), which guarantees the
        Gram is positive definite.
    normalize : bool
        Geometric-mean normalization K_ij / sqrt(K_ii * K_jj), applied in
        the log domain; the diagonal becomes exactly one. Off by default.
    pair_sq : list, optional
        Output of ``gak_pair_sq`` over the same trajectories, so repeated
        calls with different gamma skip the distance pass.

    Notes
    -----
    Values are accumulated in the log domain. If any raw entry would
    leave the double-precision range, every entry is uniformly rescaled
    to exp(log K - max log K) and the shift is recorded on the result's
    ``log_shift``; positive rescaling preserves semidefiniteness. The PSD
    check always runs and its smallest eigenvalue is recorded.
    """
    trajectories = list(trajectories)
    n = len(trajectories)
    if n == 0:
        raise ValidationError("need at least one trajectory")
    check_gamma(gamma)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    if pair_sq is None:
        pair_sq = gak_pair_sq(trajectories)
    elif len(pair_sq) != len(pairs):
        raise ValidationError("pair_sq does not match the trajectory count")
    vals = thread_map(
        lambda kij: _gak_log_from_sq(pair_sq[kij[0]], gamma, use_ratio_kernel),
        list(enumerate(pairs)),
    )
    logK = np.empty((n, n))
    for (i, j), v in zip(pairs, vals):
        logK[i, j] = v
        logK[j, i] = v
    if normalize:
        half = 0.5 * np.diag(logK)
        logK = logK - half[:, None] - half[None, :]
    shift = 0.0
    if float(logK.min()) < _LOG_FLOOR or float(logK.max()) > -_LOG_FLOOR:
        shift = float(logK.max())
    K = np.exp(logK - shift) if shift != 0.0 else np.exp(logK)
    K = symmetrize(K)
    if normalize:
        np.fill_diagonal(K, 1.0)
    result = check_psd(K, tol=1e-6)
    return KernelMatrix(values=K, kind="gak", gamma=float(gamma),
                        min_eig_estimate=result.min_eigenvalue, log_shift=shift)


def gak_cross_log(queries, train, gamma: float,
                  use_ratio_kernel: bool = False) -> np.ndarray:
    """Log kernel values between query and training trajectories."""
    queries = list(queries)
    train = list(train)
    if len(train) == 0:
        raise ValidationError("training set must be non-empty")
    check_gamma(gamma)
    cells = [(i, j) for i in range(len(queries)) for j in range(len(train))]

    def one(ij):
        i, j = ij
        D2 = trajectory_sq_distances(queries[i], train[j])
        return _gak_log_from_sq(D2, gamma, use_ratio_kernel)

    vals = thread_map(one, cells)
    out = np.empty((len(queries), len(train)))
    for (i, j), v in zip(cells, vals):
        out[i, j] = v
    return out

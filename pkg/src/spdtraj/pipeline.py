"""Cross-validated training and prediction pipelines.

Ties the layers together: manifests are turned into per-channel
representations (single descriptors, peak-frame sets, or trajectories),
Gram matrices are built per channel, hyperparameters are picked by grid
search on inner folds, and subject-independent outer folds produce the
evaluation report. Fixed configuration in, byte-identical report out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import align, covdesc, fusion, spdcore, svm, tensorio
from .errors import NumericalError, ValidationError
from .parallel import thread_map

MODES = ("static", "dynamic")
ALIGNMENTS = ("gak", "dtw_ppf")
STATIC_SCORINGS = ("mean_distance", "pooled", "per_frame")

DEFAULT_GAMMA_GRID = tuple(2.0 ** e for e in range(-10, 5, 2))
DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0)

_CONCAT = "__concat__"

# invocation plumbing, excluded from the serialized config echo so reports
# do not depend on where files happen to live
_PATH_FIELDS = ("manifest", "out_dir")


@dataclass
class RunConfig:
    """Everything a training run depends on.

    ``static_scoring`` picks how a multi-frame sample is scored in static
    mode: ``mean_distance`` keeps one unit per video and measures videos
    by the mean of positionally paired peak-frame distances, ``pooled``
    collapses the peak frames into a single covariance, and ``per_frame``
    treats every peak frame as an independent sample.
    """

    mode: str = "static"
    alignment: str = "gak"
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    c_grid: tuple = DEFAULT_C_GRID
    epsilon: float = covdesc.DEFAULT_EPSILON
    l_target: int = 15
    fusion_strategy: str = "kernel_weighted_sum"
    channels: tuple | None = None
    fusion_weights: tuple | None = None
    beta_step: float = 0.1
    folds: int = 10
    inner_folds: int = 3
    seed: int = 0
    static_scoring: str = "mean_distance"
    peak_frames: int = 3
    use_ratio_kernel: bool = False
    gak_normalize: bool = False
    resize_to: tuple | None = None
    manifest: str | None = None
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alignment not in ALIGNMENTS:
            raise ValidationError(f"alignment must be one of {ALIGNMENTS}, got {self.alignment!r}")
        if self.static_scoring not in STATIC_SCORINGS:
            raise ValidationError(
                f"static_scoring must be one of {STATIC_SCORINGS}, got {self.static_scoring!r}")
        if self.fusion_strategy not in fusion.STRATEGIES:
            raise ValidationError(f"unknown fusion strategy {self.fusion_strategy!r}")
        if len(self.gamma_grid) == 0 or any(g <= 0 for g in self.gamma_grid):
            raise ValidationError("gamma_grid must be non-empty and positive")
        if len(self.c_grid) == 0 or any(c <= 0 for c in self.c_grid):
            raise ValidationError("c_grid must be non-empty and positive")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")
        if self.l_target < 1:
            raise ValidationError("l_target must be >= 1")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.inner_folds < 2:
            raise ValidationError("inner_folds must be >= 2")
        if self.peak_frames < 1:
            raise ValidationError("peak_frames must be >= 1")
        if self.channels is not None and len(self.channels) == 0:
            raise ValidationError("channels must be omitted or non-empty")
        if self.fusion_weights is not None \
                and self.fusion_strategy not in fusion.WEIGHTED_STRATEGIES:
            raise ValidationError(
                f"fusion_weights only applies to {fusion.WEIGHTED_STRATEGIES}")
        if self.resize_to is not None:
            rw, rh = self.resize_to
            if rw < 1 or rh < 1:
                raise ValidationError("resize_to dimensions must be >= 1")
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name in _PATH_FIELDS:
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in obj.items():
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ValidationError(f"config {path} must hold a JSON object")
        return cls.from_dict(obj)

    def merged(self, overrides: dict) -> "RunConfig":
        """A copy with non-None override values applied."""
        clean = {k: (tuple(v) if isinstance(v, list) else v)
                 for k, v in overrides.items() if v is not None}
        return replace(self, **clean).validate()


def assign_subject_folds(subject_ids, n_folds: int) -> np.ndarray:
    """Fold index per sample, assigning whole subjects round-robin.

    Subjects are sorted ascending by id and dealt to folds in order, so
    no subject ever spans a train/test boundary. Every fold must end up
    non-empty.
    """
    subject_ids = list(subject_ids)
    if n_folds < 2:
        raise ValidationError(f"need at least 2 folds, got {n_folds}")
    subjects = sorted(set(subject_ids))
    fold_of = {s: k % n_folds for k, s in enumerate(subjects)}
    assign = np.asarray([fold_of[s] for s in subject_ids], dtype=np.int64)
    for f in range(n_folds):
        if not np.any(assign == f):
            raise ValidationError(
                f"fold {f} is empty: {len(subjects)} subject(s) cannot fill {n_folds} folds")
    # subject independence is structural; keep the explicit check anyway
    for f in range(n_folds):
        test_subj = {s for s, a in zip(subject_ids, assign) if a == f}
        train_subj = {s for s, a in zip(subject_ids, assign) if a != f}
        if test_subj & train_subj:
            raise AssertionError("subject leaked across a fold boundary")
    return assign


@dataclass(eq=False)
class EvalReport:
    """Cross-validation outcome; serializes deterministically.

    Wall-clock time is kept on the object for display but never
    serialized, so identical runs produce identical report files.
    """

    labels: tuple
    mode: str
    alignment: str | None
    n_samples: int
    folds: int
    fold_accuracies: list
    overall_accuracy: float
    confusion: list          # rows = true label, cols = predicted
    chosen: dict             # final hyperparameters
    per_fold_chosen: list
    predictions: list        # dicts: sample_id, subject_id, true, predicted, fold
    config: dict
    elapsed_seconds: float | None = None

    def to_json(self) -> str:
        obj = {
            "labels": list(self.labels),
            "mode": self.mode,
            "alignment": self.alignment,
            "n_samples": self.n_samples,
            "folds": self.folds,
            "fold_accuracies": self.fold_accuracies,
            "overall_accuracy": self.overall_accuracy,
            "confusion": self.confusion,
            "chosen": self.chosen,
            "per_fold_chosen": self.per_fold_chosen,
            "predictions": self.predictions,
            "config": self.config,
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_file(cls, path) -> "EvalReport":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed eval report {path}: {exc}") from exc
        try:
            return cls(labels=tuple(obj["labels"]), mode=obj["mode"],
                       alignment=obj["alignment"], n_samples=obj["n_samples"],
                       folds=obj["folds"], fold_accuracies=obj["fold_accuracies"],
                       overall_accuracy=obj["overall_accuracy"],
                       confusion=obj["confusion"], chosen=obj["chosen"],
                       per_fold_chosen=obj["per_fold_chosen"],
                       predictions=obj["predictions"], config=obj["config"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed eval report {path}: {exc}") from exc


def confusion_matrix(true_labels, predicted_labels, label_order) -> np.ndarray:
    order = {lab: k for k, lab in enumerate(label_order)}
    M = np.zeros((len(label_order), len(label_order)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in order or p not in order:
            raise ValidationError(f"label {t!r}/{p!r} outside the declared label set")
        M[order[t], order[p]] += 1
    return M


# ---------------------------------------------------------------------------
# Units: manifests -> per-channel representations
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Units:
    """Per-unit metadata plus per-channel representations.

    A unit is the thing the classifier sees: one video (or one peak frame
    in per_frame scoring) in static mode, one trajectory in dynamic mode.
    ``reps[channel]`` is a list over units of SpdPoint, list of SpdPoint,
    or Trajectory, depending on the mode and scoring.
    """

    ids: list
    subjects: list
    labels: list
    channels: tuple
    reps: dict

    @property
    def n(self) -> int:
        return len(self.ids)


def _load_masks(entry, cache: dict) -> list:
    masks = []
    for p in entry.mask_paths:
        key = str(p)
        if key not in cache:
            cache[key] = tensorio.read_mask(p)
        masks.append(cache[key])
    return masks


def resolve_channels(manifest: tensorio.DatasetManifest, config: RunConfig) -> tuple:
    """Channel set for a run: the global channel plus consistent mask regions."""
    cache: dict = {}
    region_sets = []
    for entry in manifest.entries:
        masks = _load_masks(entry, cache)
        ids = tuple(sorted(m.region_id for m in masks))
        if len(set(ids)) != len(ids):
            raise ValidationError(f"entry {entry.sample_id!r}: duplicate region ids")
        region_sets.append(ids)
    if region_sets and len(set(region_sets)) > 1:
        raise ValidationError("entries disagree on their region-mask sets")
    available = (covdesc.GLOBAL_CHANNEL,) + (region_sets[0] if region_sets else ())
    if config.channels is None:
        return available
    missing = [c for c in config.channels if c not in available]
    if missing:
        raise ValidationError(
            f"requested channels {missing} not available; manifest provides {list(available)}")
    return tuple(config.channels)


def _read_frames(paths, config: RunConfig) -> list:
    frames = []
    for p in paths:
        t = tensorio.read_tensor(p)
        if config.resize_to is not None:
            t = covdesc.resize_maps(t, int(config.resize_to[0]), int(config.resize_to[1]))
        frames.append(t)
    return frames


def _frame_descriptor(tensor, channel: str, masks_by_id: dict, epsilon: float):
    if channel == covdesc.GLOBAL_CHANNEL:
        obs = covdesc.extract_features(tensor)
        return covdesc.compute_covariance(obs, epsilon)
    mask = masks_by_id[channel]
    obs = covdesc.extract_region_features(tensor, mask)
    return covdesc.compute_covariance(obs, epsilon, region_id=channel)


def _point(desc) -> spdcore.SpdPoint:
    return spdcore.SpdPoint(matrix=desc.matrix, log_matrix=desc.log_matrix)


def build_static_units(manifest: tensorio.DatasetManifest, config: RunConfig,
                       channels: tuple) -> Units:
    cache: dict = {}
    ids, subjects, labels = [], [], []
    reps = {ch: [] for ch in channels}
    for entry in manifest.entries:
        masks_by_id = {m.region_id: m for m in _load_masks(entry, cache)}
        peak_paths = entry.tensor_paths[-config.peak_frames:]
        frames = _read_frames(peak_paths, config)
        if config.static_scoring == "per_frame":
            for k, tensor in enumerate(frames):
                ids.append(f"{entry.sample_id}#{k}")
                subjects.append(entry.subject_id)
                labels.append(entry.label)
                for ch in channels:
                    reps[ch].append(_point(_frame_descriptor(tensor, ch, masks_by_id,
                                                             config.epsilon)))
            continue
        ids.append(entry.sample_id)
        subjects.append(entry.subject_id)
        labels.append(entry.label)
        for ch in channels:
            if config.static_scoring == "pooled":
                if ch == covdesc.GLOBAL_CHANNEL:
                    obs = np.hstack([covdesc.extract_features(t) for t in frames])
                else:
                    obs = np.hstack([covdesc.extract_region_features(t, masks_by_id[ch])
                                     for t in frames])
                reps[ch].append(_point(covdesc.compute_covariance(obs, config.epsilon)))
            else:  # mean_distance keeps the per-frame points
                reps[ch].append([_point(_frame_descriptor(t, ch, masks_by_id,
                                                          config.epsilon))
                                 for t in frames])
    return Units(ids=ids, subjects=subjects, labels=labels, channels=channels, reps=reps)


def build_dynamic_units(manifest: tensorio.DatasetManifest, config: RunConfig,
                        channels: tuple) -> Units:
    cache: dict = {}
    ids, subjects, labels = [], [], []
    reps = {ch: [] for ch in channels}
    for entry in manifest.entries:
        masks_by_id = {m.region_id: m for m in _load_masks(entry, cache)}
        frames = _read_frames(entry.tensor_paths, config)
        ids.append(entry.sample_id)
        subjects.append(entry.subject_id)
        labels.append(entry.label)
        for ch in channels:
            descs = [_frame_descriptor(t, ch, masks_by_id, config.epsilon) for t in frames]
            traj = align.build_trajectory(descs, sample_id=entry.sample_id,
                                          region_id=None if ch == covdesc.GLOBAL_CHANNEL else ch)
            reps[ch].append(align.resample_trajectory(traj, config.l_target))
    return Units(ids=ids, subjects=subjects, labels=labels, channels=channels, reps=reps)


def build_units(manifest, config: RunConfig) -> Units:
    channels = resolve_channels(manifest, config)
    if config.mode == "static":
        return build_static_units(manifest, config, channels)
    return build_dynamic_units(manifest, config, channels)


# ---------------------------------------------------------------------------
# Video-set distances (static mean_distance scoring)
# ---------------------------------------------------------------------------

def video_distance(points_a, points_b) -> float:
    """Mean distance over positionally paired peak frames (aligned from
    the end when counts differ); zero for identical frame sets."""
    p = min(len(points_a), len(points_b))
    a = points_a[-p:]
    b = points_b[-p:]
    return float(np.mean([spdcore.lerm_distance(x, y) for x, y in zip(a, b)]))


def video_sq_distance_matrix(sets_a, sets_b=None) -> np.ndarray:
    same = sets_b is None
    B = sets_a if same else sets_b
    D = np.zeros((len(sets_a), len(B)))
    for i, va in enumerate(sets_a):
        start = i + 1 if same else 0
        for j in range(start, len(B)):
            D[i, j] = video_distance(va, B[j])
    if same:
        D = D + D.T
    return D * D


# ---------------------------------------------------------------------------
# Kernel banks: full-cohort Grams per channel, gamma and training columns
# ---------------------------------------------------------------------------

class _BankBase:
    """Lazily built Grams over the whole cohort.

    ``kernel_for(channel, gamma, cols)`` returns an n×n KernelMatrix whose
    sub-blocks evaluate any train/test split; ``cols`` (a sorted tuple of
    unit indices) matters only to representations that embed units
    relative to the training set, i.e. the proximity path.
    """

    uses_gamma = True
    channels: tuple = ()

    def kernel_for(self, channel: str, gamma, cols=None) -> spdcore.KernelMatrix:
        raise NotImplementedError

    def values_for(self, channel: str, gamma, cols=None) -> np.ndarray:
        return self.kernel_for(channel, gamma, cols).values


class StaticBank(_BankBase):
    """exp(-gamma * D^2) Grams from cached squared-distance matrices."""

    def __init__(self, sq_dist_by_channel: dict):
        self._sq = sq_dist_by_channel
        self._cache: dict = {}
        self.channels = tuple(sq_dist_by_channel)

    @classmethod
    def from_units(cls, units: Units, scoring: str) -> "StaticBank":
        sq = {}
        for ch in units.channels:
            if scoring == "mean_distance":
                sq[ch] = video_sq_distance_matrix(units.reps[ch])
            else:
                sq[ch] = spdcore.lerm_sq_distance_matrix(units.reps[ch])
        return cls(sq)

    @classmethod
    def from_features(cls, features: np.ndarray) -> "StaticBank":
        sq = np.einsum("ij,ij->i", features, features)
        D2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
        np.maximum(D2, 0.0, out=D2)
        D2 = spdcore.symmetrize(D2)
        np.fill_diagonal(D2, 0.0)
        return cls({_CONCAT: D2})

    def kernel_for(self, channel, gamma, cols=None) -> spdcore.KernelMatrix:
        key = (channel, float(gamma))
        if key not in self._cache:
            K = np.exp(-float(gamma) * self._sq[channel])
            K = spdcore.symmetrize(K)
            np.fill_diagonal(K, 1.0)
            res = spdcore.check_psd(K)
            self._cache[key] = spdcore.KernelMatrix(
                values=K, kind="static_rbf", gamma=float(gamma),
                min_eig_estimate=res.min_eigenvalue)
        return self._cache[key]


class GakBank(_BankBase):
    """Global-alignment Grams with per-channel pair-distance caches."""

    def __init__(self, trajs_by_channel: dict, use_ratio_kernel: bool, normalize: bool):
        self._trajs = trajs_by_channel
        self._ratio = use_ratio_kernel
        self._normalize = normalize
        self._pair_sq: dict = {}
        self._cache: dict = {}
        self.channels = tuple(trajs_by_channel)

    def kernel_for(self, channel, gamma, cols=None) -> spdcore.KernelMatrix:
        key = (channel, float(gamma))
        if key not in self._cache:
            if channel not in self._pair_sq:
                self._pair_sq[channel] = align.gak_pair_sq(self._trajs[channel])
            self._cache[key] = align.gak_gram(
                self._trajs[channel], float(gamma), use_ratio_kernel=self._ratio,
                normalize=self._normalize, pair_sq=self._pair_sq[channel])
        return self._cache[key]

    def log_shift(self, channel, gamma) -> float:
        return self.kernel_for(channel, gamma).log_shift


class PpfBank(_BankBase):
    """Linear kernels over rows of DTW dissimilarities to the training units.

    The embedding of a unit is its row of dissimilarities to the training
    columns, so the kernel depends on which units form the training set.
    """

    uses_gamma = False

    def __init__(self, trajs_by_channel: dict):
        self._trajs = trajs_by_channel
        self._prox: dict = {}
        self._cache: dict = {}
        self.channels = tuple(trajs_by_channel)

    def proximity(self, channel) -> np.ndarray:
        if channel not in self._prox:
            self._prox[channel] = align.dtw_proximity_matrix(self._trajs[channel])
        return self._prox[channel]

    def kernel_for(self, channel, gamma=None, cols=None) -> spdcore.KernelMatrix:
        G = self.proximity(channel)
        if cols is None:
            cols = tuple(range(G.shape[0]))
        key = (channel, cols)
        if key not in self._cache:
            E = G[:, list(cols)]
            K = spdcore.symmetrize(E @ E.T)
            res = spdcore.check_psd(K)
            self._cache[key] = spdcore.KernelMatrix(
                values=K, kind="ppf_linear", min_eig_estimate=res.min_eigenvalue)
        return self._cache[key]


def build_bank(units: Units, config: RunConfig):
    if config.mode == "static":
        if config.fusion_strategy == "feature_concat" and len(units.channels) > 1:
            if config.static_scoring == "mean_distance":
                raise ValidationError(
                    "feature_concat needs one descriptor per unit; use pooled or "
                    "per_frame scoring")
            logs = [[p.log_matrix for p in units.reps[ch]] for ch in units.channels]
            return StaticBank.from_features(fusion.feature_concat(logs))
        return StaticBank.from_units(units, config.static_scoring)
    if config.alignment == "gak":
        return GakBank(units.reps, config.use_ratio_kernel, config.gak_normalize)
    return PpfBank(units.reps)


# ---------------------------------------------------------------------------
# Grid search over gamma, C and fusion weights
# ---------------------------------------------------------------------------

def _kernel_level(strategy: str, n_channels: int) -> bool:
    """True when a single SVM sees one (possibly fused) Gram."""
    return n_channels == 1 or strategy in ("kernel_weighted_sum", "feature_concat")


def _candidate_betas(config: RunConfig, n_channels: int) -> list:
    if n_channels == 1:
        return [(1.0,)]
    if config.fusion_weights is not None:
        w = np.asarray(config.fusion_weights, dtype=np.float64)
        if w.shape != (n_channels,):
            raise ValidationError(
                f"fusion_weights must have one entry per channel ({n_channels})")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or float(w.sum()) <= 0:
            raise ValidationError("fusion_weights must be non-negative with positive sum")
        return [tuple(float(v) for v in w / w.sum())]
    if config.fusion_strategy in fusion.WEIGHTED_STRATEGIES:
        return fusion.simplex_grid(n_channels, config.beta_step)
    return [None]  # late_product carries no weights


def _fused_values(bank, beta, gamma, cols, cache: dict) -> np.ndarray:
    """Cohort-shaped kernel values for one (beta, gamma, training-column) choice."""
    key = (beta, None if gamma is None else float(gamma), cols)
    if key not in cache:
        if len(bank.channels) == 1:
            cache[key] = bank.values_for(bank.channels[0], gamma, cols)
        else:
            mats = [bank.kernel_for(ch, gamma, cols) for ch in bank.channels]
            cache[key] = fusion.kernel_weighted_sum(mats, beta).values
    return cache[key]


def _late_scores(bank, gamma, C, train_idx, test_idx, y) -> list:
    """Per-channel simplex scores of test units, models fit on train."""
    cols = tuple(int(i) for i in train_idx)
    out = []
    for ch in bank.channels:
        G = bank.values_for(ch, gamma, cols)
        model = svm.KernelSVC(C=C).fit(G[np.ix_(train_idx, train_idx)], y[train_idx])
        out.append(model.predict_proba(G[np.ix_(test_idx, train_idx)]))
    return out


def _fuse_late(per_channel_scores, strategy: str, beta):
    if strategy == "late_product":
        return fusion.late_product(per_channel_scores)
    return fusion.late_weighted_sum(per_channel_scores, beta)


def grid_search(bank, y: np.ndarray, subjects, idx: np.ndarray, config: RunConfig) -> dict:
    """Pick (gamma, C, beta) by pooled inner-CV accuracy on ``idx``.

    Candidates walk gamma ascending, then C ascending, then beta in
    lexicographic order; only strictly better accuracy displaces the
    incumbent, which realizes the smallest-gamma / smallest-C /
    lexicographically-smallest-beta tie-break. Candidates whose kernel
    fails the PSD check or whose solver diverges are skipped; if every
    candidate fails, training fails.
    """
    idx = np.asarray(idx)
    sub = [subjects[i] for i in idx]
    n_subjects = len(set(sub))
    inner = min(config.inner_folds, n_subjects)
    if inner < 2:
        raise ValidationError(
            f"inner search needs >= 2 subjects in the training split, got {n_subjects}")
    inner_assign = assign_subject_folds(sub, inner)
    splits = []
    for f in range(inner):
        tr = idx[inner_assign != f]
        te = idx[inner_assign == f]
        splits.append((tr, te, tuple(int(i) for i in tr)))
    strategy = config.fusion_strategy
    kernel_level = _kernel_level(strategy, len(bank.channels))
    gammas = tuple(sorted(float(g) for g in config.gamma_grid)) if bank.uses_gamma else (None,)
    cs = tuple(sorted(float(c) for c in config.c_grid))
    betas = _candidate_betas(config, len(bank.channels))
    classes = np.unique(y[idx])
    fused_cache: dict = {}
    best = None
    for gamma in gammas:
        for C in cs:
            late_fold_scores = None
            if not kernel_level:
                try:
                    late_fold_scores = [
                        _late_scores(bank, gamma, C, tr, te, y) for tr, te, _ in splits]
                except (NumericalError, ValidationError):
                    continue
            for beta in betas:
                correct = total = 0
                failed = False
                for k, (tr, te, cols) in enumerate(splits):
                    try:
                        if kernel_level:
                            G = _fused_values(bank, beta, gamma, cols, fused_cache)
                            model = svm.KernelSVC(C=C).fit(G[np.ix_(tr, tr)], y[tr])
                            pred = model.predict(G[np.ix_(te, tr)])
                        else:
                            fused = _fuse_late(late_fold_scores[k], strategy, beta)
                            pred = classes[np.argmax(fused, axis=1)]
                    except (NumericalError, ValidationError):
                        failed = True
                        break
                    correct += int(np.sum(pred == y[te]))
                    total += te.size
                if failed:
                    continue
                acc = correct / total
                if best is None or acc > best["inner_accuracy"]:
                    best = {"gamma": gamma, "C": C, "beta": beta,
                            "inner_accuracy": acc}
    if best is None:
        raise NumericalError(
            "every hyperparameter candidate failed (non-PSD kernel or diverging "
            "solver); the data/config combination is unusable")
    return best


@dataclass(eq=False)
class FittedModels:
    """What prediction needs: the estimator(s) plus the fused-kernel recipe."""

    kernel_level: bool
    strategy: str
    beta: tuple | None
    gamma: float | None
    C: float
    train_idx: np.ndarray
    train_cols: tuple
    single: svm.KernelSVC | None = None
    per_channel: dict | None = None


def fit_models(bank, y, idx, choice: dict, config: RunConfig) -> FittedModels:
    idx = np.asarray(idx)
    cols = tuple(int(i) for i in idx)
    strategy = config.fusion_strategy
    kernel_level = _kernel_level(strategy, len(bank.channels))
    gamma, C, beta = choice["gamma"], choice["C"], choice["beta"]
    if kernel_level:
        G = _fused_values(bank, beta, gamma, cols, {})
        model = svm.KernelSVC(C=C).fit(G[np.ix_(idx, idx)], y[idx])
        return FittedModels(kernel_level=True, strategy=strategy, beta=beta,
                            gamma=gamma, C=C, train_idx=idx, train_cols=cols,
                            single=model)
    per_channel = {}
    for ch in bank.channels:
        G = bank.values_for(ch, gamma, cols)
        per_channel[ch] = svm.KernelSVC(C=C).fit(G[np.ix_(idx, idx)], y[idx])
    return FittedModels(kernel_level=False, strategy=strategy, beta=beta,
                        gamma=gamma, C=C, train_idx=idx, train_cols=cols,
                        per_channel=per_channel)


def predict_in_cohort(bank, fitted: FittedModels, test_idx) -> tuple:
    """Predict units of the same cohort the bank was built over."""
    test_idx = np.asarray(test_idx)
    tr = fitted.train_idx
    if fitted.kernel_level:
        G = _fused_values(bank, fitted.beta, fitted.gamma, fitted.train_cols, {})
        block = G[np.ix_(test_idx, tr)]
        return fitted.single.predict(block), fitted.single.predict_proba(block)
    per_channel = []
    classes = None
    for ch in bank.channels:
        model = fitted.per_channel[ch]
        G = bank.values_for(ch, fitted.gamma, fitted.train_cols)
        per_channel.append(model.predict_proba(G[np.ix_(test_idx, tr)]))
        classes = model.classes_
    fused = _fuse_late(per_channel, fitted.strategy, fitted.beta)
    return classes[np.argmax(fused, axis=1)], fused


# ---------------------------------------------------------------------------
# Training drivers
# ---------------------------------------------------------------------------

def _choice_record(choice: dict) -> dict:
    return {
        "gamma": choice["gamma"],
        "C": choice["C"],
        "beta": None if choice["beta"] is None else list(choice["beta"]),
        "inner_accuracy": choice["inner_accuracy"],
    }


def run_training(manifest: tensorio.DatasetManifest, config: RunConfig):
    """Outer-CV evaluation plus a final model on all data.

    Returns (EvalReport, ModelBundle, Units).
    """
    config.validate()
    if len(manifest.entries) == 0:
        raise ValidationError("cannot train on an empty manifest")
    if config.mode == "dynamic" and config.fusion_strategy != "kernel_weighted_sum":
        if len(resolve_channels(manifest, config)) > 1:
            raise ValidationError(
                "dynamic-mode fusion of several channels works at the kernel "
                "level only; set fusion_strategy to kernel_weighted_sum")
    units = build_units(manifest, config)
    bank = build_bank(units, config)
    y = np.asarray(units.labels)
    if np.unique(y).size < 2:
        raise ValidationError("training needs at least two distinct labels")
    outer = assign_subject_folds(units.subjects, config.folds)

    def eval_fold(f: int):
        test_idx = np.flatnonzero(outer == f)
        train_idx = np.flatnonzero(outer != f)
        choice = grid_search(bank, y, units.subjects, train_idx, config)
        fitted = fit_models(bank, y, train_idx, choice, config)
        pred, _scores = predict_in_cohort(bank, fitted, test_idx)
        return choice, test_idx, pred

    fold_results = thread_map(eval_fold, list(range(config.folds)))
    predictions = []
    fold_accuracies = []
    per_fold_chosen = []
    all_true, all_pred = [], []
    for f, (choice, test_idx, pred) in enumerate(fold_results):
        fold_accuracies.append(float(np.sum(pred == y[test_idx])) / test_idx.size)
        per_fold_chosen.append({"fold": f, **_choice_record(choice)})
        for i, p in zip(test_idx, pred):
            predictions.append({
                "sample_id": units.ids[i], "subject_id": units.subjects[i],
                "true": str(y[i]), "predicted": str(p), "fold": f,
            })
            all_true.append(str(y[i]))
            all_pred.append(str(p))
    overall = sum(t == p for t, p in zip(all_true, all_pred)) / len(all_true)
    conf = confusion_matrix(all_true, all_pred, manifest.label_set)
    final_choice = grid_search(bank, y, units.subjects, np.arange(units.n), config)
    final_fitted = fit_models(bank, y, np.arange(units.n), final_choice, config)
    report = EvalReport(
        labels=manifest.label_set, mode=config.mode,
        alignment=config.alignment if config.mode == "dynamic" else None,
        n_samples=units.n, folds=config.folds,
        fold_accuracies=fold_accuracies, overall_accuracy=overall,
        confusion=[[int(v) for v in row] for row in conf],
        chosen=_choice_record(final_choice),
        per_fold_chosen=per_fold_chosen,
        predictions=predictions, config=config.to_dict(),
    )
    bundle = ModelBundle.from_training(units, bank, final_fitted, config, manifest.label_set)
    return report, bundle, units


# ---------------------------------------------------------------------------
# Model bundle: persistence and out-of-cohort prediction
# ---------------------------------------------------------------------------

def _rep_matrices(rep) -> np.ndarray:
    """A unit's channel representation as a (k, m, m) stack."""
    if isinstance(rep, spdcore.SpdPoint):
        return rep.matrix[None, :, :]
    if isinstance(rep, align.Trajectory):
        return np.stack([p.matrix for p in rep.points])
    return np.stack([p.matrix for p in rep])  # list of SpdPoint


def _rep_from_matrices(stack: np.ndarray, mode: str, scoring: str):
    points = [spdcore.SpdPoint.from_matrix(M) for M in stack]
    if mode == "dynamic":
        return align.Trajectory(points=tuple(points))
    if scoring == "mean_distance":
        return points
    return points[0]


@dataclass(eq=False)
class ModelBundle:
    """A trained pipeline: config echo, estimators and training-side data."""

    meta: dict
    models: dict           # "__fused__" -> model, or channel -> model
    train_reps: dict       # channel -> list over units of representations
    proximities: dict      # channel -> training proximity matrix (dtw_ppf only)

    @classmethod
    def from_training(cls, units: Units, bank, fitted: FittedModels,
                      config: RunConfig, label_set) -> "ModelBundle":
        meta = {
            "format": "spdtraj-bundle",
            "version": 1,
            "mode": config.mode,
            "alignment": config.alignment if config.mode == "dynamic" else None,
            "static_scoring": config.static_scoring if config.mode == "static" else None,
            "strategy": fitted.strategy,
            "channels": list(units.channels),
            "beta": None if fitted.beta is None else list(fitted.beta),
            "gamma": fitted.gamma,
            "C": fitted.C,
            "epsilon": config.epsilon,
            "l_target": config.l_target,
            "peak_frames": config.peak_frames,
            "use_ratio_kernel": config.use_ratio_kernel,
            "gak_normalize": config.gak_normalize,
            "resize_to": None if config.resize_to is None else list(config.resize_to),
            "label_set": list(label_set),
            "unit_ids": list(units.ids),
            "unit_subjects": list(units.subjects),
            "unit_labels": list(units.labels),
            "log_shift": {},
        }
        if isinstance(bank, GakBank):
            meta["log_shift"] = {ch: bank.log_shift(ch, fitted.gamma)
                                 for ch in units.channels}
        models = ({"__fused__": fitted.single} if fitted.kernel_level
                  else dict(fitted.per_channel))
        proximities = {}
        if isinstance(bank, PpfBank):
            proximities = {ch: bank.proximity(ch) for ch in units.channels}
        return cls(meta=meta, models=models, train_reps=dict(units.reps),
                   proximities=proximities)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        (out_dir / "models").mkdir(parents=True, exist_ok=True)
        (out_dir / "train_data").mkdir(parents=True, exist_ok=True)
        with open(out_dir / "bundle.json", "w", encoding="utf-8") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, model in self.models.items():
            fname = "fused" if name == "__fused__" else f"ch{self.meta['channels'].index(name)}"
            svm.save_model(model, out_dir / "models" / f"{fname}.json")
        for ci, ch in enumerate(self.meta["channels"]):
            for ui, rep in enumerate(self.train_reps[ch]):
                stack = _rep_matrices(rep)
                t = tensorio.FeatureTensor(values=stack.astype(np.float64),
                                           source_id=self.meta["unit_ids"][ui])
                tensorio.write_tensor(t, out_dir / "train_data" / f"ch{ci}_u{ui:05d}.spdt")
            if ch in self.proximities:
                spdcore.save_matrix_csv(self.proximities[ch],
                                        out_dir / "train_data" / f"proximity_ch{ci}.csv")

    @classmethod
    def load(cls, bundle_dir) -> "ModelBundle":
        bundle_dir = Path(bundle_dir)
        meta_path = bundle_dir / "bundle.json"
        if not meta_path.is_file():
            raise ValidationError(f"not a model bundle: missing {meta_path}")
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("format") != "spdtraj-bundle":
            raise ValidationError(f"not a model bundle: {meta_path}")
        channels = meta["channels"]
        models = {}
        fused_path = bundle_dir / "models" / "fused.json"
        if fused_path.is_file():
            models["__fused__"] = svm.load_model(fused_path)
        else:
            for ci, ch in enumerate(channels):
                models[ch] = svm.load_model(bundle_dir / "models" / f"ch{ci}.json")
        n_units = len(meta["unit_ids"])
        train_reps = {}
        for ci, ch in enumerate(channels):
            reps = []
            for ui in range(n_units):
                t = tensorio.read_tensor(bundle_dir / "train_data" / f"ch{ci}_u{ui:05d}.spdt")
                reps.append(_rep_from_matrices(
                    t.values.astype(np.float64), meta["mode"],
                    meta.get("static_scoring") or "mean_distance"))
            train_reps[ch] = reps
        proximities = {}
        for ci, ch in enumerate(channels):
            p = bundle_dir / "train_data" / f"proximity_ch{ci}.csv"
            if p.is_file():
                proximities[ch] = spdcore.load_matrix_csv(p)
        return cls(meta=meta, models=models, train_reps=train_reps,
                   proximities=proximities)

    def _config_for_test(self) -> RunConfig:
        m = self.meta
        return RunConfig(
            mode=m["mode"],
            alignment=m["alignment"] or "gak",
            epsilon=m["epsilon"],
            l_target=m["l_target"],
            peak_frames=m["peak_frames"],
            static_scoring=m["static_scoring"] or "mean_distance",
            use_ratio_kernel=m["use_ratio_kernel"],
            gak_normalize=m["gak_normalize"],
            resize_to=None if m["resize_to"] is None else tuple(m["resize_to"]),
            channels=tuple(m["channels"]),
        )

    def _cross_kernel(self, channel: str, test_reps) -> np.ndarray:
        """Test-vs-train kernel block for one channel."""
        m = self.meta
        train = self.train_reps[channel]
        gamma = m["gamma"]
        if m["mode"] == "dynamic" and m["alignment"] == "gak":
            logK = align.gak_cross_log(test_reps, train, gamma,
                                       use_ratio_kernel=m["use_ratio_kernel"])
            if m["gak_normalize"]:
                log_diag_test = np.array([
                    align.gak_log_similarity(t, t, gamma, m["use_ratio_kernel"])
                    for t in test_reps])
                log_diag_train = np.array([
                    align.gak_log_similarity(t, t, gamma, m["use_ratio_kernel"])
                    for t in train])
                logK = logK - 0.5 * log_diag_test[:, None] - 0.5 * log_diag_train[None, :]
            shift = m["log_shift"].get(channel, 0.0)
            return np.exp(logK - shift)
        if m["mode"] == "dynamic":  # dtw_ppf: linear kernel over proximity rows
            G_test = align.dtw_proximity_matrix(train, queries=test_reps)
            return G_test @ self.proximities[channel].T
        scoring = m["static_scoring"]
        if scoring == "mean_distance":
            D2 = video_sq_distance_matrix(test_reps, train)
            return np.exp(-gamma * D2)
        D2 = spdcore.lerm_sq_distance_matrix(test_reps, train)
        return np.exp(-gamma * D2)

    def predict(self, manifest: tensorio.DatasetManifest) -> dict:
        """Labels and score vectors for every unit of a manifest.

        Returns a dict with ``ids``, ``labels`` (predicted), ``classes``
        and ``scores`` (rows aligned with ``classes``).
        """
        m = self.meta
        config = self._config_for_test().validate()
        if len(manifest.entries) == 0:
            return {"ids": [], "labels": [], "classes": list(m["label_set"]), "scores": []}
        try:
            units = build_units(manifest, config)
        except ValidationError as exc:
            raise ValidationError(f"channel mismatch between bundle and manifest: {exc}") \
                from exc
        strategy = m["strategy"]
        channels = tuple(m["channels"])
        if strategy == "feature_concat" and len(channels) > 1:
            test_feats = fusion.feature_concat(
                [[p.log_matrix for p in units.reps[ch]] for ch in channels])
            train_feats = fusion.feature_concat(
                [[_rep_log(rep) for rep in self.train_reps[ch]] for ch in channels])
            diff_sq = (np.einsum("ij,ij->i", test_feats, test_feats)[:, None]
                       + np.einsum("ij,ij->i", train_feats, train_feats)[None, :]
                       - 2.0 * test_feats @ train_feats.T)
            np.maximum(diff_sq, 0.0, out=diff_sq)
            blocks = {_CONCAT: np.exp(-m["gamma"] * diff_sq)}
            channels_eff = (_CONCAT,)
        else:
            blocks = {ch: self._cross_kernel(ch, units.reps[ch]) for ch in channels}
            channels_eff = channels
        if "__fused__" in self.models:
            model = self.models["__fused__"]
            if len(channels_eff) == 1:
                K_test = blocks[channels_eff[0]]
            else:
                beta = m["beta"]
                K_test = sum(b * blocks[ch] for b, ch in zip(beta, channels_eff)
                             if b != 0.0)
            scores = model.predict_proba(K_test)
            labels = model.predict(K_test)
            classes = [str(c) for c in model.classes_]
        else:
            per_channel = []
            classes_arr = None
            for ch in channels_eff:
                model = self.models[ch]
                per_channel.append(model.predict_proba(blocks[ch]))
                classes_arr = model.classes_
            fused = _fuse_late(per_channel, strategy, m["beta"])
            labels = classes_arr[np.argmax(fused, axis=1)]
            scores = fused
            classes = [str(c) for c in classes_arr]
        return {
            "ids": list(units.ids),
            "labels": [str(v) for v in labels],
            "classes": classes,
            "scores": [[float(v) for v in row] for row in scores],
        }


def _rep_log(rep) -> np.ndarray:
    if isinstance(rep, spdcore.SpdPoint):
        return rep.log_matrix
    raise ValidationError("feature concatenation needs single-descriptor units")

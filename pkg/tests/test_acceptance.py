"""Top-level acceptance gate.

Ten checks covering the metric axioms, kernel positivity, the covariance
and alignment oracles, fusion algebra, and the synthetic end-to-end runs.
Each test prints exactly one PASS/FAIL line (with its measured margins)
that always agrees with the test outcome. Budgeted checks also assert
their wall-clock limits.
"""

import math
import time

import numpy as np
import pytest

from spdtraj import align, covdesc, fusion, pipeline, spdcore, tensorio
from spdtraj.cli import main as cli_main

from conftest import random_spd, random_spd_points, random_trajectory, smooth_trajectory


@pytest.fixture
def verdict(capfd):
    """One PASS/FAIL line per check, emitted outside pytest's capture."""
    def report(name: str, ok: bool, detail: str) -> None:
        with capfd.disabled():
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
        assert ok, f"{name}: {detail}"
    return report


def test_01_metric_axioms(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    max_self = 0.0
    min_slack = math.inf
    symmetric = True
    for _ in range(200):
        a, b, c = random_spd_points(rng, 3, 8)
        dab, dba = spdcore.lerm_distance(a, b), spdcore.lerm_distance(b, a)
        symmetric &= dab == dba
        max_self = max(max_self, spdcore.lerm_distance(a, a))
        slack = dab + spdcore.lerm_distance(b, c) - spdcore.lerm_distance(a, c)
        min_slack = min(min_slack, slack)
    elapsed = time.perf_counter() - t0
    ok = symmetric and max_self < 1e-10 and min_slack >= -1e-9 and elapsed < 5.0
    verdict("metric axioms", ok,
             f"200 random 8x8 triples: symmetry exact={symmetric}, "
             f"max self-distance {max_self:.2e} (< 1e-10), "
             f"min triangle slack {min_slack:.2e} (>= -1e-9), {elapsed:.1f}s (< 5s)")


def test_02_rbf_gram_psd_for_all_widths(verdict):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    points = random_spd_points(rng, 50, 8)
    worst = math.inf
    all_passed = True
    for gamma in pipeline.DEFAULT_GAMMA_GRID:
        res = spdcore.check_psd(spdcore.gram_matrix(points, gamma), tol=1e-8)
        all_passed &= res.passed
        scale = res.max_abs_eigenvalue or 1.0
        worst = min(worst, res.min_eigenvalue / scale)
    elapsed = time.perf_counter() - t0
    ok = all_passed and elapsed < 10.0
    verdict("kernel positivity across widths", ok,
             f"50-point Gram PSD at rel tol 1e-8 for all "
             f"{len(pipeline.DEFAULT_GAMMA_GRID)} default widths "
             f"(worst rel min eig {worst:.2e}), {elapsed:.1f}s (< 10s)")


def _loop_covariance(obs: np.ndarray, epsilon: float) -> np.ndarray:
    m, n = obs.shape
    mu = np.zeros(m)
    for k in range(n):
        mu += obs[:, k]
    mu /= n
    C = np.zeros((m, m))
    for k in range(n):
        v = obs[:, k] - mu
        C += np.outer(v, v)
    C /= n - 1
    C = (C + C.T) / 2.0
    return C + epsilon * np.eye(m)


def test_03_covariance_oracle(verdict):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 17))
        w = int(rng.integers(2, 9))
        h = int(rng.integers(1, 9))
        t = tensorio.FeatureTensor(values=rng.standard_normal((m, h, w)))
        obs = covdesc.extract_features(t)
        desc = covdesc.compute_covariance(obs)
        ref = _loop_covariance(obs, covdesc.DEFAULT_EPSILON)
        rel = np.linalg.norm(desc.matrix - ref, "fro") / np.linalg.norm(ref, "fro")
        worst = max(worst, rel)
    flat = tensorio.FeatureTensor(values=np.full((3, 4, 4), 2.5))
    desc = covdesc.compute_covariance(covdesc.extract_features(flat), epsilon=1e-4)
    exact = np.array_equal(desc.matrix, 1e-4 * np.eye(3))
    ok = worst <= 1e-10 and exact
    verdict("covariance oracle", ok,
             f"100 random tensors (m <= 16, n <= 64) within rel Frobenius "
             f"{worst:.2e} (<= 1e-10) of the explicit-loop reference; "
             f"constant tensor gives exactly the ridge diagonal: {exact}")


def _short_trajectory_pairs(n_instances: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        m = int(rng.integers(2, 5))
        t1 = random_trajectory(rng, int(rng.integers(1, 5)), m)
        t2 = random_trajectory(rng, int(rng.integers(1, 5)), m)
        yield t1, t2


def test_04_dtw_oracle(verdict):
    worst = 0.0
    for t1, t2 in _short_trajectory_pairs(50, 404):
        got, _path = align.dtw_dissimilarity(t1, t2)
        best = math.inf
        for a in align.enumerate_alignments(len(t1), len(t2)):
            best = min(best, align.alignment_cost(t1, t2, a) / len(a))
        worst = max(worst, abs(got - best))
    counts_ok = (len(align.enumerate_alignments(2, 2)) == 3
                 and len(align.enumerate_alignments(3, 3)) == 13)
    ok = worst <= 1e-12 and counts_ok
    verdict("exact alignment dissimilarity", ok,
             f"50 short trajectory pairs match the exhaustive minimum within "
             f"{worst:.2e} (<= 1e-12); path counts 3 and 13 for lengths "
             f"(2,2) and (3,3): {counts_ok}")


def test_05_gak_oracle(verdict):
    worst = 0.0
    for idx, (t1, t2) in enumerate(_short_trajectory_pairs(50, 505)):
        gamma = (0.5, 2.0)[idx % 2]
        ratio = idx % 3 == 0
        d2 = align.trajectory_sq_distances(t1, t2)
        k = np.exp(-gamma * d2)
        if ratio:
            k = k / (1.0 + k)
        ref = 0.0
        for a in align.enumerate_alignments(len(t1), len(t2)):
            prod = 1.0
            for i, j in a.pairs:
                prod *= k[i - 1, j - 1]
            ref += prod
        got = align.gak_similarity(t1, t2, gamma, use_ratio_kernel=ratio)
        worst = max(worst, abs(got - ref) / ref)
    ok = worst <= 1e-10
    verdict("alignment kernel oracle", ok,
             f"50 short trajectory pairs, both local kernels, match exhaustive "
             f"enumeration within rel {worst:.2e} (<= 1e-10)")


def test_06_gak_gram_psd(verdict):
    rng = np.random.default_rng(606)
    t0 = time.perf_counter()
    trajs = [smooth_trajectory(rng, 15, 8, sample_id=f"t{k}") for k in range(30)]
    pair_sq = align.gak_pair_sq(trajs)
    gamma = 2.0 ** -4
    margins = {}
    all_passed = True
    for label, ratio in (("ratio", True), ("rbf", False)):
        K = align.gak_gram(trajs, gamma, use_ratio_kernel=ratio, pair_sq=pair_sq)
        res = spdcore.check_psd(K.values, tol=1e-6)
        all_passed &= res.passed
        margins[label] = res.min_eigenvalue / (res.max_abs_eigenvalue or 1.0)
    elapsed = time.perf_counter() - t0
    ok = all_passed and elapsed < 60.0
    verdict("alignment kernel Gram positivity", ok,
             f"30 trajectories (length 15, dim 8): PSD at rel tol 1e-6 with "
             f"ratio kernel (rel min eig {margins['ratio']:.2e}) and local RBF "
             f"({margins['rbf']:.2e}), {elapsed:.1f}s (< 60s)")


def test_07_proximity_kernel_outer_product(verdict):
    rng = np.random.default_rng(707)
    trajs = [random_trajectory(rng, int(rng.integers(2, 5)), 3) for _ in range(12)]
    G = align.dtw_proximity_matrix(trajs)
    K = pipeline.PpfBank({"ch": trajs}).kernel_for("ch").values
    ref = np.zeros((12, 12))
    for i in range(12):
        for j in range(12):
            ref[i, j] = sum(G[i, k] * G[j, k] for k in range(12))
    max_err = float(np.max(np.abs(K - ref)))
    res = spdcore.check_psd(K, tol=1e-10)
    ok = max_err <= 1e-12 and res.passed
    verdict("proximity embedding kernel", ok,
             f"row-product kernel matches the explicit outer-product sum within "
             f"{max_err:.2e} (<= 1e-12) and is PSD at rel tol 1e-10 "
             f"(min eig {res.min_eigenvalue:.2e})")


def test_08_fusion_algebra(verdict):
    rng = np.random.default_rng(808)
    mats = []
    for _ in range(3):
        A = rng.standard_normal((6, 6))
        mats.append(spdcore.KernelMatrix(values=A @ A.T, kind="static_rbf"))
    onehot_exact = True
    for c in range(3):
        beta = tuple(1.0 if k == c else 0.0 for k in range(3))
        fused = fusion.kernel_weighted_sum(mats, beta)
        onehot_exact &= np.array_equal(fused.values, mats[c].values)
    conic_ok = True
    worst_conic = math.inf
    for _ in range(10):
        w = rng.uniform(0.0, 1.0, 3)
        beta = tuple(w / w.sum())
        res = spdcore.check_psd(fusion.kernel_weighted_sum(mats, beta).values,
                                tol=1e-9)
        conic_ok &= res.passed
        worst_conic = min(worst_conic, res.min_eigenvalue / (res.max_abs_eigenvalue or 1))
    S = [rng.uniform(0.05, 1.0, size=(8, 4)) for _ in range(3)]
    S = [s / s.sum(axis=1, keepdims=True) for s in S]
    simplex_ok = True
    for fused in (fusion.late_product(S), fusion.late_weighted_sum(S, (0.2, 0.3, 0.5))):
        simplex_ok &= bool(np.all(fused >= 0))
        simplex_ok &= bool(np.allclose(fused.sum(axis=1), 1.0, atol=1e-12))
    ok = onehot_exact and conic_ok and simplex_ok
    verdict("fusion algebra", ok,
             f"one-hot weights recover the single channel exactly: {onehot_exact}; "
             f"conic kernel sums stay PSD (worst rel min eig {worst_conic:.2e} "
             f">= -1e-9); score fusion preserves the simplex: {simplex_ok}")


E2E_SYNTH = ["--classes", "3", "--samples-per-class", "20", "--m", "8",
             "--w", "4", "--h", "4", "--frames", "15",
             "--separation", "5.0", "--seed", "42"]


def _train(man_path, out, *extra) -> pipeline.EvalReport:
    code = cli_main([extra[0], "--manifest", str(man_path), "--out", str(out)]
                    + list(extra[1:]))
    assert code == 0, f"{extra[0]} exited with {code}"
    return pipeline.EvalReport.from_file(out / "report.json")


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    assert cli_main(["synth", "--out", str(root / "data")] + E2E_SYNTH) == 0
    man = root / "data" / "manifest.json"
    dyn = _train(man, root / "dyn", "train-dynamic")
    stat = _train(man, root / "stat", "train-static")
    ppf = _train(man, root / "ppf", "train-dynamic", "--alignment", "dtw_ppf")
    elapsed = time.perf_counter() - t0
    return {"root": root, "dyn": dyn, "stat": stat, "ppf": ppf, "elapsed": elapsed}


def test_09_end_to_end_synthetic(e2e_run, verdict):
    dyn_acc = e2e_run["dyn"].overall_accuracy
    stat_acc = e2e_run["stat"].overall_accuracy
    ppf_acc = e2e_run["ppf"].overall_accuracy
    elapsed = e2e_run["elapsed"]
    ok = (dyn_acc >= 0.90 and stat_acc >= 0.90 and dyn_acc >= ppf_acc
          and elapsed < 180.0)
    verdict("synthetic end to end", ok,
             f"3x20 samples: trajectory-kernel accuracy {dyn_acc:.2f} (>= 0.90), "
             f"static accuracy {stat_acc:.2f} (>= 0.90), paired run "
             f"{dyn_acc:.2f} >= {ppf_acc:.2f}, {elapsed:.0f}s (< 180s)")


def test_10_byte_identical_reports(e2e_run, tmp_path, verdict):
    assert cli_main(["synth", "--out", str(tmp_path / "data")] + E2E_SYNTH) == 0
    man = tmp_path / "data" / "manifest.json"
    _train(man, tmp_path / "dyn", "train-dynamic")
    _train(man, tmp_path / "stat", "train-static")
    same_dyn = ((tmp_path / "dyn" / "report.json").read_bytes()
                == (e2e_run["root"] / "dyn" / "report.json").read_bytes())
    same_stat = ((tmp_path / "stat" / "report.json").read_bytes()
                 == (e2e_run["root"] / "stat" / "report.json").read_bytes())
    ok = same_dyn and same_stat
    verdict("deterministic reports", ok,
             f"same-seed reruns byte-identical: trajectory run {same_dyn}, "
             f"static run {same_stat}")

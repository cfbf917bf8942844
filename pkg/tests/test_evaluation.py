import numpy as np
import pytest

from conftest import make_env, voxel_aligned_building
from gainmap.baselines import pair_distance
from gainmap.dataset import build_all_pairs, place_terminals, split_episode
from gainmap.environment import LinkParams, capacity_from_gain, channel_gain
from gainmap.evaluation import (
    Estimator,
    ExperimentConfig,
    KnnEstimator,
    OracleEstimator,
    _capacity_matrices,
    capacity_matrix_nmae,
    cluster_head_counts,
    cluster_head_quality,
    mae,
    run_experiment,
    sample_eval_pairs,
)


class ConstantEstimator(Estimator):
    name = "constant"

    def __init__(self, value):
        self.value = float(value)

    def predict(self, queries, context):
        return np.full(len(queries), self.value)


@pytest.fixture
def scene():
    env = make_env([voxel_aligned_building()], env_id=1)
    terminals = place_terminals(1, env.region, 12)
    mset = build_all_pairs(env, terminals)
    return env, terminals, mset


class TestMae:
    def test_oracle_estimator_scores_zero(self, scene):
        env, _, mset = scene
        episode = split_episode(mset, 0, 20, target_cap=None)
        assert mae(OracleEstimator(env), env, episode.context, 10, rng_seed=3) == 0.0

    def test_matches_hand_rolled_loop(self, scene):
        env, _, mset = scene
        episode = split_episode(mset, 0, 20, target_cap=None)
        est = ConstantEstimator(-75.0)
        got = mae(est, env, episode.context, 12, rng_seed=5)
        pairs = sample_eval_pairs(env.region, 12, 5, min_distance=env.path_loss.d0, context=episode.context)
        expected = np.mean([abs(channel_gain(env, p[0], p[1]) - (-75.0)) for p in pairs])
        assert got == pytest.approx(expected, abs=1e-12)

    def test_eval_pairs_respect_min_distance_and_seed(self, scene):
        env, _, _ = scene
        a = sample_eval_pairs(env.region, 30, 9, min_distance=1.0)
        b = sample_eval_pairs(env.region, 30, 9, min_distance=1.0)
        assert np.array_equal(a, b)
        assert np.all(np.linalg.norm(a[:, 0] - a[:, 1], axis=1) >= 1.0)


class TestCapacityMatrix:
    def test_full_measurement_gives_zero(self, scene):
        env, terminals, _ = scene
        est = ConstantEstimator(0.0)  # never consulted
        assert capacity_matrix_nmae(est, env, terminals, 1.0, rng_seed=0) == 0.0

    def test_oracle_estimator_gives_zero(self, scene):
        env, terminals, _ = scene
        assert capacity_matrix_nmae(OracleEstimator(env), env, terminals, 0.5, rng_seed=1) == 0.0

    def test_estimated_matrix_symmetric_and_copies_measured(self, scene):
        env, terminals, _ = scene
        est = ConstantEstimator(-200.0)
        true_mat, est_mat, unmeasured = _capacity_matrices(est, env, terminals[:6], 0.5, LinkParams(), 7)
        assert np.array_equal(est_mat, est_mat.T)
        assert np.array_equal(true_mat, true_mat.T)
        measured = ~unmeasured
        np.fill_diagonal(measured, False)
        assert np.array_equal(est_mat[measured], true_mat[measured])
        assert np.any(est_mat[unmeasured] != true_mat[unmeasured])

    def test_four_terminal_knn_bruteforce(self):
        # Independent recomputation of the whole pipeline for n=4, k=1.
        env = make_env([voxel_aligned_building()], env_id=2)
        terminals = place_terminals(3, env.region, 4)
        link = LinkParams()
        seed = 11
        got = capacity_matrix_nmae(KnnEstimator(1), env, terminals, 0.5, link, seed)

        iu, ju = np.triu_indices(4, k=1)
        gains = np.array([channel_gain(env, terminals[i], terminals[j]) for i, j in zip(iu, ju)])
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA9A]))
        perm = rng.permutation(len(iu))
        measured = np.zeros(len(iu), dtype=bool)
        measured[perm[: int(round(0.5 * len(iu)))]] = True
        est_gains = gains.copy()
        for idx in np.where(~measured)[0]:
            q = (terminals[iu[idx]], terminals[ju[idx]])
            dists = [
                pair_distance(q, (terminals[iu[m]], terminals[ju[m]]))
                for m in np.where(measured)[0]
            ]
            nearest = np.where(measured)[0][int(np.argmin(dists))]
            est_gains[idx] = gains[nearest]
        true_caps = np.array([capacity_from_gain(g, link) for g in gains])
        est_caps = np.array([capacity_from_gain(g, link) for g in est_gains])
        expected = np.abs(est_caps[~measured] - true_caps[~measured]).mean() / true_caps[~measured].mean()
        assert got == pytest.approx(expected, rel=1e-12)


class TestClusterHead:
    def test_oracle_estimator_ratio_one(self, scene):
        env, terminals, _ = scene
        link = LinkParams()
        for seed in range(5):
            q = cluster_head_quality(OracleEstimator(env), env, terminals, 1e6, link, rng_seed=seed)
            assert q == 1.0

    def test_threshold_above_all_gives_one(self, scene):
        env, terminals, _ = scene
        q = cluster_head_quality(ConstantEstimator(-300.0), env, terminals, 1e30, rng_seed=2)
        assert q == 1.0

    def test_five_terminal_enumeration(self):
        env = make_env([voxel_aligned_building()], env_id=3)
        terminals = place_terminals(5, env.region, 5)
        link = LinkParams()
        threshold = 50e6
        seed = 4
        achieved, best = cluster_head_counts(
            OracleEstimator(env), env, terminals, threshold, link, rng_seed=seed
        )
        caps = np.zeros((5, 5))
        for i in range(5):
            for j in range(i + 1, 5):
                caps[i, j] = caps[j, i] = capacity_from_gain(channel_gain(env, terminals[i], terminals[j]), link)
        counts = [(caps[i] >= threshold).sum() - (caps[i, i] >= threshold) for i in range(5)]
        assert best == max(counts)
        assert achieved == max(counts)  # oracle picks an optimal head


class TestRunExperiment:
    def small_config(self, experiment_id, sweep):
        return ExperimentConfig(
            id=experiment_id,
            sweep=sweep,
            num_envs=2,
            env_seed_base=50,
            terminal_seed_base=60,
            eval_seed_base=70,
            max_buildings=2,
            num_terminals=8,
            num_eval_pairs=5,
        )

    def test_single_point_sweep(self):
        result = run_experiment(self.small_config("mae_vs_m", (10,)), [KnnEstimator(1)])
        rows = list(result.rows())
        assert len(rows) == 1
        assert result.header() == ["context_size", "knn_mae_db", "knn_std"]

    def test_deterministic_csv(self, tmp_path):
        cfg = self.small_config("mae_vs_m", (8, 12))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        run_experiment(cfg, [KnnEstimator(1)]).write_csv(p1)
        run_experiment(cfg, [KnnEstimator(1)]).write_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_nmae_experiment_schema(self):
        result = run_experiment(self.small_config("nmae_vs_terminals", (4, 6)), [KnnEstimator(1)])
        assert result.header()[0] == "num_terminals"
        assert len(result.means["knn"]) == 2

    def test_cluster_head_experiment(self):
        result = run_experiment(
            self.small_config("cluster_head_vs_threshold", (1e6, 1e9)), [KnnEstimator(1)]
        )
        assert result.header()[0] == "capacity_threshold_bps"
        assert np.all(result.means["knn"] <= 1.0 + 1e-12)

    def test_buildings_experiment(self):
        result = run_experiment(self.small_config("mae_vs_buildings", (0, 2)), [KnnEstimator(1)])
        assert result.header()[0] == "max_buildings"

    def test_unknown_id_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(id="nope")

    def test_duplicate_estimator_names_rejected(self):
        with pytest.raises(ValueError):
            run_experiment(self.small_config("mae_vs_m", (8,)), [KnnEstimator(1), KnnEstimator(2)])

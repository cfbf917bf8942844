import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_env
from gainmap.dataset import (
    MeasurementSet,
    build_all_pairs,
    export_csv,
    load_measurement_set,
    place_terminals,
    save_measurement_set,
    split_episode,
)
from gainmap.environment import channel_gain


class TestPlaceTerminals:
    def test_two_distinct_points_inside(self, region):
        pts = place_terminals(0, region, 2)
        assert pts.shape == (2, 3)
        assert not np.array_equal(pts[0], pts[1])
        assert np.all(pts >= 0.0) and np.all(pts <= region.extents[None, :])

    def test_determinism(self, region):
        assert np.array_equal(place_terminals(42, region, 10), place_terminals(42, region, 10))

    def test_uniform_mean_oracle(self, region):
        # Mean of U(0, L) is L/2 with sd L/sqrt(12); check each axis at 3 sigma.
        n = 10_000
        pts = place_terminals(7, region, n)
        for axis, extent in enumerate(region.extents):
            bound = 3.0 * extent / math.sqrt(12.0) / math.sqrt(n)
            assert abs(pts[:, axis].mean() - extent / 2.0) <= bound

    def test_too_few(self, region):
        with pytest.raises(ValueError):
            place_terminals(0, region, 1)


class TestBuildAllPairs:
    def test_pair_count_40(self, free_space_env):
        terminals = place_terminals(1, free_space_env.region, 40)
        assert len(build_all_pairs(free_space_env, terminals)) == 780

    def test_pair_count_50(self, free_space_env):
        terminals = place_terminals(1, free_space_env.region, 50)
        assert len(build_all_pairs(free_space_env, terminals)) == 1225

    @pytest.mark.parametrize("n", [2, 3, 7, 25, 100])
    def test_pair_count_formula(self, free_space_env, n):
        terminals = place_terminals(2, free_space_env.region, n)
        assert len(build_all_pairs(free_space_env, terminals)) == n * (n - 1) // 2

    def test_noiseless_matches_ground_truth(self):
        env = make_env([], env_id=3)
        terminals = place_terminals(3, env.region, 10)
        mset = build_all_pairs(env, terminals, noise_std=0.0)
        for m in mset:
            assert m.gain == channel_gain(env, m.tx, m.rx)
            assert m.env_id == 3

    def test_noise_deterministic(self, free_space_env):
        terminals = place_terminals(4, free_space_env.region, 8)
        a = build_all_pairs(free_space_env, terminals, noise_std=2.0, rng_seed=9)
        b = build_all_pairs(free_space_env, terminals, noise_std=2.0, rng_seed=9)
        c = build_all_pairs(free_space_env, terminals, noise_std=2.0, rng_seed=10)
        assert np.array_equal(a.gains, b.gains)
        assert not np.array_equal(a.gains, c.gains)

    def test_no_duplicate_unordered_pairs(self, free_space_env):
        terminals = place_terminals(5, free_space_env.region, 12)
        mset = build_all_pairs(free_space_env, terminals)
        seen = set()
        for m in mset:
            key = (min(tuple(m.tx), tuple(m.rx)), max(tuple(m.tx), tuple(m.rx)))
            assert key not in seen
            seen.add(key)


def small_set(n=10, env_id=0):
    rng = np.random.default_rng(100 + n)
    return MeasurementSet(
        txs=rng.uniform(0, 350, (n, 3)),
        rxs=rng.uniform(0, 350, (n, 3)),
        gains=rng.normal(-90, 10, n),
        env_id=env_id,
    )


class TestSplitEpisode:
    def test_complement_size(self):
        episode = split_episode(small_set(10), 0, 9)
        assert len(episode.context) == 9
        assert len(episode.targets) == 1

    def test_target_cap(self):
        episode = split_episode(small_set(100), 0, 10, target_cap=32)
        assert len(episode.targets) == 32
        episode = split_episode(small_set(100), 0, 10, target_cap=None)
        assert len(episode.targets) == 90

    def test_out_of_range(self):
        mset = small_set(10)
        for bad in (0, 10, 11):
            with pytest.raises(ValueError):
                split_episode(mset, 0, bad)

    def test_binomial_frequency_oracle(self):
        # Measurement 0 lands in the context with frequency cs/m, +-3 sigma.
        mset = small_set(10)
        cs, runs = 4, 1000
        target = mset.gains[0]
        hits = 0
        for seed in range(runs):
            episode = split_episode(mset, seed, cs, target_cap=None)
            hits += target in episode.context.gains
        p = cs / len(mset)
        bound = 3.0 * math.sqrt(p * (1 - p) / runs)
        assert abs(hits / runs - p) <= bound


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), context_size=st.integers(1, 19))
def test_split_disjoint_property(seed, context_size):
    mset = small_set(20)
    episode = split_episode(mset, seed, context_size, target_cap=None)
    ctx_keys = {tuple(episode.context.txs[i]) for i in range(len(episode.context))}
    tgt_keys = {tuple(episode.targets.txs[i]) for i in range(len(episode.targets))}
    assert not (ctx_keys & tgt_keys)
    assert len(episode.context) + len(episode.targets) == len(mset)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path, free_space_env):
        terminals = place_terminals(6, free_space_env.region, 9)
        mset = build_all_pairs(free_space_env, terminals, noise_std=1.5, rng_seed=3)
        path = tmp_path / "set.bin"
        save_measurement_set(mset, path)
        loaded = load_measurement_set(path)
        assert loaded == mset
        path2 = tmp_path / "set2.bin"
        save_measurement_set(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_round_trip_without_terminals(self, tmp_path):
        mset = small_set(5, env_id=17)
        path = tmp_path / "set.bin"
        save_measurement_set(mset, path)
        loaded = load_measurement_set(path)
        assert loaded == mset
        assert loaded.terminals is None

    def test_csv_schema(self, tmp_path):
        mset = small_set(4)
        path = tmp_path / "set.csv"
        export_csv(mset, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,gain_db"
        assert len(lines) == 1 + len(mset)
        first = np.array([float(v) for v in lines[1].split(",")])
        assert first[:3] == pytest.approx(mset.txs[0])
        assert first[6] == pytest.approx(mset.gains[0])

    def test_gain_must_be_finite(self):
        with pytest.raises(ValueError):
            MeasurementSet(
                txs=np.zeros((1, 3)), rxs=np.ones((1, 3)), gains=[np.inf], env_id=0
            )

"""Experiment drivers: estimation MAE, capacity-matrix reconstruction, and
cluster-head selection, swept over context size, terminal count, capacity
threshold, or environment complexity.

Every driver is a pure function of its configuration and seeds; estimators are
adapters with a uniform batched ``predict(queries, context)`` interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    RegularizerSpec,
    knn_estimate,
    tomographic_fit,
    tomographic_predict,
)
from .dataset import MeasurementSet, build_all_pairs, place_terminals, split_episode
from .environment import (
    Environment,
    GridSpec,
    LinkParams,
    Region,
    capacity_from_gain,
    channel_gain,
    sample_environment,
)
from .invariance import QueryInput
from .model import ModelConfig, ModelParams, predict_prefixes_batch

__all__ = [
    "Estimator",
    "KnnEstimator",
    "TomographicEstimator",
    "CreteEstimator",
    "OracleEstimator",
    "mae",
    "capacity_matrix_nmae",
    "cluster_head_counts",
    "cluster_head_quality",
    "ExperimentConfig",
    "ExperimentResult",
    "run_experiment",
    "sample_eval_pairs",
]


class Estimator:
    """Gain estimator conditioned on a context set.  Stateless across queries:
    repeated calls with the same context give identical results."""

    name = "estimator"

    def predict(self, queries: np.ndarray, context: MeasurementSet) -> np.ndarray:
        """queries (B, 2, 3) -> gains (B,) in dB."""
        raise NotImplementedError

    def estimate(self, query, context: MeasurementSet) -> float:
        q = np.asarray(query, dtype=float).reshape(1, 2, 3)
        return float(self.predict(q, context)[0])


class KnnEstimator(Estimator):
    def __init__(self, k: int = 5):
        self.k = int(k)
        self.name = "knn"

    def predict(self, queries, context):
        k = min(self.k, len(context))
        return np.array([knn_estimate((q[0], q[1]), context, k) for q in queries])


class TomographicEstimator(Estimator):
    """Fits once per context object, then predicts by line integrals."""

    def __init__(self, reg: RegularizerSpec, grid: GridSpec | None = None, region: Region | None = None):
        self.reg = reg
        self.grid = grid or GridSpec()
        self.region = region or Region()
        self.name = f"tomo_{reg.kind}"
        self._cache_key: int | None = None
        self._model = None

    def _fit(self, context: MeasurementSet):
        if self._cache_key != id(context):
            self._model = tomographic_fit(context, self.grid, self.region, self.reg)
            self._cache_key = id(context)
        return self._model

    def predict(self, queries, context):
        model = self._fit(context)
        return np.array([tomographic_predict(model, q[0], q[1]) for q in queries])


class CreteEstimator(Estimator):
    def __init__(self, params: ModelParams, config: ModelConfig | None = None, chunk: int = 64):
        self.params = params
        self.config = config or params.config
        self.chunk = int(chunk)
        self.name = "crete"

    def predict(self, queries, context):
        out = np.empty(len(queries))
        for start in range(0, len(queries), self.chunk):
            batch = queries[start : start + self.chunk]
            qs = [QueryInput(x=q[0], y=q[1], context=context) for q in batch]
            if self.config.causal:
                out[start : start + len(batch)] = predict_prefixes_batch(qs, self.params, self.config)[:, -1]
            else:
                from .model import estimate as model_estimate

                out[start : start + len(batch)] = [model_estimate(q, self.params, self.config) for q in qs]
        return out


class OracleEstimator(Estimator):
    """Ground truth; useful for calibrating metrics."""

    def __init__(self, env: Environment):
        self.env = env
        self.name = "oracle"

    def predict(self, queries, context):
        return np.array([channel_gain(self.env, q[0], q[1]) for q in queries])


# -- metrics -------------------------------------------------------------------


def sample_eval_pairs(
    region: Region, num_pairs: int, rng_seed: int, min_distance: float = 1.0, context: MeasurementSet | None = None
) -> np.ndarray:
    """(B, 2, 3) location pairs uniform over the region volume, rejecting pairs
    closer than ``min_distance`` and exact duplicates of context pairs."""
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0xE7A1]))
    pairs = []
    while len(pairs) < num_pairs:
        a = rng.uniform(0.0, 1.0, 3) * region.extents
        b = rng.uniform(0.0, 1.0, 3) * region.extents
        if np.linalg.norm(a - b) < min_distance:
            continue
        if context is not None and _pair_in_context(a, b, context):
            continue
        pairs.append((a, b))
    return np.asarray(pairs)


def _pair_in_context(a: np.ndarray, b: np.ndarray, context: MeasurementSet) -> bool:
    same = (np.all(context.txs == a, axis=1) & np.all(context.rxs == b, axis=1)) | (
        np.all(context.txs == b, axis=1) & np.all(context.rxs == a, axis=1)
    )
    return bool(same.any())


def mae(
    est: Estimator,
    env: Environment,
    context: MeasurementSet,
    num_eval_pairs: int = 30,
    rng_seed: int = 0,
) -> float:
    """Mean absolute error (dB) over seeded random evaluation pairs."""
    pairs = sample_eval_pairs(env.region, num_eval_pairs, rng_seed, min_distance=env.path_loss.d0, context=context)
    truth = np.array([channel_gain(env, p[0], p[1]) for p in pairs])
    preds = est.predict(pairs, context)
    return float(np.abs(preds - truth).mean())


def _capacity_matrices(
    est: Estimator,
    env: Environment,
    terminals: np.ndarray,
    measured_fraction: float,
    link: LinkParams,
    rng_seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """True and estimated capacity matrices plus the unmeasured-pair mask.

    Measured entries are copied into the estimate exactly; both matrices are
    symmetric with zero diagonal.
    """
    terminals = np.asarray(terminals, dtype=float).reshape(-1, 3)
    n = len(terminals)
    iu, ju = np.triu_indices(n, k=1)
    true_gains = np.array([channel_gain(env, terminals[i], terminals[j]) for i, j in zip(iu, ju)])
    n_pairs = len(iu)
    n_measured = int(round(measured_fraction * n_pairs))
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0xCA9A]))
    perm = rng.permutation(n_pairs)
    measured = np.zeros(n_pairs, dtype=bool)
    measured[perm[:n_measured]] = True

    est_gains = true_gains.copy()
    if (~measured).any():
        if not measured.any():
            raise ValueError("measured_fraction too small: empty context")
        context = MeasurementSet(
            txs=terminals[iu[measured]],
            rxs=terminals[ju[measured]],
            gains=true_gains[measured],
            env_id=env.id,
        )
        queries = np.stack([terminals[iu[~measured]], terminals[ju[~measured]]], axis=1)
        est_gains[~measured] = est.predict(queries, context)

    def to_matrix(gains):
        mat = np.zeros((n, n))
        caps = np.array([capacity_from_gain(g, link) for g in gains])
        mat[iu, ju] = caps
        mat[ju, iu] = caps
        return mat

    unmeasured_mask = np.zeros((n, n), dtype=bool)
    unmeasured_mask[iu[~measured], ju[~measured]] = True
    unmeasured_mask[ju[~measured], iu[~measured]] = True
    return to_matrix(true_gains), to_matrix(est_gains), unmeasured_mask


def capacity_matrix_nmae(
    est: Estimator,
    env: Environment,
    terminals,
    measured_fraction: float = 0.5,
    link: LinkParams | None = None,
    rng_seed: int = 0,
) -> float:
    """Mean |estimated - true| capacity over unmeasured pairs, normalized by
    the mean true capacity over the same pairs.  No unmeasured pairs -> 0."""
    link = link or LinkParams()
    true_mat, est_mat, unmeasured = _capacity_matrices(est, env, terminals, measured_fraction, link, rng_seed)
    if not unmeasured.any():
        return 0.0
    denom = true_mat[unmeasured].mean()
    return float(np.abs(est_mat[unmeasured] - true_mat[unmeasured]).mean() / denom)


def cluster_head_counts(
    est: Estimator,
    env: Environment,
    terminals,
    capacity_threshold: float,
    link: LinkParams | None = None,
    rng_seed: int = 0,
    measured_fraction: float = 0.5,
) -> tuple[int, int]:
    """(true neighbor count of the head chosen from estimates, best possible
    true neighbor count).  Head selection ties resolve to the lowest index."""
    link = link or LinkParams()
    true_mat, est_mat, _ = _capacity_matrices(est, env, terminals, measured_fraction, link, rng_seed)
    np.fill_diagonal(est_mat, -math.inf)
    np.fill_diagonal(true_mat, -math.inf)
    est_counts = (est_mat >= capacity_threshold).sum(axis=1)
    head = int(np.argmax(est_counts))
    true_counts = (true_mat >= capacity_threshold).sum(axis=1)
    return int(true_counts[head]), int(true_counts.max())


def cluster_head_quality(
    est: Estimator,
    env: Environment,
    terminals,
    capacity_threshold: float,
    link: LinkParams | None = None,
    rng_seed: int = 0,
    measured_fraction: float = 0.5,
) -> float:
    """Single-environment quality ratio; 0/0 is defined as 1."""
    achieved, best = cluster_head_counts(
        est, env, terminals, capacity_threshold, link, rng_seed, measured_fraction
    )
    if best == 0:
        return 1.0
    return achieved / best


# -- experiment drivers ----------------------------------------------------------


EXPERIMENT_IDS = ("mae_vs_m", "nmae_vs_terminals", "cluster_head_vs_threshold", "mae_vs_buildings")


@dataclass(frozen=True)
class ExperimentConfig:
    id: str = "mae_vs_m"
    sweep: tuple = (25, 50, 100, 200)
    num_envs: int = 17
    env_seed_base: int = 9000
    terminal_seed_base: int = 500
    eval_seed_base: int = 700
    max_buildings: int = 8
    num_terminals: int = 50
    num_eval_pairs: int = 30
    context_size: int = 100
    measured_fraction: float = 0.5
    noise_std: float = 0.0
    building_size: tuple[float, float] = (40.0, 40.0)
    region: Region = field(default_factory=Region)
    grid: GridSpec = field(default_factory=GridSpec)
    link: LinkParams = field(default_factory=LinkParams)

    def __post_init__(self):
        if self.id not in EXPERIMENT_IDS:
            raise ValueError(f"unknown experiment id {self.id!r}; expected one of {EXPERIMENT_IDS}")


@dataclass
class ExperimentResult:
    id: str
    sweep: list
    estimator_names: list
    means: dict  # name -> array over sweep
    stds: dict  # name -> array over sweep
    num_envs: int
    seeds: dict

    def header(self) -> list[str]:
        cols = [_sweep_column(self.id)]
        for name in self.estimator_names:
            cols.append(f"{name}_{_metric_name(self.id)}")
        for name in self.estimator_names:
            cols.append(f"{name}_std")
        return cols

    def rows(self):
        for i, value in enumerate(self.sweep):
            row = [value]
            row += [self.means[name][i] for name in self.estimator_names]
            row += [self.stds[name][i] for name in self.estimator_names]
            yield row

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(",".join(self.header()) + "\n")
            for row in self.rows():
                fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def _sweep_column(experiment_id: str) -> str:
    return {
        "mae_vs_m": "context_size",
        "nmae_vs_terminals": "num_terminals",
        "cluster_head_vs_threshold": "capacity_threshold_bps",
        "mae_vs_buildings": "max_buildings",
    }[experiment_id]


def _metric_name(experiment_id: str) -> str:
    return {
        "mae_vs_m": "mae_db",
        "nmae_vs_terminals": "nmae",
        "cluster_head_vs_threshold": "quality",
        "mae_vs_buildings": "mae_db",
    }[experiment_id]


def _test_environment(cfg: ExperimentConfig, index: int, max_buildings: int | None = None) -> Environment:
    return sample_environment(
        rng_seed=cfg.env_seed_base + index,
        max_buildings=cfg.max_buildings if max_buildings is None else max_buildings,
        region=cfg.region,
        grid=cfg.grid,
        building_size=cfg.building_size,
        env_id=cfg.env_seed_base + index,
    )


def _env_measurements(cfg: ExperimentConfig, env: Environment, index: int, n_terminals: int | None = None):
    terminals = place_terminals(cfg.terminal_seed_base + index, cfg.region, n_terminals or cfg.num_terminals)
    return terminals, build_all_pairs(env, terminals, noise_std=cfg.noise_std, rng_seed=cfg.eval_seed_base + index)


def run_experiment(cfg: ExperimentConfig, estimators: list[Estimator]) -> ExperimentResult:
    """Sweep the experiment's independent variable, averaging each estimator's
    metric over the configured environments with fixed, paired seeds."""
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise ValueError("estimator names must be unique")
    per_point: dict[str, list] = {name: [] for name in names}
    stds: dict[str, list] = {name: [] for name in names}

    for value in cfg.sweep:
        samples: dict[str, list] = {name: [] for name in names}
        for i in range(cfg.num_envs):
            if cfg.id == "mae_vs_buildings":
                env = _test_environment(cfg, i, max_buildings=int(value))
            else:
                env = _test_environment(cfg, i)
            if cfg.id == "nmae_vs_terminals":
                terminals, _ = _env_measurements(cfg, env, i, n_terminals=int(value))
                for est in estimators:
                    samples[est.name].append(
                        capacity_matrix_nmae(est, env, terminals, cfg.measured_fraction, cfg.link, cfg.eval_seed_base + i)
                    )
            elif cfg.id == "cluster_head_vs_threshold":
                terminals, _ = _env_measurements(cfg, env, i)
                for est in estimators:
                    samples[est.name].append(
                        cluster_head_counts(est, env, terminals, float(value), cfg.link, cfg.eval_seed_base + i, cfg.measured_fraction)
                    )
            else:
                context_size = int(value) if cfg.id == "mae_vs_m" else cfg.context_size
                _, mset = _env_measurements(cfg, env, i)
                context_size = min(context_size, len(mset) - 1)
                episode = split_episode(mset, cfg.eval_seed_base + i, context_size, target_cap=None)
                for est in estimators:
                    samples[est.name].append(
                        mae(est, env, episode.context, cfg.num_eval_pairs, cfg.eval_seed_base + i)
                    )
        for name in names:
            vals = samples[name]
            if cfg.id == "cluster_head_vs_threshold":
                achieved = np.array([v[0] for v in vals], dtype=float)
                best = np.array([v[1] for v in vals], dtype=float)
                ratio = 1.0 if best.mean() == 0 else achieved.mean() / best.mean()
                per_env = np.where(best > 0, achieved / np.maximum(best, 1), 1.0)
                per_point[name].append(ratio)
                stds[name].append(float(per_env.std()))
            else:
                arr = np.asarray(vals, dtype=float)
                per_point[name].append(float(arr.mean()))
                stds[name].append(float(arr.std()))

    return ExperimentResult(
        id=cfg.id,
        sweep=list(cfg.sweep),
        estimator_names=names,
        means={n: np.asarray(v) for n, v in per_point.items()},
        stds={n: np.asarray(v) for n, v in stds.items()},
        num_envs=cfg.num_envs,
        seeds={
            "env_seed_base": cfg.env_seed_base,
            "terminal_seed_base": cfg.terminal_seed_base,
            "eval_seed_base": cfg.eval_seed_base,
        },
    )

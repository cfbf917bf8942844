"""Self-test suites behind the ``check`` subcommand: symmetry invariances,
gradient correctness, line-integral accuracy, causal prefix consistency, and
forward-model spot checks.  Each suite returns (name, passed, detail).
"""

from __future__ import annotations

import math
import time

import numpy as np
from scipy.special import erf as _erf

from . import autodiff as ad
from .autodiff import Tensor, gradient_check
from .dataset import MeasurementSet
from .environment import (
    GridSpec,
    LinkParams,
    Region,
    capacity_from_gain,
    channel_gain,
    free_space_l0,
    sample_environment,
    segment_voxel_lengths,
)
from .invariance import QueryInput, canonicalize
from .model import (
    ModelConfig,
    ModelParams,
    _causal_mask,
    _token_predictions,
    estimate,
    loss_from_features,
)

__all__ = [
    "random_query",
    "transformed_queries",
    "invariance_feature_suite",
    "invariance_model_suite",
    "primitive_gradient_suite",
    "episode_loss_gradient_suite",
    "line_integral_suite",
    "mc_segment_oracle",
    "prefix_consistency_suite",
    "environment_suite",
    "run_all_checks",
]


def random_query(rng: np.random.Generator, region: Region | None = None, context_size: int | None = None) -> QueryInput:
    region = region or Region()
    m = int(context_size if context_size is not None else rng.integers(4, 49))
    scale = region.extents

    def points(n):
        return rng.uniform(0.0, 1.0, size=(n, 3)) * scale

    context = MeasurementSet(
        txs=points(m), rxs=points(m), gains=rng.normal(-90.0, 15.0, size=m), env_id=0
    )
    x, y = points(2)
    return QueryInput(x=x, y=y, context=context)


def _rotate_z(points: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    pts = np.atleast_2d(points).copy()
    x = pts[:, 0].copy()
    pts[:, 0] = c * x - s * pts[:, 1]
    pts[:, 1] = s * x + c * pts[:, 1]
    return pts.reshape(points.shape)


def _with_context(q: QueryInput, txs, rxs) -> QueryInput:
    context = MeasurementSet(txs=txs, rxs=rxs, gains=q.context.gains, env_id=q.context.env_id)
    return QueryInput(x=q.x, y=q.y, context=context)


def transformed_queries(q: QueryInput, rng: np.random.Generator) -> dict[str, QueryInput]:
    """The five symmetry transforms of a query; each must leave the estimate
    unchanged."""
    shift = np.array([rng.uniform(-200, 200), rng.uniform(-200, 200), 0.0])
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    swap_mask = rng.random(len(q.context)) < 0.5

    translated = QueryInput(
        x=q.x + shift,
        y=q.y + shift,
        context=MeasurementSet(
            q.context.txs + shift, q.context.rxs + shift, q.context.gains, q.context.env_id
        ),
    )
    rotated = QueryInput(
        x=_rotate_z(q.x, theta),
        y=_rotate_z(q.y, theta),
        context=MeasurementSet(
            _rotate_z(q.context.txs, theta), _rotate_z(q.context.rxs, theta), q.context.gains, q.context.env_id
        ),
    )

    def mirror(points):
        out = np.atleast_2d(points).copy()
        out[:, 1] = -out[:, 1]
        return out.reshape(points.shape)

    mirrored = QueryInput(
        x=mirror(q.x),
        y=mirror(q.y),
        context=MeasurementSet(mirror(q.context.txs), mirror(q.context.rxs), q.context.gains, q.context.env_id),
    )
    txs = q.context.txs.copy()
    rxs = q.context.rxs.copy()
    txs[swap_mask], rxs[swap_mask] = q.context.rxs[swap_mask], q.context.txs[swap_mask]
    endpoint_swapped = _with_context(q, txs, rxs)

    return {
        "query_swap": QueryInput(x=q.y, y=q.x, context=q.context),
        "translation": translated,
        "rotation": rotated,
        "mirror": mirrored,
        "endpoint_swap": endpoint_swapped,
    }


def _check_params(seed: int = 0, config: ModelConfig | None = None) -> ModelParams:
    """Random nontrivial network (the zero-initialized head would make every
    prediction constant and the invariance checks vacuous)."""
    config = config or ModelConfig.desk()
    params = ModelParams.new(config, seed=seed, gain_mean=-90.0, gain_std=15.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC4EC]))
    params["head.w"].value = rng.normal(0.0, 0.5, size=params["head.w"].shape)
    params["head.b"].value = rng.normal(0.0, 0.1, size=params["head.b"].shape)
    return params


def invariance_feature_suite(num_cases: int = 100, tolerance: float = 1e-9, seed: int = 0):
    """Feature matrices agree (up to the context column order, which these
    transforms preserve) under all five symmetries."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1F51]))
    worst = 0.0
    for _ in range(num_cases):
        q = random_query(rng)
        base = canonicalize(q)
        for name, tq in transformed_queries(q, rng).items():
            err = float(np.max(np.abs(canonicalize(tq) - base)))
            worst = max(worst, err)
        # permutation equivariance: permuted context permutes columns
        perm = rng.permutation(len(q.context))
        permuted = QueryInput(
            x=q.x,
            y=q.y,
            context=MeasurementSet(
                q.context.txs[perm], q.context.rxs[perm], q.context.gains[perm], q.context.env_id
            ),
        )
        err = float(np.max(np.abs(canonicalize(permuted) - base[:, perm])))
        worst = max(worst, err)
    return "invariance-features", worst <= tolerance, f"max feature deviation {worst:.3e} (tol {tolerance:g})"


def invariance_model_suite(num_episodes: int = 100, tolerance: float = 1e-6, seed: int = 0, params: ModelParams | None = None):
    """End-to-end estimates agree under all five symmetries."""
    params = params or _check_params(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1F52]))
    worst = 0.0
    worst_name = ""
    for _ in range(num_episodes):
        q = random_query(rng)
        base = estimate(q, params)
        for name, tq in transformed_queries(q, rng).items():
            err = abs(estimate(tq, params) - base)
            if err > worst:
                worst, worst_name = err, name
    detail = f"max |dB deviation| {worst:.3e} (tol {tolerance:g}, worst: {worst_name or 'none'})"
    return "invariance-model", worst <= tolerance, detail


def primitive_gradient_suite(h: float = 1e-5, tolerance: float = 1e-4, seed: int = 0):
    """Finite-difference check of every primitive in isolation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x96AD]))
    worst = 0.0
    failures = []

    def check(name, fn, *shapes):
        nonlocal worst
        params = [Tensor(rng.normal(size=s) * 0.7, requires_grad=True) for s in shapes]
        report = gradient_check(lambda ps: fn(*ps), params, h=h, tolerance=tolerance)
        worst = max(worst, report.max_rel_err)
        if not report.passed:
            failures.append(name)

    check("add", lambda a, b: ad.mean(ad.add(a, b)), (3, 4), (3, 4))
    check("add-broadcast", lambda a, b: ad.mean(ad.add(a, b)), (3, 4), (4,))
    check("sub", lambda a, b: ad.mean(ad.sub(a, b)), (2, 5), (2, 5))
    check("mul", lambda a, b: ad.mean(ad.mul(a, b)), (3, 4), (3, 4))
    check("mul-broadcast", lambda a, b: ad.mean(ad.mul(a, b)), (2, 3, 4), (1, 4))
    check("neg", lambda a: ad.mean(ad.neg(a)), (2, 3))
    check("matmul", lambda a, b: ad.mean(ad.matmul(a, b)), (3, 4), (4, 5))
    check("matmul-batched", lambda a, b: ad.mean(ad.matmul(a, b)), (2, 3, 4), (2, 4, 5))
    check("matmul-broadcast", lambda a, b: ad.mean(ad.matmul(a, b)), (2, 2, 3, 4), (4, 5))
    check("transpose", lambda a: ad.mean(ad.mul(ad.transpose(a, (1, 0, 2)), 2.0)), (2, 3, 4))
    check("reshape", lambda a: ad.mean(ad.mul(ad.reshape(a, (6, 2)), 3.0)), (3, 4))
    check("softmax", lambda a: ad.mean(ad.mul(ad.softmax(a), np.arange(12.0).reshape(3, 4))), (3, 4))
    check("layer_norm", lambda a, g, b: ad.mean(ad.mul(ad.layer_norm(a, g, b), np.arange(12.0).reshape(3, 4))), (3, 4), (4,), (4,))
    check("gelu", lambda a: ad.mean(ad.gelu(a)), (3, 4))
    check("relu", lambda a: ad.mean(ad.relu(a)), (3, 4))
    check("sum", lambda a: ad.mean(ad.mul(ad.tensor_sum(a, axis=1), 2.0)), (3, 4))
    check("sum-keepdims", lambda a: ad.mean(ad.mul(ad.tensor_sum(a, axis=0, keepdims=True), 2.0)), (3, 4))
    check("mean-axis", lambda a: ad.mean(ad.mul(ad.mean(a, axis=-1), 2.0)), (3, 4))

    ok = not failures
    detail = f"max rel err {worst:.3e} (tol {tolerance:g})" + (f"; failed: {failures}" if failures else "")
    return "gradients-primitives", ok, detail


def plain_episode_loss(
    params: ModelParams | dict, features: np.ndarray, targets_std: np.ndarray, config: ModelConfig
) -> float:
    """Independent plain-numpy re-implementation of the causal episode loss,
    used as the finite-difference oracle (a value disagreement with the graph
    path would surface as a gradient mismatch).  Accepts either ModelParams or
    a prebuilt name -> ndarray dict (views stay valid under in-place edits)."""
    eps = config.layer_norm_eps
    heads, dh = config.num_heads, config.head_dim

    def ln(x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        sigma = np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
        return (centered / sigma) * gain + bias

    v = params if isinstance(params, dict) else {name: t.value for name, t in params.items()}
    x = np.swapaxes(features, 1, 2) @ v["embed.w"] + v["embed.b"]
    b, m, d = x.shape
    mask = _causal_mask(m) if config.causal else 0.0
    for i in range(config.num_blocks):
        p = f"block{i}"
        h = ln(x, v[f"{p}.ln1.gain"], v[f"{p}.ln1.bias"])
        q = (h @ v[f"{p}.attn.wq"] + v[f"{p}.attn.bq"]).reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
        k = (h @ v[f"{p}.attn.wk"] + v[f"{p}.attn.bk"]).reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
        vv = (h @ v[f"{p}.attn.wv"] + v[f"{p}.attn.bv"]).reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(dh) + mask
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        ctx = (scores @ vv).transpose(0, 2, 1, 3).reshape(b, m, d)
        x = x + (ctx @ v[f"{p}.attn.wo"] + v[f"{p}.attn.bo"])
        h = ln(x, v[f"{p}.ln2.gain"], v[f"{p}.ln2.bias"])
        u = h @ v[f"{p}.mlp.w1"] + v[f"{p}.mlp.b1"]
        u = u * (0.5 * (1.0 + _erf(u / math.sqrt(2.0))))
        x = x + (u @ v[f"{p}.mlp.w2"] + v[f"{p}.mlp.b2"])
    x = ln(x, v["final_ln.gain"], v["final_ln.bias"])
    if config.causal:
        preds = (x @ v["head.w"] + v["head.b"]).reshape(b, m)
        err = preds - targets_std[:, None]
    else:
        pooled = x.mean(axis=1)
        preds = (pooled @ v["head.w"] + v["head.b"]).reshape(b)
        err = preds - targets_std
    return float((err**2).mean())


def episode_loss_gradient_suite(
    config: ModelConfig | None = None,
    context_size: int = 3,
    num_targets: int = 2,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
):
    """Finite-difference check of the full episode loss for every parameter.

    The difference quotients run through ``plain_episode_loss``; the analytic
    gradients run through the recorded graph.
    """
    config = config or ModelConfig(num_blocks=2, num_heads=2, embed_dim=8, mlp_ratio=2)
    params = _check_params(seed=seed, config=config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10E5]))
    features = rng.normal(0.0, 1.0, size=(num_targets, 23, context_size))
    targets_std = rng.normal(0.0, 1.0, size=num_targets)

    names = params.names()
    tensors = [params[n] for n in names]

    def fn(_tensors):
        return loss_from_features(params, features, targets_std, config)

    values = {name: t.value for name, t in params.items()}

    def fd_fn(_tensors):
        return plain_episode_loss(values, features, targets_std, config)

    graph_value = float(fn(tensors).value)
    plain_value = fd_fn(tensors)
    if abs(graph_value - plain_value) > 1e-12 * max(1.0, abs(graph_value)):
        return (
            "gradients-episode-loss",
            False,
            f"graph loss {graph_value!r} != plain-numpy loss {plain_value!r}",
        )

    started = time.time()
    report = gradient_check(fn, tensors, h=h, tolerance=tolerance, fd_fn=fd_fn)
    detail = (
        f"{report.checked} params, max rel err {report.max_rel_err:.3e} "
        f"(tol {tolerance:g}), {time.time() - started:.1f}s"
    )
    return "gradients-episode-loss", report.passed, detail


def mc_segment_oracle(tx, rx, grid: GridSpec, region: Region, num_samples: int = 100_000) -> np.ndarray:
    """Dense equispaced sampling along the segment: per-voxel sample counts
    times the per-sample length.  Resolution is seg_len / num_samples."""
    a = np.asarray(tx, dtype=float)
    b = np.asarray(rx, dtype=float)
    seg_len = float(np.linalg.norm(b - a))
    out = np.zeros(grid.shape)
    if seg_len == 0.0:
        return out
    ts = (np.arange(num_samples) + 0.5) / num_samples
    pts = a[None, :] + ts[:, None] * (b - a)[None, :]
    sizes = grid.voxel_sizes(region)
    idx = np.floor(pts / sizes[None, :]).astype(int)
    np.clip(idx, 0, np.array(grid.shape)[None, :] - 1, out=idx)
    np.add.at(out, (idx[:, 0], idx[:, 1], idx[:, 2]), seg_len / num_samples)
    return out


def line_integral_suite(
    num_segments: int = 200,
    num_samples: int = 100_000,
    rel_tolerance: float = 1e-3,
    seed: int = 0,
    region: Region | None = None,
    grid: GridSpec | None = None,
):
    """Traversal lengths vs the sampling oracle (within the oracle's own
    resolution) plus the exact partition identity."""
    region = region or Region()
    grid = grid or GridSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11E6]))
    worst_rel = 0.0
    worst_partition = 0.0
    for _ in range(num_segments):
        a = rng.uniform(0.0, 1.0, 3) * region.extents
        b = rng.uniform(0.0, 1.0, 3) * region.extents
        seg_len = float(np.linalg.norm(b - a))
        exact = segment_voxel_lengths(a, b, grid, region)
        approx = mc_segment_oracle(a, b, grid, region, num_samples)
        resolution = 2.0 * seg_len / num_samples
        nonzero = (exact > 0) | (approx > 0)
        if nonzero.any():
            diff = np.abs(exact - approx)[nonzero]
            allowed = rel_tolerance * exact[nonzero] + resolution
            ratio = np.max(diff / allowed)
            worst_rel = max(worst_rel, float(ratio))
        partition = abs(float(exact.sum()) - seg_len) / max(seg_len, 1.0)
        worst_partition = max(worst_partition, partition)
    ok = worst_rel <= 1.0 and worst_partition <= 1e-9
    detail = (
        f"worst voxel error {worst_rel:.3f}x allowance "
        f"(rel tol {rel_tolerance:g} + oracle resolution); partition rel err {worst_partition:.2e}"
    )
    return "line-integral", ok, detail


def prefix_consistency_suite(num_cases: int = 20, tolerance: float = 1e-12, seed: int = 0, params: ModelParams | None = None):
    """Per-token predictions on the first m feature columns are unchanged when
    more columns are appended."""
    params = params or _check_params(seed)
    config = params.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9EF1]))
    worst = 0.0
    for _ in range(num_cases):
        q = random_query(rng, context_size=int(rng.integers(8, 33)))
        feats = canonicalize(q, gain_mean=params.gain_mean, gain_std=params.gain_std)
        m = feats.shape[1]
        keep = int(rng.integers(1, m))
        full = _token_predictions(feats[None, :, :], params, config).value[0]
        truncated = _token_predictions(feats[None, :, :keep], params, config).value[0]
        worst = max(worst, float(np.max(np.abs(full[:keep] - truncated))))
    return "prefix-consistency", worst <= tolerance, f"max prefix deviation {worst:.3e} (tol {tolerance:g})"


def environment_suite(seed: int = 0):
    """Reciprocity, reference-distance gain, capacity arithmetic."""
    region = Region()
    env = sample_environment(seed, 5, region=region)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE2E2]))
    ok = True
    details = []
    for _ in range(50):
        a = rng.uniform(0.0, 1.0, 3) * region.extents
        b = rng.uniform(0.0, 1.0, 3) * region.extents
        if channel_gain(env, a, b) != channel_gain(env, b, a):
            ok = False
            details.append("reciprocity violated")
            break
    l0_friis = free_space_l0()
    if abs(env.path_loss.l0 - l0_friis) > 0.01:
        ok = False
        details.append(f"l0 {env.path_loss.l0} vs Friis {l0_friis:.3f}")
    link = LinkParams()
    gain_snr1 = 10.0 * math.log10(link.noise_power_watts / link.tx_power)
    cap = capacity_from_gain(gain_snr1, link)
    if abs(cap - link.bandwidth) > 1e-6 * link.bandwidth:
        ok = False
        details.append(f"capacity at snr=1: {cap}")
    return "environment", ok, "; ".join(details) if details else "reciprocity, Friis l0, capacity all consistent"


def run_all_checks(quick: bool = True, seed: int = 0):
    """Full self-test battery; ``quick`` shrinks case counts for CLI use."""
    n_inv = 100
    n_seg = 30 if quick else 200
    results = [
        environment_suite(seed=seed),
        line_integral_suite(num_segments=n_seg, seed=seed),
        invariance_feature_suite(num_cases=n_inv, seed=seed),
        invariance_model_suite(num_episodes=n_inv, seed=seed),
        prefix_consistency_suite(seed=seed),
        primitive_gradient_suite(seed=seed),
        episode_loss_gradient_suite(seed=seed),
    ]
    return results

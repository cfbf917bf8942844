"""Reference estimators: permutation-aware KNN and regularized tomographic fits.

The tomographic fit recovers a nonnegative voxel absorption field f and a
log-distance path-loss pair (a, b) from gain measurements by minimizing

    (1/M) sum_m ( c_m + a + b log10(d_m) + w_m . f )^2  +  lambda R(f)

with R one of { l1, anisotropic total variation, squared l2 }.  The (a, b)
subproblem is closed-form least squares; the f subproblem takes projected
proximal-gradient steps with backtracking so the objective never increases.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import MeasurementSet
from .environment import GridSpec, Region, segment_voxel_lengths

logger = logging.getLogger(__name__)

__all__ = [
    "RegularizerSpec",
    "TomographicModel",
    "pair_distance",
    "knn_estimate",
    "tomographic_fit",
    "tomographic_predict",
    "select_lambda",
    "DEFAULT_LAMBDA_GRID",
]

REGULARIZERS = ("l1", "total_variation", "tikhonov")

DEFAULT_LAMBDA_GRID = {
    "l1": (1e-3, 1e-2, 1e-1, 1.0, 10.0),
    "total_variation": (1e-3, 1e-2, 1e-1, 1.0, 10.0),
    "tikhonov": (1e-4, 1e-3, 1e-2, 1e-1, 1.0),
}


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "l1"
    lam: float = 0.1
    iterations: int = 1500
    tolerance: float = 1e-8
    tv_inner_iterations: int = 40

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REGULARIZERS}")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class TomographicModel:
    grid: GridSpec
    region: Region
    field_estimate: np.ndarray  # (nx, ny, nz), nonnegative
    a: float  # dB offset
    b: float  # dB per decade
    d_clamp: float = 1.0
    regularizer: RegularizerSpec | None = None
    objective_trace: list = field(default_factory=list)
    converged: bool = False


# -- nearest neighbors ---------------------------------------------------------


def pair_distance(p1, p2) -> float:
    """Distance between location pairs, minimized over the two endpoint
    pairings so that swapped pairs are at distance zero."""
    a1, b1 = (np.asarray(p, dtype=float).reshape(3) for p in p1)
    a2, b2 = (np.asarray(p, dtype=float).reshape(3) for p in p2)
    direct = np.linalg.norm(a1 - a2) + np.linalg.norm(b1 - b2)
    crossed = np.linalg.norm(a1 - b2) + np.linalg.norm(b1 - a2)
    return float(min(direct, crossed))


def _pair_distances(query, context: MeasurementSet) -> np.ndarray:
    qa = np.asarray(query[0], dtype=float).reshape(1, 3)
    qb = np.asarray(query[1], dtype=float).reshape(1, 3)
    direct = np.linalg.norm(context.txs - qa, axis=1) + np.linalg.norm(context.rxs - qb, axis=1)
    crossed = np.linalg.norm(context.txs - qb, axis=1) + np.linalg.norm(context.rxs - qa, axis=1)
    return np.minimum(direct, crossed)


def knn_estimate(query, context: MeasurementSet, k: int) -> float:
    """Unweighted mean gain of the k nearest context pairs under
    ``pair_distance``; distance ties resolve in context order."""
    if not 1 <= k <= len(context):
        raise ValueError(f"k must be in [1, {len(context)}], got {k}")
    distances = _pair_distances(query, context)
    nearest = np.argsort(distances, kind="stable")[:k]
    return float(context.gains[nearest].mean())


# -- tomographic inversion ------------------------------------------------------


def measurement_weights(context: MeasurementSet, grid: GridSpec, region: Region) -> np.ndarray:
    """Stacked voxel-crossing lengths, one row per measurement, shape (M, nvox)."""
    rows = [
        segment_voxel_lengths(context.txs[m], context.rxs[m], grid, region).reshape(-1)
        for m in range(len(context))
    ]
    return np.asarray(rows)


def _fit_offset_slope(targets: np.ndarray, log_d: np.ndarray) -> tuple[float, float]:
    """Least-squares (a, b) for targets ~ a + b * log_d; a degenerate design
    (all distances equal) falls back to b = 0 with a warning."""
    spread = float(log_d.max() - log_d.min()) if len(log_d) else 0.0
    if spread < 1e-12:
        warnings.warn("all measurement distances equal; fitting b = 0", RuntimeWarning)
        return float(targets.mean()), 0.0
    design = np.stack([np.ones_like(log_d), log_d], axis=1)
    sol, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return float(sol[0]), float(sol[1])


def _power_iteration_sq_norm(w_matrix: np.ndarray, iterations: int = 100, seed: int = 0) -> float:
    """Largest eigenvalue of W^T W via power iteration."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x90E1]))
    v = rng.normal(size=w_matrix.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        u = w_matrix.T @ (w_matrix @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        lam = norm
        v = u / norm
    return float(lam)


def _tv_value(f3d: np.ndarray) -> float:
    """Anisotropic total variation summed over the horizontal plane(s)."""
    dx = np.abs(np.diff(f3d, axis=0)).sum()
    dy = np.abs(np.diff(f3d, axis=1)).sum()
    return float(dx + dy)


def _tv_prox(v3d: np.ndarray, mu: float, inner_iterations: int) -> np.ndarray:
    """prox of mu * TV via dual clipping, applied per horizontal layer."""
    out = np.empty_like(v3d)
    for z in range(v3d.shape[2]):
        out[:, :, z] = _tv_prox_plane(v3d[:, :, z], mu, inner_iterations)
    return out


def _tv_prox_plane(v: np.ndarray, mu: float, inner_iterations: int) -> np.ndarray:
    if mu <= 0:
        return v.copy()
    px = np.zeros_like(v)
    py = np.zeros_like(v)
    tau = 0.125
    for _ in range(inner_iterations):
        div = np.zeros_like(v)
        div[:-1, :] += px[:-1, :]
        div[1:, :] -= px[:-1, :]
        div[:, :-1] += py[:, :-1]
        div[:, 1:] -= py[:, :-1]
        u = div - v / mu
        gx = u[1:, :] - u[:-1, :]
        gy = u[:, 1:] - u[:, :-1]
        px[:-1, :] = np.clip(px[:-1, :] + tau * gx, -1.0, 1.0)
        py[:, :-1] = np.clip(py[:, :-1] + tau * gy, -1.0, 1.0)
    div = np.zeros_like(v)
    div[:-1, :] += px[:-1, :]
    div[1:, :] -= px[:-1, :]
    div[:, :-1] += py[:, :-1]
    div[:, 1:] -= py[:, :-1]
    return v - mu * div


def _regularizer_value(kind: str, lam: float, f3d: np.ndarray) -> float:
    if kind == "l1":
        return lam * float(np.abs(f3d).sum())
    if kind == "total_variation":
        return lam * _tv_value(f3d)
    return lam * float((f3d**2).sum())


def _proximal_step(kind: str, z3d: np.ndarray, step_lam: float, tv_inner: int) -> np.ndarray:
    if kind == "l1":
        return np.maximum(z3d - step_lam, 0.0)
    if kind == "total_variation":
        return np.maximum(_tv_prox(z3d, step_lam, tv_inner), 0.0)
    return np.maximum(z3d, 0.0)  # tikhonov term is smooth, handled in the gradient


def tomographic_fit(
    context: MeasurementSet,
    grid: GridSpec,
    region: Region,
    reg: RegularizerSpec,
    d_clamp: float = 1.0,
) -> TomographicModel:
    """Alternate closed-form (a, b) updates with projected proximal-gradient
    steps on the field until the objective change drops below tolerance."""
    m = len(context)
    if m < 3:
        raise ValueError("need at least 3 measurements to identify the path-loss pair")
    w_matrix = measurement_weights(context, grid, region)
    distances = np.linalg.norm(context.txs - context.rxs, axis=1)
    log_d = np.log10(np.maximum(distances, d_clamp))
    losses = -context.gains  # positive dB losses

    def data_objective(a, b, f_flat):
        resid = a + b * log_d + w_matrix @ f_flat - losses
        return float(resid @ resid) / m

    def objective(a, b, f_flat):
        return data_objective(a, b, f_flat) + _regularizer_value(reg.kind, reg.lam, f_flat.reshape(grid.shape))

    lam_max = _power_iteration_sq_norm(w_matrix)
    lipschitz = 2.0 * lam_max / m + (2.0 * reg.lam if reg.kind == "tikhonov" else 0.0)
    base_step = 1.0 / lipschitz if lipschitz > 0 else 1.0

    f = np.zeros(grid.num_voxels)
    a, b = _fit_offset_slope(losses - w_matrix @ f, log_d)
    trace = [objective(a, b, f)]
    converged = False
    for _ in range(reg.iterations):
        a, b = _fit_offset_slope(losses - w_matrix @ f, log_d)
        resid = a + b * log_d + w_matrix @ f - losses
        grad = (2.0 / m) * (w_matrix.T @ resid)
        if reg.kind == "tikhonov":
            grad = grad + 2.0 * reg.lam * f
        step = base_step
        prev = objective(a, b, f)
        f_new = f
        for _ in range(30):
            z = (f - step * grad).reshape(grid.shape)
            candidate = _proximal_step(reg.kind, z, step * reg.lam, reg.tv_inner_iterations).reshape(-1)
            if objective(a, b, candidate) <= prev + 1e-12:
                f_new = candidate
                break
            step *= 0.5
        f = f_new
        current = objective(a, b, f)
        trace.append(current)
        if abs(prev - current) < reg.tolerance:
            converged = True
            break
    return TomographicModel(
        grid=grid,
        region=region,
        field_estimate=f.reshape(grid.shape),
        a=a,
        b=b,
        d_clamp=d_clamp,
        regularizer=reg,
        objective_trace=trace,
        converged=converged,
    )


def tomographic_predict(model: TomographicModel, tx, rx) -> float:
    """Gain prediction in dB, same sign conventions as the forward model."""
    a = np.asarray(tx, dtype=float).reshape(3)
    b = np.asarray(rx, dtype=float).reshape(3)
    if tuple(b) < tuple(a):
        a, b = b, a
    d = float(np.linalg.norm(b - a))
    weights = segment_voxel_lengths(a, b, model.grid, model.region)
    attenuation = float(np.sum(weights * model.field_estimate))
    return -(model.a + model.b * math.log10(max(d, model.d_clamp))) - attenuation


def select_lambda(
    context: MeasurementSet,
    grid: GridSpec,
    region: Region,
    kind: str,
    candidates=None,
    rng_seed: int = 0,
    holdout_fraction: float = 0.2,
    iterations: int = 800,
) -> float:
    """Pick the regularization weight minimizing held-out MAE on a slice of
    the context.  The winning value is logged."""
    candidates = tuple(candidates) if candidates is not None else DEFAULT_LAMBDA_GRID[kind]
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x1A3B]))
    perm = rng.permutation(len(context))
    n_hold = max(1, int(round(holdout_fraction * len(context))))
    hold_idx, fit_idx = perm[:n_hold], perm[n_hold:]
    if len(fit_idx) < 3:
        raise ValueError("context too small for lambda selection")
    fit_part = context.subset(fit_idx)
    hold_part = context.subset(hold_idx)
    best_lam, best_mae = None, math.inf
    for lam in candidates:
        model = tomographic_fit(fit_part, grid, region, RegularizerSpec(kind=kind, lam=lam, iterations=iterations))
        preds = np.array(
            [tomographic_predict(model, hold_part.txs[i], hold_part.rxs[i]) for i in range(len(hold_part))]
        )
        mae = float(np.abs(preds - hold_part.gains).mean())
        if mae < best_mae:
            best_lam, best_mae = lam, mae
    logger.info("selected lambda=%g for %s (holdout MAE %.3f dB)", best_lam, kind, best_mae)
    return float(best_lam)


def export_field_csv(model: TomographicModel, path) -> None:
    """Write the fitted field as CSV rows (x_index, y_index, z_index, db_per_m)."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ix,iy,iz,db_per_m\n")
        nx, ny, nz = model.grid.shape
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    fh.write(f"{ix},{iy},{iz},{format(model.field_estimate[ix, iy, iz], '.17g')}\n")

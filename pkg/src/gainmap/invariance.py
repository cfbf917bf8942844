"""Deterministic canonicalization of (query pair, context set) inputs.

The prediction problem has five symmetries that carry no information: the two
query locations are exchangeable, gains are unchanged by horizontal
translation, by rotation about the vertical axis, by mirroring across the xz
plane, and by swapping the endpoints within any measurement.  Each stage below
quotients one of them out, so downstream learning never has to spend capacity
on them.  The final stage packs the canonical geometry into a fixed 23-row
feature matrix with one column per context measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import MeasurementSet

__all__ = [
    "QueryInput",
    "CanonicalInput",
    "NUM_FEATURES",
    "orient_query_pair",
    "shift_origin_to_first",
    "order_measurement_endpoints",
    "rotate_second_to_x_axis",
    "mirror_to_nonnegative_vote",
    "assemble_features",
    "canonicalize",
]

NUM_FEATURES = 23


@dataclass(frozen=True)
class QueryInput:
    """Two query locations plus the context the estimate conditions on."""

    x: np.ndarray  # (3,)
    y: np.ndarray  # (3,)
    context: MeasurementSet

    def __post_init__(self):
        if len(self.context) == 0:
            raise ValueError("context must be nonempty")
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).reshape(3))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class CanonicalInput:
    """Geometry after some prefix of the canonicalization stages.

    ``x`` is the translated first query point (the origin after the shift
    stage), ``x_height_raw`` its vertical coordinate before translation.
    """

    x: np.ndarray  # (3,)
    y: np.ndarray  # (3,)
    txs: np.ndarray  # (M, 3)
    rxs: np.ndarray  # (M, 3)
    x_height_raw: float


def _lex_less(a: np.ndarray, b: np.ndarray) -> bool:
    return tuple(a) < tuple(b)


def orient_query_pair(q: QueryInput) -> QueryInput:
    """Put the query point that is on average closer to the context endpoints
    first; exact ties fall back to lexicographic order on coordinates."""
    endpoints = np.concatenate([q.context.txs, q.context.rxs], axis=0)
    mean_x = float(np.linalg.norm(endpoints - q.x[None, :], axis=1).mean())
    mean_y = float(np.linalg.norm(endpoints - q.y[None, :], axis=1).mean())
    if mean_x < mean_y:
        keep = True
    elif mean_y < mean_x:
        keep = False
    else:
        keep = _lex_less(q.x, q.y) or np.array_equal(q.x, q.y)
    return q if keep else QueryInput(x=q.y, y=q.x, context=q.context)


def shift_origin_to_first(q: QueryInput) -> CanonicalInput:
    """Translate everything so the first query point becomes the origin; its
    pre-translation height is kept as a standalone feature."""
    x = q.x
    return CanonicalInput(
        x=x - x,
        y=q.y - x,
        txs=q.context.txs - x[None, :],
        rxs=q.context.rxs - x[None, :],
        x_height_raw=float(x[2]),
    )


def order_measurement_endpoints(c: CanonicalInput) -> CanonicalInput:
    """Within each measurement, put the endpoint nearer the origin first;
    equal norms fall back to lexicographic order."""
    txs = c.txs.copy()
    rxs = c.rxs.copy()
    n_tx = np.linalg.norm(txs, axis=1)
    n_rx = np.linalg.norm(rxs, axis=1)
    for m in range(len(txs)):
        swap = n_rx[m] < n_tx[m] or (n_rx[m] == n_tx[m] and _lex_less(rxs[m], txs[m]))
        if swap:
            txs[m], rxs[m] = rxs[m].copy(), txs[m].copy()
    return replace(c, txs=txs, rxs=rxs)


def rotate_second_to_x_axis(c: CanonicalInput) -> CanonicalInput:
    """Rotate about the vertical axis so the second query point's horizontal
    projection lands on the positive x semi-axis.  If that projection is the
    origin the rotation is the identity."""
    yx, yy = float(c.y[0]), float(c.y[1])
    if yx == 0.0 and yy == 0.0:
        return c
    theta = np.arctan2(yy, yx)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    def rot(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = pts.copy()
        out[:, 0] = cos_t * pts[:, 0] + sin_t * pts[:, 1]
        out[:, 1] = -sin_t * pts[:, 0] + cos_t * pts[:, 1]
        return out.reshape(points.shape)

    return replace(c, y=rot(c.y), txs=rot(c.txs), rxs=rot(c.rxs))


def mirror_to_nonnegative_vote(c: CanonicalInput) -> CanonicalInput:
    """Reflect across the xz plane iff the context endpoints' y-coordinates
    sum to a negative value (a magnitude-weighted majority vote); a zero sum
    keeps the input unreflected."""
    vote = float(c.txs[:, 1].sum() + c.rxs[:, 1].sum())
    if vote >= 0.0:
        return c

    def flip(points: np.ndarray) -> np.ndarray:
        out = points.copy()
        out[..., 1] = -out[..., 1]
        return out

    return replace(c, y=flip(c.y), txs=flip(c.txs), rxs=flip(c.rxs))


def _safe_unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0.0)


def assemble_features(
    c: CanonicalInput,
    gains,
    gain_mean: float = 0.0,
    gain_std: float = 1.0,
) -> np.ndarray:
    """Feature matrix of shape (23, M), one column per context measurement.

    Column layout: both measurement endpoints and the second query point (3
    coordinates each), their magnitudes, their unit directions (zero vectors
    stay zero), the first query point's pre-translation height, and the
    standardized measurement gain.
    """
    gains = np.asarray(gains, dtype=np.float64).reshape(-1)
    m = len(gains)
    if m != len(c.txs):
        raise ValueError("gain count must match context size")
    y = np.broadcast_to(c.y, (m, 3))
    mag_tx = np.linalg.norm(c.txs, axis=1)
    mag_rx = np.linalg.norm(c.rxs, axis=1)
    mag_y = np.linalg.norm(y, axis=1)
    std_gain = (gains - gain_mean) / gain_std
    cols = np.concatenate(
        [
            c.txs,
            c.rxs,
            y,
            mag_tx[:, None],
            mag_rx[:, None],
            mag_y[:, None],
            _safe_unit(c.txs),
            _safe_unit(c.rxs),
            _safe_unit(y),
            np.full((m, 1), c.x_height_raw),
            std_gain[:, None],
        ],
        axis=1,
    )
    return cols.T  # (23, M)


def canonicalize(
    q: QueryInput,
    gains=None,
    gain_mean: float = 0.0,
    gain_std: float = 1.0,
) -> np.ndarray:
    """Full pipeline: orient, translate, order endpoints, rotate, mirror, then
    assemble the (23, M) feature matrix.  Gains default to the context's."""
    if gains is None:
        gains = q.context.gains
    c = orient_query_pair(q)
    c = shift_origin_to_first(c)
    c = order_measurement_endpoints(c)
    c = rotate_second_to_x_axis(c)
    c = mirror_to_nonnegative_vote(c)
    return assemble_features(c, gains, gain_mean=gain_mean, gain_std=gain_std)

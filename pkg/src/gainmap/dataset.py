"""Measurement sets, episode splitting, and dataset persistence.

A measurement is a (tx, rx, gain dB) triple tagged with its environment id.
Sets built from n terminals contain all n(n-1)/2 unordered pairs.  Episodes
split a set into a context part (conditioned on) and a disjoint target part
(scored against).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .environment import Environment, Region, channel_gain

__all__ = [
    "Measurement",
    "MeasurementSet",
    "Episode",
    "place_terminals",
    "build_all_pairs",
    "split_episode",
    "save_measurement_set",
    "load_measurement_set",
    "export_csv",
]


@dataclass(frozen=True)
class Measurement:
    tx: np.ndarray
    rx: np.ndarray
    gain: float
    env_id: int


class MeasurementSet:
    """Ordered, array-backed collection of measurements from one environment."""

    def __init__(self, txs, rxs, gains, env_id: int, terminals=None, noise_std: float = 0.0):
        self.txs = np.ascontiguousarray(np.asarray(txs, dtype=np.float64).reshape(-1, 3))
        self.rxs = np.ascontiguousarray(np.asarray(rxs, dtype=np.float64).reshape(-1, 3))
        self.gains = np.ascontiguousarray(np.asarray(gains, dtype=np.float64).reshape(-1))
        if not (len(self.txs) == len(self.rxs) == len(self.gains)):
            raise ValueError("txs, rxs and gains must have equal length")
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("gains must be finite")
        self.env_id = int(env_id)
        self.terminals = None if terminals is None else np.ascontiguousarray(
            np.asarray(terminals, dtype=np.float64).reshape(-1, 3)
        )
        self.noise_std = float(noise_std)
        for arr in (self.txs, self.rxs, self.gains):
            arr.setflags(write=False)
        if self.terminals is not None:
            self.terminals.setflags(write=False)

    def __len__(self) -> int:
        return len(self.gains)

    def __getitem__(self, m: int) -> Measurement:
        return Measurement(tx=self.txs[m], rx=self.rxs[m], gain=float(self.gains[m]), env_id=self.env_id)

    def __iter__(self):
        return (self[m] for m in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MeasurementSet):
            return NotImplemented
        same_terms = (
            (self.terminals is None and other.terminals is None)
            or (
                self.terminals is not None
                and other.terminals is not None
                and np.array_equal(self.terminals, other.terminals)
            )
        )
        return (
            self.env_id == other.env_id
            and self.noise_std == other.noise_std
            and same_terms
            and np.array_equal(self.txs, other.txs)
            and np.array_equal(self.rxs, other.rxs)
            and np.array_equal(self.gains, other.gains)
        )

    def subset(self, indices) -> "MeasurementSet":
        idx = np.asarray(indices, dtype=int)
        return MeasurementSet(
            self.txs[idx], self.rxs[idx], self.gains[idx], self.env_id, noise_std=self.noise_std
        )


@dataclass(frozen=True)
class Episode:
    context: MeasurementSet
    targets: MeasurementSet


def place_terminals(rng_seed: int, region: Region, n: int) -> np.ndarray:
    """n terminal locations uniform over the region volume, shape (n, 3)."""
    if n < 2:
        raise ValueError("need at least 2 terminals")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x7E51]))
    return rng.uniform(0.0, 1.0, size=(n, 3)) * region.extents[None, :]


def build_all_pairs(
    env: Environment, terminals, noise_std: float = 0.0, rng_seed: int = 0
) -> MeasurementSet:
    """All n(n-1)/2 pairwise gains between the terminals, plus optional
    Gaussian measurement noise (dB)."""
    terminals = np.asarray(terminals, dtype=np.float64).reshape(-1, 3)
    n = len(terminals)
    if n < 2:
        raise ValueError("need at least 2 terminals")
    iu, ju = np.triu_indices(n, k=1)
    gains = np.array([channel_gain(env, terminals[i], terminals[j]) for i, j in zip(iu, ju)])
    if noise_std > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x401E]))
        gains = gains + rng.normal(0.0, noise_std, size=gains.shape)
    return MeasurementSet(
        txs=terminals[iu],
        rxs=terminals[ju],
        gains=gains,
        env_id=env.id,
        terminals=terminals,
        noise_std=noise_std,
    )


def split_episode(
    mset: MeasurementSet, rng_seed: int, context_size: int, target_cap: int | None = 32
) -> Episode:
    """Uniformly random disjoint context/target split.

    The context gets exactly ``context_size`` measurements; the targets are the
    complement, subsampled to at most ``target_cap`` (None keeps all).
    """
    m = len(mset)
    if not 1 <= context_size < m:
        raise ValueError(f"context_size must be in [1, {m - 1}], got {context_size}")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x5411]))
    perm = rng.permutation(m)
    ctx_idx = perm[:context_size]
    tgt_idx = perm[context_size:]
    if target_cap is not None:
        tgt_idx = tgt_idx[:target_cap]
    return Episode(context=mset.subset(ctx_idx), targets=mset.subset(tgt_idx))


# ---------------------------------------------------------------------------
# Persistence: ASCII header, then terminal coordinates and fixed-width records
# (tx xyz, rx xyz, gain) as little-endian float64.
# ---------------------------------------------------------------------------

_SET_MAGIC = "GAINMAP-SET v1"


def save_measurement_set(mset: MeasurementSet, path) -> None:
    n_terms = 0 if mset.terminals is None else len(mset.terminals)
    header = io.StringIO()
    header.write(_SET_MAGIC + "\n")
    header.write(f"env_id = {mset.env_id}\n")
    header.write(f"terminals = {n_terms}\n")
    header.write(f"noise_std = {mset.noise_std!r}\n")
    header.write(f"measurements = {len(mset)}\n")
    header.write("end\n")
    records = np.concatenate([mset.txs, mset.rxs, mset.gains[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        if n_terms:
            fh.write(np.ascontiguousarray(mset.terminals, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(records, dtype="<f8").tobytes())


def load_measurement_set(path) -> MeasurementSet:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").rstrip("\n")
        if magic != _SET_MAGIC:
            raise ValueError(f"not a measurement-set file (magic {magic!r})")
        header = {}
        while True:
            line = fh.readline().decode("ascii").rstrip("\n")
            if line == "end":
                break
            key, val = (part.strip() for part in line.split("=", 1))
            header[key] = val
        n_terms = int(header["terminals"])
        n_meas = int(header["measurements"])
        terminals = None
        if n_terms:
            terminals = np.frombuffer(fh.read(n_terms * 3 * 8), dtype="<f8").reshape(n_terms, 3)
        records = np.frombuffer(fh.read(n_meas * 7 * 8), dtype="<f8").reshape(n_meas, 7)
    return MeasurementSet(
        txs=records[:, 0:3],
        rxs=records[:, 3:6],
        gains=records[:, 6],
        env_id=int(header["env_id"]),
        terminals=terminals,
        noise_std=float(header["noise_std"]),
    )


def export_csv(mset: MeasurementSet, path) -> None:
    """Human-readable export with one row per measurement."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,gain_db\n")
        for m in range(len(mset)):
            row = np.concatenate([mset.txs[m], mset.rxs[m], [mset.gains[m]]])
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")

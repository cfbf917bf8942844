"""CRETE: a causal-attention set regressor over canonicalized measurements.

Each context measurement becomes one token via a learnable affine embedding of
its 23-row feature column.  A stack of pre-norm residual blocks (multi-head
self-attention + GELU MLP) processes the tokens; with causal masking token m
sees only tokens 1..m, so a per-token scalar head yields one gain estimate per
context prefix.  No positional encoding is used: measurement order carries no
information, and the causal mask alone provides the prefix structure.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Episode
from .invariance import NUM_FEATURES, QueryInput, canonicalize

__all__ = [
    "ModelConfig",
    "ModelParams",
    "NonFiniteActivationError",
    "embed",
    "transformer_forward",
    "predict_prefixes",
    "predict_prefixes_batch",
    "estimate",
    "episode_loss",
    "episode_features",
    "loss_from_features",
    "save_checkpoint",
    "load_checkpoint",
]


class NonFiniteActivationError(RuntimeError):
    """A block produced non-finite activations."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.  The desk-scale default fits in-memory training;
    ``paper_scale`` is the large reference configuration."""

    num_blocks: int = 4
    num_heads: int = 2
    embed_dim: int = 64
    mlp_ratio: int = 4
    causal: bool = True
    coordinate_scale: float = 200.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        # The 3x MLP keeps the 12-block, 128-dim stack near the 2M-parameter budget.
        return cls(num_blocks=12, num_heads=2, embed_dim=128, mlp_ratio=3)


def _feature_scales(config: ModelConfig) -> np.ndarray:
    """Nominal magnitude of each feature row, used to condition the embedding
    initialization (coordinates span hundreds of meters, unit vectors span 1)."""
    s = np.ones(NUM_FEATURES)
    s[0:9] = config.coordinate_scale  # endpoint and query coordinates
    s[9:12] = config.coordinate_scale  # their magnitudes
    s[12:21] = 1.0  # unit directions
    s[21] = 10.0  # query height
    s[22] = 1.0  # standardized gain
    return s


class ModelParams:
    """Named parameter tensors plus the gain standardization constants."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], gain_mean: float = 0.0, gain_std: float = 1.0):
        self.config = config
        self._tensors = dict(tensors)
        self.gain_mean = float(gain_mean)
        self.gain_std = float(gain_std)
        if self.gain_std <= 0:
            raise ValueError("gain_std must be positive")

    @classmethod
    def new(cls, config: ModelConfig, seed: int = 0, gain_mean: float = 0.0, gain_std: float = 1.0) -> "ModelParams":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x30DE]))
        d = config.embed_dim
        h = config.mlp_hidden
        residual_scale = 1.0 / math.sqrt(2.0 * config.num_blocks)

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        t: dict[str, np.ndarray] = {}
        t["embed.w"] = normal((NUM_FEATURES, d), 1.0 / math.sqrt(NUM_FEATURES)) / _feature_scales(config)[:, None]
        t["embed.b"] = np.zeros(d)
        for i in range(config.num_blocks):
            p = f"block{i}"
            t[f"{p}.ln1.gain"] = np.ones(d)
            t[f"{p}.ln1.bias"] = np.zeros(d)
            for name in ("wq", "wk", "wv"):
                t[f"{p}.attn.{name}"] = normal((d, d), 1.0 / math.sqrt(d))
            t[f"{p}.attn.wo"] = normal((d, d), residual_scale / math.sqrt(d))
            for name in ("bq", "bk", "bv", "bo"):
                t[f"{p}.attn.{name}"] = np.zeros(d)
            t[f"{p}.ln2.gain"] = np.ones(d)
            t[f"{p}.ln2.bias"] = np.zeros(d)
            t[f"{p}.mlp.w1"] = normal((d, h), 1.0 / math.sqrt(d))
            t[f"{p}.mlp.b1"] = np.zeros(h)
            t[f"{p}.mlp.w2"] = normal((h, d), residual_scale / math.sqrt(h))
            t[f"{p}.mlp.b2"] = np.zeros(d)
        t["final_ln.gain"] = np.ones(d)
        t["final_ln.bias"] = np.zeros(d)
        t["head.w"] = np.zeros((d, 1))
        t["head.b"] = np.zeros(1)
        tensors = {name: Tensor(value, requires_grad=True) for name, value in t.items()}
        return cls(config, tensors, gain_mean=gain_mean, gain_std=gain_std)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.value.copy(), requires_grad=True) for k, v in self._tensors.items()}
        return ModelParams(self.config, tensors, self.gain_mean, self.gain_std)

    def set_standardization(self, mean: float, std: float) -> None:
        if std <= 0:
            raise ValueError("gain_std must be positive")
        self.gain_mean = float(mean)
        self.gain_std = float(std)


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(m: int) -> np.ndarray:
    mask = _MASK_CACHE.get(m)
    if mask is None:
        mask = np.zeros((m, m))
        mask[np.triu_indices(m, k=1)] = -np.inf
        mask.setflags(write=False)
        _MASK_CACHE[m] = mask
    return mask


def _attention(x: Tensor, params: ModelParams, block: int, config: ModelConfig) -> Tensor:
    b, m, d = x.value.shape
    heads, dh = config.num_heads, config.head_dim
    p = f"block{block}.attn"
    q = ad.add(ad.matmul(x, params[f"{p}.wq"]), params[f"{p}.bq"])
    k = ad.add(ad.matmul(x, params[f"{p}.wk"]), params[f"{p}.bk"])
    v = ad.add(ad.matmul(x, params[f"{p}.wv"]), params[f"{p}.bv"])

    def split(t):
        return ad.transpose(ad.reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if config.causal:
        scores = ad.add(scores, Tensor(_causal_mask(m)))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, vh)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, m, d))
    return ad.add(ad.matmul(merged, params[f"{p}.wo"]), params[f"{p}.bo"])


def _block_stack(x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    eps = config.layer_norm_eps
    for i in range(config.num_blocks):
        h = ad.layer_norm(x, params[f"block{i}.ln1.gain"], params[f"block{i}.ln1.bias"], eps)
        x = ad.add(x, _attention(h, params, i, config))
        h = ad.layer_norm(x, params[f"block{i}.ln2.gain"], params[f"block{i}.ln2.bias"], eps)
        hidden = ad.gelu(ad.add(ad.matmul(h, params[f"block{i}.mlp.w1"]), params[f"block{i}.mlp.b1"]))
        x = ad.add(x, ad.add(ad.matmul(hidden, params[f"block{i}.mlp.w2"]), params[f"block{i}.mlp.b2"]))
        if not np.all(np.isfinite(x.value)):
            raise NonFiniteActivationError(f"non-finite activations in block {i}")
    return ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], eps)


def _token_outputs(features: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Features (B, 23, M) -> transformer outputs (B, M, D)."""
    x = ad.matmul(ad.transpose(Tensor(features), (0, 2, 1)), params["embed.w"])
    x = ad.add(x, params["embed.b"])
    return _block_stack(x, params, config)


def _token_predictions(features: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Features (B, 23, M) -> standardized per-token predictions (B, M)."""
    out = _token_outputs(features, params, config)
    b, m, _ = out.value.shape
    preds = ad.add(ad.matmul(out, params["head.w"]), params["head.b"])
    return ad.reshape(preds, (b, m))


def _pooled_predictions(features: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """Averaging readout for the non-causal variant: (B, 23, M) -> (B,)."""
    out = _token_outputs(features, params, config)
    pooled = ad.mean(out, axis=1)
    preds = ad.add(ad.matmul(pooled, params["head.w"]), params["head.b"])
    return ad.reshape(preds, (out.value.shape[0],))


# -- public operations --------------------------------------------------------


def embed(features: np.ndarray, params: ModelParams) -> Tensor:
    """Affine embedding of a (23, M) feature matrix into (embed_dim, M)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != NUM_FEATURES:
        raise ValueError(f"features must be ({NUM_FEATURES}, M), got {features.shape}")
    tokens = ad.add(ad.matmul(ad.transpose(Tensor(features)), params["embed.w"]), params["embed.b"])
    return ad.transpose(tokens)


def transformer_forward(tokens: Tensor | np.ndarray, params: ModelParams, config: ModelConfig | None = None) -> Tensor:
    """Run the block stack on an (embed_dim, M) token matrix."""
    config = config or params.config
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    d, m = tokens.value.shape
    x = ad.reshape(ad.transpose(tokens), (1, m, d))
    out = _block_stack(x, params, config)
    return ad.transpose(ad.reshape(out, (m, d)))


def query_features(query: QueryInput, params: ModelParams) -> np.ndarray:
    return canonicalize(query, gain_mean=params.gain_mean, gain_std=params.gain_std)


def predict_prefixes(query: QueryInput, params: ModelParams, config: ModelConfig | None = None) -> np.ndarray:
    """Gain estimates (dB) given the first m context measurements, m = 1..M."""
    config = config or params.config
    if not config.causal:
        raise ValueError("prefix predictions require the causal configuration")
    feats = query_features(query, params)[None, :, :]
    preds = _token_predictions(feats, params, config)
    return preds.value[0] * params.gain_std + params.gain_mean


def predict_prefixes_batch(queries: list[QueryInput], params: ModelParams, config: ModelConfig | None = None) -> np.ndarray:
    """Per-prefix predictions for queries sharing one context size, (B, M) dB."""
    config = config or params.config
    feats = np.stack([query_features(q, params) for q in queries])
    preds = _token_predictions(feats, params, config)
    return preds.value * params.gain_std + params.gain_mean


def estimate(query: QueryInput, params: ModelParams, config: ModelConfig | None = None) -> float:
    """Full-context gain estimate in dB."""
    config = config or params.config
    if config.causal:
        return float(predict_prefixes(query, params, config)[-1])
    feats = query_features(query, params)[None, :, :]
    pred = _pooled_predictions(feats, params, config)
    return float(pred.value[0] * params.gain_std + params.gain_mean)


def episode_features(episode: Episode, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Stacked per-target feature tensors (B, 23, M) and standardized target
    gains (B,) for one episode."""
    ctx = episode.context
    feats = np.stack(
        [
            query_features(QueryInput(x=episode.targets.txs[i], y=episode.targets.rxs[i], context=ctx), params)
            for i in range(len(episode.targets))
        ]
    )
    targets_std = (episode.targets.gains - params.gain_mean) / params.gain_std
    return feats, targets_std


def loss_from_features(
    params: ModelParams, features: np.ndarray, targets_std: np.ndarray, config: ModelConfig | None = None
) -> Tensor:
    """Mean squared standardized error over targets, and over context prefixes
    in the causal configuration."""
    config = config or params.config
    if config.causal:
        preds = _token_predictions(features, params, config)
        err = ad.sub(preds, Tensor(targets_std[:, None]))
    else:
        preds = _pooled_predictions(features, params, config)
        err = ad.sub(preds, Tensor(targets_std))
    return ad.mean(ad.mul(err, err))


def episode_loss(params: ModelParams, episode: Episode, config: ModelConfig | None = None) -> Tensor:
    if len(episode.targets) == 0:
        raise ValueError("episode has no targets")
    features, targets_std = episode_features(episode, params)
    return loss_from_features(params, features, targets_std, config)


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = "GAINMAP-CKPT v1"


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    header = io.StringIO()
    header.write(_CKPT_MAGIC + "\n")
    header.write(
        "config = "
        f"{cfg.num_blocks} {cfg.num_heads} {cfg.embed_dim} {cfg.mlp_ratio} "
        f"{int(cfg.causal)} {cfg.coordinate_scale!r} {cfg.layer_norm_eps!r}\n"
    )
    header.write(f"gain_standardization = {params.gain_mean!r} {params.gain_std!r}\n")
    for name, tensor in params.items():
        dims = " ".join(str(n) for n in tensor.value.shape)
        header.write(f"tensor = {name} {dims}\n")
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for _, tensor in params.items():
            fh.write(np.ascontiguousarray(tensor.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").rstrip("\n")
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        specs: list[tuple[str, tuple[int, ...]]] = []
        config = None
        gain_mean, gain_std = 0.0, 1.0
        while True:
            line = fh.readline().decode("ascii").rstrip("\n")
            if line == "end":
                break
            key, val = (part.strip() for part in line.split("=", 1))
            fields = val.split()
            if key == "config":
                config = ModelConfig(
                    num_blocks=int(fields[0]),
                    num_heads=int(fields[1]),
                    embed_dim=int(fields[2]),
                    mlp_ratio=int(fields[3]),
                    causal=bool(int(fields[4])),
                    coordinate_scale=float(fields[5]),
                    layer_norm_eps=float(fields[6]),
                )
            elif key == "gain_standardization":
                gain_mean, gain_std = float(fields[0]), float(fields[1])
            elif key == "tensor":
                specs.append((fields[0], tuple(int(n) for n in fields[1:])))
        if config is None:
            raise ValueError("checkpoint missing config line")
        tensors = {}
        for name, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            tensors[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), requires_grad=True)
    return ModelParams(config, tensors, gain_mean=gain_mean, gain_std=gain_std)

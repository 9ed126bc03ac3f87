"""Spatio-temporal encoder with differential, cluster and temporal attention.

Array layouts used throughout:

* region stream ``X``: ``(B, T, N, d)``
* cluster stream ``X_a``: ``(B, T, M, d)``
* calendar features: ``(B, T, 1, 8)`` (``[time_of_day, weekday one-hot]``),
  shared by every region

All branches are single-head.  Attention weights can be captured by passing a
list as ``attn``; each branch appends ``(name, weights)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray

N_TIME_FEATURES = 8


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 6
    input_steps: int = 6
    horizon: int = 1
    n_features: int = 1
    level_counts: Sequence[int] = ()
    n_temporal_slots: int = 3
    lambda_init: float = 0.8
    mlp_expansion: int = 4
    aggregation: str = "sum"
    dtype: str = "float64"

    def __post_init__(self):
        self.level_counts = tuple(int(c) for c in self.level_counts)
        if self.d_model <= 0 or self.d_model % 2:
            raise ValueError("d_model must be a positive even number")
        for name in ("n_layers", "input_steps", "horizon", "n_features", "n_temporal_slots",
                     "mlp_expansion"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.aggregation not in ("sum", "mean"):
            raise ValueError("aggregation must be 'sum' or 'mean'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["level_counts"] = list(self.level_counts)
        return doc


class ModelParameters:
    """Name -> :class:`DiffArray` registry with deterministic ordering."""

    def __init__(self):
        self._arrays: dict[str, DiffArray] = {}

    def register(self, name: str, value: np.ndarray, dtype=np.float64) -> DiffArray:
        if name in self._arrays:
            raise KeyError(f"parameter {name!r} registered twice")
        arr = DiffArray(np.array(value, dtype=dtype), requires_grad=True)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> DiffArray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def n_values(self) -> int:
        return sum(p.size for p in self._arrays.values())

    def zero_grad(self) -> None:
        for p in self._arrays.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.astype(np.float64, copy=True) for name, p in self._arrays.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._arrays) - set(state)
        extra = set(state) - set(self._arrays)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self._arrays.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


# -- building blocks -----------------------------------------------------------

def sinusoidal_encoding(steps: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("positional encoding width must be even")
    pos = np.arange(steps, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((steps, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def embed(x, time_feats, w_raw, w_tod, w_dow, spatial, positional) -> DiffArray:
    """Sum of demand, calendar, positional and per-node identity embeddings.

    ``x`` is ``(B, T, N, D)``; ``spatial`` is ``(N, d)``; ``positional`` ``(T, d)``.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[-1] != w_raw.shape[0]:
        raise ValueError(f"embed: input of shape {x.shape} does not match W_raw {w_raw.shape}")
    if x.shape[2] != spatial.shape[0] or x.shape[1] != np.shape(positional)[0]:
        raise ValueError(f"embed: input {x.shape} inconsistent with spatial {spatial.shape} "
                         f"/ positional {np.shape(positional)}")
    dtype = w_raw.dtype
    tf = np.asarray(time_feats, dtype=dtype)
    out = dc.matmul(x.astype(dtype, copy=False), w_raw)
    out = out + dc.matmul(tf[..., :1], w_tod) + dc.matmul(tf[..., 1:], w_dow)
    pos = positional if isinstance(positional, DiffArray) else np.asarray(positional, dtype=dtype)
    return out + dc.reshape(dc.as_diff(pos), (1, pos.shape[0], 1, pos.shape[1])) + spatial


def aggregate_demand(x, cluster_map, mode: str = "sum") -> np.ndarray:
    """Cluster-level demand ``(B, T, M, D)`` from region demand ``(B, T, N, D)``."""
    cmap = np.asarray(cluster_map, dtype=np.asarray(x).dtype)
    if mode == "mean":
        cmap = cmap / cmap.sum(axis=1, keepdims=True)
    return np.einsum("mn,btnd->btmd", cmap, x)


def aggregate_stream(x, time_feats, cluster_map, w_raw, w_tod, w_dow, cluster_spatial, positional,
                     mode: str = "sum") -> DiffArray:
    agg = aggregate_demand(x, cluster_map, mode)
    tf = np.asarray(time_feats)[:, :, :1]
    return embed(agg, tf, w_raw, w_tod, w_dow, cluster_spatial, positional)


def lambda_value(lq1, lk1, lq2, lk2, lambda_init: float) -> DiffArray:
    """``exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init`` as a scalar array."""
    return dc.exp((lq1 * lk1).sum()) - dc.exp((lq2 * lk2).sum()) + lambda_init


def _log(attn, name, weights):
    if attn is not None:
        attn.append((name, weights.data))


def spatial_differential_attention(x, w_q, w_k, w_v, lam, attn=None) -> DiffArray:
    """Difference of two softmax maps over regions, scaled by ``lam``."""
    x = dc.as_diff(x)
    d = w_q.shape[1]
    if d % 2 or x.shape[-1] != w_q.shape[0]:
        raise ValueError(f"spatial attention: input width {x.shape[-1]} vs projection {w_q.shape}")
    half = d // 2
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    scale = 1.0 / math.sqrt(half)
    a1 = dc.softmax_last_axis((q[..., :half] @ k[..., :half].mT) * scale)
    a2 = dc.softmax_last_axis((q[..., half:] @ k[..., half:].mT) * scale)
    _log(attn, "sda.1", a1)
    _log(attn, "sda.2", a2)
    return (a1 - lam * a2) @ v


def spatial_cluster_attention(xa, w_q, w_k, w_v, separation, attn=None) -> DiffArray:
    """Cluster-level attention redistributed to regions through ``separation`` (M, N)."""
    xa = dc.as_diff(xa)
    if separation.shape[0] != xa.shape[2]:
        raise ValueError(f"separation {separation.shape} does not match {xa.shape[2]} clusters")
    d = w_q.shape[1]
    q, k, v = xa @ w_q, xa @ w_k, xa @ w_v
    scores = (q @ k.mT) * (1.0 / math.sqrt(d))
    weights = dc.softmax_last_axis(dc.swap_last(dc.as_diff(separation)) @ scores)
    _log(attn, "sca", weights)
    return weights @ v


def temporal_self_attention(x, w_q, w_k, w_v, attn=None) -> DiffArray:
    xt = dc.permute(dc.as_diff(x), (0, 2, 1, 3))
    d = w_q.shape[1]
    q, k, v = xt @ w_q, xt @ w_k, xt @ w_v
    weights = dc.softmax_last_axis((q @ k.mT) * (1.0 / math.sqrt(d)))
    _log(attn, "tsa", weights)
    return dc.permute(weights @ v, (0, 2, 1, 3))


def temporal_aggregation_attention(x, time_feats, slots, w_k, w_v, w_sep, attn=None) -> DiffArray:
    """Attention from ``P`` learned slot queries, restored to steps by calendar features.

    ``slots`` is ``(N, P, d)``; ``w_sep`` is ``(8, P)``.
    """
    x = dc.as_diff(x)
    if w_sep.shape[0] != N_TIME_FEATURES or slots.shape[1] != w_sep.shape[1]:
        raise ValueError(f"restoration weight {w_sep.shape} / slots {slots.shape} mismatch")
    xt = dc.permute(x, (0, 2, 1, 3))
    d = w_k.shape[1]
    k, v = xt @ w_k, xt @ w_v
    scores = (slots @ k.mT) * (1.0 / math.sqrt(d))                      # (B, N, P, T)
    tf = np.swapaxes(np.asarray(time_feats, dtype=x.dtype), 1, 2)      # (B, 1|N, T, 8)
    restore = dc.as_diff(tf) @ w_sep                                   # (B, 1|N, T, P)
    weights = dc.softmax_last_axis(restore @ scores)                   # (B, N, T, T)
    _log(attn, "taa", weights)
    return dc.permute(weights @ v, (0, 2, 1, 3))


def feed_forward(h, w1, b1, w2, b2) -> DiffArray:
    return dc.gelu(h @ w1 + b1) @ w2 + b2


def encoder_layer(x, streams, time_feats, p: "LayerView", lambda_init: float, attn=None) -> DiffArray:
    spatial = [spatial_differential_attention(
        x, p["sda.query"], p["sda.key"], p["sda.value"],
        lambda_value(p["sda.lambda_q1"], p["sda.lambda_k1"], p["sda.lambda_q2"], p["sda.lambda_k2"],
                     lambda_init),
        attn)]
    if streams:
        total = None
        for i, xa in enumerate(streams):
            out = spatial_cluster_attention(xa, p[f"sca{i}.query"], p[f"sca{i}.key"], p[f"sca{i}.value"],
                                            p[f"sca{i}.separation"], attn)
            total = out if total is None else total + out
        spatial.append(total)
    temporal = [
        temporal_self_attention(x, p["tsa.query"], p["tsa.key"], p["tsa.value"], attn),
        temporal_aggregation_attention(x, time_feats, p["taa.slots"], p["taa.key"], p["taa.value"],
                                       p["taa.restore"], attn),
    ]
    fused = dc.concat_last_axis(spatial + temporal) @ p["out"]
    h = dc.layer_norm(fused + x, p["ln1.gain"], p["ln1.bias"])
    ff = feed_forward(h, p["mlp.w1"], p["mlp.b1"], p["mlp.w2"], p["mlp.b2"])
    return dc.layer_norm(ff + h, p["ln2.gain"], p["ln2.bias"])


class LayerView:
    """Prefix view into a :class:`ModelParameters` registry."""

    def __init__(self, params: ModelParameters, prefix: str):
        self.params, self.prefix = params, prefix

    def __getitem__(self, name: str) -> DiffArray:
        return self.params[self.prefix + name]


def init_separation_matrix(cluster_map, rng: np.random.Generator) -> np.ndarray:
    cmap = np.asarray(cluster_map, dtype=np.float64)
    return cmap * rng.uniform(0.0, 1.0, size=cmap.shape)


def _fan_in(rng, shape, fan_in=None):
    fan_in = fan_in or shape[0]
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def default_level_counts(n_regions: int) -> tuple[int, ...]:
    """One aggregation level with half as many clusters as regions."""
    return (n_regions // 2,) if n_regions >= 4 else ()


class DemandForecaster:
    """The full encoder stack plus a region-shared regression head."""

    def __init__(self, config: ModelConfig, n_regions: int, cluster_maps: Sequence[np.ndarray] = (),
                 seed: int = 0):
        self.n_regions = int(n_regions)
        self.cluster_maps = [np.asarray(m, dtype=np.float64) for m in cluster_maps]
        counts = tuple(m.shape[0] for m in self.cluster_maps)
        if config.level_counts and tuple(config.level_counts) != counts:
            raise ValueError(f"config level counts {config.level_counts} do not match hierarchy {counts}")
        self.config = config = replace(config, level_counts=counts)
        for m in self.cluster_maps:
            if m.shape[1] != self.n_regions:
                raise ValueError(f"cluster map {m.shape} does not cover {self.n_regions} regions")
            if not np.array_equal(m.sum(axis=0), np.ones(self.n_regions)):
                raise ValueError("cluster map columns must each contain exactly one 1")
        self.dtype = np.dtype(config.dtype)
        self.positional = sinusoidal_encoding(config.input_steps, config.d_model).astype(self.dtype)
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> ModelParameters:
        c = self.config
        d, n, P = c.d_model, self.n_regions, c.n_temporal_slots
        half = d // 2
        ps = ModelParameters()
        reg = lambda name, value: ps.register(name, value, self.dtype)  # noqa: E731
        reg("embed.raw", _fan_in(rng, (c.n_features, d)))
        reg("embed.time_of_day", _fan_in(rng, (1, d)))
        reg("embed.day_of_week", _fan_in(rng, (7, d)))
        reg("embed.region", 0.02 * rng.standard_normal((n, d)))
        for i, m in enumerate(self.cluster_maps):
            reg(f"embed.cluster{i}", 0.02 * rng.standard_normal((m.shape[0], d)))
        width = d * (3 + bool(self.cluster_maps))
        hidden = d * c.mlp_expansion
        for layer in range(c.n_layers):
            pre = f"layer{layer}."
            for name in ("query", "key", "value"):
                reg(pre + "sda." + name, _fan_in(rng, (d, d)))
            for name in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
                reg(pre + "sda." + name, 0.1 * rng.standard_normal(half))
            for i, m in enumerate(self.cluster_maps):
                for name in ("query", "key", "value"):
                    reg(f"{pre}sca{i}.{name}", _fan_in(rng, (d, d)))
                reg(f"{pre}sca{i}.separation", init_separation_matrix(m, rng))
            for name in ("query", "key", "value"):
                reg(pre + "tsa." + name, _fan_in(rng, (d, d)))
            reg(pre + "taa.slots", _fan_in(rng, (n, P, d), fan_in=d))
            reg(pre + "taa.key", _fan_in(rng, (d, d)))
            reg(pre + "taa.value", _fan_in(rng, (d, d)))
            reg(pre + "taa.restore", _fan_in(rng, (N_TIME_FEATURES, P)))
            reg(pre + "out", _fan_in(rng, (width, d)))
            reg(pre + "ln1.gain", np.ones(d))
            reg(pre + "ln1.bias", np.zeros(d))
            reg(pre + "mlp.w1", _fan_in(rng, (d, hidden)))
            reg(pre + "mlp.b1", np.zeros(hidden))
            reg(pre + "mlp.w2", _fan_in(rng, (hidden, d)))
            reg(pre + "mlp.b2", np.zeros(d))
            reg(pre + "ln2.gain", np.ones(d))
            reg(pre + "ln2.bias", np.zeros(d))
        reg("head.weight", _fan_in(rng, (c.input_steps * d, c.horizon * c.n_features)))
        reg("head.bias", np.zeros(c.horizon * c.n_features))
        return ps

    def embed_inputs(self, inputs, input_time):
        p = self.params
        x = embed(inputs, input_time, p["embed.raw"], p["embed.time_of_day"], p["embed.day_of_week"],
                  p["embed.region"], self.positional)
        streams = [
            aggregate_stream(inputs, input_time, m, p["embed.raw"], p["embed.time_of_day"],
                             p["embed.day_of_week"], p[f"embed.cluster{i}"], self.positional,
                             self.config.aggregation)
            for i, m in enumerate(self.cluster_maps)
        ]
        return x, streams

    def forward(self, inputs, input_time, attn=None) -> DiffArray:
        """Normalized-scale predictions ``(B, H, N, D)`` for ``(B, T, N, D)`` inputs."""
        c = self.config
        inputs = np.asarray(inputs, dtype=self.dtype)
        if inputs.ndim != 4 or inputs.shape[1:] != (c.input_steps, self.n_regions, c.n_features):
            raise ValueError(f"expected inputs (B, {c.input_steps}, {self.n_regions}, {c.n_features}), "
                             f"got {inputs.shape}")
        time_feats = np.asarray(input_time, dtype=self.dtype)
        x, streams = self.embed_inputs(inputs, time_feats)
        for layer in range(c.n_layers):
            x = encoder_layer(x, streams, time_feats, LayerView(self.params, f"layer{layer}."),
                              c.lambda_init, attn)
        b, t, n, d = x.shape
        flat = dc.reshape(dc.permute(x, (0, 2, 1, 3)), (b, n, t * d))
        out = flat @ self.params["head.weight"] + self.params["head.bias"]
        out = dc.reshape(out, (b, n, c.horizon, c.n_features))
        return dc.permute(out, (0, 2, 1, 3))

    __call__ = forward

    def predict(self, inputs, input_time, batch_size: int = 256) -> np.ndarray:
        """Forward pass without recording gradients, in chunks."""
        outs = []
        with dc.no_grad():
            for start in range(0, len(inputs), batch_size):
                stop = start + batch_size
                outs.append(self.forward(inputs[start:stop], input_time[start:stop]).data)
        return np.concatenate(outs, axis=0)

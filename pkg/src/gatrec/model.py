"""Multi-head graph attention stack with hand-derived reverse-mode gradients.

Each layer, per head ``h``::

    z_i    = W_h^T x_i
    e_ij   = leaky(a_h[:d] . z_i + a_h[d:] . z_j)        j in N(i) + {i}
    alpha  = softmax_j(e_ij)                              (dropout on alpha in training)
    m_i    = sum_j alpha_ij z_j

Heads are concatenated (hidden layers) or averaged (last layer), then
``out = leaky(LayerNorm(m + S x))``. All arithmetic is float64; neighborhood
reductions run in CSR row order, so results do not depend on threading.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import BipartiteGraph, NodeIndex


class NumericError(FloatingPointError):
    pass


class InitMode(str, Enum):
    TEXT = "text"
    RANDOM = "random"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 384
    hidden_dim: int = 64
    heads: int = 4
    n_layers: int = 3
    dropout: float = 0.2
    attn_slope: float = 0.2
    act_slope: float = 0.2
    ln_eps: float = 1e-8

    def layer_dims(self) -> list[tuple[int, int, bool]]:
        """(d_in, d_head, concat) per layer."""
        dims = []
        d_in = self.input_dim
        for k in range(self.n_layers):
            last = k == self.n_layers - 1
            d_head = self.hidden_dim if last else self.hidden_dim // self.heads
            dims.append((d_in, d_head, not last))
            d_in = self.hidden_dim
        return dims


@dataclass
class LayerParams:
    W: np.ndarray  # (heads, d_in, d_head)
    att: np.ndarray  # (heads, 2 * d_head): [target half | neighbor half]
    skip: np.ndarray  # (d_in, d_out)
    gamma: np.ndarray  # (d_out,)
    beta: np.ndarray  # (d_out,)
    concat: bool = True

    FIELDS = ("W", "att", "skip", "gamma", "beta")

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def d_head(self) -> int:
        return self.W.shape[2]

    @property
    def d_out(self) -> int:
        return self.skip.shape[1]


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list[LayerParams]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Flat (name, array) view in checkpoint order: layer by layer, fields in ``LayerParams.FIELDS`` order."""
        return [(f"layer{k}.{f}", getattr(layer, f)) for k, layer in enumerate(self.layers) for f in LayerParams.FIELDS]

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, [
            replace(layer, **{f: np.zeros_like(getattr(layer, f)) for f in LayerParams.FIELDS}) for layer in self.layers
        ])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [
            replace(layer, **{f: getattr(layer, f).copy() for f in LayerParams.FIELDS}) for layer in self.layers
        ])


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    b = xavier_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=shape)


def init_params(
    seed: int,
    config: ModelConfig = ModelConfig(),
    mode: InitMode | str = InitMode.TEXT,
    n_nodes: int = 0,
    text_features: Optional[np.ndarray] = None,
) -> tuple[ModelParams, np.ndarray]:
    """Xavier-initialized parameters plus the initial node-feature matrix.

    ``TEXT`` takes the features from ``text_features`` (rows in node order);
    ``RANDOM`` draws an ``n_nodes x input_dim`` Xavier matrix instead.
    """
    mode = InitMode(mode)
    weight_rng, feature_rng = (np.random.Generator(np.random.PCG64(s))
                               for s in np.random.SeedSequence(seed).spawn(2))
    layers = []
    for d_in, d_head, concat in config.layer_dims():
        H = config.heads
        d_out = H * d_head if concat else d_head
        W = xavier_uniform(weight_rng, (H, d_in, d_head), d_in, d_head)
        att = xavier_uniform(weight_rng, (H, 2 * d_head), 2 * d_head, 1)
        if d_in == d_out:
            skip = np.eye(d_in)
        else:
            skip = xavier_uniform(weight_rng, (d_in, d_out), d_in, d_out)
        layers.append(LayerParams(W, att, skip, np.ones(d_out), np.zeros(d_out), concat))
    params = ModelParams(config, layers)
    if mode is InitMode.TEXT:
        if text_features is None:
            raise ValueError("text init needs text_features")
        features = np.asarray(text_features, dtype=np.float64)
    else:
        n = n_nodes or (0 if text_features is None else len(text_features))
        features = xavier_uniform(feature_rng, (n, config.input_dim), config.input_dim, n)
    if features.ndim != 2 or features.shape[1] != config.input_dim:
        raise ValueError(f"features must be (N, {config.input_dim}), got {features.shape}")
    return params, features


# ---------------------------------------------------------------------------
# forward


def leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _leaky_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, 1.0, slope)


def _segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    # every CSR row is nonempty (self-loops), so reduceat is exact
    return np.add.reduceat(values, indptr[:-1], axis=-1)


def _csr(data: np.ndarray, graph: BipartiteGraph) -> sp.csr_matrix:
    n = graph.n_nodes
    return sp.csr_matrix((data, graph.indices, graph.indptr), shape=(n, n))


@dataclass
class LayerCache:
    x: np.ndarray
    Z: np.ndarray  # (H, N, d_head)
    pre: np.ndarray  # (H, E) attention logits before LeakyReLU
    alpha: np.ndarray  # (H, E)
    xhat: np.ndarray
    rstd: np.ndarray
    y: np.ndarray  # pre-activation layer output


@dataclass
class ForwardState:
    graph: BipartiteGraph
    features: np.ndarray
    layers: list[LayerCache] = field(default_factory=list)
    output: Optional[np.ndarray] = None


def attention_coefficients(
    e: np.ndarray, graph: BipartiteGraph, keep: Optional[np.ndarray] = None
) -> np.ndarray:
    """Row-wise softmax of per-edge logits ``e`` (heads, E), optionally restricted to ``keep``."""
    indptr, rows = graph.indptr, graph.rows
    mx = np.maximum.reduceat(e, indptr[:-1], axis=-1)
    ex = np.exp(e - mx[:, rows])
    if keep is not None:
        dropped = ex * keep
        den = _segment_sum(dropped, indptr)
        # a row whose survivors all vanished keeps its full neighborhood
        empty = den == 0
        if empty.any():
            dropped = np.where(empty[:, rows], ex, dropped)
            den = _segment_sum(dropped, indptr)
        ex = dropped
    else:
        den = _segment_sum(ex, indptr)
    return ex / den[:, rows]


def gat_layer_forward(
    x: np.ndarray,
    graph: BipartiteGraph,
    layer: LayerParams,
    config: ModelConfig = ModelConfig(),
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    layer_no: int = 0,
    cache: Optional[list] = None,
) -> np.ndarray:
    rows, cols = graph.rows, graph.indices
    H, dh = layer.heads, layer.d_head
    Z = np.einsum("nd,hde->hne", x, layer.W)
    s = np.einsum("hne,he->hn", Z, layer.att[:, :dh])
    t = np.einsum("hne,he->hn", Z, layer.att[:, dh:])
    pre = s[:, rows] + t[:, cols]
    e = leaky(pre, config.attn_slope)
    keep = None
    if train_mode and config.dropout > 0:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for attention dropout")
        keep = rng.random(e.shape) >= config.dropout
    alpha = attention_coefficients(e, graph, keep)
    heads_out = [_csr(alpha[h], graph) @ Z[h] for h in range(H)]
    m = np.concatenate(heads_out, axis=1) if layer.concat else sum(heads_out) / H
    h_sum = m + x @ layer.skip
    mu = h_sum.mean(axis=1, keepdims=True)
    xc = h_sum - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + config.ln_eps)
    xhat = xc * rstd
    y = layer.gamma * xhat + layer.beta
    out = leaky(y, config.act_slope)
    if not np.isfinite(out).all():
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise NumericError(f"non-finite output in layer {layer_no} at node {bad}")
    if cache is not None:
        cache.append(LayerCache(x, Z, pre, alpha, xhat, rstd, y))
    return out


def forward_state(
    graph: BipartiteGraph,
    params: ModelParams,
    features: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForwardState:
    cfg = params.config
    if features.shape != (graph.n_nodes, cfg.input_dim):
        raise ValueError(f"features must be ({graph.n_nodes}, {cfg.input_dim}), got {features.shape}")
    state = ForwardState(graph, features)
    x = features
    for k, layer in enumerate(params.layers):
        x = gat_layer_forward(x, graph, layer, cfg, train_mode, rng, k, state.layers)
    state.output = x
    return state


def forward(
    graph: BipartiteGraph,
    params: ModelParams,
    features: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    out = forward_state(graph, params, features, train_mode, rng).output
    return out[: graph.n_users], out[graph.n_users :]


def score(user_vec, item_vec) -> float:
    u, i = np.asarray(user_vec, dtype=np.float64), np.asarray(item_vec, dtype=np.float64)
    if u.shape != i.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {i.shape}")
    return float(u @ i)


# ---------------------------------------------------------------------------
# backward


def gat_layer_backward(
    d_out: np.ndarray,
    c: LayerCache,
    graph: BipartiteGraph,
    layer: LayerParams,
    config: ModelConfig,
    need_input_grad: bool = True,
) -> tuple[LayerParams, Optional[np.ndarray]]:
    rows, cols, indptr = graph.rows, graph.indices, graph.indptr
    n = graph.n_nodes
    H, dh = layer.heads, layer.d_head

    dy = d_out * _leaky_grad(c.y, config.act_slope)
    d_gamma = (dy * c.xhat).sum(axis=0)
    d_beta = dy.sum(axis=0)
    dxhat = dy * layer.gamma
    dh_sum = c.rstd * (dxhat - dxhat.mean(axis=1, keepdims=True)
                       - c.xhat * (dxhat * c.xhat).mean(axis=1, keepdims=True))
    d_skip = c.x.T @ dh_sum
    dx = dh_sum @ layer.skip.T if need_input_grad else None

    dW = np.zeros_like(layer.W)
    d_att = np.zeros_like(layer.att)
    for h in range(H):
        dm = dh_sum[:, h * dh:(h + 1) * dh] if layer.concat else dh_sum / H
        Zh = c.Z[h]
        a = c.alpha[h]
        dZ = _csr(a, graph).T @ dm
        d_alpha = np.einsum("ed,ed->e", dm[rows], Zh[cols])
        de = a * (d_alpha - _segment_sum(a * d_alpha, indptr)[rows])
        dpre = de * _leaky_grad(c.pre[h], config.attn_slope)
        ds = _segment_sum(dpre, indptr)
        dt = np.bincount(cols, weights=dpre, minlength=n)
        a_tgt, a_nbr = layer.att[h, :dh], layer.att[h, dh:]
        dZ += np.outer(ds, a_tgt) + np.outer(dt, a_nbr)
        d_att[h, :dh] = ds @ Zh
        d_att[h, dh:] = dt @ Zh
        dW[h] = c.x.T @ dZ
        if need_input_grad:
            dx += dZ @ layer.W[h].T
    grads = LayerParams(dW, d_att, d_skip, d_gamma, d_beta, layer.concat)
    return grads, dx


def backward(
    state: Optional[ForwardState],
    params: ModelParams,
    d_user: np.ndarray,
    d_item: np.ndarray,
    features_grad: bool = False,
) -> tuple[ModelParams, Optional[np.ndarray]]:
    """Gradients of a loss w.r.t. every parameter (and optionally the input features).

    ``d_user``/``d_item`` are the loss gradients w.r.t. the final user and item
    embedding blocks; ``state`` must come from ``forward_state`` on the same params.
    """
    if state is None or not state.layers:
        raise RuntimeError("backward needs the retained forward state (call forward_state first)")
    d = np.concatenate([d_user, d_item], axis=0)
    grads = []
    for k in range(len(params.layers) - 1, -1, -1):
        need = k > 0 or features_grad
        g, d = gat_layer_backward(d, state.layers[k], state.graph, params.layers[k], params.config, need)
        grads.append(g)
    return ModelParams(params.config, grads[::-1]), (d if features_grad else None)


# ---------------------------------------------------------------------------
# trained model + checkpoint


@dataclass
class TrainedModel:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    params: ModelParams
    node_index: NodeIndex
    meta: dict = field(default_factory=dict)

    def user_vector(self, user_id: int) -> np.ndarray:
        if not self.node_index.has_user(user_id):
            raise KeyError(f"user {user_id} unknown to model")
        return self.user_embeddings[self.node_index.user(user_id)]

    def score_items(self, user_id: int, item_ids: Sequence[int]) -> np.ndarray:
        u = self.user_vector(user_id)
        rows = [self.node_index.item(i) - self.node_index.n_users for i in item_ids]
        return self.item_embeddings[rows] @ u


CKPT_MAGIC = b"GATC"
CKPT_VERSION = 1


def save_checkpoint(path, model: TrainedModel) -> None:
    """Binary little-endian layout.

    header: magic(4) | version u32 | seed u64 |
            input_dim, hidden_dim, heads, n_layers, n_users, n_items u32 |
            dropout, attn_slope, act_slope, ln_eps f64
    then:   user ids u64[U], item ids u64[I],
            every tensor of ``ModelParams.tensors()`` as f32 (C order),
            user embeddings f32[U, hidden], item embeddings f32[I, hidden]
    """
    cfg = model.params.config
    ni = model.node_index
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<IQ", CKPT_VERSION, int(model.meta.get("seed", 0)))
    buf += struct.pack("<6I", cfg.input_dim, cfg.hidden_dim, cfg.heads, cfg.n_layers, ni.n_users, ni.n_items)
    buf += struct.pack("<4d", cfg.dropout, cfg.attn_slope, cfg.act_slope, cfg.ln_eps)
    buf += np.asarray(ni.user_ids, dtype="<u8").tobytes()
    buf += np.asarray(ni.item_ids, dtype="<u8").tobytes()
    for _, arr in model.params.tensors():
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += np.ascontiguousarray(model.user_embeddings, dtype="<f4").tobytes()
    buf += np.ascontiguousarray(model.item_embeddings, dtype="<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, seed = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    input_dim, hidden, heads, n_layers, n_users, n_items = struct.unpack_from("<6I", data, off)
    off += 24
    dropout, attn_slope, act_slope, ln_eps = struct.unpack_from("<4d", data, off)
    off += 32
    cfg = ModelConfig(input_dim, hidden, heads, n_layers, dropout, attn_slope, act_slope, ln_eps)

    def take(dtype, shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * np.dtype(dtype).itemsize
        return arr

    user_ids = tuple(int(u) for u in take("<u8", (n_users,)))
    item_ids = tuple(int(i) for i in take("<u8", (n_items,)))
    template, _ = init_params(0, cfg, InitMode.RANDOM, n_nodes=1)
    layers = []
    for layer in template.layers:
        vals = {f: take("<f4", getattr(layer, f).shape).astype(np.float64) for f in LayerParams.FIELDS}
        layers.append(LayerParams(**vals, concat=layer.concat))
    users = take("<f4", (n_users, hidden)).astype(np.float64)
    items = take("<f4", (n_items, hidden)).astype(np.float64)
    return TrainedModel(users, items, ModelParams(cfg, layers), NodeIndex(user_ids, item_ids), {"seed": seed})

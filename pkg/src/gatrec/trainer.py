"""Hybrid BPR + cosine-alignment training with AdamW, plateau decay and early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, TextIO

import numpy as np

from .graph import BipartiteGraph
from .model import (
    ModelConfig,
    ModelParams,
    NumericError,
    TrainedModel,
    backward,
    forward_state,
    init_params,
    InitMode,
)

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    lr_init: float = 1e-3
    lr_factor: float = 0.4
    lr_patience: int = 5
    early_stop_patience: int = 10
    weight_decay: float = 1e-5
    batch_size: int = 1024
    max_epochs: int = 100
    seed: int = 0
    epsilon_neg: float = 0.8
    val_fraction: float = 0.1
    train_features: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.epsilon_neg <= 1:
            raise ValueError("epsilon_neg must be in [0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0 < self.lr_factor <= 1 or self.lr_init <= 0:
            raise ValueError("lr_init must be > 0 and lr_factor in (0, 1]")


# ---------------------------------------------------------------------------
# losses


def bpr_loss(s_pos: float, s_neg: float) -> float:
    """-ln sigmoid(s_pos - s_neg), as softplus(-(s_pos - s_neg))."""
    return float(np.logaddexp(0.0, -(s_pos - s_neg)))


def cosine_term(u, i) -> float:
    u, i = np.asarray(u, dtype=np.float64), np.asarray(i, dtype=np.float64)
    nu, ni = np.linalg.norm(u), np.linalg.norm(i)
    if nu == 0 or ni == 0:
        return 1.0
    return float(1.0 - (u @ i) / (nu * ni))


def total_loss_and_grad(
    batch: np.ndarray, embeddings: np.ndarray, alpha: float
) -> tuple[float, np.ndarray]:
    """Mean hybrid loss over (user, pos, neg) node triplets and its gradient w.r.t. ``embeddings``."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    if len(batch) == 0:
        raise ValueError("total_loss needs a nonempty batch")
    u, p, n = embeddings[batch[:, 0]], embeddings[batch[:, 1]], embeddings[batch[:, 2]]
    gap = np.einsum("bd,bd->b", u, p - n)
    bpr = np.logaddexp(0.0, -gap)
    nu = np.linalg.norm(u, axis=1)
    npos = np.linalg.norm(p, axis=1)
    ok = (nu > 0) & (npos > 0)
    denom = np.where(ok, nu * npos, 1.0)
    cos = np.where(ok, np.einsum("bd,bd->b", u, p) / denom, 0.0)
    B = len(batch)
    loss = float(np.mean(bpr + alpha * (1.0 - cos)))

    # d softplus(-gap) / d gap = -sigmoid(-gap)
    g = -np.exp(-np.logaddexp(0.0, gap)) / B
    du = g[:, None] * (p - n)
    dp = g[:, None] * u
    dn = -g[:, None] * u
    if alpha:
        nu_s = np.where(ok, nu, 1.0)[:, None]
        np_s = np.where(ok, npos, 1.0)[:, None]
        c = cos[:, None]
        w = (-alpha / B) * ok[:, None]
        du += w * (p / (nu_s * np_s) - c * u / nu_s**2)
        dp += w * (u / (nu_s * np_s) - c * p / np_s**2)
    grad = np.zeros_like(embeddings)
    np.add.at(grad, batch[:, 0], du)
    np.add.at(grad, batch[:, 1], dp)
    np.add.at(grad, batch[:, 2], dn)
    return loss, grad


def total_loss(batch, embeddings: np.ndarray, alpha: float) -> float:
    return total_loss_and_grad(batch, embeddings, alpha)[0]


# ---------------------------------------------------------------------------
# negative sampling


class NegativeSampler:
    """Per-user negative draws that prefer explicit dislikes and never return a known positive.

    ``positives`` and ``neutral`` map user node -> item nodes; explicit
    negatives come from the graph's negative edges.
    """

    def __init__(self, graph: BipartiteGraph, epsilon_neg: float = 0.8,
                 positives: Optional[Mapping[int, Sequence[int]]] = None,
                 neutral: Optional[Mapping[int, Sequence[int]]] = None, max_tries: int = 10_000):
        self.graph = graph
        self.epsilon_neg = epsilon_neg
        self.lo = graph.n_users
        self.hi = graph.n_nodes
        self.max_tries = max_tries
        self._pos = {}
        self._neg = {}
        self._excl = {}
        for u in range(graph.n_users):
            pos = set(positives[u]) if positives is not None and u in positives else set(graph.positives_of(u).tolist())
            self._pos[u] = pos
            self._neg[u] = np.sort(np.array([i for i in graph.negatives_of(u).tolist() if i not in pos],
                                            dtype=np.int64))
            self._excl[u] = pos | set(neutral.get(u, ()) if neutral else ())

    def sample(self, user: int, rng: np.random.Generator) -> int:
        negs = self._neg[user]
        if len(negs) and rng.random() < self.epsilon_neg:
            return int(negs[rng.integers(len(negs))])
        excl = self._excl[user]
        n_items = self.hi - self.lo
        if len(excl) >= n_items:
            if len(self._pos[user]) >= n_items or not len(negs):
                raise SamplingError(f"user node {user}: no item outside positives to sample")
            return int(negs[rng.integers(len(negs))])
        for _ in range(self.max_tries):
            j = int(rng.integers(self.lo, self.hi))
            if j not in excl:
                return j
        # dense users: enumerate the complement instead of rejecting forever
        allowed = np.setdiff1d(np.arange(self.lo, self.hi), np.fromiter(excl, dtype=np.int64))
        return int(allowed[rng.integers(len(allowed))])


def sample_negative(user: int, train_graph: BipartiteGraph, rng: np.random.Generator,
                    epsilon_neg: float = 0.8, neutral: Optional[Sequence[int]] = None) -> int:
    sampler = NegativeSampler(train_graph, epsilon_neg, neutral={user: neutral or ()})
    return sampler.sample(user, rng)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """In-place AdamW update of ``params``; decay is decoupled from the adaptive step."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if weight_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def split_validation(graph: BipartiteGraph, fraction: float, rng: np.random.Generator):
    pos = graph.positive_edges()
    n_val = int(round(fraction * len(pos)))
    order = rng.permutation(len(pos))
    return pos[np.sort(order[n_val:])], pos[np.sort(order[:n_val])]


def _triplets(pairs: np.ndarray, sampler: NegativeSampler, rng: np.random.Generator) -> np.ndarray:
    negs = np.array([sampler.sample(int(u), rng) for u in pairs[:, 0]], dtype=np.int64)
    return np.column_stack([pairs, negs]) if len(pairs) else np.zeros((0, 3), dtype=np.int64)


def _embed(graph, params, features):
    return forward_state(graph, params, features).output


def train(
    graph: BipartiteGraph,
    features: np.ndarray,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    params: Optional[ModelParams] = None,
    neutral: Optional[Mapping[int, Sequence[int]]] = None,
    log_file: Optional[TextIO] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainedModel:
    """Train on ``graph``'s positive edges and return the best-validation model.

    A seeded ``val_fraction`` of positive edges is held out for validation:
    removed from the message-passing graph and from the training triplets.
    """
    root = np.random.SeedSequence(config.seed)
    split_rng, shuffle_rng, neg_rng, drop_rng, val_rng = (np.random.Generator(np.random.PCG64(s))
                                                          for s in root.spawn(5))
    if params is None:
        params, _ = init_params(config.seed, model_config, InitMode.TEXT, text_features=features)
    params = params.copy()
    features = np.array(features, dtype=np.float64, copy=True)

    train_pairs, val_pairs = split_validation(graph, config.val_fraction, split_rng)
    train_graph = graph.subgraph_without(map(tuple, val_pairs.tolist())) if len(val_pairs) else graph
    all_pos = {u: graph.positives_of(u).tolist() for u in range(graph.n_users)}
    sampler = NegativeSampler(train_graph, config.epsilon_neg, positives=all_pos, neutral=neutral)
    val_triplets = _triplets(val_pairs, sampler, val_rng)
    if len(train_pairs) == 0:
        raise ValueError("no positive edges to train on")

    def monitor(out, fallback):
        return total_loss(val_triplets, out, config.alpha) if len(val_triplets) else fallback

    trainables = [arr for _, arr in params.tensors()] + ([features] if config.train_features else [])
    opt = AdamWState()
    lr = config.lr_init

    out0 = _embed(train_graph, params, features)
    init_loss = total_loss(_triplets(train_pairs, sampler, np.random.Generator(np.random.PCG64(config.seed))),
                           out0, config.alpha)
    best_val = monitor(out0, init_loss)
    best = (params.copy(), features.copy(), out0)
    history = [EpochRecord(0, init_loss, best_val, lr)]
    if log_file is not None:
        log_file.write(f"epoch\ttrain_loss\tval_loss\tlr\n")
        _write_record(log_file, history[0])
    since_best = since_lr = 0
    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_pairs))
        trip = _triplets(train_pairs[order], sampler, neg_rng)
        total = 0.0
        for b in range(0, len(trip), config.batch_size):
            batch = trip[b : b + config.batch_size]
            try:
                state = forward_state(train_graph, params, features, train_mode=True, rng=drop_rng)
                loss, d_out = total_loss_and_grad(batch, state.output, config.alpha)
                grads, d_feat = backward(state, params, d_out[: graph.n_users], d_out[graph.n_users :],
                                         features_grad=config.train_features)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b // config.batch_size}: {exc}") from exc
            g_list = [g for _, g in grads.tensors()] + ([d_feat] if config.train_features else [])
            adamw_step(trainables, g_list, opt, lr, weight_decay=config.weight_decay)
            total += loss * len(batch)
        train_loss = total / len(trip)
        out = _embed(train_graph, params, features)
        val_loss = monitor(out, train_loss)
        epochs_run = epoch
        if val_loss < best_val:
            best_val = val_loss
            best = (params.copy(), features.copy(), out)
            since_best = since_lr = 0
        else:
            since_best += 1
            since_lr += 1
        rec = EpochRecord(epoch, train_loss, val_loss, lr)
        history.append(rec)
        if log_file is not None:
            _write_record(log_file, rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d train %.6f val %.6f lr %.2e", epoch, train_loss, val_loss, lr)
        if since_best >= config.early_stop_patience:
            break
        if since_lr >= config.lr_patience:
            lr *= config.lr_factor
            since_lr = 0

    best_params, best_features, best_out = best
    meta = {
        "seed": config.seed,
        "epochs_run": epochs_run,
        "best_val_loss": best_val,
        "initial_train_loss": init_loss,
        "final_train_loss": history[-1].train_loss,
        "history": history,
        "features": best_features,
    }
    return TrainedModel(best_out[: graph.n_users].copy(), best_out[graph.n_users :].copy(), best_params,
                        graph.node_index, meta)


def _write_record(fh: TextIO, rec: EpochRecord) -> None:
    fh.write(f"{rec.epoch}\t{rec.train_loss:.10g}\t{rec.val_loss:.10g}\t{rec.lr:.10g}\n")

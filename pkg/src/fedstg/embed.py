"""Structure extractor: second-order biased random walks + skip-gram.

Produces the frozen per-client spatial embedding used by the model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WalkCorpus:
    walks: np.ndarray  # (r * V, l) node ids
    walks_per_node: int
    p: float
    q: float
    node_count: int


def _neighbours(adj: np.ndarray):
    nbrs, weights = [], []
    for v in range(adj.shape[0]):
        idx = np.nonzero(adj[v])[0]
        if idx.size == 0:
            # isolated node walks on a self-loop
            idx = np.array([v])
            w = np.array([1.0])
        else:
            w = adj[v, idx].astype(np.float64)
        nbrs.append(idx)
        weights.append(w)
    return nbrs, weights


def biased_walks(adjacency, p: float = 1.0, q: float = 1.0, r: int = 10, l: int = 20, seed: int = 0) -> WalkCorpus:
    """``r`` walks of length ``l`` from every node.

    After the first step, the unnormalized weight of moving from ``v`` to
    ``x`` (having arrived from ``t``) is ``w_vx / p`` if ``x == t``,
    ``w_vx`` if ``x`` is also a neighbour of ``t`` and ``w_vx / q``
    otherwise.  Each start node draws from its own derived seed.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adj.shape}")
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    if r < 1 or l < 1:
        raise ValueError("r and l must be >= 1")
    n = adj.shape[0]
    nbrs, weights = _neighbours(adj)
    linked = adj > 0
    walks = np.empty((n, r, l), dtype=np.int64)
    for start, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        for j in range(r):
            walk = walks[start, j]
            walk[0] = start
            for step in range(1, l):
                v = walk[step - 1]
                cand, w = nbrs[v], weights[v]
                if step > 1:
                    t = walk[step - 2]
                    bias = np.where(cand == t, 1.0 / p, np.where(linked[t, cand], 1.0, 1.0 / q))
                    w = w * bias
                walk[step] = cand[rng.choice(cand.size, p=w / w.sum())] if cand.size > 1 else cand[0]
    # round-major order: all first walks, then all second walks, ...
    return WalkCorpus(walks.transpose(1, 0, 2).reshape(n * r, l), r, p, q, n)


def _pairs(walks: np.ndarray, window_size: int) -> np.ndarray:
    out = []
    length = walks.shape[1]
    for off in range(1, window_size + 1):
        if off >= length:
            break
        a, b = walks[:, :-off].reshape(-1), walks[:, off:].reshape(-1)
        out.append(np.stack([a, b], 1))
        out.append(np.stack([b, a], 1))
    return np.concatenate(out) if out else np.empty((0, 2), dtype=np.int64)


def _log_sigmoid_grad(x):
    # d/dx log sigmoid(x) = 1 - sigmoid(x)
    return 1.0 - 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))


def skipgram_train(
    corpus: WalkCorpus,
    dim: int = 16,
    window_size: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
    batch_size: int = 256,
) -> np.ndarray:
    """Skip-gram with negative sampling; returns the ``(V, dim)`` input vectors.

    Negatives are drawn from the corpus unigram distribution raised to 0.75.
    The learning rate decays linearly to ``1e-4 * lr``.
    """
    if dim < 2:
        raise ValueError("embedding dimension must be >= 2")
    if corpus.walks.size == 0:
        raise ValueError("empty walk corpus")
    n = corpus.node_count
    rng = np.random.default_rng(seed)
    w_in = (rng.random((n, dim)) - 0.5) / dim
    w_out = np.zeros((n, dim))
    pairs = _pairs(corpus.walks, window_size)
    if epochs <= 0 or len(pairs) == 0:
        return w_in
    counts = np.bincount(corpus.walks.reshape(-1), minlength=n).astype(np.float64)
    noise = counts**0.75
    noise /= noise.sum()

    total = epochs * int(np.ceil(len(pairs) / batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            batch = pairs[order[start : start + batch_size]]
            rate = lr * max(1e-4, 1.0 - step / total)
            step += 1
            centre, ctx = batch[:, 0], batch[:, 1]
            neg = rng.choice(n, size=(len(batch), negatives), p=noise)
            targets = np.concatenate([ctx[:, None], neg], axis=1)  # (B, 1+neg)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            h = w_in[centre]  # (B, dim)
            out = w_out[targets]  # (B, 1+neg, dim)
            score = np.einsum("bd,bkd->bk", h, out)
            # gradient ascent on log sigmoid(+score) for the context, log sigmoid(-score) for negatives
            g = np.where(labels > 0, _log_sigmoid_grad(score), -_log_sigmoid_grad(-score))
            grad_h = np.einsum("bk,bkd->bd", g, out)
            grad_out = g[:, :, None] * h[:, None, :]
            np.add.at(w_out, targets.reshape(-1), rate * grad_out.reshape(-1, dim))
            np.add.at(w_in, centre, rate * grad_h)
    return w_in


def spatial_embedding(adjacency, dim: int = 16, p: float = 1.0, q: float = 1.0, r: int = 10, l: int = 20,
                      window_size: int = 5, negatives: int = 5, epochs: int = 5, seed: int = 0) -> np.ndarray:
    corpus = biased_walks(adjacency, p, q, r, l, seed)
    return skipgram_train(corpus, dim, window_size, negatives, epochs, seed=seed)

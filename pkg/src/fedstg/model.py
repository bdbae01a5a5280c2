"""Local spatio-temporal encoder-decoder with conditional separation.

Data flow for one batch (``B`` windows, ``V`` nodes, hidden width ``D``)::

    X (B,γ,V,d) --MLP--> H --spatial attn--> S --separate--> S_c, S_o
    calendar+SE -----> STE_his --temporal attn--> T --separate--> T_c, T_o
    R = fuse[T_o, T_c, S_o, S_c]            (B,γ,V,D)
    R' = transform attn(STE_pred -> STE_his, R)   (B,β,V,D)
    decoder: same again on R' and STE_pred, then prediction head -> ŷ

Masks come from a reference copy of each branch's features (the previous
round's running mean); shared features are aligned with the codebook and
penalised with an invariance term built from two auxiliary branch heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codebook as cb
from .autodiff import Node, ShapeError, Tape

BRANCHES = ("enc.spatial", "enc.temporal", "dec.spatial", "dec.temporal")
REFERENCE_DECAY = 0.9


@dataclass
class ModelConfig:
    in_dim: int = 1
    hidden: int = 32
    se_dim: int = 16
    slots_per_day: int = 288
    layers: int = 1
    code_dim: int = 64
    tau: float = cb.DEFAULT_TEMPERATURE

    @property
    def time_dim(self) -> int:
        return 7 + self.slots_per_day


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "in.w1": (cfg.in_dim, D), "in.b1": (D,), "in.w2": (D, D), "in.b2": (D,),
        "ste.time.w": (cfg.time_dim, D), "ste.time.b": (D,),
        "ste.se.w": (cfg.se_dim, D), "ste.se.b": (D,),
        "ste.w": (2 * D, D), "ste.b": (D,),
    }
    for part in ("enc", "dec"):
        for kind in ("spatial", "temporal"):
            for l in range(cfg.layers):
                p = f"{part}.{kind}.{l}"
                shapes.update({f"{p}.wq": (D, D), f"{p}.wk": (D, D), f"{p}.wv": (D, D),
                               f"{p}.wo": (D, D), f"{p}.bo": (D,)})
            shapes[f"sep.{part}.{kind}.w"] = (D, D)
            shapes[f"sep.{part}.{kind}.b"] = (D,)
        shapes[f"{part}.fuse.w"] = (4 * D, D)
        shapes[f"{part}.fuse.b"] = (D,)
    shapes.update({"transform.wq": (D, D), "transform.wk": (D, D), "transform.wv": (D, D),
                   "transform.wo": (D, D), "transform.bo": (D,)})
    for kind in ("spatial", "temporal"):
        shapes[f"query.{kind}.w"] = (D, cfg.code_dim)
        shapes[f"query.{kind}.b"] = (cfg.code_dim,)
        shapes[f"irm.{kind}.w"] = (D, cfg.in_dim)
        shapes[f"irm.{kind}.b"] = (cfg.in_dim,)
    shapes.update({"head.w1": (D, D), "head.b1": (D,), "head.w2": (D, cfg.in_dim), "head.b2": (cfg.in_dim,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases; names are stable checkpoint keys.

    The codebook query biases are the exception.  A node whose pooled
    shared features are all zero has anchor ``b``, and the guarded cosine
    has slope ``1/eps`` at the zero vector, so a zero bias makes the first
    step blow up.  They start uniform in ``±1/√d`` from their own stream.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        out[name] = _glorot(rng, *shape) if len(shape) == 2 else np.zeros(shape)
    bias_rng = np.random.default_rng([seed, 1])
    bound = 1.0 / np.sqrt(cfg.code_dim)
    for kind in ("spatial", "temporal"):
        out[f"query.{kind}.b"] = bias_rng.uniform(-bound, bound, size=cfg.code_dim)
    return out


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


# ----------------------------------------------------------------------------
# building blocks


def mlp(x: Node, w1: Node, b1: Node, w2: Node, b2: Node) -> Node:
    return ad.relu(x @ w1 + b1) @ w2 + b2


def build_ste(P: dict[str, Node], time_features: Node, se: Node, gamma: int) -> tuple[Node, Node]:
    """Spatio-temporal embedding split into history and prediction parts.

    ``time_features`` is ``(B, γ+β, 7+slots)``; ``se`` is ``(V, se_dim)``.
    Returns ``(B, γ, V, D)`` and ``(B, β, V, D)``.
    """
    B, steps, _ = time_features.shape
    V = se.shape[0]
    D = P["ste.b"].shape[0]
    if se.shape[1] != P["ste.se.w"].shape[0]:
        raise ShapeError("build_ste", [se.shape, P["ste.se.w"].shape], "SE width")
    te = time_features @ P["ste.time.w"] + P["ste.time.b"]  # (B, steps, D)
    sp = se @ P["ste.se.w"] + P["ste.se.b"]  # (V, D)
    te = ad.broadcast_to(ad.reshape(te, (B, steps, 1, D)), (B, steps, V, D))
    sp = ad.broadcast_to(ad.reshape(sp, (1, 1, V, D)), (B, steps, V, D))
    ste = ad.concat([te, sp], axis=-1) @ P["ste.w"] + P["ste.b"]
    return ad.slice_(ste, 1, 0, gamma), ad.slice_(ste, 1, gamma, steps)


def _attend(q: Node, k: Node, v: Node) -> tuple[Node, Node]:
    d = q.shape[-1]
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    weights = ad.softmax(scores, axis=-1)
    return weights @ v, weights


def attention_block(h: Node, P: dict[str, Node], prefix: str) -> tuple[Node, Node]:
    """Self-attention over axis 2 of a ``(B, S, N, D)`` tensor with residual and output map."""
    ctx, weights = _attend(h @ P[f"{prefix}.wq"], h @ P[f"{prefix}.wk"], h @ P[f"{prefix}.wv"])
    return (h + ctx) @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"], weights


def spatial_attention(h: Node, P: dict[str, Node], part: str = "enc", layers: int = 1):
    """Per-step attention across nodes.  Returns output and the last weight tensor ``(B, S, V, V)``."""
    weights = None
    for l in range(layers):
        h, weights = attention_block(h, P, f"{part}.spatial.{l}")
    return h, weights


def temporal_attention(h: Node, P: dict[str, Node], part: str = "enc", layers: int = 1):
    """Per-node attention across steps.  Weights are ``(B, V, S, S)``."""
    x = ad.transpose(h, (0, 2, 1, 3))
    weights = None
    for l in range(layers):
        x, weights = attention_block(x, P, f"{part}.temporal.{l}")
    return ad.transpose(x, (0, 2, 1, 3)), weights


def transform_attention(ste_pred: Node, ste_his: Node, values: Node, P: dict[str, Node]) -> Node:
    """Map γ encoded steps to β decoder steps, per node, keyed on the calendar embeddings."""
    t = lambda n: ad.transpose(n, (0, 2, 1, 3))  # noqa: E731
    ctx, _ = _attend(t(ste_pred) @ P["transform.wq"], t(ste_his) @ P["transform.wk"], t(values) @ P["transform.wv"])
    return t(ctx @ P["transform.wo"] + P["transform.bo"])


@dataclass
class SeparationOutput:
    shared: Node  # F_c
    specific: Node  # F_o
    mask_shared: Node  # M_c
    mask_specific: Node  # M_o


def conditional_separate(features: Node, reference: Node, w: Node, b: Node, bypass: bool = False) -> SeparationOutput:
    """Split features with a soft mask computed from the reference features.

    ``M_c = sigmoid(reference @ w + b)``, ``M_o = 1 - M_c`` and
    ``F_x = relu((1 + LN(M_x)) * features)``.  With ``bypass`` the masks
    are fixed at ones/zeros and ``F_o`` is zero.
    """
    tape = features.tape
    if bypass:
        ones = tape.const(np.ones(features.shape))
        zeros = tape.const(np.zeros(features.shape))
        return SeparationOutput(ad.relu(features), zeros, ones, zeros)
    if reference.shape != features.shape[-reference.value.ndim:]:
        raise ShapeError("conditional_separate", [features.shape, reference.shape], "reference shape")
    m_c = ad.sigmoid(reference @ w + b)
    m_o = 1.0 - m_c
    f_c = ad.relu(ad.mul(ad.layer_norm(m_c) + 1.0, features))
    f_o = ad.relu(ad.mul(ad.layer_norm(m_o) + 1.0, features))
    return SeparationOutput(f_c, f_o, m_c, m_o)


def irm_penalty(pred: Node, target: Node) -> Node:
    """Squared derivative in ``w`` of ``mean((w * pred - target)^2)`` at ``w = 1``.

    The derivative is ``mean(2 (pred - target) * pred)``, so the penalty
    stays a first-order graph.
    """
    if pred.shape != target.shape:
        raise ShapeError("irm_penalty", [pred.shape, target.shape])
    grad_w = ad.mean(ad.mul(pred - target, pred)) * 2.0
    return ad.square(grad_w)


@dataclass
class LossBreakdown:
    l_mse: float
    l_com: float
    l_irm: float
    l_local: float
    lambda_com: float
    lambda_irm: float
    node: Node | None = field(default=None, repr=False)


def local_loss(pred: Node, target: Node, l_com: Node | None, l_irm: Node | None,
               lambda_com: float = 1.0, lambda_irm: float = 1.0) -> LossBreakdown:
    """``l_mse + lambda_com * l_com + lambda_irm * l_irm``."""
    if lambda_com < 0 or lambda_irm < 0:
        raise ValueError("loss weights must be nonnegative")
    if pred.shape != target.shape:
        raise ShapeError("local_loss", [pred.shape, target.shape])
    mse = ad.mean(ad.square(pred - target))
    total = mse
    if l_com is not None and lambda_com > 0:
        total = total + l_com * lambda_com
    if l_irm is not None and lambda_irm > 0:
        total = total + l_irm * lambda_irm
    com = float(l_com.value) if l_com is not None else 0.0
    irm = float(l_irm.value) if l_irm is not None else 0.0
    return LossBreakdown(float(mse.value), com, irm, float(total.value), lambda_com, lambda_irm, total)


# ----------------------------------------------------------------------------
# full forward pass


@dataclass
class Batch:
    x: np.ndarray  # (B, γ, V, d), normalized
    y: np.ndarray | None  # (B, β, V, d), normalized
    time_features: np.ndarray  # (B, γ+β, 7+slots)
    se: np.ndarray  # (V, se_dim)

    @property
    def gamma(self) -> int:
        return self.x.shape[1]


@dataclass
class ForwardResult:
    pred: Node
    encoder: dict[str, SeparationOutput]
    decoder: dict[str, SeparationOutput]
    branch_features: dict[str, Node]
    queries: dict[str, cb.QueryResult]
    pairs: dict[str, cb.PairSelection]
    aux: dict[str, Node]
    l_com: Node | None
    attention: dict[str, Node]


def _reference(tape: Tape, name: str, features: Node, reference: dict[str, np.ndarray] | None) -> Node:
    if reference is None or name not in reference:
        # first round: current features, cut from the gradient path
        return tape.const(features.value)
    return tape.const(reference[name])


def predict(tape: Tape, P: dict[str, Node], batch: Batch, cfg: ModelConfig, delta: Node | None = None,
            reference: dict[str, np.ndarray] | None = None, separate: bool = True) -> ForwardResult:
    """Encoder-decoder forward pass.  With ``delta`` given, the codebook is queried on all four shared branches."""
    x = tape.const(batch.x)
    if batch.x.shape[2] != batch.se.shape[0]:
        raise ShapeError("predict", [batch.x.shape, batch.se.shape], "node count of window vs SE")
    if batch.x.shape[3] != cfg.in_dim:
        raise ShapeError("predict", [batch.x.shape], f"expected feature dim {cfg.in_dim}")
    tf = tape.const(batch.time_features)
    se = tape.const(batch.se)
    ste_his, ste_pred = build_ste(P, tf, se, batch.gamma)

    feats: dict[str, Node] = {}
    seps: dict[str, SeparationOutput] = {}
    attn: dict[str, Node] = {}

    def split_branch(name: str, f: Node) -> SeparationOutput:
        feats[name] = f
        part, kind = name.split(".")
        ref = _reference(tape, name, f, reference) if separate else None
        seps[name] = conditional_separate(f, ref, P[f"sep.{part}.{kind}.w"], P[f"sep.{part}.{kind}.b"], bypass=not separate)
        return seps[name]

    def fuse(part: str, s: SeparationOutput, t: SeparationOutput) -> Node:
        cat = ad.concat([t.specific, t.shared, s.specific, s.shared], axis=-1)
        return cat @ P[f"{part}.fuse.w"] + P[f"{part}.fuse.b"]

    # encoder
    h = mlp(x, P["in.w1"], P["in.b1"], P["in.w2"], P["in.b2"])
    s_enc, attn["enc.spatial"] = spatial_attention(h, P, "enc", cfg.layers)
    t_enc, attn["enc.temporal"] = temporal_attention(ste_his, P, "enc", cfg.layers)
    r = fuse("enc", split_branch("enc.spatial", s_enc), split_branch("enc.temporal", t_enc))
    r = transform_attention(ste_pred, ste_his, r, P)

    # decoder
    s_dec, attn["dec.spatial"] = spatial_attention(r, P, "dec", cfg.layers)
    t_dec, attn["dec.temporal"] = temporal_attention(ste_pred, P, "dec", cfg.layers)
    z = fuse("dec", split_branch("dec.spatial", s_dec), split_branch("dec.temporal", t_dec))
    pred = mlp(z, P["head.w1"], P["head.b1"], P["head.w2"], P["head.b2"])

    aux = {
        kind: seps[f"dec.{kind}"].shared @ P[f"irm.{kind}.w"] + P[f"irm.{kind}.b"]
        for kind in ("spatial", "temporal")
    }

    queries, pairs, l_com = {}, {}, None
    if delta is not None:
        for name in BRANCHES:
            kind = name.split(".")[1]
            # one anchor per (window, node): shared features pooled over steps
            pooled = ad.mean(seps[name].shared, axis=1)
            loss, queries[name], pairs[name] = cb.align(
                pooled, P[f"query.{kind}.w"], P[f"query.{kind}.b"], delta, cfg.tau
            )
            l_com = loss if l_com is None else l_com + loss

    enc = {k: seps[f"enc.{k}"] for k in ("spatial", "temporal")}
    dec = {k: seps[f"dec.{k}"] for k in ("spatial", "temporal")}
    return ForwardResult(pred, enc, dec, feats, queries, pairs, aux, l_com, attn)


def training_loss(tape: Tape, P: dict[str, Node], batch: Batch, cfg: ModelConfig, delta: Node | None,
                  reference: dict[str, np.ndarray] | None, lambda_com: float = 1.0, lambda_irm: float = 1.0,
                  separate: bool = True) -> tuple[LossBreakdown, ForwardResult]:
    out = predict(tape, P, batch, cfg, delta, reference, separate)
    y = tape.const(batch.y)
    l_irm = irm_penalty(out.aux["spatial"], y) + irm_penalty(out.aux["temporal"], y) if lambda_irm > 0 else None
    l_com = out.l_com if lambda_com > 0 else None
    return local_loss(out.pred, y, l_com, l_irm, lambda_com, lambda_irm), out


def update_reference(ema: dict[str, np.ndarray] | None, out: ForwardResult, decay: float = REFERENCE_DECAY):
    """Fold a batch's mean branch features into the running reference."""
    ema = {} if ema is None else ema
    for name, f in out.branch_features.items():
        m = f.value.mean(axis=0)
        ema[name] = m if name not in ema else decay * ema[name] + (1.0 - decay) * m
    return ema

"""Federated orchestration: local training, codebook-only aggregation, baselines.

Each round every client downloads the global codebook, trains one local
epoch on its own data and uploads its codebook copy.  The server keeps
nothing but the codebook.  Baseline variants switch parts of this off
(``local_only``, ``no_book``) or additionally average every model tensor
(``full_fedavg``).
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import codebook as cb
from . import data as stg
from . import embed
from . import metrics as mt
from . import model as mdl

VARIANTS = ("full", "no_book", "no_cs", "no_book_no_cs", "local_only", "full_fedavg")
WIRE_BYTES = 4


@dataclass
class FedConfig:
    """Training and model settings for one federated run."""

    rounds: int = 50
    local_epochs: int = 1
    lr: float = 1e-2
    grad_clip: float = 0.0  # global-norm clip per step; 0 disables
    lambda_com: float = 1.0
    lambda_irm: float = 1.0
    patience: int = 10
    variant: str = "full"
    seed: int = 0
    batch_size: int = 32
    eval_batch_size: int = 256
    gamma: int = 12
    beta: int = 12
    hidden: int = 32
    layers: int = 1
    prototypes: int = cb.DEFAULT_PROTOTYPES
    code_dim: int = cb.DEFAULT_CODE_DIM
    tau: float = cb.DEFAULT_TEMPERATURE
    reference_decay: float = mdl.REFERENCE_DECAY
    se_dim: int = 16
    walk_p: float = 1.0
    walk_q: float = 1.0
    walks_per_node: int = 10
    walk_length: int = 20
    skipgram_window: int = 5
    skipgram_negatives: int = 5
    skipgram_epochs: int = 5
    wire_bytes: int = WIRE_BYTES
    minutes_per_step: float = 5.0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        for name in ("local_epochs", "patience", "batch_size", "eval_batch_size", "gamma", "beta", "hidden",
                     "layers", "code_dim", "se_dim", "wire_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.prototypes < 2:
            raise ValueError("prototypes must be >= 2")
        if self.lambda_com < 0 or self.lambda_irm < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be nonnegative")

    # variant switches
    @property
    def uses_codebook(self) -> bool:
        return self.variant not in ("no_book", "no_book_no_cs") and self.lambda_com > 0

    @property
    def exchanges_codebook(self) -> bool:
        return self.uses_codebook and self.variant != "local_only"

    @property
    def separates(self) -> bool:
        return self.variant not in ("no_cs", "no_book_no_cs")

    @property
    def averages_model(self) -> bool:
        return self.variant == "full_fedavg"

    def model_config(self, in_dim: int, slots_per_day: int) -> mdl.ModelConfig:
        return mdl.ModelConfig(in_dim=in_dim, hidden=self.hidden, se_dim=self.se_dim, slots_per_day=slots_per_day,
                               layers=self.layers, code_dim=self.code_dim, tau=self.tau)


# ----------------------------------------------------------------------------
# client state


@dataclass
class SplitArrays:
    x: np.ndarray  # (N, γ, V, d) normalized
    y: np.ndarray  # (N, β, V, d) normalized
    y_raw: np.ndarray  # (N, β, V, d) original units
    stamps: np.ndarray  # (N, γ+β)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ClientData:
    train: SplitArrays
    val: SplitArrays
    test: SplitArrays
    norm: stg.NormStats
    se: np.ndarray
    slots_per_day: int


def prepare_client(dataset: stg.STGDataset, cfg: FedConfig, se: np.ndarray | None = None) -> ClientData:
    """Window, split and normalize one client's data and compute its frozen SE."""
    windows = stg.window(dataset, cfg.gamma, cfg.beta)
    parts = stg.split(windows)
    norm = stg.fit_normalize(parts[0])

    def arrays(ws) -> SplitArrays:
        h, t, hs, ts = stg.stack_windows(ws)
        return SplitArrays(norm.apply(h), norm.apply(t), t, np.concatenate([hs, ts], axis=1))

    if se is None:
        se = embed.spatial_embedding(dataset.adjacency, cfg.se_dim, cfg.walk_p, cfg.walk_q, cfg.walks_per_node,
                                     cfg.walk_length, cfg.skipgram_window, cfg.skipgram_negatives,
                                     cfg.skipgram_epochs, seed=cfg.seed)
    return ClientData(arrays(parts[0]), arrays(parts[1]), arrays(parts[2]), norm, se, dataset.slots_per_day)


@dataclass
class ClientState:
    k: int
    params: dict[str, np.ndarray]
    delta: np.ndarray  # local codebook copy
    data: ClientData
    model: mdl.ModelConfig
    reference: dict[str, np.ndarray] | None = None
    events: list[str] = field(default_factory=list)


class ClientAbort(RuntimeError):
    """Raised when a client's local round cannot complete."""


def _batch(data: ClientData, part: SplitArrays, idx: np.ndarray, with_target: bool = True) -> mdl.Batch:
    return mdl.Batch(part.x[idx], part.y[idx] if with_target else None,
                     stg.encode_time(part.stamps[idx], data.slots_per_day), data.se)


def batch_order(n: int, seed: int, round_index: int, epoch: int = 0) -> np.ndarray:
    """Shuffle for one local epoch; depends only on the run seed, round and epoch."""
    rng = np.random.default_rng([seed, round_index, epoch])
    return rng.permutation(n)


@dataclass
class TrainSummary:
    l_mse: float
    l_com: float
    l_irm: float
    l_local: float
    batches: int


def client_update(state: ClientState, delta_global: np.ndarray | None, cfg: FedConfig,
                  round_index: int = 1) -> tuple[np.ndarray, TrainSummary]:
    """One round of local training.

    The local codebook copy is replaced by ``delta_global`` (when given),
    then the model and the copy take plain SGD steps on the local loss for
    ``cfg.local_epochs`` epochs.  Returns the updated copy and mean losses.
    """
    if delta_global is not None:
        if delta_global.shape != state.delta.shape:
            raise ValueError(f"client {state.k}: global codebook shape {delta_global.shape} "
                             f"does not match local {state.delta.shape}")
        state.delta = np.array(delta_global, dtype=np.float64, copy=True)
    data = state.data
    n = len(data.train)
    sums = np.zeros(4)
    count = 0
    params = dict(state.params)
    delta = state.delta
    ema = None
    for epoch in range(cfg.local_epochs):
        order = batch_order(n, cfg.seed, round_index, epoch)
        for start in range(0, n, cfg.batch_size):
            batch = _batch(data, data.train, order[start : start + cfg.batch_size])
            tape = ad.Tape()
            P = {name: tape.leaf(v, name=name) for name, v in params.items()}
            d_node = tape.leaf(delta, name="delta") if cfg.uses_codebook else None
            lb, out = mdl.training_loss(tape, P, batch, state.model, d_node, state.reference,
                                        cfg.lambda_com if cfg.uses_codebook else 0.0, cfg.lambda_irm,
                                        separate=cfg.separates)
            if not np.isfinite(lb.l_local):
                raise ClientAbort(f"client {state.k}: non-finite loss {lb.l_local} in round {round_index}, "
                                  f"batch starting at {start}")
            grads = tape.backward(lb.node)
            step = cfg.lr
            if cfg.grad_clip > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.grad_clip:
                    step = cfg.lr * cfg.grad_clip / norm
            params = {name: v - step * grads[P[name].id] for name, v in params.items()}
            if d_node is not None:
                delta = delta - step * grads[d_node.id]
            if cfg.separates:
                ema = mdl.update_reference(ema, out, cfg.reference_decay)
            sums += (lb.l_mse, lb.l_com, lb.l_irm, lb.l_local)
            count += 1
    if not all(np.all(np.isfinite(v)) for v in params.values()) or not np.all(np.isfinite(delta)):
        raise ClientAbort(f"client {state.k}: non-finite parameters after round {round_index}")
    state.params = params
    state.delta = delta
    if ema is not None:
        state.reference = ema
    mean = sums / max(count, 1)
    return delta, TrainSummary(*map(float, mean), count)


def client_predict(state: ClientState, part: SplitArrays, batch_size: int = 256,
                   separate: bool = True) -> np.ndarray:
    """Denormalized forecasts ``(N, β, V, d)`` for one split."""
    outs = []
    for start in range(0, len(part), batch_size):
        idx = np.arange(start, min(start + batch_size, len(part)))
        tape = ad.Tape()
        P = {name: tape.const(v) for name, v in state.params.items()}
        res = mdl.predict(tape, P, _batch(state.data, part, idx, with_target=False), state.model, None,
                          state.reference, separate)
        outs.append(res.pred.value)
    return state.data.norm.invert(np.concatenate(outs))


def client_metrics(state: ClientState, part: SplitArrays, cfg: FedConfig) -> mt.MetricSet:
    pred = client_predict(state, part, cfg.eval_batch_size, cfg.separates)
    return mt.metric_set(pred, part.y_raw)


def branch_features(state: ClientState, part: SplitArrays, samples: int, separate: bool = True):
    """Per-sample ``S_c, S_o, T_c, T_o`` encoder features, pooled over steps and nodes."""
    idx = np.arange(min(samples, len(part)))
    tape = ad.Tape()
    P = {name: tape.const(v) for name, v in state.params.items()}
    res = mdl.predict(tape, P, _batch(state.data, part, idx, with_target=False), state.model, None,
                      state.reference, separate)
    s, t = res.encoder["spatial"], res.encoder["temporal"]
    pool = lambda n: n.value.mean(axis=(1, 2))  # noqa: E731
    return {"Sc": pool(s.shared), "So": pool(s.specific), "Tc": pool(t.shared), "To": pool(t.specific)}


# ----------------------------------------------------------------------------
# server side


def aggregate(codebooks: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean of the client codebooks.

    Values are sorted along the client axis before summing so the result is
    bit-identical under any client ordering, and equal to the input when all
    clients agree.
    """
    if len(codebooks) == 0:
        raise ValueError("nothing to aggregate")
    arrays = [np.asarray(c, dtype=np.float64) for c in codebooks]
    shape = arrays[0].shape
    for k, a in enumerate(arrays):
        if a.shape != shape:
            raise ValueError(f"client {k} sent shape {a.shape}, expected {shape}")
    stacked = np.sort(np.stack(arrays), axis=0)
    base = stacked[0]
    return base + (stacked - base).sum(axis=0) / len(arrays)


def comm_bytes(codebook: cb.Codebook | np.ndarray, wire_precision_bytes: int = WIRE_BYTES) -> int:
    """Upload size of one codebook: ``prototypes * dim * wire_precision_bytes``."""
    delta = codebook.delta if isinstance(codebook, cb.Codebook) else np.asarray(codebook)
    if wire_precision_bytes < 1:
        raise ValueError("wire precision must be >= 1 byte")
    return int(delta.shape[0] * delta.shape[1] * wire_precision_bytes)


def fedavg_bytes(params: dict[str, np.ndarray], codebook, wire_precision_bytes: int = WIRE_BYTES) -> int:
    """Upload size when every model tensor is sent along with the codebook."""
    n = sum(v.size for v in params.values())
    return int(n * wire_precision_bytes) + comm_bytes(codebook, wire_precision_bytes)


def checksum(delta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(delta, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class RoundRecord:
    round: int
    train: list[TrainSummary | None]
    val: list[mt.MetricSet | None]
    bytes_up: list[int]
    checksum: str
    events: list[str] = field(default_factory=list)

    @property
    def mean_val_mae(self) -> float:
        vals = [m.mae for m in self.val if m is not None]
        return float(np.mean(vals)) if vals else float("nan")


class Federation:
    """In-process simulation of one federated run."""

    def __init__(self, cfg: FedConfig, datasets: Sequence[stg.STGDataset],
                 prepared: Sequence[ClientData] | None = None):
        cfg.validate()
        if len(datasets) == 0:
            raise ValueError("need at least one client dataset")
        self.cfg = cfg
        self.datasets = list(datasets)
        if prepared is None:
            prepared = [prepare_client(ds, cfg) for ds in self.datasets]
        in_dim = self.datasets[0].feature_dim
        params0 = None
        self.clients: list[ClientState] = []
        for k, (ds, cd) in enumerate(zip(self.datasets, prepared)):
            if ds.feature_dim != in_dim:
                raise ValueError(f"client {k} has feature dim {ds.feature_dim}, expected {in_dim}")
            mcfg = cfg.model_config(in_dim, ds.slots_per_day)
            if params0 is None or mdl.param_shapes(mcfg) != mdl.param_shapes(self.clients[0].model):
                params0 = mdl.init_params(mcfg, seed=cfg.seed)
            delta0 = cb.init_codebook(cfg.prototypes, cfg.code_dim, seed=cfg.seed).delta
            self.clients.append(ClientState(k, dict(params0), delta0.copy(), cd, mcfg))
        self.delta_global = cb.init_codebook(cfg.prototypes, cfg.code_dim, seed=cfg.seed).delta
        self.history: list[RoundRecord] = []
        self.best_round = 0
        self._best: list[tuple] | None = None
        self.stopped_early = False

    @property
    def K(self) -> int:
        return len(self.clients)

    def upload_bytes(self, state: ClientState) -> int:
        if self.cfg.averages_model:
            return fedavg_bytes(state.params, state.delta, self.cfg.wire_bytes)
        if self.cfg.exchanges_codebook:
            return comm_bytes(state.delta, self.cfg.wire_bytes)
        return 0

    def round(self, r: int) -> RoundRecord:
        cfg = self.cfg
        train: list[TrainSummary | None] = []
        events: list[str] = []
        uploads: list[int] = []
        ok: list[ClientState] = []
        for state in self.clients:
            incoming = self.delta_global if cfg.exchanges_codebook else None
            try:
                _, summary = client_update(state, incoming, cfg, r)
            except (ClientAbort, FloatingPointError, ValueError) as exc:
                events.append(str(exc))
                state.events.append(f"round {r}: {exc}")
                train.append(None)
                uploads.append(0)
                continue
            train.append(summary)
            uploads.append(self.upload_bytes(state))
            ok.append(state)
        if ok and cfg.exchanges_codebook:
            self.delta_global = aggregate([s.delta for s in ok])
        if ok and cfg.averages_model:
            avg = {name: aggregate([s.params[name] for s in ok]) for name in ok[0].params}
            for s in self.clients:
                s.params = dict(avg)
        val = []
        for i, state in enumerate(self.clients):
            if train[i] is None:
                val.append(None)
                continue
            val.append(client_metrics(state, state.data.val, cfg))
        rec = RoundRecord(r, train, val, uploads, checksum(self.delta_global), events)
        self.history.append(rec)
        return rec

    def _snapshot(self):
        return [(dict(s.params), s.delta.copy(), None if s.reference is None else dict(s.reference))
                for s in self.clients], self.delta_global.copy()

    def _restore(self, snap) -> None:
        states, delta = snap
        for s, (p, d, ref) in zip(self.clients, states):
            s.params, s.delta, s.reference = dict(p), d.copy(), None if ref is None else dict(ref)
        self.delta_global = delta.copy()

    def run(self, progress: Callable[[RoundRecord], None] | None = None) -> list[RoundRecord]:
        """All rounds with early stopping; client state ends at the best validation round."""
        best = np.inf
        stale = 0
        for r in range(1, self.cfg.rounds + 1):
            rec = self.round(r)
            if progress is not None:
                progress(rec)
            score = rec.mean_val_mae
            if np.isfinite(score) and score < best:
                best, stale = score, 0
                self.best_round = r
                self._best = self._snapshot()
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    self.stopped_early = r < self.cfg.rounds
                    break
        if self._best is not None:
            self._restore(self._best)
        return self.history

    def test_metrics(self) -> list[mt.MetricSet]:
        return [client_metrics(s, s.data.test, self.cfg) for s in self.clients]

    def test_horizons(self, horizons=mt.DEFAULT_HORIZONS) -> list[list[mt.MetricSet]]:
        out = []
        for s in self.clients:
            pred = client_predict(s, s.data.test, self.cfg.eval_batch_size, self.cfg.separates)
            out.append(mt.per_horizon_report(pred, s.data.test.y_raw, horizons, self.cfg.minutes_per_step))
        return out

    # ------------------------------------------------------------------
    # persistence

    def server_state(self) -> dict[str, np.ndarray]:
        return {"delta": self.delta_global}

    def client_state(self, k: int) -> dict[str, np.ndarray]:
        s = self.clients[k]
        out = {f"param.{n}": v for n, v in s.params.items()}
        out["delta"] = s.delta
        out["se"] = s.data.se
        out["norm.mean"] = s.data.norm.mean
        out["norm.std"] = s.data.norm.std
        for n, v in (s.reference or {}).items():
            out[f"ref.{n}"] = v
        return out

    def save(self, run_dir: str | Path, config_text: str, embedding_samples: int = 32) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config").write_text(config_text)
        (run_dir / "history.csv").write_text(history_csv(self.history, self.K))
        checkpoint.save(run_dir / "server_ckpt", self.server_state())
        for k in range(self.K):
            checkpoint.save(run_dir / f"client_{k}_ckpt", self.client_state(k))
        dump_embeddings(self, run_dir, embedding_samples)
        return run_dir


def dump_embeddings(fed: Federation, run_dir: str | Path, samples: int = 32) -> list[Path]:
    """Write ``embeddings_<k>.csv`` (branch features of the first test windows) for every client."""
    run_dir = Path(run_dir)
    paths = []
    for k, s in enumerate(fed.clients):
        feats = branch_features(s, s.data.test, samples, fed.cfg.separates)
        path = run_dir / f"embeddings_{k}.csv"
        path.write_text(embeddings_csv(feats))
        paths.append(path)
    return paths


def load_client_state(fed: Federation, k: int, tensors: dict[str, np.ndarray]) -> None:
    """Restore client ``k`` from a ``client_<k>_ckpt`` tensor map."""
    s = fed.clients[k]
    params = {n[len("param."):]: v for n, v in tensors.items() if n.startswith("param.")}
    missing = set(s.params) - set(params)
    if missing:
        raise ValueError(f"client {k} checkpoint lacks {sorted(missing)[0]}")
    s.params = {n: params[n] for n in s.params}
    s.delta = tensors["delta"]
    ref = {n[len("ref."):]: v for n, v in tensors.items() if n.startswith("ref.")}
    s.reference = ref or None


def run_rounds(cfg: FedConfig, datasets: Sequence[stg.STGDataset], **kw) -> list[RoundRecord]:
    return Federation(cfg, datasets, **kw).run()


def ablate(variant: str, cfg: FedConfig, datasets: Sequence[stg.STGDataset], **kw) -> list[RoundRecord]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return run_rounds(FedConfig(**{**asdict(cfg), "variant": variant}), datasets, **kw)


# ----------------------------------------------------------------------------
# text outputs


def history_csv(history: Sequence[RoundRecord], clients: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["round", "mean_val_mae", "checksum"]
    for k in range(clients):
        header += [f"c{k}_{x}" for x in ("val_mae", "val_rmse", "val_mape", "l_mse", "l_com", "l_irm", "l_local",
                                           "bytes")]
    w.writerow(header)
    for rec in history:
        row = [rec.round, repr(rec.mean_val_mae), rec.checksum]
        for k in range(clients):
            m, t = rec.val[k], rec.train[k]
            row += [repr(m.mae), repr(m.rmse), repr(m.mape)] if m else ["nan"] * 3
            row += [repr(t.l_mse), repr(t.l_com), repr(t.l_irm), repr(t.l_local)] if t else ["nan"] * 4
            row.append(rec.bytes_up[k])
        w.writerow(row)
    return buf.getvalue()


def embeddings_csv(features: dict[str, np.ndarray]) -> str:
    """One row per (sample, branch): ``sample, branch, f0, f1, ...``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = next(iter(features.values())).shape[1]
    w.writerow(["sample", "branch"] + [f"f{i}" for i in range(dim)])
    n = next(iter(features.values())).shape[0]
    for i in range(n):
        for label in ("Sc", "So", "Tc", "To"):
            w.writerow([i, label] + [repr(float(v)) for v in features[label][i]])
    return buf.getvalue()


def config_fields() -> list[str]:
    return [f.name for f in fields(FedConfig)]

"""Multi-client spatio-temporal graph data.

Synthetic generation with planted shared and client-specific factors, CSV
ingestion, sliding windows, chronological splitting, normalization and
calendar encoding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

STD_FLOOR = 1e-8
MOTIF_SIZE = 5


@dataclass
class STGDataset:
    series: np.ndarray  # (T_total, V, d)
    adjacency: np.ndarray  # (V, V)
    timestamps: np.ndarray  # (T_total,) integer step indices
    slots_per_day: int = 288

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.series.ndim != 3:
            raise ValueError(f"series must be (T, V, d), got shape {self.series.shape}")
        v = self.series.shape[1]
        if self.adjacency.shape != (v, v):
            raise ValueError(f"adjacency shape {self.adjacency.shape} does not match {v} nodes")
        if np.any(self.adjacency < 0):
            raise ValueError("adjacency entries must be nonnegative")
        if self.timestamps.shape != (self.series.shape[0],):
            raise ValueError("timestamps length must equal the series length")
        if self.slots_per_day < 1:
            raise ValueError("slots_per_day must be positive")

    @property
    def node_count(self) -> int:
        return self.series.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.series.shape[2]

    def __len__(self) -> int:
        return self.series.shape[0]


@dataclass
class GeneratorGroundTruth:
    shared_signal: np.ndarray  # (T, V, d), already scaled by its mixing coefficient
    specific_signal: np.ndarray
    noise: np.ndarray
    shared_mixing: np.ndarray  # (d,)
    specific_mixing: np.ndarray  # (d,)
    specific_period: float
    motif_nodes: np.ndarray


@dataclass
class Window:
    history: np.ndarray  # (gamma, V, d)
    target: np.ndarray  # (beta, V, d)
    history_stamps: np.ndarray
    target_stamps: np.ndarray


@dataclass
class NormStats:
    mean: np.ndarray  # (d,)
    std: np.ndarray  # (d,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def apply_window(self, w: Window) -> Window:
        return Window(self.apply(w.history), self.apply(w.target), w.history_stamps, w.target_stamps)

    def invert_window(self, w: Window) -> Window:
        return Window(self.invert(w.history), self.invert(w.target), w.history_stamps, w.target_stamps)


# ----------------------------------------------------------------------------
# synthetic generation


def _motif_adjacency(m: int) -> np.ndarray:
    # ring plus one chord from node 0 to the middle
    a = np.zeros((m, m))
    for i in range(m):
        a[i, (i + 1) % m] = a[(i + 1) % m, i] = 1.0
    if m > 3:
        a[0, m // 2] = a[m // 2, 0] = 1.0
    return a


def _geometric_graph(n: int, rng: np.random.Generator) -> np.ndarray:
    pts = rng.random((n, 2))
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    radius = np.sqrt(2.5 * np.log(max(n, 2)) / (np.pi * n))
    adj = (dist < radius).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    np.fill_diagonal(dist, np.inf)
    for i in np.where(adj.sum(1) == 0)[0]:
        j = int(np.argmin(dist[i]))
        adj[i, j] = adj[j, i] = 1.0
    return adj


def daily_profile(slot: np.ndarray, slots_per_day: int) -> np.ndarray:
    """Two rush-hour bumps, zero-mean over a day."""
    h = 24.0 * np.asarray(slot, dtype=np.float64) / slots_per_day
    prof = np.exp(-(((h - 8.0) / 1.5) ** 2)) + 0.8 * np.exp(-(((h - 17.5) / 2.0) ** 2))
    full = np.arange(slots_per_day) * 24.0 / slots_per_day
    mean = (np.exp(-(((full - 8.0) / 1.5) ** 2)) + 0.8 * np.exp(-(((full - 17.5) / 2.0) ** 2))).mean()
    return (prof - mean) / 0.5


def generate_synthetic(
    clients: int,
    nodes_per_client: int,
    steps: int,
    slots_per_day: int = 288,
    shared_strength: float = 1.0,
    specific_strength: float = 1.0,
    noise_std: float = 0.1,
    seed: int = 0,
    feature_dim: int = 1,
    motif_size: int = MOTIF_SIZE,
) -> list[tuple[STGDataset, GeneratorGroundTruth]]:
    """Generate ``clients`` datasets sharing a planted daily factor.

    Every client graph is a random geometric graph with a common motif
    wired onto its first ``motif_size`` nodes.  The shared factor is one
    daily profile (same phase everywhere) whose node loading is diffused
    from the motif.  The client-specific factor has its own period and its
    own random spatial loading.  ``series = shared + specific + noise``.
    """
    if min(clients, nodes_per_client, steps, slots_per_day, feature_dim) < 1:
        raise ValueError("clients, nodes_per_client, steps, slots_per_day and feature_dim must be positive")
    if shared_strength < 0 or specific_strength < 0 or noise_std < 0:
        raise ValueError("strengths and noise_std must be nonnegative")
    if nodes_per_client < motif_size:
        raise ValueError(f"nodes_per_client={nodes_per_client} is smaller than the motif size {motif_size}")

    root = np.random.SeedSequence(seed)
    period_rng = np.random.default_rng(root.spawn(1)[0])
    # distinct client periods, spread over a fraction of a day
    fractions = 0.15 + 0.5 * (np.arange(clients) + period_rng.random(clients)) / clients
    period_rng.shuffle(fractions)

    stamps = np.arange(steps, dtype=np.int64)
    shared_t = daily_profile(stamps % slots_per_day, slots_per_day)
    motif = _motif_adjacency(motif_size)
    out = []
    for k, child in enumerate(root.spawn(clients + 1)[1:]):
        rng = np.random.default_rng(child)
        n = nodes_per_client
        adj = _geometric_graph(n, rng)
        adj[:motif_size, :motif_size] = motif
        deg = adj.sum(1, keepdims=True)
        walk = adj / np.where(deg > 0, deg, 1.0)
        ind = np.zeros(n)
        ind[:motif_size] = 1.0
        diffused = ind + 0.5 * walk @ ind + 0.25 * walk @ (walk @ ind)
        shared_load = 0.5 + 0.5 * diffused / diffused.max()

        period = fractions[k] * slots_per_day
        phase = rng.uniform(0, 2 * np.pi)
        specific_t = np.sin(2 * np.pi * stamps / period + phase) + 0.3 * np.sin(
            4 * np.pi * stamps / period + 2 * phase
        )
        raw = 0.5 + rng.random(n)
        specific_load = 0.5 * raw + 0.5 * walk @ raw

        mix_shared = np.ones(feature_dim)
        mix_specific = np.ones(feature_dim)
        if feature_dim > 1:
            mix_shared[1:] = rng.uniform(0.5, 1.5, feature_dim - 1)
            mix_specific[1:] = rng.uniform(0.5, 1.5, feature_dim - 1)

        shared = shared_strength * shared_t[:, None, None] * shared_load[None, :, None] * mix_shared
        specific = specific_strength * specific_t[:, None, None] * specific_load[None, :, None] * mix_specific
        noise = noise_std * rng.standard_normal((steps, n, feature_dim))
        series = shared + specific + noise
        ds = STGDataset(series, adj, stamps.copy(), slots_per_day)
        gt = GeneratorGroundTruth(shared, specific, noise, mix_shared, mix_specific, period, np.arange(motif_size))
        out.append((ds, gt))
    return out


# ----------------------------------------------------------------------------
# CSV ingestion


def _read_numeric_csv(path: Path) -> list[list[float]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            if rows and len(vals) != len(rows[0]):
                raise ValueError(f"{path}: ragged row {r} has {len(vals)} columns, expected {len(rows[0])}")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def load_csv(values_path, adjacency_path, slots_per_day: int = 288) -> STGDataset:
    """Read a (timesteps x nodes) value table and a (nodes x nodes) adjacency."""
    values = np.array(_read_numeric_csv(Path(values_path)))
    adj = np.array(_read_numeric_csv(Path(adjacency_path)))
    if adj.shape[0] != adj.shape[1]:
        raise ValueError(f"{adjacency_path}: adjacency is {adj.shape[0]}x{adj.shape[1]}, not square")
    if adj.shape[0] != values.shape[1]:
        raise ValueError(
            f"{adjacency_path}: adjacency has {adj.shape[0]} nodes but values have {values.shape[1]} columns"
        )
    neg = np.argwhere(adj < 0)
    if len(neg):
        r, c = neg[0]
        raise ValueError(f"{adjacency_path}: negative entry at row {r + 1}, column {c + 1}")
    return STGDataset(values[:, :, None], adj, np.arange(values.shape[0]), slots_per_day)


def save_csv(dataset: STGDataset, values_path, adjacency_path) -> None:
    if dataset.feature_dim != 1:
        raise ValueError("CSV export supports d=1 only")
    with open(values_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in dataset.series[:, :, 0]:
            w.writerow([repr(float(x)) for x in row])
    with open(adjacency_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in dataset.adjacency:
            w.writerow([repr(float(x)) for x in row])


# ----------------------------------------------------------------------------
# windows, splits, normalization


def window(dataset: STGDataset, gamma: int, beta: int) -> list[Window]:
    if gamma < 1 or beta < 1:
        raise ValueError("gamma and beta must be >= 1")
    total = len(dataset)
    if total < gamma + beta:
        raise ValueError(f"series of length {total} is shorter than gamma + beta = {gamma + beta}")
    s, ts = dataset.series, dataset.timestamps
    return [
        Window(s[i : i + gamma], s[i + gamma : i + gamma + beta], ts[i : i + gamma], ts[i + gamma : i + gamma + beta])
        for i in range(total - gamma - beta + 1)
    ]


def split(windows: Sequence[Window]) -> tuple[list[Window], list[Window], list[Window]]:
    """Chronological 7:1:2 split; floors for train and val, remainder to test."""
    n = len(windows)
    if n < 10:
        raise ValueError(f"need at least 10 windows to split, got {n}")
    n_train = (7 * n) // 10
    n_val = n // 10
    return list(windows[:n_train]), list(windows[n_train : n_train + n_val]), list(windows[n_train + n_val :])


def fit_normalize(train: Sequence[Window]) -> NormStats:
    """Per-feature mean/std over the distinct steps covered by ``train``."""
    if not train:
        raise ValueError("no training windows")
    seen: dict[int, np.ndarray] = {}
    for w in train:
        for stamp, x in zip(w.history_stamps, w.history):
            seen.setdefault(int(stamp), x)
        for stamp, x in zip(w.target_stamps, w.target):
            seen.setdefault(int(stamp), x)
    stacked = np.stack([seen[k] for k in sorted(seen)])  # (steps, V, d)
    flat = stacked.reshape(-1, stacked.shape[-1])
    return NormStats(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))


def stack_windows(windows: Sequence[Window]):
    """Batch arrays ``(history, target, history_stamps, target_stamps)``."""
    return (
        np.stack([w.history for w in windows]),
        np.stack([w.target for w in windows]),
        np.stack([w.history_stamps for w in windows]),
        np.stack([w.target_stamps for w in windows]),
    )


def encode_time(stamps, slots_per_day: int) -> np.ndarray:
    """One-hot day-of-week concatenated with one-hot slot-of-day.

    Accepts stamps of any shape; the encoding is appended as a last axis of
    width ``7 + slots_per_day``.
    """
    if slots_per_day < 1:
        raise ValueError("slots_per_day must be >= 1")
    stamps = np.asarray(stamps, dtype=np.int64)
    day = (stamps // slots_per_day) % 7
    slot = stamps % slots_per_day
    out = np.zeros(stamps.shape + (7 + slots_per_day,))
    np.put_along_axis(out, day[..., None], 1.0, axis=-1)
    np.put_along_axis(out, 7 + slot[..., None], 1.0, axis=-1)
    return out

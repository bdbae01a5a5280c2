"""Run-directory summaries: horizon tables, ablation bars, embedding export."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from .federated import dump_embeddings  # noqa: F401  re-exported
from .metrics import MetricSet

HORIZON_FILE = "test_horizons.csv"


def horizon_csv(per_client: Sequence[Sequence[MetricSet]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", "horizon", "mae", "rmse", "mape"])
    for k, rows in enumerate(per_client):
        for m in rows:
            w.writerow([k, m.label, repr(m.mae), repr(m.rmse), repr(m.mape)])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _variant(run_dir: Path) -> str:
    cfg = run_dir / "config"
    if cfg.exists():
        for line in cfg.read_text().splitlines():
            key, _, val = line.partition("=")
            if key.strip() == "variant":
                return val.split("#", 1)[0].strip()
    return run_dir.name


def _bar(value: float, top: float, width: int = 40) -> str:
    n = 0 if top <= 0 or not np.isfinite(value) else int(round(width * value / top))
    return "#" * n


def render_report(run_dirs: Sequence[str | Path]) -> str:
    """Markdown summary of one or more run directories.

    Reads only ``history.csv`` and, when present, ``test_horizons.csv``.
    With several runs an ablation section compares their final scores.
    """
    out = ["# Run report", ""]
    finals: list[tuple[str, float]] = []
    for rd in map(Path, run_dirs):
        hist = read_csv(rd / "history.csv")
        if not hist:
            raise ValueError(f"{rd / 'history.csv'} has no rounds")
        name = _variant(rd)
        scores = [float(r["mean_val_mae"]) for r in hist]
        best = int(np.nanargmin(scores)) if np.any(np.isfinite(scores)) else 0
        clients = sorted({c.split("_")[0] for c in hist[0] if c.startswith("c") and c[1:].split("_")[0].isdigit()},
                         key=lambda c: int(c[1:]))
        out += [f"## {rd.name} ({name})", "",
                f"rounds run: {len(hist)}; best round: {hist[best]['round']} "
                f"(mean validation MAE {scores[best]:.4f})", ""]
        out += ["| client | val MAE | val RMSE | val MAPE % | upload bytes/round |", "|---|---|---|---|---|"]
        for c in clients:
            r = hist[best]
            out.append(f"| {c[1:]} | {float(r[c + '_val_mae']):.4f} | {float(r[c + '_val_rmse']):.4f} "
                       f"| {float(r[c + '_val_mape']):.2f} | {r[c + '_bytes']} |")
        out.append("")
        hz = rd / HORIZON_FILE
        if hz.exists():
            rows = read_csv(hz)
            labels = list(dict.fromkeys(r["horizon"] for r in rows))
            out += ["Test metrics by horizon (client-uniform mean):", "",
                    "| horizon | MAE | RMSE | MAPE % |", "|---|---|---|---|"]
            for lab in labels:
                sel = [r for r in rows if r["horizon"] == lab]
                mean = lambda key: float(np.mean([float(r[key]) for r in sel]))  # noqa: E731
                out.append(f"| {lab} | {mean('mae'):.4f} | {mean('rmse'):.4f} | {mean('mape'):.2f} |")
            out.append("")
            last = labels[-1]
            finals.append((name, float(np.mean([float(r["mae"]) for r in rows if r["horizon"] == last]))))
        else:
            finals.append((name, scores[best]))
    if len(finals) > 1:
        top = max(v for _, v in finals if np.isfinite(v))
        width = max(len(n) for n, _ in finals)
        out += ["## Ablation", "", "```"]
        for n, v in finals:
            out.append(f"{n.ljust(width)} {v:8.4f} {_bar(v, top)}")
        out += ["```", ""]
    return "\n".join(out)

"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import checkpoint
from . import convergence as cv
from . import data as stg
from . import federated as fd
from . import report as rp
from .config import ConfigError, RunConfig, format_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# data directories


def write_data_dir(out: Path, datasets: Sequence[stg.STGDataset]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    slots = {ds.slots_per_day for ds in datasets}
    (out / "meta").write_text(f"clients = {len(datasets)}\nslots_per_day = {slots.pop()}\n")
    for k, ds in enumerate(datasets):
        stg.save_csv(ds, out / f"client_{k}_values.csv", out / f"client_{k}_adjacency.csv")


def read_data_dir(path: str | Path) -> list[stg.STGDataset]:
    path = Path(path)
    meta_path = path / "meta"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found; create the directory with `gen-data`")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            meta[key.strip()] = int(val)
    return [
        stg.load_csv(path / f"client_{k}_values.csv", path / f"client_{k}_adjacency.csv", meta["slots_per_day"])
        for k in range(meta["clients"])
    ]


# ----------------------------------------------------------------------------
# subcommands


def _config(args, required=()) -> RunConfig:
    cfg = load_config(args.config, required) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    gen = stg.generate_synthetic(cfg.clients, cfg.nodes_per_client, cfg.steps, cfg.slots_per_day,
                                 cfg.shared_strength, cfg.specific_strength, cfg.noise_std, cfg.seed,
                                 cfg.feature_dim)
    write_data_dir(Path(args.out), [ds for ds, _ in gen])
    print(f"wrote {cfg.clients} clients to {args.out}")
    return EXIT_OK


def _train(cfg: RunConfig, out: Path) -> fd.Federation:
    datasets = read_data_dir(cfg.data_dir)
    fed = fd.Federation(cfg.fed(), datasets)

    def progress(rec: fd.RoundRecord) -> None:
        print(f"round {rec.round}: mean val MAE {rec.mean_val_mae:.4f}", flush=True)
        for ev in rec.events:
            print(f"  client failure: {ev}", file=sys.stderr)

    fed.run(progress)
    fed.save(out, format_config(cfg), cfg.embedding_samples)
    (out / rp.HORIZON_FILE).write_text(rp.horizon_csv(fed.test_horizons()))
    print(f"best round {fed.best_round}; run saved to {out}")
    return fed


def cmd_train(args) -> int:
    cfg = _config(args, required=("data_dir",))
    _train(cfg, Path(args.out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, required=("data_dir",))
    cfg = replace(cfg, variant=args.variant)
    _train(cfg, Path(args.out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.ckpt)
    cfg = load_config(run / "config", required=("data_dir",))
    datasets = read_data_dir(cfg.data_dir)
    fcfg = cfg.fed()
    client_tensors = [checkpoint.load(run / f"client_{k}_ckpt") for k in range(len(datasets))]
    prepared = [fd.prepare_client(ds, fcfg, se=t["se"]) for ds, t in zip(datasets, client_tensors)]
    fed = fd.Federation(fcfg, datasets, prepared=prepared)
    for k, t in enumerate(client_tensors):
        fd.load_client_state(fed, k, t)
    fed.delta_global = checkpoint.load(run / "server_ckpt")["delta"]
    per_client = fed.test_horizons()
    text = rp.horizon_csv(per_client)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_convergence(args) -> int:
    cfg = _config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    schedules = cv.SCHEDULES if args.schedule == "both" else (args.schedule,)
    rows = cv.sweep(args.seeds, cfg.conv_clients, cfg.conv_dim_b, cfg.conv_dim_a, cfg.conv_eta, cfg.conv_rounds,
                    schedules, cfg.conv_conditioning)
    text = cv.report_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    text = rp.render_report(args.run)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedstg", description="Federated spatio-temporal forecasting with a shared codebook.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic multi-client dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run federated training per a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train one variant")
    a.add_argument("--variant", required=True, choices=fd.VARIANTS)
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("evaluate", help="per-horizon test metrics of a saved run")
    e.add_argument("--ckpt", required=True, help="run directory")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("convergence", help="regret-bound sweep on convex surrogates")
    c.add_argument("--seeds", type=int, default=50)
    c.add_argument("--schedule", choices=cv.SCHEDULES + ("both",), default="fixed",
                   help="step-size schedule; 'both' writes one row per seed and schedule")
    c.add_argument("--config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_convergence)

    r = sub.add_parser("report", help="markdown summary of run directories")
    r.add_argument("--run", required=True, action="append", help="run directory; repeat to compare variants")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("fedstg: a subcommand is required (gen-data, train, ablate, evaluate, convergence, report)")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

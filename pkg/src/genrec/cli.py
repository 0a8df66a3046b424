"""Command-line entry point: one subcommand per pipeline stage plus studies and the HTTP server."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .config import Config, ConfigError
from .data import MODALITIES, DataError
from .rec_id import RegistryError
from .rq_vae import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("genrec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, default=Path("artifacts"), help="artifact directory")
    g = p.add_argument_group("config overrides")
    for f in fields(Config):
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None)


def resolve_config(args) -> Config:
    """Defaults < resolved snapshot in --out < --config file < flags."""
    cfg = Config()
    snapshot = args.out / "config.resolved"
    if snapshot.exists():
        cfg = Config.load(snapshot)
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        from .config import parse_pairs

        cfg = Config.from_mapping(parse_pairs(args.config.read_text()), base=cfg)
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(Config) if getattr(args, f"cfg_{f.name}") is not None}
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    return Config.from_mapping(overrides, base=cfg) if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="genrec", description="Generative recommendation with quantized item identifiers.")
    p.add_argument("--threads", type=int, default=None, help="intra-op thread budget")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_flags(s)
    s = sub.add_parser("ingest", help="import a user<TAB>item log and .f32 feature files")
    _add_config_flags(s)
    s.add_argument("--interactions", type=Path, required=True)
    for m in MODALITIES:
        s.add_argument(f"--{m}", type=Path, default=None, help=f"{m} feature file (.f32 with .desc sidecar)")
    for name, text in [("train-rqvae", "jointly train the graph encoder and quantizer"),
                       ("assign-ids", "build Rec-IDs and the prefix trie"),
                       ("train-rec", "train the sequence-to-sequence recommender")]:
        _add_config_flags(sub.add_parser(name, help=text))
    s = sub.add_parser("recommend", help="write top-K lists for users")
    _add_config_flags(s)
    s.add_argument("--users", default=None, help="comma-separated user ids (default: all)")
    s = sub.add_parser("evaluate", help="held-out metrics for generation, popularity and MF")
    _add_config_flags(s)
    s.add_argument("--no-mf", action="store_true", help="skip the MF baseline")
    s = sub.add_parser("run", help="synth (unless data exists) then every training stage and evaluate")
    _add_config_flags(s)
    s = sub.add_parser("bench", help="per-user inference time versus catalog size")
    _add_config_flags(s)
    s.add_argument("--base-items", type=int, default=2**20)
    s.add_argument("--scales", default="0.0625,0.125,0.25,0.5,1")
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--bench-users", type=int, default=20)
    s = sub.add_parser("ablate", help="multi-seed sweeps over model variants")
    _add_config_flags(s)
    s.add_argument("--sweeps", default="pos,token,length,codebook")
    s.add_argument("--seeds", default="0,1,2")
    s = sub.add_parser("serve", help="HTTP API over a trained artifact directory")
    _add_config_flags(s)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def dispatch(args) -> None:
    from . import pipeline as pl

    cmd = args.command
    cfg = resolve_config(args)
    torch.set_num_threads(cfg.threads)
    out = args.out
    if cmd == "synth":
        ds = pl.stage_synth(cfg, out)
        print(pl.Paths(out).stats.read_text(), end="")
    elif cmd == "ingest":
        feats = {m: getattr(args, m) for m in MODALITIES}
        pl.stage_ingest(cfg, out, args.interactions, feats)
        print(pl.Paths(out).stats.read_text(), end="")
    elif cmd == "train-rqvae":
        a = pl.stage_train_rqvae(cfg, out)
        print(f"codes written for {len(a.codes)} items -> {pl.Paths(out).codes}")
    elif cmd == "assign-ids":
        reg = pl.stage_assign_ids(cfg, out)
        print(reg.collisions().report())
    elif cmd == "train-rec":
        pl.stage_train_rec(cfg, out)
        print(f"recommender -> {pl.Paths(out).recommender}")
    elif cmd == "recommend":
        users = None
        if args.users:
            ds, _ = pl.load_data(out)
            names = ds.user_ids or tuple(str(u) for u in range(ds.n_users))
            index = {n: i for i, n in enumerate(names)}
            missing = [u for u in args.users.split(",") if u not in index]
            if missing:
                raise DataError(f"unknown user id(s): {', '.join(missing)}")
            users = [index[u] for u in args.users.split(",")]
        print(pl.stage_recommend(out, users, cfg.k))
    elif cmd == "evaluate":
        reports = pl.stage_evaluate(out, with_mf=not args.no_mf)
        print(pl.metric_table(reports), end="")
    elif cmd == "run":
        if not pl.Paths(out).dataset.exists():
            pl.stage_synth(cfg, out)
        pl.stage_train_rqvae(cfg, out)
        pl.stage_assign_ids(cfg, out)
        pl.stage_train_rec(cfg, out)
        pl.stage_recommend(out)
        print(pl.metric_table(pl.stage_evaluate(out)), end="")
    elif cmd == "bench":
        from .bench import bench_inference

        try:
            scales = [float(x) for x in args.scales.split(",")]
        except ValueError:
            raise UsageError(f"bad --scales {args.scales!r}") from None
        rep = bench_inference(args.base_items, scales, args.repetitions, args.bench_users, cfg.dim, cfg.k,
                              cfg.beam_width, cfg.levels, cfg.codebook_size, cfg.layers, cfg.heads, cfg.max_len,
                              seed=cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.resolved")
        (out / "bench.csv").write_text(rep.to_csv())
        (out / "bench.txt").write_text(rep.to_text() + "\n")
        print(rep.to_text())
    elif cmd == "ablate":
        from .experiments import SWEEPS, run_sweep, sweep_summary, sweep_table

        sweeps = [s for s in args.sweeps.split(",") if s]
        bad = [s for s in sweeps if s not in SWEEPS]
        if bad:
            raise UsageError(f"unknown sweep(s) {bad}; choose from {sorted(SWEEPS)}")
        rows = []
        for s in sweeps:
            rows += run_sweep(cfg, s, _csv_ints(args.seeds))
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.resolved")
        (out / "ablation.tsv").write_text(sweep_table(rows))
        (out / "ablation.txt").write_text(sweep_summary(rows))
        print(sweep_summary(rows), end="")
    elif cmd == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(out), host=args.host, port=args.port)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"genrec: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        dispatch(args)
    except (UsageError, ConfigError) as err:
        print(f"genrec: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, RegistryError, CheckpointError, KeyError) as err:
        print(f"genrec: error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as err:
        print(f"genrec: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

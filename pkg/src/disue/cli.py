"""Command line front end.

Subcommands:
  run      one variant over one or more seeds
  compare  several variants on shared seeds
  ablate   the fixed ablation family against the full method
  sweep    a grid over one distillation knob

Every command writes into --out-dir: the echoed effective config, one
per-round CSV per (variant, seed), and a summary JSON with the mean and
std over seeds of the final-window accuracy.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import VARIANTS, SimConfig, emit_config, parse_config
from .errors import DisueError
from .metrics import summarize, write_plot_data, write_round_csv, write_summary
from .orchestrator import run_experiment

ABLATION_FAMILY = (
    "disue",
    "disue_minus_gls",
    "disue_minus_gwf",
    "disue_minus_iga",
    "disue_minus_lcf",
    "disue_minus_ldiv",
    "fedavg",
)

SWEEP_PARAMS = ("beta_cf", "beta_div", "noise_dim", "pseudo_batch")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; empty file means all defaults")
    p.add_argument("--seed", type=int, action="append", help="seed to run; repeat the flag for several")
    p.add_argument("--rounds", type=int, help="rounds per seed")
    p.add_argument("--clients", type=int, help="total number of clients")
    p.add_argument("--act", type=float, help="fraction of clients active per round")
    p.add_argument("--epsilon", type=float, help="Dirichlet concentration of the label skew")
    p.add_argument("--workers", type=int, help="thread pool size for local training")
    p.add_argument("--out-dir", help="output directory (default disue_out)")
    p.add_argument("--plot-data", action="store_true", help="also write long-format plot_data.csv")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disue", description="desk-scale clustered federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a single variant")
    run_p.add_argument("--variant", choices=VARIANTS, help="algorithm variant (default disue)")
    _add_common_flags(run_p)

    cmp_p = sub.add_parser("compare", help="run several variants on shared seeds")
    cmp_p.add_argument("variants", nargs="+", choices=VARIANTS, metavar="variant")
    _add_common_flags(cmp_p)

    abl_p = sub.add_parser("ablate", help="run the ablation family: " + ", ".join(ABLATION_FAMILY))
    _add_common_flags(abl_p)

    swp_p = sub.add_parser("sweep", help="grid over one distillation knob")
    swp_p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    swp_p.add_argument("--values", required=True, help="comma separated values, e.g. 0.5,1.0,1.5")
    _add_common_flags(swp_p)
    return parser


def _effective_config(args: argparse.Namespace, variant: str | None = None) -> SimConfig:
    overrides = {
        "rounds": args.rounds,
        "clients": args.clients,
        "act": args.act,
        "epsilon": args.epsilon,
        "workers": args.workers,
        "out_dir": args.out_dir,
    }
    if args.seed:
        overrides["seeds"] = args.seed
    if args.plot_data:
        overrides["emit_plot_data"] = True
    if variant is not None:
        overrides["variant"] = variant
    cfg = parse_config(args.config, overrides)
    if cfg.out_dir is None:
        cfg = dataclasses.replace(cfg, out_dir="disue_out")
    return cfg


def _prepare_out_dir(cfg: SimConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    probe.write_text("")
    probe.unlink()
    return out


def _emit(out: Path, cfg: SimConfig, per_variant: dict[str, dict[int, list]]) -> None:
    emit_config(cfg, out / "config.json")
    for variant, by_seed in per_variant.items():
        for seed, rows in by_seed.items():
            write_round_csv(out / f"{variant}_seed{seed}.csv", rows)
    write_summary(out / "summary.json", summarize(per_variant))
    if cfg.emit_plot_data:
        write_plot_data(out / "plot_data.csv", per_variant)


def _run_variants(args: argparse.Namespace, variants: list[str]) -> Path:
    per_variant: dict[str, dict[int, list]] = {}
    cfg = _effective_config(args, variants[0])
    out = _prepare_out_dir(cfg)
    for variant in variants:
        cfg_v = _effective_config(args, variant)
        per_variant[variant] = run_experiment(cfg_v).rows_by_seed
    _emit(out, cfg, per_variant)
    return out


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            out = _run_variants(args, [args.variant or "disue"])
        elif args.command == "compare":
            # dict.fromkeys keeps order while dropping accidental repeats
            out = _run_variants(args, list(dict.fromkeys(args.variants)))
        elif args.command == "ablate":
            out = _run_variants(args, list(ABLATION_FAMILY))
        elif args.command == "sweep":
            out = _sweep(args)
        else:  # pragma: no cover - argparse enforces the choices
            raise AssertionError(args.command)
    except DisueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}/summary.json")
    return 0


def _sweep(args: argparse.Namespace) -> Path:
    cfg = _effective_config(args, "disue")
    out = _prepare_out_dir(cfg)
    per_variant: dict[str, dict[int, list]] = {}
    for raw in args.values.split(","):
        raw = raw.strip()
        value: float | int = int(raw) if args.param in ("noise_dim", "pseudo_batch") else float(raw)
        cfg_v = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, **{args.param: value}))
        label = f"{args.param}_{raw}"
        per_variant[label] = run_experiment(cfg_v).rows_by_seed
    _emit(out, cfg, per_variant)
    return out


if __name__ == "__main__":
    sys.exit(main())

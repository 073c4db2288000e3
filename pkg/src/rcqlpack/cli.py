"""Command line entry point: ``rcqlpack {generate,solve,train,eval,bench,render}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import yaml

from rcqlpack.errors import ConfigError, PackingError

log = logging.getLogger("rcqlpack")


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(d: dict, pairs: list[str]) -> dict:
    """``a.b=v`` style overrides; values are parsed as YAML scalars."""
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_value(val)
    return d


def _base_config(args) -> dict:
    from rcqlpack.evaluation import load_config_file

    d = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in ("method", "mode", "dim", "dataset", "checkpoint", "n_instances", "n_boxes", "distribution",
                "n_s", "seed", "workers", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "bin", None):
        d["bin_W"], d["bin_L"] = args.bin
    return apply_overrides(d, getattr(args, "set", None))


def _run_config(args):
    from rcqlpack.evaluation import RunConfig

    d = _base_config(args)
    if getattr(args, "out", None):
        d["output"] = args.out
    return RunConfig.from_dict(d)


def _print_reports(reports, as_json: bool) -> None:
    if as_json:
        print(json.dumps([r.summary() for r in reports], indent=1))
        return
    print(f"{'method':10s} {'dataset':28s} {'n':>5s} {'worst%':>8s} {'best%':>8s} {'avg%':>8s} {'variance':>9s} {'ms':>9s}")
    for r in reports:
        s = r.summary()
        print(f"{s['method']:10s} {s['dataset']:28s} {s['n_instances']:5d} {s['worst']:8.2f} {s['best']:8.2f} "
              f"{s['average']:8.2f} {s['variance']:9.5f} {s['time_ms']:9.1f}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from rcqlpack.data import generate_dataset, write_instances
    from rcqlpack.geometry import BinSpec

    W, L = args.bin or (10.0, 10.0)
    ds = generate_dataset(args.n_instances or 16, args.n_boxes or 40, args.distribution or "hard",
                          BinSpec(W, L, 128, args.dim or 3), seed=args.seed or 0)
    write_instances(args.out, ds)
    print(f"wrote {len(ds)} instances to {args.out}")
    return 0


def cmd_solve(args) -> int:
    from rcqlpack.evaluation import solve

    cfg = _run_config(args)
    reports, sols = solve(cfg)
    _print_reports(reports, args.json)
    if cfg.output:
        print(f"wrote {len(sols)} solutions to {cfg.output}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from rcqlpack.evaluation import report_rows, solve, write_csv

    cfg = dataclasses.replace(_run_config(args), output=None)
    reports, sols = solve(cfg)
    if args.csv:
        write_csv(args.csv, report_rows(cfg, reports, sols))
    _print_reports(reports, args.json)
    return 0


def cmd_bench(args) -> int:
    from rcqlpack.evaluation import RunConfig, bench, write_csv

    base = _base_config(args)
    methods = args.methods or [base.get("method", "heuristic")]
    datasets = args.datasets or [base.get("dataset")]
    cfgs = []
    for m in methods:
        for ds in datasets:
            d = dict(base, method=m, dataset=ds)
            if m in ("ga", "sa") and d.get("mode") == "online":
                raise ConfigError(f"{m} has no online variant")
            cfgs.append(RunConfig.from_dict(d))
    rows = bench(cfgs)
    write_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_train(args) -> int:
    from rcqlpack.model import ModelConfig
    from rcqlpack.trainer import TrainConfig, resume, train

    def progress(rec):
        if rec["step"] % max(1, args.log_every) == 0 or "eval_gap_ratio" in rec:
            log.info("step %d  L_theta %.4g  L_phi %.4g  alpha %.4g  entropy %.3f  gap %s  eval %s",
                     rec["step"], rec["loss_theta"], rec["loss_phi"], rec["alpha"], rec["entropy"],
                     rec["gap_ratio"], rec.get("eval_gap_ratio"))

    if args.resume:
        tr = resume(args.run_dir, train_steps=args.steps, progress=progress)
        print(f"resumed to step {tr.step_count}; config hash {tr.config_hash}")
        return 0
    d = _base_config(args)
    mdict = dict(d.get("model", {}))
    tdict = dict(d.get("train", {}))
    for key in ("mode", "dim", "seed", "distribution"):
        if key in d and key not in tdict:
            tdict[key] = d[key]
    if "n_s" in d:
        mdict.setdefault("n_s", d["n_s"])
    if args.steps is not None:
        tdict["train_steps"] = args.steps
    if args.no_query:
        mdict["no_query"] = True
    size = mdict.pop("size", args.model_size)
    base = ModelConfig.small() if size == "small" else ModelConfig.large()
    mcfg = ModelConfig.from_dict({**base.to_dict(), **mdict})
    tcfg = TrainConfig.from_dict(tdict)
    tr = train(mcfg, tcfg, args.run_dir, progress=progress)
    print(f"trained {tr.step_count} steps; checkpoints in {args.run_dir}")
    return 0


def cmd_render(args) -> int:
    from rcqlpack.render import render_layout

    out = render_layout(args.solution, args.out, args.index)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------


def _common(p, solve_like: bool = True) -> None:
    p.add_argument("--config", help="JSON or YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted for sections)")
    p.add_argument("--mode", choices=("offline", "online"))
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.add_argument("--seed", type=int)
    p.add_argument("--distribution", choices=("plain", "hard"))
    p.add_argument("--n-s", dest="n_s", type=int)
    if solve_like:
        p.add_argument("--method")
        p.add_argument("--dataset", help="instance file; omit to generate")
        p.add_argument("--checkpoint")
        p.add_argument("--n-instances", dest="n_instances", type=int)
        p.add_argument("--n-boxes", dest="n_boxes", type=int)
        p.add_argument("--bin", type=float, nargs=2, metavar=("W", "L"))
        p.add_argument("--workers", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcqlpack", description="Strip packing solvers and RCQL training.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write random instances")
    p.add_argument("--n-instances", dest="n_instances", type=int)
    p.add_argument("--n-boxes", dest="n_boxes", type=int)
    p.add_argument("--distribution", choices=("plain", "hard"))
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.add_argument("--bin", type=float, nargs=2, metavar=("W", "L"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="solve instances and write solutions")
    _common(p)
    p.add_argument("--out", help="solution file (line-delimited JSON)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="aggregate report for one method")
    _common(p)
    p.add_argument("--csv", help="also write the report row(s) as CSV")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="methods x datasets comparison table")
    _common(p)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--datasets", nargs="+")
    p.add_argument("--out", required=True, help="CSV output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train an RCQL actor-critic")
    _common(p, solve_like=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--model-size", choices=("small", "large"), default="small")
    p.add_argument("--no-query", action="store_true", help="ablation: heads read the selection decoder only")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="draw a solution as SVG")
    p.add_argument("solution")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PackingError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001 - map anything unexpected to the runtime exit code
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ddpnet train | verify | analyze``.

Exit codes: 0 ok, 1 configuration or input error, 2 training divergence,
3 resource limit (path enumeration).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import netgraph, paths, train, verify
from .errors import ConfigError, DDPError, DivergenceError, PathLimitExceeded

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_LIMIT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _echo(kind, resolved):
    print(f"{kind} config: " + json.dumps(resolved, sort_keys=True), flush=True)


def cmd_train(args):
    try:
        doc = json.loads(Path(args.config).read_text())
        if args.out is not None:
            doc = {**doc, "out": args.out} if isinstance(doc, dict) else doc
        config = train.TrainConfig.from_dict(doc)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if config.out is None:
        print("error: config field 'out': no output directory (use --out)", file=sys.stderr)
        return EXIT_CONFIG
    _echo("train", config.to_dict())
    try:
        result = train.run(config, config.out)
    except DivergenceError as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DDPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"trained {config.steps} steps: loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    return EXIT_OK


def cmd_verify(args):
    _echo("verify", {"suite": args.suite, "seed": args.seed, "trials": args.trials})
    results = verify.run_suite(args.suite, seed=args.seed, trials=args.trials)
    text = "\n".join(r.report() for r in results)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "some suites FAILED")
    return EXIT_OK if ok else EXIT_CONFIG


def cmd_analyze(args):
    _echo("analyze", {"net": args.net, "weights": args.weights, "data": args.data, "report": args.report,
                      "seed": args.seed, "path_limit": args.path_limit, "rank_tol": args.rank_tol})
    try:
        topo = netgraph.load_topology(args.net)
        w = netgraph.load_weights(args.weights, topo)
        data = None
        if args.data:
            raw = np.loadtxt(args.data, delimiter=",", ndmin=2, dtype=np.float64)
            if raw.shape[1] < topo.n_inputs:
                raise ConfigError("data", f"{raw.shape[1]} columns for {topo.n_inputs} inputs")
            data = netgraph.Batch(raw[:, : topo.n_inputs])
    except (OSError, ValueError, DDPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed])))
    try:
        report = paths.analysis_report(topo, w, data, rng=rng, limit=args.path_limit, rel_tol=args.rank_tol)
    except PathLimitExceeded as exc:
        print(f"path limit exceeded: network has {exc.count} paths (limit {exc.limit})", file=sys.stderr)
        return EXIT_LIMIT
    paths.write_report(report, args.report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="ddpnet", description="Data-dependent path complexity tools for ReLU networks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training loop from a JSON config")
    t.add_argument("--config", required=True, help="JSON training config")
    t.add_argument("--out", help="output directory (overrides the config's 'out')")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run seeded property suites")
    v.add_argument("--suite", required=True, choices=sorted(verify.SUITES) + ["all"])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=5)
    v.add_argument("--report", help="also write the report to this file")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("analyze", help="path-geometry report for a saved network")
    a.add_argument("--net", required=True, help="topology JSON")
    a.add_argument("--weights", required=True, help="weights JSON")
    a.add_argument("--data", help="CSV whose first |V_in| columns are inputs")
    a.add_argument("--report", required=True, help="output report (JSON)")
    a.add_argument("--seed", type=int, default=0, help="seed for the d_G probes")
    a.add_argument("--path-limit", type=int, default=paths.DEFAULT_PATH_LIMIT)
    a.add_argument("--rank-tol", type=float, default=paths.RANK_REL_TOL)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "trials", 1) < 1:
        print("error: --trials must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

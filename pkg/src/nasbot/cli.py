"""Architecture distances, mutation and Bayesian-optimisation search from the shell.

Exit codes: 0 success, 2 bad input (unreadable or invalid architecture,
bad flags), 3 semantic error (class mismatch, inapplicable objective),
4 runtime failure (too many failed objective evaluations).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import archgraph as ag
from . import evo, otmann, search
from . import objectives as obj
from .pools import initial_pool

EXIT_OK, EXIT_INPUT, EXIT_SEMANTIC, EXIT_RUNTIME = 0, 2, 3, 4
FAILURE_FRACTION = 0.2


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load(path, input_size=32) -> ag.Architecture:
    try:
        arch = ag.load(path)
    except OSError as err:
        raise CliError(f"{path}: {err.strerror}", EXIT_INPUT) from None
    except ag.ArchitectureError as err:
        raise CliError(f"{path}: {err}", EXIT_INPUT) from None
    rep = ag.validate(arch, input_size=input_size)
    if not rep.ok:
        raise CliError(f"{path}: invalid architecture: " + "; ".join(map(str, rep.violations)),
                       EXIT_INPUT)
    return arch


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _params(net_class, args) -> otmann.DistanceParams:
    grid = tuple(args.nu) if args.nu else otmann.DEFAULT_NU_GRID
    return otmann.DistanceParams(net_class, grid)


def cmd_validate(args) -> int:
    failed = False
    results = []
    for path in args.files:
        try:
            arch = ag.load(path)
        except (OSError, ag.ArchitectureError) as err:
            results.append({"file": path, "ok": False, "violations": [str(err)]})
            failed = True
            continue
        rep = ag.validate(arch, input_size=args.input_size)
        failed |= not rep.ok
        results.append({"file": path, "ok": rep.ok, "violations": [str(v) for v in rep.violations]})
    if args.json:
        print(json.dumps(results, indent=1))
    else:
        for r in results:
            print(f"{r['file']}: " + ("ok" if r["ok"] else "; ".join(r["violations"])))
    return EXIT_INPUT if failed else EXIT_OK


def cmd_dist(args) -> int:
    g1 = _load(args.a, args.input_size)
    g2 = _load(args.b, args.input_size)
    if g1.net_class != g2.net_class:
        raise CliError(f"cannot compare {g1.net_class} with {g2.net_class}", EXIT_SEMANTIC)
    params = _params(g1.net_class, args)
    prof = otmann.distance_profile(g1, g2, params)
    values = prof.d_bar if args.normalized else prof.d
    if args.json:
        doc = {"nu": list(params.nu_grid), "d": [float(x) for x in prof.d],
               "d_bar": [float(x) for x in prof.d_bar]}
        plans = []
        for nu in params.nu_grid:
            d, plan = otmann.distance(g1, g2, nu, params)
            c = plan.coupling
            plans.append({"nu": nu, "matched_mass": float(c[:-1, :-1].sum()),
                          "unmatched_mass": float(c[:-1, -1].sum() + c[-1, :-1].sum())})
        doc["plans"] = plans
        print(json.dumps(doc, indent=1))
    elif len(values) == 1:
        print(_fmt(values[0]))
    else:
        for nu, v in zip(params.nu_grid, values):
            print(f"{nu:g}\t{_fmt(v)}")
    return EXIT_OK


def cmd_distmat(args) -> int:
    archs = [_load(p, args.input_size) for p in args.files]
    classes = {a.net_class for a in archs}
    if len(classes) > 1:
        raise CliError(f"mixed classes {sorted(classes)}", EXIT_SEMANTIC)
    params = _params(archs[0].net_class, args)
    d, d_bar = otmann.pairwise_matrix(archs, params)
    mat = (d_bar if args.normalized else d).mean(axis=0)
    names = [os.path.basename(p) for p in args.files]
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for i, nu in enumerate(params.nu_grid):
            for tag, tensor in (("d", d), ("dbar", d_bar)):
                path = os.path.join(args.out_dir, f"{tag}_nu{nu:g}.csv")
                otmann.write_matrix_csv(path, names, tensor[i])
                print(path)
    elif args.out:
        otmann.write_matrix_csv(args.out, names, mat)
    else:
        import csv
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([""] + names)
        for name, row in zip(names, mat):
            w.writerow([name] + [repr(float(x)) for x in row])
    return EXIT_OK


def cmd_mutate(args) -> int:
    arch = _load(args.file, args.input_size)
    rng = np.random.default_rng(args.seed)
    config = evo.MutationConfig.subset(args.modifiers, input_size=args.input_size)
    out = evo.mutate(arch, config, rng, steps=args.steps)
    text = ag.to_json(out)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_genpool(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for i, arch in enumerate(initial_pool(args.net_class)):
        path = os.path.join(args.out, f"{args.net_class}_{i:02d}.json")
        ag.save(arch, path)
        print(path)
    return EXIT_OK


def _default_class(objective: str):
    if objective in ("f2", "f3"):
        return ag.MLP
    if objective == "f1":
        return ag.CNN
    return None


def cmd_search(args) -> int:
    fields = {}
    if args.config:
        try:
            with open(args.config) as fh:
                fields = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"{args.config}: {err}", EXIT_INPUT) from None
    for key, value in (("method", args.method), ("objective", args.objective),
                       ("budget", args.budget), ("workers", args.workers),
                       ("seed", args.seed), ("time_budget", args.time_budget),
                       ("timeout", args.timeout)):
        if value is not None:
            fields[key] = value
    net_class = args.net_class or fields.get("net_class") or _default_class(
        fields.get("objective", "f1"))
    if net_class is None:
        raise CliError("--class is required for this objective", EXIT_INPUT)
    fields["net_class"] = net_class
    try:
        config = search.SearchConfig.from_dict(fields)
        objective = obj.resolve(config.objective, config.net_class, config.timeout)
    except obj.ObjectiveClassError as err:
        raise CliError(str(err), EXIT_SEMANTIC) from None
    except (TypeError, ValueError) as err:
        raise CliError(str(err), EXIT_INPUT) from None
    result = search.run(config, args.out, objective=objective if config.objective.startswith(
        "external:") else None)
    print(f"best {result.best!r} after {len(result.history)} evaluations; results in {args.out}")
    if result.n_failures > FAILURE_FRACTION * config.budget:
        print(f"{result.n_failures} of {config.budget} evaluations failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nasbot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--input-size", type=int, default=32, help="CNN input image size")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("validate", help="check architecture files")
    p.add_argument("files", nargs="+")
    p.add_argument("--json", action="store_true")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dist", help="OTMANN distance between two architectures")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--nu", type=float, action="append",
                   help="structural weight (repeatable; default: the standard grid)")
    p.add_argument("--normalized", action="store_true")
    p.add_argument("--json", action="store_true")
    common(p)
    p.set_defaults(func=cmd_dist)

    p = sub.add_parser("distmat", help="pairwise distance matrix as CSV (mean over the nu grid)")
    p.add_argument("files", nargs="+")
    p.add_argument("--nu", type=float, action="append")
    p.add_argument("--normalized", action="store_true")
    p.add_argument("--out")
    p.add_argument("--out-dir", help="write one CSV per (nu, normalised) combination")
    common(p)
    p.set_defaults(func=cmd_distmat)

    p = sub.add_parser("mutate", help="apply the compound mutation operator")
    p.add_argument("file")
    p.add_argument("--steps", type=int, help="number of modifier steps (default: random)")
    p.add_argument("--modifiers", choices=sorted(evo.MODIFIER_SUBSETS), default="all")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("genpool", help="write the initial pool")
    p.add_argument("--class", dest="net_class", choices=ag.NET_CLASSES, required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_genpool)

    p = sub.add_parser("search", help="run a search and write a run directory")
    p.add_argument("--method", choices=search.METHODS)
    p.add_argument("--objective", help="f0..f3 or external:<command with {arch}>")
    p.add_argument("--class", dest="net_class", choices=ag.NET_CLASSES)
    p.add_argument("--budget", type=int)
    p.add_argument("--time-budget", type=float, help="simulated seconds")
    p.add_argument("--workers", type=int)
    p.add_argument("--timeout", type=float, help="external evaluator timeout (seconds)")
    p.add_argument("--config", help="JSON file with further SearchConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_search)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())

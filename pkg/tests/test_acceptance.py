"""End-to-end acceptance checks.

Each test records a single PASS/FAIL line (see ``conftest.report``) and then
asserts, so the summary at the end of ``pytest -v`` lists every criterion.
"""

import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from nasbot import archgraph as ag
from nasbot import evo, gp, search
from nasbot import otmann as ot
from nasbot import transport as tr
from nasbot.pools import initial_pool

import oracles

NUS = (0.1, 0.2, 0.4, 0.8)
CLASSES = ("cnn", "mlp")


def test_pseudometric(report):
    start = time.perf_counter()
    worst = {"neg": 0.0, "sym": 0.0, "self": 0.0, "tri": 0.0}
    for net_class in CLASSES:
        rng = np.random.default_rng(1)
        params = ot.DistanceParams(net_class, NUS)
        for _ in range(200):
            x, y, z = (oracles.random_valid_arch(rng, net_class) for _ in range(3))
            fx, fy, fz = (ot.arch_features(a, params) for a in (x, y, z))
            dx, _ = ot.distances_from_features(fx, [fx, fy, fz], params)
            dy, _ = ot.distances_from_features(fy, [fx, fy, fz], params)
            dz, _ = ot.distances_from_features(fz, [fx, fy, fz], params)
            d = np.stack([dx, dy, dz])  # d[i, j, nu]
            worst["neg"] = max(worst["neg"], float(-d.min()))
            worst["self"] = max(worst["self"], float(np.abs(np.einsum("iik->ik", d)).max()))
            scale = np.maximum(np.abs(d), np.abs(d.transpose(1, 0, 2)))
            rel = np.abs(d - d.transpose(1, 0, 2)) / np.maximum(scale, 1e-300)
            worst["sym"] = max(worst["sym"], float(rel.max()))
            for i, j, k in ((0, 1, 2), (0, 2, 1), (1, 0, 2)):
                worst["tri"] = max(worst["tri"], float((d[i, k] - d[i, j] - d[j, k]).max()))
    elapsed = time.perf_counter() - start
    ok = (worst["neg"] <= 0 and worst["sym"] <= 1e-9 and worst["self"] <= 1e-9
          and worst["tri"] <= 1e-7 and elapsed < 120)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s"
    assert report(1, "pseudo-metric on 400 random triples x 4 nu", ok, detail)


def test_transport_exactness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    enumerated = 0
    for k in range(100):
        m, n = rng.integers(1, 6, size=2)
        a, b, cost = oracles.random_transport(rng, m, n, rational=bool(k % 2))
        plan = tr.solve_exact(tr.TransportInstance(a, b, cost))
        worst = max(worst, abs(plan.objective - oracles.transport_lp_oracle(a, b, cost)))
        # full basis enumeration where the number of candidate bases is small
        if math.comb(int(m * n), int(m + n - 1)) <= 5000:
            enumerated += 1
            worst = max(worst, abs(plan.objective - oracles.transport_vertex_oracle(a, b, cost)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    assert report(2, "transport simplex vs LP oracle, 100 instances", ok,
                  f"max error {worst:.1e}, {enumerated} also by basis enumeration, {elapsed:.1f} s")


def test_primal_equivalence(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(50):
        net_class = CLASSES[k % 2]
        g1, g2 = oracles.random_valid_arch(rng, net_class), oracles.random_valid_arch(rng, net_class)
        nu = NUS[k % 4]
        d, _ = ot.distance(g1, g2, nu, ot.DistanceParams(net_class))
        worst = max(worst, abs(d - oracles.primal_distance_oracle(g1, g2, nu)))
    assert report(3, "inequality-form LP equals augmented transport, 50 pairs", worst <= 1e-7,
                  f"max error {worst:.1e}")


def test_path_lengths(report):
    rng = np.random.default_rng(4)
    worst = {"sp": 0.0, "lp": 0.0, "rw": 0.0}
    for k in range(100):
        net_class = CLASSES[k % 2]
        arch = oracles.random_arch(rng, net_class, max_layers=12)
        for label_class in ag.LABEL_CLASSES[net_class]:
            for anchor in ("ip", "op"):
                for kind in ("sp", "lp", "rw"):
                    got = ag.path_lengths(arch, ag.PathLengthSpec(kind, anchor, label_class))
                    want = oracles.path_length_oracle(arch, kind, anchor, label_class)
                    err = max(abs(got[i] - want[i]) for i in want)
                    worst[kind] = max(worst[kind], err)
    ok = worst["sp"] == 0 and worst["lp"] == 0 and worst["rw"] <= 1e-9
    assert report(4, "path lengths vs exhaustive enumeration, 100 DAGs",
                  ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_split_invariance(report):
    g1, g2 = oracles.split_pair()
    prof = ot.distance_profile(g1, g2, ot.DistanceParams("cnn", NUS))
    worst = float(max(np.abs(prof.d).max(), np.abs(prof.d_bar).max()))
    assert report(5, "split layer pair has zero distance", worst <= 1e-9, f"max |d| {worst:.1e}")


def test_normalised_bound(report):
    rng = np.random.default_rng(6)
    top = 0.0
    for k in range(1000):
        net_class = CLASSES[k % 2]
        g1, g2 = oracles.random_valid_arch(rng, net_class), oracles.random_valid_arch(rng, net_class)
        top = max(top, float(ot.distance_profile(g1, g2, ot.DistanceParams(net_class, NUS)).d_bar.max()))
    assert report(6, "normalised distance at most 1 on 1000 pairs", top <= 1.0, f"max {top:.4f}")


def test_big_invariance(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(100):
        net_class = CLASSES[k % 2]
        g1, g2 = oracles.random_valid_arch(rng, net_class), oracles.random_valid_arch(rng, net_class)
        small = ot.DistanceParams(net_class, NUS, penalty=ot.default_penalty(net_class, 10.0))
        large = ot.DistanceParams(net_class, NUS, penalty=ot.default_penalty(net_class, 1000.0))
        diff = ot.distance_profile(g1, g2, small).d - ot.distance_profile(g1, g2, large).d
        worst = max(worst, float(np.abs(diff).max()))
    assert report(7, "distance unchanged for BIG 10 vs 1000, 100 pairs", worst <= 1e-7,
                  f"max diff {worst:.1e}")


def test_gp_checks(report):
    archs = initial_pool("cnn")
    params = ot.DistanceParams("cnn", NUS)
    d, db = ot.pairwise_matrix(archs, params)
    d, db = np.moveaxis(d, 0, -1), np.moveaxis(db, 0, -1)
    rng = np.random.default_rng(8)
    y = rng.normal(size=len(archs))
    hyper = gp.KernelHyper(1.0, 1.0, (1e-4,) * 4, (1.0,) * 4, 1e-8)
    mean, _ = gp.GPModel(d, db, y, hyper).predict(d, db)
    interp = float(np.abs(mean - y).max())

    worst_z = 0.0
    for _ in range(50):
        mu, sigma = rng.normal(), rng.uniform(0.05, 3.0)
        tau = mu + sigma * rng.uniform(-3.0, 3.0)
        draws = np.maximum(rng.normal(mu, sigma, size=10**6) - tau, 0.0)
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        closed = float(gp.ei_closed_form(mu, sigma, tau))
        worst_z = max(worst_z, abs(closed - draws.mean()) / se)
    ok = interp <= 1e-6 and worst_z <= 3.0
    assert report(8, "GP interpolation and closed-form EI vs Monte Carlo", ok,
                  f"interpolation error {interp:.1e}, worst EI deviation {worst_z:.2f} SE")


def test_mutation_closure(report):
    config = evo.MutationConfig()
    counts = np.zeros(len(config.step_probabilities))
    invalid = 0
    total = 0
    applied = [0]
    original = evo.apply_modifier

    def counting(*args, **kwargs):
        out = original(*args, **kwargs)
        applied[0] += 1
        return out

    evo.apply_modifier = counting
    try:
        for net_class in CLASSES:
            pool = initial_pool(net_class)
            rng = np.random.default_rng(9)
            for k in range(10**4):
                applied[0] = 0
                child = evo.mutate(pool[k % len(pool)], config, rng)
                counts[applied[0] - 1] += 1
                invalid += not ag.validate(child, config.constraints, input_size=config.input_size).ok
                total += 1
    finally:
        evo.apply_modifier = original
    freq = counts / total
    dev = float(np.abs(freq - np.array(config.step_probabilities)).max())
    ok = invalid == 0 and dev <= 0.02
    assert report(9, "2 x 10^4 compound mutations validate, step counts match", ok,
                  f"{invalid} invalid, frequencies {np.round(freq, 3).tolist()}, max dev {dev:.3f}")


def _best(args):
    method, net_class, objective, seed = args
    cfg = search.SearchConfig(method=method, net_class=net_class, objective=objective,
                              budget=150, workers=2, seed=seed)
    return args, search.run(cfg).best


def test_search_efficacy(report):
    jobs = [(m, c, f, s) for c, f in (("cnn", "f1"), ("mlp", "f2"))
            for s in range(10) for m in ("nasbot", "random")]
    start = time.perf_counter()
    with ProcessPoolExecutor(max_workers=os.cpu_count()) as pool:
        best = dict(pool.map(_best, jobs))
    elapsed = time.perf_counter() - start
    parts, medians_ok, wins_ok = [], True, False
    for c, f in (("cnn", "f1"), ("mlp", "f2")):
        nb = np.array([best["nasbot", c, f, s] for s in range(10)])
        rd = np.array([best["random", c, f, s] for s in range(10)])
        wins = int((nb > rd).sum())
        medians_ok &= bool(np.median(nb) >= np.median(rd))
        wins_ok |= wins >= 7
        parts.append(f"{f}: median {np.median(nb):.3f} vs {np.median(rd):.3f}, {wins}/10 wins")
    on_time = elapsed < 600
    detail = "; ".join(parts) + f"; {elapsed:.0f} s on {os.cpu_count()} core(s)"
    report(10, "NASBOT vs random search, 10 paired seeds", medians_ok and wins_ok and on_time, detail)
    assert medians_ok and wins_ok, detail
    assert on_time, f"experiment took {elapsed:.0f} s (limit 600 s)"


def _cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "nasbot.cli", *args], cwd=cwd,
                          capture_output=True, check=False)
    return proc.returncode, proc.stdout


def _tree(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_determinism(report, tmp_path):
    pool_dir = tmp_path / "pool"
    _cli(["genpool", "--class", "mlp", "--out", str(pool_dir)], tmp_path)
    files = sorted(str(p) for p in pool_dir.iterdir())
    commands = [
        ["validate", "--json", *files],
        ["dist", files[0], files[3], "--json"],
        ["distmat", *files[:5], "--normalized"],
        ["mutate", files[2], "--seed", "11"],
        ["genpool", "--class", "cnn", "--out", "OUT"],
        ["search", "--method", "nasbot", "--objective", "f2", "--budget", "14",
         "--workers", "1", "--seed", "5", "--out", "OUT"],
        ["search", "--method", "ea", "--objective", "f2", "--budget", "25",
         "--workers", "1", "--seed", "5", "--out", "OUT"],
    ]
    mismatched = []
    for k, cmd in enumerate(commands):
        outputs = []
        for rep in range(2):
            out_dir = tmp_path / f"run{k}_{rep}"
            code, stdout = _cli([str(out_dir) if a == "OUT" else a for a in cmd], tmp_path)
            stdout = stdout.replace(str(out_dir).encode(), b"OUT")
            outputs.append((code, stdout, _tree(out_dir) if out_dir.exists() else {}))
        if outputs[0] != outputs[1] or outputs[0][0] != 0:
            mismatched.append(cmd[0])
    assert report(11, f"{len(commands)} CLI commands rerun byte-identically", not mismatched,
                  f"mismatched: {mismatched}" if mismatched else "")

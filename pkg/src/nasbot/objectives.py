"""Architecture statistics, synthetic test functions and external evaluators."""

import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Callable, Optional

from . import archgraph as ag


class ObjectiveError(RuntimeError):
    """Base class for objective evaluation failures."""

    sentinel = "failed"


class ExternalFailure(ObjectiveError):
    sentinel = "exit"


class ExternalTimeout(ObjectiveError):
    sentinel = "timeout"


class ExternalParseError(ObjectiveError):
    sentinel = "parse"


class ObjectiveClassError(ValueError):
    """Objective requested on an architecture class it does not apply to."""


@dataclass(frozen=True)
class ArchStats:
    am: float
    deg_i: float
    deg_o: float
    delta: float
    n_layers: int
    n_edges: int
    stride_avg: Optional[float] = None
    frac_conv3: Optional[float] = None
    frac_sigmoid: Optional[float] = None


def stats(arch: ag.Architecture, mass_params: ag.MassParams = ag.MassParams()) -> ArchStats:
    n = len(arch.layers)
    e = len(arch.edges)
    proc = [arch.by_id[u] for u in arch.processing_layers]
    sp = ag.path_lengths(arch, ag.PathLengthSpec("sp", ag.IP))
    kw = {}
    if arch.net_class == ag.CNN:
        strides = [l.stride for l in proc if l.label in ag.STRIDE_LABELS]
        kw["stride_avg"] = sum(strides) / len(strides) if strides else 0.0
        kw["frac_conv3"] = sum(l.label == "conv3" for l in proc) / len(proc) if proc else 0.0
    else:
        kw["frac_sigmoid"] = (sum(l.label in ag.SIGMOID_LABELS for l in proc) / len(proc)
                              if proc else 0.0)
    return ArchStats(
        am=ag.total_mass(arch, mass_params) / n,
        deg_i=e / n,
        deg_o=e / n,
        delta=sp[arch.op],
        n_layers=n,
        n_edges=e,
        **kw,
    )


def _f0(s: ArchStats) -> float:
    return (math.exp(-0.001 * abs(s.am - 1000))
            + math.exp(-0.5 * abs(s.deg_i - 5))
            + math.exp(-0.5 * abs(s.deg_o - 5))
            + math.exp(-0.1 * abs(s.delta - 5))
            + math.exp(-0.1 * abs(s.n_layers - 30))
            + math.exp(-0.05 * abs(s.n_edges - 100)))


def f_from_stats(k: int, s: ArchStats) -> float:
    if k == 0:
        return _f0(s)
    if k == 1:
        if s.stride_avg is None:
            raise ObjectiveClassError("f1 needs stride and conv3 statistics (cnn only)")
        return (_f0(s) + math.exp(-3 * abs(s.stride_avg - 1.5))
                + math.exp(-0.3 * abs(s.n_layers - 50))
                + math.exp(-0.001 * abs(s.am - 500)) + s.frac_conv3)
    if k in (2, 3):
        if s.frac_sigmoid is None:
            raise ObjectiveClassError(f"f{k} needs the sigmoid fraction (mlp only)")
        if k == 2:
            return (_f0(s) + math.exp(-0.001 * abs(s.am - 2000))
                    + math.exp(-0.1 * abs(s.n_edges - 50)) + s.frac_sigmoid)
        return _f0(s) + s.frac_sigmoid
    raise ValueError(f"unknown synthetic function f{k}")


def eval_f(k: int, arch: ag.Architecture) -> float:
    return f_from_stats(k, stats(arch))


SYNTHETIC_CLASSES = {0: (ag.CNN, ag.MLP), 1: (ag.CNN,), 2: (ag.MLP,), 3: (ag.MLP,)}


def external_evaluate(template: str, arch: ag.Architecture, timeout: Optional[float] = None) -> float:
    """Run ``template`` with ``{arch}`` replaced by a JSON file path.

    The last non-empty line of standard output is the (higher is better) value.
    """
    fd, path = tempfile.mkstemp(suffix=".json", prefix="arch-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(ag.to_json(arch))
        cmd = template.replace("{arch}", shlex.quote(path))
        try:
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired:
            raise ExternalTimeout(f"evaluator timed out after {timeout}s") from None
        if proc.returncode != 0:
            raise ExternalFailure(f"evaluator exited with status {proc.returncode}: "
                                  f"{proc.stderr.strip()[-200:]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines:
            raise ExternalParseError("evaluator printed nothing")
        try:
            value = float(lines[-1].strip())
        except ValueError:
            raise ExternalParseError(f"cannot parse {lines[-1].strip()!r} as a number") from None
        if not math.isfinite(value):
            raise ExternalParseError(f"non-finite value {value}")
        return value
    finally:
        os.unlink(path)


def resolve(spec: str, net_class: str, timeout: Optional[float] = None) -> Callable:
    """Objective callable for ``f0``..``f3`` or ``external:<command template>``."""
    if spec.startswith("external:"):
        template = spec[len("external:"):]
        if "{arch}" not in template:
            raise ValueError("external objective template needs an {arch} placeholder")
        return lambda arch: external_evaluate(template, arch, timeout)
    if len(spec) == 2 and spec[0] == "f" and spec[1] in "0123":
        k = int(spec[1])
        if net_class not in SYNTHETIC_CLASSES[k]:
            raise ObjectiveClassError(f"{spec} does not apply to {net_class} networks")
        return lambda arch: eval_f(k, arch)
    raise ValueError(f"unknown objective {spec!r}")

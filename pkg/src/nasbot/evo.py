"""Network modifiers, the compound mutation operator and a mutation-only EA.

Every modifier takes a valid architecture and either returns a new valid one
or raises :class:`MutationRejected` with the reason.  New architectures are
renumbered densely in topological order.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import archgraph as ag

DEFAULT_STEP_PROBABILITIES = (0.5, 0.25, 0.125, 0.075, 0.05)


class ModifierKind(str, enum.Enum):
    DEC_SINGLE = "dec_single"
    DEC_EN_MASSE = "dec_en_masse"
    INC_SINGLE = "inc_single"
    INC_EN_MASSE = "inc_en_masse"
    DUP_PATH = "dup_path"
    REMOVE_LAYER = "remove_layer"
    SKIP = "skip"
    SWAP_LABEL = "swap_label"
    WEDGE = "wedge"


ALL_KINDS = tuple(ModifierKind)
UNIT_KINDS = ALL_KINDS[:4]
STRUCTURE_KINDS = ALL_KINDS[4:]
MODIFIER_SUBSETS = {"all": ALL_KINDS, "units": UNIT_KINDS, "structure": STRUCTURE_KINDS}


class MutationRejected(Exception):
    """A modifier has no valid application to the given architecture."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class EvaluationError(RuntimeError):
    """Objective failure inside the EA; ``arch`` is the offending architecture."""

    def __init__(self, arch, cause):
        self.arch = arch
        super().__init__(f"evaluation failed: {cause}")


@dataclass(frozen=True)
class MutationConfig:
    step_probabilities: tuple = DEFAULT_STEP_PROBABILITIES
    max_attempts: int = 20
    kinds: tuple = ALL_KINDS
    constraints: ag.DomainConstraints = ag.DomainConstraints()
    input_size: int = 32

    def __post_init__(self):
        p = np.asarray(self.step_probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("step_probabilities must be positive and sum to 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        kinds = tuple(ModifierKind(k) for k in self.kinds)
        if not kinds:
            raise ValueError("at least one modifier kind is required")
        object.__setattr__(self, "step_probabilities", tuple(float(x) for x in p))
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def subset(cls, name: str, **kwargs) -> "MutationConfig":
        return cls(kinds=MODIFIER_SUBSETS[name], **kwargs)


# ---------------------------------------------------------------------------
# helpers


def unit_step(units: int, sign: int, constraints: ag.DomainConstraints) -> int:
    new = units + sign * math.ceil(units / 8)
    return min(max(new, constraints.min_units), constraints.max_units)


def _clamp_units(u, constraints):
    return int(min(max(u, constraints.min_units), constraints.max_units))


def _finish(net_class, layers, edges, input_channels, config: MutationConfig) -> ag.Architecture:
    """Build, renumber in topological order and validate."""
    arch = ag.Architecture(net_class, tuple(layers), frozenset(edges), input_channels)
    try:
        order = ag.topo_sort(arch)
    except ag.CycleError:
        raise MutationRejected("cycle") from None
    arch = ag.relabel(arch, {u: i for i, u in enumerate(order)})
    # ids now follow a topological order, which is also the smallest-id one
    arch.__dict__["order"] = list(range(len(order)))
    rep = ag.validate(arch, config.constraints, config.input_size)
    if not rep.ok:
        raise MutationRejected(rep.violations[0].rule)
    return arch


def _with(layer: ag.Layer, **changes) -> ag.Layer:
    d = dict(id=layer.id, label=layer.label, units=layer.units, stride=layer.stride)
    d.update(changes)
    return ag.Layer(**d)


def _unit_layers(arch) -> list:
    return [l.id for l in arch.layers if l.units is not None]


def en_masse_count(n_layers: int) -> int:
    if n_layers <= 4:
        return math.ceil(n_layers / 2)
    if n_layers <= 8:
        return math.ceil(n_layers / 4)
    return math.ceil(n_layers / 8)


# ---------------------------------------------------------------------------
# modifiers


def change_units(arch, ids, sign: int, config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Move each listed layer's units by ``sign * ceil(units / 8)``."""
    ids = set(ids)
    changed = False
    layers = []
    for l in arch.layers:
        if l.id in ids and l.units is not None:
            new = unit_step(l.units, sign, config.constraints)
            changed |= new != l.units
            l = _with(l, units=new)
        layers.append(l)
    if not changed:
        raise MutationRejected("units already at bound")
    return _finish(arch.net_class, layers, arch.edges, arch.input_channels, config)


def duplicate_path(arch, path: Sequence[int], config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Copy the interior of ``path`` and wire the copy between its endpoints."""
    if len(path) < 3:
        raise MutationRejected("path has no interior layers")
    for u, v in zip(path, path[1:]):
        if (u, v) not in arch.edges:
            raise MutationRejected("not a path")
    nxt = max(arch.by_id) + 1
    layers = list(arch.layers)
    edges = set(arch.edges)
    copies = []
    for u in path[1:-1]:
        layers.append(_with(arch.by_id[u], id=nxt))
        copies.append(nxt)
        nxt += 1
    chain = [path[0]] + copies + [path[-1]]
    edges.update(zip(chain, chain[1:]))
    return _finish(arch.net_class, layers, edges, arch.input_channels, config)


def remove_layer(arch, u: int, rng, config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Delete ``u`` and reconnect parents/children that would be left dangling."""
    if u not in arch.processing_layers:
        raise MutationRejected("only processing layers can be removed")
    parents = arch.parents[u]
    children = arch.children[u]
    edges = {(a, b) for a, b in arch.edges if u not in (a, b)}
    for p in parents:
        if arch.children[p] == [u]:
            edges.add((p, children[rng.integers(len(children))]))
    for c in children:
        if arch.parents[c] == [u]:
            edges.add((parents[rng.integers(len(parents))], c))
    layers = [l for l in arch.layers if l.id != u]
    return _finish(arch.net_class, layers, edges, arch.input_channels, config)


def skip_candidates(arch) -> list:
    """Pairs (u, v), u topologically before v, that a new edge may join."""
    pos = {u: i for i, u in enumerate(arch.order)}
    decision = set(arch.decision_layers)
    out = []
    for u in arch.order:
        if u == arch.op or u in decision:
            continue
        for v in arch.order[pos[u] + 1:]:
            if v == arch.op or (u, v) in arch.edges:
                continue
            out.append((u, v))
    return out


def add_skip(arch, u: int, v: int, config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Add edge (u, v); in a CNN, insert stride-2 avg-pool layers to match sizes."""
    if (u, v) in arch.edges:
        raise MutationRejected("edge already present")
    layers = list(arch.layers)
    edges = set(arch.edges)
    src = u
    if arch.net_class == ag.CNN:
        sizes, _ = ag.image_sizes(arch, config.input_size)
        have = sizes[u]
        parents = arch.parents[v]
        want = sizes[parents[0]] if parents else have
        nxt = max(arch.by_id) + 1
        while have > want:
            layers.append(ag.Layer(nxt, "avg-pool"))
            edges.add((src, nxt))
            src = nxt
            nxt += 1
            have = -(-have // 2)
        if have != want:
            raise MutationRejected("image sizes cannot be matched")
    edges.add((src, v))
    return _finish(arch.net_class, layers, edges, arch.input_channels, config)


def swap_label(arch, u: int, label: str, config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Give processing layer ``u`` a new label, adapting units and stride."""
    if u not in arch.processing_layers:
        raise MutationRejected("only processing layers change label")
    old = arch.by_id[u]
    if label == old.label:
        raise MutationRejected("label unchanged")
    units = old.units
    if label in ag.UNIT_LABELS and units is None:
        units = _clamp_units(ag.incoming_units(arch)[u], config.constraints)
    elif label not in ag.UNIT_LABELS:
        units = None
    stride = None
    if label in ag.STRIDE_LABELS:
        # keep the image size the layer produced before
        stride = old.stride if old.stride is not None else (2 if old.is_pool else 1)
    layers = [_with(l, label=label, units=units, stride=stride) if l.id == u else l
              for l in arch.layers]
    return _finish(arch.net_class, layers, arch.edges, arch.input_channels, config)


def wedge_layer(arch, u: int, v: int, label: str, config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Replace edge (u, v) by u -> w -> v for a new layer w labelled ``label``."""
    if (u, v) not in arch.edges:
        raise MutationRejected("edge not present")
    if v == arch.op:
        raise MutationRejected("cannot wedge between decision and op layers")
    units = None
    if label in ag.UNIT_LABELS:
        known = [x.units for x in (arch.by_id[u], arch.by_id[v]) if x.units is not None]
        if known:
            units = _clamp_units(math.floor(sum(known) / len(known) + 0.5), config.constraints)
        else:
            units = _clamp_units(ag.incoming_units(arch)[v], config.constraints)
    stride = 1 if label in ag.STRIDE_LABELS else None
    w = max(arch.by_id) + 1
    layers = list(arch.layers) + [ag.Layer(w, label, units, stride)]
    edges = (set(arch.edges) - {(u, v)}) | {(u, w), (w, v)}
    return _finish(arch.net_class, layers, edges, arch.input_channels, config)


def _random_path(arch, rng) -> list:
    starts = [u for u in arch.order if arch.children[u]]
    path = [starts[rng.integers(len(starts))]]
    while True:
        kids = arch.children[path[-1]]
        if not kids:
            break
        path.append(kids[rng.integers(len(kids))])
        if len(path) >= 3 and rng.random() < 0.5:
            break
    return path


def apply_modifier(arch, kind, rng, config: MutationConfig = MutationConfig()) -> ag.Architecture:
    """Apply one randomly parameterised modifier of the given kind."""
    kind = ModifierKind(kind)
    if kind in (ModifierKind.DEC_SINGLE, ModifierKind.INC_SINGLE):
        ids = _unit_layers(arch)
        if not ids:
            raise MutationRejected("no layer has units")
        sign = -1 if kind == ModifierKind.DEC_SINGLE else 1
        return change_units(arch, [ids[rng.integers(len(ids))]], sign, config)

    if kind in (ModifierKind.DEC_EN_MASSE, ModifierKind.INC_EN_MASSE):
        ids = [u for u in arch.order if arch.by_id[u].units is not None
               and u in set(arch.processing_layers)]
        if not ids:
            raise MutationRejected("no processing layer has units")
        k = min(en_masse_count(len(arch)), len(ids))
        picked = sorted(rng.choice(len(ids), size=k, replace=False))
        sign = -1 if kind == ModifierKind.DEC_EN_MASSE else 1
        return change_units(arch, [ids[i] for i in picked], sign, config)

    if kind == ModifierKind.DUP_PATH:
        return duplicate_path(arch, _random_path(arch, rng), config)

    if kind == ModifierKind.REMOVE_LAYER:
        ids = arch.processing_layers
        if len(ids) < 2:
            raise MutationRejected("removing the only processing layer")
        return remove_layer(arch, ids[rng.integers(len(ids))], rng, config)

    if kind == ModifierKind.SKIP:
        pairs = skip_candidates(arch)
        if not pairs:
            raise MutationRejected("all pairs connected")
        u, v = pairs[rng.integers(len(pairs))]
        return add_skip(arch, u, v, config)

    if kind == ModifierKind.SWAP_LABEL:
        ids = arch.processing_layers
        if not ids:
            raise MutationRejected("no processing layer")
        u = ids[rng.integers(len(ids))]
        choices = [l for l in ag.PROCESSING_LABELS[arch.net_class] if l != arch.by_id[u].label]
        return swap_label(arch, u, choices[rng.integers(len(choices))], config)

    if kind == ModifierKind.WEDGE:
        edges = sorted(e for e in arch.edges if e[1] != arch.op)
        if not edges:
            raise MutationRejected("no edge to wedge into")
        u, v = edges[rng.integers(len(edges))]
        labels = ag.PROCESSING_LABELS[arch.net_class]
        return wedge_layer(arch, u, v, labels[rng.integers(len(labels))], config)

    raise ValueError(f"unknown modifier {kind!r}")


def draw_steps(config: MutationConfig, rng) -> int:
    cdf = np.cumsum(config.step_probabilities)
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), cdf.size - 1) + 1


def mutate(arch, config: MutationConfig = MutationConfig(), rng=None, steps: Optional[int] = None):
    """Compound mutation: a random number of successful one-step modifiers.

    A step that exhausts ``max_attempts`` leaves the architecture as it was
    after the previous successful step.
    """
    rng = np.random.default_rng() if rng is None else rng
    k = draw_steps(config, rng) if steps is None else steps
    kinds = config.kinds
    for _ in range(k):
        for _ in range(config.max_attempts):
            kind = kinds[rng.integers(len(kinds))]
            try:
                arch = apply_modifier(arch, kind, rng, config)
                break
            except MutationRejected:
                continue
    return arch


# ---------------------------------------------------------------------------
# selection and the EA


def selection_probabilities(values) -> np.ndarray:
    """pi(z) proportional to exp(g(z) / sigma); uniform when sigma is 0."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("cannot select from an empty pool")
    sigma = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    if not sigma > 0 or not np.isfinite(sigma):
        return np.full(v.size, 1.0 / v.size)
    w = np.exp((v - v.max()) / sigma)
    return w / w.sum()


def select_candidates(evaluated, n: int, rng) -> list:
    """``n`` draws with replacement from ``evaluated`` = [(arch, value), ...]."""
    if not evaluated:
        raise ValueError("cannot select from an empty pool")
    if n <= 0:
        return []
    p = selection_probabilities([v for _, v in evaluated])
    idx = rng.choice(len(evaluated), size=n, p=p)
    return [evaluated[i][0] for i in idx]


@dataclass
class EAResult:
    best_arch: Optional[ag.Architecture]
    best_value: float
    history: list = field(default_factory=list)

    def best_trace(self) -> list:
        out, best = [], -np.inf
        for _, v in self.history:
            best = max(best, v)
            out.append(best)
        return out


def ea_maximize(g: Callable, init_pool, total_evals: int, n_mut: int,
                config: MutationConfig = MutationConfig(), rng=None, batched: bool = False,
                exclude=frozenset(), init_values: Optional[Sequence[float]] = None,
                max_stale_rounds: int = 20) -> EAResult:
    """Maximise ``g`` over architectures by selection and mutation.

    ``g`` maps one architecture to a value, or a list to an array when
    ``batched``.  ``init_values`` skips evaluating the seeds.  Hashes in
    ``exclude`` take part in selection but are never returned as the best.
    Duplicate children are dropped without counting against ``total_evals``;
    the loop also stops after ``max_stale_rounds`` rounds without a new child.
    """
    rng = np.random.default_rng() if rng is None else rng
    init_pool = list(init_pool)
    if total_evals < len(init_pool):
        raise ValueError("total_evals must cover the initial pool")

    def evaluate(archs):
        try:
            if batched:
                vals = np.asarray(g(archs), dtype=float)
            else:
                vals = []
                for a in archs:
                    try:
                        vals.append(float(g(a)))
                    except EvaluationError:
                        raise
                    except Exception as err:
                        raise EvaluationError(a, err) from err
        except EvaluationError:
            raise
        except Exception as err:
            raise EvaluationError(archs[0] if len(archs) == 1 else archs, err) from err
        return [float(v) for v in vals]

    pool, seen = [], set()
    for a in init_pool:
        if a.structural_hash not in seen:
            seen.add(a.structural_hash)
            pool.append(a)
    values = list(init_values) if init_values is not None else evaluate(pool)
    if len(values) != len(pool):
        raise ValueError("init_values does not match the deduplicated pool")
    history = list(zip(pool, values))
    evals = len(history)
    stale = 0
    while evals < total_evals and stale < max_stale_rounds:
        n = min(n_mut, total_evals - evals)
        children = []
        for parent in select_candidates(history, n, rng):
            child = mutate(parent, config, rng)
            h = child.structural_hash
            if h not in seen:
                seen.add(h)
                children.append(child)
        if not children:
            stale += 1
            continue
        stale = 0
        history.extend(zip(children, evaluate(children)))
        evals += len(children)

    best_arch, best_value = None, -np.inf
    for a, v in history:
        if v > best_value and a.structural_hash not in exclude:
            best_arch, best_value = a, v
    return EAResult(best_arch, best_value, history)

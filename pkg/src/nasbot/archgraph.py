"""Neural network architectures as labelled DAGs.

An :class:`Architecture` is an immutable set of layers and directed edges.
Layer ids are non-negative integers; the helpers in this module never assume
they are dense, but everything that builds new architectures (parsing,
mutation) renumbers them densely.
"""

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from numba import njit

IP = "ip"
OP = "op"

CNN = "cnn"
MLP = "mlp"
NET_CLASSES = (CNN, MLP)

CONV_LABELS = ("conv3", "conv5", "conv7")
RES_LABELS = ("res3", "res5", "res7")
POOL_LABELS = ("max-pool", "avg-pool")
RECTIFIER_LABELS = ("relu", "crelu", "leaky-relu", "softplus", "elu")
SIGMOID_LABELS = ("logistic", "tanh")

CNN_LABELS = (IP, OP, "softmax") + CONV_LABELS + RES_LABELS + POOL_LABELS + ("fc",)
MLP_LABELS = (IP, OP, "linear") + RECTIFIER_LABELS + SIGMOID_LABELS

LABELS = {CNN: CNN_LABELS, MLP: MLP_LABELS}
DECISION_LABEL = {CNN: "softmax", MLP: "linear"}
PROCESSING_LABELS = {
    CNN: CONV_LABELS + RES_LABELS + POOL_LABELS + ("fc",),
    MLP: RECTIFIER_LABELS + SIGMOID_LABELS,
}
UNIT_LABELS = frozenset(CONV_LABELS + RES_LABELS + ("fc",) + RECTIFIER_LABELS + SIGMOID_LABELS)
STRIDE_LABELS = frozenset(CONV_LABELS + RES_LABELS)

# label classes for restricted path lengths; "all" is handled separately
LABEL_CLASSES = {
    CNN: ("all", "conv", "pool", "fc"),
    MLP: ("all", "rect", "sigm"),
}
_CLASS_MEMBERS = {
    "conv": frozenset(CONV_LABELS + RES_LABELS),
    "pool": frozenset(POOL_LABELS),
    "fc": frozenset(("fc",)),
    "rect": frozenset(RECTIFIER_LABELS),
    "sigm": frozenset(SIGMOID_LABELS),
}

PATH_KINDS = ("sp", "lp", "rw")
ANCHORS = (IP, OP)


class ArchitectureError(ValueError):
    """Raised for malformed architecture documents and unusable graphs."""


class CycleError(ArchitectureError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f"cycle detected: {' -> '.join(map(str, self.cycle))}")


@dataclass(frozen=True)
class Layer:
    id: int
    label: str
    units: Optional[int] = None
    stride: Optional[int] = None

    @property
    def is_pool(self) -> bool:
        return self.label in POOL_LABELS


@dataclass(frozen=True)
class DomainConstraints:
    max_layers: int = 60
    max_mass: float = 1e8
    max_in_degree: int = 5
    max_out_degree: int = 5
    max_edges: int = 200
    min_units: int = 8
    max_units: int = 1024


@dataclass(frozen=True)
class MassParams:
    zeta: float = 0.1
    fc_multiplier: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise ValueError(f"zeta must lie in (0, 1), got {self.zeta}")
        if not 0.0 < self.fc_multiplier <= 1.0:
            raise ValueError(f"fc_multiplier must lie in (0, 1], got {self.fc_multiplier}")


@dataclass(frozen=True)
class PathLengthSpec:
    kind: str
    anchor: str
    label_class: str = "all"

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}")
        if self.anchor not in ANCHORS:
            raise ValueError(f"unknown anchor {self.anchor!r}")
        if self.label_class != "all" and self.label_class not in _CLASS_MEMBERS:
            raise ValueError(f"unknown label class {self.label_class!r}")


@dataclass(frozen=True)
class Architecture:
    net_class: str
    layers: tuple
    edges: frozenset
    input_channels: int = 1

    def __post_init__(self):
        layers = tuple(sorted(self.layers, key=lambda l: l.id))
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "edges", frozenset((int(u), int(v)) for u, v in self.edges))

    @cached_property
    def by_id(self) -> dict:
        return {l.id: l for l in self.layers}

    @cached_property
    def children(self) -> dict:
        out = {l.id: [] for l in self.layers}
        for u, v in sorted(self.edges):
            if u in out:
                out[u].append(v)
        return out

    @cached_property
    def parents(self) -> dict:
        out = {l.id: [] for l in self.layers}
        for u, v in sorted(self.edges):
            if v in out:
                out[v].append(u)
        return out

    @cached_property
    def ip(self) -> int:
        return next(l.id for l in self.layers if l.label == IP)

    @cached_property
    def op(self) -> int:
        return next(l.id for l in self.layers if l.label == OP)

    @property
    def decision_label(self) -> str:
        return DECISION_LABEL[self.net_class]

    @cached_property
    def decision_layers(self) -> list:
        return [l.id for l in self.layers if l.label == self.decision_label]

    @cached_property
    def processing_layers(self) -> list:
        skip = {IP, OP, self.decision_label}
        return [l.id for l in self.layers if l.label not in skip]

    @cached_property
    def order(self) -> list:
        return topo_sort(self)

    def __len__(self):
        return len(self.layers)

    @cached_property
    def structural_hash(self) -> str:
        return structural_hash(self)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    rule: str
    ids: tuple = ()

    def __str__(self):
        return f"{self.rule} {list(self.ids)}" if self.ids else self.rule


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def rules(self) -> list:
        return [v.rule for v in self.violations]

    def add(self, rule, *ids):
        self.violations.append(Violation(rule, tuple(ids)))


def validate(arch: Architecture, constraints: DomainConstraints = DomainConstraints(),
             input_size: int = 32, mass_params: MassParams = MassParams()) -> ValidationReport:
    """Check every structural and domain rule; violations are returned, not raised."""
    rep = ValidationReport()
    if arch.net_class not in NET_CLASSES:
        rep.add(f"unknown class {arch.net_class!r}")
        return rep
    if arch.input_channels < 1:
        rep.add("input_channels < 1")

    ids = [l.id for l in arch.layers]
    if len(set(ids)) != len(ids):
        rep.add("duplicate layer id")
        return rep
    known = set(ids)
    for u, v in sorted(arch.edges):
        if u not in known or v not in known:
            rep.add("edge references unknown layer", u, v)
    if not rep.ok:
        return rep

    allowed = LABELS[arch.net_class]
    for l in arch.layers:
        if l.label not in allowed:
            rep.add(f"label {l.label!r} not allowed in {arch.net_class}", l.id)
            continue
        if l.label in UNIT_LABELS:
            if l.units is None:
                rep.add("missing units", l.id)
            elif not constraints.min_units <= l.units <= constraints.max_units:
                rep.add(f"units outside [{constraints.min_units}, {constraints.max_units}]", l.id)
        elif l.units is not None:
            rep.add("unexpected units", l.id)
        if l.label in STRIDE_LABELS:
            if l.stride not in (1, 2):
                rep.add("stride not in {1, 2}", l.id)
        elif l.stride is not None:
            rep.add("unexpected stride", l.id)

    ips = [l.id for l in arch.layers if l.label == IP]
    ops = [l.id for l in arch.layers if l.label == OP]
    if len(ips) != 1:
        rep.add("expected exactly one ip layer", *ips)
    if len(ops) != 1:
        rep.add("expected exactly one op layer", *ops)
    if not rep.ok:
        return rep
    ip, op = ips[0], ops[0]
    decision = set(arch.decision_layers)

    for u, v in sorted(arch.edges):
        if u == v:
            rep.add("self edge", u, v)
        if v == ip:
            rep.add("incoming edge to ip", u, v)
        if u == op:
            rep.add("outgoing edge from op", u, v)
        if v == op and u not in decision:
            rep.add("edge into op from non-decision layer", u, v)
        if u in decision and v != op:
            rep.add("decision layer feeds non-op layer", u, v)
    for l in arch.layers:
        if l.id != ip and not arch.parents[l.id]:
            rep.add("layer without incoming edge", l.id)
        if l.id != op and not arch.children[l.id]:
            rep.add("layer without outgoing edge", l.id)
    if not decision:
        rep.add("no decision layer")
    if not arch.processing_layers:
        rep.add("no processing layer")

    try:
        arch.order
    except CycleError as err:
        rep.add("cycle", *err.cycle)
        return rep

    c = constraints
    if len(arch.layers) > c.max_layers:
        rep.add(f"layer count > {c.max_layers}")
    if len(arch.edges) > c.max_edges:
        rep.add(f"edge count > {c.max_edges}")
    for l in arch.layers:
        if len(arch.parents[l.id]) > c.max_in_degree:
            rep.add(f"in-degree > {c.max_in_degree}", l.id)
        if len(arch.children[l.id]) > c.max_out_degree:
            rep.add(f"out-degree > {c.max_out_degree}", l.id)

    if arch.net_class == CNN:
        _, problems = image_sizes(arch, input_size)
        rep.violations.extend(problems)
    if not rep.ok:
        return rep
    if total_mass(arch, mass_params) > c.max_mass:
        rep.add(f"total mass > {c.max_mass:g}")
    return rep


def is_valid(arch: Architecture, **kwargs) -> bool:
    return validate(arch, **kwargs).ok


# ---------------------------------------------------------------------------
# ordering


def topo_sort(arch: Architecture) -> list:
    """Kahn's algorithm with smallest-id tie-breaking; raises CycleError."""
    indeg = {l.id: 0 for l in arch.layers}
    for _, v in arch.edges:
        indeg[v] += 1
    ready = sorted(u for u, d in indeg.items() if d == 0)
    out = []
    heapq.heapify(ready)
    children = arch.children
    while ready:
        u = heapq.heappop(ready)
        out.append(u)
        for v in children[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    if len(out) != len(arch.layers):
        raise CycleError(_find_cycle(arch, {u for u, d in indeg.items() if d > 0}))
    return out


def _find_cycle(arch, remaining):
    # every remaining node has a remaining parent, so walking parents must loop
    u = min(remaining)
    seen = {}
    walk = []
    while u not in seen:
        seen[u] = len(walk)
        walk.append(u)
        u = next(p for p in arch.parents[u] if p in remaining)
    cyc = walk[seen[u]:]
    cyc.reverse()
    return cyc + [cyc[0]]


# ---------------------------------------------------------------------------
# masses


def incoming_units(arch: Architecture) -> dict:
    """Number of channels/units flowing into each layer."""
    out_units = {}
    incoming = {}
    for u in arch.order:
        layer = arch.by_id[u]
        if layer.label == IP:
            incoming[u] = 0
            out_units[u] = arch.input_channels
            continue
        incoming[u] = sum(out_units[p] for p in arch.parents[u])
        out_units[u] = layer.units if layer.units is not None else incoming[u]
    return incoming


def layer_masses(arch: Architecture, params: MassParams = MassParams()) -> dict:
    """Mass of every layer, keyed by layer id."""
    incoming = incoming_units(arch)
    decision = set(arch.decision_layers)
    masses = {}
    processing = 0.0
    for l in arch.layers:
        if l.label in (IP, OP) or l.id in decision:
            continue
        if l.units is None:
            # pooling: one operation per incoming channel
            m = float(incoming[l.id])
        else:
            m = float(l.units) * incoming[l.id]
            if l.label in RES_LABELS:
                m *= 2.0
            elif l.label == "fc":
                m *= params.fc_multiplier
        masses[l.id] = m
        processing += m
    masses[arch.ip] = params.zeta * processing
    masses[arch.op] = params.zeta * processing
    for u in decision:
        masses[u] = params.zeta * processing / len(decision)
    return {l.id: masses[l.id] for l in arch.layers}


def total_mass(arch: Architecture, params: MassParams = MassParams()) -> float:
    return float(sum(layer_masses(arch, params).values()))


# ---------------------------------------------------------------------------
# path lengths


def _in_class(label: str, label_class: str) -> bool:
    return label_class == "all" or label in _CLASS_MEMBERS[label_class]


def path_lengths(arch: Architecture, spec: PathLengthSpec) -> dict:
    """Shortest/longest/random-walk hop counts to op or from ip.

    Under a restricted label class a hop only counts when it lands on a layer
    of that class; hops onto ip/op count only for the unrestricted class.
    """
    combine = {"sp": min, "lp": max, "rw": lambda xs: sum(xs) / len(xs)}[spec.kind]
    if spec.anchor == OP:
        order = arch.order[::-1]
        nbrs = arch.children
    else:
        order = arch.order
        nbrs = arch.parents
    weight = {l.id: 1.0 if _in_class(l.label, spec.label_class) else 0.0 for l in arch.layers}
    delta = {}
    for u in order:
        if not nbrs[u]:
            delta[u] = 0.0
            continue
        delta[u] = combine([weight[c] + delta[c] for c in nbrs[u]])
    return {l.id: delta[l.id] for l in arch.layers}


def path_length_features(arch: Architecture) -> np.ndarray:
    """All six path lengths for every label class, rows in layer order.

    Shape ``(len(arch), 6 * n_label_classes)``; columns run over label class,
    then path kind, then anchor.  Equivalent to calling :func:`path_lengths`
    for every combination, but computed in one compiled pass.
    """
    pos = {l.id: i for i, l in enumerate(arch.layers)}
    n = len(arch.layers)
    classes = LABEL_CLASSES[arch.net_class]
    member = np.array([[1.0 if _in_class(l.label, lc) else 0.0 for lc in classes]
                       for l in arch.layers])
    order = np.array([pos[u] for u in arch.order], dtype=np.int64)
    ch_ptr, ch_idx = _csr(arch.children, arch.layers, pos)
    pa_ptr, pa_idx = _csr(arch.parents, arch.layers, pos)
    return _path_features(order, ch_ptr, ch_idx, pa_ptr, pa_idx, member.reshape(n, len(classes)))


def _csr(nbrs, layers, pos):
    ptr = np.zeros(len(layers) + 1, dtype=np.int64)
    idx = []
    for i, l in enumerate(layers):
        idx.extend(pos[v] for v in nbrs[l.id])
        ptr[i + 1] = len(idx)
    return ptr, np.array(idx, dtype=np.int64)


@njit(cache=True)
def _path_features(order, ch_ptr, ch_idx, pa_ptr, pa_idx, member):
    n, n_classes = member.shape
    out = np.zeros((n, 6 * n_classes))
    for anchor in range(2):
        # anchor 0 is ip (walk parents in topological order), 1 is op
        ptr = pa_ptr if anchor == 0 else ch_ptr
        idx = pa_idx if anchor == 0 else ch_idx
        for t in range(n):
            u = order[t] if anchor == 0 else order[n - 1 - t]
            lo = ptr[u]
            hi = ptr[u + 1]
            if hi == lo:
                continue
            for c in range(n_classes):
                base = 6 * c + anchor
                sp = np.inf
                lp = -np.inf
                rw = 0.0
                for q in range(lo, hi):
                    v = idx[q]
                    w = member[v, c]
                    sp = min(sp, w + out[v, base])
                    lp = max(lp, w + out[v, base + 2])
                    rw += w + out[v, base + 4]
                out[u, base] = sp
                out[u, base + 2] = lp
                out[u, base + 4] = rw / (hi - lo)
    return out


# ---------------------------------------------------------------------------
# image sizes


def _halves(layer: Layer) -> bool:
    return layer.label in POOL_LABELS or (layer.label in STRIDE_LABELS and layer.stride == 2)


def image_sizes(arch: Architecture, input_size: int = 32):
    """Propagate image sizes through a CNN.

    Returns ``(sizes, problems)`` where ``sizes`` maps layer id to the size of
    the image the layer outputs and ``problems`` lists Violations for layers
    whose parents disagree or which would halve an image of size 1.
    """
    sizes = {}
    problems = []
    for u in arch.order:
        layer = arch.by_id[u]
        if layer.label == IP:
            sizes[u] = input_size
            continue
        psizes = [sizes[p] for p in arch.parents[u]]
        if not psizes:
            sizes[u] = input_size
            continue
        if layer.label != OP and len(set(psizes)) > 1:
            problems.append(Violation(
                "image size mismatch " + ", ".join(f"{p}:{sizes[p]}" for p in arch.parents[u]),
                (u,)))
        s = psizes[0]
        if _halves(layer):
            if s <= 1:
                problems.append(Violation("image size degenerate", (u,)))
            s = -(-s // 2)
        sizes[u] = s
    return sizes, problems


# ---------------------------------------------------------------------------
# construction helpers


def build(net_class: str, layers, edges, input_channels: int = 1) -> Architecture:
    """Convenience constructor.

    ``layers`` is a sequence of ``(label,)``, ``(label, units)`` or
    ``(label, units, stride)`` tuples (ids are positions); conv/res layers
    default to stride 1.
    """
    out = []
    for i, spec in enumerate(layers):
        if isinstance(spec, str):
            spec = (spec,)
        label = spec[0]
        units = spec[1] if len(spec) > 1 else None
        stride = spec[2] if len(spec) > 2 else None
        if label in STRIDE_LABELS and stride is None:
            stride = 1
        out.append(Layer(i, label, units, stride))
    return Architecture(net_class, tuple(out), frozenset(map(tuple, edges)), input_channels)


def chain(net_class: str, layers, input_channels: int = 1) -> Architecture:
    """Feed-forward chain through ``layers`` in the given order."""
    edges = [(i, i + 1) for i in range(len(layers) - 1)]
    return build(net_class, layers, edges, input_channels)


def relabel(arch: Architecture, mapping: dict) -> Architecture:
    layers = tuple(Layer(mapping[l.id], l.label, l.units, l.stride) for l in arch.layers)
    edges = frozenset((mapping[u], mapping[v]) for u, v in arch.edges)
    return Architecture(arch.net_class, layers, edges, arch.input_channels)


def _signatures(arch: Architecture) -> dict:
    order = arch.order
    base = {l.id: f"{l.label}/{l.units}/{l.stride}" for l in arch.layers}
    up, down = {}, {}
    for u in order:
        up[u] = _digest(base[u] + "<" + ",".join(sorted(up[p] for p in arch.parents[u])))
    for u in reversed(order):
        down[u] = _digest(base[u] + ">" + ",".join(sorted(down[c] for c in arch.children[u])))
    return {u: (arch.by_id[u].label, arch.by_id[u].units or 0, len(arch.children[u]), up[u], down[u])
            for u in order}


def _digest(s: str) -> str:
    return hashlib.sha1(s.encode()).hexdigest()[:16]


def canonical_order(arch: Architecture) -> list:
    """Topological order with ties broken by (label, units, out-degree, context)."""
    sig = _signatures(arch)
    indeg = {l.id: len(arch.parents[l.id]) for l in arch.layers}
    ready = [(sig[u], u) for u, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        _, u = heapq.heappop(ready)
        out.append(u)
        for v in arch.children[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, (sig[v], v))
    return out


def canonicalize(arch: Architecture) -> Architecture:
    """Renumber layers densely in canonical topological order."""
    return relabel(arch, {u: i for i, u in enumerate(canonical_order(arch))})


def structural_hash(arch: Architecture) -> str:
    return hashlib.sha1(to_json(canonicalize(arch), indent=None).encode()).hexdigest()


# ---------------------------------------------------------------------------
# JSON


_TOP_FIELDS = {"class", "input_channels", "layers", "edges"}
_LAYER_FIELDS = {"id", "label", "units", "stride"}


def to_json(arch: Architecture, indent: Optional[int] = 1) -> str:
    layers = []
    for l in arch.layers:
        d = {"id": l.id, "label": l.label}
        if l.units is not None:
            d["units"] = l.units
        if l.stride is not None:
            d["stride"] = l.stride
        layers.append(d)
    doc = {
        "class": arch.net_class,
        "input_channels": arch.input_channels,
        "layers": layers,
        "edges": [list(e) for e in sorted(arch.edges)],
    }
    return json.dumps(doc, indent=indent)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse_json(text: str) -> Architecture:
    """Parse an architecture document; raises ArchitectureError with field paths."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ArchitectureError(f"invalid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ArchitectureError("$: expected an object")
    extra = set(doc) - _TOP_FIELDS
    if extra:
        raise ArchitectureError(f"$: unknown fields {sorted(extra)}")
    for key in ("class", "layers", "edges"):
        if key not in doc:
            raise ArchitectureError(f"$.{key}: missing")
    net_class = doc["class"]
    if net_class not in NET_CLASSES:
        raise ArchitectureError(f"$.class: expected one of {list(NET_CLASSES)}, got {net_class!r}")
    channels = doc.get("input_channels", 1)
    if not _is_int(channels) or channels < 1:
        raise ArchitectureError("$.input_channels: expected a positive integer")
    if not isinstance(doc["layers"], list):
        raise ArchitectureError("$.layers: expected a list")
    layers = []
    seen = set()
    for i, ld in enumerate(doc["layers"]):
        path = f"$.layers[{i}]"
        if not isinstance(ld, dict):
            raise ArchitectureError(f"{path}: expected an object")
        extra = set(ld) - _LAYER_FIELDS
        if extra:
            raise ArchitectureError(f"{path}: unknown fields {sorted(extra)}")
        for key in ("id", "label"):
            if key not in ld:
                raise ArchitectureError(f"{path}.{key}: missing")
        if not _is_int(ld["id"]) or ld["id"] < 0:
            raise ArchitectureError(f"{path}.id: expected a non-negative integer")
        if ld["id"] in seen:
            raise ArchitectureError(f"{path}.id: duplicate layer id {ld['id']}")
        seen.add(ld["id"])
        if ld["label"] not in LABELS[net_class]:
            raise ArchitectureError(f"{path}.label: unknown label {ld['label']!r} for {net_class}")
        for key in ("units", "stride"):
            if key in ld and not _is_int(ld[key]):
                raise ArchitectureError(f"{path}.{key}: expected an integer")
        layers.append(Layer(ld["id"], ld["label"], ld.get("units"), ld.get("stride")))
    if not isinstance(doc["edges"], list):
        raise ArchitectureError("$.edges: expected a list")
    edges = []
    for i, e in enumerate(doc["edges"]):
        if not (isinstance(e, list) and len(e) == 2 and all(_is_int(x) for x in e)):
            raise ArchitectureError(f"$.edges[{i}]: expected a pair of integers")
        if e[0] not in seen or e[1] not in seen:
            raise ArchitectureError(f"$.edges[{i}]: unknown layer id")
        edges.append((e[0], e[1]))
    return Architecture(net_class, tuple(layers), frozenset(edges), channels)


def load(path) -> Architecture:
    with open(path) as fh:
        return parse_json(fh.read())


def save(arch: Architecture, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(arch))
        fh.write("\n")

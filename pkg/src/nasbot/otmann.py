"""OTMANN: optimal-transport distance between architectures.

The matching program is solved in its transport form: the supplies are the
layer masses of the first network plus one non-assignment slot holding the
total mass of the second, the demands mirror that, and the cost matrix is the
label-mismatch cost plus ``nu`` times the structural cost, bordered by a row
and a column of ones (unit cost for leaving mass unmatched).
"""

import csv
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import archgraph as ag
from .transport import TransportPlan, _row_minimum, row_minimum, simplex, simplex_ws, workspace

DEFAULT_NU_GRID = (0.1, 0.2, 0.4, 0.8)
DEFAULT_BIG = 10.0

INF = float("inf")


class ClassMismatchError(ValueError):
    """Distances are only defined between architectures of the same class."""


class PenaltyError(ValueError):
    """The label penalty matrix breaks the triangle inequality."""


@dataclass(frozen=True)
class LabelPenalty:
    """Label mismatch costs; ``inf`` entries are replaced by ``big``."""

    labels: tuple
    costs: np.ndarray
    big: float = DEFAULT_BIG

    @property
    def matrix(self) -> np.ndarray:
        m = np.array(self.costs, dtype=float)
        m[~np.isfinite(m)] = self.big
        return m

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def __call__(self, x: str, y: str) -> float:
        return float(self.matrix[self.index(x), self.index(y)])

    def with_big(self, big: float) -> "LabelPenalty":
        return LabelPenalty(self.labels, self.costs, big)


def default_penalty(net_class: str, big: float = DEFAULT_BIG) -> LabelPenalty:
    """Label penalty used for CNN or MLP experiments."""
    labels = ag.LABELS[net_class]
    n = len(labels)
    costs = np.full((n, n), INF)
    np.fill_diagonal(costs, 0.0)
    idx = {l: i for i, l in enumerate(labels)}

    def put(x, y, v):
        costs[idx[x], idx[y]] = costs[idx[y], idx[x]] = v

    if net_class == ag.CNN:
        conv = {("conv3", "conv5"): 0.2, ("conv5", "conv7"): 0.2, ("conv3", "conv7"): 0.3}
        for (x, y), v in conv.items():
            put(x, y, v)
            put(x.replace("conv", "res"), y.replace("conv", "res"), v)
        for k in "357":
            for j in "357":
                m_kj = 0.0 if k == j else costs[idx["conv" + k], idx["conv" + j]]
                put("res" + k, "conv" + j, 0.9 * m_kj + 0.1)
        put("max-pool", "avg-pool", 0.25)
    else:
        for x in ag.RECTIFIER_LABELS:
            for y in ag.RECTIFIER_LABELS:
                if x != y:
                    put(x, y, 0.1)
            for y in ag.SIGMOID_LABELS:
                put(x, y, 0.25)
        put("logistic", "tanh", 0.1)
    return LabelPenalty(labels, costs, big)


def check_triangle(penalty, tol: float = 1e-12):
    """Return None when M(x,z) <= M(x,y) + M(y,z) everywhere, else a violating triple.

    ``penalty`` may be a LabelPenalty or a plain square matrix; the triple is
    returned as labels or indices accordingly.
    """
    if isinstance(penalty, LabelPenalty):
        m, names = penalty.matrix, penalty.labels
    else:
        m = np.asarray(penalty, dtype=float)
        names = range(m.shape[0])
    # via[x, y, z] = M(x, y) + M(y, z)
    via = m[:, :, None] + m[None, :, :]
    bad = m[:, None, :] > via + tol
    if not bad.any():
        return None
    x, y, z = np.argwhere(bad)[0]
    names = list(names)
    return names[x], names[y], names[z]


@dataclass(frozen=True)
class DistanceParams:
    net_class: str = ag.CNN
    nu_grid: tuple = DEFAULT_NU_GRID
    mass_params: ag.MassParams = ag.MassParams()
    penalty: Optional[LabelPenalty] = None

    def __post_init__(self):
        grid = tuple(float(v) for v in self.nu_grid)
        if not grid or any(v <= 0 for v in grid):
            raise ValueError("nu_grid must be non-empty and strictly positive")
        object.__setattr__(self, "nu_grid", grid)
        if self.penalty is None:
            object.__setattr__(self, "penalty", default_penalty(self.net_class))
        bad = check_triangle(self.penalty)
        if bad is not None:
            raise PenaltyError(f"label penalty violates the triangle inequality at {bad}")


@dataclass(frozen=True)
class DistanceProfile:
    d: np.ndarray
    d_bar: np.ndarray
    pair: tuple = ()


@dataclass(frozen=True)
class ArchFeatures:
    """Per-architecture quantities reused across every distance it enters."""

    masses: np.ndarray
    labels: np.ndarray
    paths: np.ndarray
    total: float


def arch_features(arch: ag.Architecture, params: DistanceParams) -> ArchFeatures:
    lm = ag.layer_masses(arch, params.mass_params)
    masses = np.array([lm[l.id] for l in arch.layers], dtype=float)
    labels = np.array([params.penalty.index(l.label) for l in arch.layers], dtype=np.int64)
    paths = np.ascontiguousarray(ag.path_length_features(arch))
    return ArchFeatures(masses, labels, paths, float(masses.sum()))


class FeatureCache:
    """Features keyed by structural hash; inserts are idempotent."""

    def __init__(self, params: DistanceParams):
        self.params = params
        self._store = {}
        self._lock = threading.Lock()

    def __call__(self, arch: ag.Architecture) -> ArchFeatures:
        key = arch.structural_hash
        feats = self._store.get(key)
        if feats is None:
            feats = arch_features(arch, self.params)
            with self._lock:
                feats = self._store.setdefault(key, feats)
        return feats

    def __len__(self):
        return len(self._store)


def _check_classes(g1, g2):
    if g1.net_class != g2.net_class:
        raise ClassMismatchError(f"cannot compare {g1.net_class} with {g2.net_class}")


def mismatch_cost_matrix(g1, g2, penalty: LabelPenalty) -> np.ndarray:
    _check_classes(g1, g2)
    m = penalty.matrix
    i1 = [penalty.index(l.label) for l in g1.layers]
    i2 = [penalty.index(l.label) for l in g2.layers]
    return m[np.ix_(i1, i2)]


def _structural_from_paths(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    # mean over label classes of (1/6) sum of six |differences| == mean over all columns
    return np.abs(p1[:, None, :] - p2[None, :, :]).mean(axis=2)


def structural_cost_matrix(g1, g2) -> np.ndarray:
    _check_classes(g1, g2)
    return _structural_from_paths(ag.path_length_features(g1), ag.path_length_features(g2))


def augmented_problem(f1: ArchFeatures, f2: ArchFeatures, lmm, struct, nu):
    """Supplies, demands and bordered cost matrix of the transport form."""
    n1, n2 = lmm.shape
    cost = np.zeros((n1 + 1, n2 + 1))
    cost[:n1, :n2] = lmm + nu * struct
    cost[:n1, n2] = 1.0
    cost[n1, :n2] = 1.0
    supplies = np.append(f1.masses, f2.total)
    demands = np.append(f2.masses, f1.total)
    return supplies, demands, cost


def distance(g1, g2, nu: float, params: DistanceParams):
    """OTMANN distance at a single ``nu``; returns ``(d, plan)``."""
    _check_classes(g1, g2)
    f1 = arch_features(g1, params)
    f2 = arch_features(g2, params)
    lmm = mismatch_cost_matrix(g1, g2, params.penalty)
    struct = _structural_from_paths(f1.paths, f2.paths)
    a, b, c = augmented_problem(f1, f2, lmm, struct, nu)
    bi, bj, flow = row_minimum(a, b, c)
    obj = simplex(a.size, b.size, c, bi, bj, flow)
    coupling = np.zeros_like(c)
    coupling[bi, bj] = flow
    return float(obj), TransportPlan(coupling, float(obj))


@njit(cache=True, fastmath=True)
def _structural_block(p1, paths, lo, n2, st):
    n1, nf = p1.shape
    for i in range(n1):
        for j in range(n2):
            s = 0.0
            for f in range(nf):
                s += abs(p1[i, f] - paths[lo + j, f])
            st[i, j] = s / nf


@njit(cache=True)
def _profiles(m1, lab1, p1, t1, masses, labels, paths, totals, offsets, pen, nus):
    n_other = totals.shape[0]
    g = nus.shape[0]
    out = np.empty((n_other, g))
    n1 = m1.shape[0]
    n2max = 0
    for k in range(n_other):
        n2max = max(n2max, offsets[k + 1] - offsets[k])
    # scratch shared by every pair; problems are at most (n1+1) x (n2max+1)
    lmm = np.empty((n1, n2max))
    st = np.empty((n1, n2max))
    cbuf = np.empty((n1 + 1) * (n2max + 1))
    a = np.empty(n1 + 1)
    bbuf = np.empty(n2max + 1)
    kmax = n1 + n2max + 1
    bi = np.empty(kmax, dtype=np.int64)
    bj = np.empty(kmax, dtype=np.int64)
    flow = np.empty(kmax)
    ra = np.empty(n1 + 1)
    rb = np.empty(n2max + 1)
    col_open = np.empty(n2max + 1, dtype=np.bool_)
    ws = workspace(n1 + 1, n2max + 1)
    a[:n1] = m1
    for k in range(n_other):
        lo = offsets[k]
        hi = offsets[k + 1]
        n2 = hi - lo
        for i in range(n1):
            for j in range(n2):
                lmm[i, j] = pen[lab1[i], labels[lo + j]]
        _structural_block(p1, paths, lo, n2, st)
        a[n1] = totals[k]
        b = bbuf[:n2 + 1]
        b[:n2] = masses[lo:hi]
        b[n2] = t1
        c = cbuf[:(n1 + 1) * (n2 + 1)].reshape((n1 + 1, n2 + 1))
        for i in range(n1):
            c[i, n2] = 1.0
        for j in range(n2):
            c[n1, j] = 1.0
        c[n1, n2] = 0.0
        for q in range(g):
            nu = nus[q]
            for i in range(n1):
                for j in range(n2):
                    c[i, j] = lmm[i, j] + nu * st[i, j]
            if q == 0:
                _row_minimum(a, b, c, bi, bj, flow, ra, rb, col_open)
            # later grid points warm-start from the previous optimal basis
            out[k, q] = simplex_ws(n1 + 1, n2 + 1, c, bi, bj, flow, ws)
    return out


def _pack(feats: Sequence[ArchFeatures]):
    sizes = [f.masses.size for f in feats]
    offsets = np.zeros(len(feats) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    masses = np.concatenate([f.masses for f in feats])
    labels = np.concatenate([f.labels for f in feats])
    paths = np.ascontiguousarray(np.concatenate([f.paths for f in feats], axis=0))
    totals = np.array([f.total for f in feats])
    return masses, labels, paths, totals, offsets


def distances_from_features(f1: ArchFeatures, others: Sequence[ArchFeatures],
                            params: DistanceParams):
    """``(d, d_bar)`` arrays of shape ``(len(others), len(nu_grid))``."""
    if not others:
        g = len(params.nu_grid)
        return np.zeros((0, g)), np.zeros((0, g))
    masses, labels, paths, totals, offsets = _pack(others)
    d = _profiles(f1.masses, f1.labels, f1.paths, f1.total, masses, labels, paths,
                  totals, offsets, params.penalty.matrix, np.asarray(params.nu_grid))
    d = np.maximum(d, 0.0)
    d_bar = d / (f1.total + totals)[:, None]
    return d, d_bar


def distance_profile(g1, g2, params: DistanceParams, cache: Optional[FeatureCache] = None
                     ) -> DistanceProfile:
    _check_classes(g1, g2)
    feats = cache or (lambda a: arch_features(a, params))
    d, d_bar = distances_from_features(feats(g1), [feats(g2)], params)
    return DistanceProfile(d[0], d_bar[0], (g1.structural_hash, g2.structural_hash))


def pairwise_matrix(archs: Sequence[ag.Architecture], params: DistanceParams,
                    cache: Optional[FeatureCache] = None):
    """Symmetric ``(len(nu_grid), n, n)`` arrays of d and d_bar."""
    classes = {a.net_class for a in archs}
    if len(classes) > 1:
        raise ClassMismatchError(f"mixed classes {sorted(classes)}")
    feats_of = cache or (lambda a: arch_features(a, params))
    feats = [feats_of(a) for a in archs]
    n, g = len(archs), len(params.nu_grid)
    d = np.zeros((g, n, n))
    d_bar = np.zeros((g, n, n))
    for i in range(n - 1):
        di, dbi = distances_from_features(feats[i], feats[i + 1:], params)
        d[:, i, i + 1:] = di.T
        d_bar[:, i, i + 1:] = dbi.T
    d = d + d.transpose(0, 2, 1)
    d_bar = d_bar + d_bar.transpose(0, 2, 1)
    return d, d_bar


class DistanceStore:
    """Growing pairwise distance tensors for a set of architectures.

    Used by the GP: adding an architecture computes its distances to every
    architecture already stored, once.  Tensors are laid out ``(n, n, g)``.
    """

    def __init__(self, params: DistanceParams, cache: Optional[FeatureCache] = None):
        self.params = params
        self.features = cache or FeatureCache(params)
        self.hashes = []
        self.index = {}
        self._feats = []
        g = len(params.nu_grid)
        self._d = np.zeros((16, 16, g))
        self._db = np.zeros((16, 16, g))
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.hashes)

    def __contains__(self, arch):
        return arch.structural_hash in self.index

    def _grow(self, need):
        cap = self._d.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        n = len(self.hashes)
        for name in ("_d", "_db"):
            old = getattr(self, name)
            new = np.zeros((cap, cap, old.shape[2]))
            new[:n, :n] = old[:n, :n]
            setattr(self, name, new)

    def add(self, arch: ag.Architecture) -> int:
        h = arch.structural_hash
        with self._lock:
            if h in self.index:
                return self.index[h]
            f = self.features(arch)
            d, db = distances_from_features(f, self._feats, self.params)
            n = len(self.hashes)
            self._grow(n + 1)
            self._d[n, :n] = self._d[:n, n] = d
            self._db[n, :n] = self._db[:n, n] = db
            self.hashes.append(h)
            self.index[h] = n
            self._feats.append(f)
            return n

    def tensors(self):
        """Views of the full ``(n, n, g)`` tensors in insertion order."""
        n = len(self.hashes)
        return self._d[:n, :n], self._db[:n, :n]

    def matrices(self, archs):
        """Sub-tensors for ``archs`` (added on demand), shape ``(n, n, g)``."""
        idx = [self.add(a) for a in archs]
        sel = np.ix_(idx, idx)
        return self._d[sel], self._db[sel]

    def distances_from(self, arch, target_feats):
        """Distances from ``arch`` to precomputed features, two ``(n, g)`` arrays."""
        return distances_from_features(self.features(arch), target_feats, self.params)

    def to(self, arch, archs):
        """Distances from ``arch`` to each of ``archs``: two ``(n, g)`` arrays."""
        return self.distances_from(arch, [self.features(a) for a in archs])


def write_matrix_csv(path, names: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(names))
        for name, row in zip(names, matrix):
            w.writerow([name] + [repr(float(x)) for x in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    mat = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return names, mat

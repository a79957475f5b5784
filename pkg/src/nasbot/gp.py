"""GP surrogate over architectures with the ensemble OTMANN kernel.

Distances enter as tensors of shape ``(n1, n2, g)`` (one slice per ``nu``),
so the kernel for any hyperparameter setting is a cheap contraction of stored
distances; nothing here ever recomputes an optimal transport problem.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.stats import norm

JITTER_START = 1e-10
JITTER_MAX = 1e-4
START_TRIES = 50
LOG_2PI = np.log(2.0 * np.pi)


class GPError(RuntimeError):
    """Kernel matrix could not be factorised even after jitter repair."""


@dataclass(frozen=True)
class KernelHyper:
    alpha: float
    alpha_bar: float
    beta: tuple
    beta_bar: tuple
    noise_var: float

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "beta_bar", tuple(float(b) for b in self.beta_bar))
        vals = self.to_vector()
        if not np.all(vals > 0) or not np.all(np.isfinite(vals)):
            raise ValueError("kernel hyperparameters must be finite and positive")

    def to_vector(self) -> np.ndarray:
        return np.array([self.alpha, self.alpha_bar, *self.beta, *self.beta_bar, self.noise_var])

    @classmethod
    def from_vector(cls, v) -> "KernelHyper":
        v = np.asarray(v, dtype=float)
        g = (v.size - 3) // 2
        return cls(v[0], v[1], tuple(v[2:2 + g]), tuple(v[2 + g:2 + 2 * g]), v[-1])


def kernel_values(d, d_bar, hyper: KernelHyper, p: float = 1.0, p_bar: float = 2.0):
    """Kernel for distance arrays whose last axis runs over the nu grid."""
    d = np.asarray(d, dtype=float)
    d_bar = np.asarray(d_bar, dtype=float)
    beta = np.asarray(hyper.beta)
    beta_bar = np.asarray(hyper.beta_bar)
    if d.shape[-1] != beta.size or d_bar.shape[-1] != beta_bar.size:
        raise ValueError(
            f"distance grid has {d.shape[-1]}/{d_bar.shape[-1]} entries, "
            f"hyperparameters have {beta.size}/{beta_bar.size}")
    dp = d if p == 1 else d ** p
    dbp = d_bar ** 2 if p_bar == 2 else d_bar ** p_bar
    return hyper.alpha * np.exp(-(dp @ beta)) + hyper.alpha_bar * np.exp(-(dbp @ beta_bar))


def kernel(profile, hyper: KernelHyper, p: float = 1.0, p_bar: float = 2.0) -> float:
    """Kernel value for a single DistanceProfile."""
    return float(kernel_values(profile.d, profile.d_bar, hyper, p, p_bar))


def prior_variance(hyper: KernelHyper) -> float:
    return hyper.alpha + hyper.alpha_bar


def cholesky_with_jitter(k: np.ndarray):
    """Lower Cholesky factor of ``k``, adding escalating diagonal jitter on failure.

    Returns ``(L, jitter)``.
    """
    scale = float(np.mean(np.diag(k))) if k.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    # pivots below the first jitter level mean the matrix is numerically singular
    floor = JITTER_START * scale
    low = _try_cholesky(k, floor)
    if low is not None:
        return low, 0.0
    jitter = JITTER_START
    eye = np.eye(k.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        low = _try_cholesky(k + jitter * scale * eye, floor)
        if low is not None:
            return low, jitter * scale
        jitter *= 10.0
    raise GPError("kernel matrix not positive definite after maximum jitter")


def _try_cholesky(k, floor):
    try:
        low = cholesky(k, lower=True, check_finite=False)
    except LinAlgError:
        return None
    if low.size and np.min(np.diag(low)) ** 2 < floor:
        return None
    return low


def gram(d, d_bar, hyper: KernelHyper, p: float = 1.0, p_bar: float = 2.0):
    """Kernel matrix of a training set and the jitter needed to factorise it.

    Returns ``(K, jitter)``; ``K`` is returned without the jitter added.
    """
    k = kernel_values(d, d_bar, hyper, p, p_bar)
    k = 0.5 * (k + k.T)
    _, jitter = cholesky_with_jitter(k)
    return k, jitter


class GPModel:
    """GP posterior given training distances, observations and hyperparameters.

    The prior mean is the constant mean of the observations.
    """

    def __init__(self, d, d_bar, y, hyper: KernelHyper, p: float = 1.0, p_bar: float = 2.0,
                 archs: Optional[Sequence] = None, store=None):
        self.d = np.asarray(d, dtype=float)
        self.d_bar = np.asarray(d_bar, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.d.shape[0] != self.y.size:
            raise ValueError("observation count does not match training set size")
        self.hyper = hyper
        self.p = p
        self.p_bar = p_bar
        self.archs = list(archs) if archs is not None else None
        self.store = store
        self.mean = float(self.y.mean()) if self.y.size else 0.0
        n = self.y.size
        k = kernel_values(self.d, self.d_bar, hyper, p, p_bar)
        k = 0.5 * (k + k.T)
        self.K = k
        self.L, self.jitter = cholesky_with_jitter(k + hyper.noise_var * np.eye(n))
        self.weights = cho_solve((self.L, True), self.y - self.mean, check_finite=False)

    @property
    def n(self) -> int:
        return self.y.size

    def predict(self, d_q, d_bar_q):
        """Posterior mean and variance of f at queries.

        ``d_q`` has shape ``(m, n, g)``: distances from each query to each
        training point.
        """
        kq = kernel_values(d_q, d_bar_q, self.hyper, self.p, self.p_bar)
        mean = self.mean + kq @ self.weights
        v = np.linalg.solve(self.L, kq.T) if self.n else np.zeros((0, kq.shape[0]))
        var = prior_variance(self.hyper) - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.mean
        return float(-0.5 * r @ self.weights - np.log(np.diag(self.L)).sum() - 0.5 * self.n * LOG_2PI)


def log_marginal_likelihood(model: GPModel) -> float:
    return model.log_marginal_likelihood()


def fit(archs, y, hyper: KernelHyper, store, p: float = 1.0, p_bar: float = 2.0) -> GPModel:
    """Fit on architectures, pulling pairwise distances from a DistanceStore."""
    d, d_bar = store.matrices(archs)
    return GPModel(d, d_bar, y, hyper, p, p_bar, archs=archs, store=store)


def posterior(model: GPModel, query):
    """Mean and variance at a single architecture (needs a model built by :func:`fit`)."""
    d, d_bar = model.store.to(query, model.archs)
    mean, var = model.predict(d[None], d_bar[None])
    return float(mean[0]), float(var[0])


def factorisable(d, d_bar, hyper: KernelHyper, p: float = 1.0, p_bar: float = 2.0) -> bool:
    """Whether ``K + noise_var * I`` admits a Cholesky factor (with jitter repair)."""
    k = kernel_values(d, d_bar, hyper, p, p_bar)
    k = 0.5 * (k + k.T) + hyper.noise_var * np.eye(k.shape[0])
    try:
        cholesky_with_jitter(k)
    except GPError:
        return False
    return True


def log_evidence(d, d_bar, y, hyper: KernelHyper, p: float = 1.0, p_bar: float = 2.0) -> float:
    """Gaussian log evidence of ``y`` under ``K + noise_var * I`` (constant prior mean)."""
    y = np.asarray(y, dtype=float)
    r = y - y.mean()
    k = kernel_values(d, d_bar, hyper, p, p_bar)
    k = 0.5 * (k + k.T) + hyper.noise_var * np.eye(y.size)
    try:
        low, _ = cholesky_with_jitter(k)
    except GPError:
        return -np.inf
    alpha = cho_solve((low, True), r, check_finite=False)
    return float(-0.5 * r @ alpha - np.log(np.diag(low)).sum() - 0.5 * y.size * LOG_2PI)


# ---------------------------------------------------------------------------
# hyperparameter posterior


@dataclass(frozen=True)
class PriorBox:
    """Log-uniform box for every hyperparameter, stored as (lower, upper) vectors."""

    lower: np.ndarray
    upper: np.ndarray

    def sample(self, rng) -> KernelHyper:
        lo, hi = np.log(self.lower), np.log(self.upper)
        return KernelHyper.from_vector(np.exp(rng.uniform(lo, hi)))


def default_prior_box(d, d_bar, y, alpha_range=(0.05, 5.0), beta_range=(0.01, 100.0),
                      noise_range=(1e-6, 1.0)) -> PriorBox:
    """Box scaled by the spread of ``y`` and the typical pairwise distances."""
    y = np.asarray(y, dtype=float)
    var = float(np.var(y)) if y.size > 1 else 0.0
    if not var > 0:
        var = 1.0
    g = d.shape[-1]
    iu = np.triu_indices(d.shape[0], 1)

    def med(t, i):
        vals = t[..., i][iu] if t.shape[0] > 1 else np.array([])
        vals = vals[vals > 0]
        return float(np.median(vals)) if vals.size else 1.0

    # d enters linearly and d_bar squared, so scale each by its own power
    scale_b = np.array([med(d, i) for i in range(g)])
    scale_bb = np.array([med(d_bar, i) ** 2 for i in range(g)])
    lower = np.concatenate([[alpha_range[0] * var] * 2, beta_range[0] / scale_b,
                            beta_range[0] / scale_bb, [noise_range[0] * var]])
    upper = np.concatenate([[alpha_range[1] * var] * 2, beta_range[1] / scale_b,
                            beta_range[1] / scale_bb, [noise_range[1] * var]])
    return PriorBox(lower, upper)


def metropolis_hastings(log_target, x0, lower, upper, rng, n_samples: int,
                        burn_in: int = 200, thin: int = 10, step: float = 0.3):
    """Random-walk Metropolis on a box; states outside the box are rejected.

    Returns ``(samples, acceptance_rate)`` with ``samples`` of shape
    ``(n_samples, dim)``.
    """
    x = np.array(x0, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    lp = log_target(x)
    out = np.empty((n_samples, x.size))
    accepted = 0
    total = burn_in + n_samples * thin
    kept = 0
    for it in range(1, total + 1):
        prop = x + step * rng.standard_normal(x.size)
        if np.all(prop >= lower) and np.all(prop <= upper):
            lq = log_target(prop)
            if np.log(rng.uniform()) < lq - lp:
                x, lp = prop, lq
                accepted += 1
        if it > burn_in and (it - burn_in) % thin == 0:
            out[kept] = x
            kept += 1
    return out, accepted / max(total, 1)


def sample_hypers(d, d_bar, y, box: Optional[PriorBox], rng, n_samples: int = 4,
                  burn_in: int = 200, thin: int = 10, step: float = 0.3,
                  p: float = 1.0, p_bar: float = 2.0, init: Optional[KernelHyper] = None,
                  feasible_on=None):
    """Draw hyperparameters from their posterior under the GP likelihood.

    The chain runs in log-space with a uniform prior on the log box.  With
    fewer than two observations the likelihood carries no information and
    independent prior draws are returned instead.

    ``feasible_on`` is an optional ``(d, d_bar)`` pair for a larger point set
    (e.g. observations plus pending points); settings whose kernel matrix on
    that set cannot be factorised get zero posterior mass.
    """
    if n_samples <= 0:
        return []
    y = np.asarray(y, dtype=float)
    if box is None:
        box = default_prior_box(d, d_bar, y)
    if y.size < 2:
        return [box.sample(rng) for _ in range(n_samples)]
    lo, hi = np.log(box.lower), np.log(box.upper)

    def log_target(theta):
        hyper = KernelHyper.from_vector(np.exp(theta))
        if feasible_on is not None and not factorisable(*feasible_on, hyper, p, p_bar):
            return -np.inf
        return log_evidence(d, d_bar, y, hyper, p, p_bar)

    # the chain cannot leave a zero-density start, so look for a feasible one
    starts = [0.5 * (lo + hi)]
    if init is not None:
        starts.insert(0, np.clip(np.log(init.to_vector()), lo, hi))
    x0 = starts[0]
    for k in range(START_TRIES):
        cand = starts[k] if k < len(starts) else rng.uniform(lo, hi)
        if np.isfinite(log_target(cand)):
            x0 = cand
            break
    samples, _ = metropolis_hastings(log_target, x0, lo, hi, rng, n_samples,
                                     burn_in=burn_in, thin=thin, step=step)
    return [KernelHyper.from_vector(np.exp(s)) for s in samples]


# ---------------------------------------------------------------------------
# acquisition


def ei_closed_form(mu, sigma, incumbent):
    """E[max(0, f - incumbent)] for f ~ N(mu, sigma^2), elementwise."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = np.maximum(mu - incumbent, 0.0)
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos] if sigma.ndim else sigma
        m = mu[pos] if mu.ndim else mu
        gamma = (m - incumbent) / s
        val = s * (gamma * norm.cdf(gamma) + norm.pdf(gamma))
        if out.ndim:
            out[pos] = val
        else:
            out = val
    return np.maximum(out, 0.0)


def expected_improvement(model: GPModel, query, incumbent: float) -> float:
    """EI at a single architecture."""
    mean, var = posterior(model, query)
    return float(ei_closed_form(mean, np.sqrt(var), incumbent))

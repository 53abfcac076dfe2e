"""Lattice-Gaussian mathematics on one-dimensional binary partition chains.

The scaled integer lattice eta*Z is refined into the chain
eta*Z / 2*eta*Z / ... / 2^r*eta*Z.  A point is represented by its integer
coordinate k (point = eta*k) restricted to the window
[-2^(r-1)*eta, 2^(r-1)*eta), which holds exactly 2^r lattice points.  Each
point carries an r-bit label m = k mod 2^r; bit ell of the label selects the
coset of 2^ell*eta*Z the point belongs to, so the label bits are exactly the
per-level binary partition coordinates used by the multilevel code.

The discrete Gaussian over the chain puts mass proportional to
exp(-(x - c)^2 / (2 sigma^2)) on every lattice point; the window must capture
all but 1e-12 of the full-lattice mass, otherwise the chain has too few
levels for the requested sigma/eta and ``TruncationError`` is raised.

The flatness factor eps_{eta Z}(sigma) measures how far the sigma-smoothed
lattice is from a uniform density; it is evaluated through the dual theta
series 2 * sum_{k>=1} exp(-2 pi^2 sigma^2 k^2 / eta^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import DomainError, EmptyCosetError, PreconditionError, TruncationError

# Series terms below this absolute size are dropped.
THETA_TERM_CUTOFF = 1e-30
# Minimum window mass captured by the truncated support.
MASS_TOLERANCE = 1e-12


def flatness_factor(eta: float, sigma: float) -> float:
    """Flatness factor of the lattice eta*Z at Gaussian parameter sigma.

    Evaluates the dual theta series

        eps = 2 * sum_{k>=1} exp(-2 pi^2 sigma^2 k^2 / eta^2),

    truncated once a term falls below ``THETA_TERM_CUTOFF``.  The series
    always converges, so no error conditions exist.
    """
    if eta <= 0 or sigma <= 0:
        raise DomainError(f"eta and sigma must be positive, got {eta}, {sigma}")
    c = 2.0 * math.pi**2 * sigma**2 / eta**2
    total = 0.0
    k = 1
    while True:
        term = math.exp(-c * k * k)
        if term < THETA_TERM_CUTOFF:
            break
        total += term
        k += 1
    return 2.0 * total


def flatness_factor_primal(eta: float, sigma: float) -> float:
    """Flatness factor via the primal (Poisson-dual) sum.

    Evaluates eta/(sqrt(2 pi) sigma) * sum_{m in Z} exp(-eta^2 m^2/(2 sigma^2)) - 1,
    the peak deviation of the wrapped Gaussian.  Agrees with
    :func:`flatness_factor` by Poisson summation; in float64 the subtraction
    of 1 limits the achievable absolute accuracy to ~1e-16, so this form is
    used for cross-checks, not production evaluation.
    """
    if eta <= 0 or sigma <= 0:
        raise DomainError(f"eta and sigma must be positive, got {eta}, {sigma}")
    c = eta**2 / (2.0 * sigma**2)
    total = 1.0
    m = 1
    while True:
        term = math.exp(-c * m * m)
        if term < THETA_TERM_CUTOFF:
            break
        total += 2.0 * term
        m += 1
    return eta / (math.sqrt(2.0 * math.pi) * sigma) * total - 1.0


@dataclass(frozen=True)
class PartitionChain:
    """Scaled one-dimensional binary partition chain eta*Z / ... / 2^r*eta*Z.

    Parameters
    ----------
    eta : float
        Spacing of the top lattice, > 0.
    r : int
        Number of binary partition levels, >= 1.
    sigma_r : float
        Standard deviation of the shaping (discrete Gaussian) distribution.
    """

    eta: float
    r: int
    sigma_r: float

    def __post_init__(self):
        if self.eta <= 0:
            raise DomainError(f"eta must be positive, got {self.eta}")
        if self.r < 1:
            raise DomainError(f"r must be >= 1, got {self.r}")
        if self.sigma_r <= 0:
            raise DomainError(f"sigma_r must be positive, got {self.sigma_r}")

    @property
    def n_points(self) -> int:
        return 1 << self.r

    @property
    def half_window(self) -> float:
        """Window is [-half_window, half_window)."""
        return (1 << (self.r - 1)) * self.eta

    def spacing(self, level: int) -> float:
        """Sublattice spacing 2^level * eta at depth ``level`` (0..r)."""
        if not 0 <= level <= self.r:
            raise DomainError(f"level must be in [0, {self.r}], got {level}")
        return (1 << level) * self.eta

    @property
    def coords(self) -> np.ndarray:
        """Integer coordinates k of the window points, ascending."""
        half = 1 << (self.r - 1)
        return np.arange(-half, half)

    @property
    def points(self) -> np.ndarray:
        """Real positions eta*k of the window points, ascending."""
        return self.coords * self.eta

    def labels(self) -> np.ndarray:
        """r-bit labels m = k mod 2^r for the window points, ascending in k."""
        return np.mod(self.coords, self.n_points)

    def fold_labels(self, m: np.ndarray) -> np.ndarray:
        """Map integer labels (any integers) to window coordinates k.

        Computes (m mod 2^r) and re-centers into [-2^(r-1), 2^(r-1)).
        """
        half = 1 << (self.r - 1)
        return np.mod(np.asarray(m) + half, self.n_points) - half

    def label_bit(self, m: np.ndarray, level: int) -> np.ndarray:
        """Bit of label m at partition level ``level`` (1-based)."""
        return (np.asarray(m) >> (level - 1)) & 1


class DiscreteGaussian:
    """Discrete Gaussian D over the windowed points of a partition chain.

    Mass at lattice point x is proportional to exp(-(x-c)^2 / (2 sigma_r^2)).
    Normalization is over the truncated window; construction fails with
    ``TruncationError`` when the window misses more than ``MASS_TOLERANCE``
    of the full-lattice mass.
    """

    def __init__(self, chain: PartitionChain, center: float = 0.0):
        self.chain = chain
        self.center = float(center)
        pts = chain.points
        logw = -((pts - self.center) ** 2) / (2.0 * chain.sigma_r**2)
        lognorm_window = logsumexp(logw)
        # Full-lattice mass: extend the sum outward until terms are negligible
        # relative to the window mass.
        log_tail = self._log_tail_mass(lognorm_window)
        log_total = np.logaddexp(lognorm_window, log_tail) if log_tail > -np.inf else lognorm_window
        captured = math.exp(lognorm_window - log_total)
        if captured < 1.0 - MASS_TOLERANCE:
            raise TruncationError(
                f"window captures {captured:.15f} of the lattice Gaussian mass; "
                f"increase r or eta (eta={chain.eta}, r={chain.r}, sigma_r={chain.sigma_r})"
            )
        self.log_pmf = logw - lognorm_window
        self.pmf = np.exp(self.log_pmf)
        self._cdf = np.cumsum(self.pmf)
        self._labels = chain.labels()

    def _log_tail_mass(self, log_window: float) -> float:
        """Log-mass of lattice points outside the window (unnormalized)."""
        chain = self.chain
        half = 1 << (chain.r - 1)
        blocks = []
        for direction in (+1, -1):
            k = half if direction > 0 else -half - 1
            while True:
                x = k * chain.eta
                lw = -((x - self.center) ** 2) / (2.0 * chain.sigma_r**2)
                if lw - log_window < math.log(THETA_TERM_CUTOFF):
                    break
                blocks.append(lw)
                k += direction
                if abs(k) > half * 1000:  # safety stop; mass here is astronomical anyway
                    break
        if not blocks:
            return -np.inf
        return float(logsumexp(np.array(blocks)))

    # -- coset machinery ----------------------------------------------------

    def coset_mask(self, level: int, coset_id: int) -> np.ndarray:
        """Window mask of points whose label is coset_id modulo 2^level."""
        return (self._labels & ((1 << level) - 1)) == coset_id

    def coset_mass(self, level: int, coset_id: int) -> float:
        return float(self.pmf[self.coset_mask(level, coset_id)].sum())

    def conditional_table(self, level: int) -> np.ndarray:
        """Per-context conditionals P(bit_level | bits below).

        Returns an array of shape (2^(level-1), 2): row ``c`` holds
        (P(X_level = 0 | context c), P(X_level = 1 | context c)) where the
        context integer packs the lower-level bits.  Contexts with zero mass
        get a flat (0.5, 0.5) row (they are unreachable under this prior).
        """
        if not 1 <= level <= self.chain.r:
            raise DomainError(f"level must be in [1, {self.chain.r}], got {level}")
        n_ctx = 1 << (level - 1)
        mass = np.zeros((n_ctx, 2))
        ctx_of_point = self._labels & (n_ctx - 1)
        bit_of_point = (self._labels >> (level - 1)) & 1
        np.add.at(mass, (ctx_of_point, bit_of_point), self.pmf)
        denom = mass.sum(axis=1, keepdims=True)
        table = np.full((n_ctx, 2), 0.5)
        ok = denom[:, 0] > 0
        table[ok] = mass[ok] / denom[ok]
        return table

    def conditional(self, level: int, context: int) -> tuple[float, float]:
        """(P(X_level=0 | context), P(X_level=1 | context)) for one context.

        Raises ``EmptyCosetError`` when the conditioning coset holds no
        window mass.
        """
        if not 1 <= level <= self.chain.r:
            raise DomainError(f"level must be in [1, {self.chain.r}], got {level}")
        n_ctx = 1 << (level - 1)
        if not 0 <= context < n_ctx:
            raise DomainError(f"context must be in [0, {n_ctx}), got {context}")
        mask = (self._labels & (n_ctx - 1)) == context
        denom = self.pmf[mask].sum()
        if denom <= 0.0:
            raise EmptyCosetError(f"coset context {context} at level {level} has zero mass")
        bit = (self._labels[mask] >> (level - 1)) & 1
        p1 = float(self.pmf[mask][bit == 1].sum() / denom)
        return 1.0 - p1, p1

    def context_mass(self, level: int) -> np.ndarray:
        """Mass of each level-``level`` context coset, shape (2^(level-1),)."""
        n_ctx = 1 << (level - 1)
        out = np.zeros(n_ctx)
        np.add.at(out, self._labels & (n_ctx - 1), self.pmf)
        return out

    # -- sampling -----------------------------------------------------------

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Inverse-CDF sample of window points; deterministic given the rng state."""
        u = rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        idx = np.minimum(idx, len(self.pmf) - 1)
        return self.chain.points[idx]

    def sample_coords(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Like :meth:`sample` but returns integer coordinates k."""
        u = rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        idx = np.minimum(idx, len(self.pmf) - 1)
        return self.chain.coords[idx]

    def mean(self) -> float:
        return float(self.pmf @ self.chain.points)

    def var(self) -> float:
        mu = self.mean()
        return float(self.pmf @ (self.chain.points - mu) ** 2)


def discrete_gaussian(chain: PartitionChain, center: float = 0.0) -> DiscreteGaussian:
    """Normalized discrete Gaussian over the chain window (see class docs)."""
    return DiscreteGaussian(chain, center)


# -- chain scaling ----------------------------------------------------------

def tune_eta(
    sigma_tilde: float,
    sigma_shape: float,
    r: int,
    epsilon_target: float = 1e-7,
    mass_tol: float = MASS_TOLERANCE,
) -> float:
    """Choose the top-lattice spacing eta for a chain with r levels.

    Bisects for the largest eta whose flatness factor at ``sigma_tilde``
    stays below ``epsilon_target`` (coarsest lattice that is still flat).
    The window [-2^(r-1) eta, 2^(r-1) eta) must also capture 1 - mass_tol
    of the shaping Gaussian ``sigma_shape``; when both constraints cannot
    hold at this r, mass wins and the flatness target is relaxed (the
    achieved epsilon is whatever the mass-feasible eta gives).
    """
    if sigma_tilde <= 0 or sigma_shape <= 0:
        raise DomainError("sigma_tilde and sigma_shape must be positive")
    # Largest eta with eps <= target: eps is increasing in eta.
    lo, hi = 1e-6 * sigma_tilde, 64.0 * sigma_tilde
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if flatness_factor(mid, sigma_tilde) <= epsilon_target:
            lo = mid
        else:
            hi = mid
    eta_flat = lo
    # Smallest eta whose window holds the shaping mass (5% safety margin:
    # the discrete tail can slightly exceed the continuous one).
    z_star = float(norm.isf(mass_tol / 2.0)) * 1.05
    eta_mass = z_star * sigma_shape / (1 << (r - 1))
    return max(eta_flat, eta_mass)


def default_chain(
    sigma_shape: float,
    sigma_tilde: float,
    r: int = 6,
    epsilon_target: float = 1e-7,
) -> PartitionChain:
    """Chain with the default eta tuning (see :func:`tune_eta`)."""
    eta = tune_eta(sigma_tilde, sigma_shape, r, epsilon_target)
    return PartitionChain(eta=eta, r=r, sigma_r=sigma_shape)


# -- mutual-information floor of the shaped test channel ---------------------

@dataclass(frozen=True)
class RateFloorBound:
    """Mutual-information floor for a discrete-Gaussian-shaped test channel.

    ``mi_lower`` is (1/2) log2(sigma_s^2 / delta) - 5 epsilon (one-dimensional
    partition).  ``valid`` requires epsilon < 1/2 and
    pi eps_t / (1 - eps_t) < epsilon.
    """

    epsilon: float
    epsilon_t: float
    mi_lower: float
    epsilon_ok: bool
    epsilon_t_ok: bool

    @property
    def valid(self) -> bool:
        return self.epsilon_ok and self.epsilon_t_ok

    @property
    def rate_floor(self) -> float:
        return max(self.mi_lower, 0.0)


def rate_floor_check(
    sigma_s: float,
    delta: float,
    chain: PartitionChain,
    t: float = 1.0,
) -> RateFloorBound:
    """Evaluate the shaped-constellation mutual-information floor.

    Requires 0 < delta < sigma_s^2 and chain.sigma_r^2 = sigma_s^2 - delta.
    The free parameter ``t`` selects the branch of eps_t; t >= 1/e uses
    eps_{eta Z}(sigma_r * sqrt((pi - t)/pi)), otherwise the same quantity is
    inflated by (t^-4 + 1).
    """
    if not 0 < delta < sigma_s**2:
        raise DomainError(f"delta must lie in (0, sigma_s^2), got {delta}")
    if not math.isclose(chain.sigma_r**2, sigma_s**2 - delta, rel_tol=1e-9):
        raise PreconditionError(
            f"chain.sigma_r^2 = {chain.sigma_r**2} must equal "
            f"sigma_s^2 - delta = {sigma_s**2 - delta}"
        )
    if not 0 < t < math.pi:
        raise DomainError(f"t must lie in (0, pi), got {t}")
    sigma_tilde = chain.sigma_r * math.sqrt(delta) / sigma_s
    eps = flatness_factor(chain.eta, sigma_tilde)
    sigma_t = chain.sigma_r * math.sqrt((math.pi - t) / math.pi)
    eps_t = flatness_factor(chain.eta, sigma_t)
    if t < 1.0 / math.e:
        eps_t = (t**-4 + 1.0) * eps_t
    mi_lower = 0.5 * math.log2(sigma_s**2 / delta) - 5.0 * eps
    eps_ok = eps < 0.5
    eps_t_ok = eps_t < 1.0 and (math.pi * eps_t / (1.0 - eps_t)) < eps
    return RateFloorBound(
        epsilon=eps, epsilon_t=eps_t, mi_lower=mi_lower,
        epsilon_ok=eps_ok, epsilon_t_ok=eps_t_ok,
    )

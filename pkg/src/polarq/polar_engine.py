"""Polar transform, successive cancellation, and index-set construction.

The transform is the binary kernel power applied through the recursive
split u -> (u_even xor u_odd, u_odd): the first half of the codeword encodes
v = u[0::2] xor u[1::2] and the second half encodes w = u[1::2].  It is an
involution over GF(2).

Successive cancellation computes P(u_i | u^{0:i-1}, evidence) where evidence
is a per-position unnormalized weight pair q_j(x) (prior mass times optional
observation likelihood).  Because the constellation prior enters through the
leaf weights, one recursion serves both the prior-only and the
posterior-with-observation conditionals; there is no separate machinery for
asymmetric channels.

Two drivers exist:

* :func:`genie_pairs` computes all N conditionals for a *known* input block
  (no decisions), stage-vectorized across the batch; this is what
  Monte-Carlo construction uses.
* :class:`ScProcess` is the sequential lazy recursion used by encoders and
  decoders, where each bit's value feeds back into later conditionals.
  It is batched over independent blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InfeasibleRateError, SizeError
from .gaussian_lattice import DiscreteGaussian, PartitionChain, discrete_gaussian
from .test_channel import TestChannelParams, mi_levels

DEFAULT_TRIALS = 100_000
DEFAULT_BACKOFF = 0.02
MI_FLOOR = 1e-3


def _check_block_length(n: int) -> int:
    if n < 1 or (n & (n - 1)) != 0:
        raise SizeError(f"block length must be a power of two, got {n}")
    return int(math.log2(n))


def polar_transform(bits: np.ndarray) -> np.ndarray:
    """Apply the polar transform x = u G over GF(2).

    Accepts shape (N,) or (N, B); the transform acts along the first axis.
    Involution: applying it twice returns the input.
    """
    b = np.asarray(bits)
    single = b.ndim == 1
    if single:
        b = b[:, None]
    n = b.shape[0]
    _check_block_length(n)
    arr = (b.astype(np.uint8) & 1).reshape(1, n, -1)
    while arr.shape[1] > 1:
        v = arr[:, 0::2, :] ^ arr[:, 1::2, :]
        w = arr[:, 1::2, :]
        arr = np.concatenate([v, w], axis=1)
        nodes, width = arr.shape[0], arr.shape[1] // 2
        arr = arr.reshape(nodes * 2, width, arr.shape[2])
    out = arr.reshape(n, -1)
    return out[:, 0] if single else out


def _descend_bits(u: np.ndarray) -> list[np.ndarray]:
    """Per-depth node-local input bits, from root (= u) down to the leaves.

    Entry d has shape (2^d, N/2^d, B); the leaf entry is the codeword in
    position order.
    """
    n, batch = u.shape
    m = _check_block_length(n)
    levels = [u.reshape(1, n, batch)]
    for _ in range(m):
        cur = levels[-1]
        v = cur[:, 0::2, :] ^ cur[:, 1::2, :]
        w = cur[:, 1::2, :]
        nxt = np.concatenate([v, w], axis=1)
        nodes, width = nxt.shape[0], nxt.shape[1] // 2
        levels.append(nxt.reshape(nodes * 2, width, batch))
    return levels


def _normalize_pairs(p: np.ndarray) -> np.ndarray:
    s = p.sum(axis=-1, keepdims=True)
    dead = s[..., 0] <= 0.0
    if np.any(dead):
        p = p.copy()
        p[dead] = 0.5
        s = p.sum(axis=-1, keepdims=True)
    return p / s


def genie_pairs(evidence: np.ndarray, u: np.ndarray) -> np.ndarray:
    """All-bit conditionals P(u_i | true prefix, evidence) for known blocks.

    Parameters
    ----------
    evidence : (N, B, 2) nonnegative weights per position and input value.
    u : (N, B) the committed input bits (the true transformed block).

    Returns
    -------
    (N, B, 2) normalized probability pairs, entry i conditioned on the true
    bits u^{0:i-1} of the same block.
    """
    n, batch, _ = evidence.shape
    m = _check_block_length(n)
    if u.shape != (n, batch):
        raise DomainError(f"u must have shape {(n, batch)}, got {u.shape}")
    bits = _descend_bits(u.astype(np.uint8))
    # leaves: evidence in position order, one node per position
    pairs = _normalize_pairs(evidence).reshape(n, 1, batch, 2)
    for d in range(m - 1, -1, -1):
        nodes = 1 << d
        width = n >> d
        half = width // 2
        child = pairs.reshape(nodes, 2, half, batch, 2)
        left, right = child[:, 0], child[:, 1]
        l0, l1 = left[..., 0], left[..., 1]
        r0, r1 = right[..., 0], right[..., 1]
        parent = np.empty((nodes, width, batch, 2))
        # even local bits: marginalize the partner bit
        parent[:, 0::2, :, 0] = l0 * r0 + l1 * r1
        parent[:, 0::2, :, 1] = l1 * r0 + l0 * r1
        # odd local bits: condition on the true even bit b
        b = bits[d][:, 0::2, :].astype(bool)
        lb = np.where(b, l1, l0)
        lbx = np.where(b, l0, l1)
        parent[:, 1::2, :, 0] = lb * r0
        parent[:, 1::2, :, 1] = lbx * r1
        pairs = _normalize_pairs(parent).reshape(nodes, width, batch, 2)
    return pairs.reshape(n, batch, 2)


class _ScNode:
    """One node of the lazy SC recursion over a contiguous position block."""

    __slots__ = ("n", "left", "right", "ev", "_lp", "_rp", "_b_even")

    def __init__(self, ev: np.ndarray):
        self.n = ev.shape[0]
        if self.n == 1:
            self.ev = _normalize_pairs(ev[0])
            self.left = self.right = None
        else:
            half = self.n // 2
            self.left = _ScNode(ev[:half])
            self.right = _ScNode(ev[half:])
        self._lp = self._rp = self._b_even = None

    def prob(self, i: int) -> np.ndarray:
        if self.n == 1:
            return self.ev
        if i % 2 == 0:
            k = i // 2
            self._lp = self.left.prob(k)
            self._rp = self.right.prob(k)
            l0, l1 = self._lp[..., 0], self._lp[..., 1]
            r0, r1 = self._rp[..., 0], self._rp[..., 1]
            out = np.stack([l0 * r0 + l1 * r1, l1 * r0 + l0 * r1], axis=-1)
            return _normalize_pairs(out)
        b = self._b_even.astype(bool)
        l0, l1 = self._lp[..., 0], self._lp[..., 1]
        r0, r1 = self._rp[..., 0], self._rp[..., 1]
        lb = np.where(b, l1, l0)
        lbx = np.where(b, l0, l1)
        out = np.stack([lb * r0, lbx * r1], axis=-1)
        return _normalize_pairs(out)

    def commit(self, i: int, bits: np.ndarray):
        if self.n == 1:
            return
        if i % 2 == 0:
            self._b_even = bits
        else:
            k = i // 2
            self.left.commit(k, self._b_even ^ bits)
            self.right.commit(k, bits)
            self._lp = self._rp = self._b_even = None


class ScProcess:
    """Sequential successive cancellation over one evidence block (batched).

    Bits must be pulled in order: ``prob(i)`` then ``commit(i, value)`` for
    i = 0..N-1.  ``prob`` returns the (B, 2) conditional of bit i given the
    committed prefix and the evidence.
    """

    def __init__(self, evidence: np.ndarray):
        n = evidence.shape[0]
        _check_block_length(n)
        self.n = n
        self._root = _ScNode(np.asarray(evidence, dtype=float))
        self._next = 0

    def prob(self, i: int) -> np.ndarray:
        if i != self._next:
            raise DomainError(f"bits must be processed in order; expected {self._next}, got {i}")
        return self._root.prob(i)

    def commit(self, i: int, bits: np.ndarray):
        if i != self._next:
            raise DomainError(f"bits must be committed in order; expected {self._next}, got {i}")
        self._root.commit(i, np.asarray(bits, dtype=np.uint8))
        self._next += 1


# ---------------------------------------------------------------------------
# Joint model of the shaped constellation and its observation channel
# ---------------------------------------------------------------------------

class ChannelModel:
    """Sampling and evidence construction for one (params, chain) pair.

    Positions are i.i.d.: a lattice coordinate is drawn from the shaping
    discrete Gaussian and observed through N(0, delta) noise.  Evidence
    builders return the per-position weight pairs consumed by the SC
    machinery, for a single level conditioned on the decoded lower levels
    (contexts).
    """

    def __init__(self, params: TestChannelParams, chain: PartitionChain,
                 dg: DiscreteGaussian | None = None):
        self.params = params
        self.chain = chain
        self.dg = dg if dg is not None else discrete_gaussian(chain)
        self._prior_tables = [self.dg.conditional_table(l) for l in range(1, chain.r + 1)]
        labels = chain.labels()
        self._coset_pts = []
        self._coset_logw = []
        for level in range(1, chain.r + 1):
            n_cosets = 1 << level
            pts = np.empty((n_cosets, chain.n_points >> level))
            logw = np.empty_like(pts)
            for cid in range(n_cosets):
                mask = (labels & (n_cosets - 1)) == cid
                pts[cid] = chain.points[mask]
                logw[cid] = self.dg.log_pmf[mask]
            self._coset_pts.append(pts)
            self._coset_logw.append(logw)

    @property
    def r(self) -> int:
        return self.chain.r

    def sample_block(self, n: int, batch: int, rng: np.random.Generator):
        """Draw (labels, observations): labels (n, batch) ints, y (n, batch)."""
        coords = self.dg.sample_coords(rng, size=(n, batch))
        labels = np.mod(coords, self.chain.n_points)
        y = coords * self.chain.eta + rng.normal(
            scale=math.sqrt(self.params.delta), size=(n, batch)
        )
        return labels, y

    def level_bits(self, labels: np.ndarray, level: int) -> np.ndarray:
        return ((labels >> (level - 1)) & 1).astype(np.uint8)

    def context_of(self, labels: np.ndarray, level: int) -> np.ndarray:
        return labels & ((1 << (level - 1)) - 1)

    def prior_evidence(self, level: int, ctx: np.ndarray) -> np.ndarray:
        """Prior weight pairs P(x_level = b | ctx), shape ctx.shape + (2,)."""
        return self._prior_tables[level - 1][ctx]

    def posterior_evidence(self, level: int, ctx: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Joint weight pairs for (prior x observation), normalized per position.

        Entry b is proportional to sum_{a in coset(ctx, b)} D(a) N(y; a, delta);
        log-space evaluation keeps far-tail observations finite.
        """
        pts = self._coset_pts[level - 1]
        logw = self._coset_logw[level - 1]
        inv2d = 1.0 / (2.0 * self.params.delta)
        logs = []
        for b in (0, 1):
            ids = ctx + (b << (level - 1))
            z = logw[ids] - (y[..., None] - pts[ids]) ** 2 * inv2d
            m = z.max(axis=-1)
            with np.errstate(divide="ignore"):
                logs.append(m + np.log(np.exp(z - m[..., None]).sum(axis=-1)))
        log0, log1 = logs
        top = np.maximum(log0, log1)
        q0 = np.exp(log0 - top)
        q1 = np.exp(log1 - top)
        s = q0 + q1
        return np.stack([q0 / s, q1 / s], axis=-1)


# ---------------------------------------------------------------------------
# Monte-Carlo Bhattacharyya estimation
# ---------------------------------------------------------------------------

def estimate_bhattacharyya(
    model: ChannelModel,
    n: int,
    level: int,
    mode: str,
    trials: int,
    rng: np.random.Generator,
    batch: int = 2048,
):
    """Monte-Carlo estimates of Z(U_i | U^{0:i-1}, X_below [, Y]) per index.

    ``mode`` is "prior" (no observation) or "posterior".  Blocks are sampled
    from the joint model, the genie-aided SC pass produces every conditional
    at once, and 2 sqrt(p (1-p)) is averaged.  Returns (z, standard_error),
    both of shape (n,).
    """
    if mode not in ("prior", "posterior"):
        raise DomainError(f"mode must be 'prior' or 'posterior', got {mode}")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    z_sum = np.zeros(n)
    z_sq = np.zeros(n)
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        labels, y = model.sample_block(n, b, rng)
        ctx = model.context_of(labels, level)
        x_bits = model.level_bits(labels, level)
        u = polar_transform(x_bits)
        if mode == "prior":
            ev = np.ascontiguousarray(model.prior_evidence(level, ctx))
        else:
            ev = model.posterior_evidence(level, ctx, y)
        pairs = genie_pairs(ev, u)
        zvals = 2.0 * np.sqrt(pairs[..., 0] * pairs[..., 1])
        z_sum += zvals.sum(axis=1)
        z_sq += (zvals**2).sum(axis=1)
        done += b
    z = z_sum / trials
    var = np.maximum(z_sq / trials - z**2, 0.0)
    se = np.sqrt(var / trials)
    return z, se


# ---------------------------------------------------------------------------
# Convenience single-bit conditionals (used by tests and small tools)
# ---------------------------------------------------------------------------

def _run_prefix(evidence: np.ndarray, u_prefix) -> np.ndarray:
    proc = ScProcess(evidence)
    u_prefix = np.asarray(u_prefix, dtype=np.uint8)
    for i, bit in enumerate(u_prefix):
        proc.prob(i)
        proc.commit(i, np.full(evidence.shape[1], bit, dtype=np.uint8))
    return proc.prob(len(u_prefix))[0]


def sc_prior(model: ChannelModel, n: int, level: int, u_prefix, x_below) -> float:
    """P(U_i = 0 | prefix, lower-level symbols), prior-only channel.

    ``x_below`` holds per-position context integers (packed lower bits).
    """
    ctx = np.asarray(x_below, dtype=int).reshape(n, 1)
    ev = np.ascontiguousarray(model.prior_evidence(level, ctx), dtype=float)
    return float(_run_prefix(ev, u_prefix)[0])


def sc_posterior(model: ChannelModel, n: int, level: int, u_prefix, x_below,
                 observations) -> float:
    """P(U_i = 0 | prefix, lower-level symbols, observations)."""
    ctx = np.asarray(x_below, dtype=int).reshape(n, 1)
    y = np.asarray(observations, dtype=float).reshape(n, 1)
    ev = model.posterior_evidence(level, ctx, y)
    return float(_run_prefix(ev, u_prefix)[0])


# ---------------------------------------------------------------------------
# Index-set selection
# ---------------------------------------------------------------------------

TAU_SHAPING = 1e-3
TAU_FROZEN = 0.05


def partition_sets(
    z_prior: np.ndarray,
    z_posterior: np.ndarray,
    rate_target: float,
    variant: str = "quantization",
    tau_s: float = TAU_SHAPING,
    tau_f: float = TAU_FROZEN,
):
    """Split [N] into (frozen, info, shaping) index sets.

    quantization variant: shaping takes indices whose prior is essentially
    deterministic (z_prior <= tau_s); frozen takes indices whose posterior
    is essentially uniform (z_post >= 1 - tau_f); the info set is the whole
    remainder, topped up to ceil(N * rate_target) by the largest
    z_prior - z_post gaps when the thresholds alone fall short, so
    |I|/N >= rate_target always holds.  Only those two classes are safe to
    exclude: a shaping decision that fights the observation, or a frozen
    value the posterior still cares about, displaces the reconstruction by
    a whole coset step, which is why the unpolarized middle band must ride
    in the info set at finite N.

    channel_coding variant: the info set takes the round(N * rate_target)
    indices maximizing min(z_prior, 1 - z_post) (uniform-prior and reliably
    decodable); remaining indices with z_post >= 1/2 are frozen, the rest
    are shaping.

    Ties break toward the lower index.  Raises InfeasibleRateError when the
    target exceeds one bit per symbol.
    """
    z_prior = np.asarray(z_prior, dtype=float)
    z_post = np.asarray(z_posterior, dtype=float)
    n = z_prior.shape[0]
    if z_post.shape != (n,):
        raise DomainError("z vectors must share a length")
    if variant == "quantization":
        n_floor = 0 if rate_target <= 0 else int(math.ceil(rate_target * n - 1e-9))
    elif variant == "channel_coding":
        n_floor = 0 if rate_target <= 0 else int(round(rate_target * n))
    else:
        raise DomainError(f"unknown variant {variant!r}")
    if n_floor > n:
        raise InfeasibleRateError(
            f"rate target {rate_target} needs {n_floor} info indices out of {n}"
        )
    idx = np.arange(n)
    if variant == "quantization":
        s_mask = z_prior <= tau_s
        f_mask = (z_post >= 1.0 - tau_f) & ~s_mask
        i_mask = ~s_mask & ~f_mask
        short = n_floor - int(i_mask.sum())
        if short > 0:
            gap = z_prior - z_post
            cand = idx[~i_mask]
            extra = cand[np.lexsort((cand, -gap[cand]))][:short]
            i_mask[extra] = True
            s_mask[extra] = False
            f_mask[extra] = False
        info = idx[i_mask]
        shaping = idx[s_mask]
        frozen = idx[f_mask]
    else:
        score = np.minimum(z_prior, 1.0 - z_post)
        order = np.lexsort((idx, -score))
        info = np.sort(order[:n_floor])
        rest = np.sort(order[n_floor:])
        to_frozen = z_post[rest] >= 0.5
        frozen = rest[to_frozen]
        shaping = rest[~to_frozen]
    return frozen, info, shaping


# ---------------------------------------------------------------------------
# CodeSpec and construction
# ---------------------------------------------------------------------------

@dataclass
class CodeSpec:
    """A constructed multilevel code: per-level index sets and frozen bits."""

    n: int
    params: TestChannelParams
    chain: PartitionChain
    frozen: list          # r arrays of sorted indices
    info: list
    shaping: list
    frozen_values: list   # r arrays of bits, aligned with ``frozen``
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def r(self) -> int:
        return self.chain.r

    @property
    def rate_bits(self) -> int:
        return int(sum(len(i) for i in self.info))

    @property
    def rate(self) -> float:
        return self.rate_bits / self.n

    def validate(self):
        ref = np.arange(self.n)
        check_nesting = self.meta.get("check_level_nesting", True)
        prev_frozen = None
        for l in range(self.r):
            f, i, s = self.frozen[l], self.info[l], self.shaping[l]
            merged = np.sort(np.concatenate([f, i, s]))
            if not np.array_equal(merged, ref):
                raise DomainError(f"level {l + 1}: F, I, S do not partition [N]")
            if len(self.frozen_values[l]) != len(f):
                raise DomainError(f"level {l + 1}: frozen values misaligned")
            if (
                check_nesting
                and prev_frozen is not None
                and not np.isin(f, prev_frozen).all()
            ):
                raise DomainError(f"level {l + 1}: frozen set not nested in level {l}")
            prev_frozen = f

    def model(self) -> ChannelModel:
        if "_model" not in self.__dict__:
            self.__dict__["_model"] = ChannelModel(self.params, self.chain)
        return self.__dict__["_model"]


def _enforce_frozen_nesting(frozen, info, shaping):
    """Promote frozen indices violating F_l <= F_{l-1} into the info set."""
    r = len(frozen)
    for l in range(1, r):
        bad = frozen[l][~np.isin(frozen[l], frozen[l - 1])]
        if bad.size:
            frozen[l] = np.setdiff1d(frozen[l], bad)
            info[l] = np.sort(np.concatenate([info[l], bad]))
    return frozen, info, shaping


def build_codespec(
    params: TestChannelParams,
    chain: PartitionChain,
    n: int,
    seed: int,
    trials: int = DEFAULT_TRIALS,
    backoff: float = DEFAULT_BACKOFF,
    rate_targets=None,
    frozen_mode: str = "zero",
    batch: int = 2048,
    model: ChannelModel | None = None,
    tau_s: float = TAU_SHAPING,
    tau_f: float = TAU_FROZEN,
) -> CodeSpec:
    """Construct the per-level index sets by Monte-Carlo polarization.

    Per-level info-rate floors default to the quadrature mutual informations
    plus ``backoff`` (levels below MI_FLOOR get a zero floor); the realized
    rates also absorb the unpolarized middle band per
    :func:`partition_sets`.  ``rate_targets`` overrides the floors.
    ``frozen_mode`` is "zero" or "random".
    """
    _check_block_length(n)
    model = model if model is not None else ChannelModel(params, chain)
    if rate_targets is None:
        mis = mi_levels(params, chain)
        rate_targets = [
            min(mi + backoff, 1.0) if mi > MI_FLOOR else 0.0 for mi in mis
        ]
    frozen, info, shaping, fvals = [], [], [], []
    z_stats = []
    for level in range(1, chain.r + 1):
        # counter-based stream derivation: (seed, level, mode) -> stream
        rng_pr = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(level, 0)))
        )
        rng_po = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(level, 1)))
        )
        z_pr, se_pr = estimate_bhattacharyya(model, n, level, "prior", trials, rng_pr, batch)
        z_po, se_po = estimate_bhattacharyya(
            model, n, level, "posterior", trials, rng_po, batch
        )
        z_po = np.minimum(z_po, z_pr)
        f, i, s = partition_sets(
            z_pr, z_po, rate_targets[level - 1], "quantization", tau_s=tau_s, tau_f=tau_f
        )
        frozen.append(f)
        info.append(i)
        shaping.append(s)
        z_stats.append(
            dict(level=level, z_prior_mean=float(z_pr.mean()), z_post_mean=float(z_po.mean()),
                 se_max=float(max(se_pr.max(), se_po.max())))
        )
    frozen, info, shaping = _enforce_frozen_nesting(frozen, info, shaping)
    rng_f = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(0, 2)))
    )
    for f in frozen:
        if frozen_mode == "random":
            fvals.append(rng_f.integers(0, 2, size=len(f), dtype=np.uint8))
        elif frozen_mode == "zero":
            fvals.append(np.zeros(len(f), dtype=np.uint8))
        else:
            raise DomainError(f"unknown frozen_mode {frozen_mode!r}")
    return CodeSpec(
        n=n, params=params, chain=chain,
        frozen=frozen, info=info, shaping=shaping, frozen_values=fvals,
        seed=seed,
        meta=dict(
            trials=trials, backoff=backoff, tau_s=tau_s, tau_f=tau_f,
            rate_targets=[float(t) for t in rate_targets],
            frozen_mode=frozen_mode, z_stats=z_stats,
        ),
    )

"""Multilevel lossy encoder and decoder over a constructed code.

Encoding runs level by level.  At each level two successive-cancellation
processes walk the block in parallel: one carries the observation posterior,
one the shaping prior.  Info positions draw their bit by random rounding
from the posterior, frozen positions take the pre-shared value, shaping
positions take the prior MAP decision (ties to 0).  The decoded lower-level
bits feed the next level's coset contexts.

Reconstruction maps the per-level codeword bits to the integer label
chi = sum_l 2^(l-1) x_l, folds it into the chain window modulo 2^r, and
scales by eta.

The decoder reproduces the encoder's reconstruction bit-exactly from the
info bits alone: frozen values are shared, and shaping bits are regenerated
with the same deterministic MAP rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .errors import DomainError, HashError, VersionError
from .gaussian_lattice import PartitionChain, default_chain
from .polar_engine import (
    ChannelModel,
    CodeSpec,
    ScProcess,
    build_codespec,
    polar_transform,
)
from .test_channel import mmse_params

INFO, FROZEN, SHAPING = 0, 1, 2


@dataclass
class QuantizedBlock:
    """One encoded block: transmitted bits, reconstruction, and metrics."""

    info_bits: list            # r arrays, bits of u on the info set, index order
    reconstruction: np.ndarray  # (N,) lattice points
    rate_bits: int
    distortion: float


@dataclass
class ExperimentResult:
    """Aggregated metrics for one experiment configuration."""

    rate: float
    distortion: float
    snr_db: float
    ci95_distortion: float
    n_blocks: int
    errors: int = 0
    seed: int | None = None
    runtime_s: float = 0.0
    config: dict = field(default_factory=dict)


def _frozen_value_map(spec: CodeSpec, level: int) -> np.ndarray:
    vals = np.zeros(spec.n, dtype=np.uint8)
    vals[spec.frozen[level]] = spec.frozen_values[level]
    return vals


def encode_level(
    spec: CodeSpec,
    level: int,
    y: np.ndarray,
    x_below: np.ndarray,
    rng: np.random.Generator,
    model: ChannelModel | None = None,
    frozen_override: tuple | None = None,
):
    """Encode one level of a batch of blocks.

    Parameters
    ----------
    level : 1-based partition level.
    y : (N, B) observations.
    x_below : (N, B) integer contexts (packed bits of levels 1..level-1).
    rng : generator for the random-rounding draws.
    frozen_override : optional (positions, bits(|pos|, B)) replacing the
        spec's shared values on those frozen positions, per block.

    Returns (u, info_bits) with u of shape (N, B) and info_bits (|I_l|, B).
    """
    model = model if model is not None else spec.model()
    n, batch = y.shape
    ev_post = model.posterior_evidence(level, x_below, y)
    ev_pri = np.ascontiguousarray(
        np.broadcast_to(model.prior_evidence(level, x_below), (n, batch, 2)), dtype=float
    )
    role = np.full(n, SHAPING, dtype=np.int8)
    role[spec.info[level - 1]] = INFO
    role[spec.frozen[level - 1]] = FROZEN
    fvals = np.repeat(_frozen_value_map(spec, level - 1)[:, None], batch, axis=1)
    if frozen_override is not None:
        pos, bits = frozen_override
        fvals[np.asarray(pos, dtype=int)] = np.asarray(bits, dtype=np.uint8)
    u = np.empty((n, batch), dtype=np.uint8)
    post = ScProcess(ev_post)
    pri = ScProcess(ev_pri)
    for i in range(n):
        p_post = post.prob(i)
        p_pri = pri.prob(i)
        if role[i] == INFO:
            bits = (rng.random(batch) < p_post[:, 1]).astype(np.uint8)
        elif role[i] == FROZEN:
            bits = fvals[i]
        else:
            bits = (p_pri[:, 1] > p_pri[:, 0]).astype(np.uint8)
        u[i] = bits
        post.commit(i, bits)
        pri.commit(i, bits)
    return u, u[spec.info[level - 1]]


def reconstruct(spec: CodeSpec, u_levels: list[np.ndarray]) -> np.ndarray:
    """Map r full u-vectors to lattice points via the label fold.

    Accepts (N,) or (N, B) u arrays; returns matching shape of real points.
    """
    chain = spec.chain
    if len(u_levels) != spec.r:
        raise DomainError(f"expected {spec.r} level vectors, got {len(u_levels)}")
    label = None
    for l, u in enumerate(u_levels):
        x = polar_transform(np.asarray(u, dtype=np.uint8))
        term = x.astype(np.int64) << l
        label = term if label is None else label + term
    coords = chain.fold_labels(label)
    return coords * chain.eta


def encode_full(
    spec: CodeSpec,
    y: np.ndarray,
    rng: np.random.Generator,
    frozen_overrides: dict | None = None,
):
    """Encode a (B, N) batch, returning the full per-level u vectors.

    ``frozen_overrides`` maps a 1-based level to (positions, bits) where
    ``bits`` has shape (len(positions), B); those frozen positions take the
    given per-block values instead of the spec's shared ones (used to embed
    message bits in interference-presubtraction coding).

    Returns (u_levels, xhat, dist): r arrays (N, B), the reconstruction
    (N, B), and per-block distortion (B,).
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != spec.n:
        raise DomainError(f"expected (B, {spec.n}) input, got {y.shape}")
    model = spec.model()
    batch = y.shape[0]
    yt = np.ascontiguousarray(y.T)
    ctx = np.zeros((spec.n, batch), dtype=np.int64)
    u_levels = []
    for level in range(1, spec.r + 1):
        override = frozen_overrides.get(level) if frozen_overrides else None
        u, _ = encode_level(spec, level, yt, ctx, rng, model=model, frozen_override=override)
        x_bits = polar_transform(u)
        ctx += x_bits.astype(np.int64) << (level - 1)
        u_levels.append(u)
    coords = spec.chain.fold_labels(ctx)
    xhat = coords * spec.chain.eta  # (N, B)
    dist = ((yt - xhat) ** 2).mean(axis=0)
    return u_levels, xhat, dist


def encode_blocks(
    spec: CodeSpec, y: np.ndarray, rng: np.random.Generator
) -> list[QuantizedBlock]:
    """Encode a (B, N) batch of source blocks; one QuantizedBlock each."""
    u_levels, xhat, dist = encode_full(spec, y, rng)
    info_bits = [u_levels[l][spec.info[l]] for l in range(spec.r)]
    return [
        QuantizedBlock(
            info_bits=[ib[:, b].copy() for ib in info_bits],
            reconstruction=xhat[:, b].copy(),
            rate_bits=spec.rate_bits,
            distortion=float(dist[b]),
        )
        for b in range(xhat.shape[1])
    ]


def encode(spec: CodeSpec, y: np.ndarray, rng: np.random.Generator) -> QuantizedBlock:
    """Encode a single (N,) source block."""
    return encode_blocks(spec, np.asarray(y, dtype=float)[None, :], rng)[0]


def decode_bits(spec: CodeSpec, info_bits: list[np.ndarray]) -> np.ndarray:
    """Rebuild the reconstruction from per-level info bits.

    Regenerates shaping bits with the encoder's MAP rule; bit-exact with the
    encoder's reconstruction for matching frozen values.
    """
    if len(info_bits) != spec.r:
        raise DomainError(f"expected {spec.r} info-bit arrays")
    model = spec.model()
    info_bits = [np.asarray(ib, dtype=np.uint8) for ib in info_bits]
    single = info_bits[0].ndim == 1
    arrs = [ib[:, None] if single else ib for ib in info_bits]  # (|I_l|, B)
    batch = max((a.shape[1] for a in arrs), default=1)
    ctx = np.zeros((spec.n, batch), dtype=np.int64)
    u_levels = []
    for level in range(1, spec.r + 1):
        ev_pri = np.ascontiguousarray(
            np.broadcast_to(model.prior_evidence(level, ctx), (spec.n, batch, 2)),
            dtype=float,
        )
        role = np.full(spec.n, SHAPING, dtype=np.int8)
        role[spec.info[level - 1]] = INFO
        role[spec.frozen[level - 1]] = FROZEN
        fvals = _frozen_value_map(spec, level - 1)
        given = np.zeros((spec.n, batch), dtype=np.uint8)
        if len(spec.info[level - 1]):
            given[spec.info[level - 1]] = arrs[level - 1]
        pri = ScProcess(ev_pri)
        u = np.empty((spec.n, batch), dtype=np.uint8)
        for i in range(spec.n):
            p_pri = pri.prob(i)
            if role[i] == INFO:
                bits = given[i]
            elif role[i] == FROZEN:
                bits = np.full(batch, fvals[i], dtype=np.uint8)
            else:
                bits = (p_pri[:, 1] > p_pri[:, 0]).astype(np.uint8)
            u[i] = bits
            pri.commit(i, bits)
        x_bits = polar_transform(u)
        ctx += x_bits.astype(np.int64) << (level - 1)
        u_levels.append(u)
    coords = spec.chain.fold_labels(ctx)
    xhat = coords * spec.chain.eta
    return xhat[:, 0] if single else xhat


def measure(blocks: list[QuantizedBlock], sigma_s: float, seed=None,
            runtime_s: float = 0.0, config=None) -> ExperimentResult:
    """Aggregate rate/distortion metrics over encoded blocks."""
    if not blocks:
        raise DomainError("need at least one block")
    d = np.array([b.distortion for b in blocks])
    n = blocks[0].reconstruction.shape[0]
    rate = blocks[0].rate_bits / n
    mean_d = float(d.mean())
    ci = 1.96 * float(d.std(ddof=1)) / math.sqrt(len(d)) if len(d) > 1 else 0.0
    return ExperimentResult(
        rate=rate,
        distortion=mean_d,
        snr_db=10.0 * math.log10(sigma_s**2 / mean_d) if mean_d > 0 else math.inf,
        ci95_distortion=ci,
        n_blocks=len(blocks),
        seed=seed,
        runtime_s=runtime_s,
        config=config or {},
    )


# ---------------------------------------------------------------------------
# Bitstream persistence
# ---------------------------------------------------------------------------

_MAGIC = b"PQBS"
_STREAM_VERSION = 1


def pack_blocks(spec: CodeSpec, blocks: list[QuantizedBlock]) -> bytes:
    """Serialize blocks: header with spec hash, then per-block level bits.

    Layout per block: levels ascending, info bits in ascending index order,
    concatenated, then bit-packed MSB-first across the whole stream.
    """
    from .io import spec_hash

    h = bytes.fromhex(spec_hash(spec))[:16]
    bits = []
    for blk in blocks:
        for l in range(spec.r):
            bits.append(np.asarray(blk.info_bits[l], dtype=np.uint8))
    flat = np.concatenate(bits) if bits else np.zeros(0, dtype=np.uint8)
    header = (
        _MAGIC
        + bytes([_STREAM_VERSION])
        + h
        + spec.n.to_bytes(4, "big")
        + bytes([spec.r])
        + len(blocks).to_bytes(4, "big")
        + spec.rate_bits.to_bytes(4, "big")
    )
    return header + np.packbits(flat).tobytes()


def unpack_blocks(spec: CodeSpec, data: bytes) -> list[list[np.ndarray]]:
    """Parse a bitstream back into per-block, per-level info bits."""
    from .io import spec_hash

    if data[:4] != _MAGIC:
        raise HashError("not a polarq bitstream")
    if data[4] != _STREAM_VERSION:
        raise VersionError(f"unsupported bitstream version {data[4]}")
    h = data[5:21]
    if h != bytes.fromhex(spec_hash(spec))[:16]:
        raise HashError("bitstream was produced by a different spec")
    n = int.from_bytes(data[21:25], "big")
    r = data[25]
    n_blocks = int.from_bytes(data[26:30], "big")
    rate_bits = int.from_bytes(data[30:34], "big")
    if n != spec.n or r != spec.r or rate_bits != spec.rate_bits:
        raise HashError("bitstream header disagrees with spec")
    flat = np.unpackbits(
        np.frombuffer(data[34:], dtype=np.uint8), count=n_blocks * rate_bits
    )
    out = []
    pos = 0
    for _ in range(n_blocks):
        levels = []
        for l in range(spec.r):
            k = len(spec.info[l])
            levels.append(flat[pos : pos + k].astype(np.uint8))
            pos += k
        out.append(levels)
    return out


# ---------------------------------------------------------------------------
# Estimator-style facade
# ---------------------------------------------------------------------------

class PolarLatticeQuantizer(TransformerMixin, BaseEstimator):
    """Lattice vector quantizer for i.i.d. Gaussian blocks.

    ``fit`` constructs the multilevel code by Monte-Carlo polarization for
    the configured source std and target distortion; ``transform`` encodes
    (n_blocks, n) arrays into bit matrices and ``inverse_transform`` maps
    bits back to reconstructions.  Construction is driven by the configured
    source model, so ``fit`` ignores the content of X (shape-compatible
    arrays are accepted for pipeline compatibility).

    Parameters
    ----------
    sigma_s : source standard deviation.
    delta : target mean squared distortion.
    n : block length (power of two).
    r : number of partition levels.
    trials : Monte-Carlo construction trials per level.
    backoff : per-level info-rate margin over the quadrature MI.
    seed : construction seed (also seeds encoding unless a generator is
        passed to ``transform``).
    frozen_mode : "zero" or "random" frozen-bit values.
    """

    def __init__(self, sigma_s=3.0, delta=1.0, n=1024, r=6, trials=20000,
                 backoff=0.02, seed=0, frozen_mode="zero"):
        self.sigma_s = sigma_s
        self.delta = delta
        self.n = n
        self.r = r
        self.trials = trials
        self.backoff = backoff
        self.seed = seed
        self.frozen_mode = frozen_mode

    def fit(self, X=None, y=None):
        params = mmse_params(self.sigma_s, self.delta)
        chain = default_chain(params.sigma_r, params.sigma_tilde, r=self.r)
        self.params_ = params
        self.chain_ = chain
        self.spec_ = build_codespec(
            params, chain, n=self.n, seed=self.seed, trials=self.trials,
            backoff=self.backoff, frozen_mode=self.frozen_mode,
        )
        self.rate_bits_ = self.spec_.rate_bits
        return self

    def _check_fitted(self):
        if not hasattr(self, "spec_"):
            raise DomainError("estimator is not fitted; call fit() first")

    def transform(self, X, rng: np.random.Generator | None = None) -> np.ndarray:
        """Encode blocks; returns a (n_blocks, rate_bits) uint8 bit matrix."""
        self._check_fitted()
        X = check_array(X, ensure_2d=True, dtype=float)
        if X.shape[1] != self.n:
            raise DomainError(f"expected {self.n} columns, got {X.shape[1]}")
        rng = rng if rng is not None else np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(0xEC0DE,))
        )
        blocks = encode_blocks(self.spec_, X, rng)
        return np.stack([np.concatenate(b.info_bits) for b in blocks])

    def inverse_transform(self, bits: np.ndarray) -> np.ndarray:
        """Decode bit matrices back to (n_blocks, n) reconstructions."""
        self._check_fitted()
        bits = check_array(bits, ensure_2d=True, dtype=np.uint8)
        if bits.shape[1] != self.rate_bits_:
            raise DomainError(f"expected {self.rate_bits_} bit columns, got {bits.shape[1]}")
        sizes = [len(i) for i in self.spec_.info]
        splits = np.cumsum(sizes)[:-1]
        per_level = np.split(bits, splits, axis=1)
        arrs = [np.ascontiguousarray(p.T) for p in per_level]
        return decode_bits(self.spec_, arrs).T

    def quantization_distortion(self, X, rng=None) -> float:
        """Mean squared error of encode-decode on X (convenience metric)."""
        self._check_fitted()
        bits = self.transform(X, rng=rng)
        xh = self.inverse_transform(bits)
        return float(((np.asarray(X) - xh) ** 2).mean())

"""Nested-lattice coding: distributed quantization with decoder side
information, and interference presubtraction with encoder channel knowledge.

Both schemes share one constellation D over one chain and two set families
on the same polarized block:

* a quantization-rule family (the encoder's view, noise variance
  ``delta_q``), built like the plain quantizer, and
* a channel-rule family (the decoder's view, noise variance ``delta_c``),
  whose info set holds the indices the decoder can resolve reliably by
  successive cancellation from its observation.

Side-information coding (``flavor='wz'``): the encoder random-rounds the
source against the quantization sets and transmits only the info indices
the decoder cannot recover from its scaled side information b; the decoder
SC-decodes the rest, regenerates shaping bits by the shared MAP rule, and
reconstructs x_check = a + gamma (b - a).

Presubtraction coding (``flavor='gp'``): the encoder quantizes the scaled
interference t = rho s, carrying message bits on frozen-for-quantization
indices that the decoder can SC-decode; the transmitted signal is
x = a / alpha_q - t.  Random-rounded indices the decoder cannot resolve are
shipped out of band (the two-phase side channel) and their rate is
reported separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .gaussian_lattice import PartitionChain, tune_eta
from .polar_engine import (
    ChannelModel,
    CodeSpec,
    ScProcess,
    estimate_bhattacharyya,
    polar_transform,
    TAU_FROZEN,
    TAU_SHAPING,
    MI_FLOOR,
    _enforce_frozen_nesting,
)
from .quantizer import encode_full
from .test_channel import constellation_params, mi_levels

DEFAULT_BACKOFF_Q = 0.02
DEFAULT_BACKOFF_C = 0.0
TAU_CHANNEL = 3e-3


# ---------------------------------------------------------------------------
# Scheme parameter derivations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WzParams:
    """MMSE geometry for quantization with decoder side information.

    Source x = y + z with independent y, z; target distortion ``delta`` on x
    with y known only at the decoder.
    """

    sigma_y2: float
    sigma_z2: float
    delta: float
    sigma_x2: float
    eta_mmse: float          # sigma_z^2 / (sigma_z^2 - delta)
    delta_prime: float       # eta_mmse * delta
    alpha_q: float
    alpha_c: float
    gamma: float
    sigma_xprime2: float
    sigma_a2: float
    sigma_b2: float
    delta_q: float           # alpha_q * delta_prime (encoder channel noise)
    delta_c: float           # sigma_b2 - sigma_a2 (decoder channel noise)
    sigma_tilde_q2: float
    sigma_tilde_c2: float
    rate_bound: float        # (1/2) log2(sigma_z^2 / delta), floored at 0
    rate_l1: float
    rate_l2: float


def wz_params(sigma_y2: float, sigma_z2: float, delta: float) -> WzParams:
    """Derive all side-information coding parameters.

    Requires 0 < delta <= sigma_z2 (delta = sigma_z2 is the zero-rate
    boundary, where the MMSE rescaling degenerates).
    """
    if sigma_y2 <= 0 or sigma_z2 <= 0 or delta <= 0:
        raise DomainError("variances and delta must be positive")
    if delta > sigma_z2:
        raise DomainError(f"delta={delta} exceeds sigma_z2={sigma_z2}")
    sigma_x2 = sigma_y2 + sigma_z2
    gamma = sigma_y2 * delta / (sigma_x2 * sigma_z2)
    if delta == sigma_z2:
        eta_mmse = math.inf
        delta_prime = math.inf
        alpha_q = alpha_c = 0.0
        sigma_xprime2 = math.inf
        sigma_a2 = sigma_b2 = delta_q = delta_c = 0.0
        st_q2 = st_c2 = 0.0
        r_l1 = r_l2 = 0.0
    else:
        eta_mmse = sigma_z2 / (sigma_z2 - delta)
        delta_prime = eta_mmse * delta
        denom = sigma_x2 * (sigma_z2 - delta) + sigma_z2 * delta
        alpha_q = sigma_x2 * (sigma_z2 - delta) / denom
        alpha_c = (sigma_x2 - sigma_z2) * (sigma_z2 - delta) / denom
        sigma_xprime2 = sigma_x2 + delta_prime
        sigma_a2 = alpha_q**2 * sigma_xprime2
        delta_q = alpha_q * delta_prime
        sigma_b2 = (alpha_q / alpha_c) ** 2 * sigma_y2
        delta_c = sigma_b2 - sigma_a2
        st_q2 = sigma_a2 / sigma_x2 * delta_q
        st_c2 = sigma_a2 / sigma_b2 * delta_c
        core = sigma_x2 * sigma_z2 - sigma_y2 * delta
        r_l1 = 0.5 * math.log2(core / (sigma_z2 * delta))
        r_l2 = 0.5 * math.log2(core / sigma_z2**2)
    return WzParams(
        sigma_y2=sigma_y2, sigma_z2=sigma_z2, delta=delta, sigma_x2=sigma_x2,
        eta_mmse=eta_mmse, delta_prime=delta_prime,
        alpha_q=alpha_q, alpha_c=alpha_c, gamma=gamma,
        sigma_xprime2=sigma_xprime2, sigma_a2=sigma_a2, sigma_b2=sigma_b2,
        delta_q=delta_q, delta_c=delta_c,
        sigma_tilde_q2=st_q2, sigma_tilde_c2=st_c2,
        rate_bound=max(0.5 * math.log2(sigma_z2 / delta), 0.0),
        rate_l1=r_l1, rate_l2=r_l2,
    )


def wz_params_general(sigma_x2: float, sigma_z2: float, delta: float) -> tuple[WzParams, float]:
    """Side-information parameters for the y = x + z correlation model.

    Rescales the side information by alpha_dot = sigma_x^2 / sigma_y^2 so
    the standard x = y' + z' form applies; returns (params, alpha_dot).
    The achievable rate bound becomes
    (1/2) log2(sigma_z^2 sigma_x^2 / ((sigma_z^2 + sigma_x^2) delta)).
    """
    if sigma_x2 <= 0 or sigma_z2 <= 0:
        raise DomainError("variances must be positive")
    sigma_y2 = sigma_x2 + sigma_z2
    alpha_dot = sigma_x2 / sigma_y2
    z_dot = sigma_z2 * sigma_x2 / (sigma_z2 + sigma_x2)
    return wz_params(alpha_dot**2 * sigma_y2, z_dot, delta), alpha_dot


@dataclass(frozen=True)
class GpParams:
    """MMSE geometry for channel coding with known interference."""

    power: float
    sigma_z2: float
    sigma_i2: float
    rho: float
    sigma_y2: float
    sigma_sprime2: float
    alpha_c: float
    alpha_q: float
    sigma_a2: float
    sigma_t2: float          # variance of t = rho s
    sigma_b2: float
    delta_q: float           # alpha_q * power (encoder channel noise)
    delta_c: float           # sigma_b2 - sigma_a2 (decoder channel noise)
    sigma_tilde_c2: float
    sigma_tilde_q2: float
    capacity: float          # (1/2) log2(1 + power / sigma_z2)
    rate_l1: float
    rate_l2: float


def gp_params(power: float, sigma_z2: float, sigma_i2: float) -> GpParams:
    """Derive all interference-presubtraction parameters."""
    if power <= 0 or sigma_z2 <= 0 or sigma_i2 <= 0:
        raise DomainError("power and variances must be positive")
    rho = power / (power + sigma_z2)
    sigma_y2 = sigma_i2 + power + sigma_z2
    sigma_sprime2 = rho**2 * sigma_i2 + power
    denom = power * sigma_i2 + (power + sigma_z2) ** 2
    alpha_c = power * sigma_y2 / denom
    alpha_q = power * sigma_i2 / denom
    sigma_a2 = alpha_q**2 * sigma_sprime2
    sigma_t2 = rho**2 * sigma_i2
    delta_q = alpha_q * power
    sigma_b2 = (alpha_q / alpha_c) ** 2 * rho**2 * sigma_y2
    delta_c = sigma_b2 - sigma_a2
    st_c2 = (alpha_q**2 * alpha_c / rho) * (sigma_z2 * sigma_sprime2 / sigma_y2)
    st_q2 = (alpha_q**3 / rho**2) * (power * sigma_sprime2 / sigma_i2)
    return GpParams(
        power=power, sigma_z2=sigma_z2, sigma_i2=sigma_i2, rho=rho,
        sigma_y2=sigma_y2, sigma_sprime2=sigma_sprime2,
        alpha_c=alpha_c, alpha_q=alpha_q,
        sigma_a2=sigma_a2, sigma_t2=sigma_t2, sigma_b2=sigma_b2,
        delta_q=delta_q, delta_c=delta_c,
        sigma_tilde_c2=st_c2, sigma_tilde_q2=st_q2,
        capacity=0.5 * math.log2(1.0 + power / sigma_z2),
        rate_l1=0.5 * math.log2(denom / (sigma_z2 * (power + sigma_z2))),
        rate_l2=0.5 * math.log2(denom / (power + sigma_z2) ** 2),
    )


# ---------------------------------------------------------------------------
# Nested spec
# ---------------------------------------------------------------------------

@dataclass
class NestedSpec:
    """A nested code pair plus the per-level operational role sets.

    ``spec_q`` holds the quantization-rule sets the encoder follows;
    ``spec_c`` the channel-rule sets the decoder follows.  ``sc_decode``
    are the channel-info indices resolved by SC at the decoder;
    ``preshared``/``preshared_values`` the frozen positions whose values
    both sides know; ``message`` (gp) the frozen-for-quantization slots
    carrying message bits; ``two_phase`` (gp) the random-rounded indices
    the decoder cannot resolve, shipped out of band.
    """

    flavor: str              # "wz" or "gp"
    scheme_params: dict
    spec_q: CodeSpec
    spec_c: CodeSpec
    sc_decode: list
    two_phase: list
    message: list
    preshared: list
    preshared_values: list
    seed: int

    # aliases used by io serialization
    @property
    def fine(self) -> CodeSpec:
        return self.spec_q if self.flavor == "wz" else self.spec_c

    @property
    def coarse(self) -> CodeSpec:
        return self.spec_c if self.flavor == "wz" else self.spec_q

    @property
    def r(self) -> int:
        return self.spec_q.r

    @property
    def n(self) -> int:
        return self.spec_q.n

    def level_sets(self, level: int) -> dict:
        """Set-difference bookkeeping for 1-based ``level``."""
        l = level - 1
        fq, iq, sq = self.spec_q.frozen[l], self.spec_q.info[l], self.spec_q.shaping[l]
        fc, ic, sc = self.spec_c.frozen[l], self.spec_c.info[l], self.spec_c.shaping[l]
        if self.flavor == "wz":
            d_f = np.setdiff1d(fc, fq)
            d_s = np.setdiff1d(sc, sq)
            d_i = np.setdiff1d(iq, ic)
        else:
            d_f = np.setdiff1d(fq, fc)
            d_s = np.setdiff1d(sc, sq)
            d_i = np.setdiff1d(ic, iq)
        return dict(dF=d_f, dS=d_s, dI=d_i)

    def transmitted_rate(self) -> float:
        """In-band rate: dI bits per sample (wz); message bits (gp)."""
        if self.flavor == "wz":
            return sum(len(self.level_sets(l)["dI"]) for l in range(1, self.r + 1)) / self.n
        return sum(len(m) for m in self.message) / self.n

    def two_phase_rate(self) -> float:
        return sum(len(t) for t in self.two_phase) / self.n

    def nesting_ok(self) -> bool:
        """Per-level inclusion invariants of the pair (flavor-oriented)."""
        for l in range(self.r):
            fq, iq, sq = self.spec_q.frozen[l], self.spec_q.info[l], self.spec_q.shaping[l]
            fc, ic, sc = self.spec_c.frozen[l], self.spec_c.info[l], self.spec_c.shaping[l]
            if not np.isin(sq, sc).all():
                return False
            if self.flavor == "wz":
                if not (np.isin(fq, fc).all() and np.isin(ic, iq).all()):
                    return False
            else:
                if not (np.isin(fc, fq).all() and np.isin(iq, np.concatenate([ic, sc])).all()):
                    return False
        return True

    def models(self):
        if "_models" not in self.__dict__:
            chain = self.spec_q.chain
            dg = None
            m_q = ChannelModel(self.spec_q.params, chain)
            m_c = ChannelModel(self.spec_c.params, chain, dg=m_q.dg)
            self.__dict__["_models"] = (m_q, m_c)
        return self.__dict__["_models"]


def build_nested(
    scheme: WzParams | GpParams,
    n: int,
    seed: int,
    trials: int = 20000,
    backoff_q: float = DEFAULT_BACKOFF_Q,
    backoff_c: float = DEFAULT_BACKOFF_C,
    r: int = 6,
    epsilon_target: float = 1e-7,
    tau_s: float = TAU_SHAPING,
    tau_f: float = TAU_FROZEN,
    tau_cc: float = TAU_CHANNEL,
    midband_cap: float | None = 0.08,
    batch: int = 2048,
) -> NestedSpec:
    """Construct the nested pair for one scheme at block length ``n``.

    The chain is scaled for the smaller rescaled noise deviation (the
    quantization channel for wz, the channel-coding channel for gp).  The
    quantization sets follow the plain-quantizer construction.  The decoder
    info set takes, per level, the candidates whose channel-posterior
    Bhattacharyya estimate is at most ``tau_cc`` (capped at
    round(N (MI_c - backoff_c)) when backoff_c > 0), drawn from the
    positions the encoder random-rounds (wz) or random-rounds and freezes
    (gp); reliability-first selection keeps the successive-cancellation
    block error rate near the sum of the selected estimates, and yields the
    nesting inclusions by construction.

    ``midband_cap`` limits each level's quantization-info rate to
    MI + backoff_q + cap by freezing the weakest (smallest polarization
    gap) candidates beyond it; freezing weak indices trades a small, smooth
    distortion penalty for in-band (wz) or out-of-band (gp) rate.  Capped
    indices are excluded from message embedding.
    """
    flavor = "wz" if isinstance(scheme, WzParams) else "gp"
    sigma_a = math.sqrt(scheme.sigma_a2)
    tilde_target = math.sqrt(
        scheme.sigma_tilde_q2 if flavor == "wz" else scheme.sigma_tilde_c2
    )
    eta = tune_eta(tilde_target, sigma_a, r, epsilon_target)
    chain = PartitionChain(eta=eta, r=r, sigma_r=sigma_a)
    params_q = constellation_params(sigma_a, scheme.delta_q)
    params_c = constellation_params(sigma_a, scheme.delta_c)
    model_q = ChannelModel(params_q, chain)
    model_c = ChannelModel(params_c, chain, dg=model_q.dg)
    mis_q = mi_levels(params_q, chain)
    mis_c = mi_levels(params_c, chain)
    frozen_q, info_q, shaping_q = [], [], []
    ic_list, msg_list, tp_list, pre_list = [], [], [], []
    fc_list, sc_list = [], []
    from .polar_engine import partition_sets

    z_c_all = []
    capped_mask = [np.array([], dtype=int) for _ in range(r)]
    for level in range(1, r + 1):
        rng_pr = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(level, 0)))
        )
        rng_q = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(level, 1)))
        )
        rng_c = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(level, 2)))
        )
        z_pr, _ = estimate_bhattacharyya(model_q, n, level, "prior", trials, rng_pr, batch)
        z_q, _ = estimate_bhattacharyya(model_q, n, level, "posterior", trials, rng_q, batch)
        z_c, _ = estimate_bhattacharyya(model_c, n, level, "posterior", trials, rng_c, batch)
        # degradation ordering: the smaller-noise channel is the stronger one
        if flavor == "wz":
            z_c = np.minimum(z_c, z_pr)
            z_q = np.minimum(z_q, z_c)
        else:
            z_q = np.minimum(z_q, z_pr)
            z_c = np.minimum(z_c, z_q)
        z_c_all.append(z_c)
        floor_q = min(mis_q[level - 1] + backoff_q, 1.0) if mis_q[level - 1] > MI_FLOOR else 0.0
        f, i, s = partition_sets(z_pr, z_q, floor_q, "quantization", tau_s=tau_s, tau_f=tau_f)
        if midband_cap is not None:
            n_max = int(math.ceil(min(floor_q + midband_cap, 1.0) * n))
            if len(i) > n_max:
                gap = z_pr - z_q
                order = i[np.lexsort((i, -gap[i]))]
                keep = np.sort(order[:n_max])
                capped = np.sort(order[n_max:])
                i = keep
                f = np.sort(np.concatenate([f, capped]))
                capped_mask[level - 1] = capped
        frozen_q.append(f)
        info_q.append(i)
        shaping_q.append(s)
    frozen_q, info_q, shaping_q = _enforce_frozen_nesting(frozen_q, info_q, shaping_q)
    rng_f = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(0, 3)))
    )
    fvals_q = [rng_f.integers(0, 2, size=len(f), dtype=np.uint8) for f in frozen_q]
    for level in range(1, r + 1):
        l = level - 1
        z_c = z_c_all[l]
        if flavor == "wz":
            pool = info_q[l]
        else:
            # message-eligible frozen slots: frozen by threshold (posterior
            # indifferent), not by the midband cap
            eligible = np.setdiff1d(frozen_q[l], capped_mask[l])
            pool = np.sort(np.concatenate([info_q[l], eligible]))
        reliable = pool[z_c[pool] <= tau_cc]
        n_c = len(reliable)
        if backoff_c > 0:
            n_c = min(n_c, int(round(max(mis_c[l] - backoff_c, 0.0) * n)))
        order = reliable[np.lexsort((reliable, z_c[reliable]))]
        ic = np.sort(order[:n_c])
        ic_list.append(ic)
        if flavor == "wz":
            msg_list.append(np.array([], dtype=int))
            tp_list.append(np.array([], dtype=int))
            pre_list.append(frozen_q[l])
            # channel-rule bookkeeping sets
            d_i = np.setdiff1d(info_q[l], ic)
            extra_f = d_i[z_c[d_i] >= 0.5]
            fc = np.sort(np.concatenate([frozen_q[l], extra_f]))
            sc = np.setdiff1d(np.arange(n), np.concatenate([fc, ic]))
            fc_list.append(fc)
            sc_list.append(sc)
        else:
            msg = np.intersect1d(ic, frozen_q[l])
            tp = np.setdiff1d(info_q[l], ic)
            msg_list.append(msg)
            tp_list.append(tp)
            pre_list.append(np.setdiff1d(frozen_q[l], msg))
            fc = np.setdiff1d(frozen_q[l], msg)
            sc = np.setdiff1d(np.arange(n), np.concatenate([fc, ic]))
            fc_list.append(fc)
            sc_list.append(sc)
    # pre-shared values: restriction of the quantization frozen values
    pre_vals = []
    for l in range(r):
        sel = np.isin(frozen_q[l], pre_list[l])
        pre_vals.append(fvals_q[l][sel])
    spec_q = CodeSpec(
        n=n, params=params_q, chain=chain,
        frozen=frozen_q, info=info_q, shaping=shaping_q, frozen_values=fvals_q,
        seed=seed,
        meta=dict(
            role="quantization", flavor=flavor, trials=trials,
            backoff_q=backoff_q, tau_s=tau_s, tau_f=tau_f,
            mi_levels=[float(v) for v in mis_q],
        ),
    )
    spec_c = CodeSpec(
        n=n, params=params_c, chain=chain,
        frozen=fc_list, info=ic_list, shaping=sc_list,
        frozen_values=[np.zeros(len(f), dtype=np.uint8) for f in fc_list],
        seed=seed,
        meta=dict(
            role="channel", flavor=flavor, trials=trials,
            backoff_c=backoff_c, check_level_nesting=False,
            mi_levels=[float(v) for v in mis_c],
        ),
    )
    return NestedSpec(
        flavor=flavor,
        scheme_params={k: float(v) for k, v in vars(scheme).items()},
        spec_q=spec_q, spec_c=spec_c,
        sc_decode=ic_list, two_phase=tp_list, message=msg_list,
        preshared=pre_list, preshared_values=pre_vals,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Shared decoder
# ---------------------------------------------------------------------------

def _decode_levels(nested: NestedSpec, b: np.ndarray, received: dict | None = None):
    """SC decoding against the channel view.

    ``b`` is the (N, B) scaled observation.  ``received`` maps a 1-based
    level to (positions, bits(|pos|, B)) of in-band or out-of-band bits the
    decoder was given.  Returns (u_levels, a_hat).
    """
    model_q, model_c = nested.models()
    n, batch = b.shape
    ctx = np.zeros((n, batch), dtype=np.int64)
    u_levels = []
    for level in range(1, nested.r + 1):
        l = level - 1
        ev_post = model_c.posterior_evidence(level, ctx, b)
        ev_pri = np.ascontiguousarray(
            np.broadcast_to(model_q.prior_evidence(level, ctx), (n, batch, 2)), dtype=float
        )
        known = np.zeros((n, batch), dtype=np.uint8)
        known_mask = np.zeros(n, dtype=bool)
        pre = nested.preshared[l]
        known[pre] = nested.preshared_values[l][:, None]
        known_mask[pre] = True
        if received and level in received:
            pos, bits = received[level]
            pos = np.asarray(pos, dtype=int)
            known[pos] = bits
            known_mask[pos] = True
        sc_mask = np.zeros(n, dtype=bool)
        sc_mask[nested.sc_decode[l]] = True
        shaping_mask = np.zeros(n, dtype=bool)
        shaping_mask[nested.spec_q.shaping[l]] = True
        post = ScProcess(ev_post)
        pri = ScProcess(ev_pri)
        u = np.empty((n, batch), dtype=np.uint8)
        for i in range(n):
            p_post = post.prob(i)
            p_pri = pri.prob(i)
            if known_mask[i]:
                bits = known[i]
            elif shaping_mask[i]:
                bits = (p_pri[:, 1] > p_pri[:, 0]).astype(np.uint8)
            elif sc_mask[i]:
                bits = (p_post[:, 1] > p_post[:, 0]).astype(np.uint8)
            else:
                # position the scheme gave us no handle on: MAP prior
                bits = (p_pri[:, 1] > p_pri[:, 0]).astype(np.uint8)
            u[i] = bits
            post.commit(i, bits)
            pri.commit(i, bits)
        x_bits = polar_transform(u)
        ctx += x_bits.astype(np.int64) << (level - 1)
        u_levels.append(u)
    coords = nested.spec_q.chain.fold_labels(ctx)
    return u_levels, coords * nested.spec_q.chain.eta


# ---------------------------------------------------------------------------
# Side-information coding (wz)
# ---------------------------------------------------------------------------

def wz_encode(nested: NestedSpec, x: np.ndarray, rng: np.random.Generator):
    """Quantize (B, N) source blocks; returns (dI bits per level, u_levels, a).

    The transmitted payload is the per-level restriction of u to dI.
    """
    if nested.flavor != "wz":
        raise DomainError("nested spec is not a side-information pair")
    u_levels, a, _ = encode_full(nested.spec_q, x, rng)
    payload = []
    for level in range(1, nested.r + 1):
        d_i = nested.level_sets(level)["dI"]
        payload.append((d_i, u_levels[level - 1][d_i]))
    return payload, u_levels, a


def wz_decode(nested: NestedSpec, payload: list, y: np.ndarray):
    """Reconstruct from received dI bits and (B, N) side information."""
    if nested.flavor != "wz":
        raise DomainError("nested spec is not a side-information pair")
    sp = nested.scheme_params
    b = (sp["alpha_q"] / sp["alpha_c"]) * np.ascontiguousarray(np.asarray(y, dtype=float).T)
    received = {level: payload[level - 1] for level in range(1, nested.r + 1)}
    u_levels, a_hat = _decode_levels(nested, b, received)
    x_check = a_hat + sp["gamma"] * (b - a_hat)
    return x_check.T, u_levels, a_hat


def wz_simulate(nested: NestedSpec, n_blocks: int, seed: int, batch: int = 64) -> dict:
    """End-to-end side-information run; distortion, rate, block errors."""
    sp = nested.scheme_params
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    )
    dists = []
    block_bad = []
    done = 0
    while done < n_blocks:
        m = min(batch, n_blocks - done)
        y = rng.normal(scale=math.sqrt(sp["sigma_y2"]), size=(m, nested.n))
        z = rng.normal(scale=math.sqrt(sp["sigma_z2"]), size=(m, nested.n))
        x = y + z
        payload, u_enc, _ = wz_encode(nested, x, rng)
        x_check, u_dec, _ = wz_decode(nested, payload, y)
        bad = np.zeros(m, dtype=bool)
        for l in range(nested.r):
            bad |= np.any(u_enc[l] != u_dec[l], axis=0)
        block_bad.extend(bad.tolist())
        dists.extend(((x - x_check) ** 2).mean(axis=1).tolist())
        done += m
    block_bad = np.asarray(block_bad)
    d = np.asarray(dists)
    k = max(int(0.01 * len(d)), 1) if len(d) >= 100 else 0
    trimmed = float(np.sort(d)[:-k].mean()) if k else float(d.mean())
    return dict(
        n_blocks=n_blocks,
        distortion=float(d.mean()),
        distortion_trimmed=trimmed,
        rate=nested.transmitted_rate(),
        rate_bound=sp["rate_bound"],
        block_errors=int(block_bad.sum()),
        block_error_rate=float(block_bad.mean()),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Interference presubtraction (gp)
# ---------------------------------------------------------------------------

def gp_encode(nested: NestedSpec, s: np.ndarray, message: list, rng: np.random.Generator):
    """Encode message bits against (B, N) interference blocks.

    ``message`` holds one (|message_l|, B) bit array per level.  Returns
    (x_transmit (B, N), two-phase payload, u_levels).
    """
    if nested.flavor != "gp":
        raise DomainError("nested spec is not a presubtraction pair")
    sp = nested.scheme_params
    s = np.asarray(s, dtype=float)
    t = sp["rho"] * s
    overrides = {}
    for level in range(1, nested.r + 1):
        msg = nested.message[level - 1]
        if len(msg):
            overrides[level] = (msg, message[level - 1])
    u_levels, a, _ = encode_full(nested.spec_q, t, rng, frozen_overrides=overrides)
    x = a / sp["alpha_q"] - np.ascontiguousarray(t.T)
    payload = [
        (nested.two_phase[l], u_levels[l][nested.two_phase[l]]) for l in range(nested.r)
    ]
    return x.T, payload, u_levels


def gp_decode(nested: NestedSpec, y: np.ndarray, payload: list):
    """Recover message bits from the (B, N) channel output."""
    if nested.flavor != "gp":
        raise DomainError("nested spec is not a presubtraction pair")
    sp = nested.scheme_params
    b = (sp["alpha_q"] / sp["alpha_c"]) * sp["rho"] * np.ascontiguousarray(
        np.asarray(y, dtype=float).T
    )
    received = {
        level: payload[level - 1]
        for level in range(1, nested.r + 1)
        if len(payload[level - 1][0])
    }
    u_levels, _ = _decode_levels(nested, b, received)
    message = [u_levels[l][nested.message[l]] for l in range(nested.r)]
    return message, u_levels


def gp_simulate(nested: NestedSpec, n_blocks: int, seed: int, batch: int = 64,
                withhold_two_phase: bool = False) -> dict:
    """End-to-end presubtraction run; power, message errors, rates."""
    sp = nested.scheme_params
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    )
    powers = []
    msg_errors = 0
    done = 0
    block_bad = []
    while done < n_blocks:
        m = min(batch, n_blocks - done)
        s = rng.normal(scale=math.sqrt(sp["sigma_i2"]), size=(m, nested.n))
        z = rng.normal(scale=math.sqrt(sp["sigma_z2"]), size=(m, nested.n))
        message = [
            rng.integers(0, 2, size=(len(nested.message[l]), m), dtype=np.uint8)
            for l in range(nested.r)
        ]
        x, payload, _ = gp_encode(nested, s, message, rng)
        powers.extend((x**2).mean(axis=1).tolist())
        y = x + s + z
        if withhold_two_phase:
            payload = [(np.array([], dtype=int), np.zeros((0, m), dtype=np.uint8))
                       for _ in range(nested.r)]
        decoded, _ = gp_decode(nested, y, payload)
        bad = np.zeros(m, dtype=bool)
        for l in range(nested.r):
            if len(nested.message[l]):
                bad |= np.any(decoded[l] != message[l], axis=0)
        block_bad.extend(bad.tolist())
        done += m
    bad = np.asarray(block_bad)
    return dict(
        n_blocks=n_blocks,
        power=float(np.mean(powers)),
        power_constraint=sp["power"],
        message_rate=nested.transmitted_rate(),
        two_phase_rate=nested.two_phase_rate(),
        capacity=sp["capacity"],
        block_errors=int(bad.sum()),
        block_error_rate=float(bad.mean()),
        seed=seed,
    )

"""Ground-truth engines: exhaustive enumeration, Ising transfer DP, annealed SMC.

These exist to supply reference values for tests and bias measurement; all of
them are pure functions of their inputs (the annealed sampler is deterministic
given its seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import TooLargeForEnumeration, TwistSmcError
from .graph import identity_order
from .twist import ENUMERATION_GUARD, _dense_log_product


class OracleError(TwistSmcError):
    pass


class WidthTooLarge(OracleError):
    pass


@dataclass
class OracleResult:
    log_Z: float
    method: str
    marginals: list | None = None


def enumerate_logZ(graph, want_marginals=False):
    """log sum over all joint assignments of the factor product."""
    if not graph.is_discrete():
        raise OracleError("enumeration needs discrete variables")
    n_states = graph.joint_size()
    if n_states > ENUMERATION_GUARD:
        raise TooLargeForEnumeration(n_states, ENUMERATION_GUARD)
    order = identity_order(graph.num_variables)
    tensor = _dense_log_product(graph, order, range(len(graph.factors)))
    log_z = float(logsumexp(tensor))
    marginals = None
    if want_marginals:
        T = graph.num_variables
        marginals = []
        for v in range(T):
            axes = tuple(a for a in range(T) if a != v)
            marginals.append(np.exp(logsumexp(tensor, axis=axes) - log_z))
    return OracleResult(log_Z=log_z, method="enumeration", marginals=marginals)


def _row_spins(width):
    """(2^width, width) matrix of spin rows in {-1, +1}, code order."""
    codes = np.arange(2**width)
    bits = (codes[:, None] >> np.arange(width - 1, -1, -1)) & 1
    return 2.0 * bits - 1.0


def ising_logZ_dp(width, height, J, H, periodic=False):
    """Partition function of a height x width Ising lattice by row-transfer DP.

    Sites are row-major; H is the flat per-site field.  The DP scans rows with
    a 2^width table of row states, absorbing horizontal bonds (with a wrap
    bond per row when periodic and width >= 3), vertical bonds, and fields.
    Vertical wrap bonds are handled by an outer conditioning on the first
    row's configuration.  Accumulation is in log space with per-row
    max-subtraction via logsumexp.
    """
    if width > 20:
        raise WidthTooLarge(f"width {width} exceeds the 2^20 state guard")
    H = np.asarray(H, dtype=float).reshape(height, width)
    if periodic and (width < 3 or height < 3):
        raise OracleError("periodic lattice needs both dimensions >= 3")

    spins = _row_spins(width)  # (S, width)
    S = spins.shape[0]
    horiz = J * np.sum(spins[:, :-1] * spins[:, 1:], axis=1)
    if periodic:
        horiz = horiz + J * spins[:, -1] * spins[:, 0]
    field_rows = spins @ H.T  # (S, height): field term of state s in row r
    vert = J * (spins @ spins.T)  # (S, S) vertical bond energy between rows

    if height == 1:
        return OracleResult(
            log_Z=float(logsumexp(horiz + field_rows[:, 0])), method="transfer-dp"
        )

    if not periodic:
        f = horiz + field_rows[:, 0]
        for r in range(1, height):
            f = logsumexp(f[:, None] + vert, axis=0) + horiz + field_rows[:, r]
        return OracleResult(log_Z=float(logsumexp(f)), method="transfer-dp")

    # Periodic: condition on the first row state s0 (batched over chunks).
    total_parts = []
    chunk = max(1, min(S, (1 << 22) // (S * S) or 1))
    for lo in range(0, S, chunk):
        hi = min(S, lo + chunk)
        f = np.full((hi - lo, S), -np.inf)
        f[np.arange(hi - lo), np.arange(lo, hi)] = (
            horiz[lo:hi] + field_rows[lo:hi, 0]
        )
        for r in range(1, height):
            f = (
                logsumexp(f[:, :, None] + vert[None, :, :], axis=1)
                + horiz[None, :]
                + field_rows[None, :, r]
            )
        # close the torus: bond between the last row state and s0
        f = f + vert[:, lo:hi].T
        total_parts.append(logsumexp(f, axis=1))
    return OracleResult(
        log_Z=float(logsumexp(np.concatenate(total_parts))), method="transfer-dp"
    )


@dataclass
class AnnealConfig:
    ladder: np.ndarray
    n_particles: int
    gibbs_sweeps: int = 1
    seed: int = 0
    resampling_threshold: float = 0.5

    def __post_init__(self):
        lad = np.asarray(self.ladder, dtype=float)
        if lad[0] != 0.0 or lad[-1] != 1.0 or np.any(np.diff(lad) <= 0):
            raise OracleError("ladder must increase strictly from 0 to 1")
        self.ladder = lad


def linear_ladder(m):
    return np.linspace(0.0, 1.0, m + 1)


def _log_factor_sum(graph, states):
    out = np.zeros(states.shape[0])
    for f in graph.factors:
        out = out + f.log_value(states[:, list(f.scope)])
    return out


def _gibbs_sweep(graph, states, beta, rng, site_factors):
    for v in range(graph.num_variables):
        K = graph.domains[v]
        logits = np.zeros((states.shape[0], K))
        for k in range(K):
            states[:, v] = k
            acc = np.zeros(states.shape[0])
            for j in site_factors[v]:
                f = graph.factors[j]
                acc += f.log_value(states[:, list(f.scope)])
            logits[:, k] = beta * acc
        probs = np.exp(logits - logsumexp(logits, axis=1)[:, None])
        u = rng.random(states.shape[0])
        states[:, v] = np.minimum(
            np.sum(u[:, None] >= np.cumsum(probs, axis=1), axis=1), K - 1
        )
    return states


def annealed_smc_logZ(graph, cfg):
    """Annealed SMC over gamma^beta with a uniform base and Gibbs rejuvenation.

    The base distribution is uniform over the discrete joint space, so the
    temperature-m increment is gamma(x)^(beta_m - beta_{m-1}) in closed form
    and the estimate is unbiased for Z.
    """
    if not graph.is_discrete():
        raise OracleError("annealed sampler needs discrete variables")
    rng = np.random.default_rng(cfg.seed)
    T = graph.num_variables
    N = cfg.n_particles
    site_factors = [graph.neighbors_of_variable(v) for v in range(T)]

    states = np.stack(
        [rng.integers(0, graph.domains[v], size=N) for v in range(T)], axis=1
    )
    log_volume = float(np.sum(np.log([graph.domains[v] for v in range(T)])))
    log_w = np.full(N, -np.log(N))
    log_z = log_volume

    for m in range(1, len(cfg.ladder)):
        d_beta = cfg.ladder[m] - cfg.ladder[m - 1]
        inc = d_beta * _log_factor_sum(graph, states)
        log_z += float(logsumexp(log_w + inc))
        log_w = log_w + inc
        log_w = log_w - logsumexp(log_w)
        ess_val = np.exp(-logsumexp(2.0 * log_w))
        if ess_val < cfg.resampling_threshold * N:
            cum = np.cumsum(np.exp(log_w))
            u = (np.arange(N) + rng.random()) / N
            idx = np.minimum(np.searchsorted(cum, u, side="right"), N - 1)
            states = states[idx]
            log_w = np.full(N, -np.log(N))
        for _ in range(cfg.gibbs_sweeps):
            states = _gibbs_sweep(graph, states, cfg.ladder[m], rng, site_factors)
    return OracleResult(log_Z=log_z, method="annealed-smc")

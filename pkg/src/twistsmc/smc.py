"""Generic sequential Monte Carlo engine with adaptive resampling.

The engine runs the classic SMC recursion over a ``SequentialModel`` (a
sequence of unnormalized targets gamma_t on growing prefixes) and a
``Proposal``.  All weight arithmetic is in log space.  Resampling weights
nu_{t-1} follow the standard adaptive rule: when the effective sample size of
the previous normalized weights drops strictly below rho*N the particles are
resampled with nu = w (optionally sharpened by a proposal-supplied lookahead
adjustment); otherwise nu is uniform and ancestry is the identity, which is
exactly the "resampling off" branch with a low-variance scheme.

Unnormalized weights are always computed as

    wt_t^i = omega_t(x_{1:t}^i) * w_{t-1}^{a_i} / nu_{t-1}^{a_i},

which keeps prod_t mean_i(wt_t^i) an unbiased estimate of the final
normalizing constant under any nu and any unbiased resampling scheme.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import TwistSmcError


def logsumexp(x):
    """Max-subtracted log-sum-exp of a 1-D array; fast path for hot loops."""
    m = np.max(x)
    if not np.isfinite(m):
        return float(m) if m < 0 else m  # all -inf, or propagate inf/nan
    return float(m + np.log(np.sum(np.exp(x - m))))


def logsumexp_rows(x):
    """Row-wise log-sum-exp of a 2-D array, safe for all minus-infinity rows."""
    m = np.max(x, axis=1)
    finite = np.isfinite(m)
    shifted = np.exp(x - np.where(finite, m, 0.0)[:, None])
    with np.errstate(divide="ignore"):
        out = np.where(finite, m + np.log(np.sum(shifted, axis=1)), m)
    return out


class SmcError(TwistSmcError):
    pass


class AllWeightsZero(SmcError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"all particle weights are zero at step {step}")


class NonFiniteWeight(SmcError):
    def __init__(self, step, particle):
        self.step = step
        self.particle = particle
        super().__init__(f"non-finite weight at step {step}, particle {particle}")


class ZeroNormalizer(SmcError):
    def __init__(self, step, particle):
        self.step = step
        self.particle = particle
        super().__init__(
            f"twisted target gives zero mass to every extension at step {step},"
            f" particle {particle}"
        )


class IndexOutOfRange(SmcError):
    pass


class SequentialModel:
    """Sequence of unnormalized targets gamma_t over prefixes x_{0:t}, 0-based steps.

    ``log_gamma(t, paths)`` evaluates log gamma_t for a batch: ``paths`` has
    shape (N, t+1) with column s holding the step-s value.  ``step_domain(t)``
    returns the cardinality of step t's domain, or None for a continuous
    scalar.  Subclasses may override ``log_gamma_ratio`` with a cheaper
    incremental form; the default takes the difference of full evaluations.
    """

    T = 0

    def step_domain(self, t):
        raise NotImplementedError

    def log_gamma(self, t, paths):
        raise NotImplementedError

    def log_gamma_ratio(self, t, paths):
        """log(gamma_t / gamma_{t-1}) on (N, t+1) paths; equals log_gamma at t=0."""
        if t == 0:
            return self.log_gamma(0, paths)
        return self.log_gamma(t, paths) - self.log_gamma(t - 1, paths[:, :t])


class Proposal:
    """Proposal q_t(x_t | x_{0:t-1}) with batched sample and log-density.

    ``log_resampling_adjustment`` (optional) returns per-particle log
    lookahead multipliers; the engine uses nu proportional to
    w_{t-1} * exp(adjustment) when a resampling step fires.
    """

    def sample(self, t, paths_prev, rng):
        raise NotImplementedError

    def log_density(self, t, x_t, paths_prev):
        raise NotImplementedError

    log_resampling_adjustment = None


@dataclass
class SmcConfig:
    n_particles: int
    resampling: str = "systematic"
    ess_threshold: float = 0.5
    seed: int = 0
    path_storage: str = "dense"

    def __post_init__(self):
        if self.n_particles < 1:
            raise SmcError("n_particles must be >= 1")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise SmcError("ess_threshold must lie in [0, 1]")
        if self.resampling not in ("multinomial", "stratified", "systematic"):
            raise SmcError(f"unknown resampling scheme {self.resampling!r}")
        if self.path_storage not in ("dense", "tree"):
            raise SmcError(f"unknown path storage {self.path_storage!r}")


@dataclass
class ParticleSystem:
    """Full record of one SMC run.

    ``positions[t]`` are the step-t values of the N step-t particles;
    ``ancestry[t]`` maps them to their parents at step t-1 (identity at t=0
    and at steps without resampling).  ``log_nu`` stores the resampling
    probabilities only for steps where resampling fired.  With dense path
    storage ``dense_paths`` holds the ancestor-resolved (N, T) matrix; with
    tree storage paths are reconstructed from positions and ancestry on
    demand, which shares coalesced prefixes.
    """

    n_particles: int
    positions: list
    log_weights_unnorm: np.ndarray
    log_weights_norm: np.ndarray
    weights_norm: np.ndarray
    ancestry: np.ndarray
    log_increments: np.ndarray
    resampled_flags: np.ndarray
    ess_trace: np.ndarray
    max_log_weight: np.ndarray
    log_nu: dict
    dense_paths: np.ndarray | None = None

    @property
    def num_steps(self):
        return len(self.positions)

    def final_paths(self):
        if self.dense_paths is not None:
            return self.dense_paths
        T, N = self.num_steps, self.n_particles
        out = np.empty((N, T), dtype=self.positions[-1].dtype)
        idx = np.arange(N)
        for t in range(T - 1, -1, -1):
            out[:, t] = self.positions[t][idx]
            idx = self.ancestry[t][idx]
        return out


@dataclass
class SmcResult:
    log_Z_hat: float
    particles: ParticleSystem
    ess_trace: np.ndarray
    resampled_flags: np.ndarray
    max_log_weight: np.ndarray
    config: SmcConfig

    def to_json(self, include_paths=False):
        doc = {
            "log_Z_hat": self.log_Z_hat,
            "ess_trace": [float(e) for e in self.ess_trace],
            "resampled_flags": [bool(b) for b in self.resampled_flags],
            "seed": self.config.seed,
            "config": {
                "n_particles": self.config.n_particles,
                "resampling": self.config.resampling,
                "ess_threshold": self.config.ess_threshold,
                "path_storage": self.config.path_storage,
            },
        }
        if include_paths:
            doc["paths"] = self.particles.final_paths().tolist()
        return json.dumps(doc, sort_keys=True)


def ess(weights):
    """Effective sample size 1 / sum(w_i^2) of a normalized weight vector."""
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-8:
        raise SmcError("weights must be normalized")
    return 1.0 / float(np.sum(w * w))


def resample(nu, scheme, n_out, rng):
    """Draw n_out ancestor indices with probabilities nu.

    All schemes are unbiased: E[#{i : a_i = j}] = n_out * nu_j.  Cumulative
    sums run left to right in particle-index order; stratified uses one
    uniform per stratum and systematic a single shared uniform.
    """
    nu = np.asarray(nu, dtype=float)
    cum = np.cumsum(nu)
    if scheme == "multinomial":
        u = rng.random(n_out)
    elif scheme == "stratified":
        u = (np.arange(n_out) + rng.random(n_out)) / n_out
    elif scheme == "systematic":
        u = (np.arange(n_out) + rng.random()) / n_out
    else:
        raise SmcError(f"unknown resampling scheme {scheme!r}")
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, len(nu) - 1)


def log_normalizing_constant(log_unnorm_weights):
    """Sum of per-step log mean unnormalized weights, via log-sum-exp."""
    total = 0.0
    for lw in log_unnorm_weights:
        lw = np.asarray(lw, dtype=float)
        total += logsumexp(lw) - np.log(lw.size)
    return float(total)


def reconstruct_trajectory(ps, i):
    """Follow ancestry backward from final-step particle i; O(T)."""
    if not 0 <= i < ps.n_particles:
        raise IndexOutOfRange(f"particle index {i} outside [0, {ps.n_particles})")
    T = ps.num_steps
    out = np.empty(T, dtype=ps.positions[-1].dtype)
    idx = i
    for t in range(T - 1, -1, -1):
        out[t] = ps.positions[t][idx]
        idx = int(ps.ancestry[t][idx])
    return out


def _check_weights(log_wt, t):
    if np.any(np.isnan(log_wt)) or np.any(np.isposinf(log_wt)):
        bad = int(np.flatnonzero(~(np.isfinite(log_wt) | np.isneginf(log_wt)))[0])
        raise NonFiniteWeight(t, bad)
    if np.all(np.isneginf(log_wt)):
        raise AllWeightsZero(t)


def _empty_paths(model, n):
    d = model.step_domain(0)
    dtype = np.int64 if d is not None else np.float64
    return np.empty((n, 0), dtype=dtype)


def run_smc(model, proposal, cfg, _rng=None):
    """Run the SMC recursion over the model's steps and return an SmcResult.

    Reproducible from cfg.seed alone; ``_rng`` is a test hook that overrides
    the generator.
    """
    N, T = cfg.n_particles, model.T
    rng = _rng if _rng is not None else np.random.default_rng(cfg.seed)
    log_n = np.log(N)

    positions, log_wt_all, log_w_all, w_all = [], [], [], []
    ancestry = np.empty((T, N), dtype=np.int64)
    increments = np.empty(T)
    flags = np.zeros(T, dtype=bool)
    ess_trace = np.empty(T)
    max_lw = np.empty(T)
    log_nu_store = {}

    paths = _empty_paths(model, N)
    log_w = None  # normalized log weights of the previous step

    for t in range(T):
        if t == 0:
            ancestry[0] = np.arange(N)
            x = proposal.sample(0, paths, rng)
            log_q = proposal.log_density(0, x, paths)
            paths = np.concatenate([paths, x[:, None]], axis=1)
            log_wt = model.log_gamma_ratio(0, paths) - log_q
        else:
            prev_ess = np.exp(-logsumexp(2.0 * log_w))
            if prev_ess < cfg.ess_threshold * N:
                flags[t] = True
                log_nu = log_w.copy()
                if proposal.log_resampling_adjustment is not None:
                    log_nu = log_nu + proposal.log_resampling_adjustment(t, paths)
                log_nu -= logsumexp(log_nu)
                log_nu_store[t] = log_nu
                anc = resample(np.exp(log_nu), cfg.resampling, N, rng)
            else:
                # nu uniform: stratified/systematic draws reduce to identity
                # ancestry, so no randomness is consumed on this branch.
                anc = np.arange(N)
                log_nu = None
            ancestry[t] = anc
            paths = paths[anc]
            carried = (log_w[anc] - log_nu[anc]) if log_nu is not None else (log_w[anc] + log_n)
            x = proposal.sample(t, paths, rng)
            log_q = proposal.log_density(t, x, paths)
            paths = np.concatenate([paths, x[:, None]], axis=1)
            log_wt = (model.log_gamma_ratio(t, paths) - log_q) + carried

        _check_weights(log_wt, t)
        norm = logsumexp(log_wt)
        log_w = log_wt - norm
        increments[t] = norm - log_n
        ess_trace[t] = np.exp(-logsumexp(2.0 * log_w))
        max_lw[t] = np.max(log_wt)
        positions.append(x)
        log_wt_all.append(log_wt)
        log_w_all.append(log_w)
        w_all.append(np.exp(log_w))

    ps = ParticleSystem(
        n_particles=N,
        positions=positions,
        log_weights_unnorm=np.asarray(log_wt_all),
        log_weights_norm=np.asarray(log_w_all),
        weights_norm=np.asarray(w_all),
        ancestry=ancestry,
        log_increments=increments,
        resampled_flags=flags,
        ess_trace=ess_trace,
        max_log_weight=max_lw,
        log_nu=log_nu_store,
        dense_paths=paths if cfg.path_storage == "dense" else None,
    )
    return SmcResult(
        log_Z_hat=float(increments.sum()),
        particles=ps,
        ess_trace=ess_trace,
        resampled_flags=flags,
        max_log_weight=max_lw,
        config=cfg,
    )


def run_sis(model, proposal, cfg, _rng=None):
    """Dedicated sequential importance sampling path (no resampling branch).

    Bit-identical to ``run_smc`` with ess_threshold=0 given the same seed;
    kept separate so the equivalence is checkable against straight-line code.
    """
    N, T = cfg.n_particles, model.T
    rng = _rng if _rng is not None else np.random.default_rng(cfg.seed)
    log_n = np.log(N)
    positions, log_wt_all, log_w_all, w_all = [], [], [], []
    increments = np.empty(T)
    ess_trace = np.empty(T)
    max_lw = np.empty(T)

    paths = _empty_paths(model, N)
    log_w = None
    for t in range(T):
        x = proposal.sample(t, paths, rng)
        log_q = proposal.log_density(t, x, paths)
        paths = np.concatenate([paths, x[:, None]], axis=1)
        log_wt = model.log_gamma_ratio(t, paths) - log_q
        if t > 0:
            log_wt = log_wt + (log_w + log_n)
        _check_weights(log_wt, t)
        norm = logsumexp(log_wt)
        log_w = log_wt - norm
        increments[t] = norm - log_n
        ess_trace[t] = np.exp(-logsumexp(2.0 * log_w))
        max_lw[t] = np.max(log_wt)
        positions.append(x)
        log_wt_all.append(log_wt)
        log_w_all.append(log_w)
        w_all.append(np.exp(log_w))

    ancestry = np.tile(np.arange(N), (T, 1))
    ps = ParticleSystem(
        n_particles=N,
        positions=positions,
        log_weights_unnorm=np.asarray(log_wt_all),
        log_weights_norm=np.asarray(log_w_all),
        weights_norm=np.asarray(w_all),
        ancestry=ancestry,
        log_increments=increments,
        resampled_flags=np.zeros(T, dtype=bool),
        ess_trace=ess_trace,
        max_log_weight=max_lw,
        log_nu={},
        dense_paths=paths if cfg.path_storage == "dense" else None,
    )
    return SmcResult(
        log_Z_hat=float(increments.sum()),
        particles=ps,
        ess_trace=ess_trace,
        resampled_flags=ps.resampled_flags,
        max_log_weight=max_lw,
        config=cfg,
    )

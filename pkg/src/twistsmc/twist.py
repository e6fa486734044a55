"""Twisting functions, twisted sequential models, full adaptation, and
the epsilon-regularized bounded-weight construction.

A twisting function psi_t multiplies the plain prefix target (the product of
all factors whose variables are fully placed by step t) by a positive
look-ahead term; the final step is never twisted, so the last target always
equals the full factor product.  The optimal psi_t marginalizes every factor
outside the prefix and is computed here by exhaustive summation for small
discrete models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import TooLargeForEnumeration, TwistSmcError
from .smc import Proposal, SequentialModel, ZeroNormalizer, logsumexp_rows

ENUMERATION_GUARD = 2**24


class TwistError(TwistSmcError):
    pass


class InvalidEpsilon(TwistError):
    pass


class UncertifiedSafeguard(TwistError):
    pass


class TwistingSet:
    """Positive twisting functions psi_0 .. psi_{T-2} (0-based steps).

    ``log_psi(t, paths)`` evaluates log psi_t on (N, t+1) prefix paths.  The
    final step's twist is identically one and is handled by TwistedModel.
    Finiteness of the twisted-target integrals is the responsibility of each
    registered constructor (automatic for finite discrete domains).
    """

    def log_psi(self, t, paths):
        raise NotImplementedError


class UnitTwisting(TwistingSet):
    """psi_t = 1: the twisted model reduces to the plain sequential decomposition."""

    def log_psi(self, t, paths):
        return np.zeros(paths.shape[0])


class CallableTwisting(TwistingSet):
    def __init__(self, fns):
        self.fns = list(fns)

    def log_psi(self, t, paths):
        return np.asarray(self.fns[t](paths), dtype=float)


class ScaledTwisting(TwistingSet):
    """c_t * psi_t for positive per-step constants; used to test scale invariance."""

    def __init__(self, base, log_consts):
        self.base = base
        self.log_consts = list(log_consts)

    def log_psi(self, t, paths):
        return self.base.log_psi(t, paths) + self.log_consts[t]


class TemperedTwisting(TwistingSet):
    """psi_t^power, a deliberately rough twist for robustness experiments."""

    def __init__(self, base, power):
        self.base = base
        self.power = float(power)

    def log_psi(self, t, paths):
        return self.power * self.base.log_psi(t, paths)


class EnumeratedTwisting(TwistingSet):
    """Optimal twisting stored as dense log tables over prefix assignments."""

    def __init__(self, log_tables):
        self.log_tables = log_tables

    def log_psi(self, t, paths):
        tab = self.log_tables[t]
        return tab[tuple(paths[:, s] for s in range(paths.shape[1]))]


def _dense_log_product(graph, order, factor_indices):
    """Log of the factor product as a dense tensor over order-position axes."""
    shape = tuple(int(graph.domains[v]) for v in order)
    pos = order.positions()
    out = np.zeros(shape)
    T = len(shape)
    for j in factor_indices:
        f = graph.factors[j]
        axes = [int(pos[v]) for v in f.scope]
        grids = np.meshgrid(
            *[np.arange(shape[a]) for a in axes], indexing="ij", copy=False
        )
        cols = np.stack([g.reshape(-1) for g in grids], axis=1)
        block = f.log_value(cols).reshape([shape[a] for a in axes])
        sort_idx = sorted(range(len(axes)), key=axes.__getitem__)
        block = np.transpose(block, sort_idx)
        slicer = [np.newaxis] * T
        for a in axes:
            slicer[a] = slice(None)
        out = out + block[tuple(slicer)]
    return out


def optimal_twisting_enumerate(graph, order, partition):
    """psi*_t by exhaustive summation of all factors outside the step-t prefix.

    Requires every variable discrete and a joint state space within the
    enumeration guard.
    """
    if not graph.is_discrete():
        raise TwistError("optimal twisting enumeration needs discrete variables")
    n_states = graph.joint_size()
    if n_states > ENUMERATION_GUARD:
        raise TooLargeForEnumeration(n_states, ENUMERATION_GUARD)
    T = graph.num_variables
    all_factors = set(range(len(graph.factors)))
    tables = []
    for t in range(T - 1):
        outside = sorted(all_factors - set(partition.cumulative(t)))
        tensor = _dense_log_product(graph, order, outside)
        tables.append(logsumexp(tensor, axis=tuple(range(t + 1, T))))
    return EnumeratedTwisting(tables)


class TwistedModel(SequentialModel):
    """Sequential model with log targets sum_{j in cumulative F_t} log phi_j + log psi_t.

    Step t samples the variable at order position t; factor scopes are mapped
    to order positions once at construction.  The final step uses psi = 1, so
    the last target equals the full factor product.
    """

    def __init__(self, graph, order, partition, twisting):
        self.graph = graph
        self.order = order
        self.partition = partition
        self.twisting = twisting
        self.T = graph.num_variables
        pos = order.positions()
        self._cols = [
            np.array([pos[v] for v in f.scope], dtype=int) for f in graph.factors
        ]

    def step_domain(self, t):
        d = self.graph.domains[self.order[t]]
        return None if d is None else int(d)

    def _factor_sum(self, indices, paths):
        out = np.zeros(paths.shape[0])
        for j in indices:
            out = out + self.graph.factors[j].log_value(paths[:, self._cols[j]])
        return out

    def log_base(self, t, paths):
        return self._factor_sum(self.partition.cumulative(t), paths)

    def log_gamma(self, t, paths):
        out = self.log_base(t, paths)
        if t < self.T - 1:
            out = out + self.twisting.log_psi(t, paths)
        return out

    def log_gamma_ratio(self, t, paths):
        out = self._factor_sum(self.partition.steps[t], paths)
        if t < self.T - 1:
            out = out + self.twisting.log_psi(t, paths)
        if t > 0 and t - 1 < self.T - 1:
            out = out - self.twisting.log_psi(t - 1, paths[:, :t])
        return out


def make_twisted_model(graph, order, partition, twisting):
    return TwistedModel(graph, order, partition, twisting)


class FullyAdaptedDiscreteProposal(Proposal):
    """Locally optimal proposal on finite domains, with the one-step lookahead
    resampling adjustment that completes full adaptation.

    q_t(k | prefix) is the normalized one-step target ratio; the adjustment
    returns the log of the ratio's sum over k, so resampling probabilities
    become w-weighted one-step sums.  The per-step ratio table is memoized on
    the prefix array object, which the engine passes unchanged to sample,
    log_density, and the weight computation within one step.
    """

    def __init__(self, model):
        self.model = model
        self._memo = (None, None, None)

    def _ratio_table(self, t, paths_prev):
        key_t, key_paths, table = self._memo
        if key_t == t and key_paths is paths_prev:
            return table
        n = paths_prev.shape[0]
        K = self.model.step_domain(t)
        if K is None:
            raise TwistError("full adaptation needs finite step domains")
        table = np.empty((n, K))
        for k in range(K):
            cand = np.concatenate(
                [paths_prev, np.full((n, 1), k, dtype=paths_prev.dtype)], axis=1
            )
            table[:, k] = self.model.log_gamma_ratio(t, cand)
        self._memo = (t, paths_prev, table)
        return table

    def sample(self, t, paths_prev, rng):
        table = self._ratio_table(t, paths_prev)
        norm = logsumexp_rows(table)
        if np.any(np.isneginf(norm)):
            raise ZeroNormalizer(t, int(np.flatnonzero(np.isneginf(norm))[0]))
        probs = np.exp(table - norm[:, None])
        cum = np.cumsum(probs, axis=1)
        u = rng.random(paths_prev.shape[0])
        idx = np.sum(u[:, None] >= cum, axis=1)
        return np.minimum(idx, table.shape[1] - 1).astype(np.int64)

    def log_density(self, t, x_t, paths_prev):
        table = self._ratio_table(t, paths_prev)
        norm = logsumexp_rows(table)
        return table[np.arange(len(x_t)), x_t] - norm

    def log_resampling_adjustment(self, t, paths_prev):
        table = self._ratio_table(t, paths_prev)
        return logsumexp_rows(table)


def fully_adapt_discrete(model):
    return FullyAdaptedDiscreteProposal(model)


class RegularizedTwisting(TwistingSet):
    """psi_t + epsilon, computed stably in log space."""

    def __init__(self, base, epsilon):
        self.base = base
        self.log_eps = np.log(epsilon) if epsilon > 0 else -np.inf

    def log_psi(self, t, paths):
        return np.logaddexp(self.base.log_psi(t, paths), self.log_eps)


class MixtureProposal(Proposal):
    """(1 - lambda_t) * twisted + lambda_t * safeguard with
    lambda_t = eps / (psi_{t-1} + eps), evaluated per particle on the prefix.
    """

    def __init__(self, twisted, safeguard, psi, epsilon):
        self.twisted = twisted
        self.safeguard = safeguard
        self.psi = psi
        self.epsilon = float(epsilon)

    def _log_lambda(self, t, paths_prev):
        n = paths_prev.shape[0]
        if self.epsilon == 0.0:
            return np.full(n, -np.inf), np.zeros(n)
        log_eps = np.log(self.epsilon)
        log_psi_prev = (
            np.zeros(n) if t == 0 else self.psi.log_psi(t - 1, paths_prev)
        )
        denom = np.logaddexp(log_psi_prev, log_eps)
        return log_eps - denom, log_psi_prev - denom

    def sample(self, t, paths_prev, rng):
        log_lam, _ = self._log_lambda(t, paths_prev)
        use_safe = np.log(rng.random(paths_prev.shape[0])) < log_lam
        x = self.twisted.sample(t, paths_prev, rng)
        if np.any(use_safe):
            x_safe = self.safeguard.sample(t, paths_prev, rng)
            x = np.where(use_safe, x_safe, x)
        return x

    def log_density(self, t, x_t, paths_prev):
        log_lam, log_one_minus = self._log_lambda(t, paths_prev)
        a = log_one_minus + self.twisted.log_density(t, x_t, paths_prev)
        b = log_lam + self.safeguard.log_density(t, x_t, paths_prev)
        return np.logaddexp(a, b)


@dataclass
class RegularizedTwist:
    """Bundle produced by ``regularize``: the shifted twisting set, the mixture
    proposal, the bounded weight function, and a SequentialModel wired so the
    generic engine consumes the weights directly.  The base twist, safeguard
    and certificate ride along; the per-step mixture weights lambda_t are
    exposed by the proposal.
    """

    twisting: TwistingSet
    proposal: Proposal
    log_weight: callable
    model: SequentialModel
    epsilon: float
    delta: float
    base: TwistingSet = None
    safeguard: Proposal = None


class _WeightDefinedModel(SequentialModel):
    """Model defined through an incremental weight function omega_t.

    log_gamma_ratio = log omega + log q reconstructs the target ratio the
    engine expects; full log_gamma accumulates ratios over the prefix.
    """

    def __init__(self, T, step_domains, log_weight, proposal):
        self.T = T
        self._domains = step_domains
        self._log_weight = log_weight
        self._proposal = proposal

    def step_domain(self, t):
        return self._domains(t)

    def log_gamma_ratio(self, t, paths):
        log_q = self._proposal.log_density(t, paths[:, -1], paths[:, :t])
        return self._log_weight(t, paths) + log_q

    def log_gamma(self, t, paths):
        out = np.zeros(paths.shape[0])
        for s in range(t + 1):
            out = out + self.log_gamma_ratio(s, paths[:, : s + 1])
        return out


def regularize(
    psi,
    epsilon,
    safeguard,
    delta,
    *,
    twisted_proposal,
    log_factor_prod,
    log_approx_factor_prod,
    T,
    step_domains=lambda t: None,
    certify_points=10_000,
    certify_seed=0,
):
    """Build the bounded-weight regularized sampler around a twisting set.

    ``twisted_proposal`` must be the approximately-optimal proposal matching
    ``psi`` (i.e. proportional to the approximate factor product times the
    psi ratio), and ``log_factor_prod(t, paths)`` / ``log_approx_factor_prod``
    evaluate the exact and approximate per-step factor products; both come
    from whatever approximation generated psi.  ``safeguard`` needs a
    certified delta > 0 with s_t >= delta * (exact factor product); the
    certificate is spot-checked on ``certify_points`` forward-sampled points.

    With epsilon = 0 the construction reduces to the plain twisted sampler
    whose weights are the exact/approximate factor-product ratio.  The final
    step keeps its twist at one (never 1 + epsilon) so the last target still
    equals the full factor product and the normalizing-constant estimate
    stays unbiased for Z itself.
    """
    if epsilon < 0:
        raise InvalidEpsilon(f"epsilon must be >= 0, got {epsilon}")
    if delta <= 0:
        raise UncertifiedSafeguard(f"delta must be > 0, got {delta}")

    if certify_points > 0:
        rng = np.random.default_rng(certify_seed)
        per_step = max(1, certify_points // max(T, 1))
        paths = np.empty((per_step, 0))
        for t in range(T):
            x = safeguard.sample(t, paths, rng)
            paths = np.concatenate([paths, x[:, None]], axis=1)
            gap = (
                safeguard.log_density(t, x, paths[:, :t])
                - np.log(delta)
                - log_factor_prod(t, paths)
            )
            if np.min(gap) < -1e-9:
                raise UncertifiedSafeguard(
                    f"safeguard certificate violated at step {t}: "
                    f"margin {np.min(gap):.3e}"
                )

    twisting = RegularizedTwisting(psi, epsilon)
    proposal = MixtureProposal(twisted_proposal, safeguard, psi, epsilon)
    log_eps = np.log(epsilon) if epsilon > 0 else -np.inf

    def log_weight(t, paths):
        n = paths.shape[0]
        lf = log_factor_prod(t, paths)
        lf_approx = log_approx_factor_prod(t, paths)
        if t < T - 1:
            log_psi_t = psi.log_psi(t, paths)
        else:
            log_psi_t = np.zeros(n)
        if t == T - 1:
            num = lf  # final twist stays at one
        else:
            num = lf + np.logaddexp(log_psi_t, log_eps)
        if t == 0:
            # the first-step mixture normalizer 1/(1 + eps) has no previous
            # twist to cancel against
            num = num + np.log1p(epsilon)
        log_s = safeguard.log_density(t, paths[:, -1], paths[:, :t])
        den = np.logaddexp(lf_approx + log_psi_t, log_eps + log_s)
        return num - den

    model = _WeightDefinedModel(T, step_domains, log_weight, proposal)
    return RegularizedTwist(
        twisting=twisting,
        proposal=proposal,
        log_weight=log_weight,
        model=model,
        epsilon=float(epsilon),
        delta=float(delta),
        base=psi,
        safeguard=safeguard,
    )

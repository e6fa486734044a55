"""Latent Gaussian Markov random fields with exponential-family observations.

Implements the Laplace approximation of the posterior (iterated second-order
expansion of the observation log-likelihoods), sequential Gaussian proposals
from a reversed-ordering Cholesky factor, the twisted and bootstrap
sequential models consumed by the SMC engine, and the CAR benchmark
construction.  Matrices are dense; the target sizes here (tens to hundreds of
sites) never justify a sparse backend, though orderings are still computed to
keep the sequential decompositions chain-like.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import gammaln

from .errors import TwistSmcError
from .smc import Proposal, SequentialModel
from .twist import TwistingSet, regularize

LOG_2PI = float(np.log(2.0 * np.pi))


class GmrfError(TwistSmcError):
    pass


class CholeskyFailure(GmrfError):
    pass


class NoConvergence(GmrfError):
    def __init__(self, max_iter, last):
        self.max_iter = max_iter
        self.last = last
        super().__init__(f"Laplace iteration did not converge in {max_iter} steps")


class AsymmetricAdjacency(GmrfError):
    pass


@dataclass(frozen=True)
class GaussianMRF:
    mean: np.ndarray
    precision: np.ndarray

    @property
    def size(self):
        return self.mean.shape[0]


def make_gmrf(mean, precision):
    mean = np.asarray(mean, dtype=float)
    precision = np.asarray(precision, dtype=float)
    if precision.shape != (mean.size, mean.size):
        raise GmrfError("precision shape does not match mean")
    if not np.allclose(precision, precision.T, atol=1e-10):
        raise GmrfError("precision must be symmetric")
    try:
        cholesky(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(f"precision is not positive definite: {exc}") from exc
    return GaussianMRF(mean=mean, precision=precision)


class ObsModel:
    """Per-site observation family with analytic first and second derivatives
    of log p(y | x) with respect to the latent x."""

    name = "abstract"
    log_concave = True

    def log_density(self, x, y):
        raise NotImplementedError

    def d1(self, x, y):
        raise NotImplementedError

    def d2(self, x, y):
        raise NotImplementedError

    def sample(self, x, rng):
        raise NotImplementedError

    def log_density_max(self, y):
        """log sup_x p(y | x), used for safeguard certificates."""
        raise NotImplementedError


class BinomialLogitObs(ObsModel):
    name = "binomial-logit"

    def __init__(self, trials):
        self.trials = int(trials)

    def log_density(self, x, y):
        n = self.trials
        log_choose = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
        return log_choose + y * x - n * np.logaddexp(0.0, x)

    def d1(self, x, y):
        p = 1.0 / (1.0 + np.exp(-x))
        return y - self.trials * p

    def d2(self, x, y):
        p = 1.0 / (1.0 + np.exp(-x))
        return -self.trials * p * (1.0 - p)

    def sample(self, x, rng):
        return rng.binomial(self.trials, 1.0 / (1.0 + np.exp(-x)))

    def log_density_max(self, y):
        y = np.asarray(y, dtype=float)
        n = self.trials
        # attained at logit(y/n); the boundary cases saturate to pmf 1
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = np.where(
                (y > 0) & (y < n),
                gammaln(n + 1)
                - gammaln(y + 1)
                - gammaln(n - y + 1)
                + y * np.log(y / n)
                + (n - y) * np.log1p(-y / n),
                0.0,
            )
        return inner


class PoissonLogObs(ObsModel):
    name = "poisson-log"

    def log_density(self, x, y):
        return y * x - np.exp(x) - gammaln(y + 1)

    def d1(self, x, y):
        return y - np.exp(x)

    def d2(self, x, y):
        return -np.exp(x)

    def sample(self, x, rng):
        return rng.poisson(np.exp(x))

    def log_density_max(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(y > 0, y * np.log(y) - y - gammaln(y + 1), 0.0)


class GaussianObs(ObsModel):
    name = "gaussian"

    def __init__(self, sigma):
        self.sigma = float(sigma)

    def log_density(self, x, y):
        return -0.5 * LOG_2PI - np.log(self.sigma) - 0.5 * ((y - x) / self.sigma) ** 2

    def d1(self, x, y):
        return (y - x) / self.sigma**2

    def d2(self, x, y):
        return -np.ones_like(np.asarray(x, dtype=float)) / self.sigma**2

    def sample(self, x, rng):
        return rng.normal(x, self.sigma)

    def log_density_max(self, y):
        return np.full(np.asarray(y).shape, -0.5 * LOG_2PI - np.log(self.sigma))


class SequentialConditionals:
    """Sequential conditionals p(x_t | x_{0:t-1}) of a Gaussian with the given
    precision and mean, from the Cholesky factor of the reversed-ordering
    precision (variables ordered last to first, so the factor's trailing
    blocks give the marginal precisions of every prefix).
    """

    def __init__(self, precision, mean):
        T = mean.shape[0]
        try:
            L = cholesky(precision[::-1, ::-1], lower=True)
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure(str(exc)) from exc
        self.chol_rev = L
        self.mean = np.asarray(mean, dtype=float)
        self.T = T
        self.sd = np.empty(T)
        self.coef = []
        for t in range(T):
            r = T - 1 - t
            self.sd[t] = 1.0 / L[r, r]
            # coefficients against (x_{t-1}, ..., x_0); flip to natural order
            self.coef.append((L[r + 1:, r] / L[r, r])[::-1])

    def cond_mean(self, t, hist):
        if t == 0:
            return np.full(hist.shape[0], self.mean[0])
        return self.mean[t] - (hist - self.mean[:t]) @ self.coef[t]

    def log_density(self, t, x, hist):
        m = self.cond_mean(t, hist)
        sd = self.sd[t]
        return -0.5 * LOG_2PI - np.log(sd) - 0.5 * ((x - m) / sd) ** 2

    def sample(self, t, hist, rng):
        m = self.cond_mean(t, hist)
        return m + self.sd[t] * rng.standard_normal(hist.shape[0])

    def log_joint(self, x):
        """Log density of full vectors x (N, T); equals the usual MVN logpdf."""
        x = np.atleast_2d(x)
        out = np.zeros(x.shape[0])
        for t in range(self.T):
            out = out + self.log_density(t, x[:, t], x[:, :t])
        return out


class GaussianConditionalProposal(Proposal):
    def __init__(self, conditionals):
        self.cond = conditionals

    def sample(self, t, paths_prev, rng):
        return self.cond.sample(t, paths_prev, rng)

    def log_density(self, t, x_t, paths_prev):
        return self.cond.log_density(t, x_t, paths_prev)


@dataclass
class LaplaceApprox:
    """Site parameters and the induced Gaussian model at the Laplace fixed point.

    The approximate posterior is the canonical Gaussian N_c(canon_mean,
    precision_tilde) with precision Q + diag(c); its mean equals the stored
    mode.  ``conditionals`` carry the reversed-ordering Cholesky factor of
    the approximate precision used for sequential sampling.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    precision_tilde: np.ndarray
    canon_mean: np.ndarray
    mode: np.ndarray
    conditionals: SequentialConditionals
    log_Z_tilde: float
    log_p_mode: float
    log_p_tilde_mode: float
    iterations: int
    converged: bool
    c_floored: int

    def log_obs_tilde(self, t, x):
        """Approximate observation log-density at site t."""
        return self.a[t] + self.b[t] * x - 0.5 * self.c[t] * x * x

    @property
    def chol_rev(self):
        return self.conditionals.chol_rev


def _posterior_gradient(gmrf, obs, y, x):
    return -(gmrf.precision @ (x - gmrf.mean)) + obs.d1(x, y)


def laplace_fit(gmrf, obs, y, tol=1e-8, max_iter=100, grad_tol=1e-9):
    """Iterate the site-linearization update until the mean stops moving.

    Each pass linearizes the observation log-likelihoods at the current point,
    solves the canonical Gaussian N_c(Q mu + b, Q + diag(c)) for its mean, and
    moves there.  c is floored at zero for non-log-concave families to keep
    the approximate precision positive definite (counted in ``c_floored``).
    Convergence is declared when the max abs mean change is <= tol or the
    exact posterior gradient at the new point is below grad_tol (the latter
    makes the Gaussian-observation case converge in a single iteration).
    """
    y = np.asarray(y, dtype=float)
    Q, mu = gmrf.precision, gmrf.mean
    x_cur = mu.copy()
    floored = 0
    for it in range(1, max_iter + 1):
        c = -obs.d2(x_cur, y)
        neg = c < 0
        if np.any(neg):
            floored += int(np.sum(neg))
            c = np.maximum(c, 0.0)
        b = obs.d1(x_cur, y) + c * x_cur
        a = obs.log_density(x_cur, y) - b * x_cur + 0.5 * c * x_cur**2
        Qt = Q + np.diag(c)
        try:
            factor = cho_factor(Qt, lower=True)
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure(str(exc)) from exc
        eta = Q @ mu + b
        x_new = cho_solve(factor, eta)
        delta = float(np.max(np.abs(x_new - x_cur)))
        grad = _posterior_gradient(gmrf, obs, y, x_new)
        x_cur = x_new
        if delta <= tol or float(np.max(np.abs(grad))) <= grad_tol:
            la = _finalize_laplace(gmrf, obs, y, a, b, c, Qt, eta, x_new, it, True, floored)
            return la
    la = _finalize_laplace(gmrf, obs, y, a, b, c, Qt, eta, x_cur, max_iter, False, floored)
    raise NoConvergence(max_iter, la)


def _finalize_laplace(gmrf, obs, y, a, b, c, Qt, eta, mode, iterations, converged, floored):
    Q, mu = gmrf.precision, gmrf.mean
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(cholesky(Q, lower=True)))))
    logdet_qt = 2.0 * float(np.sum(np.log(np.diag(cholesky(Qt, lower=True)))))
    log_z_tilde = float(
        np.sum(a)
        + 0.5 * (logdet_q - logdet_qt)
        - 0.5 * mu @ (Q @ mu)
        + 0.5 * eta @ mode
    )
    log_p_mode = float(np.sum(obs.log_density(mode, y)))
    log_p_tilde_mode = float(np.sum(a + b * mode - 0.5 * c * mode**2))
    return LaplaceApprox(
        a=a,
        b=b,
        c=c,
        precision_tilde=Qt,
        canon_mean=eta,
        mode=mode,
        conditionals=SequentialConditionals(Qt, mode),
        log_Z_tilde=log_z_tilde,
        log_p_mode=log_p_mode,
        log_p_tilde_mode=log_p_tilde_mode,
        iterations=iterations,
        converged=converged,
        c_floored=floored,
    )


def approx_loglik(la):
    """Laplace marginal-likelihood estimate log Z~ + log p(y|mode) - log p~(y|mode)."""
    return la.log_Z_tilde + la.log_p_mode - la.log_p_tilde_mode


def conditional_gaussian(la, t, hist):
    """Mean and variance of the approximate conditional p~(x_t | x_{0:t-1}, y)."""
    hist = np.atleast_2d(np.asarray(hist, dtype=float))
    m = la.conditionals.cond_mean(t, hist)
    var = la.conditionals.sd[t] ** 2
    if m.shape[0] == 1:
        return float(m[0]), float(var)
    return m, var


class LaplaceTwistedModel(SequentialModel):
    """Twisted sequential model for a GMRF posterior, represented implicitly:
    the proposal is the approximate conditional and the incremental weight is
    the exact-to-approximate observation ratio, so the engine consumes
    omega_t = p(y_t|x_t) / p~(y_t|x_t) directly (the approximate model's
    marginal likelihood enters once through the first step).
    """

    def __init__(self, gmrf, obs, y, la):
        self.gmrf = gmrf
        self.obs = obs
        self.y = np.asarray(y, dtype=float)
        self.la = la
        self.T = gmrf.size

    def step_domain(self, t):
        return None

    def log_gamma_ratio(self, t, paths):
        x = paths[:, t]
        out = (
            self.la.conditionals.log_density(t, x, paths[:, :t])
            + self.obs.log_density(x, self.y[t])
            - self.la.log_obs_tilde(t, x)
        )
        if t == 0:
            out = out + self.la.log_Z_tilde
        return out

    def log_gamma(self, t, paths):
        out = np.full(paths.shape[0], self.la.log_Z_tilde)
        for s in range(t + 1):
            x = paths[:, s]
            out += (
                self.la.conditionals.log_density(s, x, paths[:, :s])
                + self.obs.log_density(x, self.y[s])
                - self.la.log_obs_tilde(s, x)
            )
        return out


class BootstrapGmrfModel(SequentialModel):
    """Plain sequential decomposition: prior prefix marginal times observations."""

    def __init__(self, gmrf, obs, y):
        self.gmrf = gmrf
        self.obs = obs
        self.y = np.asarray(y, dtype=float)
        self.prior = SequentialConditionals(gmrf.precision, gmrf.mean)
        self.T = gmrf.size

    def step_domain(self, t):
        return None

    def log_gamma_ratio(self, t, paths):
        x = paths[:, t]
        return self.prior.log_density(t, x, paths[:, :t]) + self.obs.log_density(
            x, self.y[t]
        )

    def log_gamma(self, t, paths):
        out = np.zeros(paths.shape[0])
        for s in range(t + 1):
            out += self.prior.log_density(s, paths[:, s], paths[:, :s])
            out += self.obs.log_density(paths[:, s], self.y[s])
        return out


def twisted_gmrf_model(gmrf, obs, y, la):
    """(model, proposal) pair for Laplace-twisted SMC on the given ordering.

    Callers wanting a non-identity ordering permute the model first with
    ``permute_gmrf`` and fit the Laplace approximation on the permuted model.
    """
    model = LaplaceTwistedModel(gmrf, obs, y, la)
    return model, GaussianConditionalProposal(la.conditionals)


def bootstrap_gmrf_model(gmrf, obs, y):
    model = BootstrapGmrfModel(gmrf, obs, y)
    return model, GaussianConditionalProposal(model.prior)


def permute_gmrf(gmrf, order):
    idx = np.asarray(list(order), dtype=int)
    return GaussianMRF(
        mean=gmrf.mean[idx], precision=gmrf.precision[np.ix_(idx, idx)]
    )


@dataclass
class CarConfig:
    """Conditional autoregressive prior: neighbor-count diagonal plus d, -1 off
    the diagonal for neighbors, scaled by tau under the chosen convention."""

    edges: list
    tau: float = 0.1
    d: float = 1.0
    trials: int = 10
    tau_convention: str = "covariance-scale"

    def __post_init__(self):
        if self.tau_convention not in ("covariance-scale", "precision-scale"):
            raise GmrfError(f"unknown tau convention {self.tau_convention!r}")


def build_car(cfg, size=None):
    """Precision Q with Q_tt = n_t + d and -1 between neighbors, zero prior mean.

    covariance-scale (default) treats tau as a covariance multiplier, so the
    precision is Q / tau; precision-scale uses tau * Q.
    """
    pairs = set()
    max_v = -1
    for i, j in cfg.edges:
        i, j = int(i), int(j)
        if i == j:
            raise AsymmetricAdjacency(f"self-loop at site {i}")
        pairs.add((min(i, j), max(i, j)))
        max_v = max(max_v, i, j)
    T = (max_v + 1) if size is None else int(size)
    Q = np.zeros((T, T))
    counts = np.zeros(T)
    for i, j in pairs:
        if i >= T or j >= T:
            raise AsymmetricAdjacency(f"edge ({i},{j}) outside 0..{T - 1}")
        Q[i, j] = Q[j, i] = -1.0
        counts[i] += 1
        counts[j] += 1
    Q[np.diag_indices(T)] = counts + cfg.d
    if cfg.tau_convention == "covariance-scale":
        Q = Q / cfg.tau
    else:
        Q = Q * cfg.tau
    return make_gmrf(np.zeros(T), Q)


def lattice_edges(width, height):
    """4-neighbor non-periodic grid edges, row-major site indexing."""
    edges = []
    for r in range(height):
        for c in range(width):
            s = r * width + c
            if c + 1 < width:
                edges.append((s, s + 1))
            if r + 1 < height:
                edges.append((s, s + width))
    return edges


def load_adjacency(path):
    """Edge list file: one '1-based i j' pair per line; blank lines ignored."""
    edges = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            i, j = int(parts[0]), int(parts[1])
            edges.append((i - 1, j - 1))
    return edges


def load_observations(path):
    """Observation file rows 't y_t [n_t]' with 1-based t; returns (y, trials)."""
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            rows.append([float(p) for p in parts])
    rows.sort(key=lambda r: r[0])
    y = np.array([r[1] for r in rows])
    trials = np.array([r[2] for r in rows]) if len(rows[0]) > 2 else None
    return y, trials


def simulate_car_data(gmrf, obs, seed):
    """Draw one latent field from the prior and observations from the family."""
    rng = np.random.default_rng(seed)
    L = cholesky(gmrf.precision, lower=True)
    z = rng.standard_normal(gmrf.size)
    x = gmrf.mean + solve_triangular(L.T, z, lower=False)
    y = obs.sample(x, rng)
    return x, np.asarray(y, dtype=float)


class LaplaceTwisting(TwistingSet):
    """Mode-normalized Laplace twist psi_t for use with the regularizer.

    The raw twist marginalizes the approximate observation factors over the
    future; its per-prefix value divided by the value on the mode path keeps
    the scale near one, which is what makes a constant epsilon meaningful.
    """

    def __init__(self, gmrf, obs, y, la):
        self.la = la
        self.prior = SequentialConditionals(gmrf.precision, gmrf.mean)
        self.T = gmrf.size
        mode = la.mode
        self._mode_inc = np.empty(self.T)
        for t in range(self.T):
            hist = mode[:t][None, :]
            xv = np.array([mode[t]])
            inc = (
                la.conditionals.log_density(t, xv, hist)
                - self.prior.log_density(t, xv, hist)
                - la.log_obs_tilde(t, mode[t])
            )
            self._mode_inc[t] = float(inc[0])

    def step_increment(self, t, paths):
        x = paths[:, t]
        return (
            self.la.conditionals.log_density(t, x, paths[:, :t])
            - self.prior.log_density(t, x, paths[:, :t])
            - self.la.log_obs_tilde(t, x)
        ) - self._mode_inc[t]

    def log_psi(self, t, paths):
        out = np.zeros(paths.shape[0])
        for s in range(t + 1):
            out += self.step_increment(s, paths[:, : s + 1])
        return out


def regularized_car_model(gmrf, obs, y, la, epsilon, certify_points=10_000, certify_seed=0):
    """Assemble the bounded-weight regularized sampler for a GMRF model.

    The sequential factorization used here has per-step factor products
    p(x_t | x_{0:t-1}) * p(y_t | x_t), so the prior conditional itself is a
    certified safeguard with delta = 1 / sup_t sup_x p(y_t | x): the
    observation density never exceeds that bound.
    """
    if gmrf.size < 2:
        raise GmrfError("regularized model needs at least two sites")
    y = np.asarray(y, dtype=float)
    psi = LaplaceTwisting(gmrf, obs, y, la)
    prior = psi.prior
    safeguard = GaussianConditionalProposal(prior)
    twisted = GaussianConditionalProposal(la.conditionals)
    log_b = obs.log_density_max(y)
    delta = float(np.exp(-np.max(log_b)))

    def log_factor_prod(t, paths):
        x = paths[:, t]
        return prior.log_density(t, x, paths[:, :t]) + obs.log_density(x, y[t])

    def log_approx_factor_prod(t, paths):
        x = paths[:, t]
        out = prior.log_density(t, x, paths[:, :t]) + la.log_obs_tilde(t, x)
        # mode-normalization correction keeping the proposal identity exact:
        # approx product * psi_t / psi_{t-1} must equal the Laplace conditional
        return out + psi._mode_inc[t]

    return regularize(
        psi,
        epsilon,
        safeguard,
        delta,
        twisted_proposal=twisted,
        log_factor_prod=log_factor_prod,
        log_approx_factor_prod=log_approx_factor_prod,
        T=gmrf.size,
        certify_points=certify_points,
        certify_seed=certify_seed,
    )

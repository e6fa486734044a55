"""Held-out document likelihood for LDA: expectation propagation with
Dirichlet moment matching, EP-derived twisting, and Rao-Blackwellized
twisted SMC over topic assignments.

The topic proportions are marginalized analytically inside every particle,
so a particle is just a prefix of topic assignments with its per-topic
counts; the twisted intermediate targets are Dirichlet-normalizer ratios
under pseudo-counts that absorb the EP site exponents of the still-unplaced
words.  The pseudo-counts at a full prefix reduce to the prior
concentration, so the final target is the exact joint regardless of the EP
fit quality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import TooLargeForEnumeration, TwistSmcError
from .smc import SequentialModel, run_smc
from .twist import ENUMERATION_GUARD, fully_adapt_discrete


class LdaError(TwistSmcError):
    pass


class NonPositivePseudoCount(LdaError):
    pass


@dataclass(frozen=True)
class LdaModel:
    """Known topic model: V x K column-stochastic word table and Dirichlet alpha."""

    topic_word: np.ndarray
    alpha: np.ndarray

    @property
    def n_topics(self):
        return self.topic_word.shape[1]

    @property
    def vocab_size(self):
        return self.topic_word.shape[0]


def make_lda_model(topic_word, alpha):
    topic_word = np.asarray(topic_word, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if not np.allclose(topic_word.sum(axis=0), 1.0, atol=1e-8):
        raise LdaError("topic_word columns must sum to one")
    if np.any(alpha <= 0):
        raise LdaError("alpha must be positive")
    return LdaModel(topic_word=topic_word, alpha=alpha)


@dataclass(frozen=True)
class Document:
    words: np.ndarray  # word ids, 0-based

    @property
    def length(self):
        return self.words.shape[0]

    def counts(self, vocab_size):
        return np.bincount(self.words, minlength=vocab_size)


def make_document(words):
    return Document(words=np.asarray(words, dtype=int))


def save_lda_model(model, path):
    """Model file: a 'K V' line, an alpha line, then one Phi row per word."""
    with open(path, "w") as fh:
        fh.write(f"{model.n_topics} {model.vocab_size}\n")
        fh.write(" ".join(repr(float(a)) for a in model.alpha) + "\n")
        for w in range(model.vocab_size):
            fh.write(" ".join(repr(float(p)) for p in model.topic_word[w]) + "\n")


def load_lda_model(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    k, v = int(lines[0][0]), int(lines[0][1])
    alpha = np.array([float(x) for x in lines[1]])
    phi = np.array([[float(x) for x in row] for row in lines[2 : 2 + v]])
    if alpha.shape != (k,) or phi.shape != (v, k):
        raise LdaError(f"model file shapes disagree with K={k}, V={v}")
    return make_lda_model(phi, alpha)


def load_document(path):
    """Document file: whitespace-separated 1-based word ids."""
    with open(path) as fh:
        ids = [int(tok) for tok in fh.read().split()]
    return make_document([w - 1 for w in ids])


def _log_dir_norm(v):
    """log of the Dirichlet normalizer B(v); v may be (K,) or (N, K)."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return float(np.sum(gammaln(v)) - gammaln(np.sum(v)))
    return np.sum(gammaln(v), axis=1) - gammaln(np.sum(v, axis=1))


@dataclass
class EpApprox:
    beta: np.ndarray  # (V, K) site exponents
    log_s: np.ndarray  # (V,) site log scales
    converged: bool
    skipped: int
    sweeps: int


def _moment_match(cavity, phi_w):
    """Dirichlet parameters matching the tilted distribution Dir(cavity) * sum_k theta_k phi_k.

    Means are matched exactly; the total mass comes from the aggregated
    second-moment identity of the Dirichlet.
    """
    g = cavity
    A = g.sum()
    S = float(phi_w @ g)
    m = g * (S + phi_w) / ((A + 1.0) * S)
    q = g * (g + 1.0) * (S + 2.0 * phi_w) / ((A + 1.0) * (A + 2.0) * S)
    mass = float(np.sum(m - q) / np.sum(q - m * m))
    return mass * m


def _suffix_pseudo_counts(beta, words, alpha):
    """Table g of shape (T+1, K): g[p] = alpha + sum of betas of words from p on."""
    T = len(words)
    K = alpha.shape[0]
    out = np.empty((T + 1, K))
    out[T] = alpha
    for p in range(T - 1, -1, -1):
        out[p] = out[p + 1] + beta[words[p]]
    return out


def ep_fit(model, doc, max_sweeps=200, tol=1e-8):
    """Fit the per-word Dirichlet site approximations by moment matching.

    Sites are visited in reverse document order.  A repeated word shares one
    site, updated with step 1/n_w so the tied global update stays a single
    cavity's worth; the step is halved further if a sweep's change grows
    (oscillation).  Updates whose cavity or resulting prefix pseudo-counts
    would be non-positive are skipped and counted.
    """
    phi, alpha = model.topic_word, model.alpha
    V, K = phi.shape
    words = doc.words
    T = len(words)
    beta = np.zeros((V, K))
    if K == 1 or T == 0:
        log_s = np.log(phi[:, 0]) if K == 1 else np.zeros(V)
        return EpApprox(beta=beta, log_s=log_s, converged=True, skipped=0, sweeps=0)

    n_w = np.bincount(words, minlength=V)
    skipped = 0
    eta_scale = 1.0
    prev_change = np.inf
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        change = 0.0
        for s in range(T - 1, -1, -1):
            w = words[s]
            g_all = alpha + n_w @ beta
            cavity = g_all - beta[w]
            if np.any(cavity <= 0):
                skipped += 1
                continue
            g_new = _moment_match(cavity, phi[w])
            target_row = g_new - cavity
            step = eta_scale / n_w[w]
            cand = beta[w] + step * (target_row - beta[w])
            trial = beta.copy()
            trial[w] = cand
            if np.min(_suffix_pseudo_counts(trial, words, alpha)) <= 1e-12:
                skipped += 1
                continue
            change = max(change, float(np.max(np.abs(cand - beta[w]))))
            beta[w] = cand
        if change <= tol:
            converged = True
            break
        if change > prev_change * (1.0 + 1e-12) and eta_scale > 1.0 / 16.0:
            eta_scale *= 0.5  # oscillating sweep: damp further updates
        prev_change = change

    log_s = np.zeros(V)
    g_all = alpha + n_w @ beta
    for w in range(V):
        if n_w[w] == 0:
            continue
        cavity = g_all - beta[w]
        if np.any(cavity <= 0):
            raise NonPositivePseudoCount(f"cavity for word {w} is not positive")
        z_t = float(phi[w] @ cavity) / float(cavity.sum())
        log_s[w] = (
            np.log(z_t) + _log_dir_norm(cavity) - _log_dir_norm(cavity + beta[w])
        )
    return EpApprox(beta=beta, log_s=log_s, converged=converged, skipped=skipped, sweeps=sweeps)


def twisted_pseudo_counts(ep, doc, alpha, t):
    """Pseudo-count vector g_t = alpha + sum of site exponents of words t+1..T.

    ``t`` counts placed words (0..T), so g_T = alpha and the final twisted
    target is the exact joint.
    """
    T = doc.length
    if not 0 <= t <= T:
        raise LdaError(f"t must lie in 0..{T}")
    g = _suffix_pseudo_counts(ep.beta, doc.words, np.asarray(alpha, float))[t]
    if np.any(g <= 0):
        raise NonPositivePseudoCount(f"pseudo-count at t={t} has a non-positive entry")
    return g


def ep_loglik(ep, model, doc):
    """EP estimate of the document log-likelihood from scales and pseudo-counts."""
    if doc.length == 0:
        return 0.0
    g0 = _suffix_pseudo_counts(ep.beta, doc.words, model.alpha)[0]
    return float(
        np.sum(ep.log_s[doc.words])
        + _log_dir_norm(g0)
        - _log_dir_norm(model.alpha)
    )


class RbTwistedModel(SequentialModel):
    """Rao-Blackwellized twisted targets over topic assignments.

    gamma after p placed words is B(g_p + counts) / B(alpha) times the placed
    word probabilities, where g_p are the EP pseudo-counts (g_p = alpha when
    the twist is off or the document is exhausted).
    """

    def __init__(self, model, doc, ep=None):
        self.phi = model.topic_word
        self.alpha = model.alpha
        self.words = doc.words
        self.T = doc.length
        self.K = model.n_topics
        beta = ep.beta if ep is not None else np.zeros_like(model.topic_word)
        self.suffix = _suffix_pseudo_counts(beta, doc.words, model.alpha)
        if np.any(self.suffix <= 0):
            raise NonPositivePseudoCount("EP pseudo-counts must be positive")
        self._log_b_alpha = _log_dir_norm(model.alpha)

    def step_domain(self, t):
        return self.K

    def _counts(self, prefix):
        m = np.zeros((prefix.shape[0], self.K))
        for k in range(self.K):
            m[:, k] = np.sum(prefix == k, axis=1)
        return m

    def log_gamma(self, t, paths):
        m = self._counts(paths)
        out = _log_dir_norm(self.suffix[t + 1] + m) - self._log_b_alpha
        for s in range(t + 1):
            out = out + np.log(self.phi[self.words[s], paths[:, s]])
        return out

    def log_gamma_ratio(self, t, paths):
        x = paths[:, t]
        m_prev = self._counts(paths[:, :t])
        m_now = m_prev.copy()
        m_now[np.arange(paths.shape[0]), x] += 1.0
        if t == 0:
            prev_norm = self._log_b_alpha  # gamma_{-1} is the bare prior normalizer
        else:
            prev_norm = _log_dir_norm(self.suffix[t] + m_prev)
        out = _log_dir_norm(self.suffix[t + 1] + m_now) - prev_norm
        with np.errstate(divide="ignore"):
            out = out + np.log(self.phi[self.words[t], x])
        return out


@dataclass
class RbParticle:
    """One Rao-Blackwellized trajectory: assignments plus per-topic counts."""

    assignments: np.ndarray
    topic_counts: np.ndarray


def rb_particle(ps, i, n_topics):
    from .smc import reconstruct_trajectory

    path = reconstruct_trajectory(ps, i)
    return RbParticle(
        assignments=path, topic_counts=np.bincount(path, minlength=n_topics)
    )


def rb_smc_loglik(model, doc, ep, n_particles, cfg=None):
    """Twisted Rao-Blackwellized SMC estimate of the document log-likelihood.

    ``ep=None`` gives the untwisted sampler (all site exponents zero); both
    use the locally optimal Polya-urn proposal with full adaptation.
    """
    from .smc import SmcConfig

    if doc.length == 0:
        return 0.0
    seq = RbTwistedModel(model, doc, ep)
    proposal = fully_adapt_discrete(seq)
    if cfg is None:
        cfg = SmcConfig(n_particles=n_particles, seed=0)
    result = run_smc(seq, proposal, cfg)
    return result.log_Z_hat


def exact_loglik_enumerate(model, doc):
    """Exact log-likelihood by exhaustive summation over all topic assignments."""
    T = doc.length
    if T == 0:
        return 0.0
    K = model.n_topics
    n_states = K**T
    if n_states > ENUMERATION_GUARD:
        raise TooLargeForEnumeration(n_states, ENUMERATION_GUARD)
    alpha = model.alpha
    log_b_alpha = _log_dir_norm(alpha)
    log_phi_doc = np.log(model.topic_word[doc.words])  # (T, K)
    radix = K ** np.arange(T - 1, -1, -1, dtype=np.int64)
    parts = []
    chunk = 1 << 16
    for lo in range(0, n_states, chunk):
        codes = np.arange(lo, min(lo + chunk, n_states), dtype=np.int64)
        digits = (codes[:, None] // radix) % K  # (n, T)
        m = np.zeros((codes.size, K))
        for k in range(K):
            m[:, k] = np.sum(digits == k, axis=1)
        lp = _log_dir_norm(alpha + m) - log_b_alpha
        lp = lp + np.sum(log_phi_doc[np.arange(T)[None, :], digits], axis=1)
        parts.append(logsumexp(lp))
    return float(logsumexp(np.array(parts)))

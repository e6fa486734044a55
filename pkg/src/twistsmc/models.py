"""Benchmark-model constructors: Ising lattice, CAR/binomial field, LDA toy.

Each bundle wires a graph (or GMRF), a twisting choice, and a proposal into a
(SequentialModel, Proposal) pair plus an oracle hook where an exact or
reference value is computable.  Bundles are deterministic functions of their
spec and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gmrf as gmrf_mod
from . import lbp as lbp_mod
from . import lda as lda_mod
from .errors import TwistSmcError
from .graph import (
    VariableOrder,
    identity_order,
    ising_pair_factor,
    ising_unary_factor,
    make_graph,
    partition_factors,
    reorder,
)
from .oracle import ising_logZ_dp
from .twist import UnitTwisting, fully_adapt_discrete, make_twisted_model


class ModelError(TwistSmcError):
    pass


@dataclass(frozen=True)
class IsingSpec:
    width: int
    height: int
    coupling: float = 0.44
    periodic: bool = False
    field_seed: int | None = 0
    field: np.ndarray | None = None
    order_strategy: str = "identity"
    order_seed: int | None = None

    @property
    def size(self):
        return self.width * self.height


@dataclass
class ExperimentBundle:
    model: object
    proposal: object
    metadata: dict
    oracle: object  # callable () -> float, or None
    deterministic_estimate: float | None = None


def ising_field(spec):
    if spec.field is not None:
        H = np.asarray(spec.field, dtype=float)
        if H.size != spec.size:
            raise ModelError("explicit field size does not match lattice")
        return H
    rng = np.random.default_rng(spec.field_seed)
    return rng.uniform(-1.0, 1.0, size=spec.size)


def ising_graph(spec, H=None):
    """Square-lattice Ising factor graph with spins {-1,+1} coded as {0,1}.

    Pair factors exp(J s_i s_j) sit on right/down neighbor bonds (with wrap
    bonds when periodic; both dimensions must then be >= 3 so no bond is
    duplicated), unary factors exp(H_i s_i) on every site, row-major order.
    """
    w, h = spec.width, spec.height
    if w < 1 or h < 1:
        raise ModelError("lattice dimensions must be >= 1")
    if spec.periodic and (w < 3 or h < 3):
        raise ModelError("periodic lattice needs both dimensions >= 3")
    if H is None:
        H = ising_field(spec)
    factors = []
    for r in range(h):
        for c in range(w):
            s = r * w + c
            if c + 1 < w:
                factors.append(ising_pair_factor((s, s + 1), spec.coupling))
            elif spec.periodic:
                factors.append(ising_pair_factor((s, r * w), spec.coupling))
            if r + 1 < h:
                factors.append(ising_pair_factor((s, s + w), spec.coupling))
            elif spec.periodic:
                factors.append(ising_pair_factor((s, c), spec.coupling))
    for s in range(spec.size):
        factors.append(ising_unary_factor((s,), H[s]))
    return make_graph([2] * spec.size, factors)


def ising_bundle(spec, twist="none", lbp_cfg=None):
    """Fully adapted SMC over the (optionally LBP-twisted) Ising decomposition.

    The default left-to-right order is the row-major identity scan.
    """
    H = ising_field(spec)
    graph = ising_graph(spec, H)
    order = reorder(graph, spec.order_strategy, seed=spec.order_seed)
    partition = partition_factors(graph, order)
    if twist == "lbp":
        # plain sequential updates reach the accurate fixed point on these
        # lattices; damping is the fallback remedy when they do not settle
        cfg = lbp_cfg or lbp_mod.LbpConfig(max_iters=500, tol=1e-8, damping=0.0)
        messages = lbp_mod.run_lbp(graph, cfg)
        if not messages.converged and cfg.damping == 0.0:
            retry = lbp_mod.LbpConfig(
                max_iters=cfg.max_iters, tol=cfg.tol, damping=0.5, schedule=cfg.schedule
            )
            messages = lbp_mod.run_lbp(graph, retry)
        twisting = lbp_mod.twisting_from_messages(messages, partition)
        twist_meta = {"lbp_converged": messages.converged, "lbp_iters": messages.iterations}
    elif twist == "none":
        twisting = UnitTwisting()
        twist_meta = {}
    else:
        raise ModelError(f"unknown ising twist {twist!r}")
    model = make_twisted_model(graph, order, partition, twisting)
    proposal = fully_adapt_discrete(model)

    def oracle_hook():
        return ising_logZ_dp(
            spec.width, spec.height, spec.coupling, H, periodic=spec.periodic
        ).log_Z

    oracle = oracle_hook if spec.width <= 20 else None
    return ExperimentBundle(
        model=model,
        proposal=proposal,
        metadata={
            "experiment": "ising",
            "width": spec.width,
            "height": spec.height,
            "coupling": spec.coupling,
            "periodic": spec.periodic,
            "twist": twist,
            "order": spec.order_strategy,
            **twist_meta,
        },
        oracle=oracle,
    )


def car_bundle(
    cfg,
    y,
    twist="laplace",
    order_strategy="approximate-minimum-degree",
    order_seed=None,
    obs=None,
    size=None,
    epsilon=0.0,
):
    """CAR-prior GMRF with exponential-family observations.

    ``twist='laplace'`` gives the Laplace-twisted model and proposal (the
    epsilon-regularized bounded-weight variant when epsilon > 0);
    ``twist='none'`` the bootstrap sampler.  The ordering permutes the model
    before the Laplace fit and Cholesky, exactly as the sequential
    decomposition consumes it.
    """
    base = gmrf_mod.build_car(cfg, size=size)
    obs = obs or gmrf_mod.BinomialLogitObs(cfg.trials)
    y = np.asarray(y, dtype=float)
    T = base.size
    if order_strategy == "identity":
        order = identity_order(T)
    else:
        adj_graph = _car_order_graph(cfg, T)
        order = reorder(adj_graph, order_strategy, seed=order_seed)
    perm = list(order)
    g_perm = gmrf_mod.permute_gmrf(base, perm)
    y_perm = y[perm]
    deterministic = None
    if twist == "laplace":
        la = gmrf_mod.laplace_fit(g_perm, obs, y_perm)
        if epsilon > 0:
            reg = gmrf_mod.regularized_car_model(g_perm, obs, y_perm, la, epsilon)
            model, proposal = reg.model, reg.proposal
        else:
            model, proposal = gmrf_mod.twisted_gmrf_model(g_perm, obs, y_perm, la)
        deterministic = gmrf_mod.approx_loglik(la)
    elif twist == "none":
        model, proposal = gmrf_mod.bootstrap_gmrf_model(g_perm, obs, y_perm)
    else:
        raise ModelError(f"unknown car twist {twist!r}")
    return ExperimentBundle(
        model=model,
        proposal=proposal,
        metadata={
            "experiment": "car",
            "T": T,
            "tau": cfg.tau,
            "d": cfg.d,
            "trials": cfg.trials,
            "tau_convention": cfg.tau_convention,
            "twist": twist,
            "order": order_strategy,
            **({"epsilon": epsilon} if epsilon > 0 else {}),
        },
        oracle=None,
        deterministic_estimate=deterministic,
    )


def _car_order_graph(cfg, T):
    """Minimal discrete stand-in graph carrying the CAR adjacency for reorder."""
    factors = [ising_pair_factor((int(i), int(j)), 0.0) for i, j in cfg.edges]
    factors.append(ising_unary_factor((0,), 0.0))
    return make_graph([2] * T, factors)


def simulate_car_observations(cfg, seed, obs=None, size=None):
    base = gmrf_mod.build_car(cfg, size=size)
    obs = obs or gmrf_mod.BinomialLogitObs(cfg.trials)
    return gmrf_mod.simulate_car_data(base, obs, seed)


@dataclass(frozen=True)
class LdaToySpec:
    n_topics: int = 4
    vocab_size: int = 10
    doc_length: int = 10
    model_seed: int = 2024
    doc_seed: int = 7


def lda_toy(spec):
    """Synthetic toy topic model and document with documented seeds.

    Topic-word columns are Dirichlet(1) draws; alpha is a fixed spread around
    one; the document is sampled from the model itself.
    """
    rng = np.random.default_rng(spec.model_seed)
    phi = rng.dirichlet(np.ones(spec.vocab_size), size=spec.n_topics).T
    alpha = 0.5 + rng.random(spec.n_topics)
    model = lda_mod.make_lda_model(phi, alpha)
    drng = np.random.default_rng(spec.doc_seed)
    theta = drng.dirichlet(alpha)
    topics = drng.choice(spec.n_topics, size=spec.doc_length, p=theta)
    words = np.array(
        [drng.choice(spec.vocab_size, p=phi[:, k]) for k in topics], dtype=int
    )
    return model, lda_mod.make_document(words)


def lda_bundle(model, doc, twist="ep"):
    """Rao-Blackwellized twisted SMC over topic assignments.

    ``twist='none'`` zeroes the site exponents, the plain fully adapted
    baseline; the EP estimate rides along as the deterministic reference.
    """
    deterministic = None
    if twist == "ep":
        ep = lda_mod.ep_fit(model, doc)
        deterministic = lda_mod.ep_loglik(ep, model, doc)
    elif twist == "none":
        ep = None
    else:
        raise ModelError(f"unknown lda twist {twist!r}")
    seq = lda_mod.RbTwistedModel(model, doc, ep)
    proposal = fully_adapt_discrete(seq)

    def oracle_hook():
        return lda_mod.exact_loglik_enumerate(model, doc)

    K, T = model.n_topics, doc.length
    oracle = oracle_hook if K**max(T, 1) <= 2**24 else None
    return ExperimentBundle(
        model=seq,
        proposal=proposal,
        metadata={
            "experiment": "lda",
            "K": model.n_topics,
            "V": model.vocab_size,
            "T": doc.length,
            "twist": twist,
        },
        oracle=oracle,
        deterministic_estimate=deterministic,
    )

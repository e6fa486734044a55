"""Tabular loopy belief propagation and twisting functions from messages.

Messages are kept normalized (each table sums to one); the discarded
log-normalizers are reconstructed after the message passes so products of
messages can be rescaled back to raw magnitudes.  On a tree the rescaled
fixed point equals the subtree integrals, which makes message-based twisting
match the enumerated optimal twisting pointwise, not just up to a constant.
On cyclic graphs the scale recursion has no finite solution, so scales fall
back to the one-pass local normalizers; any per-message constants shift each
step's twist by a constant, which cancels out of the sampler entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import TwistSmcError
from .twist import TwistingSet


class LbpError(TwistSmcError):
    pass


@dataclass
class LbpConfig:
    max_iters: int = 500
    tol: float = 1e-10
    damping: float = 0.0
    schedule: str = "sequential"

    def __post_init__(self):
        if self.tol <= 0:
            raise LbpError("tolerance must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise LbpError("damping must lie in [0, 1)")
        if self.schedule not in ("sequential", "synchronous"):
            raise LbpError(f"unknown schedule {self.schedule!r}")


@dataclass
class MessageSet:
    """Factor-to-variable messages with reconstructed scales.

    ``mu[(j, s)]`` is the normalized log message table over the domain of
    variable s; ``mu_scale[(j, s)]`` is its log magnitude, so the raw message
    is exp(mu + mu_scale).  Variable-to-factor messages are derived products,
    recomputed on demand via ``lam``.
    """

    graph: object
    mu: dict
    mu_scale: dict
    iterations: int
    converged: bool
    residual: float

    def lam(self, s, j):
        """Raw variable-to-factor message (log table, log scale)."""
        table = np.zeros(self.graph.domains[s])
        scale = 0.0
        for i in self.graph.neighbors_of_variable(s):
            if i != j:
                table = table + self.mu[(i, s)]
                scale += self.mu_scale[(i, s)]
        return table, scale


def _is_tree(graph):
    n_edges = sum(len(f.scope) for f in graph.factors)
    return n_edges == graph.num_variables + len(graph.factors) - 1


def _update_message(graph, msgs, j, s):
    """One factor-to-variable update from normalized incoming messages.

    Returns the normalized table and the local log-normalizer.
    """
    f = graph.factors[j]
    if not hasattr(f, "log_table"):
        raise LbpError("belief propagation needs tabular factors")
    acc = f.log_table
    s_axis = f.scope.index(s)
    for axis, u in enumerate(f.scope):
        if u == s:
            continue
        lam_table = np.zeros(graph.domains[u])
        for i in graph.neighbors_of_variable(u):
            if i != j:
                lam_table = lam_table + msgs[(i, u)]
        shape = [1] * len(f.scope)
        shape[axis] = graph.domains[u]
        acc = acc + lam_table.reshape(shape)
    other_axes = tuple(a for a in range(len(f.scope)) if a != s_axis)
    raw = logsumexp(acc, axis=other_axes) if other_axes else acc
    z = logsumexp(raw)
    return raw - z, float(z)


def _solve_scales(graph, msgs, keys):
    """Reconstruct raw message magnitudes from the converged tables.

    The scale of message (j, s) is its local normalizer plus the scales of
    every incoming message, an acyclic recursion on trees (solved exactly by
    repeated passes, which stabilize within the dependency depth).  On cyclic
    graphs the recursion diverges, so the local normalizers alone are used;
    for twisting this changes each psi_t by a constant only.
    """
    zm = {}
    for j, s in keys:
        _, z = _update_message(graph, msgs, j, s)
        zm[(j, s)] = z
    scales = {k: 0.0 for k in keys}
    if not _is_tree(graph):
        return dict(zm)
    deps = {}
    for j, s in keys:
        f = graph.factors[j]
        deps[(j, s)] = [
            (i, u)
            for u in f.scope
            if u != s
            for i in graph.neighbors_of_variable(u)
            if i != j
        ]
    for _ in range(len(keys) + 1):
        changed = False
        for k in keys:
            new = zm[k] + sum(scales[d] for d in deps[k])
            if new != scales[k]:
                scales[k] = new
                changed = True
        if not changed:
            break
    return scales


def run_lbp(graph, cfg=None):
    """Pass messages until the max L-inf change of normalized tables is <= tol.

    Non-convergence is reported through the returned flag, never raised:
    unconverged messages still define a usable (if less efficient) twisting.
    """
    if not graph.is_discrete():
        raise LbpError("belief propagation needs discrete variables")
    cfg = cfg or LbpConfig()
    msgs = {}
    for j, f in enumerate(graph.factors):
        for s in f.scope:
            d = graph.domains[s]
            msgs[(j, s)] = np.full(d, -np.log(d))

    keys = [(j, s) for j, f in enumerate(graph.factors) for s in f.scope]
    residual = np.inf
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        residual = 0.0
        if cfg.schedule == "sequential":
            for j, s in keys:
                table, _ = _update_message(graph, msgs, j, s)
                if cfg.damping > 0.0:
                    mix = (1.0 - cfg.damping) * np.exp(table) + cfg.damping * np.exp(
                        msgs[(j, s)]
                    )
                    table = np.log(mix / mix.sum())
                residual = max(
                    residual,
                    float(np.max(np.abs(np.exp(table) - np.exp(msgs[(j, s)])))),
                )
                msgs[(j, s)] = table
        else:
            staged = {k: _update_message(graph, msgs, *k)[0] for k in keys}
            for k, table in staged.items():
                if cfg.damping > 0.0:
                    mix = (1.0 - cfg.damping) * np.exp(table) + cfg.damping * np.exp(
                        msgs[k]
                    )
                    table = np.log(mix / mix.sum())
                residual = max(
                    residual, float(np.max(np.abs(np.exp(table) - np.exp(msgs[k]))))
                )
                msgs[k] = table
        if residual <= cfg.tol:
            scales = _solve_scales(graph, msgs, keys)
            return MessageSet(graph, msgs, scales, iterations, True, residual)
    scales = _solve_scales(graph, msgs, keys)
    return MessageSet(graph, msgs, scales, iterations, False, residual)


def beliefs(messages):
    """Per-variable marginal estimates: normalized products of incoming messages."""
    graph = messages.graph
    out = []
    for s in range(graph.num_variables):
        b = np.zeros(graph.domains[s])
        for j in graph.neighbors_of_variable(s):
            b = b + messages.mu[(j, s)]
        out.append(np.exp(b - logsumexp(b)))
    return out


class MessageTwisting(TwistingSet):
    """psi_t as the product of messages from outside factors into the prefix.

    For each step t the contributing (factor, variable) pairs are the factors
    not yet in the cumulative partition that touch an already-placed variable;
    scales are folded into the tables so the product carries raw magnitudes.
    Evaluation is a table gather per pair.
    """

    def __init__(self, per_step):
        self.per_step = per_step

    def log_psi(self, t, paths):
        out = np.zeros(paths.shape[0])
        for col, table in self.per_step[t]:
            out = out + table[paths[:, col]]
        return out


def twisting_from_messages(messages, partition):
    graph = messages.graph
    T = partition.num_steps
    pos = partition.order.positions()
    per_step = []
    included = set()
    for t in range(T - 1):
        included.update(partition.steps[t])
        pairs = []
        for j, f in enumerate(graph.factors):
            if j in included:
                continue
            for s in f.scope:
                if pos[s] <= t:
                    pairs.append(
                        (int(pos[s]), messages.mu[(j, s)] + messages.mu_scale[(j, s)])
                    )
        per_step.append(pairs)
    return MessageTwisting(per_step)

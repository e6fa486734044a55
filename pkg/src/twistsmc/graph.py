"""Factor-graph data model, variable orderings, and the sequential factor partition.

A factor graph holds T variables (discrete with a finite cardinality, or
continuous scalars) and a list of factors, each with an ordered scope of
variable indices and a log-space evaluator.  Variable indices are 0-based
throughout the code; the on-disk adjacency format is 1-based (documented in
docs/file-formats.md).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import TwistSmcError

CONTINUOUS = None  # domain marker for a continuous scalar variable


class GraphError(TwistSmcError):
    pass


class DuplicateScopeIndex(GraphError):
    pass


class EmptyScope(GraphError):
    pass


class DisconnectedGraph(GraphError):
    pass


class OutOfRangeIndex(GraphError):
    pass


class Factor:
    """A nonnegative factor over an ordered scope of variables.

    Subclasses implement ``log_value(cols)`` where ``cols`` is an (N, k)
    array whose columns are the scope variables' values, returning an (N,)
    array of log factor values (-inf where the factor is zero).
    """

    kind = "abstract"

    def __init__(self, scope):
        self.scope = tuple(int(v) for v in scope)

    def log_value(self, cols):
        raise NotImplementedError

    def value(self, cols):
        return np.exp(self.log_value(cols))

    def params(self):
        raise NotImplementedError


class TableFactor(Factor):
    """Dense tabular factor over discrete variables; axes follow the scope order."""

    kind = "table"

    def __init__(self, scope, table):
        super().__init__(scope)
        table = np.asarray(table, dtype=float)
        if table.ndim != len(self.scope):
            raise GraphError(
                f"table rank {table.ndim} does not match scope size {len(self.scope)}"
            )
        if np.any(table < 0) or not np.all(np.isfinite(table)):
            raise GraphError("table entries must be finite and nonnegative")
        self.table = table
        with np.errstate(divide="ignore"):
            self.log_table = np.log(table)

    def log_value(self, cols):
        cols = np.asarray(cols)
        return self.log_table[tuple(cols[:, i] for i in range(len(self.scope)))]

    def params(self):
        return {"table": self.table.tolist()}


class GaussianPairFactor(Factor):
    """phi(x_i, x_j) = exp(-w * x_i * x_j) for continuous variables."""

    kind = "gaussian-pair"

    def __init__(self, scope, weight):
        if len(scope) != 2:
            raise GraphError("gaussian-pair factor needs a 2-variable scope")
        super().__init__(scope)
        self.weight = float(weight)

    def log_value(self, cols):
        return -self.weight * cols[:, 0] * cols[:, 1]

    def params(self):
        return {"weight": self.weight}


class BinomialLogitObsFactor(Factor):
    """phi(x) = Binomial(y | n, logistic(x)), a unary observation factor."""

    kind = "binomial-logit-obs"

    def __init__(self, scope, n, y):
        if len(scope) != 1:
            raise GraphError("binomial-logit-obs factor is unary")
        super().__init__(scope)
        self.n = int(n)
        self.y = int(y)
        from scipy.special import gammaln

        self._log_choose = float(
            gammaln(self.n + 1) - gammaln(self.y + 1) - gammaln(self.n - self.y + 1)
        )

    def log_value(self, cols):
        x = cols[:, 0]
        return self._log_choose + self.y * x - self.n * np.logaddexp(0.0, x)

    def params(self):
        return {"n": self.n, "y": self.y}


def ising_pair_factor(scope, J):
    """Pair factor exp(J * s_i * s_j) with spins s = 2x - 1 for codes x in {0, 1}."""
    e = np.exp(J)
    return TableFactor(scope, [[e, 1.0 / e], [1.0 / e, e]])


def ising_unary_factor(scope, H):
    """Unary factor exp(H * s) with spin s = 2x - 1."""
    return TableFactor(scope, [np.exp(-H), np.exp(H)])


_FACTOR_KINDS = {
    "table": lambda scope, p: TableFactor(scope, p["table"]),
    "ising-pair": lambda scope, p: ising_pair_factor(scope, p["J"]),
    "ising-unary": lambda scope, p: ising_unary_factor(scope, p["H"]),
    "gaussian-pair": lambda scope, p: GaussianPairFactor(scope, p["weight"]),
    "binomial-logit-obs": lambda scope, p: BinomialLogitObsFactor(scope, p["n"], p["y"]),
}


@dataclass(frozen=True)
class FactorGraph:
    """Immutable factor graph: per-variable domains plus a factor list.

    ``domains[v]`` is an int cardinality for a discrete variable or
    ``CONTINUOUS`` (None) for a continuous scalar.
    """

    domains: tuple
    factors: tuple

    @property
    def num_variables(self):
        return len(self.domains)

    def is_discrete(self):
        return all(d is not CONTINUOUS for d in self.domains)

    def neighbors_of_variable(self, v):
        return tuple(j for j, f in enumerate(self.factors) if v in f.scope)

    def joint_size(self):
        if not self.is_discrete():
            return None
        n = 1
        for d in self.domains:
            n *= int(d)
        return n


def make_graph(domains, factors, validate_graph=True):
    g = FactorGraph(tuple(domains), tuple(factors))
    if validate_graph:
        validate(g)
    return g


def validate(graph):
    """Check all FactorGraph invariants, raising a named error on the first violation."""
    T = graph.num_variables
    if T < 1:
        raise GraphError("graph needs at least one variable")
    for v, d in enumerate(graph.domains):
        if d is not CONTINUOUS and (not isinstance(d, (int, np.integer)) or d < 1):
            raise GraphError(f"variable {v} has invalid domain {d!r}")
    for j, f in enumerate(graph.factors):
        if len(f.scope) == 0:
            raise EmptyScope(f"factor {j} has an empty scope")
        for v in f.scope:
            if v < 0 or v >= T:
                raise OutOfRangeIndex(f"factor {j} references variable {v}, T={T}")
        if len(set(f.scope)) != len(f.scope):
            raise DuplicateScopeIndex(f"factor {j} scope {f.scope} repeats a variable")
    # Connectivity of the bipartite variable-factor graph via variable BFS.
    if T > 1:
        adj = [set() for _ in range(T)]
        for f in graph.factors:
            for a in f.scope:
                for b in f.scope:
                    if a != b:
                        adj[a].add(b)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if len(seen) != T:
            missing = min(set(range(T)) - seen)
            raise DisconnectedGraph(
                f"variable {missing} is not connected to variable 0"
            )


@dataclass(frozen=True)
class VariableOrder:
    """Processing order: ``perm[t]`` is the variable sampled at SMC step t."""

    perm: tuple

    def __post_init__(self):
        p = tuple(int(v) for v in self.perm)
        object.__setattr__(self, "perm", p)
        if sorted(p) != list(range(len(p))):
            raise GraphError(f"order {p} is not a permutation of 0..{len(p) - 1}")

    @property
    def size(self):
        return len(self.perm)

    def positions(self):
        """Inverse permutation: positions()[v] = step at which variable v is sampled."""
        pos = np.empty(len(self.perm), dtype=int)
        pos[list(self.perm)] = np.arange(len(self.perm))
        return pos

    def __iter__(self):
        return iter(self.perm)

    def __getitem__(self, t):
        return self.perm[t]


def identity_order(T):
    return VariableOrder(tuple(range(T)))


@dataclass(frozen=True)
class FactorPartition:
    """Sets F_t of factor indices entering at each step, plus the order used.

    ``steps[t]`` holds the factors whose latest-ordered scope variable sits at
    order position t.  Factor indices within a step are sorted ascending so
    summation order is reproducible.
    """

    order: VariableOrder
    steps: tuple

    def cumulative(self, t):
        out = []
        for s in range(t + 1):
            out.extend(self.steps[s])
        return tuple(out)

    @property
    def num_steps(self):
        return len(self.steps)


def partition_factors(graph, order):
    """Assign each factor to the step of its latest-ordered scope variable."""
    T = graph.num_variables
    if order.size != T:
        raise GraphError("order size does not match graph")
    pos = order.positions()
    steps = [[] for _ in range(T)]
    for j, f in enumerate(graph.factors):
        t = max(pos[v] for v in f.scope)
        steps[t].append(j)
    return FactorPartition(order, tuple(tuple(sorted(s)) for s in steps))


def variable_adjacency(graph):
    """Symmetric 0/1 variable-variable adjacency induced by shared factors."""
    T = graph.num_variables
    rows, cols = [], []
    for f in graph.factors:
        sc = f.scope
        for i in range(len(sc)):
            for k in range(i + 1, len(sc)):
                rows += [sc[i], sc[k]]
                cols += [sc[k], sc[i]]
    data = np.ones(len(rows))
    a = csr_matrix((data, (rows, cols)), shape=(T, T))
    a.data[:] = 1.0
    return a


def min_degree_order(adj):
    """Greedy minimum-degree elimination order on a symmetric sparse pattern.

    Ties break on the smallest variable index, so the result is deterministic.
    """
    T = adj.shape[0]
    nbrs = [set(adj.indices[adj.indptr[i]:adj.indptr[i + 1]]) - {i} for i in range(T)]
    alive = set(range(T))
    order = []
    for _ in range(T):
        v = min(alive, key=lambda u: (len(nbrs[u] & alive), u))
        order.append(v)
        alive.remove(v)
        live = nbrs[v] & alive
        for a in live:
            nbrs[a] |= live - {a}
            nbrs[a].discard(v)
    return order


def reorder(graph, strategy, seed=None):
    """Compute a variable order from the shared-factor adjacency.

    Strategies: ``identity``, ``reverse-cuthill-mckee``, ``approximate-minimum-degree``,
    ``random`` (requires a seed).  Deterministic given (strategy, seed).
    """
    T = graph.num_variables
    if strategy == "identity":
        return identity_order(T)
    if strategy == "random":
        if seed is None:
            raise GraphError("random ordering needs a seed")
        rng = np.random.default_rng(seed)
        return VariableOrder(tuple(rng.permutation(T)))
    adj = variable_adjacency(graph)
    if strategy == "reverse-cuthill-mckee":
        perm = reverse_cuthill_mckee(adj, symmetric_mode=True)
        return VariableOrder(tuple(int(v) for v in perm))
    if strategy == "approximate-minimum-degree":
        return VariableOrder(tuple(min_degree_order(adj)))
    raise GraphError(f"unknown ordering strategy {strategy!r}")


def lump_variables(graph, groups):
    """Merge variable groups into single product-coded variables.

    ``groups`` must partition 0..T-1; all grouped variables must be discrete.
    Returns (lumped graph, codec) where ``codec[g]`` is the list of original
    variables of group g in code order (mixed-radix, last variable fastest).
    Lumping is never applied automatically; callers opt in explicitly.
    """
    T = graph.num_variables
    flat = [v for grp in groups for v in grp]
    if sorted(flat) != list(range(T)):
        raise GraphError("groups must partition the variable set")
    group_of = {}
    for g, grp in enumerate(groups):
        for v in grp:
            if graph.domains[v] is CONTINUOUS:
                raise GraphError("cannot lump continuous variables")
            group_of[v] = g
    codec = [tuple(grp) for grp in groups]
    new_domains = []
    for grp in codec:
        n = 1
        for v in grp:
            n *= graph.domains[v]
        new_domains.append(n)

    def decode(g, code):
        vals = []
        for v in reversed(codec[g]):
            d = graph.domains[v]
            vals.append(code % d)
            code //= d
        return dict(zip(reversed(codec[g]), reversed(vals)))

    new_factors = []
    for f in graph.factors:
        gs = sorted({group_of[v] for v in f.scope})
        shape = tuple(new_domains[g] for g in gs)
        table = np.empty(shape)
        it = np.ndindex(shape)
        for codes in it:
            assign = {}
            for g, c in zip(gs, codes):
                assign.update(decode(g, c))
            cols = np.array([[assign[v] for v in f.scope]])
            table[codes] = np.exp(f.log_value(cols))[0]
        new_factors.append(TableFactor(gs, table))
    return make_graph(new_domains, new_factors), codec


def save_graph(graph, path):
    doc = {
        "T": graph.num_variables,
        "domains": ["continuous" if d is CONTINUOUS else int(d) for d in graph.domains],
        "factors": [
            {"scope": list(f.scope), "kind": f.kind, "params": f.params()}
            for f in graph.factors
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_graph(path):
    with open(path) as fh:
        doc = json.load(fh)
    domains = [CONTINUOUS if d == "continuous" else int(d) for d in doc["domains"]]
    if len(domains) != doc["T"]:
        raise GraphError("domain list length does not match T")
    factors = []
    for spec in doc["factors"]:
        kind = spec["kind"]
        if kind not in _FACTOR_KINDS:
            raise GraphError(f"unknown factor kind {kind!r}")
        factors.append(_FACTOR_KINDS[kind](spec["scope"], spec["params"]))
    return make_graph(domains, factors)

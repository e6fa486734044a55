"""Shared model factories for the test suite."""

import numpy as np
import pytest

from twistsmc import graph as G


def random_chain(T, seed, lo=0.3, hi=3.0, unaries=True):
    """Binary chain with seeded random positive pair tables (and unaries)."""
    rng = np.random.default_rng(seed)
    factors = []
    for t in range(T - 1):
        factors.append(G.TableFactor((t, t + 1), rng.uniform(lo, hi, (2, 2))))
    if unaries:
        for t in range(T):
            factors.append(G.TableFactor((t,), rng.uniform(lo, hi, 2)))
    return G.make_graph([2] * T, factors)


def random_attachment_tree(T, seed, lo=0.3, hi=3.0):
    """Random tree where node t attaches to an earlier node, so every prefix
    of the identity order is connected (the subtree condition for message
    twisting optimality)."""
    rng = np.random.default_rng(seed)
    factors = []
    for t in range(1, T):
        parent = int(rng.integers(0, t))
        factors.append(G.TableFactor((parent, t), rng.uniform(lo, hi, (2, 2))))
    for t in range(T):
        factors.append(G.TableFactor((t,), rng.uniform(lo, hi, 2)))
    return G.make_graph([2] * T, factors)


def all_assignments(domains):
    """(prod(domains), len(domains)) array enumerating the joint space."""
    grids = np.meshgrid(*[np.arange(d) for d in domains], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


@pytest.fixture
def chain4():
    return random_chain(4, seed=11)


@pytest.fixture
def tree8():
    return random_attachment_tree(8, seed=5)

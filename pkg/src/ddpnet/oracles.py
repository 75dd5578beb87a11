"""Brute-force reference computations used to check the fast code paths.

Nothing here reuses derivative code from ``netgraph`` or ``ddpsgd``: the
only shared piece is the forward pass that supplies activation patterns.
"""

from dataclasses import dataclass

import numpy as np

from . import netgraph
from .errors import InadmissiblePoint, PathLimitExceeded

EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class FiniteDiffSpec:
    """Central-difference settings.

    ``step=None`` picks ``eps**(1/3) * max(1, |w_e|)`` for first differences
    and ``eps**(1/4) * max(1, |w_e|)`` for second differences.  ``kink_margin``
    is relative to the largest internal pre-activation on the batch.
    """

    step: float = None
    kink_margin: float = 1e-4

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not self.kink_margin > 0:
            raise ValueError(f"kink_margin must be positive, got {self.kink_margin}")

    def steps(self, w, order=1):
        if self.step is not None:
            return np.full(w.shape, float(self.step))
        base = EPS ** (1.0 / 3.0) if order == 1 else EPS**0.25
        return base * np.maximum(1.0, np.abs(w))


def kink_distance(topology, weights, batch):
    """Smallest ``|z_v|`` over internal nodes and examples, and the activation scale."""
    if len(topology.internal) == 0:
        return np.inf, 1.0
    z = netgraph.forward(topology, weights, batch).z[:, topology.internal]
    scale = max(float(np.max(np.abs(z))), 1e-300)
    return float(np.min(np.abs(z))), scale


def check_admissible(topology, weights, batch, spec=None):
    """Raise InadmissiblePoint if some internal pre-activation is near zero."""
    spec = spec or FiniteDiffSpec()
    dist, scale = kink_distance(topology, weights, batch)
    if dist < spec.kink_margin * scale:
        raise InadmissiblePoint(
            f"pre-activation {dist:.3e} within {spec.kink_margin:.0e} x {scale:.3e} of a ReLU kink"
        )


def sample_admissible(make, rng, spec=None, tries=200):
    """Draw ``(topology, weights, batch) = make(rng)`` until it clears the kink margin."""
    for _ in range(tries):
        inst = make(rng)
        try:
            check_admissible(*inst[:3], spec)
        except InadmissiblePoint:
            continue
        return inst
    raise InadmissiblePoint(f"no admissible instance in {tries} draws")


def _pattern(topology, weights, batch):
    return netgraph.forward(topology, weights, batch).z[:, topology.internal] > 0


def _guard(topology, batch, spec):
    """Base point must clear the kink margin; perturbed points must keep its activation pattern."""
    if topology is None or batch is None:
        return lambda w, base=False: None
    ref = {}

    def guard(w, base=False):
        if base:
            check_admissible(topology, w, batch, spec)
            ref["pattern"] = _pattern(topology, w, batch)
        elif not np.array_equal(_pattern(topology, w, batch), ref["pattern"]):
            raise InadmissiblePoint("finite-difference step crosses a ReLU kink")

    return guard


def finite_difference_gradient(f, weights, spec=None, topology=None, batch=None):
    """Central differences of a scalar function.

    When ``topology`` and ``batch`` are given the test point must clear the
    kink margin and no perturbed point may change the activation pattern.
    """
    spec = spec or FiniteDiffSpec()
    w = np.asarray(weights, dtype=np.float64)
    guard = _guard(topology, batch, spec)
    guard(w, base=True)
    h = spec.steps(w, order=1)
    g = np.zeros_like(w)
    for e in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[e] += h[e]
        wm[e] -= h[e]
        guard(wp)
        guard(wm)
        g[e] = (f(wp) - f(wm)) / (2.0 * h[e])
    return g


def finite_difference_diagonal_hessian(f, weights, spec=None, topology=None, batch=None):
    """Central second differences ``d^2 f / d w_e^2`` for every coordinate."""
    spec = spec or FiniteDiffSpec()
    w = np.asarray(weights, dtype=np.float64)
    guard = _guard(topology, batch, spec)
    guard(w, base=True)
    h = spec.steps(w, order=2)
    f0 = f(w)
    d = np.zeros_like(w)
    for e in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[e] += h[e]
        wm[e] -= h[e]
        guard(wp)
        guard(wm)
        d[e] = (f(wp) - 2.0 * f0 + f(wm)) / (h[e] * h[e])
    return d


def per_output_jacobian(topology, weights, x):
    """``d f(x)[k] / d w`` for one example, one reverse sweep per output."""
    w = np.asarray(weights, dtype=np.float64)
    act = netgraph.forward(topology, w, np.asarray(x, dtype=np.float64)[None, :])
    z, h = act.z[0], act.h[0]
    rows = np.zeros((topology.n_outputs, topology.n_edges))
    edges = list(zip(topology.src.tolist(), topology.dst.tolist()))
    for k, out in enumerate(topology.outputs):
        adj = [0.0] * topology.n_nodes
        adj[out] = 1.0
        for u in reversed(range(topology.n_nodes)):
            if topology.kinds[u] != netgraph.INTERNAL:
                continue
            total = 0.0
            for e, (s, d) in enumerate(edges):
                if s == u:
                    total += w[e] * adj[d]
            adj[u] = total if z[u] > 0 else 0.0
        for e, (s, d) in enumerate(edges):
            rows[k, e] = adj[d] * h[s]
    return rows


def diagonal_fisher_gaussian(topology, weights, batch):
    """Mean over the batch of the summed squared output Jacobian, per edge."""
    x = batch.inputs if isinstance(batch, netgraph.Batch) else np.atleast_2d(batch)
    total = np.zeros(topology.n_edges)
    for xi in x:
        total += np.sum(per_output_jacobian(topology, weights, xi) ** 2, axis=0)
    return total / x.shape[0]


def _all_paths(topology, limit):
    """Depth-first enumeration of head->output edge sequences."""
    out_edges = {u: [] for u in range(topology.n_nodes)}
    for e, (s, d) in enumerate(zip(topology.src.tolist(), topology.dst.tolist())):
        out_edges[s].append((e, d))
    heads = list(topology.inputs) + ([topology.bias] if topology.bias is not None else [])
    found = []
    stack = [(int(u), ()) for u in heads]
    while stack:
        u, path = stack.pop()
        if topology.kinds[u] == netgraph.OUTPUT:
            found.append(path)
            if len(found) > limit:
                raise PathLimitExceeded(len(found), limit)
            continue
        for e, d in out_edges[u]:
            stack.append((d, path + (e,)))
    return found


def brute_force_path_kappa(topology, weights, edge, path_limit=100_000):
    """Sum over paths through ``edge`` of the squared product of the other weights."""
    w = np.asarray(weights, dtype=np.float64)
    total = 0.0
    for path in _all_paths(topology, path_limit):
        if edge not in path:
            continue
        prod = 1.0
        for e in path:
            if e != edge:
                prod *= w[e] * w[e]
        total += prod
    return total

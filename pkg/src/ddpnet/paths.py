"""Path-level view of a ReLU network.

A path runs from an input (or the bias) to an output.  The network output
decomposes as ``f(x)[v] = sum_p pi_p(w) phi_p(x)`` over paths ending in
``v``, where ``pi_p`` is the product of weights on the path and ``phi_p``
is the head value gated by the activation pattern.  The rank of the
path-Jacobian ``d pi / d w`` bounds how many directions in weight space
actually change the function.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import netgraph
from .errors import PathLimitExceeded

DEFAULT_PATH_LIMIT = 100_000
RANK_REL_TOL = 1e-8
KINK_TOL = 1e-9


@dataclass(frozen=True)
class PathSet:
    """Input/bias-to-output paths as tuples of edge indices, sorted lexicographically."""

    paths: tuple
    heads: np.ndarray
    tails: np.ndarray
    n_edges: int
    incidence: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.paths)

    def head(self, p):
        return int(self.heads[p])

    def tail(self, p):
        return int(self.tails[p])

    def ending_at(self, v):
        return np.flatnonzero(self.tails == v)


@dataclass(frozen=True)
class PathJacobian:
    J: np.ndarray
    pi: np.ndarray
    M: np.ndarray

    def factorized(self, weights):
        """``diag(pi) M diag(1/w)``; only meaningful when no weight is zero."""
        w = np.asarray(weights, dtype=np.float64)
        return self.pi[:, None] * self.M / w[None, :]


def count_paths(topology):
    """Exact number of head-to-output paths by dynamic programming."""
    to_out = np.zeros(topology.n_nodes, dtype=object)
    for u in range(topology.n_nodes - 1, -1, -1):
        if topology.kinds[u] == netgraph.OUTPUT:
            to_out[u] = 1
        else:
            to_out[u] = sum(to_out[d] for d in topology.dst[topology.out_edges[u]].tolist())
    heads = list(topology.inputs) + ([topology.bias] if topology.bias is not None else [])
    return int(sum(to_out[u] for u in heads))


def enumerate_paths(topology, limit=DEFAULT_PATH_LIMIT):
    total = count_paths(topology)
    if total > limit:
        raise PathLimitExceeded(total, limit)
    heads = list(topology.inputs) + ([topology.bias] if topology.bias is not None else [])
    found = []

    def walk(u, prefix):
        if topology.kinds[u] == netgraph.OUTPUT:
            found.append(prefix)
            return
        for e in topology.out_edges[u].tolist():
            walk(int(topology.dst[e]), prefix + (e,))

    for u in heads:
        walk(int(u), ())
    found.sort()
    paths = tuple(found)
    M = np.zeros((len(paths), topology.n_edges))
    for p, path in enumerate(paths):
        M[p, list(path)] = 1.0
    h = np.array([int(topology.src[p[0]]) for p in paths], dtype=np.intp)
    t = np.array([int(topology.dst[p[-1]]) for p in paths], dtype=np.intp)
    return PathSet(paths, h, t, topology.n_edges, M)


def path_features(path_set, topology, weights, x):
    """``phi_p(x) = g_p(x) x[head(p)]``; returns ``(n, |paths|)`` or a vector for one example."""
    single = np.ndim(x) == 1
    act = netgraph.forward(topology, weights, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    dead = (act.z <= 0).astype(np.float64)
    dead[:, [v for v, k in enumerate(topology.kinds) if k != netgraph.INTERNAL]] = 0.0
    # internal nodes visited by each path
    visits = np.zeros((len(path_set), topology.n_nodes))
    for p, path in enumerate(path_set.paths):
        visits[p, topology.dst[list(path[:-1])]] = 1.0
    gate = (dead @ visits.T) == 0
    phi = gate * act.h[:, path_set.heads]
    return phi[0] if single else phi


def path_jacobian(path_set, weights):
    """Exact ``d pi_p / d w_e`` via prefix/suffix products (safe with zero weights)."""
    w = np.asarray(weights, dtype=np.float64)
    J = np.zeros((len(path_set), path_set.n_edges))
    pi = np.zeros(len(path_set))
    for p, path in enumerate(path_set.paths):
        vals = w[list(path)]
        pre = np.concatenate([[1.0], np.cumprod(vals)[:-1]])
        suf = np.concatenate([np.cumprod(vals[::-1])[::-1][1:], [1.0]])
        J[p, list(path)] = pre * suf
        pi[p] = np.prod(vals)
    return PathJacobian(J, pi, path_set.incidence)


def numerical_rank(matrix, rel_tol=RANK_REL_TOL):
    """Number of singular values above ``rel_tol * sigma_max``."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def generic_rank_prediction(topology):
    return topology.n_edges - len(topology.internal)


@dataclass(frozen=True)
class DegreesOfFreedom:
    d_G: int
    dim_N: int
    probe_count: int
    warning: str = None


def _near_kink(topology, weights, x, tol):
    z = netgraph.forward(topology, weights, x).z[:, topology.internal]
    return np.any(np.abs(z) < tol, axis=1)


def default_probes(topology, weights, rng, count=None, kink_tol=KINK_TOL):
    """Standard-normal probes (``4 |E|`` by default) resampled away from kinks."""
    count = 4 * topology.n_edges if count is None else count
    x = rng.standard_normal((count, topology.n_inputs))
    for _ in range(100):
        bad = _near_kink(topology, weights, x, kink_tol)
        if not bad.any():
            break
        x[bad] = rng.standard_normal((int(bad.sum()), topology.n_inputs))
    return x


def degrees_of_freedom(topology, weights, probe_inputs=None, rng=None, rel_tol=RANK_REL_TOL,
                       kink_tol=KINK_TOL):
    """Rank of the per-output Jacobians stacked over probes.

    Caller-supplied probes sitting within ``kink_tol`` of a kink are dropped
    (the result then carries a warning).
    """
    w = netgraph.check_weights(topology, weights)
    notes = []
    if probe_inputs is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = default_probes(topology, w, rng, kink_tol=kink_tol)
    else:
        x = np.atleast_2d(np.asarray(probe_inputs, dtype=np.float64))
        bad = _near_kink(topology, w, x, kink_tol)
        if bad.any():
            notes.append(f"dropped {int(bad.sum())} probes within {kink_tol:g} of a kink")
            x = x[~bad]
    if x.shape[0] < topology.n_edges:
        notes.append(f"only {x.shape[0]} probes for {topology.n_edges} edges; d_G may be underestimated")
    if x.shape[0] == 0:
        return DegreesOfFreedom(0, topology.n_edges, 0, "; ".join(notes))
    jac = netgraph.output_jacobian(topology, w, x).reshape(-1, topology.n_edges)
    d = numerical_rank(jac, rel_tol)
    return DegreesOfFreedom(d, topology.n_edges - d, x.shape[0], "; ".join(notes) or None)


def _squared_distance(z, z2):
    diff = np.asarray(z) - np.asarray(z2)
    return float(diff @ diff)


def _squared_hessian(z):
    return 2.0 * np.eye(np.asarray(z).size)


@dataclass(frozen=True)
class MetricSpec:
    """Output-space discrepancy ``m(z, z')`` and its Hessian in ``z'`` at ``z' = z``."""

    name: str = "squared"
    distance: object = field(default=_squared_distance, repr=False)
    hessian: object = field(default=_squared_hessian, repr=False)


@dataclass(frozen=True)
class FisherResult:
    F: np.ndarray
    rank: int
    dim_N: int


def distribution_fisher(topology, weights, batch, metric=None, rel_tol=RANK_REL_TOL):
    """``F = (1/n) sum_i J_i^T H(f(x_i)) J_i`` with its numerical rank."""
    metric = metric or MetricSpec()
    act = netgraph.forward(topology, weights, batch)
    jac = netgraph.output_jacobian(topology, weights, batch, act=act)
    F = np.zeros((topology.n_edges, topology.n_edges))
    for Ji, out in zip(jac, act.outputs):
        F += Ji.T @ metric.hessian(out) @ Ji
    F /= jac.shape[0]
    r = numerical_rank(F, rel_tol)
    return FisherResult(F, r, topology.n_edges - r)


def analysis_report(topology, weights, data=None, rng=None, limit=DEFAULT_PATH_LIMIT,
                    rel_tol=RANK_REL_TOL, kink_tol=KINK_TOL):
    """Summary of the path geometry at ``weights``.

    ``data`` (inputs only) drives the distribution-dependent rank; probes
    for ``d_G`` are drawn from ``rng``.
    """
    w = netgraph.check_weights(topology, weights)
    ps = enumerate_paths(topology, limit)
    pj = path_jacobian(ps, w)
    dof = degrees_of_freedom(topology, w, rng=rng, rel_tol=rel_tol, kink_tol=kink_tol)
    report = {
        "paths": len(ps),
        "rank_J": numerical_rank(pj.J, rel_tol),
        "predicted_rank": generic_rank_prediction(topology),
        "d_G": dof.d_G,
        "dim_N": dof.dim_N,
        "d_GD": None,
        "probe_count": dof.probe_count,
        "tolerances": {"rank_rel_tol": rel_tol, "kink_tol": kink_tol},
    }
    if data is not None:
        report["d_GD"] = distribution_fisher(topology, w, data, rel_tol=rel_tol).rank
    if dof.warning:
        report["warning"] = dof.warning
    return report


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

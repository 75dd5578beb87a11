"""Diagonal steepest descent w.r.t. the DDP regularizer.

The per-edge scale is ``kappa_e = 1/2 d^2 gamma_net^2 / d w_e^2``.  With the
activation pattern held fixed, ``gamma_net^2`` unrolls to

    alpha * sum_v G_v S(z_v) + sum_{u in inputs} G_u gamma_u^2,
    G_u = [u is output] + (1 - alpha) sum_{c in N_out(u)} G_c w_{u->c}^2,

where ``G_v = d gamma_net^2 / d gamma_v^2`` depends only on weights
downstream of ``v``.  Each ``z_{v'}`` is linear in a single weight
``w_{u->v}`` with slope ``P[v', v] h_u`` (``P`` the total sensitivity
``d z_{v'} / d z_v``), so the second derivative is available in closed form.
"""

from dataclasses import dataclass

import numpy as np

from . import netgraph
from .complexity import gamma_forward, moment
from .errors import DimensionError, NonFiniteError


@dataclass(frozen=True)
class SecondOrderAdjoint:
    """``dgamma[v] = d gamma_net^2 / d gamma_v^2`` and, per example, the
    coefficient matrix ``dzz[i, a, b]`` of ``z_a^(i) z_b^(i)`` in the
    second-moment part of ``gamma_net^2`` (symmetric in a, b)."""

    dgamma: np.ndarray
    dzz: np.ndarray = None


def gamma_adjoint(topology, weights, config):
    """Reverse sweep for ``d gamma_net^2 / d gamma_v^2``."""
    w = np.asarray(weights, dtype=np.float64)
    G = np.zeros(topology.n_nodes)
    G[topology.outputs] = 1.0
    keep = 1.0 - config.alpha
    for u in range(topology.n_nodes - 1, -1, -1):
        e = topology.out_edges[u]
        if e.size:
            G[u] += keep * np.dot(G[topology.dst[e]], w[e] ** 2)
    return G


def second_order_adjoint(topology, weights, batch, config):
    """Materialize the full adjoint, including per-example pair terms.

    Memory is ``O(n |V|^2)``; meant for inspection and tests rather than
    the training loop.
    """
    w = netgraph.check_weights(topology, weights)
    G = gamma_adjoint(topology, w, config)
    if not config.uses_data:
        return SecondOrderAdjoint(G)
    act = netgraph.forward(topology, w, batch)
    P = netgraph.sensitivities(topology, w, act)
    n = P.shape[0]
    coef = config.alpha * G
    coef[list(topology.inputs)] = 0.0
    if topology.bias is not None:
        coef[topology.bias] = 0.0
    dzz = np.einsum("iab,a,iac->ibc", P, coef / n, P)
    return SecondOrderAdjoint(G, dzz)


def kappa(topology, weights, batch, config, act=None):
    """Per-edge DDP-SGD scaling factors, floored at ``config.kappa_floor``.

    Args:
        batch: statistics batch; may be ``None`` when ``config.alpha == 0``.
        act: precomputed activations of ``batch`` (optional).
    """
    w = netgraph.check_weights(topology, weights)
    a = config.alpha
    G = gamma_adjoint(topology, w, config)
    g2 = None
    if a < 1:
        g2 = gamma_forward(topology, w, batch, config, act=act).gamma_sq
    src, dst = topology.src, topology.dst
    k = np.zeros(topology.n_edges)
    if a < 1:
        k += (1.0 - a) * G[dst] * g2[src]
    if a > 0:
        if act is None:
            if batch is None or len(batch) == 0:
                raise DimensionError("alpha > 0 needs a non-empty batch")
            act = netgraph.forward(topology, w, batch)
        P = netgraph.sensitivities(topology, w, act)
        computed = np.array([k_ not in (netgraph.INPUT, netgraph.BIAS) for k_ in topology.kinds])
        live = np.flatnonzero((G != 0) & computed)
        # slope of z_{v'} in w_{u->v}, per example: P[v', v] * h_u
        slope = P[:, live, :][:, :, dst] * act.h[:, None, src]
        k += a * (G[live] @ moment(slope, config.s_mode, axis=0))
    if not np.all(np.isfinite(k)):
        bad = int(np.flatnonzero(~np.isfinite(k))[0])
        raise NonFiniteError(topology.edges[bad], what="kappa")
    return np.maximum(k, config.kappa_floor)


def ddp_sgd_step(weights, grad, kappa_values, eta):
    """``w_e - eta / kappa_e * dL/dw_e``; returns a new array."""
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    k = np.asarray(kappa_values, dtype=np.float64)
    if not (w.shape == g.shape == k.shape):
        raise DimensionError(f"shape mismatch: w{w.shape} grad{g.shape} kappa{k.shape}")
    return w - eta * g / k


def ddp_sgd_update(topology, weights, batch, loss, config, eta, stats_batch=None):
    """One DDP-SGD step; ``kappa`` uses ``stats_batch`` when given, else ``batch``."""
    grad = netgraph.loss_gradient(topology, weights, batch, loss)
    k = kappa(topology, weights, batch if stats_batch is None else stats_batch, config)
    return ddp_sgd_step(weights, grad, k, eta)


def verify_rescaling_invariance(topology, weights, batch, loss, config, eta, node, rho, probes):
    """Function discrepancy between one DDP-SGD step from ``w`` and from ``T(w)``.

    ``T`` is the node-wise rescaling at ``node`` by ``rho``; gradient and
    kappa share ``batch`` in both runs.
    """
    w = netgraph.check_weights(topology, weights)
    tw = netgraph.apply_node_rescaling(w, topology, node, rho)
    step = ddp_sgd_update(topology, w, batch, loss, config, eta)
    step_t = ddp_sgd_update(topology, tw, batch, loss, config, eta)
    return netgraph.function_distance(topology, step, step_t, probes)


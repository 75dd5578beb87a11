"""DDP-Normalization: SGD in the reparametrization ``w_{u->v} = w~_{u->v} / gamma~_v``.

For every internal node ``v`` the normalizer is

    gamma~_v^2 = (1 - alpha) sum_u D_u w~_{u->v}^2 + alpha S(z~_v),

with ``D_u = 1`` for internal nodes (already normalized upstream) and
``input_gamma_sq`` for input and bias nodes.  ``alpha = 1`` with the variance
mode is Batch-Normalization without the shift/scale parameters; output
nodes are left un-normalized, so every function of the plain network is
reachable.

Batch statistics are computed over *statistics rows* with per-row weights
``s_i`` (``1/n`` on the statistics batch, 0 elsewhere) so that the same
code covers the shared-batch and held-out-statistics modes.
"""

from dataclasses import dataclass

import numpy as np

from . import netgraph
from .complexity import VARIANCE, gamma_forward
from .errors import DegenerateNormalizationError, DimensionError, NonFiniteError

EMA_DECAY = 0.9


def upstream_scale(topology, config):
    """Diagonal of the data-independent part of R_v inside a normalized net."""
    d = np.ones(topology.n_nodes)
    d[topology.inputs] = config.input_gamma_sq
    if topology.bias is not None:
        d[topology.bias] = config.input_gamma_sq
    return d


@dataclass(frozen=True)
class NormalizedState:
    """Forward pass of a DDP-Normalized net on stacked loss/statistics rows."""

    z_tilde: np.ndarray
    z: np.ndarray
    h: np.ndarray
    gamma_sq: np.ndarray  # nan on non-internal nodes
    center: np.ndarray  # weighted mean of z~ (variance mode), else 0
    row_weights: np.ndarray
    n_loss: int


def _stack(batch, stats_batch):
    x = batch.inputs if isinstance(batch, netgraph.Batch) else netgraph.Batch(batch).inputs
    if stats_batch is None:
        return x, np.full(x.shape[0], 1.0 / x.shape[0]), x.shape[0]
    xs = stats_batch.inputs if isinstance(stats_batch, netgraph.Batch) else netgraph.Batch(stats_batch).inputs
    s = np.concatenate([np.zeros(x.shape[0]), np.full(xs.shape[0], 1.0 / xs.shape[0])])
    return np.vstack([x, xs]), s, x.shape[0]


def normalized_forward(topology, tilde_w, batch, config, stats_batch=None, gamma_sq=None):
    """Forward pass with per-node normalization.

    Args:
        stats_batch: batch for the statistics; defaults to ``batch`` itself.
        gamma_sq: fixed per-node normalizers (e.g. running averages); when
            given no statistics are estimated.
    """
    tw = netgraph.check_weights(topology, tilde_w)
    x, s, n_loss = _stack(batch, stats_batch)
    if x.shape[1] != topology.n_inputs:
        raise DimensionError(f"batch width {x.shape[1]} != {topology.n_inputs} inputs")
    n, nv = x.shape[0], topology.n_nodes
    zt, z, h = np.zeros((n, nv)), np.zeros((n, nv)), np.zeros((n, nv))
    z[:, topology.inputs] = h[:, topology.inputs] = zt[:, topology.inputs] = x
    if topology.bias is not None:
        z[:, topology.bias] = h[:, topology.bias] = zt[:, topology.bias] = 1.0
    g2 = np.full(nv, np.nan)
    mu = np.zeros(nv)
    D = upstream_scale(topology, config)
    a = config.alpha
    floor = config.kappa_floor**2
    with np.errstate(over="ignore", invalid="ignore"):
        for v, kind in enumerate(topology.kinds):
            if kind in (netgraph.INPUT, netgraph.BIAS):
                continue
            e = topology.in_edges[v]
            ztv = h[:, topology.src[e]] @ tw[e]
            if not np.all(np.isfinite(ztv)):
                raise NonFiniteError(topology.node_ids[v])
            zt[:, v] = ztv
            if kind == netgraph.OUTPUT:
                z[:, v] = h[:, v] = ztv
                continue
            if gamma_sq is not None:
                gv = float(gamma_sq[v])
            else:
                gv = (1.0 - a) * float(np.dot(D[topology.src[e]], tw[e] ** 2))
                if a > 0:
                    if config.s_mode == VARIANCE:
                        mu[v] = s @ ztv
                        gv += a * float(s @ (ztv - mu[v]) ** 2)
                    else:
                        gv += a * float(s @ (ztv * ztv))
            if not gv > floor:
                raise DegenerateNormalizationError(topology.node_ids[v], gv)
            g2[v] = gv
            z[:, v] = ztv / np.sqrt(gv)
            h[:, v] = np.maximum(z[:, v], 0.0)
    return NormalizedState(zt, z, h, g2, mu, s, n_loss)


def tilde_gamma(topology, tilde_w, batch, config):
    """Per-node ``gamma~^2`` on ``batch`` (nan on input, bias and output nodes)."""
    return normalized_forward(topology, tilde_w, batch, config).gamma_sq


def realize_weights(topology, tilde_w, tilde_gamma_sq):
    """Plain-network weights: incoming weights of internal nodes divided by gamma~."""
    tw = netgraph.check_weights(topology, tilde_w)
    g2 = np.asarray(tilde_gamma_sq, dtype=np.float64)
    w = tw.copy()
    for v in topology.internal:
        if not g2[v] > 0:
            raise DegenerateNormalizationError(topology.node_ids[v], g2[v])
        e = topology.in_edges[v]
        w[e] = tw[e] / np.sqrt(g2[v])
    return w


def realize(topology, tilde_w, batch, config):
    return realize_weights(topology, tilde_w, tilde_gamma(topology, tilde_w, batch, config))


def normalize_network(topology, weights, batch, config):
    """Node-wise rescale ``weights`` so every internal gamma_v is 1.

    The returned vector computes the same function and is a fixed point of
    the reparametrization, so it serves as ``w~`` for the same network.
    """
    w = netgraph.check_weights(topology, weights).copy()
    for v in topology.internal:
        g2 = gamma_forward(topology, w, batch, config).gamma_sq[v]
        if not g2 > config.kappa_floor**2:
            raise DegenerateNormalizationError(topology.node_ids[v], g2)
        w = netgraph.apply_node_rescaling(w, topology, v, np.sqrt(g2))
    return w


def ddpnorm_loss_and_gradient(topology, tilde_w, batch, loss, config, stats_batch=None):
    """Batch loss and its exact gradient w.r.t. ``w~``.

    Batch statistics are differentiated as functions of ``w~``, including
    the coupling through the statistics mean in variance mode.
    """
    if batch.labels is None:
        raise DimensionError("ddpnorm_gradient requires labels")
    tw = netgraph.check_weights(topology, tilde_w)
    st = normalized_forward(topology, tw, batch, config, stats_batch=stats_batch)
    value, d_out = loss.value_and_grad(st.z[: st.n_loss][:, topology.outputs], batch.labels)
    n = st.z.shape[0]
    D = upstream_scale(topology, config)
    a = config.alpha
    s = st.row_weights
    dh = np.zeros_like(st.z)
    grad = np.zeros(topology.n_edges)
    out_pos = {int(v): k for k, v in enumerate(topology.outputs)}
    for v in range(topology.n_nodes - 1, -1, -1):
        kind = topology.kinds[v]
        if kind in (netgraph.INPUT, netgraph.BIAS):
            continue
        e = topology.in_edges[v]
        hs = st.h[:, topology.src[e]]
        if kind == netgraph.OUTPUT:
            dzt = np.zeros(n)
            dzt[: st.n_loss] = d_out[:, out_pos[v]]
            grad[e] = hs.T @ dzt
        else:
            dz = np.where(st.z[:, v] > 0, dh[:, v], 0.0)
            g2 = st.gamma_sq[v]
            # dL/d(gamma~^2) through z_v = z~_v / gamma~_v
            c = -float(dz @ st.z[:, v]) / (2.0 * g2)
            dzt = dz / np.sqrt(g2)
            if a > 0:
                ztv = st.z_tilde[:, v]
                dS = 2.0 * s * (ztv - st.center[v] if config.s_mode == VARIANCE else ztv)
                dzt = dzt + c * a * dS
            grad[e] = hs.T @ dzt + c * 2.0 * (1.0 - a) * D[topology.src[e]] * tw[e]
        dh[:, topology.src[e]] += np.outer(dzt, tw[e])
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("<ddpnorm>", what="gradient")
    return value, grad


def ddpnorm_gradient(topology, tilde_w, batch, loss, config, stats_batch=None):
    return ddpnorm_loss_and_gradient(topology, tilde_w, batch, loss, config, stats_batch)[1]


def sgd_step_tilde(tilde_w, grad, eta):
    """Plain gradient step on ``w~``; returns a new array."""
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    tw = np.asarray(tilde_w, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if tw.shape != g.shape:
        raise DimensionError(f"shape mismatch: w~{tw.shape} grad{g.shape}")
    return tw - eta * g


def rescale_incoming(tilde_w, topology, node, rho):
    """Multiply the incoming ``w~`` of an internal node by ``rho``.

    The normalized network computes the same function afterwards.
    """
    v = topology.resolve(node)
    if not topology.is_internal(v):
        raise ValueError(f"node {topology.node_ids[v]!r} is not internal")
    if not rho > 0:
        raise ValueError(f"rescaling factor must be positive, got {rho}")
    out = np.array(tilde_w, dtype=np.float64, copy=True)
    out[topology.in_edges[v]] *= rho
    return out


class RunningNormalizers:
    """Exponential moving average of ``gamma~^2`` for evaluation-time use."""

    def __init__(self, topology, decay=EMA_DECAY):
        self.decay = decay
        self.value = None
        self._internal = topology.internal

    def update(self, gamma_sq):
        g = np.asarray(gamma_sq, dtype=np.float64)
        if self.value is None:
            self.value = g.copy()
        else:
            idx = self._internal
            self.value[idx] = self.decay * self.value[idx] + (1.0 - self.decay) * g[idx]
        return self.value

    def realize(self, topology, tilde_w):
        if self.value is None:
            raise RuntimeError("no statistics recorded yet")
        return realize_weights(topology, tilde_w, self.value)

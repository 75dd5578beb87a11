"""Per-node complexity ``gamma_v^2 = w_{->v}^T R_v w_{->v}`` and its network sum.

``R_v`` interpolates between the data-independent diagonal of upstream
complexities (``alpha = 0``, the l2 path regularizer) and the empirical
covariance or second moment of the fan-in outputs (``alpha = 1``).
All empirical moments use 1/n normalization.
"""

from dataclasses import dataclass

import numpy as np

from . import netgraph
from .errors import ConfigError, DimensionError

VARIANCE = "variance"
SECOND_MOMENT = "second_moment"
S_MODES = (VARIANCE, SECOND_MOMENT)


@dataclass(frozen=True)
class ComplexityConfig:
    alpha: float = 0.0
    s_mode: str = SECOND_MOMENT
    input_gamma_sq: float = 1.0
    kappa_floor: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.s_mode not in S_MODES:
            raise ConfigError("s_mode", f"must be one of {S_MODES}, got {self.s_mode!r}")
        if not self.input_gamma_sq > 0:
            raise ConfigError("input_gamma_sq", f"must be positive, got {self.input_gamma_sq}")
        if not self.kappa_floor > 0:
            raise ConfigError("kappa_floor", f"must be positive, got {self.kappa_floor}")

    @property
    def uses_data(self):
        return self.alpha > 0


def moment(values, s_mode, axis=0):
    """Empirical variance or uncentered second moment with 1/n."""
    if s_mode == VARIANCE:
        centered = values - values.mean(axis=axis, keepdims=True)
        return np.mean(centered * centered, axis=axis)
    return np.mean(values * values, axis=axis)


@dataclass(frozen=True)
class NodeGamma:
    gamma_sq: np.ndarray

    def __getitem__(self, v):
        return self.gamma_sq[v]


def _activations(topology, weights, batch, config, act):
    if act is not None:
        return act
    if batch is None or len(batch) == 0:
        if config.uses_data:
            raise DimensionError("alpha > 0 needs a non-empty batch")
        return None
    return netgraph.forward(topology, weights, batch)


def gamma_forward(topology, weights, batch, config, act=None):
    """One forward sweep of the recursion

    ``gamma_v^2 = alpha S(z_v) + (1 - alpha) sum_u gamma_u^2 w_{u->v}^2``

    with ``gamma^2 = input_gamma_sq`` on input and bias nodes.  ``batch`` may
    be ``None`` when ``alpha == 0``.
    """
    w = netgraph.check_weights(topology, weights)
    act = _activations(topology, w, batch, config, act)
    a = config.alpha
    g2 = np.zeros(topology.n_nodes)
    for v, kind in enumerate(topology.kinds):
        if kind in (netgraph.INPUT, netgraph.BIAS):
            g2[v] = config.input_gamma_sq
            continue
        e = topology.in_edges[v]
        val = (1.0 - a) * np.dot(g2[topology.src[e]], w[e] ** 2)
        if a > 0:
            val += a * moment(act.z[:, v], config.s_mode)
        g2[v] = val
    return NodeGamma(g2)


def gamma_net(node_gamma, topology):
    """Sum of ``gamma_v^2`` over the output nodes."""
    return float(np.sum(node_gamma.gamma_sq[topology.outputs]))


def gamma_net_of(topology, weights, batch, config):
    return gamma_net(gamma_forward(topology, weights, batch, config), topology)


def estimate_R(topology, activations, node, config, node_gamma=None):
    """Fan-in matrix ``R_v = alpha (C or M) + (1 - alpha) diag(gamma^2_{N_in(v)})``.

    Rows/columns follow the order of ``topology.in_edges[v]``.  ``node_gamma``
    supplies the upstream complexities and is required whenever alpha < 1.
    """
    v = topology.resolve(node)
    e = topology.in_edges[v]
    if e.size == 0:
        raise ValueError(f"node {topology.node_ids[v]!r} has no fan-in")
    fan = topology.src[e]
    a = config.alpha
    R = np.zeros((fan.size, fan.size))
    if a > 0:
        if activations is None or activations.h.shape[0] == 0:
            raise DimensionError("alpha > 0 needs activations from a non-empty batch")
        H = activations.h[:, fan]
        if config.s_mode == VARIANCE:
            H = H - H.mean(axis=0)
        R += a * (H.T @ H) / H.shape[0]
    if a < 1:
        if node_gamma is None:
            raise ValueError("node_gamma is required for alpha < 1")
        R += (1.0 - a) * np.diag(node_gamma.gamma_sq[fan])
    return R

"""Feedforward ReLU networks on an arbitrary DAG.

The topology is the indexing authority for every vector in the package:
nodes are stored in a fixed topological order and edges are sorted by
``(topo index of dst, topo index of src)``.  Weight vectors are plain
float64 numpy arrays aligned to that edge order.
"""

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, NonFiniteError, TopologyError

INPUT = "input"
BIAS = "bias"
INTERNAL = "internal"
OUTPUT = "output"
NODE_KINDS = (INPUT, BIAS, INTERNAL, OUTPUT)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def _topological_order(ids, edges):
    """Kahn's algorithm; ties broken by declaration order. None on a cycle."""
    pos = {nid: i for i, nid in enumerate(ids)}
    indeg = {nid: 0 for nid in ids}
    children = {nid: [] for nid in ids}
    for s, d in edges:
        indeg[d] += 1
        children[s].append(d)
    heap = [pos[n] for n in ids if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        nid = ids[heapq.heappop(heap)]
        order.append(nid)
        for c in children[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, pos[c])
    return order if len(order) == len(ids) else None


def validate_topology(nodes, edges):
    """Check the structural invariants of a raw node/edge description.

    Args:
        nodes: sequence of ``(id, kind)`` pairs.
        edges: sequence of ``(src_id, dst_id)`` pairs.

    Returns:
        ValidationReport listing every violation found (empty when ok).
    """
    problems = []
    ids = [str(n) for n, _ in nodes]
    kinds = {}
    for nid, kind in nodes:
        nid = str(nid)
        if nid in kinds:
            problems.append(f"duplicate node id {nid!r}")
        if kind not in NODE_KINDS:
            problems.append(f"node {nid!r} has unknown kind {kind!r}")
        kinds[nid] = kind
    n_bias = sum(1 for k in kinds.values() if k == BIAS)
    if n_bias > 1:
        problems.append(f"{n_bias} bias nodes; at most one is allowed")
    if not any(k == INPUT for k in kinds.values()):
        problems.append("no input nodes")
    if not any(k == OUTPUT for k in kinds.values()):
        problems.append("no output nodes")

    fan_in = {nid: 0 for nid in kinds}
    fan_out = {nid: 0 for nid in kinds}
    seen = set()
    good_edges = []
    for s, d in edges:
        s, d = str(s), str(d)
        if s not in kinds or d not in kinds:
            problems.append(f"edge ({s!r}->{d!r}) references an unknown node")
            continue
        if s == d:
            problems.append(f"cycle: self-loop on {s!r}")
            continue
        if (s, d) in seen:
            problems.append(f"duplicate edge ({s!r}->{d!r})")
            continue
        seen.add((s, d))
        good_edges.append((s, d))
        fan_out[s] += 1
        fan_in[d] += 1
        if kinds[d] in (INPUT, BIAS):
            problems.append(f"{kinds[d]} node {d!r} has an incoming edge from {s!r}")
        if kinds[s] == OUTPUT:
            problems.append(f"output node {s!r} has an outgoing edge to {d!r}")

    for nid, kind in kinds.items():
        if kind == INTERNAL:
            if fan_in[nid] == 0:
                problems.append(f"internal node {nid!r} has empty fan-in")
            if fan_out[nid] == 0:
                problems.append(f"internal node {nid!r} has empty fan-out")
        elif kind in (INPUT, BIAS) and fan_out[nid] == 0:
            problems.append(f"dangling {kind} node {nid!r} (no outgoing edges)")
        elif kind == OUTPUT and fan_in[nid] == 0:
            problems.append(f"dangling output node {nid!r} (no incoming edges)")

    if len(set(ids)) == len(ids) and _topological_order(ids, good_edges) is None:
        problems.append("cycle: graph is not acyclic")
    return ValidationReport(tuple(problems))


class NetworkTopology:
    """Immutable DAG of typed nodes with canonically ordered edges.

    Attributes:
        node_ids: node ids in topological order.
        kinds: node kinds aligned to ``node_ids``.
        src, dst: int arrays of node indices, one entry per edge.
        inputs, outputs, internal: node index arrays (topological order).
        bias: node index of the bias node or ``None``.
        in_edges, out_edges: per-node int arrays of edge indices.
    """

    def __init__(self, nodes, edges):
        nodes = [(str(n), k) for n, k in nodes]
        edges = [(str(s), str(d)) for s, d in edges]
        report = validate_topology(nodes, edges)
        if not report.ok:
            raise TopologyError(report.violations)
        ids = [n for n, _ in nodes]
        kind_of = dict(nodes)
        order = _topological_order(ids, edges)
        self.node_ids = tuple(order)
        self.kinds = tuple(kind_of[n] for n in order)
        self.index = {nid: i for i, nid in enumerate(order)}
        pairs = sorted((self.index[d], self.index[s]) for s, d in edges)
        self.src = np.array([s for _, s in pairs], dtype=np.int64)
        self.dst = np.array([d for d, _ in pairs], dtype=np.int64)
        self.src.setflags(write=False)
        self.dst.setflags(write=False)
        kinds = np.array(self.kinds)
        self.inputs = np.flatnonzero(kinds == INPUT)
        self.outputs = np.flatnonzero(kinds == OUTPUT)
        self.internal = np.flatnonzero(kinds == INTERNAL)
        b = np.flatnonzero(kinds == BIAS)
        self.bias = int(b[0]) if b.size else None
        n = len(order)
        self.in_edges = tuple(np.flatnonzero(self.dst == v) for v in range(n))
        self.out_edges = tuple(np.flatnonzero(self.src == v) for v in range(n))
        self._edge_pos = {(int(s), int(d)): e for e, (s, d) in enumerate(zip(self.src, self.dst))}

    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_edges(self):
        return len(self.src)

    @property
    def n_inputs(self):
        return len(self.inputs)

    @property
    def n_outputs(self):
        return len(self.outputs)

    @property
    def edges(self):
        return [(self.node_ids[s], self.node_ids[d]) for s, d in zip(self.src, self.dst)]

    def resolve(self, node):
        """Node index for an id or an index."""
        if isinstance(node, (int, np.integer)):
            if not 0 <= node < self.n_nodes:
                raise IndexError(f"node index {node} out of range")
            return int(node)
        try:
            return self.index[str(node)]
        except KeyError:
            raise KeyError(f"unknown node {node!r}") from None

    def edge_index(self, src, dst):
        return self._edge_pos[(self.resolve(src), self.resolve(dst))]

    def is_internal(self, v):
        return self.kinds[v] == INTERNAL

    def to_dict(self):
        return {
            "nodes": [{"id": n, "kind": k} for n, k in zip(self.node_ids, self.kinds)],
            "edges": [{"src": s, "dst": d} for s, d in self.edges],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            nodes = [(n["id"], n["kind"]) for n in doc["nodes"]]
            edges = [(e["src"], e["dst"]) for e in doc["edges"]]
        except (KeyError, TypeError) as exc:
            raise TopologyError([f"malformed topology document: {exc!r}"]) from None
        return cls(nodes, edges)

    def __eq__(self, other):
        return (
            isinstance(other, NetworkTopology)
            and self.node_ids == other.node_ids
            and self.kinds == other.kinds
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
        )

    def __hash__(self):
        return hash((self.node_ids, self.kinds, self.src.tobytes(), self.dst.tobytes()))

    def __repr__(self):
        return (
            f"NetworkTopology({self.n_inputs} in, {len(self.internal)} internal, "
            f"{self.n_outputs} out, {self.n_edges} edges, bias={self.bias is not None})"
        )


def layered(sizes, bias=False):
    """Fully connected layered topology, e.g. ``layered([2, 2, 2, 1])``.

    Node ids are ``x<i>`` for inputs, ``h<l>_<j>`` for hidden layer ``l`` and
    ``y<k>`` for outputs.  With ``bias=True`` a node ``b`` feeds every
    non-input node.
    """
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"need at least an input and an output layer, got {sizes}")
    layers = [[f"x{i}" for i in range(sizes[0])]]
    for li, width in enumerate(sizes[1:-1], start=1):
        layers.append([f"h{li}_{j}" for j in range(width)])
    layers.append([f"y{k}" for k in range(sizes[-1])])
    nodes = [(n, INPUT) for n in layers[0]]
    if bias:
        nodes.append(("b", BIAS))
    for layer in layers[1:-1]:
        nodes.extend((n, INTERNAL) for n in layer)
    nodes.extend((n, OUTPUT) for n in layers[-1])
    edges = []
    for prev, cur in zip(layers, layers[1:]):
        for d in cur:
            edges.extend((s, d) for s in prev)
            if bias:
                edges.append(("b", d))
    return NetworkTopology(nodes, edges)


def init_weights(topology, rng):
    """Zero-mean uniform weights, half-width sqrt(2 / fan-in) per edge."""
    fan_in = np.array([len(e) for e in topology.in_edges], dtype=np.float64)
    half = np.sqrt(2.0 / fan_in[topology.dst])
    return rng.uniform(-1.0, 1.0, size=topology.n_edges) * half


def check_weights(topology, weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (topology.n_edges,):
        raise DimensionError(f"weight vector has shape {w.shape}, expected ({topology.n_edges},)")
    if not np.all(np.isfinite(w)):
        bad = int(np.flatnonzero(~np.isfinite(w))[0])
        s, d = topology.edges[bad]
        raise NonFiniteError(f"{s}->{d}", what="weight")
    return w


@dataclass(frozen=True)
class Batch:
    """Inputs ``(n, |V_in|)`` with optional labels (matrix or class vector)."""

    inputs: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        if x.shape[0] < 1:
            raise DimensionError("batch must contain at least one example")
        if not np.all(np.isfinite(x)):
            raise DimensionError("batch inputs contain non-finite entries")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape[0] != x.shape[0]:
                raise DimensionError(f"{y.shape[0]} labels for {x.shape[0]} inputs")
            if np.issubdtype(y.dtype, np.floating) and not np.all(np.isfinite(y)):
                raise DimensionError("batch labels contain non-finite entries")
            object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx):
        return Batch(self.inputs[idx], None if self.labels is None else self.labels[idx])


def _inputs_of(batch):
    return batch.inputs if isinstance(batch, Batch) else Batch(batch).inputs


@dataclass(frozen=True)
class ActivationRecord:
    """Pre-activations ``z`` and outputs ``h``, both ``(n, |V|)``."""

    z: np.ndarray
    h: np.ndarray
    topology: NetworkTopology = field(repr=False, compare=False, default=None)

    @property
    def outputs(self):
        return self.z[:, self.topology.outputs]

    def gates(self):
        """d h / d z per node: 1 on inputs, 0 on the bias, ReLU slope elsewhere."""
        t = self.topology
        g = (self.z > 0).astype(np.float64)
        g[:, t.inputs] = 1.0
        g[:, t.outputs] = 1.0
        if t.bias is not None:
            g[:, t.bias] = 0.0
        return g


def forward(topology, weights, batch):
    """Propagate a batch through the network in topological order.

    Raises:
        DimensionError: input width or weight length mismatch.
        NonFiniteError: some node's pre-activation overflowed.
    """
    w = check_weights(topology, weights)
    x = _inputs_of(batch)
    if x.shape[1] != topology.n_inputs:
        raise DimensionError(f"batch width {x.shape[1]} != {topology.n_inputs} inputs")
    n = x.shape[0]
    z = np.zeros((n, topology.n_nodes))
    h = np.zeros((n, topology.n_nodes))
    z[:, topology.inputs] = x
    h[:, topology.inputs] = x
    if topology.bias is not None:
        z[:, topology.bias] = 1.0
        h[:, topology.bias] = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for v, kind in enumerate(topology.kinds):
            if kind in (INPUT, BIAS):
                continue
            e = topology.in_edges[v]
            zv = h[:, topology.src[e]] @ w[e]
            if not np.all(np.isfinite(zv)):
                raise NonFiniteError(topology.node_ids[v])
            z[:, v] = zv
            h[:, v] = np.maximum(zv, 0.0) if kind == INTERNAL else zv
    return ActivationRecord(z, h, topology)


def predict(topology, weights, batch):
    return forward(topology, weights, batch).outputs


def backward(topology, weights, act, d_out):
    """Reverse accumulation given ``dL/dz`` at the outputs.

    Returns the per-node adjoint ``dL/dz`` of shape ``(n, |V|)``; the ReLU
    slope at exactly zero is taken as 0.
    """
    w = np.asarray(weights, dtype=np.float64)
    dz = np.zeros_like(act.z)
    dz[:, topology.outputs] = d_out
    gate = act.z > 0
    with np.errstate(over="ignore", invalid="ignore"):
        for u in range(topology.n_nodes - 1, -1, -1):
            if topology.kinds[u] != INTERNAL:
                continue
            e = topology.out_edges[u]
            du = dz[:, topology.dst[e]] @ w[e]
            dz[:, u] = np.where(gate[:, u], du, 0.0)
            if not np.all(np.isfinite(dz[:, u])):
                raise NonFiniteError(topology.node_ids[u], what="gradient")
    return dz


def loss_and_gradient(topology, weights, batch, loss):
    """Mean batch loss and its gradient over edges."""
    if batch.labels is None:
        raise DimensionError("loss_gradient requires labels")
    act = forward(topology, weights, batch)
    value, d_out = loss.value_and_grad(act.outputs, batch.labels)
    dz = backward(topology, weights, act, d_out)
    grad = np.einsum("ie,ie->e", dz[:, topology.dst], act.h[:, topology.src])
    return value, grad


def loss_gradient(topology, weights, batch, loss):
    return loss_and_gradient(topology, weights, batch, loss)[1]


def batch_loss(topology, weights, batch, loss):
    return loss.value(predict(topology, weights, batch), batch.labels)


def sensitivities(topology, weights, act):
    """Total derivatives ``P[i, a, b] = d z_a / d z_b`` for every example.

    Perturbing ``z_b`` moves ``h_b`` by the local gate and propagates to every
    descendant; ``P[i, b, b] = 1``.  Shape ``(n, |V|, |V|)``.
    """
    w = np.asarray(weights, dtype=np.float64)
    n, nv = act.z.shape
    gates = act.gates()
    P = np.zeros((n, nv, nv))
    for b in range(nv - 1, -1, -1):
        P[:, b, b] = 1.0
        e = topology.out_edges[b]
        if e.size:
            P[:, :, b] += gates[:, b, None] * (P[:, :, topology.dst[e]] @ w[e])
    return P


def output_jacobian(topology, weights, batch, act=None):
    """``J[i, k, e] = d f(x_i)[k] / d w_e`` for all examples, shape ``(n, |V_out|, |E|)``."""
    if act is None:
        act = forward(topology, weights, batch)
    P = sensitivities(topology, weights, act)
    Pout = P[:, topology.outputs, :][:, :, topology.dst]
    return Pout * act.h[:, None, topology.src]


def apply_node_rescaling(weights, topology, node, rho):
    """Scale the incoming weights of an internal node by 1/rho and outgoing by rho."""
    v = topology.resolve(node)
    if not topology.is_internal(v):
        raise ValueError(f"node {topology.node_ids[v]!r} is {topology.kinds[v]}, not internal")
    if not rho > 0:
        raise ValueError(f"rescaling factor must be positive, got {rho}")
    out = np.array(weights, dtype=np.float64, copy=True)
    out[topology.in_edges[v]] /= rho
    out[topology.out_edges[v]] *= rho
    return out


def function_distance(topology, w1, w2, probes):
    """Max over probes and outputs of ``|f_w1(x) - f_w2(x)|``."""
    x = _inputs_of(probes)
    return float(np.max(np.abs(predict(topology, w1, x) - predict(topology, w2, x))))


def save_topology(topology, path):
    Path(path).write_text(json.dumps(topology.to_dict(), indent=2) + "\n")


def load_topology(path):
    return NetworkTopology.from_dict(json.loads(Path(path).read_text()))


def save_weights(weights, path):
    # repr round-trips float64 exactly
    vals = [float(v) for v in np.asarray(weights, dtype=np.float64)]
    Path(path).write_text(json.dumps(vals) + "\n")


def load_weights(path, topology=None):
    w = np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)
    if w.ndim != 1:
        raise DimensionError("weights file must hold a flat array")
    if topology is not None:
        check_weights(topology, w)
    return w

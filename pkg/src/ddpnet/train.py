"""Datasets, the mini-batch training loop and metrics persistence."""

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ddpnorm, ddpsgd, netgraph
from .complexity import SECOND_MOMENT, ComplexityConfig, gamma_net_of
from .errors import ConfigError, DimensionError, DivergenceError, NonFiniteError
from .losses import LOSS_KINDS, SQUARED, LossSpec

OPTIMIZERS = ("sgd", "path_sgd", "ddp_sgd", "ddp_norm", "diag_natural_gradient")
STATS_MODES = ("same", "held_out")
METRIC_KEYS = ("step", "loss", "gamma_net", "grad_norm", "kappa_min", "kappa_max", "ms")

# independent random streams derived from the run seed
_INIT, _SHUFFLE, _STATS, _DATA = 0, 1, 2, 3


def philox(seed, stream=0):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return self.inputs.shape[0]

    def batch(self, idx=None):
        if idx is None:
            return netgraph.Batch(self.inputs, self.labels)
        return netgraph.Batch(self.inputs[idx], self.labels[idx])


def _require(spec, key, kind=None):
    if key not in spec:
        raise ConfigError(f"dataset.{key}", "missing")
    val = spec[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"dataset.{key}", f"expected {kind.__name__}, got {val!r}")
    return val


def teacher_student(shape, noise, n, seed, bias=False):
    """Inputs ~ N(0, I); labels are a random teacher network's outputs plus Gaussian noise."""
    topo = netgraph.layered(shape, bias=bias)
    rng = philox(seed, _DATA)
    teacher = netgraph.init_weights(topo, rng)
    x = rng.standard_normal((n, shape[0]))
    y = netgraph.predict(topo, teacher, x) + noise * rng.standard_normal((n, shape[-1]))
    return Dataset(x, y, {"teacher_topology": topo, "teacher_weights": teacher})


def gaussian_blobs(k, dim, n, seed, separation=6.0, sigma=1.0):
    """``k`` isotropic classes whose centres are ``separation * sigma`` apart."""
    rng = philox(seed, _DATA)
    if k <= dim:
        centres = np.eye(k, dim) * separation * sigma / np.sqrt(2.0)
    else:
        centres = rng.standard_normal((k, dim)) * separation * sigma
    labels = rng.integers(0, k, size=n)
    x = centres[labels] + sigma * rng.standard_normal((n, dim))
    return Dataset(x, labels, {"centres": centres})


def write_csv(path, inputs, labels):
    """Inputs then label columns; 17 significant digits round-trip float64 exactly."""
    y = np.asarray(labels, dtype=np.float64)
    y = y[:, None] if y.ndim == 1 else y
    np.savetxt(path, np.hstack([np.asarray(inputs, dtype=np.float64), y]), delimiter=",", fmt="%.17g")


def read_csv(path, label_cols=1):
    """Load a CSV whose trailing ``label_cols`` columns are labels."""
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ConfigError("dataset.path", f"cannot read {path}: {exc}") from None
    if data.shape[1] <= label_cols:
        raise DimensionError(f"{path}: {data.shape[1]} columns, need more than {label_cols}")
    x, y = data[:, :-label_cols], data[:, -label_cols:]
    if label_cols == 1 and np.all(np.mod(y, 1) == 0):
        y = y[:, 0]
    return Dataset(x, y, {"path": str(path)})


def make_dataset(spec):
    kind = _require(spec, "kind", str)
    if kind == "teacher_student":
        shape = _require(spec, "shape", list)
        return teacher_student(shape, float(_require(spec, "noise")), int(_require(spec, "n")),
                               int(_require(spec, "seed")), bool(spec.get("bias", False)))
    if kind == "gaussian_blobs":
        return gaussian_blobs(int(_require(spec, "k")), int(_require(spec, "dim")),
                              int(_require(spec, "n")), int(_require(spec, "seed")),
                              float(spec.get("separation", 6.0)), float(spec.get("sigma", 1.0)))
    if kind == "csv":
        return read_csv(_require(spec, "path", str), int(spec.get("label_cols", 1)))
    raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}")


_FIELDS = {"optimizer", "complexity", "eta", "batch_size", "steps", "seed", "stats_batch_mode",
           "dataset", "network", "loss", "out", "record_time"}
_COMPLEXITY_FIELDS = {"alpha", "s_mode", "input_gamma_sq", "kappa_floor"}


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str
    eta: float
    steps: int
    batch_size: int
    seed: int
    dataset: dict
    network: dict
    complexity: ComplexityConfig = ComplexityConfig()
    loss: str = SQUARED
    stats_batch_mode: str = "same"
    out: str = None
    record_time: bool = True

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a mapping")
        unknown = sorted(set(doc) - _FIELDS)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for key in ("optimizer", "eta", "steps", "batch_size", "seed", "dataset", "network"):
            if key not in doc:
                raise ConfigError(key, "missing")
        opt = doc["optimizer"]
        if opt == "ddpnorm":
            opt = "ddp_norm"
        if opt not in OPTIMIZERS:
            raise ConfigError("optimizer", f"must be one of {OPTIMIZERS}, got {opt!r}")
        cdoc = doc.get("complexity", {})
        if not isinstance(cdoc, dict):
            raise ConfigError("complexity", "must be a mapping")
        bad = sorted(set(cdoc) - _COMPLEXITY_FIELDS)
        if bad:
            raise ConfigError(f"complexity.{bad[0]}", "unknown field")
        try:
            comp = ComplexityConfig(**cdoc)
        except ConfigError as exc:
            raise ConfigError(f"complexity.{exc.field}", str(exc)) from None
        except TypeError as exc:
            raise ConfigError("complexity", str(exc)) from None
        loss = doc.get("loss", SQUARED)
        if loss not in LOSS_KINDS:
            raise ConfigError("loss", f"must be one of {LOSS_KINDS}, got {loss!r}")
        # optimizer aliases pin the complexity measure
        if opt == "path_sgd":
            if cdoc.get("alpha", 0.0) != 0.0:
                raise ConfigError("complexity.alpha", "path_sgd requires alpha = 0")
            comp = replace(comp, alpha=0.0)
        if opt == "diag_natural_gradient":
            if cdoc.get("alpha", 1.0) != 1.0 or cdoc.get("s_mode", SECOND_MOMENT) != SECOND_MOMENT:
                raise ConfigError("complexity", "diag_natural_gradient requires alpha = 1, second_moment")
            if loss != SQUARED:
                raise ConfigError("loss", "diag_natural_gradient is defined for the squared loss only")
            comp = replace(comp, alpha=1.0, s_mode=SECOND_MOMENT)
        eta = doc["eta"]
        if isinstance(eta, bool) or not isinstance(eta, (int, float)) or not np.isfinite(eta) or eta < 0:
            raise ConfigError("eta", f"must be a finite non-negative number, got {eta!r}")
        for key, lo in (("steps", 0), ("batch_size", 1), ("seed", 0)):
            val = doc[key]
            if isinstance(val, bool) or not isinstance(val, int) or val < lo:
                raise ConfigError(key, f"must be an integer >= {lo}, got {val!r}")
        mode = doc.get("stats_batch_mode", "same")
        if mode not in STATS_MODES:
            raise ConfigError("stats_batch_mode", f"must be one of {STATS_MODES}, got {mode!r}")
        net = doc["network"]
        if not isinstance(net, dict) or not isinstance(net.get("shape"), list):
            raise ConfigError("network.shape", "expected a list of layer widths")
        if set(net) - {"shape", "bias"}:
            raise ConfigError(f"network.{sorted(set(net) - {'shape', 'bias'})[0]}", "unknown field")
        if not isinstance(doc["dataset"], dict):
            raise ConfigError("dataset", "must be a mapping")
        rt = doc.get("record_time", True)
        if not isinstance(rt, bool):
            raise ConfigError("record_time", "must be true or false")
        return cls(opt, float(eta), doc["steps"], doc["batch_size"], doc["seed"], dict(doc["dataset"]),
                   dict(net), comp, loss, mode, doc.get("out"), rt)

    def to_dict(self, include_out=True):
        d = asdict(self)
        d["complexity"] = asdict(self.complexity)
        if not include_out:
            del d["out"]
        return d

    def digest(self):
        """Hash of everything that determines the run; the output location is excluded."""
        return hashlib.sha256(json.dumps(self.to_dict(include_out=False), sort_keys=True).encode()).hexdigest()


class MinibatchStream:
    """Sampling without replacement within an epoch, reshuffled each epoch."""

    def __init__(self, n, batch_size, rng):
        if batch_size > n:
            raise ConfigError("batch_size", f"{batch_size} exceeds dataset size {n}")
        self.n, self.size, self.rng = n, batch_size, rng
        self._perm, self._pos = None, n

    def next(self):
        if self._pos + self.size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.size]
        self._pos += self.size
        return idx


def fisher_diagonal(topology, weights, batch, floor):
    """Empirical diagonal Fisher of the Gaussian output model from output Jacobians."""
    jac = netgraph.output_jacobian(topology, weights, batch)
    return np.maximum(np.mean(np.sum(jac * jac, axis=1), axis=0), floor)


@dataclass
class TrainResult:
    topology: netgraph.NetworkTopology
    weights: np.ndarray
    metrics: list
    initial_loss: float
    final_loss: float
    tilde_weights: np.ndarray = None
    running_gamma_sq: np.ndarray = None
    trajectory: list = None


def _check_finite(step, value):
    if not np.isfinite(value):
        raise DivergenceError(step, value)


def train_loop(config, record_trajectory=False, metrics_sink=None):
    """Run ``config.steps`` optimizer steps.

    Returns a TrainResult whose losses are evaluated on the full training
    set.  ``metrics_sink`` (optional callable) receives each record as it is
    produced.

    Raises:
        DivergenceError: loss or an intermediate quantity became non-finite.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_loop(config, record_trajectory, metrics_sink)


def _train_loop(config, record_trajectory, metrics_sink):
    data = make_dataset(config.dataset)
    shape = config.network["shape"]
    if shape[0] != data.inputs.shape[1]:
        raise ConfigError("network.shape", f"input width {shape[0]} != dataset width {data.inputs.shape[1]}")
    try:
        topo = netgraph.layered(shape, bias=bool(config.network.get("bias", False)))
    except ValueError as exc:
        raise ConfigError("network.shape", str(exc)) from None
    loss = LossSpec(config.loss)
    comp = config.complexity
    full = data.batch()
    try:
        loss.check_labels(full.labels, len(data), topo.n_outputs)
    except DimensionError as exc:
        raise ConfigError("dataset", str(exc)) from None

    w = netgraph.init_weights(topo, philox(config.seed, _INIT))
    tw = None
    running = None
    if config.optimizer == "ddp_norm":
        tw = w.copy()
        running = ddpnorm.RunningNormalizers(topo)
    stream = MinibatchStream(len(data), config.batch_size, philox(config.seed, _SHUFFLE))
    stats_stream = None
    if config.stats_batch_mode == "held_out":
        stats_stream = MinibatchStream(len(data), config.batch_size, philox(config.seed, _STATS))

    def plain_weights():
        if tw is None:
            return w
        return ddpnorm.realize(topo, tw, full, comp)

    initial_loss = netgraph.batch_loss(topo, plain_weights(), full, loss)
    metrics = []
    trajectory = [w.copy() if tw is None else tw.copy()] if record_trajectory else None

    for step in range(config.steps):
        t0 = time.perf_counter()
        mb = data.batch(stream.next())
        sb = data.batch(stats_stream.next()) if stats_stream is not None else None
        stats = mb if sb is None else sb
        try:
            if config.optimizer == "ddp_norm":
                value, grad = ddpnorm.ddpnorm_loss_and_gradient(topo, tw, mb, loss, comp, stats_batch=sb)
                st = ddpnorm.normalized_forward(topo, tw, stats, comp)
                running.update(st.gamma_sq)
                realized = ddpnorm.realize_weights(topo, tw, st.gamma_sq)
                gnet = gamma_net_of(topo, realized, stats, comp)
                scale = np.ones_like(grad)
            else:
                value, grad = netgraph.loss_and_gradient(topo, w, mb, loss)
                gnet = gamma_net_of(topo, w, stats, comp)
                if config.optimizer == "sgd":
                    scale = np.ones_like(grad)
                elif config.optimizer == "diag_natural_gradient":
                    scale = fisher_diagonal(topo, w, stats, comp.kappa_floor)
                else:
                    scale = ddpsgd.kappa(topo, w, stats, comp)
        except NonFiniteError:
            raise DivergenceError(step, float("nan")) from None
        _check_finite(step, value)
        if config.eta > 0:
            if tw is not None:
                tw = tw - config.eta * grad
            else:
                w = w - config.eta * grad / scale
        ms = (time.perf_counter() - t0) * 1e3 if config.record_time else 0.0
        rec = {
            "step": step,
            "loss": float(value),
            "gamma_net": float(gnet),
            "grad_norm": float(np.linalg.norm(grad)),
            "kappa_min": float(np.min(scale)),
            "kappa_max": float(np.max(scale)),
            "ms": float(ms),
        }
        metrics.append(rec)
        if metrics_sink is not None:
            metrics_sink(rec)
        if record_trajectory:
            trajectory.append(w.copy() if tw is None else tw.copy())

    try:
        final_w = plain_weights()
        final_loss = netgraph.batch_loss(topo, final_w, full, loss)
    except NonFiniteError:
        raise DivergenceError(config.steps, float("nan")) from None
    _check_finite(config.steps, final_loss)
    return TrainResult(topo, final_w, metrics, initial_loss, final_loss, tw,
                       None if running is None else running.value, trajectory)


def metrics_line(rec):
    return json.dumps({k: rec[k] for k in METRIC_KEYS})


def save_checkpoint(result, config, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    netgraph.save_topology(result.topology, out / "topology.json")
    netgraph.save_weights(result.weights, out / "weights.json")
    if result.tilde_weights is not None:
        netgraph.save_weights(result.tilde_weights, out / "tilde_weights.json")
        g = [None if np.isnan(v) else float(v) for v in result.running_gamma_sq]
        (out / "running_gamma_sq.json").write_text(json.dumps(g) + "\n")
    echo = {"config": config.to_dict(include_out=False), "seed": config.seed, "config_hash": config.digest(),
            "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def run(config, out_dir):
    """Train, streaming metrics to ``out_dir/metrics.jsonl``, then write the checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        result = train_loop(config, metrics_sink=lambda r: fh.write(metrics_line(r) + "\n"))
    save_checkpoint(result, config, out)
    return result

"""Per-example losses on the network outputs.

Both losses are averaged over the rows they are given, so the gradient
returned for the outputs already carries the ``1/n`` factor.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

SQUARED = "squared"
SOFTMAX_CE = "softmax_cross_entropy"
LOSS_KINDS = (SQUARED, SOFTMAX_CE)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class LossSpec:
    kind: str = SQUARED

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")

    def check_labels(self, labels, n_rows, n_outputs):
        if labels is None:
            raise DimensionError("loss evaluation requires labels")
        labels = np.asarray(labels)
        if labels.shape[0] != n_rows:
            raise DimensionError(f"{labels.shape[0]} labels for {n_rows} examples")
        if self.kind == SQUARED:
            if labels.ndim == 1:
                labels = labels[:, None]
            if labels.shape[1] != n_outputs:
                raise DimensionError(
                    f"label width {labels.shape[1]} does not match {n_outputs} outputs"
                )
            return labels.astype(np.float64)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            if labels.ndim == 1 and np.all(np.mod(labels, 1) == 0):
                labels = labels.astype(np.int64)
            else:
                raise DimensionError("cross-entropy labels must be a vector of class indices")
        if labels.min() < 0 or labels.max() >= n_outputs:
            raise DimensionError(f"class index out of range for {n_outputs} outputs")
        return labels

    def value_and_grad(self, outputs, labels):
        """Mean loss over rows and its gradient w.r.t. ``outputs``."""
        n, k = outputs.shape
        labels = self.check_labels(labels, n, k)
        if self.kind == SQUARED:
            resid = outputs - labels
            return 0.5 * float(np.sum(resid * resid)) / n, resid / n
        logp = _log_softmax(outputs)
        rows = np.arange(n)
        value = -float(np.sum(logp[rows, labels])) / n
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return value, grad / n

    def value(self, outputs, labels):
        return self.value_and_grad(outputs, labels)[0]


def accuracy(outputs, labels):
    """Fraction of rows whose arg-max output equals the class label."""
    return float(np.mean(np.argmax(outputs, axis=1) == np.asarray(labels)))

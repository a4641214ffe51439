"""Dense kernels, losses and optimizers with hand-derived gradients.

Everything operates on float64 numpy arrays. Gradients are accumulated into
``Parameter.grad``; callers zero them between mini-batches.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import DimensionError, ValidationError, check_labels

KL_FLOOR = 1e-12


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.array(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params):
    for p in params:
        p.zero_grad()


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _reduce(values, reduction):
    if reduction == "sum":
        return float(np.sum(values)), 1.0
    if reduction == "mean":
        n = max(len(values), 1)
        return float(np.sum(values) / n), 1.0 / n
    raise ValidationError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, labels, reduction="sum"):
    """Softmax cross-entropy from raw logits.

    Returns ``(loss, grad_logits)``. ``reduction="sum"`` adds the per-row
    losses over the batch, ``"mean"`` divides that sum by the batch size.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    labels = check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss, scale = _reduce(-logp[rows, labels], reduction)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad * scale


def kl_categorical(p, q):
    """KL(p || q) for probability vectors, with 0 log 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"shapes differ: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(float(np.sum(v)) - 1.0) > 1e-9:
            raise ValidationError(f"{name} is not a probability vector")
    mask = p > 0
    qc = np.maximum(q[mask], KL_FLOOR)
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qc))))


def distillation_kl(teacher_log_probs, student_logits, reduction="mean"):
    """Row-wise KL(teacher || softmax(student_logits)) and its student-logit gradient.

    The teacher is given in log space so the divergence never needs a floor:
    both sides come out of a log-softmax and cannot underflow to log(0).
    """
    t = np.asarray(teacher_log_probs, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape or s.ndim != 2:
        raise DimensionError(f"teacher {t.shape} and student {s.shape} must match (B x C)")
    log_q = log_softmax(s)
    p = np.exp(t)
    rows = np.sum(p * (t - log_q), axis=1)
    loss, scale = _reduce(rows, reduction)
    grad = (np.exp(log_q) - p) * scale
    return loss, grad


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = ("relu", "sigmoid", "identity")


def dense_forward(x, weight, bias, activation="identity"):
    """Affine map followed by an activation. Returns ``(output, cache)``."""
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    w = weight.value if isinstance(weight, Parameter) else weight
    b = bias.value if isinstance(bias, Parameter) else bias
    pre = matmul(x, w)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
    pre = pre + b
    if activation == "relu":
        out = relu(pre)
    elif activation == "sigmoid":
        out = sigmoid(pre)
    else:
        out = pre
    return out, (np.asarray(x, dtype=np.float64), pre, out, activation)


def dense_backward(cache, grad_out, weight, bias):
    """Back-propagate ``grad_out`` through one dense layer.

    Adds dL/dW and dL/db into ``weight.grad`` / ``bias.grad`` and returns dL/dx.
    """
    x, pre, out, activation = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != out.shape:
        raise DimensionError(f"upstream grad {grad_out.shape} != output {out.shape}")
    if activation == "relu":
        grad_pre = grad_out * (pre > 0)
    elif activation == "sigmoid":
        grad_pre = grad_out * out * (1.0 - out)
    else:
        grad_pre = grad_out
    weight.grad += x.T @ grad_pre
    bias.grad += grad_pre.sum(axis=0)
    return grad_pre @ weight.value.T


def glorot_uniform(fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class SGDMomentum:
    """Heavy-ball SGD: ``buf = momentum * buf + grad; value -= lr * buf``."""

    def __init__(self, params, lr, momentum=0.0):
        if lr < 0:
            raise ValidationError("lr must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        zero_grads(self.params)

    def step(self):
        for p, buf in zip(self.params, self.buffers):
            buf *= self.momentum
            buf += p.grad
            p.value -= self.lr * buf


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValidationError("lr must be non-negative")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValidationError("beta1 and beta2 must lie in (0, 1)")
        if eps <= 0:
            raise ValidationError("eps must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        zero_grads(self.params)

    def step(self, t=None):
        self.t = self.t + 1 if t is None else t
        if self.t < 1:
            raise ValidationError("Adam step index must be >= 1")
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

"""Small dense-network stack with hand-written backprop.

Arrays are plain ``float64`` numpy arrays; a layer weight is stored
``[in x out]`` so a forward pass is ``x @ W + b``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "identity")

# loss_fn(logits) -> (scalar loss, d loss / d logits)
LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(arr, what: str = "array") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


@dataclass
class Network:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must align")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input dim {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> List[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def nbytes(self) -> int:
        return 8 * self.num_params()

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def same_architecture(self, other: "Network") -> bool:
        return (self.activations == other.activations
                and [w.shape for w in self.weights] == [w.shape for w in other.weights])


def init_network(sizes: Sequence[int], rng: np.random.Generator,
                 hidden_activation: str = "relu") -> Network:
    """He-initialised MLP; the last layer is linear (raw logits)."""
    weights, biases, acts = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        acts.append("identity" if i == len(sizes) - 2 else hidden_activation)
    return Network(weights, biases, acts)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    return np.maximum(z, 0.0) if act == "relu" else z


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input dim {net.in_dim}")
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        h = _activate(h @ w + b, act)
    return h


def forward_cached(net: Network, x: np.ndarray):
    """Forward pass that also returns the layer inputs and pre-activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input dim {net.in_dim}")
    inputs, pre = [], []
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = _activate(z, act)
    return h, (inputs, pre)


def backward(net: Network, cache, grad_out: np.ndarray):
    """Returns (parameter grads in ``params()`` order, grad w.r.t. the input)."""
    inputs, pre = cache
    grads: List[Optional[np.ndarray]] = [None] * (2 * len(net.weights))
    g = grad_out
    for i in reversed(range(len(net.weights))):
        if net.activations[i] == "relu":
            g = g * (pre[i] > 0)
        grads[2 * i] = inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads, g


# ----------------------------------------------------------------------------- losses

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / b


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray,
                  temperature: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean KL(softmax(p/T) || softmax(q/T)) with gradients for both inputs."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"{p_logits.shape} vs {q_logits.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b = p_logits.shape[0]
    log_p = log_softmax(p_logits / temperature)
    log_q = log_softmax(q_logits / temperature)
    p = np.exp(log_p)
    diff = log_p - log_q
    per_row = (p * diff).sum(axis=1)
    loss = per_row.mean()
    # d/dz_p: p * (diff - KL_row); d/dz_q: q - p; both scaled by 1/(T b)
    grad_p = p * (diff - per_row[:, None]) / (temperature * b)
    grad_q = (np.exp(log_q) - p) / (temperature * b)
    return float(loss), grad_p, grad_q


def mse(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over every element of the squared error."""
    if pred.shape != target.shape:
        raise ShapeError(f"{pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ----------------------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Returns new parameter arrays; the inputs are left untouched."""
        self.step_count += 1
        if self.kind == "sgd":
            return [p - self.lr * g for p, g in zip(params, grads)]
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        t = self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def loss_and_grads(net: Network, x: np.ndarray, loss_fn: LossFn):
    out, cache = forward_cached(net, x)
    loss, g = loss_fn(out)
    grads, _ = backward(net, cache, g)
    return loss, grads


def train_step(net: Network, x: np.ndarray, loss_fn: LossFn, opt: OptimizerState) -> float:
    """One optimizer step in place on ``net``; returns the loss before the update."""
    if len(x) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(net, x, loss_fn)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss} at step {opt.step_count}")
    net.set_params(opt.update(net.params(), grads))
    return loss


# ----------------------------------------------------------------------------- checking

def finite_difference(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        up = f()
        arr[idx] = orig - eps
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(num / den)


def grad_check(net: Network, x: np.ndarray, loss_fn: LossFn, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all parameters.

    Inputs sitting exactly on a relu kink make the check meaningless; callers
    nudge such inputs away from zero first (see ``nudge_off_kinks``).
    """
    net = net.copy()
    _, analytic = loss_and_grads(net, x, loss_fn)
    worst = 0.0
    for p, g in zip(net.params(), analytic):
        numeric = finite_difference(lambda: loss_fn(forward(net, x))[0], p, eps)
        worst = max(worst, relative_error(g, numeric))
    return worst


def nudge_off_kinks(net: Network, x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Shift first-layer inputs so no relu pre-activation lies within ``margin`` of 0."""
    x = np.array(x, dtype=np.float64)
    for _ in range(50):
        _, (_, pre) = forward_cached(net, x)
        close = any(np.any(np.abs(z) < margin) for z, a in zip(pre, net.activations) if a == "relu")
        if not close:
            return x
        x = x + margin * 3.1
    return x


def flop_count(net: Optional[Network], batch_size: int, backward_pass: bool = False) -> int:
    """Multiply-add FLOPs of a forward pass (2*in*out per sample per layer).

    With ``backward_pass`` the count is for the backward pass, taken as twice
    the forward cost.
    """
    if net is None or not net.weights:
        return 0
    fwd = 2 * sum(w.shape[0] * w.shape[1] for w in net.weights) * batch_size
    return 2 * fwd if backward_pass else fwd


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(forward(net, x).argmax(axis=1) == y))

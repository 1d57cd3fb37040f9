"""Clients, non-IID partitioning, local training and FedAvg."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import micro_nn as nn
from .rng import stream

if TYPE_CHECKING:
    from .generator import SyntheticSet


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "feature_shift"  # feature_shift | label_skew
    n_clients: int = 4
    n_classes: int = 10
    dim: int = 16
    train_per_client: int = 500
    test_per_client: int = 200
    dirichlet_alpha: float = 0.5
    class_sep: float = 1.0
    class_std: float = 0.9
    rotation_strength: float = 0.6
    scale_range: Tuple[float, float] = (0.7, 1.4)
    bias_scale: float = 1.0
    noise_std: float = 0.1
    identity_transforms: bool = False
    public_size: int = 2000
    n_unseen: int = 0

    def validate(self):
        if self.mode not in ("feature_shift", "label_skew"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.n_clients < 2 or self.n_classes < 2:
            raise ValueError("need at least 2 clients and 2 classes")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.train_per_client < 1 or self.test_per_client < 0 or self.dim < 1:
            raise ValueError("sample counts and dim must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be positive and ordered")


@dataclass
class Domain:
    """Affine map ``x = z @ matrix.T + bias`` applied to latent class samples."""

    domain_id: int
    matrix: np.ndarray
    bias: np.ndarray

    def apply(self, z: np.ndarray) -> np.ndarray:
        return z @ self.matrix.T + self.bias


@dataclass
class LogitsPool:
    """Personal-model logits on the private train set for the last two rounds."""

    entries: Dict[int, np.ndarray] = field(default_factory=dict)  # round -> n x K

    def record(self, round_t: int, logits: np.ndarray) -> None:
        self.entries[round_t] = np.array(logits, dtype=np.float64)
        for old in sorted(self.entries)[:-2]:
            del self.entries[old]

    def get(self, round_t: int) -> Optional[np.ndarray]:
        return self.entries.get(round_t)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


@dataclass
class ClientState:
    client_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    domain: Domain
    local_model: Optional[nn.Network] = None
    personal_model: Optional[nn.Network] = None
    pool: LogitsPool = field(default_factory=LogitsPool)

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    def class_counts(self, n_classes: int) -> Dict[int, int]:
        counts = np.bincount(self.y_train, minlength=n_classes)
        return {c: int(n) for c, n in enumerate(counts) if n > 0}


@dataclass
class ServerState:
    global_model: nn.Network
    synthetic: Optional["SyntheticSet"] = None
    compact: Optional["SyntheticSet"] = None
    round_t: int = 0


@dataclass
class HeldOutDomain:
    domain: Domain
    x: np.ndarray
    y: np.ndarray


@dataclass
class Benchmark:
    spec: PartitionSpec
    clients: List[ClientState]
    unseen: List[HeldOutDomain]
    public_x: np.ndarray
    public_y: np.ndarray
    public_domain: Domain
    centroids: np.ndarray


def _random_rotation(dim: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    # Cayley transform of a random skew-symmetric matrix; strength -> 0 gives I.
    g = rng.normal(size=(dim, dim)) * strength / np.sqrt(dim)
    s = (g - g.T) / 2
    eye = np.eye(dim)
    return np.linalg.solve(eye - s, eye + s)


def make_domain(domain_id: int, spec: PartitionSpec, rng: np.random.Generator) -> Domain:
    if spec.identity_transforms or spec.mode == "label_skew":
        return Domain(domain_id, np.eye(spec.dim), np.zeros(spec.dim))
    rot = _random_rotation(spec.dim, spec.rotation_strength, rng)
    scales = rng.uniform(*spec.scale_range, size=spec.dim)
    bias = rng.normal(0.0, spec.bias_scale, size=spec.dim)
    return Domain(domain_id, rot * scales[None, :], bias)


def draw_samples(domain: Domain, labels: np.ndarray, centroids: np.ndarray,
                 spec: PartitionSpec, rng: np.random.Generator) -> np.ndarray:
    z = centroids[labels] + rng.normal(0.0, spec.class_std, size=(len(labels), spec.dim))
    x = domain.apply(z)
    return x + rng.normal(0.0, spec.noise_std, size=x.shape)


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def partition(spec: PartitionSpec, seed: int) -> Benchmark:
    """Build client datasets, held-out domains and the public (generator pretraining) set.

    Domain ids: clients are ``0..N-1``, unseen domains follow, the public
    domain is last and is never given to a client.
    """
    spec.validate()
    rng = stream(seed, "partition")
    k, d = spec.n_classes, spec.dim
    centroids = rng.normal(0.0, spec.class_sep, size=(k, d))
    n_domains = spec.n_clients + spec.n_unseen + 1
    domains = [make_domain(i, spec, rng) for i in range(n_domains)]

    clients = []
    for n in range(spec.n_clients):
        crng = stream(seed, "partition", n)
        if spec.mode == "label_skew":
            props = crng.dirichlet(np.full(k, spec.dirichlet_alpha))
            y_tr = np.repeat(np.arange(k), crng.multinomial(spec.train_per_client, props))
            y_te = np.repeat(np.arange(k), crng.multinomial(spec.test_per_client, props))
            y_tr, y_te = crng.permutation(y_tr), crng.permutation(y_te)
        else:
            y_tr = _balanced_labels(spec.train_per_client, k, crng)
            y_te = _balanced_labels(spec.test_per_client, k, crng)
        dom = domains[n]
        clients.append(ClientState(
            client_id=n,
            x_train=draw_samples(dom, y_tr, centroids, spec, crng), y_train=y_tr,
            x_test=draw_samples(dom, y_te, centroids, spec, crng), y_test=y_te,
            domain=dom))

    unseen = []
    for j in range(spec.n_unseen):
        dom = domains[spec.n_clients + j]
        urng = stream(seed, "unseen", j)
        y = _balanced_labels(spec.test_per_client, k, urng)
        unseen.append(HeldOutDomain(dom, draw_samples(dom, y, centroids, spec, urng), y))

    prng = stream(seed, "public")
    pub = domains[-1]
    y_pub = _balanced_labels(spec.public_size, k, prng)
    x_pub = draw_samples(pub, y_pub, centroids, spec, prng)
    return Benchmark(spec, clients, unseen, x_pub, y_pub, pub, centroids)


def holdout_fold(bench: Benchmark, fold: int) -> Benchmark:
    """Turn client ``fold`` into an unseen domain (its train+test pooled as test data)."""
    if not 0 <= fold < len(bench.clients):
        raise IndexError(f"fold {fold} out of range")
    held = bench.clients[fold]
    rest = [c for c in bench.clients if c.client_id != fold]
    unseen = [HeldOutDomain(held.domain, np.vstack([held.x_train, held.x_test]),
                            np.concatenate([held.y_train, held.y_test]))]
    return Benchmark(bench.spec, rest, unseen + bench.unseen, bench.public_x, bench.public_y,
                     bench.public_domain, bench.centroids)


# ----------------------------------------------------------------------------- training

def fit(net: nn.Network, x: np.ndarray, y: np.ndarray, epochs: int, opt: nn.OptimizerState,
        batch_size: int, rng: np.random.Generator,
        loss_fn: Optional[Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]] = None
        ) -> List[float]:
    """Mini-batch training in place. ``loss_fn(logits, idx)`` defaults to cross-entropy on ``y[idx]``.

    Returns the mean loss of each epoch.
    """
    if epochs > 0 and len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if loss_fn is None:
        def loss_fn(logits, idx):
            return nn.cross_entropy(logits, y[idx])
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            total += nn.train_step(net, x[idx], lambda z: loss_fn(z, idx), opt) * len(idx)
        history.append(total / len(x))
    return history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 32
    optimizer: str = "sgd"

    def optimizer_state(self, lr_scale: float = 1.0) -> nn.OptimizerState:
        return nn.OptimizerState(kind=self.optimizer, lr=self.lr * lr_scale)


def local_train(client: ClientState, global_model: nn.Network, cfg: TrainConfig,
                seed: int, round_t: int) -> nn.Network:
    """Fine-tune a private copy of the broadcast model on the client's train split."""
    if client.n_train == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    local = global_model.copy()
    fit(local, client.x_train, client.y_train, cfg.epochs, cfg.optimizer_state(),
        cfg.batch_size, stream(seed, "local", client.client_id, round_t))
    return local


def fedavg_aggregate(models: Sequence[nn.Network], weights: Sequence[float],
                     client_ids: Optional[Sequence[int]] = None) -> nn.Network:
    """Sample-count weighted parameter mean.

    Models are summed in client-id order as ``ref + sum_i w_i (p_i - ref)``
    where ``ref`` is the lowest-id model, so the result does not depend on the
    order clients arrive in and N identical models aggregate to that model
    bit for bit.
    """
    if not models:
        raise ValueError("nothing to aggregate")
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    ref_net = models[0]
    for m in models[1:]:
        if not m.same_architecture(ref_net):
            raise ValueError("architecture mismatch between aggregated models")
    ids = list(client_ids) if client_ids is not None else list(range(len(models)))
    order = sorted(range(len(models)), key=lambda i: ids[i])
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    ref = models[order[0]].params()
    agg = []
    for j, p_ref in enumerate(ref):
        acc = np.zeros_like(p_ref)
        for i in order:
            acc = acc + w[i] * (models[i].params()[j] - p_ref)
        agg.append(p_ref + acc)
    out = models[order[0]].copy()
    out.set_params(agg)
    return out


# ----------------------------------------------------------------------------- accounting

@dataclass
class CommLedger:
    """Bytes moved per (round, client), both directions."""

    up: Dict[Tuple[int, int], int] = field(default_factory=dict)
    down: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def record(self, round_t: int, client_id: int, up: int = 0, down: int = 0) -> None:
        key = (round_t, client_id)
        self.up[key] = self.up.get(key, 0) + int(up)
        self.down[key] = self.down.get(key, 0) + int(down)

    def round_totals(self, round_t: int) -> Tuple[int, int]:
        up = sum(v for (t, _), v in self.up.items() if t == round_t)
        down = sum(v for (t, _), v in self.down.items() if t == round_t)
        return up, down

    def cumulative(self, through_round: int) -> int:
        return (sum(v for (t, _), v in self.up.items() if t <= through_round)
                + sum(v for (t, _), v in self.down.items() if t <= through_round))


def comm_account(ledger: CommLedger, round_t: int, client_ids: Sequence[int],
                 classifier_bytes: int, adapter_bytes: Optional[Dict[int, int]] = None) -> None:
    """Round 0 carries only the one-time adapter uploads; later rounds move one
    classifier down and one up per client."""
    if round_t == 0:
        for cid in client_ids:
            ledger.record(0, cid, up=(adapter_bytes or {}).get(cid, 0))
    else:
        for cid in client_ids:
            ledger.record(round_t, cid, up=classifier_bytes, down=classifier_bytes)


@dataclass
class RoundMetrics:
    round_t: int
    gm_acc: Dict[int, float]
    pm_acc: Dict[int, float]
    bytes_up: Dict[int, int]
    bytes_down: Dict[int, int]
    flops: Dict[int, int]
    wall_ms: float = 0.0
    unseen_acc: Optional[float] = None

    @property
    def mean_gm(self) -> float:
        return float(np.mean(list(self.gm_acc.values())))

    @property
    def mean_pm(self) -> float:
        return float(np.mean(list(self.pm_acc.values())))

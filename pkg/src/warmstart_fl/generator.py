"""Conditional denoising generator on feature vectors.

A small DDPM whose denoiser is an MLP over ``[x_t | class embedding | time
embedding]``. The base model is pretrained once on public data and then
frozen; clients personalise it with low-rank adapters only, and the server
samples from ``base + adapters`` to build synthetic training sets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from . import micro_nn as nn
from .lowrank import AdapterPayload, LowRankAdapter, adapter_grads, init_adapter, merge
from .rng import stream


@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def steps(self) -> int:
        return len(self.betas)


def linear_schedule(steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    return NoiseSchedule(np.linspace(beta_start, beta_end, steps))


def time_embedding(t: np.ndarray, dim: int, steps: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``len(t) x dim``."""
    half = dim // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / max(half - 1, 1))
    angles = (np.asarray(t, dtype=np.float64)[:, None] / steps) * freqs[None, :] * 2 * np.pi
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass
class PromptEmbedding:
    class_id: int
    vector: np.ndarray


@dataclass
class BaseGenerator:
    denoiser: nn.Network
    class_embeddings: np.ndarray  # K x emb_dim
    schedule: NoiseSchedule
    time_dim: int
    mean: np.ndarray  # feature standardisation, fixed at pretraining
    scale: np.ndarray
    frozen: bool = False
    loss_history: List[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def n_classes(self) -> int:
        return len(self.class_embeddings)

    def prompt(self, class_id: int) -> PromptEmbedding:
        if not 0 <= class_id < self.n_classes:
            raise ValueError(f"invalid class {class_id}")
        return PromptEmbedding(class_id, self.class_embeddings[class_id].copy())

    def nbytes(self) -> int:
        return self.denoiser.nbytes() + 8 * self.class_embeddings.size


@dataclass
class PersonalizedGenerator:
    base: BaseGenerator
    adapters: Dict[int, LowRankAdapter] = field(default_factory=dict)
    classes: Optional[Sequence[int]] = None  # None: every class allowed

    def __post_init__(self):
        for layer_id, a in self.adapters.items():
            if not 0 <= layer_id < len(self.base.denoiser.weights):
                raise ValueError(f"adapter targets missing layer {layer_id}")
            if a.shape != self.base.denoiser.weights[layer_id].shape:
                raise ValueError(f"adapter shape {a.shape} does not fit layer {layer_id}")

    def network(self) -> nn.Network:
        base = self.base.denoiser
        weights = [merge(w, self.adapters.get(i)) for i, w in enumerate(base.weights)]
        return nn.Network(weights, [b.copy() for b in base.biases], list(base.activations))


@dataclass
class SyntheticSet:
    x: np.ndarray
    y: np.ndarray
    source: np.ndarray  # client id per sample
    ids: np.ndarray  # provenance id per sample, unique within a union
    seed: int = 0

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, dim: int, seed: int = 0) -> "SyntheticSet":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), seed)

    def class_counts(self) -> Dict[int, int]:
        vals, counts = np.unique(self.y, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def subset(self, idx) -> "SyntheticSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SyntheticSet(self.x[idx], self.y[idx], self.source[idx], self.ids[idx], self.seed)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["client", "class"] + [f"f{j}" for j in range(self.x.shape[1])])
            for s, c, row in zip(self.source, self.y, self.x):
                w.writerow([int(s), int(c)] + [repr(float(v)) for v in row])


def concat_sets(sets: Iterable[SyntheticSet], dim: int, seed: int = 0) -> SyntheticSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return SyntheticSet.empty(dim, seed)
    return SyntheticSet(np.vstack([s.x for s in sets]), np.concatenate([s.y for s in sets]),
                        np.concatenate([s.source for s in sets]),
                        np.concatenate([s.ids for s in sets]), seed)


# ----------------------------------------------------------------------------- denoising loss

def _denoiser_input(gen: BaseGenerator, x_t: np.ndarray, emb: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.hstack([x_t, emb, time_embedding(t, gen.time_dim, gen.schedule.steps)])


def _noised(gen: BaseGenerator, x0: np.ndarray, rng: np.random.Generator):
    t = rng.integers(0, gen.schedule.steps, size=len(x0))
    eps = rng.normal(size=x0.shape)
    ab = gen.schedule.alpha_bars[t][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, t, eps


def denoising_step_grads(gen: BaseGenerator, net: nn.Network, emb: np.ndarray, x_t: np.ndarray,
                         t: np.ndarray, eps: np.ndarray):
    """MSE between predicted and true noise; returns (loss, param grads, grad w.r.t. ``emb``)."""
    inp = _denoiser_input(gen, x_t, emb, t)
    pred, cache = nn.forward_cached(net, inp)
    loss, g = nn.mse(pred, eps)
    grads, g_in = nn.backward(net, cache, g)
    d = gen.dim
    return loss, grads, g_in[:, d:d + emb.shape[1]]


def denoising_loss(gen: Union[BaseGenerator, PersonalizedGenerator], x: np.ndarray, y: np.ndarray,
                   seed: int = 0, draws: int = 4) -> float:
    """Monte Carlo denoising loss on raw features with noise fixed by ``seed``."""
    if isinstance(gen, PersonalizedGenerator):
        base, net = gen.base, gen.network()
    else:
        base, net = gen, gen.denoiser
    x0 = (x - base.mean) / base.scale
    rng = stream(seed, "denoise-eval")
    total = 0.0
    for _ in range(draws):
        x_t, t, eps = _noised(base, x0, rng)
        pred = nn.forward(net, _denoiser_input(base, x_t, base.class_embeddings[y], t))
        total += nn.mse(pred, eps)[0]
    return total / draws


def pretrain_base(x: np.ndarray, y: np.ndarray, n_classes: int,
                  schedule: Optional[NoiseSchedule] = None, epochs: int = 60, seed: int = 0,
                  hidden: int = 320, emb_dim: int = 16, time_dim: int = 16, lr: float = 2e-3,
                  batch_size: int = 128) -> BaseGenerator:
    """Train the denoiser and class embeddings on public data, then freeze."""
    schedule = schedule or linear_schedule()
    rng = stream(seed, "generator-pretrain")
    d = x.shape[1]
    in_dim = d + emb_dim + time_dim
    net = nn.init_network([in_dim, hidden, hidden, d], rng)
    net.weights[-1] *= 0.1
    gen = BaseGenerator(net, rng.normal(0.0, 1.0, size=(n_classes, emb_dim)), schedule, time_dim,
                        x.mean(axis=0), x.std(axis=0) + 1e-8)
    x0 = (x - gen.mean) / gen.scale
    opt = nn.OptimizerState(kind="adam", lr=lr)
    gen.loss_history.append(denoising_loss(gen, x, y, seed))
    for _ in range(epochs):
        order = rng.permutation(len(x0))
        for start in range(0, len(x0), batch_size):
            idx = order[start:start + batch_size]
            x_t, t, eps = _noised(gen, x0[idx], rng)
            loss, grads, g_emb = denoising_step_grads(gen, net, gen.class_embeddings[y[idx]], x_t, t, eps)
            if not np.isfinite(loss):
                raise nn.NonFiniteError("generator pretraining diverged")
            emb_grad = np.zeros_like(gen.class_embeddings)
            np.add.at(emb_grad, y[idx], g_emb)
            new = opt.update(net.params() + [gen.class_embeddings], grads + [emb_grad])
            net.set_params(new[:-1])
            gen.class_embeddings = new[-1]
        gen.loss_history.append(denoising_loss(gen, x, y, seed))
    gen.denoiser = net
    gen.frozen = True
    return gen


def finetune_lora(base: BaseGenerator, x: np.ndarray, y: np.ndarray, rank: int = 4,
                  steps: int = 500, seed: int = 0, lr: float = 5e-3, batch_size: int = 128,
                  layers: Optional[Sequence[int]] = None) -> Dict[int, LowRankAdapter]:
    """Fit adapters on private data; the base denoiser and embeddings are read-only."""
    if len(x) == 0:
        raise ValueError("empty private set")
    if not base.frozen:
        raise ValueError("base generator must be pretrained and frozen")
    rng = stream(seed, "lora")
    targets = range(len(base.denoiser.weights)) if layers is None else layers
    adapters = {i: init_adapter(*base.denoiser.weights[i].shape, rank, rng, layer_id=i) for i in targets}
    x0 = (x - base.mean) / base.scale
    opt = nn.OptimizerState(kind="adam", lr=lr)
    ids = sorted(adapters)
    for _ in range(steps):
        idx = rng.integers(0, len(x0), size=min(batch_size, len(x0)))
        x_t, t, eps = _noised(base, x0[idx], rng)
        net = PersonalizedGenerator(base, adapters).network()
        loss, grads, _ = denoising_step_grads(base, net, base.class_embeddings[y[idx]], x_t, t, eps)
        if not np.isfinite(loss):
            raise nn.NonFiniteError("adapter fine-tuning diverged")
        params, gs = [], []
        for i in ids:
            gB, gA = adapter_grads(adapters[i], grads[2 * i])
            params += [adapters[i].B, adapters[i].A]
            gs += [gB, gA]
        new = opt.update(params, gs)
        adapters = {i: LowRankAdapter(i, new[2 * j], new[2 * j + 1]) for j, i in enumerate(ids)}
    return adapters


# ----------------------------------------------------------------------------- sampling

def sample(gen: Union[BaseGenerator, PersonalizedGenerator], prompt: PromptEmbedding, count: int,
           seed: int = 0, source: int = -1) -> SyntheticSet:
    """Ancestral sampling of ``count`` raw-feature samples conditioned on ``prompt``."""
    pgen = gen if isinstance(gen, PersonalizedGenerator) else PersonalizedGenerator(gen)
    base = pgen.base
    if not 0 <= prompt.class_id < base.n_classes:
        raise ValueError(f"invalid class {prompt.class_id}")
    if pgen.classes is not None and prompt.class_id not in pgen.classes:
        raise ValueError(f"class {prompt.class_id} not held by this generator")
    if count == 0:
        return SyntheticSet.empty(base.dim, seed)
    net = pgen.network()
    rng = stream(seed, "sample", source, prompt.class_id)
    sched = base.schedule
    emb = np.repeat(np.asarray(prompt.vector, dtype=np.float64)[None, :], count, axis=0)
    x = rng.normal(size=(count, base.dim))
    for t in reversed(range(sched.steps)):
        eps = nn.forward(net, _denoiser_input(base, x, emb, np.full(count, t)))
        beta, ab = sched.betas[t], sched.alpha_bars[t]
        x = (x - beta / np.sqrt(1 - ab) * eps) / np.sqrt(sched.alphas[t])
        if t > 0:
            var = beta * (1 - sched.alpha_bars[t - 1]) / (1 - ab)
            x = x + np.sqrt(var) * rng.normal(size=x.shape)
    x = nn.check_finite(x * base.scale + base.mean, "generated samples")
    return SyntheticSet(x, np.full(count, prompt.class_id, np.int64), np.full(count, source, np.int64),
                        np.arange(count, dtype=np.int64), seed)


def generation_counts(payload: AdapterPayload, multiplier: float = 2.0,
                      per_class: Optional[int] = None) -> Dict[int, int]:
    if per_class is not None:
        return {c: per_class for c in sorted(payload.prompts)}
    return {c: int(round(multiplier * payload.class_counts.get(c, 0))) for c in sorted(payload.prompts)}


def build_synthetic_union(base: BaseGenerator, payloads: Sequence[AdapterPayload],
                          multiplier: float = 2.0, per_class: Optional[int] = None,
                          seed: int = 0, expected_clients: Optional[Sequence[int]] = None) -> SyntheticSet:
    """Plug each client's adapters into the base and sample its prompted classes."""
    if expected_clients is not None:
        missing = set(expected_clients) - {p.client_id for p in payloads}
        if missing:
            raise ValueError(f"missing payload for clients {sorted(missing)}")
    parts = []
    for p in sorted(payloads, key=lambda p: p.client_id):
        pgen = PersonalizedGenerator(base, p.adapters, classes=sorted(p.prompts))
        for c, n in generation_counts(p, multiplier, per_class).items():
            parts.append(sample(pgen, PromptEmbedding(c, p.prompts[c]), n, seed, source=p.client_id))
    union = concat_sets(parts, base.dim, seed)
    union.ids = np.arange(len(union), dtype=np.int64)
    return union

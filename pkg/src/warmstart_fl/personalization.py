"""Dynamic self-distillation for personal models.

Each client keeps its personal model's logits on its private train set for
the last two rounds. Per sample, a two-way Gumbel-Softmax selection picks
which of the two archived logits serves as teacher: the selection loss
rewards teachers that disagree with the global model (KL, maximised) while
staying correct (cross-entropy, weight ``alpha``). The personal model then
starts from the global model and trains on cross-entropy plus ``beta`` times
a tempered KL to the chosen teachers.

Column 0 of every selection matrix is the older entry (round t-2), column 1
the newer one (round t-1).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import micro_nn as nn
from .federation import ClientState, TrainConfig, fit
from .rng import stream

log = logging.getLogger(__name__)

OMEGA_FLOOR = 1e-12


@dataclass(frozen=True)
class DSDConfig:
    alpha: float = 1.0
    beta: float = 1.0
    temp0: float = 1.0
    temp_min: float = 0.1
    temp_decay: float = 0.9
    select_epochs: int = 10
    select_lr: float = 0.05
    distill_temp: float = 2.0
    select_batch: int = 32

    def temperature(self, epoch: int) -> float:
        return max(self.temp_min, self.temp0 * self.temp_decay ** epoch)


@dataclass
class SelectionMatrix:
    W: np.ndarray  # b x 2
    tau: float
    hard: bool
    soft: np.ndarray  # relaxed sample; equals W when not hard


@dataclass
class PersonalModel:
    network: nn.Network
    client_id: int
    round_t: int


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def _check_omega(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 2 or omega.shape[1] != 2:
        raise nn.ShapeError(f"selection probabilities must be b x 2, got {omega.shape}")
    if np.any(omega <= 0):
        log.warning("clamping %d non-positive selection probabilities to %g",
                    int(np.sum(omega <= 0)), OMEGA_FLOOR)
        omega = np.maximum(omega, OMEGA_FLOOR)
    return omega


def gumbel_softmax_sample(omega: np.ndarray, tau: float, rng: Optional[np.random.Generator] = None,
                          hard: bool = False, noise: Optional[np.ndarray] = None) -> SelectionMatrix:
    """``W[i, j] = softmax_j((log omega[i, j] + G[i, j]) / tau)``.

    Pass ``noise`` to fix ``G``; otherwise it is drawn from ``rng``. With
    ``hard`` the returned ``W`` is the one-hot row argmax and ``soft`` keeps
    the relaxed sample that gradients flow through (straight-through).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    omega = _check_omega(omega)
    if noise is None:
        if rng is None:
            raise ValueError("need rng or noise")
        noise = gumbel_noise(omega.shape, rng)
    soft = nn.softmax((np.log(omega) + noise) / tau)
    if not hard:
        return SelectionMatrix(soft, tau, False, soft)
    W = np.zeros_like(soft)
    W[np.arange(len(soft)), soft.argmax(axis=1)] = 1.0
    return SelectionMatrix(W, tau, True, soft)


def selection_loss(scores: np.ndarray, older: np.ndarray, newer: np.ndarray,
                   global_logits: np.ndarray, labels: np.ndarray, alpha: float,
                   noise: np.ndarray, tau: float) -> Tuple[float, np.ndarray]:
    """``-KL(softmax(q) || softmax(g)) + alpha * CE(q, y)`` with soft mix ``q``, and d/d scores.

    ``scores`` parameterise ``omega = softmax(scores)`` row-wise so rows always
    sum to one.
    """
    log_omega = nn.log_softmax(scores)
    W = nn.softmax((log_omega + noise) / tau)
    q = W[:, :1] * older + W[:, 1:] * newer
    kl, g_kl, _ = nn.kl_divergence(q, global_logits)
    ce, g_ce = nn.cross_entropy(q, labels)
    loss = -kl + alpha * ce
    g_q = -g_kl + alpha * g_ce
    g_W = np.stack([(g_q * older).sum(axis=1), (g_q * newer).sum(axis=1)], axis=1)
    g_z = W * (g_W - (W * g_W).sum(axis=1, keepdims=True))
    g_logw = g_z / tau
    g_scores = g_logw - np.exp(log_omega) * g_logw.sum(axis=1, keepdims=True)
    return float(loss), g_scores


def optimize_selection(older: np.ndarray, newer: np.ndarray, global_logits: np.ndarray,
                       labels: np.ndarray, cfg: DSDConfig, rng: np.random.Generator,
                       epochs: Optional[int] = None, lr: Optional[float] = None) -> np.ndarray:
    """Adam on the selection scores for ``epochs`` annealed Gumbel draws; returns omega (b x 2)."""
    if older.shape != newer.shape or older.shape != global_logits.shape:
        raise nn.ShapeError("pool entries and global logits must share a shape")
    if cfg.alpha < 0:
        raise ValueError("alpha must be non-negative")
    epochs = cfg.select_epochs if epochs is None else epochs
    opt = nn.OptimizerState(kind="adam", lr=cfg.select_lr if lr is None else lr)
    scores = np.zeros((len(older), 2))
    for e in range(epochs):
        noise = gumbel_noise(scores.shape, rng)
        loss, g = selection_loss(scores, older, newer, global_logits, labels, cfg.alpha,
                                 noise, cfg.temperature(e))
        if not np.isfinite(loss):
            raise nn.NonFiniteError("selection loss is not finite")
        (scores,) = opt.update([scores], [g])
    return nn.softmax(scores)


def hard_selection(omega: np.ndarray) -> np.ndarray:
    W = np.zeros_like(omega)
    W[np.arange(len(omega)), omega.argmax(axis=1)] = 1.0
    return W


def compose_logits(older: np.ndarray, newer: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Row ``i`` is ``older[i]`` where ``W[i] = (1, 0)`` and ``newer[i]`` where ``W[i] = (0, 1)``."""
    W = np.asarray(W)
    if W.shape != (len(older), 2):
        raise nn.ShapeError(f"selection matrix shape {W.shape}")
    if not (np.all((W == 0) | (W == 1)) and np.all(W.sum(axis=1) == 1)):
        raise ValueError("selection rows must be one-hot")
    return np.where(W[:, 1:] == 1, newer, older)


def distill_loss(teacher: np.ndarray, y: np.ndarray, beta: float, temp: float):
    """``loss_fn(logits, idx)`` for ``fit``: CE + beta * KL(teacher/T || student/T)."""
    def loss_fn(logits, idx):
        loss, grad = nn.cross_entropy(logits, y[idx])
        if beta:
            kl, _, g_student = nn.kl_divergence(teacher[idx], logits, temp)
            loss, grad = loss + beta * kl, grad + beta * g_student
        return loss, grad
    return loss_fn


def personalized_self_distill(global_model: nn.Network, x: np.ndarray, y: np.ndarray,
                              teacher: Optional[np.ndarray], beta: float, train_cfg: TrainConfig,
                              distill_temp: float, rng: np.random.Generator) -> nn.Network:
    """Start from a copy of the global model; with no teacher (or beta=0) this is plain fine-tuning."""
    student = global_model.copy()
    loss_fn = None
    if teacher is not None and beta:
        if len(teacher) != len(x):
            raise ValueError("need one teacher logit row per private sample")
        loss_fn = distill_loss(teacher, y, beta, distill_temp)
    elif teacher is None and beta and train_cfg.epochs > 0:
        log.debug("no teacher logits; falling back to plain fine-tuning")
    fit(student, x, y, train_cfg.epochs, train_cfg.optimizer_state(), train_cfg.batch_size, rng, loss_fn)
    return student


def select_teachers(older: np.ndarray, newer: np.ndarray, global_logits: np.ndarray,
                    labels: np.ndarray, cfg: DSDConfig, rng: np.random.Generator) -> np.ndarray:
    """Batch-wise selection over the whole private set; returns the hard b x 2 matrix."""
    W = np.zeros((len(labels), 2))
    for start in range(0, len(labels), cfg.select_batch):
        sl = slice(start, start + cfg.select_batch)
        omega = optimize_selection(older[sl], newer[sl], global_logits[sl], labels[sl], cfg, rng)
        W[sl] = hard_selection(omega)
    return W


def dsd_round(client: ClientState, global_model: nn.Network, train_cfg: TrainConfig,
              cfg: DSDConfig, seed: int, round_t: int, mode: str = "dsd") -> Tuple[PersonalModel, Dict]:
    """One personalization round for ``client``.

    Round 1 is plain fine-tuning; round 2 distils from round 1's logits; from
    round 3 on, ``mode="dsd"`` selects per sample between the last two
    rounds' logits while ``mode="sd"`` always uses the previous round's.
    Afterwards the new personal model's logits join the pool.
    """
    if round_t < 1:
        raise ValueError("personalization rounds start at 1")
    if mode not in ("dsd", "sd"):
        raise ValueError(f"unknown personalization mode {mode!r}")
    x, y = client.x_train, client.y_train
    newer = client.pool.get(round_t - 1)
    older = client.pool.get(round_t - 2)
    stats = {"selected_newer": float("nan"), "selected_older": float("nan")}
    teacher = None
    if mode == "dsd" and newer is not None and older is not None:
        g_logits = nn.forward(global_model, x)
        W = select_teachers(older, newer, g_logits, y, cfg, stream(seed, "dsd-select", client.client_id, round_t))
        teacher = compose_logits(older, newer, W)
        stats = {"selected_newer": float(W[:, 1].mean()), "selected_older": float(W[:, 0].mean())}
    elif newer is not None:
        teacher = newer
        stats = {"selected_newer": 1.0, "selected_older": 0.0}
    # Same stream as local_train, so round 1 reproduces the local model exactly.
    rng = stream(seed, "local", client.client_id, round_t)
    net = personalized_self_distill(global_model, x, y, teacher, cfg.beta, train_cfg, cfg.distill_temp, rng)
    client.pool.record(round_t, nn.forward(net, x))
    client.personal_model = net
    return PersonalModel(net, client.client_id, round_t), stats

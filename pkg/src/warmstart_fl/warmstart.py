"""Server-side warm start: synthesize from client adapters, train the global model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import micro_nn as nn
from .federation import ClientState, ServerState, TrainConfig, fit
from .generator import BaseGenerator, SyntheticSet, build_synthetic_union, finetune_lora
from .lowrank import AdapterPayload
from .rng import stream


@dataclass(frozen=True)
class WarmConfig:
    rank: int = 4
    lora_steps: int = 500
    lora_lr: float = 5e-3
    lora_layers: Optional[Sequence[int]] = None  # None: every dense layer
    pretrain_epochs: int = 60
    gen_hidden: int = 320
    multiplier: float = 2.0
    epochs: int = 30


def client_payload(client: ClientState, base: BaseGenerator, cfg: WarmConfig, seed: int,
                   n_classes: int, with_adapters: bool = True) -> AdapterPayload:
    """What the client ships: adapters, prompt embeddings of its classes, class counts."""
    counts = client.class_counts(n_classes)
    adapters = {}
    if with_adapters:
        adapters = finetune_lora(base, client.x_train, client.y_train, rank=cfg.rank,
                                 steps=cfg.lora_steps, lr=cfg.lora_lr, layers=cfg.lora_layers,
                                 seed=int(stream(seed, "lora-seed", client.client_id).integers(2**31)))
    prompts = {c: base.prompt(c).vector for c in counts}
    return AdapterPayload(client.client_id, adapters, prompts, counts)


def init_classifier(dim: int, hidden: Sequence[int], n_classes: int, seed: int) -> nn.Network:
    return nn.init_network([dim, *hidden, n_classes], stream(seed, "classifier-init"))


def build_warm_start(payloads: Sequence[AdapterPayload], base: BaseGenerator, init_model: nn.Network,
                     train_cfg: TrainConfig, multiplier: float = 2.0, epochs: int = 30, seed: int = 0,
                     expected_clients: Optional[Sequence[int]] = None) -> ServerState:
    """Generate the synthetic union and train the global model on it from ``init_model``."""
    if not payloads:
        raise ValueError("no client payloads")
    synth = build_synthetic_union(base, payloads, multiplier=multiplier, seed=seed,
                                  expected_clients=expected_clients)
    if len(synth) == 0:
        raise ValueError("synthetic set is empty")
    model = init_model.copy()
    fit(model, synth.x, synth.y, epochs, train_cfg.optimizer_state(), train_cfg.batch_size,
        stream(seed, "warm-train"))
    return ServerState(global_model=model, synthetic=synth, round_t=0)


def build_compact_subset(synth: SyntheticSet, per_class: int, seed: int = 0) -> SyntheticSet:
    """Uniform per-class subsample with ``min(per_class, available)`` samples per class."""
    if len(synth) == 0:
        raise ValueError("synthetic set is empty")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = stream(seed, "compact")
    keep: List[np.ndarray] = []
    for c in np.unique(synth.y):
        idx = np.flatnonzero(synth.y == c)
        keep.append(np.sort(rng.choice(idx, size=min(per_class, len(idx)), replace=False)))
    return synth.subset(np.concatenate(keep))


def warmstart_report(server: ServerState, clients: Sequence[ClientState]) -> Dict:
    model = server.global_model
    x = np.vstack([c.x_test for c in clients])
    y = np.concatenate([c.y_test for c in clients])
    synth = server.synthetic
    return {
        "synthetic_size": len(synth) if synth is not None else 0,
        "per_class_counts": {str(k): v for k, v in (synth.class_counts() if synth is not None else {}).items()},
        "compact_size": len(server.compact) if server.compact is not None else 0,
        "client_accuracy": {str(c.client_id): nn.accuracy(model, c.x_test, c.y_test) for c in clients},
        "pooled_accuracy": nn.accuracy(model, x, y),
    }

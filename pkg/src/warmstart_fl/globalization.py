"""Server-side fine-tuning of uploaded local models and of their aggregate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from . import micro_nn as nn
from .federation import (ClientState, RoundMetrics, ServerState, TrainConfig, fedavg_aggregate, fit,
                         local_train)
from .generator import SyntheticSet
from .rng import stream


@dataclass(frozen=True)
class FTConfig:
    enabled: bool = True
    epochs: int = 2
    per_class: int = 20
    lr_scale: float = 0.1  # relative to the local learning rate


def _finetune(model: nn.Network, subset: SyntheticSet, epochs: int, train_cfg: TrainConfig,
              lr_scale: float, rng) -> nn.Network:
    if subset is None or len(subset) == 0:
        raise ValueError("compact synthetic subset is empty")
    out = model.copy()
    fit(out, subset.x, subset.y, epochs, train_cfg.optimizer_state(lr_scale), train_cfg.batch_size, rng)
    return out


def finetune_locals(locals_: Sequence[nn.Network], subset: SyntheticSet, epochs: int,
                    train_cfg: TrainConfig, lr_scale: float = 0.1, seed: int = 0, round_t: int = 0,
                    client_ids: Sequence[int] = ()) -> List[nn.Network]:
    """Fine-tuned copies, one per local model. The inputs are not modified."""
    ids = list(client_ids) or list(range(len(locals_)))
    return [_finetune(m, subset, epochs, train_cfg, lr_scale, stream(seed, "ft-local", cid, round_t))
            for m, cid in zip(locals_, ids)]


def finetune_aggregated(aggregate: nn.Network, subset: SyntheticSet, epochs: int,
                        train_cfg: TrainConfig, lr_scale: float = 0.1, seed: int = 0,
                        round_t: int = 0) -> nn.Network:
    return _finetune(aggregate, subset, epochs, train_cfg, lr_scale, stream(seed, "ft-agg", round_t))


def global_round(server: ServerState, clients: Sequence[ClientState], train_cfg: TrainConfig,
                 ft: FTConfig, seed: int) -> Tuple[ServerState, RoundMetrics, List[nn.Network]]:
    """Broadcast, local training, optional FT of locals, FedAvg, optional FT of the aggregate.

    Returns the new server state, metrics (PM = the client's local model) and
    the raw local models, which clients keep for personalization.
    """
    t = server.round_t + 1
    broadcast = server.global_model
    ids = [c.client_id for c in clients]
    locals_ = [local_train(c, broadcast, train_cfg, seed, t) for c in clients]
    use_ft = ft.enabled and server.compact is not None and len(server.compact) > 0
    uploaded = (finetune_locals(locals_, server.compact, ft.epochs, train_cfg, ft.lr_scale, seed, t, ids)
                if use_ft else locals_)
    agg = fedavg_aggregate(uploaded, [c.n_train for c in clients], ids)
    if use_ft:
        agg = finetune_aggregated(agg, server.compact, ft.epochs, train_cfg, ft.lr_scale, seed, t)
    new_server = ServerState(agg, server.synthetic, server.compact, t)
    cls_bytes = broadcast.nbytes()
    metrics = RoundMetrics(
        round_t=t,
        gm_acc={c.client_id: nn.accuracy(agg, c.x_test, c.y_test) for c in clients},
        pm_acc={c.client_id: nn.accuracy(m, c.x_test, c.y_test) for c, m in zip(clients, locals_)},
        bytes_up={cid: cls_bytes for cid in ids},
        bytes_down={cid: cls_bytes for cid in ids},
        flops={c.client_id: train_cfg.epochs * 3 * nn.flop_count(broadcast, c.n_train) for c in clients},
    )
    for c, m in zip(clients, locals_):
        c.local_model = m
    return new_server, metrics, locals_

import itertools

import numpy as np
import pytest

import shared_runs
from warmstart_fl import micro_nn as nn
from warmstart_fl.config import ExperimentConfig
from warmstart_fl.federation import (PartitionSpec, ServerState, TrainConfig, fedavg_aggregate, fit,
                                     local_train, partition)
from warmstart_fl.generator import SyntheticSet
from warmstart_fl.globalization import FTConfig, finetune_aggregated, finetune_locals, global_round
from warmstart_fl.harness import RunResult, metrics_rows
from warmstart_fl.rng import stream
from warmstart_fl.warmstart import init_classifier


@pytest.fixture()
def bench():
    return partition(PartitionSpec(), 0)


def _subset(bench, per_class=20):
    # stand-in compact set drawn from public data
    idx = np.concatenate([np.flatnonzero(bench.public_y == c)[:per_class] for c in range(10)])
    return SyntheticSet(bench.public_x[idx], bench.public_y[idx], np.full(len(idx), -1), idx)


def _flat(net):
    return np.concatenate([p.ravel() for p in net.params()])


def test_zero_epoch_ft_is_identity(bench):
    m = init_classifier(16, (64,), 10, 0)
    sub = _subset(bench)
    out = finetune_locals([m], sub, 0, TrainConfig())[0]
    assert _flat(out).tobytes() == _flat(m).tobytes()
    agg = finetune_aggregated(m, sub, 0, TrainConfig())
    assert _flat(agg).tobytes() == _flat(m).tobytes()


def test_ft_does_not_modify_inputs_and_is_deterministic(bench):
    m = init_classifier(16, (64,), 10, 0)
    before = _flat(m).tobytes()
    a = finetune_locals([m], _subset(bench), 2, TrainConfig(), seed=1, round_t=2, client_ids=[3])[0]
    b = finetune_locals([m], _subset(bench), 2, TrainConfig(), seed=1, round_t=2, client_ids=[3])[0]
    assert _flat(m).tobytes() == before
    assert _flat(a).tobytes() == _flat(b).tobytes()
    assert _flat(a).tobytes() != before


def test_ft_rejects_empty_subset():
    m = init_classifier(16, (64,), 10, 0)
    with pytest.raises(ValueError):
        finetune_aggregated(m, SyntheticSet.empty(16), 1, TrainConfig())


def test_single_client_no_ft_is_local_training(bench):
    client = bench.clients[:1]
    server = ServerState(init_classifier(16, (64,), 10, 0))
    new, _, locals_ = global_round(server, client, TrainConfig(), FTConfig(enabled=False), seed=0)
    ref = local_train(client[0], server.global_model, TrainConfig(), seed=0, round_t=1)
    assert _flat(new.global_model).tobytes() == _flat(ref).tobytes()
    assert _flat(locals_[0]).tobytes() == _flat(ref).tobytes()


def test_no_ft_round_matches_fedavg_reference(bench):
    server = ServerState(init_classifier(16, (64,), 10, 0), compact=_subset(bench))
    new, metrics, _ = global_round(server, bench.clients, TrainConfig(), FTConfig(enabled=False), seed=2)
    locals_ = [local_train(c, server.global_model, TrainConfig(), 2, 1) for c in bench.clients]
    ref = fedavg_aggregate(locals_, [c.n_train for c in bench.clients])
    assert _flat(new.global_model).tobytes() == _flat(ref).tobytes()
    assert new.round_t == 1
    assert metrics.bytes_up == metrics.bytes_down == {c.client_id: ref.nbytes() for c in bench.clients}


def test_metrics_rows_per_round(bench):
    server = ServerState(init_classifier(16, (64,), 10, 0))
    res = RunResult("m", 0, -1, [], [])
    for _ in range(3):
        server, metrics, _ = global_round(server, bench.clients, TrainConfig(epochs=1), FTConfig(), seed=0)
        res.rounds.append(metrics)
    rows = metrics_rows(res, "h", record_wall_time=False)
    for t in (1, 2, 3):
        assert len([r for r in rows if r["round"] == t]) == len(bench.clients) + 1


@pytest.mark.slow
def test_ft_pulls_locals_together():
    cfg = ExperimentConfig()
    changes = []
    for seed in shared_runs.SEEDS:
        server = shared_runs.default_warm_server(seed)
        clients = shared_runs.default_bench(seed).clients
        locals_ = [local_train(c, server.global_model, cfg.train, seed, 1) for c in clients]
        tuned = finetune_locals(locals_, server.compact, cfg.ft.epochs, cfg.train, cfg.ft.lr_scale, seed, 1,
                                [c.client_id for c in clients])

        def spread(models):
            return np.mean([np.linalg.norm(_flat(a) - _flat(b)) for a, b in itertools.combinations(models, 2)])
        changes.append(spread(tuned) - spread(locals_))
    assert np.mean(changes) < 0


@pytest.mark.slow
def test_ft_loss_non_increasing_on_subset():
    cfg = ExperimentConfig()
    server = shared_runs.default_warm_server(0)
    client = shared_runs.default_bench(0).clients[0]
    model = local_train(client, server.global_model, cfg.train, 0, 1)
    history = fit(model, server.compact.x, server.compact.y, 5, cfg.train.optimizer_state(cfg.ft.lr_scale),
                  cfg.train.batch_size, stream(0, "ft-agg", 1))
    assert all(b <= a for a, b in zip(history, history[1:]))


@pytest.mark.slow
def test_gm_improves_over_rounds():
    curve = shared_runs.mean_curve(shared_runs.preset_run("ablation_ft").rows, "ft")
    assert curve[5] >= curve[1]


@pytest.mark.slow
def test_ft_does_not_hurt_gm():
    s = shared_runs.preset_run("ablation_ft").summary
    assert s["ft"]["gm_mean"] >= s["noft"]["gm_mean"]

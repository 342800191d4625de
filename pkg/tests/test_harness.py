import json
import math

import numpy as np
import pytest

from elastic_lab import engine as E
from elastic_lab import harness
from elastic_lab.config import TrainConfig
from elastic_lab.data import SyntheticSource, make_dataset
from elastic_lab.importance import ImportanceVector
from elastic_lab.selector import InfeasibleBudget


def small(**kw):
    base = dict(per_class=30, epochs=4, interval=2, lr=1e-2, spread=0.7)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def elastic_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("runs")
    full = harness.run(small(strategy="full"), d / "full.jsonl")
    elastic = harness.run(small(rho=0.5), d / "elastic.jsonl", reference=full)
    return full, elastic, d


def test_accounting_is_complete(elastic_pair):
    for rep in elastic_pair[:2]:
        assert rep.total_time_ns == rep.train_time_ns + rep.overhead_time_ns + rep.eval_time_ns
        cum = [e.cumulative_ns for e in rep.epochs]
        assert cum == sorted(cum) and cum[-1] == rep.total_time_ns
        running = 0
        for e in rep.epochs:
            assert min(e.train_ns, e.overhead_ns, e.eval_ns) >= 0
            running += e.train_ns + e.overhead_ns + e.eval_ns
            assert e.cumulative_ns == running


def test_budget_compliance_and_exact_prediction(elastic_pair):
    _, rep, _ = elastic_pair
    limit = math.floor(0.5 * rep.T_full)
    for e in rep.epochs:
        assert e.predicted_iter_ns <= limit
        assert e.predicted_iter_ns == e.measured_iter_ns
    assert all(t <= limit for t in rep.limits)


def test_speedup_and_compare(elastic_pair):
    full, elastic, _ = elastic_pair
    assert elastic.speedup == full.total_time_ns / elastic.total_time_ns
    row = harness.compare(elastic, full)
    assert row["time_ratio"] <= 0.55
    assert row["flops_ratio"] != row["time_ratio"]
    same = harness.compare(full, full)
    assert same["time_ratio"] == 1.0 and same["accuracy_delta"] == 0.0


def test_compare_rejects_mismatched_configs(elastic_pair):
    full, _, _ = elastic_pair
    other = harness.RunReport.from_dict({**full.to_dict(),
                                         "config": {**full.config, "seed": 99}})
    with pytest.raises(harness.ConfigMismatch):
        harness.compare(full, other)


def test_run_log_records(elastic_pair):
    _, _, d = elastic_pair
    records = [json.loads(line) for line in (d / "elastic.jsonl").read_text().splitlines()]
    kinds = [r["type"] for r in records]
    assert kinds.count("epoch") == 4
    assert kinds.count("importance") == kinds.count("selection") == 2
    assert kinds[0] == "profile"
    sel = next(r for r in records if r["type"] == "selection")
    assert len(sel["mask"]) == 12 and "wall_seconds" not in sel["stats"]
    full_kinds = [json.loads(x)["type"] for x in (d / "full.jsonl").read_text().splitlines()]
    assert "importance" not in full_kinds


def test_report_round_trip(elastic_pair, tmp_path):
    _, rep, _ = elastic_pair
    rep.dump(tmp_path / "r.json")
    assert harness.RunReport.load(tmp_path / "r.json") == rep
    assert harness.selection_mask_of(rep, 0).forward_bits() == rep.epochs[0].mask


def test_reproducible(tmp_path):
    cfg = small(epochs=2)
    a = harness.run(cfg, tmp_path / "a.jsonl")
    b = harness.run(cfg, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert a == b


def test_rho_one_matches_full_training_step_for_step():
    cfg = small(epochs=3, interval=1, reserve_overhead=False)
    big = lambda net, epoch, iv: ImportanceVector((1e6,) * len(iv), iv.epoch_stamp, iv.batch_seed)
    elastic = harness.run(cfg.replace(rho=1.0), importance_hook=big)
    full = harness.run(cfg.replace(strategy="full"))
    assert all(all(e.mask) for e in elastic.epochs)
    assert [e.train_loss for e in elastic.epochs] == [e.train_loss for e in full.epochs]
    assert [e.test_accuracy for e in elastic.epochs] == [e.test_accuracy for e in full.epochs]


def test_infeasible_rho_aborts_with_min_rho():
    with pytest.raises(InfeasibleBudget) as err:
        harness.run(small(rho=0.2, epochs=1, reserve_overhead=False))
    assert 0.3 < err.value.min_rho < 0.4  # forward pass share of the default model
    with pytest.raises(InfeasibleBudget) as err:
        harness.run(small(rho=0.2, epochs=1))
    assert err.value.min_rho > 0.4  # the overhead reserve raises the floor


def test_baselines_keep_their_masks():
    rep = harness.run(small(strategy="traditional_tl", epochs=1))
    assert rep.epochs[0].mask == [0] * 10 + [1, 1]
    assert rep.overhead_time_ns == rep.epochs[0].overhead_ns == rep.T_full


def test_reprofiling_adds_overhead():
    once = harness.run(small(strategy="full", epochs=2))
    every = harness.run(small(strategy="full", epochs=2, reprofile_every_epoch=True))
    assert every.overhead_time_ns == 2 * once.overhead_time_ns


def test_sweep_writes_artifacts(tmp_path):
    reps = harness.sweep(small(epochs=1), "rho", [0.5, 0.9], tmp_path)
    assert len(reps) == 2
    assert (tmp_path / "rho_0.5.json").exists() and (tmp_path / "rho_0.9.jsonl").exists()
    assert reps[0].total_time_ns < reps[1].total_time_ns


def test_mlp_and_linear_models_run():
    for model in ("mlp", "linear"):
        rep = harness.run(small(model=model, epochs=2, strategy="elastic", rho=0.8))
        assert 0 <= rep.final_accuracy <= 1


def test_linear_model_separates_tight_clusters():
    train, _ = make_dataset(SyntheticSource(num_classes=4, per_class=50, spread=1e-3, seed=3))
    net = E.build_network([E.dense(64, 4), E.softmax_ce()], 0)
    order_rng = np.random.default_rng(0)
    for _ in range(12):
        for idx in order_rng.permutation(len(train)).reshape(-1, 4):
            E.train_step(net, train.batch(idx), lr=1e-2, momentum=0.9, weight_decay=5e-4)
    _, cache = E.forward(net, train.batch(np.arange(len(train))), E.Mode.EVAL)
    assert np.mean(cache.probs.argmax(axis=1) == train.labels) == 1.0


def test_probe_seed_is_deterministic():
    assert harness.probe_seed(0, 3) == harness.probe_seed(0, 3)
    assert harness.probe_seed(0, 3) != harness.probe_seed(0, 6)

import numpy as np
import pytest

from sdas import tensor as T
from sdas.cell import Edge
from sdas.data import synth_dataset
from sdas.ops import build_operation, make_spec
from sdas.optim import SGD, Adam, cosine_lr
from sdas.search import (SearchConfig, SearchDiverged, SearchNetwork, bilevel_step, graphs_from_checkpoint,
                         read_metrics_csv, run_search, write_metrics_csv)
from sdas.schedule import count_reachable
from sdas.tensor import Parameter, Tensor

TOY_OPS = ("identity", "max_pool_3x3", "sep_conv_3x3")


def toy_config(**kw):
    base = dict(ops=TOY_OPS, n_int=2, K=1, C1=4, C2=8, batch_size=8, epochs=2, seed=0)
    base.update(kw)
    return SearchConfig(**base)


@pytest.fixture(scope="module")
def toy_data():
    return synth_dataset("image", 2, 40, (3, 8, 8), seed=0)


def test_cosine_lr():
    assert cosine_lr(0.025, 0, 10) == 0.025
    assert cosine_lr(0.025, 10, 10) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(0.025, 5, 10) == pytest.approx(0.0125)
    with pytest.raises(ValueError):
        cosine_lr(0.025, 11, 10)


def test_config_defaults():
    img = SearchConfig()
    assert (img.batch_size, img.eta1, img.eta2, img.K, img.C1, img.C2) == (64, 0.025, 3e-4, 2, 48, 64)
    vid = SearchConfig(target="video", op_set="o3d")
    assert (vid.C1, vid.C2) == (16, 64)
    with pytest.raises(ValueError):
        SearchConfig(op_set="oadv")


def test_momentum_closed_form():
    w = Parameter(np.array([2.0]), dtype="double")
    opt = SGD({"w": w}, momentum=0.9, weight_decay=0.1)
    for _ in range(2):
        w.grad = 3.0 * w.data
        opt.step(0.05)
    # b1 = 3*2 + 0.1*2 = 6.2, w1 = 1.69; b2 = 0.9*6.2 + 3.1*1.69 = 10.819, w2 = 1.69 - 0.05*10.819
    assert w.data[0] == pytest.approx(1.14905, abs=1e-12)


def _batches(ds, n=8):
    x, y = ds.subset("train")
    return (x[:n], y[:n]), (x[n:2 * n], y[n:2 * n])


def test_zero_rates_leave_parameters_identical(toy_data):
    net = SearchNetwork(toy_config(eta2=0.0), 2)
    before = {k: p.data.copy() for k, p in {**net.weight_parameters(), **net.arch_parameters()}.items()}
    opt_w = SGD(net.weight_parameters(), 0.9, 3e-4)
    opt_a = Adam(net.arch_parameters(), lr=0.0)
    bilevel_step(net, *_batches(toy_data), opt_w, opt_a, 0.0)
    after = {**net.weight_parameters(), **net.arch_parameters()}
    assert all(np.array_equal(before[k], after[k].data) for k in before)


def test_architecture_isolation(toy_data):
    net = SearchNetwork(toy_config(), 2)
    w_before = {k: p.data.copy() for k, p in net.weight_parameters().items()}
    a_before = {k: p.data.copy() for k, p in net.arch_parameters().items()}
    opt_w = SGD(net.weight_parameters(), 0.9, 3e-4)
    opt_a = Adam(net.arch_parameters(), lr=0.0)
    bilevel_step(net, *_batches(toy_data), opt_w, opt_a, 0.1)
    assert all(np.array_equal(a_before[k], p.data) for k, p in net.arch_parameters().items())
    assert any(not np.array_equal(w_before[k], p.data) for k, p in net.weight_parameters().items())
    net2 = SearchNetwork(toy_config(), 2)
    w2 = {k: p.data.copy() for k, p in net2.weight_parameters().items()}
    bilevel_step(net2, *_batches(toy_data), SGD(net2.weight_parameters()), Adam(net2.arch_parameters()), 0.0)
    assert all(np.array_equal(w2[k], p.data) for k, p in net2.weight_parameters().items())
    assert any(np.any(p.data != 0) for p in net2.arch_parameters().values())


def test_alpha_favors_better_op():
    """Identity classifies the val set via pooled channels; max-pool spreads a decoy spike and does not."""
    with T.precision("double"):
        rng = np.random.default_rng(0)
        n, c = 16, 2
        y = rng.integers(0, c, n)
        x = np.zeros((n, c, 4, 4))
        for i, lab in enumerate(y):
            x[i, lab] = 1.0
            x[i, 1 - lab, 1, 1] = 5.0
        ops = {o: build_operation(make_spec(o), c, 0) for o in ("identity", "max_pool_3x3")}
        edge = Edge(0, 2, tuple(ops), alpha=Parameter(np.zeros(2)), beta=Parameter(np.zeros(1)))
        opt = Adam({"alpha": edge.alpha, "beta": edge.beta})
        from sdas.cell import mixed_edge_forward
        for _ in range(50):
            opt.zero_grad()
            logits = T.global_avg_pool(mixed_edge_forward(edge, ops, Tensor(x)))
            T.backward(T.cross_entropy(T.mul(logits, Tensor(np.array(4.0))), y))
            opt.step()
        assert edge.weights()[0] > 0.5 and edge.alpha.data[0] > edge.alpha.data[1]


def test_toy_search_and_das(toy_data):
    res = run_search(toy_config(), toy_data)
    assert res.finished and res.genotype is not None
    assert res.metrics[-1]["reachable_count"] == 1
    das = run_search(toy_config(mode="das"), toy_data)
    assert das.genotype is not None
    assert {r.t for r in das.log.records} == {das.T} and len(das.log) == 14


def test_forward_cost_drops_after_edge_discretizations(toy_data):
    res = run_search(toy_config(schedule="A", epochs=4), toy_data)
    macs = [r["forward_macs"] for r in res.metrics]
    assert all(a >= b for a, b in zip(macs, macs[1:])) and macs[-1] < macs[0]


def test_reproducible_and_resumable(toy_data, tmp_path):
    cfg = toy_config(schedule="B", epochs=3)
    full = run_search(cfg, toy_data, checkpoint=tmp_path / "full.npz")
    again = run_search(cfg, toy_data)
    assert again.metrics == full.metrics and again.genotype == full.genotype
    run_search(cfg, toy_data, stop_after=4, checkpoint=tmp_path / "half.npz")
    resumed = run_search(cfg, toy_data, resume_from=tmp_path / "half.npz")
    assert resumed.metrics == full.metrics and resumed.genotype == full.genotype
    a, b = full.network.state_dict(), resumed.network.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert count_reachable(graphs_from_checkpoint(tmp_path / "full.npz")) == 1
    with pytest.raises(ValueError):
        run_search(toy_config(seed=9, schedule="B", epochs=3), toy_data, resume_from=tmp_path / "half.npz")


def test_end_of_search_equivalence(toy_data):
    res = run_search(toy_config(), toy_data)
    net = res.network
    net.eval()
    disc = net.to_discrete(res.genotype)
    rng = np.random.default_rng(0)
    with T.no_grad():
        for _ in range(3):
            x = Tensor(rng.standard_normal((4, 3, 8, 8)))
            assert np.array_equal(net(x).data, disc(x).data)


def test_divergence_raises_with_snapshot(toy_data):
    ds = synth_dataset("image", 2, 40, (3, 8, 8), seed=0)
    ds.x[:] = np.nan
    with pytest.raises(SearchDiverged) as e:
        run_search(toy_config(), ds)
    assert e.value.snapshot["iteration"] == 1 and "arch" in e.value.snapshot


def test_splits_disjoint_and_metrics_csv(toy_data, tmp_path):
    from sdas.search import _Run

    with T.precision("single"):
        run = _Run(toy_config(), toy_data)
    assert not set(run.train_idx) & set(run.val_idx)
    res = run_search(toy_config(), toy_data)
    write_metrics_csv(res.metrics, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == res.metrics


def test_optimizer_sync_drops_state():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(3))
    opt = Adam({"a": a, "b": b})
    a.grad, b.grad = np.ones(2, np.float32), np.ones(3, np.float32)
    opt.step()
    opt.sync({"a": a})
    assert set(opt.m) == {"a"} and set(opt.v) == {"a"}

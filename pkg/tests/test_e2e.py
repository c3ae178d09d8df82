import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualplan import scenario as sc
from dualplan.autograd import Tensor, no_grad
from dualplan.autograd.gradcheck import relative_error
from dualplan.bank import build_bank, collect_samples
from dualplan.e2e import E2EPlanner, best_plans, init_queries, plan_e2e, wta_loss
from dualplan.errors import ShapeError


def planner(seed=0, d=8, dtype=np.float64):
    return E2EPlanner(d, 11, 6, np.random.default_rng(seed), d=d, heads=2, layers=1, ffn=16, dtype=dtype)


@pytest.fixture(scope="module")
def world():
    scen = sc.generate(sc.ScenarioConfig(), 31, 120)
    return scen, build_bank(collect_samples(scen), k=36, seed=0)


def test_output_shapes():
    rng = np.random.default_rng(0)
    m = planner()
    anchors = rng.normal(size=(3, 5, 6, 2))
    trajs, conf = m(rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 11)), anchors)
    assert trajs.shape == (3, 5, 6, 2) and conf.shape == (3, 5)
    trajs, conf = m(rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 11)), anchors, rng.normal(size=(3, 6, 2)))
    assert trajs.shape == (3, 6, 6, 2) and conf.shape == (3, 6)


def test_bad_anchor_shape():
    m = planner()
    with pytest.raises(ShapeError):
        m(np.zeros((1, 4, 8)), np.zeros((1, 11)), np.zeros((1, 5, 8, 2)))


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_masked_synergy_is_bit_exact_plain(seed):
    rng = np.random.default_rng(seed)
    m = planner(seed % 7)
    coll, feats, anchors = rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 11)), rng.normal(size=(2, 5, 6, 2))
    a = m(coll, feats, anchors)
    b = m(coll, feats, anchors, rng.normal(size=(2, 6, 2)), mask_synergy=True)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_synergy_query_changes_anchor_queries():
    rng = np.random.default_rng(1)
    m = planner()
    coll, feats, anchors = rng.normal(size=(1, 4, 8)), rng.normal(size=(1, 11)), rng.normal(size=(1, 5, 6, 2))
    a = m(coll, feats, anchors)[0].data
    b = m(coll, feats, anchors, rng.normal(size=(1, 6, 2)))[0].data
    assert not np.allclose(a, b[:, :5])


@given(st.floats(-50, 50, allow_nan=False), st.integers(0, 1000))
def test_best_plan_invariant_to_confidence_shift(c, seed):
    rng = np.random.default_rng(seed)
    trajs = rng.normal(size=(4, 7, 6, 2))
    conf = rng.integers(-3, 3, size=(4, 7)).astype(float)
    np.testing.assert_array_equal(best_plans(trajs, conf), best_plans(trajs, conf + c))


def test_best_plan_tie_goes_to_first_query():
    trajs = np.arange(3 * 6 * 2, dtype=float).reshape(1, 3, 6, 2)
    np.testing.assert_array_equal(best_plans(trajs, np.array([[1.0, 2.0, 2.0]]))[0], trajs[0, 1])


def test_queries_from_bank(world):
    scen, bank = world
    m = planner()
    status = scen[0].ego_status(6)
    qs = init_queries(m, bank, status)
    assert len(qs) == 36 and qs[0].init_source == "anchor:0"
    np.testing.assert_array_equal(qs[3].anchor_traj.waypoints, bank.for_command(status.command)[3].waypoints[:6])
    syn = scen[0].future(6, 6)
    qs = init_queries(m, bank, status, syn)
    assert len(qs) == 37 and qs[-1].init_source == "synergy"
    out = plan_e2e(m, np.zeros((4, 8)), qs, status)
    assert out.trajectories.shape == (37, 6, 2)
    assert out.best_index == int(np.argmax(out.confidences))
    np.testing.assert_array_equal(out.best.waypoints, out.trajectories[out.best_index])
    masked = plan_e2e(m, np.zeros((4, 8)), qs, status, mask_synergy=True)
    plain = plan_e2e(m, np.zeros((4, 8)), qs[:-1], status)
    np.testing.assert_array_equal(masked.trajectories, plain.trajectories)


def test_wta_loss_gradients():
    rng = np.random.default_rng(2)
    m = planner(2)
    coll, feats, anchors = rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 11)), rng.normal(size=(2, 3, 6, 2))
    syn = rng.normal(size=(2, 6, 2))
    # far-away targets keep every L1 residual clear of its kink
    gt = rng.normal(size=(2, 6, 2)) + 50.0

    def f():
        return wta_loss(*m(coll, feats, anchors, syn), gt)[0]

    m.zero_grad()
    f().backward()
    for name, p in m.named_parameters():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        num = []
        for j in idx:
            o = flat[j]
            flat[j] = o + 1e-5
            fp = float(f().data)
            flat[j] = o - 1e-5
            fm = float(f().data)
            flat[j] = o
            num.append((fp - fm) / 2e-5)
        if name.endswith("wk.bias"):
            # identically zero under softmax shift invariance; only noise is left
            assert np.abs(np.array(num)).max() < 1e-8 and np.abs(p.grad).max() < 1e-12, name
            continue
        assert relative_error(p.grad.reshape(-1)[idx], np.array(num)) < 1e-4, name


def test_wta_only_trains_the_winner():
    m = planner(3)
    rng = np.random.default_rng(3)
    trajs = Tensor(rng.normal(size=(1, 4, 6, 2)), requires_grad=True)
    conf = Tensor(np.zeros((1, 4)), requires_grad=True)
    gt = trajs.data[0, 2] + 0.01
    loss, _ = wta_loss(trajs, conf, gt[None])
    loss.backward()
    g = np.abs(trajs.grad).sum(axis=(-1, -2))[0]
    assert g[2] > 0 and g[[0, 1, 3]].sum() == 0
    assert conf.grad[0, 2] < 0  # pushes the winner's confidence up



def test_wta_winner_from_base():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(1, 4, 6, 2))
    gt = base[0, 1] + 0.01
    # predictions shuffled so that query 3 is now the closest one
    trajs = Tensor(base[:, [0, 3, 2, 1]].copy(), requires_grad=True)
    conf = Tensor(np.zeros((1, 4)), requires_grad=True)
    loss, _ = wta_loss(trajs, conf, gt[None], base=base)
    loss.backward()
    g = np.abs(trajs.grad).sum(axis=(-1, -2))[0]
    assert g[1] > 0 and g[[0, 2, 3]].sum() == 0
    assert np.argmin(conf.grad[0]) == 1

def test_single_frame_latency_default_size():
    """One tick at default width must fit the 5 ms budget with a 10x slack for CPU variance."""
    m = E2EPlanner(64, 11, 6, np.random.default_rng(0), d=64, heads=4, layers=2, ffn=128, dtype=np.float32)
    rng = np.random.default_rng(0)
    coll, feats = rng.normal(size=(1, 48, 64)), rng.normal(size=(1, 11))
    anchors, syn = rng.normal(size=(1, 36, 6, 2)), rng.normal(size=(1, 6, 2))
    with no_grad():
        m(coll, feats, anchors, syn)
        times = []
        for _ in range(20):
            t0 = time.perf_counter()
            m(coll, feats, anchors, syn)
            times.append(time.perf_counter() - t0)
    assert np.median(times) < 0.05

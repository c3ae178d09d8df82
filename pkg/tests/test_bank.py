import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualplan import scenario as sc
from dualplan.autograd import Adam, AdamConfig
from dualplan.autograd import tensor as T
from dualplan.bank import (
    BankEntry,
    EgoMLP,
    TrajectoryBank,
    assemble_candidates,
    build_bank,
    candidate_batch,
    collect_samples,
    feature_stats,
    kmeans,
    retrieve,
)
from dualplan.errors import BankBuildError, FormatError, InvalidCommand, ModelNotReady
from dualplan.geometry import COMMANDS, Command, EgoStatus, Pose2, Trajectory


def exhaustive_inertia(x, k):
    """Minimal within-cluster sum of squares over every labelling with k non-empty clusters."""
    n = len(x)
    labels = np.array(list(itertools.product(range(k), repeat=n)))
    onehot = labels[:, :, None] == np.arange(k)
    counts = onehot.sum(1)
    ok = (counts > 0).all(1)
    sums = np.einsum("lnk,nd->lkd", onehot.astype(float), x)
    sq = (x**2).sum()
    inertia = sq - ((sums**2).sum(-1) / np.maximum(counts, 1)).sum(-1)
    return inertia[ok].min()


def blobs(rng, n, k, d=2, sep=6.0):
    while True:
        centres = rng.uniform(-10, 10, size=(k, d))
        gaps = [np.linalg.norm(a - b) for a, b in itertools.combinations(centres, 2)]
        if not gaps or min(gaps) >= sep:
            break
    lab = np.arange(n) % k
    return centres[lab] + rng.normal(size=(n, d))


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    k = 1 + seed % 3
    n = int(rng.integers(max(k, 4), 13))
    x = blobs(rng, n, k)
    res = kmeans(x, k, seed=seed)
    assert res.inertia == pytest.approx(exhaustive_inertia(x, k), rel=1e-9, abs=1e-9)


def test_kmeans_inertia_never_increases():
    rng = np.random.default_rng(3)
    res = kmeans(rng.normal(size=(200, 3)), 8, seed=0, n_init=1)
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(BankBuildError):
        kmeans(np.zeros((3, 2)), 4)


@pytest.fixture(scope="module")
def scenarios():
    return sc.generate(sc.ScenarioConfig(), 11, 120)


@pytest.fixture(scope="module")
def bank(scenarios):
    return build_bank(collect_samples(scenarios), k=36, seed=0)


def test_bank_has_36_entries_per_command(bank):
    assert len(bank) == 108
    for c in COMMANDS:
        es = bank.for_command(c)
        assert len(es) == 36
        assert all(e.command is c and e.waypoints.shape == (8, 2) for e in es)


def test_bank_entries_are_expert_samples(scenarios, bank):
    samples = collect_samples(scenarios)
    futures = {s.future.tobytes() for s in samples}
    for c in COMMANDS:
        assert all(e.waypoints.tobytes() in futures for e in bank.for_command(c))


def test_normalisation_statistics(scenarios, bank):
    feats = np.array([s.feature for s in collect_samples(scenarios)])
    mean, scale = feature_stats(feats)
    np.testing.assert_array_equal(bank.mean, mean)
    np.testing.assert_array_equal(bank.scale, scale)
    z = (feats - mean) / scale
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-9)


def test_too_few_samples(scenarios):
    with pytest.raises(BankBuildError):
        build_bank(collect_samples(scenarios[:3]), k=36)


def random_status(rng, command):
    hist = Trajectory(0.0, 0.5, rng.normal(scale=5, size=(4, 2)), Pose2())
    return EgoStatus(float(abs(rng.normal(8, 4))), float(rng.normal()), float(rng.normal(0, 0.2)), command, hist)


def test_retrieve_matches_brute_force(bank):
    rng = np.random.default_rng(0)
    for q in range(1000):
        status = random_status(rng, COMMANDS[q % 3])
        got = retrieve(bank, status, 5)
        f = (status.feature() - bank.mean) / bank.scale
        es = bank.for_command(status.command)
        d = [float(np.sum(((e.feature - bank.mean) / bank.scale - f) ** 2)) for e in es]
        order = sorted(range(len(es)), key=lambda i: (d[i], i))[:5]
        assert [g.waypoints.tobytes() for g in got] == [es[i].waypoints.tobytes() for i in order]


def test_retrieved_trajectories_on_planning_grid(bank):
    status = random_status(np.random.default_rng(1), Command.LEFT)
    for t in retrieve(bank, status, 3):
        assert t.start_time == pytest.approx(2.5)
        assert t.dt == 0.5


@given(st.integers(1, 36))
@settings(max_examples=20, deadline=None)
def test_k_l_counts(bank, k_l):
    status = random_status(np.random.default_rng(k_l), Command.RIGHT)
    assert len(retrieve(bank, status, k_l)) == k_l


def test_bad_k_l(bank):
    status = random_status(np.random.default_rng(0), Command.FORWARD)
    with pytest.raises(BankBuildError):
        retrieve(bank, status, 0)
    with pytest.raises(BankBuildError):
        retrieve(bank, status, 37)


def test_unknown_command(bank):
    with pytest.raises(InvalidCommand):
        bank.for_command("Reverse")


def test_json_round_trip(bank, tmp_path):
    path = tmp_path / "bank.json"
    bank.save(path)
    again = TrajectoryBank.load(path)
    assert again.to_json() == bank.to_json()
    again.save(tmp_path / "b2.json")
    assert path.read_bytes() == (tmp_path / "b2.json").read_bytes()


def test_corrupt_bank_file(bank, tmp_path):
    path = tmp_path / "bank.json"
    path.write_text('{"format_version": 1, "commands": ')
    with pytest.raises(FormatError):
        TrajectoryBank.load(path)
    d = bank.to_json()
    d["format_version"] = 9
    with pytest.raises(FormatError):
        TrajectoryBank.from_json(d)


def test_bad_normalisation_rejected():
    e = BankEntry(np.zeros((8, 2)), np.zeros(11), Command.FORWARD)
    with pytest.raises(BankBuildError):
        TrajectoryBank({Command.FORWARD: [e]}, np.zeros(11), np.zeros(11))


def test_untrained_mlp_is_not_a_candidate_source(bank):
    model = EgoMLP(11, 8, np.random.default_rng(0))
    with pytest.raises(ModelNotReady):
        assemble_candidates(bank, random_status(np.random.default_rng(0), Command.FORWARD), model)


def test_candidate_batch_agrees_with_single_frame_api(bank):
    rng = np.random.default_rng(5)
    model = EgoMLP(11, 8, rng)
    model.set_normalization(bank.mean, bank.scale)
    model.trained = True
    statuses = [random_status(rng, COMMANDS[i % 3]) for i in range(30)]
    feats = np.array([s.feature() for s in statuses])
    cmds = np.array([s.command.index for s in statuses])
    batch = candidate_batch(bank, model, feats, cmds, 5)
    for s, b in zip(statuses, batch):
        cs = assemble_candidates(bank, s, model, 5)
        assert len(cs) == 6 and cs.provenance[-1] == "mlp"
        np.testing.assert_allclose(cs.waypoints(), b, rtol=1e-6, atol=1e-6)


def test_ego_mlp_fits_a_linear_target():
    rng = np.random.default_rng(0)
    model = EgoMLP(11, 8, rng)
    x = rng.normal(size=(256, 11))
    w = rng.normal(size=(11, 16)) * 0.3
    y = (x @ w).reshape(-1, 8, 2)
    opt = Adam(model.parameters(), 3e-3, AdamConfig())
    first = None
    for _ in range(300):
        loss = T.l1_loss(model(x), y)
        first = first or float(loss.data)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert float(loss.data) < 0.2 * first

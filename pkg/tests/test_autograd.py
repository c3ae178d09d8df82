import numpy as np
import pytest

from dualplan.autograd import (
    Adam,
    AdamConfig,
    DecoderLayer,
    Linear,
    MultiHeadAttention,
    Parameter,
    Tensor,
    checkpoint,
    no_grad,
)
from dualplan.autograd import tensor as T
from dualplan.autograd.gradcheck import check, check_module
from dualplan.errors import (
    CheckpointError,
    FrozenParameterError,
    NumericsError,
    OptimizerError,
    ShapeError,
)

TOL = 1e-4


def rand(rng, *shape):
    return rng.normal(size=shape)


# Each entry: name -> (builder(rng) -> arrays, fn(*tensors) -> scalar tensor)
def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


OPS = {
    "matmul": (lambda r, a, b: [rand(r, a, b), rand(r, b, a)], lambda x, y: (T.matmul(x, y) * T.matmul(x, y)).sum()),
    "bmm": (lambda r, a, b: [rand(r, 2, a, b), rand(r, 2, b, 3)], lambda x, y: T.tanh(T.matmul(x, y)).sum()),
    "add_broadcast": (lambda r, a, b: [rand(r, a, b), rand(r, b)], lambda x, y: T.square(x + y).sum()),
    "mul": (lambda r, a, b: [rand(r, a, b), rand(r, a, 1)], lambda x, y: T.tanh(x * y).sum()),
    "layer_norm": (
        lambda r, a, b: [rand(r, a, b + 1), rand(r, b + 1), rand(r, b + 1)],
        lambda x, g, bt: (T.layer_norm(x, g, bt) * Tensor(np.linspace(-1, 1, x.shape[-1]))).sum(),
    ),
    "softmax": (
        lambda r, a, b: [rand(r, a, b + 1)],
        lambda x: (T.softmax(x, -1) * Tensor(np.arange(x.shape[-1], dtype=float))).sum(),
    ),
    "log_softmax": (lambda r, a, b: [rand(r, a, b + 1)], lambda x: T.log_softmax(x, -1)[..., 0].sum()),
    "gelu": (lambda r, a, b: [rand(r, a, b)], lambda x: T.gelu(x).sum()),
    "tanh": (lambda r, a, b: [rand(r, a, b)], lambda x: T.tanh(x).sum()),
    "transpose_reshape": (
        lambda r, a, b: [rand(r, a, b)],
        lambda x: T.square(T.transpose(x).reshape(-1) * Tensor(np.arange(x.data.size, dtype=float))).sum(),
    ),
    "concat_getitem": (
        lambda r, a, b: [rand(r, a, b), rand(r, a, 2)],
        lambda x, y: T.square(T.concat([x, y], axis=1)[:, 1:]).sum(),
    ),
    "mean": (lambda r, a, b: [rand(r, a, b)], lambda x: T.square(x.mean(axis=0)).sum()),
    "attention": (
        lambda r, a, b: [rand(r, a, 4), rand(r, b, 4), rand(r, b, 4)],
        lambda q, k, v: T.tanh(T.attention(q, k, v)).sum(),
    ),
    "cross_entropy": (lambda r, a, b: [rand(r, a, b + 1)], lambda x: T.cross_entropy(x, np.zeros(x.shape[0], int))),
}


def _cases():
    rng = np.random.default_rng(1234)
    cases = []
    for name in OPS:
        for k in range(4):
            a, b = rng.integers(1, 9, size=2)
            cases.append((name, k, int(a), int(b)))
    return cases


CASES = _cases()


@pytest.mark.parametrize("name,k,a,b", CASES)
def test_op_gradients_match_finite_differences(name, k, a, b):
    build, fn = OPS[name]
    rng = np.random.default_rng(hash((name, k)) % 2**32)
    errs = check(fn, build(rng, a, b), step=1e-5)
    assert max(errs) <= TOL, errs


def test_case_count():
    assert len(CASES) >= 50


@pytest.mark.parametrize("seed", range(4))
def test_multi_head_attention_parameter_gradients(seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(8, 2, rng)
    q, k = rand(rng, 1, 3, 8), rand(rng, 1, 5, 8)
    mask = rng.random((1, 1, 3, 5)) > 0.3
    mask[..., 0] = True
    errs = check_module(mha, lambda: T.tanh(mha(q, k, k, mask)).sum())
    assert max(errs.values()) <= TOL, errs


def test_decoder_layer_gradients():
    rng = np.random.default_rng(7)
    layer = DecoderLayer(8, 2, rng, ffn=8)
    x, mem = rand(rng, 2, 3, 8), rand(rng, 2, 4, 8)
    errs = check_module(layer, lambda: T.tanh(layer(x, mem)).sum())
    assert max(errs.values()) <= TOL, errs


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(4)), Tensor(x)).data, x)


def test_softmax_constant_is_uniform():
    out = T.softmax(Tensor(np.full((2, 5), 3.7)), -1).data
    assert np.allclose(out, 0.2, atol=1e-15)


def test_layer_norm_moments():
    x = np.random.default_rng(3).normal(loc=4, scale=3, size=(10, 16))
    out = T.layer_norm(Tensor(x), eps=0.0).data
    assert np.allclose(out.mean(-1), 0, atol=1e-6)
    assert np.allclose(out.var(-1), 1, atol=1e-6)


def test_single_key_attention_returns_projected_value():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(8, 4, rng)
    v = rand(rng, 1, 1, 8)
    expect = mha.wo(mha.wv(v)).data
    for _ in range(3):
        q = rand(rng, 1, 3, 8)
        out = mha(q, v, v).data
        assert np.allclose(out, np.broadcast_to(expect, out.shape), atol=1e-12)


def test_attention_key_permutation_invariance():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(8, 2, rng)
    q, kv = rand(rng, 1, 3, 8), rand(rng, 1, 6, 8)
    perm = rng.permutation(6)
    assert np.allclose(mha(q, kv, kv).data, mha(q, kv[:, perm], kv[:, perm]).data, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        MultiHeadAttention(10, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_nan_is_an_error():
    with pytest.raises(NumericsError):
        T.log(Tensor(np.array([-1.0])))


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad and y._parents == ()


def test_adam_zero_gradient_keeps_params():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_opposes_gradient():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    before = p.data.copy()
    opt = Adam([p], lr=0.01)
    p.grad = np.array([3.0, -0.1, 2.0])
    opt.step()
    assert np.all(np.sign(p.data - before) == -np.sign(p.grad))


def test_adam_converges_on_quadratic():
    # loss = 3 (w - 1.7)^2, closed-form minimum at 1.7
    p = Parameter(np.array([-4.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        loss = (T.square(p - 1.7) * 3.0).sum()
        loss.backward()
        opt.step()
    assert abs(p.data[0] - 1.7) < 1e-3


def test_adam_missing_gradient():
    p = Parameter(np.ones(2), name="w")
    with pytest.raises(OptimizerError):
        Adam([p]).step()


def test_frozen_parameter_write_is_error():
    p = Parameter(np.ones(2), name="w")
    p.freeze()
    with pytest.raises(FrozenParameterError):
        p._accumulate(np.ones(2))
    p.grad = np.ones(2)
    with pytest.raises(FrozenParameterError):
        Adam([p]).step()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    layer = Linear(3, 4, rng)
    small = Linear(2, 2, rng, dtype=np.float32)
    state = dict(layer.state_dict())
    state.update({"f32." + k: v for k, v in small.state_dict().items()})
    path = tmp_path / "m.ckpt"
    digest = checkpoint.save(path, state, "abc123")
    loaded, h = checkpoint.load(path)
    assert h == "abc123"
    assert list(loaded) == list(state)
    for k in state:
        assert loaded[k].dtype == state[k].dtype
        assert np.array_equal(loaded[k], state[k])
    assert checkpoint.save(tmp_path / "again.ckpt", loaded, "abc123") == digest


def test_checkpoint_corruption(tmp_path):
    raw = checkpoint.dumps({"w": np.ones(3)}, "h")
    with pytest.raises(CheckpointError):
        checkpoint.loads(raw[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"XXXX" + raw[4:])
    bad_version = raw[:4] + (99).to_bytes(4, "little") + raw[8:]
    with pytest.raises(CheckpointError, match="version 99"):
        checkpoint.loads(bad_version)

import numpy as np
import pytest

from stylecraft import tensor as T
from stylecraft.errors import ConfigurationError, ShapeError
from stylecraft.utils.layers import Attention, Linear, QueryBlock
from stylecraft.utils.optim import Adam, cosine_lr


def param(rng, *shape):
    return T.Parameter(rng.normal(size=shape))


def test_matmul_identity():
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.Tensor(np.eye(2)), b)
    assert np.array_equal(out.data, b.data)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
    assert '(2, 3)' in str(e.value) and '(4, 2)' in str(e.value)


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    with T.precision('f64'):
        a, b = param(rng, 5, 7), param(rng, 7, 3)
        assert T.grad_check(lambda: T.reduce_sum(T.matmul(a, b)), [a, b]) < 1e-4


def test_softmax_uniform_and_stable():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, 1.0 / 3)
    out = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) < 1e-6 and out[1] < 1e-6


def test_softmax_gradcheck():
    rng = np.random.default_rng(1)
    with T.precision('f64'):
        x = param(rng, 6)
        w = rng.normal(size=6)
        assert T.grad_check(lambda: T.reduce_sum(T.mul(T.softmax(x), w)), [x]) < 1e-4


def test_layer_norm_constant_slice():
    gain, bias = T.Parameter(np.ones(4)), T.Parameter(np.zeros(4))
    out = T.layer_norm(T.Tensor([5.0, 5.0, 5.0, 5.0]), gain, bias)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_pair():
    gain, bias = T.Parameter(np.ones(2)), T.Parameter(np.zeros(2))
    out = T.layer_norm(T.Tensor([1.0, -1.0]), gain, bias).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-4)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    with T.precision('f64'):
        x, gain, bias = param(rng, 4, 8), param(rng, 8), param(rng, 8)
        w = rng.normal(size=(4, 8))
        assert T.grad_check(lambda: T.reduce_sum(T.mul(T.layer_norm(x, gain, bias), w)), [x, gain, bias]) < 1e-4


def test_attention_single_key_returns_projected_value():
    rng = np.random.default_rng(3)
    with T.precision('f64'):
        attn = Attention(rng, 8, 2)
        q, kv = T.Tensor(rng.normal(size=(3, 8))), T.Tensor(rng.normal(size=(1, 8)))
        out = attn(q, kv).data
        value = attn.output(attn.value(kv)).data
    assert np.allclose(out, np.repeat(value, 3, axis=0))


def test_attention_duplicated_keys_are_invariant():
    rng = np.random.default_rng(4)
    with T.precision('f64'):
        attn = Attention(rng, 8, 2)
        q, kv = T.Tensor(rng.normal(size=(1, 5, 8))), T.Tensor(rng.normal(size=(1, 6, 8)))
        once = attn(q, kv).data
        twice = attn(q, T.concat([kv, kv], axis=1)).data
    assert np.allclose(once, twice, atol=1e-10)


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigurationError):
        Attention(np.random.default_rng(0), 10, 3)


def test_attention_gradcheck():
    rng = np.random.default_rng(5)
    with T.precision('f64'):
        attn = Attention(rng, 8, 2)
        q, kv = param(rng, 2, 3, 8), param(rng, 2, 4, 8)
        params = [q, kv] + attn.parameters()
        assert T.grad_check(lambda: T.reduce_sum(T.square(attn(q, kv))), params, max_coords=8) < 1e-4


def test_broadcast_prefix_and_suffix():
    rng = np.random.default_rng(6)
    with T.precision('f64'):
        x, row, per_sample = param(rng, 3, 4, 5), param(rng, 5), param(rng, 3)
        f = lambda: T.reduce_sum(T.square(T.mul(T.add(x, row), per_sample)))
        assert T.grad_check(f, [x, row, per_sample]) < 1e-4
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros(3 * 4 + 1)))


def test_unfold_upsample_embedding_gradcheck():
    rng = np.random.default_rng(7)
    with T.precision('f64'):
        x = param(rng, 1, 6, 6, 2)
        table = param(rng, 5, 3)
        ids = np.array([[0, 4, 4], [1, 2, 0]])
        assert T.grad_check(lambda: T.reduce_sum(T.square(T.unfold2d(x, 4, stride=2, padding=1))), [x]) < 1e-4
        assert T.grad_check(lambda: T.reduce_sum(T.square(T.upsample2x(x))), [x]) < 1e-4
        assert T.grad_check(lambda: T.reduce_sum(T.square(T.embedding(table, ids))), [table]) < 1e-4


def test_cross_entropy_and_where_gradcheck():
    rng = np.random.default_rng(8)
    with T.precision('f64'):
        logits, other = param(rng, 4, 3), param(rng, 4, 3)
        labels = np.array([0, 2, 1, 2])
        keep = np.array([True, False, True, False])
        assert T.grad_check(lambda: T.cross_entropy(logits, labels), [logits]) < 1e-4
        assert T.grad_check(lambda: T.reduce_sum(T.square(T.where(keep, logits, other))), [logits, other]) < 1e-4


def test_query_block_gradcheck():
    rng = np.random.default_rng(9)
    with T.precision('f64'):
        block = QueryBlock(rng, 8, 2)
        queries, context = param(rng, 1, 3, 8), param(rng, 1, 5, 8)
        f = lambda: T.reduce_sum(T.square(block(queries, context)))
        assert T.grad_check(f, [queries, context] + block.parameters(), max_coords=6) < 1e-3


def test_grad_check_sees_small_wrong_gradients():
    def dropped_gradient(x, scale):
        return T._result(scale * x.data, (x,), lambda g: (np.zeros_like(x.data),), 'scaled')

    with T.precision('f64'):
        big, small = T.Parameter(np.array([10.0])), T.Parameter(np.array([0.3]))
        for scale in (1e-3, 1e-6):
            f = lambda: T.add(T.reduce_sum(T.square(big)), T.reduce_sum(dropped_gradient(small, scale)))
            assert T.grad_check(f, [big, small]) > 0.99
        assert T.grad_check(lambda: T.reduce_sum(T.square(big)), [big]) < 1e-8


def test_grad_check_rejects_32_bit():
    p = T.Parameter(np.ones(3))
    with pytest.raises(ConfigurationError):
        T.grad_check(lambda: T.reduce_sum(p), [p])


def test_backward_is_reproducible():
    def run():
        rng = np.random.default_rng(10)
        with T.precision('f64'):
            layer = Linear(rng, 6, 4)
            x = T.Tensor(rng.normal(size=(5, 6)))
            loss = T.reduce_sum(T.square(T.gelu(layer(x))))
            loss.backward()
        return layer.weight.grad.copy()
    assert np.array_equal(run(), run())


def test_tape_orders_inputs_first():
    a = T.Parameter(np.ones(2))
    b = T.mul(a, 2.0)
    c = T.reduce_sum(T.add(b, a))
    tape = T.Tape.record(c)
    position = dict((id(node), i) for i, node in enumerate(tape.records))
    assert position[id(a)] < position[id(b)] < position[id(c)]


def test_no_grad_records_nothing():
    a = T.Parameter(np.ones(2))
    with T.no_grad():
        b = T.mul(a, 3.0)
    assert not b.requires_grad


def test_adam_and_cosine_schedule():
    assert cosine_lr(1.0, 0, 11) == 1.0
    assert abs(cosine_lr(1.0, 10, 11)) < 1e-12
    p = T.Parameter(np.array([1.0, -1.0]))
    opt = Adam([('p', p)], lr=0.1)
    for _ in range(50):
        opt.zero_grad()
        T.reduce_sum(T.square(p)).backward()
        opt.step()
    assert np.all(np.abs(p.data) < 0.5)

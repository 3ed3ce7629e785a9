# test/test_numerics.py
import torch
import torch.nn.functional as F

from src.flowtsvad import numerics
from src.flowtsvad.errors import ShapeError


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def _randn(*shape, seed=0):
    return torch.randn(shape, generator=_gen(seed), dtype=torch.float64)


def test_conv1d_table_row_length():
    x = _randn(1, 200)
    w = _randn(16, 1, 5, seed=1)
    y = numerics.conv1d(x, w, stride=2, padding=2)
    assert y.shape == (16, 100)
    assert numerics.conv_output_length(200, 5, 2, 2) == 100


def test_conv1d_identity_kernel():
    x = _randn(3, 11)
    w = torch.eye(3, dtype=torch.float64).unsqueeze(-1)
    assert torch.equal(numerics.conv1d(x, w), x)


def test_conv1d_sliding_window_oracle():
    x = _randn(2, 7)
    w = _randn(3, 2, 3, seed=1)
    for stride, padding in [(1, 0), (2, 1), (3, 2)]:
        y = numerics.conv1d(x, w, stride=stride, padding=padding)
        xp = F.pad(x, (padding, padding))
        t_out = numerics.conv_output_length(7, 3, stride, padding)
        assert y.shape == (3, t_out)
        for o in range(3):
            for t in range(t_out):
                window = xp[:, t * stride:t * stride + 3]
                assert abs(y[o, t].item() - (window * w[o]).sum().item()) < 1e-12


def test_conv1d_channel_mismatch_reports_dims():
    try:
        numerics.conv1d(_randn(4, 10), _randn(3, 2, 3))
    except ShapeError as e:
        assert "4 channels" in str(e)
    else:
        raise AssertionError("channel mismatch accepted")


def test_conv1d_kernel_longer_than_input():
    try:
        numerics.conv1d(_randn(1, 2), _randn(1, 1, 5))
    except ShapeError:
        pass
    else:
        raise AssertionError("kernel longer than padded input accepted")


def test_conv_transpose_lengths():
    x = _randn(16, 100)
    w = _randn(16, 16, 5, seed=1)
    y = numerics.conv_transpose1d(x, w, stride=2, padding=2, output_padding=1)
    assert y.shape == (16, 200)
    assert numerics.conv_transpose_output_length(100, 5, 2, 2, 1) == 200
    x = _randn(4, 9)
    assert numerics.conv_transpose1d(x, _randn(4, 2, 1)).shape == (2, 9)


def test_conv_transpose_is_adjoint_of_conv():
    c_in, c_out, length, kernel, stride, padding = 2, 3, 7, 3, 2, 1
    w = _randn(c_out, c_in, kernel, seed=3)
    t_out = numerics.conv_output_length(length, kernel, stride, padding)
    # materialize conv1d as a (c_out·t_out) × (c_in·length) matrix
    columns = []
    for i in range(c_in * length):
        basis = torch.zeros(c_in * length, dtype=torch.float64)
        basis[i] = 1.0
        columns.append(numerics.conv1d(basis.reshape(c_in, length), w, stride=stride, padding=padding).reshape(-1))
    matrix = torch.stack(columns, dim=1)
    y = _randn(c_out, t_out, seed=4)
    back = numerics.conv_transpose1d(y, w, stride=stride, padding=padding, output_padding=0)
    assert back.shape == (c_in, length)
    torch.testing.assert_close(back.reshape(-1), matrix.T @ y.reshape(-1), rtol=0, atol=1e-12)


def test_conv_transpose_rejects_output_padding():
    for bad in (2, 3, -1):
        try:
            numerics.conv_transpose1d(_randn(1, 5), _randn(1, 1, 3), stride=2, output_padding=bad)
        except ShapeError:
            continue
        raise AssertionError(f"output_padding={bad} accepted")


def test_attention_single_key():
    q = _randn(5, 4)
    k = _randn(1, 4, seed=1)
    v = _randn(1, 3, seed=2)
    out = numerics.attention(q, k, v)
    torch.testing.assert_close(out, v.expand(5, 3))


def test_attention_identical_keys_average():
    q = _randn(2, 4)
    k = _randn(1, 4, seed=1).expand(6, 4)
    v = _randn(6, 3, seed=2)
    out = numerics.attention(q, k, v)
    torch.testing.assert_close(out, v.mean(dim=0).expand(2, 3))


def test_attention_oracle_and_row_sums():
    q, k, v = _randn(3, 4), _randn(5, 4, seed=1), _randn(5, 2, seed=2)
    out, weights = numerics.attention(q, k, v, return_weights=True)
    scores = q @ k.T / 2.0
    expected = torch.exp(scores) / torch.exp(scores).sum(dim=1, keepdim=True)
    torch.testing.assert_close(weights, expected)
    torch.testing.assert_close(out, expected @ v)
    assert (weights >= 0).all()
    assert (weights.sum(dim=-1) - 1.0).abs().max() < 1e-6


def test_adain_cases():
    x = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
    out = numerics.adain(x, torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    torch.testing.assert_close(out, x, rtol=0, atol=1e-5)

    shift = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
    out = numerics.adain(_randn(4, 3), torch.zeros(3, dtype=torch.float64), shift)
    torch.testing.assert_close(out, shift.expand(4, 3))

    x = _randn(4, 3, seed=5)
    scale, shift = _randn(3, seed=6), _randn(3, seed=7)
    mean = x.sum(dim=0) / 4
    var = ((x - mean) ** 2).sum(dim=0) / 4
    expected = scale * (x - mean) / torch.sqrt(var + 1e-5) + shift
    torch.testing.assert_close(numerics.adain(x, scale, shift), expected)


def test_adain_zero_variance_is_finite():
    x = torch.ones(3, 2, dtype=torch.float64)
    out = numerics.adain(x, torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    assert torch.isfinite(out).all() and out.abs().max() == 0


def test_squared_error_sum_reduction():
    p = torch.zeros(2, 3, 4, dtype=torch.float64)
    t = torch.ones(2, 3, 4, dtype=torch.float64)
    assert numerics.squared_error_sum(p, t).item() == 4.0


def test_grad_check_affine_and_constant():
    a = _randn(3, 4)
    b = _randn(3, seed=1)
    err = numerics.grad_check(lambda x: a @ x + b, [_randn(4, seed=2)])
    assert err <= 1e-8, err
    err = numerics.grad_check(lambda x: torch.ones(2, dtype=torch.float64), [_randn(4, seed=3)])
    assert err == 0.0


def test_grad_check_rejects_single_precision():
    try:
        numerics.grad_check(lambda x: x * 2, [torch.ones(3)])
    except ShapeError:
        pass
    else:
        raise AssertionError("float32 accepted")


def test_grad_check_every_op_randomized():
    ops = [
        ("conv1d", lambda x, w: numerics.conv1d(x, w, stride=2, padding=1), [(2, 9), (3, 2, 3)]),
        ("conv_transpose1d", lambda x, w: numerics.conv_transpose1d(x, w, stride=2, padding=1, output_padding=1),
         [(2, 5), (2, 3, 3)]),
        ("attention", numerics.attention, [(3, 4), (5, 4), (5, 2)]),
        ("adain", numerics.adain, [(4, 3), (3,), (3,)]),
        ("layer_norm", lambda x, g, b: numerics.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
        ("silu", F.silu, [(6,)]),
        ("sigmoid", torch.sigmoid, [(6,)]),
        ("softmax", lambda x: torch.softmax(x, dim=-1), [(2, 5)]),
        ("matmul", torch.matmul, [(3, 4), (4, 2)]),
        ("mul_add", lambda x, y: x * y + x, [(4,), (4,)]),
        ("flatten", lambda x: x.flatten().unflatten(0, (4, 3)) * 2.0, [(3, 4)]),
        ("squared_error_sum", numerics.squared_error_sum, [(3, 4), (3, 4)]),
    ]
    for trial in range(100):
        name, fn, shapes = ops[trial % len(ops)]
        inputs = [_randn(*s, seed=1000 * trial + i) for i, s in enumerate(shapes)]
        err = numerics.grad_check(fn, inputs, epsilon=1e-5, seed=trial, floor=1e-6)
        assert err <= 1e-4, (name, trial, err)


def test_ops_deterministic():
    x, w = _randn(2, 9), _randn(3, 2, 3, seed=1)
    assert torch.equal(numerics.conv1d(x, w), numerics.conv1d(x, w))
    q = _randn(3, 4)
    assert torch.equal(numerics.attention(q, q, q), numerics.attention(q, q, q))


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"[ok] {name}")

"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from uhkd import tensor as T


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            orig = a[i]
            a[i] = orig + eps
            fp = f(*arrays)
            a[i] = orig - eps
            fm = f(*arrays)
            a[i] = orig
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def gradcheck(build, arrays, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare autodiff against central differences.

    ``build(*tensors)`` returns a Tensor; the scalar under test is
    ``sum(build(...) * w)`` for a fixed random ``w`` so every output element
    contributes. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.no_grad():
        shape = build(*[T.Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(1234).normal(size=shape)

    def scalar(*arrs):
        with T.no_grad():
            return float((build(*[T.Tensor(a) for a in arrs]).data * w).sum())

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    T.backward(T.reduce("sum", out * T.Tensor(w)))
    num = numeric_grad(scalar, arrays, eps)
    worst = 0.0
    for leaf, g in zip(leaves, num):
        ana = leaf.grad.data if leaf.grad is not None else np.zeros_like(g)
        err = np.abs(ana - g)
        bad = err > atol + rtol * np.abs(g)
        assert not bad.any(), f"max abs err {err.max():.3e} (numeric {g[bad][:3]}, analytic {ana[bad][:3]})"
        denom = np.maximum(np.abs(g), atol / rtol)
        worst = max(worst, float((err / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# gradient cases: name -> (builder, list of input-array factories per shape)
#
# Each factory takes an rng and returns the input arrays. Three shapes per op.


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _nz(rng, shape):
    # keep clear of the kinks of abs/relu and of max ties
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, 0.1 * np.sign(x) + x, x)


def _shapes3(fn):
    return [lambda r, s=s: fn(r, s) for s in ((3,), (2, 4), (2, 3, 4))]


def _spectral_cases():
    from uhkd import spectral
    from uhkd.features import Layout

    def fft_re_im(layout):
        def b(x):
            s = spectral.fft_forward(x, layout)
            return T.concat([s.real, s.imag], axis=0)
        return b

    def mag(layout):
        return lambda x: spectral.magnitude(spectral.center_shift(spectral.fft_forward(x, layout)))

    def masked(layout):
        def b(x):
            m = spectral.magnitude(spectral.center_shift(spectral.fft_forward(x, layout)))
            ext = tuple(m.shape[a] for a in layout.spectral_axes)
            return spectral.apply_mask(m, spectral.build_mask(ext), layout)
        return b

    seq = [lambda r: [r.normal(size=(2, 4, 3))], lambda r: [r.normal(size=(1, 8, 2))],
           lambda r: [r.normal(size=(2, 5, 2))]]
    grid = [lambda r: [r.normal(size=(1, 2, 4, 4))], lambda r: [r.normal(size=(2, 1, 2, 4))],
            lambda r: [r.normal(size=(1, 2, 3, 2))]]
    return {
        "fft_seq": (fft_re_im(Layout.SEQ), seq),
        "fft_grid": (fft_re_im(Layout.GRID), grid),
        "magnitude_seq": (mag(Layout.SEQ), seq),
        "magnitude_grid": (mag(Layout.GRID), grid),
        "mask_grid": (masked(Layout.GRID), grid),
        "avgpool_seq": (lambda x: spectral.avg_downsample(x, Layout.SEQ, 2),
                        [lambda r: [r.normal(size=(2, 4, 3))], lambda r: [r.normal(size=(1, 8, 1))],
                         lambda r: [r.normal(size=(3, 2, 2))]]),
        "avgpool_grid": (lambda x: spectral.avg_downsample(x, Layout.GRID, 2),
                         [lambda r: [r.normal(size=(1, 2, 4, 4))], lambda r: [r.normal(size=(2, 1, 2, 6))],
                          lambda r: [r.normal(size=(1, 3, 4, 2))]]),
    }


def grad_cases():
    def unary(fn, gen=_nz):
        return (fn, [lambda r, s=s: [gen(r, s)] for s in ((3,), (2, 4), (2, 3, 4))])

    def binary(fn, gen_b=_nz):
        return (fn, [lambda r, s=s: [_nz(r, s), gen_b(r, s)] for s in ((3,), (2, 4), (2, 3, 4))])

    cases = {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "mul": binary(lambda a, b: a * b),
        "div": binary(lambda a, b: a / b, _pos),
        "add_broadcast": (lambda a, b: a + b, [lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))],
                                               lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))],
                                               lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))]]),
        "mul_scalar": unary(lambda a: a * 2.5 - 1.0),
        "neg": unary(lambda a: -a),
        "exp": unary(lambda a: T.elementwise("exp", a)),
        "log": unary(lambda a: T.elementwise("log", a), _pos),
        "sqrt": unary(lambda a: T.elementwise("sqrt", a), _pos),
        "square": unary(lambda a: T.elementwise("square", a)),
        "abs": unary(lambda a: T.elementwise("abs", a)),
        "sum_all": unary(lambda a: T.reduce("sum", a)),
        "mean_last": unary(lambda a: T.reduce("mean", a, -1)),
        "max_first": unary(lambda a: T.reduce("max", a, 0)),
        "matmul": (T.matmul, [lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))],
                              lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))],
                              lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]]),
        "matmul_left2d": (T.matmul, [lambda r: [r.normal(size=(3, 4)), r.normal(size=(2, 4, 2))],
                                     lambda r: [r.normal(size=(2, 2)), r.normal(size=(3, 2, 3))],
                                     lambda r: [r.normal(size=(1, 3)), r.normal(size=(2, 3, 1))]]),
        "reshape": (lambda a: T.reshape(a, (a.size,)), _shapes3(lambda r, s: [r.normal(size=s)])),
        "permute": (lambda a: T.permute(a, tuple(reversed(range(a.ndim)))), _shapes3(lambda r, s: [r.normal(size=s)])),
        "transpose": (lambda a: T.transpose(a, 0, -1), _shapes3(lambda r, s: [r.normal(size=s)])),
        "grid_to_seq": (T.grid_to_seq, [lambda r: [r.normal(size=(1, 2, 2, 3))], lambda r: [r.normal(size=(2, 3, 2, 2))],
                                        lambda r: [r.normal(size=(1, 1, 4, 1))]]),
        "seq_to_grid": (lambda a: T.seq_to_grid(a, 2, a.shape[1] // 2),
                        [lambda r: [r.normal(size=(1, 4, 3))], lambda r: [r.normal(size=(2, 6, 2))],
                         lambda r: [r.normal(size=(1, 2, 1))]]),
        "getitem": (lambda a: a[..., 1:], _shapes3(lambda r, s: [r.normal(size=s)])),
        "pad": (lambda a: T.pad(a, [(1, 2)] + [(0, 1)] * (a.ndim - 1)), _shapes3(lambda r, s: [r.normal(size=s)])),
        "roll": (lambda a: T.roll(a, (1,), (-1,)), _shapes3(lambda r, s: [r.normal(size=s)])),
        "concat": (lambda a, b: T.concat([a, b], axis=0), binary(lambda a, b: None)[1]),
        "relu": unary(T.relu),
        "gelu": unary(T.gelu),
        "tanh": unary(T.tanh),
        "softmax": unary(lambda a: T.softmax(a, -1)),
        "log_softmax": unary(lambda a: T.log_softmax(a, -1)),
        "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b),
                       [lambda r: [r.normal(size=(2, 5)), r.normal(size=5), r.normal(size=5)],
                        lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=4), r.normal(size=4)],
                        lambda r: [r.normal(size=(1, 8)), r.normal(size=8), r.normal(size=8)]]),
        "conv2d_s1": (lambda x, w, b: T.conv2d(x, w, b, 1, 1),
                      [lambda r: [r.normal(size=(1, 2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
                       lambda r: [r.normal(size=(2, 1, 3, 5)), r.normal(size=(2, 1, 3, 3)), r.normal(size=2)],
                       lambda r: [r.normal(size=(1, 3, 2, 2)), r.normal(size=(1, 3, 1, 1)), r.normal(size=1)]]),
        "conv2d_s2": (lambda x, w, b: T.conv2d(x, w, b, 2, 1),
                      [lambda r: [r.normal(size=(1, 2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
                       lambda r: [r.normal(size=(2, 1, 6, 6)), r.normal(size=(2, 1, 3, 3)), r.normal(size=2)],
                       lambda r: [r.normal(size=(1, 2, 5, 3)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)]]),
    }
    cases.update(_spectral_cases())
    return cases

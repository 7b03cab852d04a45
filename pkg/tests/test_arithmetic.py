import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ardode import tensor as T
from ardode.arithmetic import (Architecture, ArchitectureError, NauLayer, NmuLayer, Polynomial,
                               flatten_params, model_from_weights, nau_forward, nmu_forward,
                               render_equation, render_expressions, to_polynomials,
                               unflatten_params)
from conftest import central_fd, rel_error

COMPOSITE = [NmuLayer(T.Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))),
             NauLayer(T.Tensor(np.array([[2.0, 1.0]])))]


def test_nau_is_matrix_vector_product(rng):
    W, x = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(nau_forward(W, x).data, x @ W.T, rtol=1e-13)


def test_nmu_selects_products():
    x = np.array([3.0, -2.0, 5.0])
    M = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0], [1, 1, 1]], dtype=float)
    np.testing.assert_array_equal(nmu_forward(M, x).data, [3.0, -6.0, 1.0, -30.0])


def test_nmu_clamps_gates():
    x = np.array([2.0, 4.0])
    # values outside [0, 1] behave like the nearest bound
    np.testing.assert_array_equal(nmu_forward(np.array([[1.7, -0.4]]), x).data, [2.0])
    # a half gate is the affine blend 0.5*x + 0.5
    assert nmu_forward(np.array([[0.5, 0.0]]), x).data[0] == pytest.approx(1.5)


def test_composite_example_exact(rng):
    x = rng.normal(scale=10, size=(1000, 2))
    out = COMPOSITE[1](COMPOSITE[0](x)).data[:, 0]
    np.testing.assert_array_equal(out, 2 * x[:, 0] + x[:, 0] * x[:, 1])
    np.testing.assert_array_equal(out, to_polynomials(COMPOSITE, 2)[0](x))


def test_composite_rendering():
    assert render_expressions(COMPOSITE, 2, style="latex") == ["2x_1 + x_1x_2"]
    assert render_expressions(COMPOSITE, 2) == ["2·x1 + x1·x2"]


def test_render_equation_prunes_small_weights():
    m = model_from_weights("nau:2x2", [np.array([[0.001, 1.0], [-2.25, 0.01]])])
    assert render_equation(m) == "ds1/dt = s2\nds2/dt = -2.25·s1"
    assert render_equation(m, threshold=0.0).count("s1") == 3


def test_polynomial_algebra():
    x, y = Polynomial.var(2, 0), Polynomial.var(2, 1)
    p = (x + Polynomial.const(2, 1.0)) * (y.scale(3.0) + x)
    assert p.coef(1, 1) == 3.0 and p.coef(2, 0) == 1.0 and p.coef(0, 1) == 3.0
    assert p.coef(1, 0) == 1.0 and p.coef(0, 0) == 0.0
    pts = np.array([[2.0, -1.0], [0.5, 4.0]])
    np.testing.assert_allclose(p(pts), (pts[:, 0] + 1) * (3 * pts[:, 1] + pts[:, 0]))


def brute_force(layers, x):
    """Evaluate a layer stack by enumerating the NMU gate subsets directly."""
    v = np.asarray(x, float)
    for kind, w in layers:
        if kind == "nau":
            v = np.array([sum(w[i, j] * v[j] for j in range(len(v))) for i in range(w.shape[0])])
        else:
            m = np.clip(w, 0, 1)
            out = []
            for row in m:
                tot = 0.0
                for subset in itertools.product([0, 1], repeat=len(v)):
                    term = 1.0
                    for j, s in enumerate(subset):
                        term *= row[j] * v[j] if s else 1.0 - row[j]
                    tot += term
                out.append(tot)
            v = np.array(out)
    return v


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_polynomial_expansion_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    layers = [("nmu", r.uniform(-0.2, 1.2, (3, 2))), ("nau", r.normal(size=(2, 3)))]
    polys = to_polynomials(layers, 2)
    model = model_from_weights("nmu:3x2|nau:2x3", [w for _, w in layers])
    for x in r.normal(size=(5, 2)):
        ref = brute_force(layers, x)
        np.testing.assert_allclose([p(x) for p in polys], ref, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(model(x).data, ref, rtol=1e-10, atol=1e-10)


def test_architecture_parsing():
    a = Architecture.parse("nmu:3x2|nau:2x3")
    assert a.state_dim == 2 and a.param_count == 12
    assert str(a) == "nmu:3x2|nau:2x3"
    assert Architecture.parse("nau:3x3").param_count == 9
    for bad in ["nau:2x3", "nmu:3x2|nau:2x2", "foo:2x2", "nau:2"]:
        with pytest.raises(ArchitectureError):
            Architecture.parse(bad)


def test_flatten_roundtrip_and_batching(rng):
    arch = Architecture.parse("nmu:3x2|nau:2x3")
    theta = rng.normal(size=(4, arch.param_count))
    model = unflatten_params(arch, theta)
    np.testing.assert_array_equal(flatten_params(model).data, theta)
    x = rng.normal(size=(4, 2))
    batched = model(x).data
    for i in range(4):
        single = unflatten_params(arch, theta[i])(x[i]).data
        np.testing.assert_allclose(batched[i], single, rtol=1e-13)


def test_layer_gradients(rng):
    M = rng.uniform(0.1, 0.9, (3, 2))
    W = rng.normal(size=(2, 3))
    x = rng.normal(size=2)

    def f(m, w, xx):
        return T.sum_(T.square(nau_forward(w, nmu_forward(m, xx))))

    with T.Tape() as tape:
        vs = [tape.watch(a) for a in (M, W, x)]
        grads = tape.gradient(f(*vs), vs)
    arrays = [M, W, x]
    for i, g in enumerate(grads):
        def scalar(v, i=i):
            args = [T.Tensor(a) for a in arrays]
            args[i] = T.Tensor(v)
            return float(f(*args).data)
        assert rel_error(g, central_fd(scalar, arrays[i])) < 1e-5


def test_layer_shape_mismatch():
    with pytest.raises(T.ShapeError):
        nau_forward(np.ones((2, 3)), np.ones(2))
    with pytest.raises(T.ShapeError):
        nmu_forward(np.ones((2, 3)), np.ones(4))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crgat import autodiff as ad
from crgat.autodiff import Tape, Tensor, finite_diff_check
from crgat.errors import ContractError

from conftest import crandn


def test_modulus_squared_gradient_is_twice_the_value(rng):
    # d|z|^2/dRe + i d|z|^2/dIm = 2z
    z = crandn(rng, 5)
    tape = Tape()
    x = tape.leaf(z, "z")
    g = tape.backward(ad.sum(ad.modulus_sq(x)))
    np.testing.assert_allclose(g[x], 2 * z, rtol=1e-14)


def test_real_linear_functional_gradient(rng):
    # L = Re(c^H z) has gradient c
    z, c = crandn(rng, 4), crandn(rng, 4)
    tape = Tape()
    x = tape.leaf(z)
    loss = ad.sum(ad.real(ad.conj(Tensor(c)) * x))
    np.testing.assert_allclose(tape.backward(loss)[x], c, rtol=1e-14)


def test_broadcast_gradients_are_reduced_to_operand_shape(rng):
    a, b = rng.standard_normal((3, 1)), rng.standard_normal((1, 4))
    tape = Tape()
    ta, tb = tape.leaf(a), tape.leaf(b)
    g = tape.backward(ad.sum(ta * tb))
    assert g[ta].shape == (3, 1) and g[tb].shape == (1, 4)
    np.testing.assert_allclose(g[ta][:, 0], np.full(3, b.sum()))
    np.testing.assert_allclose(g[tb][0], np.full(4, a.sum()))


def test_forward_values_match_numpy(rng):
    a, b = crandn(rng, 3, 4), crandn(rng, 4, 2)
    np.testing.assert_allclose(ad.c_matmul(Tensor(a), Tensor(b)).data, a @ b)
    np.testing.assert_allclose(ad.hermitian(Tensor(a)).data, a.conj().T)
    np.testing.assert_allclose(ad.frobenius_norm(Tensor(a)).data, np.linalg.norm(a))
    np.testing.assert_allclose(ad.log2(Tensor(np.array([8.0]))).data, [3.0])


def test_leaky_relu_acts_on_real_and_imaginary_parts_separately():
    z = np.array([1 - 2j, -3 + 4j])
    out = ad.leaky_relu_c(Tensor(z), 0.1).data
    np.testing.assert_allclose(out, [1 - 0.2j, -0.3 + 4j])


@pytest.mark.parametrize("shape_a,shape_b", [((2, 3, 4), (4, 5)), ((2, 1, 3, 4), (6, 4, 2)), ((3, 4), (2, 4, 3))])
def test_matmul_gradients_match_finite_differences(shape_a, shape_b, rng):
    params = {"a": crandn(rng, *shape_a), "b": crandn(rng, *shape_b)}

    def f(tape, p):
        return ad.sum(ad.modulus_sq(ad.c_matmul(p["a"], p["b"])))

    rep = finite_diff_check(f, params)
    assert rep.n_checked > 0 and rep.max_rel_error < 1e-6


def test_composite_graph_gradient(rng):
    params = {"x": crandn(rng, 3, 3), "s": np.array(0.7)}

    def f(tape, p):
        y = ad.cselu(p["x"] * p["s"])
        y = ad.leaky_relu_c(y @ ad.hermitian(p["x"]), 0.2)
        e = ad.exp(ad.modulus(y) * 0.1)
        return ad.sum(ad.log(e / ad.sum(e, axis=-1, keepdims=True)) + ad.sqrt(ad.modulus_sq(y) + 1.0))

    rep = finite_diff_check(f, params)
    assert rep.max_rel_error < 1e-6


def test_kink_crossings_are_skipped():
    # relu at exactly 0 flips under any perturbation
    rep = finite_diff_check(lambda tape, p: ad.sum(ad.relu(p["x"])), {"x": np.array([0.0, 1.0])})
    assert rep.n_skipped == 1 and rep.n_checked == 1


def test_gradients_accumulate_when_a_leaf_is_reused(rng):
    v = rng.standard_normal(3)
    tape = Tape()
    x = tape.leaf(v)
    g = tape.backward(ad.sum(x * x + x))
    np.testing.assert_allclose(g[x], 2 * v + 1)


def test_gradients_can_be_looked_up_by_name(rng):
    tape = Tape()
    x = tape.leaf(np.ones(2), name="weight")
    g = tape.backward(ad.sum(x * 3.0))
    np.testing.assert_allclose(g.by_name()["weight"], [3.0, 3.0])


def test_step_must_be_positive():
    with pytest.raises(ContractError):
        finite_diff_check(lambda t, p: ad.sum(p["x"]), {"x": np.ones(1)}, step=0)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 4), n=st.integers(1, 4), p=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_matmul_vjp_matches_explicit_formula(m, n, p, seed):
    # for L = Re sum(conj(G) * (A B)): grad_A = G B^H, grad_B = A^H G
    rng = np.random.default_rng(seed)
    a, b, g = crandn(rng, m, n), crandn(rng, n, p), crandn(rng, m, p)
    tape = Tape()
    ta, tb = tape.leaf(a), tape.leaf(b)
    loss = ad.sum(ad.real(ad.conj(Tensor(g)) * ad.c_matmul(ta, tb)))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[ta], g @ b.conj().T, atol=1e-12)
    np.testing.assert_allclose(grads[tb], a.conj().T @ g, atol=1e-12)

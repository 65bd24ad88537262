import numpy as np
import pytest

from lorafa.adapters import AdaptedLinear, Mode, init_adapter
from lorafa.equivalence import (
    compress_decompress,
    estimate_unbiasedness,
    rbar,
    subspace_check,
    verify_sgd_equivalence,
)
from lorafa.errors import DimensionError, ModeError
from lorafa.ops import numerical_rank, qr
from lorafa.rng import RngState, randn


# --- compress / decompress ----------------------------------------------------

def test_compress_basis_column():
    a = np.array([[1.0], [0.0]])
    dw = np.array([[2.0, 3.0], [0.0, 0.0]])
    t = compress_decompress(a, dw)
    assert np.array_equal(t.compressed, [[2.0, 3.0]])
    assert np.array_equal(t.decompressed, dw)


def test_compress_annihilates_orthogonal_complement():
    # with orthonormal A the projector A A^T kills anything off col(A)
    m = randn((6, 2), RngState(0))
    a, _ = qr(m)
    dw_perp = randn((6, 3), RngState(1))
    dw_perp -= a @ (a.T @ dw_perp)
    t = compress_decompress(a, dw_perp)
    assert np.max(np.abs(t.decompressed)) < 1e-12


def test_decompressed_rank_bounded_by_r():
    rng = RngState(2)
    for _ in range(5):
        a = randn((10, 3), rng)
        dw = randn((10, 7), rng)
        t = compress_decompress(a, dw)
        assert numerical_rank(t.decompressed) <= 3


def test_compress_shape_error():
    with pytest.raises(DimensionError):
        compress_decompress(np.ones((4, 2)), np.ones((5, 3)))


# --- SGD equivalence -------------------------------------------------------------

def worked_layer():
    return AdaptedLinear(
        w=np.eye(2),
        a=np.array([[1.0], [0.0]]),
        b=np.zeros((1, 2)),
        rank=1,
        alpha=1.0,
        mode=Mode.LORA_FA,
    )


def test_sgd_equivalence_worked_example():
    from lorafa import adapters
    from lorafa.optim import SGDConfig, sgd_step

    layer = worked_layer()
    x = np.array([[1.0, 0.0]])
    dy = np.array([[2.0, 3.0]])
    assert verify_sgd_equivalence(layer, x, dy, eta=0.1) < 1e-15
    # and the actual merged-weight delta is the hand value
    work = layer.clone()
    before = adapters.merge(work)
    _, kept = adapters.forward(work, x)
    _, grads = adapters.backward(work, kept, dy)
    sgd_step({"b": work.b}, grads, SGDConfig(eta=0.1))
    delta = adapters.merge(work) - before
    assert np.allclose(delta, [[-0.2, -0.3], [0.0, 0.0]], atol=1e-15)


def test_sgd_equivalence_eta_zero():
    layer = worked_layer()
    assert verify_sgd_equivalence(layer, np.array([[1.0, 0.0]]), np.array([[2.0, 3.0]]), 0.0) == 0.0


def test_sgd_equivalence_random_layers():
    rng = RngState(3)
    worst = 0.0
    for _ in range(20):
        layer = init_adapter(16, 8, 4, None, Mode.LORA_FA, rng)
        layer.b[:] = randn(layer.b.shape, rng)
        x = randn((2, 3, 16), rng)
        dy = randn((2, 3, 8), rng)
        worst = max(worst, verify_sgd_equivalence(layer, x, dy, eta=0.1))
    assert worst < 1e-10


def test_sgd_equivalence_rejects_other_modes():
    layer = init_adapter(4, 4, 2, None, Mode.LORA, RngState(0))
    with pytest.raises(ModeError):
        verify_sgd_equivalence(layer, np.ones((1, 4)), np.ones((1, 4)), 0.1)


def test_sgd_equivalence_leaves_layer_untouched():
    layer = init_adapter(6, 5, 2, None, Mode.LORA_FA, RngState(7))
    b_before = layer.b.tobytes()
    verify_sgd_equivalence(layer, randn((2, 6), RngState(8)), randn((2, 5), RngState(9)), 0.3)
    assert layer.b.tobytes() == b_before


# --- unbiasedness -----------------------------------------------------------------

def test_second_moment_identity_small():
    # d=2, r=1: E[a a^T] = I, so mean over many samples approaches 1*I
    err = estimate_unbiasedness(2, 1, 40_000, RngState(4))
    assert err < 0.05


def test_unbiasedness_reference_config():
    err = estimate_unbiasedness(8, 4, 100_000, RngState(5))
    assert err < 0.02


def test_unbiasedness_decays_with_samples():
    e_small = estimate_unbiasedness(8, 4, 2_000, RngState(6))
    e_large = estimate_unbiasedness(8, 4, 32_000, RngState(7))
    assert e_large < e_small / 2  # 16x samples should give ~4x reduction


# --- subspace ------------------------------------------------------------------------

def test_subspace_zero_delta():
    a = randn((8, 3), RngState(8))
    rep = subspace_check(a, np.zeros((8, 5)))
    assert rep.residual == 0.0
    assert rep.numerical_rank == 0


def test_subspace_residual_inside_column_space():
    rng = RngState(9)
    a = randn((12, 4), rng)
    delta = a @ randn((4, 6), rng)
    rep = subspace_check(a, delta)
    assert rep.residual < 1e-12
    assert rep.numerical_rank <= 4
    assert rep.q.shape == (12, 4)


def test_subspace_residual_outside_column_space():
    rng = RngState(10)
    a = randn((12, 2), rng)
    rep = subspace_check(a, randn((12, 6), rng))
    assert rep.residual > 0.5  # random matrix is mostly off a rank-2 subspace


def test_rbar_reconstructs_delta():
    rng = RngState(11)
    a = randn((10, 3), rng)
    b = randn((3, 4), rng)
    q, _ = qr(a)
    assert np.allclose(q @ rbar(a, b), a @ b, atol=1e-10)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bivrec import tensorcore as tc
from bivrec.crossvil import (
    assign_loss,
    contrastive_loss,
    init_cross_params,
    pool_interests,
    project_common,
)
from bivrec.diagnostics import toy_batch, toy_config, toy_features
from bivrec.gradcheck import grad_check
from bivrec.model import BivRecModel
from bivrec.rng import Rng
from bivrec.tensorcore import Tensor
from bivrec.trainer import model_losses


def test_equal_weights_average():
    v = Tensor(np.array([[[1.0, 2.0], [3.0, 6.0]]]))
    out = pool_interests(v, Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[2.0, 4.0]])


def test_peaked_weights_select_one_interest():
    v = Tensor(Rng(0).normal((1, 3, 4)))
    out = pool_interests(v, Tensor(np.array([0.0, 60.0, 0.0]))).data
    np.testing.assert_allclose(out[0], v.data[0, 1], atol=1e-20)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_identical_rows_pool_to_the_row(k, seed):
    rng = Rng(seed)
    row = rng.normal(5)
    v = Tensor(np.tile(row, (2, k, 1)))
    out = pool_interests(v, Tensor(rng.normal(k) * 3)).data
    np.testing.assert_allclose(out, np.tile(row, (2, 1)), atol=1e-12)


def zero_mlp(dim=3):
    params = init_cross_params(dim, dim, 2, 0.5, Rng(0))
    for name, p in params.items():
        if name.startswith("cross.mlp"):
            p.data[...] = 0.0
    return params


def test_zero_mlp_outputs_zero_and_normalization_raises():
    params = zero_mlp()
    h = Tensor(np.array([[1.0, -2.0, 0.5]]))
    assert not project_common(h, params, "id", normalize=False).data.any()
    with pytest.raises(ValueError):
        project_common(h, params, "id")


def test_identity_mlp_is_normalized_gelu():
    params = zero_mlp()
    params["cross.mlp.mm.w0"].data[...] = np.eye(3)
    params["cross.mlp.mm.w1"].data[...] = np.eye(3)
    h = np.array([[0.5, 1.0, 2.0]])
    gelu = 0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
    out = project_common(Tensor(h), params, "mm").data
    np.testing.assert_allclose(out, gelu / np.linalg.norm(gelu), rtol=1e-13)


def test_project_common_gradcheck():
    params = init_cross_params(4, 3, 2, 0.5, Rng(1))
    h = Tensor(Rng(2).normal((3, 4)), requires_grad=True)
    names = [n for n in params if n.startswith("cross.mlp.id")]
    sub = {n: params[n] for n in names} | {"h": h}
    rep = grad_check(lambda: tc.sum_(tc.mul(project_common(h, params, "id"), np.arange(9.0).reshape(3, 3))),
                     sub, tol=1e-6)
    assert rep.passed, rep.summary()


def test_single_user_contrastive_is_zero():
    h = Tensor(np.array([[0.6, 0.8]]))
    assert contrastive_loss(h, h, 0.0).data == 0.0


def test_two_orthonormal_users_closed_form():
    h = Tensor(np.eye(2))
    loss = float(contrastive_loss(h, h, math.log(1.0)).data)
    assert loss == pytest.approx(2 * math.log1p(math.exp(-1)), abs=1e-14)
    assert loss == pytest.approx(0.6265, abs=1e-4)


def test_contrastive_empty_batch_errors():
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), 0.0)


def unit_rows(rng, b, d):
    x = rng.normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.parametrize("seed", range(10))
def test_contrastive_is_permutation_invariant(seed):
    rng = Rng(seed)
    a, b = unit_rows(rng, 5, 4), unit_rows(rng.child("b"), 5, 4)
    perm = rng.permutation(5)
    base = float(contrastive_loss(Tensor(a), Tensor(b), -0.5).data)
    moved = float(contrastive_loss(Tensor(a[perm]), Tensor(b[perm]), -0.5).data)
    assert moved == pytest.approx(base, rel=1e-12)


def test_aligned_views_beat_shuffled_views():
    """Matched rows always score lower loss than a cyclic shift of the same rows."""
    wins = 0
    for seed in range(50):
        rng = Rng(seed)
        a = unit_rows(rng, 6, 5)
        perm = np.roll(np.arange(6), 1 + seed % 5)
        aligned = float(contrastive_loss(Tensor(a), Tensor(a), math.log(0.2)).data)
        shuffled = float(contrastive_loss(Tensor(a), Tensor(a[perm]), math.log(0.2)).data)
        wins += aligned < shuffled
    assert wins == 50


def test_identical_hard_matrices_k4():
    a = Tensor(np.array([[1, 0, 0, 1, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 0, 1.0]]))
    assert float(assign_loss(a, a).data) == -4.0


def test_disjoint_rows_score_zero():
    a = Tensor(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    b = Tensor(np.array([[0, 1.0, 0], [0, 0, 1.0]]))
    assert float(assign_loss(a, b).data) == 0.0


def test_zero_row_contributes_nothing():
    a = Tensor(np.array([[1.0, 1.0, 0], [0, 0, 0]]))
    b = Tensor(np.array([[1.0, 1.0, 0], [0, 1.0, 1.0]]))
    assert float(assign_loss(a, b).data) == -1.0


def test_assign_loss_shape_errors():
    with pytest.raises(ValueError):
        assign_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        assign_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 10_000))
def test_assign_loss_bounds(k, n, seed):
    rng = Rng(seed)
    a = (rng.random((3, k, n)) < 0.5).astype(float)
    b = (rng.random((3, k, n)) < 0.5).astype(float)
    val = float(assign_loss(Tensor(a), Tensor(b)).data)
    assert -k - 1e-12 <= val <= k + 1e-12
    assert float(assign_loss(Tensor(a), Tensor(2 * a)).data) == pytest.approx(-np.mean((a.sum(-1) > 0).sum(-1)))


def test_assign_loss_batch_permutation():
    rng = Rng(3)
    a, b = rng.random((4, 3, 5)), rng.random((4, 3, 5))
    perm = np.array([2, 0, 3, 1])
    x = float(assign_loss(Tensor(a), Tensor(b)).data)
    y = float(assign_loss(Tensor(a[perm]), Tensor(b[perm])).data)
    assert y == pytest.approx(x, rel=1e-13)


def test_cross_terms_gradcheck_through_both_towers():
    cfg = toy_config()
    feats = toy_features(0)
    model = BivRecModel(cfg, 6, feats.shape[1], Rng(0))
    batch = toy_batch(0)

    def loss():
        parts = model_losses(model, batch, feats, Rng(0).child("forward"))
        return tc.add(tc.mul(parts["l_con"], cfg.lambda1), tc.mul(parts["l_assign"], cfg.lambda2))

    rep = grad_check(loss, model.params, tol=1e-4)
    assert rep.passed, rep.summary()

import itertools

import numpy as np
import pytest

from phenoflow.cross_section import CODE, LAB, VariableCatalog
from phenoflow.evaluation import match_components
from phenoflow.ica import (RankError, component_loadings, fit_ica, load_model, phenotype_report,
                           project, reconstruct, save_model, symmetric_decorrelation, whiten)


def laplace_mixture(rng, k, n, m):
    S = rng.laplace(size=(k, m))
    A = rng.normal(size=(n, k))
    return A @ S + rng.normal(size=(n, 1)), S, A


def test_white_two_source_mixture_recovered():
    rng = np.random.default_rng(0)
    S = rng.laplace(size=(2, 5000))
    S = (S - S.mean(axis=1, keepdims=True)) / S.std(axis=1, keepdims=True)
    c, s = np.cos(0.6), np.sin(0.6)
    A_true = np.array([[c, -s], [s, c]])  # rotation keeps the mixture white
    X = A_true @ S
    _, out = fit_ica(X, 2, seed=3)
    best = 0.0
    for perm in itertools.permutations(range(2)):
        for signs in itertools.product((1, -1), repeat=2):
            cand = np.array(signs)[:, None] * out.S[list(perm)]
            corr = np.mean([np.corrcoef(cand[i], S[i])[0, 1] for i in range(2)])
            best = max(best, corr)
    assert best >= 0.99


def test_gaussian_data_may_fail_to_converge_without_raising():
    rng = np.random.default_rng(1)
    model, _ = fit_ica(rng.normal(size=(4, 400)), 4, seed=0, max_iter=5, tol=1e-12)
    assert model.converged is False
    assert model.n_iter == 5 and len(model.deltas) == 5


def test_rank_one():
    rng = np.random.default_rng(2)
    a = rng.normal(size=6)
    X = np.outer(a, rng.laplace(size=300))
    model, _ = fit_ica(X, 1, seed=0)
    col = model.mixing[:, 0]
    assert abs(col @ a) / (np.linalg.norm(col) * np.linalg.norm(a)) >= 0.999


def test_rank_errors():
    rng = np.random.default_rng(3)
    X = np.outer(rng.normal(size=5), rng.normal(size=50))
    with pytest.raises(RankError) as info:
        fit_ica(X, 2)
    assert info.value.achievable == 1
    with pytest.raises(RankError) as info:
        fit_ica(rng.normal(size=(3, 2)), 3)
    assert info.value.achievable == 2
    with pytest.raises(ValueError):
        fit_ica(np.array([[np.inf, 1.0], [1.0, 2.0]]), 1)


def test_whitening_and_orthonormality():
    rng = np.random.default_rng(4)
    X, _, _ = laplace_mixture(rng, 3, 7, 2000)
    model, _ = fit_ica(X, 3, seed=1)
    Xc = X - X.mean(axis=1, keepdims=True)
    cov = Xc @ Xc.T / X.shape[1]
    V = model.whitener
    assert np.max(np.abs(V @ cov @ V.T - np.eye(3))) <= 1e-6
    W = model.unmixing
    assert np.max(np.abs(W @ W.T - np.eye(3))) <= 1e-6
    W2 = symmetric_decorrelation(rng.normal(size=(5, 5)))
    assert np.max(np.abs(W2 @ W2.T - np.eye(5))) <= 1e-12


def test_training_expressions_are_unit_variance():
    rng = np.random.default_rng(5)
    X, _, _ = laplace_mixture(rng, 3, 6, 3000)
    _, out = fit_ica(X, 3, seed=0)
    np.testing.assert_allclose(out.S.var(axis=1), 1.0, atol=1e-3)


def test_projection_consistency():
    rng = np.random.default_rng(6)
    X, _, _ = laplace_mixture(rng, 3, 8, 500)
    model, S = fit_ica(X, 3, seed=2)
    assert project(model, X).S.tobytes() == S.S.tobytes()
    zero = project(model, np.repeat(model.mean[:, None], 4, axis=1)).S
    assert np.all(zero == 0.0)
    with pytest.raises(ValueError):
        project(model, X[:5])


def test_projection_matches_least_squares_oracle():
    rng = np.random.default_rng(7)
    X, _, _ = laplace_mixture(rng, 4, 12, 300)
    model, S = fit_ica(X, 4, seed=0)
    Xc = X - X.mean(axis=1, keepdims=True)
    S_ls = np.linalg.lstsq(model.mixing, Xc, rcond=None)[0]
    assert np.max(np.abs(S.S - S_ls)) <= 1e-8


def test_standardized_projector_is_left_inverse():
    rng = np.random.default_rng(8)
    X, _, _ = laplace_mixture(rng, 3, 9, 800)
    X[0] *= 100.0
    model, S = fit_ica(X, 3, seed=0, standardize=True)
    np.testing.assert_allclose(model.projector @ model.mixing, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(S.S.var(axis=1), 1.0, atol=1e-3)


def test_reconstruct_full_rank_round_trip():
    rng = np.random.default_rng(9)
    X, _, _ = laplace_mixture(rng, 5, 5, 400)
    model, S = fit_ica(X, 5, seed=0)
    assert np.max(np.abs(reconstruct(model, S) - X)) <= 1e-8
    np.testing.assert_allclose(reconstruct(model, np.zeros((5, 3))), np.repeat(model.mean[:, None], 3, 1))
    with pytest.raises(ValueError):
        reconstruct(model, np.zeros((4, 3)))


def test_reconstruct_residual_equals_pca_residual():
    rng = np.random.default_rng(10)
    X, _, _ = laplace_mixture(rng, 6, 10, 600)
    X = X + 0.3 * rng.normal(size=X.shape)
    model, S = fit_ica(X, 3, seed=0)
    Xc = X - X.mean(axis=1, keepdims=True)
    U = np.linalg.svd(Xc, full_matrices=False)[0][:, :3]
    pca_residual = Xc - U @ (U.T @ Xc)
    ica_residual = X - reconstruct(model, S)
    assert np.max(np.abs(ica_residual - pca_residual)) <= 1e-8


def test_deterministic_given_seed():
    rng = np.random.default_rng(11)
    X, _, _ = laplace_mixture(rng, 3, 6, 500)
    a, sa = fit_ica(X, 3, seed=5)
    b, sb = fit_ica(X, 3, seed=5)
    assert a.mixing.tobytes() == b.mixing.tobytes()
    assert a.unmixing.tobytes() == b.unmixing.tobytes()
    assert sa.S.tobytes() == sb.S.tobytes()


def test_row_permutation_equivariance():
    rng = np.random.default_rng(12)
    X, _, _ = laplace_mixture(rng, 3, 8, 2000)
    perm = rng.permutation(8)
    a, sa = fit_ica(X, 3, seed=4)
    b, sb = fit_ica(X[perm], 3, seed=4)
    rep = match_components(sa.S, sb.S)
    assert rep.mean_abs_corr == pytest.approx(1.0, abs=1e-9)
    for j, i, _, sign in rep.pairs:
        np.testing.assert_allclose(np.sign(sign) * b.mixing[:, i], a.mixing[perm, j], atol=1e-8)


@pytest.mark.parametrize("k", [2, 5, 8])
def test_recovers_laplace_sources(k):
    rng = np.random.default_rng(100 + k)
    X, S, _ = laplace_mixture(rng, k, 2 * k + 2, 5000)
    _, out = fit_ica(X, k, seed=0)
    assert match_components(S, out.S).mean_abs_corr >= 0.9


def test_whiten_reports_achievable_rank():
    rng = np.random.default_rng(13)
    B = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 100))
    Xc = B - B.mean(axis=1, keepdims=True)
    V, V_plus, lam = whiten(Xc, 2)
    assert V.shape == (2, 6) and V_plus.shape == (6, 2) and np.all(lam > 0)
    with pytest.raises(RankError, match="at most rank 2"):
        whiten(Xc, 3)


def small_catalog():
    return VariableCatalog(("c1", "c2", "AST", "ALT"), (CODE, CODE, LAB, LAB), {"AST": 30.0, "ALT": 20.0})


def test_report_orders_and_flips():
    cat = small_catalog()
    comp = component_loadings(np.array([-0.1, -0.1, 0.9, -0.1]), cat, q=20)
    assert comp.entries[0] == ("AST", LAB, 0.9)
    assert len(comp.entries) == 4  # q clamped to n
    flipped = component_loadings(-np.array([-0.1, -0.1, 0.9, -0.1]), cat, q=20)
    assert flipped.entries == comp.entries and flipped.flipped and not comp.flipped
    assert [e[0] for e in comp.codes] == ["c1", "c2"]
    assert [e[0] for e in comp.labs] == ["AST", "ALT"]


def test_report_matches_sort_oracle(rng):
    ids = tuple(f"v{i}" for i in range(30))
    cat = VariableCatalog(ids, (CODE,) * 30, {})
    col = rng.normal(size=30)
    comp = component_loadings(col, cat, q=12)
    if col[np.argmax(np.abs(col))] < 0:
        col = -col
    oracle = sorted(range(30), key=lambda i: -abs(col[i]))[:12]
    assert [e[0] for e in comp.entries] == [ids[i] for i in oracle]
    assert [e[2] for e in comp.entries] == [col[i] for i in oracle]


def test_phenotype_report_covers_components():
    rng = np.random.default_rng(14)
    X, _, _ = laplace_mixture(rng, 2, 4, 500)
    model, _ = fit_ica(X, 2)
    rep = phenotype_report(model, small_catalog(), q=3)
    assert len(rep) == 2 and all(len(c.entries) == 3 for c in rep.components)
    assert "component 0" in rep.to_text()
    with pytest.raises(ValueError):
        phenotype_report(model, VariableCatalog(("a",), (CODE,), {}))


def test_model_file_round_trip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(15)
    X, _, _ = laplace_mixture(rng, 3, 6, 400)
    model, _ = fit_ica(X, 3, seed=9, standardize=True)
    save_model(tmp_path / "a.zip", model)
    save_model(tmp_path / "b.zip", model)
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    back = load_model(tmp_path / "a.zip")
    for name in ("mean", "whitener", "dewhitener", "unmixing", "mixing", "scale"):
        assert getattr(back, name).tobytes() == getattr(model, name).tobytes()
    assert (back.seed, back.n_iter, back.converged, back.standardize) == \
        (9, model.n_iter, model.converged, True)
    assert project(back, X).S.tobytes() == project(model, X).S.tobytes()

"""Head training: gradient oracles, strategy equivalences, herding, Fisher."""

import itertools

import numpy as np
import pytest

from owlkit import cil, store
from owlkit.errors import ArgumentError, DataError, ShapeError


def fd_gradient(theta, fn, step=1e-6):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += step
        tm[i] -= step
        grad[i] = (fn(tp) - fn(tm)) / (2 * step)
    return grad


def random_instance(rs, head_kind):
    c = rs.randint(2, 6)
    d = rs.randint(2, 9)
    n = rs.randint(4, 33)
    x = rs.randn(n, d)
    y = rs.randint(0, c, n)
    theta = rs.randn(c * d + c) * 0.7
    return c, d, n, x, y, theta


def _eset(x, labels=None):
    return store.EmbeddingSet(np.asarray(x, dtype=np.float32), labels)


# ---------------------------------------------------------------------------
# Gradient correctness (finite-difference oracle)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("head_kind", ["linear", "cosine"])
@pytest.mark.parametrize("terms", ["ce", "ce_kd", "ce_ewc"])
def test_gradients_match_finite_differences(head_kind, terms):
    seed = sum(map(ord, head_kind + terms))  # deterministic across processes
    rs = np.random.RandomState(seed)
    for _ in range(20):
        c, d, n, x, y, theta = random_instance(rs, head_kind)
        kwargs = dict(head_kind=head_kind, cosine_scale=16.0, c=c, d=d)
        if terms == "ce_kd":
            old = cil.IncrementalClassifier(
                rs.randn(c - 1, d), rs.randn(c - 1), rs.randn(c - 1, d),
                head_kind, 16.0,
            )
            kwargs.update(
                old_logits=old.logits(x), lambda_lwf=0.8, kd_temperature=2.0
            )
        elif terms == "ce_ewc":
            kwargs.update(
                ewc=cil.EwcState(np.abs(rs.randn(theta.size)), rs.randn(theta.size)),
                lambda_ewc=7.0,
            )
        _, grad = cil.loss_and_grad(theta, x, y, **kwargs)
        num = fd_gradient(theta, lambda t: cil.loss_and_grad(t, x, y, **kwargs)[0])
        # vector-level relative error: per-coordinate FD roundoff on
        # near-zero entries would otherwise dominate the comparison
        rel = np.linalg.norm(grad - num) / max(np.linalg.norm(num), 1e-12)
        assert rel <= 1e-5


def test_ewc_penalty_closed_forms():
    theta = np.zeros(4)  # c=2, d=1 -> 2 weights + 2 biases
    theta_star = np.zeros(4)
    x = np.random.RandomState(0).randn(3, 1)
    y = np.array([0, 1, 0])
    # theta == theta* -> penalty contributes nothing
    base_kwargs = dict(head_kind="linear", cosine_scale=16.0, c=2, d=1)
    l_plain, _ = cil.loss_and_grad(theta, x, y, **base_kwargs)
    l_ewc, _ = cil.loss_and_grad(
        theta, x, y,
        ewc=cil.EwcState(np.ones(4), theta_star), lambda_ewc=100.0, **base_kwargs,
    )
    assert l_ewc == l_plain
    # unit fisher, lambda 2, single unit offset -> penalty exactly 1.0
    theta2 = theta.copy()
    theta2[3] += 1.0
    l2_plain, _ = cil.loss_and_grad(theta2, x, y, **base_kwargs)
    l2, _ = cil.loss_and_grad(
        theta2, x, y,
        ewc=cil.EwcState(np.ones(4), theta_star), lambda_ewc=2.0, **base_kwargs,
    )
    assert l2 - l2_plain == pytest.approx(1.0, abs=1e-12)


def test_kd_zero_when_new_head_equals_old_on_old_classes():
    rs = np.random.RandomState(1)
    c, d = 3, 4
    w = rs.randn(c, d)
    b = rs.randn(c)
    x = rs.randn(10, d)
    y = rs.randint(0, c, 10)
    old = cil.IncrementalClassifier(w, b, w, "linear", 16.0)
    theta = cil.flatten_params(w, b)
    kwargs = dict(head_kind="linear", cosine_scale=16.0, c=c, d=d)
    l_kd, _ = cil.loss_and_grad(
        theta, x, y, old_logits=old.logits(x), lambda_lwf=1.0, kd_temperature=2.0,
        **kwargs,
    )
    l_plain, _ = cil.loss_and_grad(theta, x, y, **kwargs)
    assert abs(l_kd - l_plain) <= 1e-12


# ---------------------------------------------------------------------------
# Training behavior
# ---------------------------------------------------------------------------

def separable_two_class(seed=0, n=60):
    rs = np.random.RandomState(seed)
    x = np.concatenate([rs.randn(n, 2) + [5, 0], rs.randn(n, 2) - [5, 0]])
    y = np.repeat([0, 1], n)
    return x, y


def test_init_base_prototypes_and_separable_accuracy():
    x, y = separable_two_class()
    cfg = cil.TrainConfig(strategy="finetune", epochs=30, seed=3)
    clf = cil.init_base(_eset(x, y), cfg)
    np.testing.assert_allclose(clf.prototypes[0], x[y == 0].mean(axis=0), atol=1e-6)
    pred, _ = cil.head_predict(clf, x)
    assert np.mean(pred == y) == 1.0


def test_init_base_single_sample_classes():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1])
    clf = cil.init_base(_eset(x, y), cil.TrainConfig(epochs=1, seed=0))
    np.testing.assert_allclose(clf.prototypes, x, atol=1e-7)


def test_init_base_head_row_count():
    rs = np.random.RandomState(4)
    x = rs.randn(50, 16)
    y = np.repeat(np.arange(5), 10)
    clf = cil.init_base(_eset(x, y), cil.TrainConfig(epochs=2, seed=0))
    assert clf.class_count == 5 and clf.weights.shape == (5, 16)


def test_init_base_rejects_sparse_labels():
    with pytest.raises(DataError):
        cil.init_base(
            _eset(np.zeros((4, 2)), np.array([0, 0, 2, 2])),
            cil.TrainConfig(epochs=1),
        )


def test_lwf_zero_lambda_identical_to_finetune():
    x, y = separable_two_class(seed=5)
    cfg_ft = cil.TrainConfig(strategy="finetune", epochs=10, seed=7)
    clf0 = cil.init_base(_eset(x, y), cil.TrainConfig(epochs=3, seed=1))
    cfg_lwf = cil.TrainConfig(strategy="lwf", epochs=10, seed=7, lambda_lwf=0.0)
    a = cil.train_linear(clf0, x, y, cfg_ft)
    b = cil.train_linear(clf0, x, y, cfg_lwf, old_head=clf0)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.bias, b.bias)


def test_ewc_anchoring_monotone_in_lambda():
    rs = np.random.RandomState(6)
    # task A around +x, task B around -x pulls parameters away
    xa = rs.randn(80, 4) + [4, 0, 0, 0]
    ya = np.repeat([0, 1], 40)
    xa[ya == 1] -= [8, 0, 0, 0]
    clf = cil.init_base(_eset(xa, ya), cil.TrainConfig(epochs=20, seed=2))
    fisher = cil.compute_fisher(clf, xa, ya)
    xb = rs.randn(60, 4) * 2 + [0, 3, -3, 1]
    yb = rs.randint(0, 2, 60)
    dists = []
    for lam in (0.0, 1.0, 10.0, 100.0, 1000.0):
        cfg = cil.TrainConfig(strategy="ewc", epochs=15, seed=9, lambda_ewc=lam)
        trained = cil.train_linear(clf, xb, yb, cfg, ewc=fisher)
        theta = cil.flatten_params(trained.weights, trained.bias)
        dists.append(np.linalg.norm(theta - fisher.theta_star))
    for a, b in zip(dists, dists[1:]):
        assert b <= a + 1e-9


def test_train_rejects_bad_args():
    clf = cil.IncrementalClassifier(np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(ArgumentError):
        cil.train_linear(clf, np.zeros((0, 2)), np.zeros(0, dtype=int),
                         cil.TrainConfig(epochs=1))
    with pytest.raises(ArgumentError):
        cil.TrainConfig(lr=-1.0).validate()


def test_realign_ewc_block_offsets():
    # c_old=2, d=3: flat layout is [W(6), b(2)]; after growth to c_new=4 the
    # W entries stay at the front and b entries move past the new W rows
    state = cil.EwcState(np.arange(8.0), np.arange(8.0) + 100)
    out = cil.realign_ewc(state, 2, 4, 3)
    f_w, f_b = cil.unflatten_params(out.fisher_diag, 4, 3)
    t_w, t_b = cil.unflatten_params(out.theta_star, 4, 3)
    np.testing.assert_array_equal(f_w.ravel()[:6], np.arange(6.0))
    np.testing.assert_array_equal(f_w.ravel()[6:], 0.0)
    np.testing.assert_array_equal(f_b, [6.0, 7.0, 0.0, 0.0])
    np.testing.assert_array_equal(t_b, [106.0, 107.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# extend_head
# ---------------------------------------------------------------------------

def test_extend_by_zero_is_identity():
    clf = cil.IncrementalClassifier(np.eye(3), np.arange(3.0), np.eye(3))
    out = cil.extend_head(clf, 0, np.zeros((0, 3)))
    np.testing.assert_array_equal(out.weights, clf.weights)
    np.testing.assert_array_equal(out.bias, clf.bias)


def test_extend_preserves_old_logits_bitwise():
    rs = np.random.RandomState(8)
    for head in ("linear", "cosine"):
        clf = cil.IncrementalClassifier(
            rs.randn(4, 6), rs.randn(4), rs.randn(4, 6), head, 16.0
        )
        x = rs.randn(20, 6)
        before = clf.logits(x)
        grown = cil.extend_head(clf, 3, rs.randn(3, 6))
        assert grown.class_count == 7
        after = grown.logits(x)[:, :4]
        np.testing.assert_array_equal(before, after)


def test_extend_cosine_rows_unit_norm():
    clf = cil.IncrementalClassifier(
        np.eye(3), np.zeros(3), np.eye(3), "cosine", 16.0
    )
    grown = cil.extend_head(clf, 2, np.array([[3.0, 0, 0], [0, 4.0, 0]]))
    norms = np.linalg.norm(grown.weights[3:], axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_extend_rejects_bad_shape():
    clf = cil.IncrementalClassifier(np.eye(3), np.zeros(3), np.eye(3))
    with pytest.raises(ShapeError):
        cil.extend_head(clf, 2, np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# Herding
# ---------------------------------------------------------------------------

def test_herding_single_point():
    np.testing.assert_array_equal(
        cil.herding_select(np.array([[2.0, 1.0]]), 1), [0]
    )


def test_herding_first_pick_matches_exhaustive():
    rs = np.random.RandomState(9)
    for _ in range(20):
        x = rs.randn(rs.randint(2, 30), 4)
        xh = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        mu = xh.mean(axis=0)
        want = int(np.argmin(np.linalg.norm(xh - mu, axis=1)))
        got = cil.herding_select(x, 1)[0]
        assert got == want


def test_herding_each_step_beats_single_swaps():
    rs = np.random.RandomState(10)
    for _ in range(10):
        n, m = rs.randint(5, 13), rs.randint(2, 5)
        x = rs.randn(n, 3)
        xh = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        mu = xh.mean(axis=0)
        picked = cil.herding_select(x, m)
        assert len(set(picked.tolist())) == m
        for t in range(m):
            prefix = picked[:t]
            chosen = picked[t]
            base = np.linalg.norm(mu - (xh[prefix].sum(axis=0) + xh[chosen]) / (t + 1))
            for alt in range(n):
                if alt in picked[: t + 1]:
                    continue
                alt_cost = np.linalg.norm(
                    mu - (xh[prefix].sum(axis=0) + xh[alt]) / (t + 1)
                )
                assert base <= alt_cost + 1e-12


def test_herding_rejects_m_above_n():
    with pytest.raises(ArgumentError):
        cil.herding_select(np.zeros((2, 2)), 3)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def test_ncm_predicts_prototype_class():
    protos = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    clf = cil.IncrementalClassifier(protos, np.zeros(3), protos)
    pred = cil.ncm_predict(clf, protos)
    np.testing.assert_array_equal(pred, [0, 1, 2])


def test_ncm_scale_invariance():
    rs = np.random.RandomState(11)
    protos = rs.randn(4, 5)
    clf = cil.IncrementalClassifier(protos, np.zeros(4), protos)
    x = rs.randn(30, 5)
    base = cil.ncm_predict(clf, x)
    scaled_clf = cil.IncrementalClassifier(protos, np.zeros(4), protos * 7.3)
    np.testing.assert_array_equal(cil.ncm_predict(scaled_clf, x * 123.0), base)


def test_cosine_head_collinear_prediction():
    w = np.eye(3)
    clf = cil.IncrementalClassifier(w, np.zeros(3), w, "cosine", 16.0)
    x = np.array([[0.0, 5.0, 0.0]])
    pred, logits = cil.head_predict(clf, x)
    assert pred[0] == 1
    assert logits[0, 1] == pytest.approx(16.0)


def test_head_predict_matches_naive_matmul():
    rs = np.random.RandomState(12)
    clf = cil.IncrementalClassifier(rs.randn(5, 7), rs.randn(5), rs.randn(5, 7))
    x = rs.randn(40, 7)
    pred, logits = cil.head_predict(clf, x)
    want = x @ clf.weights.T + clf.bias
    np.testing.assert_allclose(logits, want, atol=1e-12)
    np.testing.assert_array_equal(pred, want.argmax(axis=1))


# ---------------------------------------------------------------------------
# FSCIL
# ---------------------------------------------------------------------------

def base_clf(c=5, d=8, seed=13):
    rs = np.random.RandomState(seed)
    w = rs.randn(c, d)
    return cil.IncrementalClassifier(w, np.zeros(c), w.copy())


def test_fscil_k1_prototype_is_the_shot():
    clf = base_clf()
    shot = np.random.RandomState(14).randn(1, 8).astype(np.float32)
    shots = store.EmbeddingSet(shot, np.array([5]))
    out = cil.fscil_update(clf, shots, 1)
    np.testing.assert_allclose(out.prototypes[5], shot[0], atol=1e-7)


def test_fscil_identical_shots():
    clf = base_clf()
    v = np.full((5, 8), 2.5, dtype=np.float32)
    shots = store.EmbeddingSet(v, np.full(5, 5))
    out = cil.fscil_update(clf, shots, 5)
    np.testing.assert_allclose(out.prototypes[5], v[0], atol=1e-6)


def test_fscil_ten_way_five_shot_accuracy():
    # 15 classes on orthogonal axes at radius 8 sigma: separation 8*sqrt(2)
    rs = np.random.RandomState(15)
    d, sep = 16, 8.0
    centers = np.eye(15, d) * sep
    base_centers, novel_centers = centers[:5], centers[5:]
    xb = np.repeat(base_centers, 20, axis=0) + rs.randn(100, d)
    yb = np.repeat(np.arange(5), 20)
    clf = cil.init_base(_eset(xb, yb), cil.TrainConfig(epochs=5, seed=0))
    shots = np.repeat(novel_centers, 5, axis=0) + rs.randn(50, d)
    y_shots = np.repeat(np.arange(5, 15), 5)
    out = cil.fscil_update(clf, _eset(shots, y_shots), 5)
    x_test = np.repeat(novel_centers, 30, axis=0) + rs.randn(300, d)
    y_test = np.repeat(np.arange(5, 15), 30)
    pred = cil.ncm_predict(out, x_test)
    assert np.mean(pred == y_test) >= 0.95


def test_fscil_uneven_shots_rejected():
    clf = base_clf()
    feats = np.zeros((3, 8), dtype=np.float32)
    shots = store.EmbeddingSet(feats, np.array([5, 5, 6]))
    with pytest.raises(DataError):
        cil.fscil_update(clf, shots, 2)


# ---------------------------------------------------------------------------
# Fisher
# ---------------------------------------------------------------------------

def test_fisher_saturated_softmax_is_zero():
    # huge margins -> p(y|x) ~ 1 -> zero gradient -> zero fisher
    w = np.array([[100.0, 0.0], [0.0, 100.0]])
    clf = cil.IncrementalClassifier(w, np.zeros(2), w.copy())
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1])
    state = cil.compute_fisher(clf, x, y)
    assert state.fisher_diag.max() <= 1e-6


def test_fisher_single_sample_equals_squared_gradient():
    rs = np.random.RandomState(16)
    clf = cil.IncrementalClassifier(rs.randn(3, 4), rs.randn(3), rs.randn(3, 4))
    x = rs.randn(1, 4)
    y = np.array([2])
    state = cil.compute_fisher(clf, x, y)
    theta = cil.flatten_params(clf.weights, clf.bias)
    # analytic gradient of -log p equals grad of CE on one sample
    _, grad = cil.loss_and_grad(
        theta, x, y, head_kind="linear", cosine_scale=16.0, c=3, d=4
    )
    np.testing.assert_allclose(state.fisher_diag, grad**2, atol=1e-12)


def test_fisher_invariant_under_duplication():
    rs = np.random.RandomState(17)
    clf = cil.IncrementalClassifier(rs.randn(3, 4), rs.randn(3), rs.randn(3, 4))
    x = rs.randn(8, 4)
    y = rs.randint(0, 3, 8)
    once = cil.compute_fisher(clf, x, y)
    twice = cil.compute_fisher(clf, np.tile(x, (2, 1)), np.tile(y, 2))
    np.testing.assert_allclose(once.fisher_diag, twice.fisher_diag, atol=1e-12)
    assert (once.fisher_diag >= 0).all()


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

def test_replay_budget_and_stability():
    rs = np.random.RandomState(18)
    buf = cil.ReplayBuffer(budget=5)
    x0 = rs.randn(20, 3)
    buf.add_class(0, x0)
    frozen = buf.exemplars[0].copy()
    buf.add_class(1, rs.randn(30, 3))
    assert all(v.shape[0] <= 5 for v in buf.exemplars.values())
    np.testing.assert_array_equal(buf.exemplars[0], frozen)
    xs, ys = buf.dataset()
    assert xs.shape[0] == ys.size == 10

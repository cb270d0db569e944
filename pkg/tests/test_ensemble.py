"""Ensembling contracts: weights, mixtures, joint training."""

import numpy as np
import pytest

from actionkd import nn
from actionkd.corpus import SynthConfig, gen_synthetic
from actionkd.ensemble import (
    EnsembleConfig,
    EnsembleParams,
    TeacherBundle,
    ensemble_predict,
    ensemble_weights,
    train_ensemble_student,
)
from actionkd.nn.tensor import Tensor
from actionkd.student import DistillConfig, StudentConfig, train_student
from actionkd.teacher import TeacherConfig, finetune_teacher
from actionkd.vocab import build_vocab

import reference as ref


def _params(teacher_dim, student_dim, heads=2, attention_dim=3, seed=0):
    return EnsembleParams(teacher_dim, student_dim, EnsembleConfig(heads=heads, attention_dim=attention_dim), seed=seed)


def test_single_teacher_gets_full_weight():
    rng = np.random.default_rng(0)
    for heads in (1, 3):
        params = _params(4, 5, heads=heads, seed=1)
        alpha = ensemble_weights(rng.normal(size=5), rng.normal(size=(1, 4)), params)
        np.testing.assert_allclose(alpha.data, [1.0], atol=1e-12)


def test_identical_teacher_features_give_uniform_weights():
    rng = np.random.default_rng(1)
    params = _params(4, 5, heads=2, seed=2)
    feat = rng.normal(size=4)
    alpha = ensemble_weights(rng.normal(size=5), np.stack([feat] * 3), params)
    np.testing.assert_allclose(alpha.data, [1 / 3] * 3, atol=1e-12)


def test_hand_constructed_two_head_example():
    # head 1 prefers teacher 1 at softmax [0.9, 0.1]; head 2 is indifferent
    cfg = EnsembleConfig(heads=2, attention_dim=1)
    params = EnsembleParams(1, 1, cfg, seed=0)
    params.w_k.data = np.array([[[np.log(9.0)]], [[0.0]]])
    params.b_k.data = np.zeros((2, 1))
    params.w_q.data = np.array([[[1.0]], [[1.0]]])
    params.b_q.data = np.zeros((2, 1))
    f_s = np.array([1.0])
    feats = np.array([[1.0], [0.0]])
    alpha = ensemble_weights(f_s, feats, params)
    np.testing.assert_allclose(alpha.data, [0.7, 0.3], atol=1e-12)
    oracle = ref.ensemble_alpha_ref(
        f_s.tolist(), feats.tolist(),
        params.w_k.data.tolist(), params.b_k.data.tolist(),
        params.w_q.data.tolist(), params.b_q.data.tolist(),
    )
    np.testing.assert_allclose(alpha.data, oracle, atol=1e-12)


def test_weights_match_loop_oracle_randomized():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, h_t, h_s, H, ha = (int(rng.integers(1, 5)), 3, 4, int(rng.integers(1, 4)), 2)
        params = _params(h_t, h_s, heads=H, attention_dim=ha, seed=int(rng.integers(1000)))
        f_s = rng.normal(size=h_s)
        feats = rng.normal(size=(n, h_t))
        got = ensemble_weights(f_s, feats, params).data
        oracle = ref.ensemble_alpha_ref(
            f_s.tolist(), feats.tolist(),
            params.w_k.data.tolist(), params.b_k.data.tolist(),
            params.w_q.data.tolist(), params.b_q.data.tolist(),
        )
        np.testing.assert_allclose(got, oracle, atol=1e-10)


def test_weights_form_distribution_and_permute():
    rng = np.random.default_rng(4)
    params = _params(4, 5, heads=3, seed=5)
    f_s = rng.normal(size=5)
    feats = rng.normal(size=(4, 4))
    alpha = ensemble_weights(f_s, feats, params).data
    assert np.all(alpha >= 0) and abs(alpha.sum() - 1.0) < 1e-9
    perm = np.array([2, 0, 3, 1])
    permuted = ensemble_weights(f_s, feats[perm], params).data
    np.testing.assert_allclose(permuted, alpha[perm], atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_ensemble_weights_grad_check(seed):
    rng = np.random.default_rng(seed)
    params = _params(3, 4, heads=2, attention_dim=2, seed=seed)
    f_s = Tensor(rng.normal(size=(2, 4)), requires_grad=False)
    feats = rng.normal(size=(2, 3, 3))
    target = rng.normal(size=(2, 3))

    def loss_fn():
        alpha = ensemble_weights(f_s, Tensor(feats), params)
        return ((alpha - Tensor(target)) ** 2.0).sum()

    assert nn.grad_check(loss_fn, params.parameters(), eps=1e-4) < 1e-4


def test_predict_single_teacher_identity():
    dist = np.array([0.2, 0.5, 0.3])
    got = ensemble_predict(np.array([1.0]), dist[None, :]).data
    np.testing.assert_array_equal(got, dist)


def test_predict_even_mixture():
    dists = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = ensemble_predict(np.array([0.5, 0.5]), dists).data
    np.testing.assert_allclose(got, [0.5, 0.5])


def test_predict_stays_on_simplex_property():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n, C = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        alpha = rng.dirichlet(np.ones(n))
        dists = rng.dirichlet(np.ones(C), size=n)
        out = ensemble_predict(alpha, dists).data
        assert np.all(out >= -1e-12)
        assert abs(out.sum() - 1.0) < 1e-9


def test_predict_rejects_bad_weights():
    dists = np.array([[0.5, 0.5], [0.1, 0.9]])
    with pytest.raises(ValueError, match="non-negative"):
        ensemble_predict(np.array([1.5, -0.5]), dists)
    with pytest.raises(ValueError, match="sum to 1"):
        ensemble_predict(np.array([0.7, 0.7]), dists)


def test_predict_mixture_permutation_invariant():
    rng = np.random.default_rng(6)
    alpha = rng.dirichlet(np.ones(4))
    dists = rng.dirichlet(np.ones(5), size=4)
    base = ensemble_predict(alpha, dists).data
    perm = np.array([3, 1, 0, 2])
    swapped = ensemble_predict(alpha[perm], dists[perm]).data
    np.testing.assert_allclose(base, swapped, atol=1e-15)


def test_bundle_requires_shared_class_space():
    cfg_a = SynthConfig(n_states=5, n_actions=5, n_verbs=5, n_objects=5,
                        n_train=20, n_test=10, context_len=2, frames_per_segment=1, feature_dim=4)
    cfg_b = SynthConfig(n_states=6, n_actions=6, n_verbs=6, n_objects=6,
                        n_train=20, n_test=10, context_len=2, frames_per_segment=1, feature_dim=4,
                        transition_seed=99)
    tcfg = TeacherConfig(hidden_dim=8, n_layers=1, n_heads=2, ff_dim=12, context_len=2, epochs=0)
    teachers = []
    for cfg in (cfg_a, cfg_b):
        train, test = gen_synthetic(cfg, 0)
        vocab = build_vocab(train, test)
        teachers.append(finetune_teacher(train, vocab, tcfg))
    with pytest.raises(ValueError, match="class space"):
        TeacherBundle(teachers)


# -- joint training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_setup():
    cfg = SynthConfig(n_states=8, n_actions=8, n_verbs=4, n_objects=4,
                      n_train=48, n_test=16, context_len=3, frames_per_segment=2, feature_dim=6)
    train, test = gen_synthetic(cfg, 7)
    vocab = build_vocab(train, test)
    tcfg = TeacherConfig(hidden_dim=16, n_layers=1, n_heads=2, ff_dim=24, context_len=3,
                         epochs=2, lr=3e-3, batch_size=16, seed=0)
    teacher = finetune_teacher(train, vocab, tcfg)
    scfg = StudentConfig(hidden_dim=16, n_layers=1, n_heads=2, ff_dim=24, max_frames=16,
                         epochs=1, batch_size=16, lr=1e-3, seed=0)
    return train, vocab, teacher, scfg


def test_single_teacher_ensemble_reduces_to_plain_distillation(trained_setup):
    train, vocab, teacher, scfg = trained_setup
    dcfg = DistillConfig(lambda_s=2.0, gamma=2.0, top_k=4)
    plain_log: list[float] = []
    train_student(train, vocab, scfg, distill_cfg=dcfg, teacher=teacher, loss_log=plain_log)
    ens_log: list[float] = []
    train_ensemble_student(
        train, vocab, TeacherBundle([teacher]), scfg, dcfg,
        EnsembleConfig(heads=1, attention_dim=4), loss_log=ens_log,
    )
    assert len(plain_log) == len(ens_log)
    np.testing.assert_allclose(plain_log, ens_log, atol=1e-12)


def test_teacher_params_receive_no_gradient(trained_setup):
    train, vocab, teacher, scfg = trained_setup
    for p in teacher.parameters():
        p.grad = None
    train_ensemble_student(
        train, vocab, TeacherBundle([teacher, teacher]), scfg,
        DistillConfig(lambda_s=2.0, gamma=2.0, top_k=None),
        EnsembleConfig(heads=2, attention_dim=4),
    )
    assert all(p.grad is None for p in teacher.parameters())


def test_mean_pool_and_fixed_strategies(trained_setup):
    train, vocab, teacher, scfg = trained_setup
    dcfg = DistillConfig(lambda_s=1.0, gamma=2.0, top_k=None)
    bundle = TeacherBundle([teacher, teacher])
    model_mp, params_mp = train_ensemble_student(
        train, vocab, bundle, scfg, dcfg, EnsembleConfig(heads=1, strategy="mean_pool")
    )
    assert params_mp is None
    model_fx, _ = train_ensemble_student(
        train, vocab, bundle, scfg, dcfg,
        EnsembleConfig(heads=1, strategy="fixed_weights", fixed_weights=[0.5, 0.5]),
    )
    # identical teachers: mean-pool and even fixed weights match exactly
    a = model_mp.params["head/cls_w"].data
    b = model_fx.params["head/cls_w"].data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_strategy_validation():
    with pytest.raises(ValueError, match="strategy"):
        EnsembleConfig(strategy="vote")

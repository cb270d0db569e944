"""Student model contracts: causality, losses, distillation, training."""

import numpy as np
import pytest

from actionkd import nn
from actionkd.corpus import SynthConfig, gen_synthetic
from actionkd.nn.tensor import parameter
from actionkd.student import (
    DistillConfig,
    StudentConfig,
    StudentModel,
    avt_loss,
    distill_loss,
    student_predict_topk,
    top_k_index_set,
    train_student,
)
from actionkd.teacher import TeacherConfig, finetune_teacher
from actionkd.vocab import build_vocab

import reference as ref

TINY = StudentConfig(hidden_dim=16, n_layers=1, n_heads=2, ff_dim=24, max_frames=16)


@pytest.fixture(scope="module")
def small_world():
    cfg = SynthConfig(
        n_states=8, n_actions=8, n_verbs=4, n_objects=4,
        n_train=60, n_test=20, context_len=3, frames_per_segment=2, feature_dim=6,
    )
    train, test = gen_synthetic(cfg, 2)
    vocab = build_vocab(train, test)
    return cfg, train, test, vocab


def test_causality(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    frames = train.instances[0].frames.copy()
    rng = np.random.default_rng(0)
    base = model.forward(frames).step_logits.data[0]
    t = frames.shape[0]
    for j in range(t - 1):
        poked = frames.copy()
        poked[j + 1 :] += rng.normal(size=poked[j + 1 :].shape)
        out = model.forward(poked).step_logits.data[0]
        assert np.array_equal(base[: j + 1], out[: j + 1])
        assert not np.array_equal(base[j + 1], out[j + 1])


def test_backbone_is_non_contextual(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    frames = train.instances[0].frames
    perm = np.random.default_rng(1).permutation(frames.shape[0])
    z = model.forward(frames).z.data[0]
    z_perm = model.forward(frames[perm]).z.data[0]
    assert np.array_equal(z[perm], z_perm)


def test_single_frame_forward(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    out = model.forward(train.instances[0].frames[:1])
    final = nn.softmax_temp(out.final_logits).data
    assert final.shape == (1, vocab.n_actions)
    np.testing.assert_allclose(final.sum(), 1.0, atol=1e-9)


def test_y_final_is_last_step_exactly(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    out = model.forward(train.instances[0].frames)
    assert np.array_equal(out.final_logits.data, out.step_logits.data[:, -1])
    assert np.array_equal(out.y_final.data, out.y_steps.data[:, -1])


def test_dim_mismatch_rejected(small_world):
    cfg, _, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    with pytest.raises(ValueError, match="feature dim"):
        model.forward(np.zeros((2, 4, cfg.feature_dim + 1)))


# -- avt-style loss --------------------------------------------------------------


def test_loss_reduces_to_final_ce(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    out = model.forward(train.instances[0].frames)
    got = avt_loss(out, [3], mu_intermediate=0.0, mu_future_feature=0.0)
    expected = nn.cross_entropy(out.final_logits, [3])
    assert float(got.data) == pytest.approx(float(expected.data), abs=1e-12)


def test_single_frame_feature_term_is_zero(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    out = model.forward(train.instances[0].frames[:1])
    with_feat = avt_loss(out, [1], [[2]], mu_intermediate=1.0, mu_future_feature=1.0)
    without = avt_loss(out, [1], [[2]], mu_intermediate=1.0, mu_future_feature=0.0)
    assert float(with_feat.data) == pytest.approx(float(without.data), abs=1e-15)


def test_two_frame_loss_matches_direct_summation(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=4)
    frames = train.instances[0].frames[:2]
    out = model.forward(frames)
    target, inter = 2, [1, 5]
    mu_i, mu_f = 0.7, 1.3
    got = float(avt_loss(out, [target], [inter], mu_i, mu_f).data)
    expected = ref.avt_loss_ref(
        step_logits=out.step_logits.data[0].tolist(),
        final_logits=out.final_logits.data[0].tolist(),
        future_pred=out.future_feat.data[0].tolist(),
        z=out.z.data[0].tolist(),
        target=target,
        intermediate=inter,
        mu_int=mu_i,
        mu_feat=mu_f,
    )
    assert got == pytest.approx(expected, abs=1e-12)


def test_missing_intermediate_labels_rejected(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    out = model.forward(train.instances[0].frames)
    with pytest.raises(ValueError, match="intermediate"):
        avt_loss(out, [0], None, mu_intermediate=1.0)


# -- distillation loss -------------------------------------------------------------


def test_distill_default_matches_reported_k():
    assert DistillConfig().top_k == 50


def test_distill_zero_for_identical_logits():
    logits = np.array([1.0, -0.5, 2.0, 0.0])
    cfg = DistillConfig(lambda_s=1.0, gamma=2.0, top_k=None)
    assert float(distill_loss(logits, logits, cfg).data) == pytest.approx(0.0, abs=1e-15)


def test_distill_full_space_equals_plain_kl():
    rng = np.random.default_rng(3)
    s, t = rng.normal(size=7), rng.normal(size=7)
    gamma = 2.5
    got = float(distill_loss(s, t, DistillConfig(gamma=gamma, top_k=7)).data)
    plain = float(
        nn.kl_divergence(nn.softmax_temp(t, gamma), nn.softmax_temp(s, gamma)).data
    )
    assert got == pytest.approx(plain, abs=1e-12)


def test_distill_hand_example_matches_oracle():
    teacher = [2.0, 1.0, 0.0]
    student = [0.0, 0.0, 0.0]
    assert ref.distill_ref(student, teacher, k=2, gamma=1.0) == pytest.approx(ref.DISTILL_K2)
    got = float(distill_loss(student, teacher, DistillConfig(top_k=2, gamma=1.0)).data)
    assert got == pytest.approx(ref.DISTILL_K2, abs=1e-9)


def test_distill_matches_oracle_randomized():
    rng = np.random.default_rng(4)
    for _ in range(50):
        C = int(rng.integers(3, 12))
        k = int(rng.integers(1, C + 1))
        gamma = float(rng.uniform(0.5, 4.0))
        t = rng.normal(size=C).tolist()
        s = rng.normal(size=C).tolist()
        got = float(distill_loss(s, t, DistillConfig(top_k=k, gamma=gamma)).data)
        assert got == pytest.approx(ref.distill_ref(s, t, k, gamma), abs=1e-9)


def test_distill_selection_ties_go_to_lowest_index():
    teacher = np.array([1.0, 2.0, 2.0, 0.5])
    assert top_k_index_set(teacher, 2).tolist() == [1, 2]
    teacher = np.array([2.0, 2.0, 2.0])
    assert top_k_index_set(teacher, 2).tolist() == [0, 1]


def test_distill_selection_gamma_invariant():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=9)
    sets = set()
    for gamma in (0.1, 1.0, 10.0):
        cfg = DistillConfig(top_k=4, gamma=gamma)
        sets.add(tuple(top_k_index_set(logits, cfg.top_k).tolist()))
    assert len(sets) == 1


def test_distill_rejects_oversized_k():
    with pytest.raises(ValueError, match="top_k"):
        distill_loss(np.zeros(3), np.zeros(3), DistillConfig(top_k=4))


def test_distill_nonnegative_property():
    rng = np.random.default_rng(6)
    for _ in range(200):
        C = int(rng.integers(2, 10))
        cfg = DistillConfig(top_k=int(rng.integers(1, C + 1)), gamma=float(rng.uniform(0.3, 5.0)))
        value = float(distill_loss(rng.normal(size=C), rng.normal(size=C), cfg).data)
        assert value >= -1e-15


def test_distill_gradient_never_reaches_teacher():
    teacher = parameter(np.array([2.0, 1.0, 0.0]), "teacher_logits")
    student = parameter(np.array([0.1, 0.2, 0.3]), "student_logits")
    loss = distill_loss(student, teacher, DistillConfig(top_k=2, gamma=1.0))
    loss.backward()
    assert teacher.grad is None
    assert student.grad is not None and np.any(student.grad != 0)


def test_distill_gamma_sq_scaling():
    rng = np.random.default_rng(7)
    s, t = rng.normal(size=5), rng.normal(size=5)
    base = float(distill_loss(s, t, DistillConfig(gamma=3.0, top_k=None)).data)
    scaled = float(
        distill_loss(s, t, DistillConfig(gamma=3.0, top_k=None, gamma_sq_scale=True)).data
    )
    assert scaled == pytest.approx(9.0 * base, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_full_student_loss_grad_check(small_world, seed):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=seed)
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, len(train.instances), size=2)
    frames = 0.3 * np.stack([train.instances[i].frames for i in rows])
    targets = rng.integers(0, vocab.n_actions, size=2)
    inter = rng.integers(0, vocab.n_actions, size=(2, frames.shape[1]))
    teacher_logits = rng.normal(size=(2, vocab.n_actions))
    dcfg = DistillConfig(lambda_s=3.0, gamma=2.0, top_k=4)
    frozen = model.forward(frames).z.data[:, 1:].copy()

    def loss_fn():
        out = model.forward(frames)
        kl = distill_loss(out.final_logits, teacher_logits, dcfg)
        return avt_loss(out, targets, inter, future_targets=frozen) + dcfg.lambda_s * kl.mean()

    assert nn.grad_check(loss_fn, model.parameters(), eps=1e-4) < 1e-4


# -- training ---------------------------------------------------------------------


def _quick_student_cfg(seed=0):
    return StudentConfig(
        hidden_dim=16, n_layers=1, n_heads=2, ff_dim=24, max_frames=16,
        epochs=2, batch_size=16, lr=1e-3, seed=seed,
    )


def test_lambda_zero_equals_no_teacher(small_world, tmp_path):
    cfg, train, _, vocab = small_world
    teacher = finetune_teacher(
        train, vocab,
        TeacherConfig(hidden_dim=16, n_layers=1, n_heads=2, ff_dim=24, context_len=3,
                      epochs=1, lr=1e-3, batch_size=16, seed=0),
    )
    plain = train_student(train, vocab, _quick_student_cfg())
    with_idle_teacher = train_student(
        train, vocab, _quick_student_cfg(),
        distill_cfg=DistillConfig(lambda_s=0.0, top_k=None), teacher=teacher,
    )
    nn.save_checkpoint(tmp_path / "plain.json", plain.to_checkpoint())
    nn.save_checkpoint(tmp_path / "idle.json", with_idle_teacher.to_checkpoint())
    assert (tmp_path / "plain.json").read_bytes() == (tmp_path / "idle.json").read_bytes()


def test_class_space_mismatch_rejected(small_world):
    cfg, train, _, vocab = small_world
    other = SynthConfig(
        n_states=5, n_actions=5, n_verbs=5, n_objects=5,
        n_train=20, n_test=10, context_len=3, frames_per_segment=2, feature_dim=6,
    )
    other_train, other_test = gen_synthetic(other, 0)
    other_vocab = build_vocab(other_train, other_test)
    teacher = finetune_teacher(
        other_train, other_vocab,
        TeacherConfig(hidden_dim=16, n_layers=1, n_heads=2, ff_dim=24, context_len=3,
                      epochs=0, seed=0),
    )
    with pytest.raises(ValueError, match="class space"):
        train_student(
            train, vocab, _quick_student_cfg(),
            distill_cfg=DistillConfig(lambda_s=1.0, top_k=None), teacher=teacher,
        )


def test_predict_topk_frames_only(small_world):
    cfg, train, _, vocab = small_world
    model = StudentModel(cfg.feature_dim, vocab.n_actions, TINY, seed=0)
    preds = student_predict_topk(model, train.instances[0].frames, k=3)
    assert len(preds) == 3
    probs = [p for _, p in preds]
    assert all(a >= b for a, b in zip(probs, probs[1:]))

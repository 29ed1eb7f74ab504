import json
import math

import numpy as np
import pytest

from voxssl import autodiff as ad
from voxssl import distill
from voxssl.autodiff import Tensor
from voxssl.distill import (CenterState, LossWeights, TemperatureConfig,
                            ema_update, global_loss, patch_loss,
                            reconstruction_loss, teacher_distribution,
                            total_loss, update_center)
from voxssl.vit3d import ModelConfig, ModelParams


# -- independent scalar oracle (pure python, no package code) ----------------

def oracle_softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    z = sum(es)
    return [e / z for e in es]


def oracle_teacher(logits, center, tau_t):
    return oracle_softmax([(l - c) / tau_t for l, c in zip(logits, center)])


def oracle_ce(t, s_logits, tau_s):
    logp = [math.log(p) for p in oracle_softmax([x / tau_s for x in s_logits])]
    return -sum(tk * lk for tk, lk in zip(t, logp))


def oracle_global_loss(teacher_logits, student_logits, center, tau_s, tau_t):
    terms = []
    for i, tl in enumerate(teacher_logits):
        t = oracle_teacher(tl, center, tau_t)
        for j, sl in enumerate(student_logits):
            if j == i:
                continue
            terms.append(oracle_ce(t, sl, tau_s))
    return sum(terms) / len(terms), len(terms)


class TestTeacherDistribution:
    def test_uniform_when_logits_equal_center(self):
        c = np.array([0.3, -0.7, 1.1])
        p = teacher_distribution(c.copy(), c, tau_t=0.07)
        assert np.allclose(p, 1 / 3)

    def test_sharpening_limit(self):
        p = teacher_distribution(np.array([1.0, 0.0]), np.zeros(2), tau_t=1e-3)
        assert p[0] >= 1 - 1e-6

    def test_reference_values(self):
        # frozen from a 60-digit mpmath evaluation (exponent gaps 25 and 50)
        p = teacher_distribution(np.array([1.0, 2.0, 3.0]), np.zeros(3), tau_t=0.04)
        assert np.allclose(p, [1.9287498479e-22, 1.3887943865e-11, 1.0],
                           rtol=1e-6, atol=1e-30)

    def test_detached_from_tape(self):
        logits = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p = teacher_distribution(logits, np.zeros(2), tau_t=0.1)
        assert isinstance(p, np.ndarray)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.normal(size=6)
            center = rng.normal(size=6)
            shift = rng.normal()
            p = teacher_distribution(logits, center, 0.05)
            q = teacher_distribution(logits + shift, center + shift, 0.05)
            assert abs(p.sum() - 1) < 1e-6
            assert np.max(np.abs(p - q)) < 1e-6

    def test_argmax_matches_centred_logits(self):
        rng = np.random.default_rng(1)
        for tau in (0.01, 0.07, 0.5):
            logits = rng.normal(size=8)
            center = rng.normal(size=8)
            p = teacher_distribution(logits, center, tau)
            assert np.argmax(p) == np.argmax(logits - center)


class TestGlobalLoss:
    def test_pair_count(self):
        for v in (2, 3, 6):
            teacher = [np.zeros(4), np.zeros(4)]
            student = [Tensor(np.zeros(4)) for _ in range(v)]
            _, pairs = global_loss(teacher, student, np.zeros(4), 0.1, 0.04)
            assert pairs == 2 * (v - 1)

    def test_uniform_student_gives_log_k(self):
        rng = np.random.default_rng(2)
        k = 16
        teacher = [rng.normal(size=k), rng.normal(size=k)]
        student = [Tensor(np.full(k, 0.7)) for _ in range(6)]
        loss, _ = global_loss(teacher, student, rng.normal(size=k), 0.1, 0.05)
        assert abs(loss.item() - math.log(k)) < 1e-9

    def test_two_view_hand_case(self):
        # teacher distributions forced one-hot by a huge centred gap
        teacher = [np.array([50.0, -50.0]), np.array([50.0, -50.0])]
        student = [Tensor(np.zeros(2)), Tensor(np.zeros(2))]
        loss, pairs = global_loss(teacher, student, np.zeros(2), 0.1, 0.04)
        assert pairs == 2
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for v in (2, 3, 5):
            k = 3
            teacher = [rng.normal(size=k) for _ in range(2)]
            student_np = [rng.normal(size=k) for _ in range(v)]
            center = rng.normal(size=k)
            got, pairs = global_loss(teacher, [Tensor(s) for s in student_np],
                                     center, 0.1, 0.04)
            want, want_pairs = oracle_global_loss(
                [list(t) for t in teacher], [list(s) for s in student_np],
                list(center), 0.1, 0.04)
            assert pairs == want_pairs
            assert abs(got.item() - want) < 1e-10

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(4)
        k = 8
        teacher = [rng.normal(size=k) for _ in range(2)]
        student = [rng.normal(size=k) for _ in range(3)]
        center = rng.normal(size=k)
        base, _ = global_loss(teacher, [Tensor(s) for s in student], center, 0.1, 0.05)
        perm = rng.permutation(k)
        permuted, _ = global_loss([t[perm] for t in teacher],
                                  [Tensor(s[perm]) for s in student],
                                  center[perm], 0.1, 0.05)
        assert abs(base.item() - permuted.item()) < 1e-10

    def test_too_few_views_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            global_loss([np.zeros(2), np.zeros(2)], [Tensor(np.zeros(2))],
                        np.zeros(2), 0.1, 0.04)


class TestPatchLoss:
    def test_self_distillation_equals_entropy(self):
        # teacher == student logits, tau_t == tau_s, centre 0: CE(p,p) = H(p)
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 4))
        tau = 0.1
        loss = patch_loss([logits, logits.copy()],
                          [Tensor(logits.copy()), Tensor(logits.copy())],
                          np.zeros(4), tau_s=tau, tau_t=tau)
        p = np.exp(logits / tau - np.log(np.exp(logits / tau).sum(axis=1, keepdims=True)))
        h = float(np.mean(-(p * np.log(p)).sum(axis=1)))
        assert abs(loss.item() - h) < 1e-9

    def test_single_token_hand_value(self):
        loss = patch_loss([np.array([[50.0, -50.0]])], [Tensor(np.zeros((1, 2)))],
                          np.zeros(2), 0.1, 0.04)
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        tp = rng.normal(size=(2, 3))
        sp = rng.normal(size=(2, 3))
        center = rng.normal(size=3)
        got = patch_loss([tp], [Tensor(sp)], center, 0.1, 0.05)
        want = 0.0
        for row_t, row_s in zip(tp, sp):
            t = oracle_teacher(list(row_t), list(center), 0.05)
            want += oracle_ce(t, list(row_s), 0.1)
        want /= 2
        assert abs(got.item() - want) < 1e-10

    def test_token_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            patch_loss([np.zeros((3, 4))], [Tensor(np.zeros((2, 4)))],
                       np.zeros(4), 0.1, 0.04)


class TestReconstructionLoss:
    def test_identity_is_zero(self):
        x = np.random.default_rng(7).random((4, 4, 4))
        mask = np.ones((4, 4, 4), dtype=bool)
        assert reconstruction_loss(x, Tensor(x.copy()), mask).item() == 0.0

    def test_unmasked_edits_are_invisible(self):
        rng = np.random.default_rng(8)
        x = rng.random((4, 4, 4))
        mask = rng.random((4, 4, 4)) < 0.4
        mask[0, 0, 0] = True
        xb = x.copy()
        xb[~mask] += 100.0
        assert reconstruction_loss(x, Tensor(xb), mask).item() == 0.0

    def test_hand_arithmetic(self):
        x = np.zeros(4)
        xb = np.array([1.0, 3.0, 9.0, 9.0])
        mask = np.array([True, True, False, False])
        # errors 1 and 3 over 2 masked voxels: (1 + 9) / 2
        assert reconstruction_loss(x, Tensor(xb), mask).item() == 5.0

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty mask"):
            reconstruction_loss(np.zeros(3), Tensor(np.zeros(3)),
                                np.zeros(3, dtype=bool))


class TestTotalLoss:
    def test_weighted_sum(self):
        l, report = total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
                               Tensor(np.asarray(0.01)), LossWeights(lambda_rec=100.0))
        assert abs(l.item() - 3.0) < 1e-12
        assert abs(report.total - (report.l_global + report.l_patch
                                   + 100.0 * report.l_rec)) < 1e-6

    def test_distillation_only_ablation(self):
        l, _ = total_loss(Tensor(np.asarray(0.5)), Tensor(np.asarray(0.25)),
                          Tensor(np.asarray(123.0)), LossWeights(lambda_rec=0.0))
        assert abs(l.item() - 0.75) < 1e-12

    def test_report_serialises_to_json_line(self):
        _, report = total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)),
                               Tensor(np.asarray(0.0)), LossWeights(),
                               teacher_entropy=1.5, mask_ratio=0.5, n_pairs=10)
        rec = json.loads(report.to_line(step=3, lr=0.1))
        assert rec["step"] == 3 and rec["n_pairs"] == 10 and rec["lr"] == 0.1


class TestCenterUpdate:
    def test_closed_form(self):
        c = CenterState.initial(3, momentum=0.9)
        new = update_center(c, [np.ones(3), np.ones(3)], [np.ones((4, 3))])
        assert np.allclose(new.c_global, 0.1, atol=1e-12)
        assert np.allclose(new.c_patch, 0.1, atol=1e-12)

    def test_fixed_point(self):
        c = CenterState(c_global=np.full(2, 0.4), c_patch=np.full(2, -0.2),
                        momentum=0.9)
        new = update_center(c, [np.full(2, 0.4)], [np.full((3, 2), -0.2)])
        assert np.allclose(new.c_global, 0.4, atol=1e-15)
        assert np.allclose(new.c_patch, -0.2, atol=1e-15)

    def test_sequential_vs_merged_differ(self):
        # per-mini-batch updates are not equivalent to one merged update
        c0 = CenterState.initial(1, momentum=0.9)
        b1, b2 = np.array([1.0]), np.array([0.0])
        seq = update_center(update_center(c0, [b1], [b1[None]]), [b2], [b2[None]])
        merged = update_center(c0, [np.array([0.5])], [np.array([[0.5]])])
        assert not np.allclose(seq.c_global, merged.c_global)
        assert abs(seq.c_global[0] - 0.09) < 1e-12
        assert abs(merged.c_global[0] - 0.05) < 1e-12


class TestEmaUpdate:
    def _pair(self):
        cfg = ModelConfig(patch_extent=2, embed_dim=8, depth=1, n_heads=2,
                          mlp_ratio=1.0, proj_dim=4, summariser_heads=2,
                          pos_grid=(2, 2, 2))
        student = ModelParams.init(cfg, seed=0)
        teacher = ModelParams.init(cfg, seed=1, requires_grad=False)
        return student, teacher

    def test_closed_form(self):
        student, teacher = self._pair()
        for t in teacher.values():
            t.data[:] = 1.0
        for s in student.values():
            s.data[:] = 0.0
        ema_update(teacher, student, m=0.996)
        for t in teacher.values():
            assert np.allclose(t.data, 0.996, atol=1e-12)

    def test_momentum_one_freezes_teacher(self):
        student, teacher = self._pair()
        before = {n: t.data.copy() for n, t in teacher.named()}
        ema_update(teacher, student, m=1.0)
        for n, t in teacher.named():
            assert np.array_equal(t.data, before[n])

    def test_momentum_zero_copies_student(self):
        student, teacher = self._pair()
        ema_update(teacher, student, m=0.0)
        for n, t in teacher.named():
            assert np.array_equal(t.data, student[n].data)

    def test_shape_mismatch_rejected(self):
        student, teacher = self._pair()
        teacher.tensors["cls"] = Tensor(np.zeros((1, 4)), name="cls")
        with pytest.raises(ValueError, match="cls"):
            ema_update(teacher, student, m=0.5)

    def test_teacher_never_requires_grad_after_update(self):
        student, teacher = self._pair()
        ema_update(teacher, student, m=0.9)
        assert not any(t.requires_grad for t in teacher.values())


class TestTemperatureSchedule:
    def test_linear_warmup_then_constant(self):
        t = TemperatureConfig(warmup_epochs=10)
        assert t.tau_t_at(0) == 0.04
        assert abs(t.tau_t_at(5) - 0.055) < 1e-12
        assert t.tau_t_at(10) == 0.07
        assert t.tau_t_at(100) == 0.07

    def test_teacher_must_be_sharper(self):
        with pytest.raises(ValueError, match="not exceed"):
            TemperatureConfig(tau_s=0.05, tau_t_start=0.04, tau_t_end=0.07)


class TestNoGradientIntoTeacher:
    def test_student_gradients_exist_teacher_side_untouched(self):
        rng = np.random.default_rng(9)
        k = 4
        teacher_logits = [Tensor(rng.normal(size=k)), Tensor(rng.normal(size=k))]
        student = [Tensor(rng.normal(size=k), requires_grad=True) for _ in range(3)]
        loss, _ = global_loss(teacher_logits, student, np.zeros(k), 0.1, 0.05)
        loss.backward()
        assert all(s.grad is not None for s in student)
        assert all(t.grad is None for t in teacher_logits)

    def test_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        k = 5
        teacher = [rng.normal(size=k) for _ in range(2)]
        center = rng.normal(size=k) * 0.1
        student_data = [rng.normal(size=k) for _ in range(4)]

        def f(ps):
            loss, _ = global_loss(teacher, ps, center, 0.1, 0.05)
            return loss

        params = [Tensor(s.copy(), requires_grad=True) for s in student_data]
        report = ad.grad_check(f, params, step=1e-5, tol=1e-4)
        assert report.passed

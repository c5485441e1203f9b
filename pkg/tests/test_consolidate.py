"""Consolidation loss, projection heads, and the distillation loop."""

import math

import numpy as np
import pytest
import torch

from cleandift.backbone import FeatureStack, param_checksum
from cleandift.consolidate import (
    AlignmentConfig, ProjectionHeads, STUDENT_TIMESTEP, alignment_loss,
    heldout_bin_similarity, init_heads, init_student_from_teacher, load_heads,
    pretrain_heads, project_features, run_distillation, save_heads,
)


def _rand_stack(gen, stages=((4, 3), (6, 5)), batch=2, dtype=torch.float32):
    """Per-stage random tensors [(channels, spatial), ...]."""
    return [
        torch.randn(batch, c, s, s, generator=gen, dtype=dtype) for c, s in stages
    ]


class TestAlignmentLoss:
    def test_identical_stacks_exact(self):
        gen = torch.Generator().manual_seed(0)
        taps = _rand_stack(gen)
        loss, sims = alignment_loss(taps, [t.clone() for t in taps], "cosine")
        assert float(loss) == -float(len(taps))  # exactly -K
        assert sims == [1.0, 1.0]
        for metric in ("l1", "l2"):
            loss, _ = alignment_loss(taps, [t.clone() for t in taps], metric)
            assert float(loss) == 0.0  # exactly zero

    def test_cosine_bounds_random(self):
        gen = torch.Generator().manual_seed(1)
        for _ in range(1000):
            a = _rand_stack(gen, stages=((3, 2),), batch=1)
            b = _rand_stack(gen, stages=((3, 2),), batch=1)
            loss, _ = alignment_loss(a, b, "cosine")
            assert -1.0 <= float(loss) <= 1.0

    def test_orthogonal_stack_zero(self):
        a = [torch.tensor([[[[1.0]], [[0.0]]]])]  # [1, 2, 1, 1]
        b = [torch.tensor([[[[0.0]], [[1.0]]]])]
        loss, sims = alignment_loss(a, b, "cosine")
        assert float(loss) == 0.0
        assert sims == [0.0]

    def test_hand_computed_two_stage(self):
        # Stage 0: vectors (3, 4) vs (4, 3): cos = 24/25.
        # Stage 1: vectors (1, 0) vs (1, 1): cos = 1/sqrt(2).
        a = [torch.tensor([[[[3.0]], [[4.0]]]]), torch.tensor([[[[1.0]], [[0.0]]]])]
        b = [torch.tensor([[[[4.0]], [[3.0]]]]), torch.tensor([[[[1.0]], [[1.0]]]])]
        loss, sims = alignment_loss(a, b, "cosine")
        expected = -(24.0 / 25.0 + 1.0 / math.sqrt(2.0))
        assert float(loss) == pytest.approx(expected, abs=1e-6)
        # l2: mean elementwise squared error per stage, summed.
        loss2, _ = alignment_loss(a, b, "l2")
        assert float(loss2) == pytest.approx((1 + 1) / 2 + (0 + 1) / 2, abs=1e-6)
        loss1, _ = alignment_loss(a, b, "l1")
        assert float(loss1) == pytest.approx((1 + 1) / 2 + (0 + 1) / 2, abs=1e-6)

    def test_dead_vector_contributes_zero(self):
        a = [torch.zeros(1, 3, 2, 2)]
        b = [torch.ones(1, 3, 2, 2)]
        loss, sims = alignment_loss(a, b, "cosine")
        assert float(loss) == 0.0 and sims == [0.0]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            alignment_loss([torch.zeros(1, 2, 2, 2)], [torch.zeros(1, 3, 2, 2)])
        with pytest.raises(ValueError):
            alignment_loss([torch.zeros(1, 2, 2, 2)], [])

    def test_stage_weights(self):
        gen = torch.Generator().manual_seed(2)
        a = _rand_stack(gen)
        b = _rand_stack(gen)
        base, sims = alignment_loss(a, b, "cosine")
        weighted, _ = alignment_loss(a, b, "cosine", stage_weights=[2.0, 0.0])
        assert float(weighted) == pytest.approx(-2.0 * sims[0], abs=1e-6)

    def test_accepts_feature_stacks(self):
        v = torch.randn(3, 4, 4)
        stack = FeatureStack(entries=[(0, v)])
        loss, _ = alignment_loss(stack, FeatureStack(entries=[(0, v.clone())]))
        assert float(loss) == -1.0


class TestGradients:
    @pytest.mark.parametrize("metric", ["cosine", "l2", "l1"])
    @pytest.mark.parametrize("use_heads", [True, False])
    def test_finite_difference(self, metric, use_heads):
        """Analytic gradients vs central finite differences at float64,
        >= 20 random scalar parameters, relative error < 1e-4."""
        gen = torch.Generator().manual_seed(7)
        stages = ((4, 3), (6, 2))
        taps = _rand_stack(gen, stages=stages, dtype=torch.float64)
        teacher = _rand_stack(gen, stages=stages, dtype=torch.float64)
        if use_heads:
            with torch.random.fork_rng():
                torch.manual_seed(8)
                heads = ProjectionHeads([4, 6], t_dim=16).double()
            # Zero-initialized layers would make some finite differences 0/0;
            # perturb every parameter so all gradients are generic.
            with torch.no_grad():
                for p in heads.parameters():
                    p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
            params = list(heads.parameters())

            def loss_fn():
                out = heads(taps, 3)
                return alignment_loss(out, teacher, metric)[0]
        else:
            params = [t.requires_grad_(True) for t in taps]

            def loss_fn():
                return alignment_loss(taps, teacher, metric)[0]

        loss = loss_fn()
        grads = torch.autograd.grad(loss, params)
        rng = np.random.default_rng(11)
        flat = [(p, i) for p in range(len(params)) for i in range(params[p].numel())]
        picks = rng.choice(len(flat), size=24, replace=False)
        h = 1e-4
        for pick in picks:
            pi, idx = flat[pick]
            p = params[pi]
            with torch.no_grad():
                orig = p.view(-1)[idx].item()
                p.view(-1)[idx] = orig + h
                lp = float(loss_fn())
                p.view(-1)[idx] = orig - h
                lm = float(loss_fn())
                p.view(-1)[idx] = orig
            fd = (lp - lm) / (2 * h)
            analytic = float(grads[pi].reshape(-1)[idx])
            denom = max(abs(fd), abs(analytic), 1e-8)
            assert abs(fd - analytic) / denom < 1e-4, (
                f"{metric} heads={use_heads} param {pi}[{idx}]: fd={fd} grad={analytic}"
            )


class TestHeads:
    def test_point_wise_permutation_equivariance(self, unit_heads):
        gen = torch.Generator().manual_seed(3)
        cfg_channels = unit_heads.stage_channels
        taps = [torch.randn(1, c, 4, 4, generator=gen) for c in cfg_channels]
        perm = torch.randperm(16, generator=gen)
        out = unit_heads(taps, 5)
        permuted_in = [t.reshape(1, t.shape[1], -1)[:, :, perm].reshape(t.shape) for t in taps]
        out_perm = unit_heads(permuted_in, 5)
        for o, op in zip(out, out_perm):
            expected = o.reshape(1, o.shape[1], -1)[:, :, perm].reshape(o.shape)
            assert torch.allclose(op, expected, atol=1e-6)

    def test_identity_at_init(self):
        with torch.random.fork_rng():
            torch.manual_seed(0)
            heads = ProjectionHeads([4], t_dim=16)
        gen = torch.Generator().manual_seed(1)
        tap = torch.randn(2, 4, 3, 3, generator=gen)
        out = heads([tap], 7)
        # Zero-init output conv and conditioning => exact residual identity.
        assert torch.equal(out[0], tap)

    def test_shape_preserved_all_variants(self):
        gen = torch.Generator().manual_seed(2)
        tap = torch.randn(1, 6, 4, 4, generator=gen)
        for cond in ("film", "adarms"):
            for gate in ("swiglu", "swish"):
                with torch.random.fork_rng():
                    torch.manual_seed(0)
                    heads = ProjectionHeads([6], t_dim=16, conditioning=cond, gating=gate)
                out = heads([tap], 3)
                assert out[0].shape == tap.shape

    def test_width_mismatch_rejected(self, unit_heads):
        bad = [torch.zeros(1, 3, 2, 2)] * len(unit_heads.stage_channels)
        with pytest.raises(ValueError):
            unit_heads(bad, 0)
        with pytest.raises(ValueError):
            unit_heads([], 0)

    def test_project_features_provenance(self, unit_teacher, unit_heads):
        from cleandift.backbone import extract_stack

        stack = extract_stack(unit_teacher, torch.randn(3, 16, 16), 0)
        out = project_features(unit_heads, stack, 9)
        assert out.provenance["projected_at_t"] == 9
        assert [v.shape for v in out.tensors()] == [v.shape for v in stack.tensors()]

    def test_save_load_round_trip(self, unit_heads, tmp_path):
        path = str(tmp_path / "heads.ckpt")
        save_heads(path, unit_heads)
        loaded = load_heads(path)
        assert param_checksum(loaded) == param_checksum(unit_heads)
        assert loaded.conditioning == unit_heads.conditioning


class TestStudentInit:
    def test_copy_semantics(self, unit_teacher):
        student = init_student_from_teacher(unit_teacher)
        assert param_checksum(student) == param_checksum(unit_teacher)
        assert student.role == "student_trainable"
        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            _, a = unit_teacher(x, STUDENT_TIMESTEP, want_features=True)
            _, b = student(x, STUDENT_TIMESTEP, want_features=True)
        for ta, tb in zip(a, b):
            assert torch.equal(ta, tb)

    def test_mutation_independence(self, unit_teacher):
        student = init_student_from_teacher(unit_teacher)
        before = param_checksum(unit_teacher)
        with torch.no_grad():
            next(student.parameters()).add_(1.0)
        assert param_checksum(unit_teacher) == before

    def test_requires_frozen_teacher(self, unit_teacher):
        student = init_student_from_teacher(unit_teacher)
        with pytest.raises(ValueError):
            init_student_from_teacher(student)


def _quick_cfg(**kw):
    base = dict(steps=3, batch_size=2, warmup_steps=2, bins=2, head_pretrain_steps=2)
    base.update(kw)
    return AlignmentConfig(**base)


class TestDistillation:
    def test_zero_steps_noop(self, unit_teacher, unit_schedule, unit_images):
        student = init_student_from_teacher(unit_teacher)
        heads = init_heads(unit_teacher, AlignmentConfig(), seed=0)
        before = param_checksum(student)
        student, heads, log = run_distillation(
            unit_teacher, student, heads, unit_images, unit_schedule,
            _quick_cfg(steps=0), seed=0,
        )
        assert param_checksum(student) == before
        assert log.losses == []

    def test_teacher_immutable_and_log_shape(self, unit_teacher, unit_schedule, unit_images):
        before = param_checksum(unit_teacher)
        student = init_student_from_teacher(unit_teacher)
        heads = init_heads(unit_teacher, AlignmentConfig(), seed=0)
        _, _, log = run_distillation(
            unit_teacher, student, heads, unit_images, unit_schedule,
            _quick_cfg(), seed=0, heldout=unit_images[:2],
        )
        assert param_checksum(unit_teacher) == before
        assert len(log.losses) == 3
        assert len(log.stage_sims[0]) == unit_teacher.config.num_taps
        assert len(log.bin_sims_start) == 2 and len(log.bin_sims_end) == 2

    def test_reproducible(self, unit_teacher, unit_schedule, unit_images):
        sums = []
        for _ in range(2):
            student = init_student_from_teacher(unit_teacher)
            heads = init_heads(unit_teacher, AlignmentConfig(), seed=1)
            student, heads, _ = run_distillation(
                unit_teacher, student, heads, unit_images, unit_schedule,
                _quick_cfg(), seed=4,
            )
            sums.append((param_checksum(student), param_checksum(heads)))
        assert sums[0] == sums[1]

    def test_heads_off_means_no_head_gradient(self, unit_teacher, unit_schedule, unit_images):
        student = init_student_from_teacher(unit_teacher)
        heads = init_heads(unit_teacher, AlignmentConfig(), seed=2)
        head_before = param_checksum(heads)
        student_before = param_checksum(student)
        run_distillation(
            unit_teacher, student, heads, unit_images, unit_schedule,
            _quick_cfg(use_heads=False), seed=0,
        )
        assert param_checksum(heads) == head_before
        assert param_checksum(student) != student_before

    def test_pretrain_freezes_student(self, unit_teacher, unit_schedule, unit_images):
        student = init_student_from_teacher(unit_teacher)
        heads = init_heads(unit_teacher, AlignmentConfig(), seed=3)
        before = param_checksum(student)
        pretrain_heads(
            unit_teacher, student, heads, unit_images, unit_schedule,
            _quick_cfg(), seed=0,
        )
        assert param_checksum(student) == before

    def test_frozen_after_pretrain_head_checksum_constant(
        self, unit_teacher, unit_schedule, unit_images
    ):
        student = init_student_from_teacher(unit_teacher)
        heads = init_heads(unit_teacher, AlignmentConfig(), seed=4)
        cfg = _quick_cfg(head_pretraining="frozen_after_pretrain")
        # Pretraining itself updates heads; capture the checksum right after
        # by running the same pretraining separately.
        import copy

        heads_ref = copy.deepcopy(heads)
        student_ref = init_student_from_teacher(unit_teacher)
        pretrain_heads(
            unit_teacher, student_ref, heads_ref, unit_images, unit_schedule, cfg,
            seed=0 + 7919,
        )
        run_distillation(
            unit_teacher, student, heads, unit_images, unit_schedule, cfg, seed=0,
        )
        assert param_checksum(heads) == param_checksum(heads_ref)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            _quick_cfg(metric="dot").validate()
        with pytest.raises(ValueError):
            _quick_cfg(learning_rate=0.0).validate()
        with pytest.raises(ValueError):
            _quick_cfg(head_conditioning="nope").validate()

    def test_heldout_bin_similarity_shape(self, unit_teacher, unit_schedule, unit_images):
        student = init_student_from_teacher(unit_teacher)
        heads = init_heads(unit_teacher, AlignmentConfig(), seed=0)
        sims = heldout_bin_similarity(
            unit_teacher, student, heads, unit_images[:2], unit_schedule, bins=3
        )
        assert len(sims) == 3
        assert all(-1.0 <= s <= 1.0 for s in sims)

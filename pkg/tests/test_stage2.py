"""Stage II: binning, calendar encodings, mask plans, transformer branches,
the reconstruction objective, and training."""

import numpy as np
import pytest
import torch

from hiersig.config import WEEK_BINS
from hiersig.temporal_encoder import (BinSequence, MaskPlan, Stage2Config,
                                      WeekModel, apply_pe, bin_embeddings,
                                      embed_week, load_stage2,
                                      reconstruction_loss, sample_mask_plan,
                                      save_stage2, train_stage2)
from hiersig.timeutil import (DAY_SECONDS, WEEK_SECONDS, bin_calendar,
                              calendar_indices, week_start_for)

D = 8


def tiny_cfg(**kw):
    base = dict(model_dim=D, encoder_layers=2, decoder_layers=1, heads=2,
                mlp_dim=16, n_ctx=8, patch_sizes=(1, 2, 4), iterations=30,
                batch_size=2, lr=1e-3, warmup_frac=0.125, weight_decay=0.0,
                holdout_weeks=2, eval_every=10, in_dim=D, n_bins=32)
    base.update(kw)
    return Stage2Config(**base)


def random_weeks(rng, n=8, d=D, n_bins=WEEK_BINS, missing_frac=0.4):
    weeks = []
    for i in range(n):
        values = rng.standard_normal((n_bins, d)).astype(np.float32)
        missing = rng.random(n_bins) < missing_frac
        values[missing] = 0.0
        weeks.append(BinSequence(f"S{i:03d}", 0, 0, values, missing,
                                 (~missing).astype(np.int64)))
    return weeks


class TestBinEmbeddings:
    def test_perfect_cadence_fills_every_bin(self):
        d = 4
        ts = np.arange(40320, dtype=np.int64) * 15
        vecs = np.ones((40320, d))
        seq, outside = bin_embeddings(ts, vecs, "s", week_start=0)
        assert seq.values.shape == (2016, d)
        assert not seq.missing.any()
        assert np.all(seq.counts == 20)
        assert outside == 0

    def test_empty_stream_all_missing(self):
        seq, _ = bin_embeddings(np.zeros(0, np.int64), np.zeros((0, 3)), "s", 0)
        assert seq.missing.all()

    def test_bin_mean(self):
        u = np.array([1.0, -2.0, 0.5])
        seq, _ = bin_embeddings(np.array([0, 100], dtype=np.int64),
                                np.stack([u, 3 * u]), "s", 0)
        np.testing.assert_allclose(seq.values[0], 2 * u, atol=1e-7)

    def test_outside_week_counted(self):
        ts = np.array([-10, 5, WEEK_SECONDS + 3], dtype=np.int64)
        seq, outside = bin_embeddings(ts, np.ones((3, 2)), "s", 0)
        assert outside == 2
        assert seq.counts.sum() == 1

    def test_anchor_spacing(self):
        seq, _ = bin_embeddings(np.zeros(0, np.int64), np.zeros((0, 2)), "s",
                                week_start=1704067200 + 300 * 60)
        anchors = seq.anchors()
        assert np.all(np.diff(anchors) == 300)


class TestCalendarIndices:
    # 2024-01-01 was a Monday; UTC epoch of local midnight at offset 0:
    MONDAY = 1704067200

    def test_origin(self):
        assert calendar_indices(self.MONDAY, 0) == (1, 1)

    def test_boundaries(self):
        assert calendar_indices(self.MONDAY + 300, 0) == (1, 2)
        sunday_2355 = self.MONDAY + 7 * DAY_SECONDS - 300
        assert calendar_indices(sunday_2355, 0) == (7, 288)

    def test_weekly_periodicity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            t = int(rng.integers(0, 2_000_000_000))
            tz = int(rng.choice([-720, -300, 0, 120, 660]))
            assert calendar_indices(t, tz) == calendar_indices(t + 7 * DAY_SECONDS, tz)

    def test_timezone_shifts_local_slot(self):
        assert calendar_indices(self.MONDAY, -300) != calendar_indices(self.MONDAY, 0)
        assert calendar_indices(self.MONDAY + 300 * 60, -300) == (1, 1)

    def test_week_start_is_monday_midnight(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            t = int(rng.integers(0, 2_000_000_000))
            tz = int(rng.choice([-300, 0, 480]))
            ws = week_start_for(t, tz)
            assert calendar_indices(ws, tz) == (1, 1)
            assert ws <= t < ws + WEEK_SECONDS

    def test_bin_calendar_matches_anchor_arithmetic(self):
        ws = week_start_for(self.MONDAY + 12345, 0)
        for t in (0, 1, 287, 288, 2015):
            anchor = ws + 300 * t
            assert bin_calendar(t) == calendar_indices(anchor, 0)


class TestApplyPE:
    def test_zero_tables_identity(self):
        from hiersig.temporal_encoder import FactorizedPE

        pe = FactorizedPE(4)
        with torch.no_grad():
            pe.dow.zero_()
            pe.tod.zero_()
        x = torch.randn(10, 4)
        out = apply_pe(x, pe, torch.zeros(10, dtype=torch.long),
                       torch.arange(10))
        assert torch.equal(out, x)

    def test_delta_is_exact_table_lookup(self):
        """With zero-valued bins the added encoding is bitwise the row sum."""
        from hiersig.temporal_encoder import FactorizedPE

        torch.manual_seed(0)
        pe = FactorizedPE(6)
        rng = np.random.default_rng(2)
        for _ in range(100):
            t = int(rng.integers(0, 2_000_000_000))
            tz = int(rng.choice([-300, 0, 60]))
            dow, tod = calendar_indices(t, tz)
            x = torch.zeros(1, 6)
            out = apply_pe(x, pe, torch.tensor([dow - 1]), torch.tensor([tod - 1]))
            want = (pe.dow[dow - 1] + pe.tod[tod - 1]).detach()
            assert torch.equal(out.squeeze(0).detach(), want)

    def test_same_calendar_slot_across_weeks(self):
        """Two sequences anchored on different days share PE at equal slots."""
        from hiersig.temporal_encoder import FactorizedPE

        torch.manual_seed(1)
        pe = FactorizedPE(4)
        monday = 1704067200
        wednesday = monday + 2 * DAY_SECONDS
        d1, t1 = calendar_indices(monday + 5 * 300, 0)
        d2, t2 = calendar_indices(wednesday + 5 * 300 - 2 * DAY_SECONDS, 0)
        assert (d1, t1) == (d2, t2)
        a = apply_pe(torch.zeros(1, 4), pe, torch.tensor([d1 - 1]), torch.tensor([t1 - 1]))
        b = apply_pe(torch.zeros(1, 4), pe, torch.tensor([d2 - 1]), torch.tensor([t2 - 1]))
        assert torch.equal(a, b)


class TestMaskPlan:
    def test_forced_counts(self):
        rng = np.random.default_rng(0)
        plan = sample_mask_plan(rng, 2016, 252, (4,))
        assert plan.patch == 4
        assert plan.context.size == 252
        assert plan.targets.size == 1764
        assert 252 / 2016 == pytest.approx(0.125)

    def test_partition_invariants(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            plan = sample_mask_plan(rng, 2016, 252)
            both = np.concatenate([plan.context, plan.targets])
            assert np.array_equal(np.sort(both), np.arange(2016))
            assert np.intersect1d(plan.context, plan.targets).size == 0
            # context is a union of aligned patches of length P
            starts = plan.context[::plan.patch]
            assert np.all(starts % plan.patch == 0)
            expanded = (starts[:, None] + np.arange(plan.patch)).ravel()
            assert np.array_equal(expanded, plan.context)

    def test_monte_carlo_uniformity(self):
        rng = np.random.default_rng(2)
        n = 20000
        m, n_ctx = 2016, 252
        patch_counts = {1: 0, 2: 0, 4: 0}
        inclusion = np.zeros(m)
        for _ in range(n):
            plan = sample_mask_plan(rng, m, n_ctx)
            patch_counts[plan.patch] += 1
            inclusion[plan.context] += 1
        for p, c in patch_counts.items():
            assert abs(c / n - 1 / 3) < 0.01, (p, c / n)
        freq = inclusion / n
        assert np.all(np.abs(freq - n_ctx / m) < 0.01)

    def test_indivisible_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            sample_mask_plan(rng, 2016, 250, (4,))
        with pytest.raises(ValueError):
            sample_mask_plan(rng, 2016, 2016)


def zero_residual_branches(model: WeekModel) -> None:
    """Zero every residual-branch output projection so blocks become identity."""
    with torch.no_grad():
        for blocks in (model.encoder,
                       getattr(model, "local_decoder", []),
                       getattr(model, "global_decoder", [])):
            for b in blocks:
                b.proj.weight.zero_()
                b.proj.bias.zero_()
                b.mlp[2].weight.zero_()
                b.mlp[2].bias.zero_()


class TestEncoder:
    def test_permutation_equivariance_without_pe(self):
        torch.manual_seed(0)
        model = WeekModel(tiny_cfg())
        model.eval()
        x = torch.randn(1, 12, D)
        perm = torch.randperm(12)
        with torch.no_grad():
            h, _ = model.encode(x)
            hp, _ = model.encode(x[:, perm])
        np.testing.assert_allclose(hp.numpy(), h[:, perm].numpy(), atol=1e-6)

    def test_identity_degenerate_config(self):
        torch.manual_seed(1)
        model = WeekModel(tiny_cfg(encoder_layers=1))
        zero_residual_branches(model)
        x = torch.randn(2, 10, D)
        with torch.no_grad():
            h, _ = model.encode(x)
        np.testing.assert_allclose(h.numpy(), x.numpy(), atol=1e-5)

    def test_pooled_week_vector_is_mean(self):
        torch.manual_seed(2)
        model = WeekModel(tiny_cfg())
        x = torch.randn(3, 9, D)
        with torch.no_grad():
            h, z = model.encode(x)
        np.testing.assert_allclose(z.numpy(), h.mean(dim=1).numpy(), atol=1e-6)

    def test_learnable_week_token(self):
        torch.manual_seed(3)
        model = WeekModel(tiny_cfg(week_token="learnable"))
        x = torch.randn(2, 9, D)
        with torch.no_grad():
            h, z = model.encode(x)
        assert h.shape == (2, 9, D)
        assert not torch.allclose(z, h.mean(dim=1))


class TestDecoders:
    def test_local_duplicate_queries_identical_rows(self):
        torch.manual_seed(0)
        model = WeekModel(tiny_cfg())
        ctx = torch.randn(1, 8, D)
        pe_row = torch.randn(1, 1, D)
        queries = pe_row.repeat(1, 5, 1)
        with torch.no_grad():
            out = model.decode_local(ctx, queries)
        for j in range(1, 5):
            np.testing.assert_allclose(out[0, j].numpy(), out[0, 0].numpy(),
                                       atol=1e-6)

    def test_local_zero_everything_is_zero(self):
        model = WeekModel(tiny_cfg())
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            out = model.decode_local(torch.zeros(1, 8, D), torch.zeros(1, 5, D))
        assert torch.all(out == 0.0)

    def test_local_shape_contract(self):
        model = WeekModel(tiny_cfg())
        with torch.no_grad():
            out = model.decode_local(torch.randn(2, 252, D), torch.randn(2, 1764, D))
        assert out.shape == (2, 1764, D)

    def test_global_bottleneck(self):
        """Equal pooled vectors give identical reconstructions regardless of
        which context produced them."""
        torch.manual_seed(1)
        model = WeekModel(tiny_cfg())
        z = torch.randn(1, D)
        pe = torch.randn(1, 6, D)
        with torch.no_grad():
            a = model.decode_global(z, pe)
            b = model.decode_global(z.clone(), pe)
        assert torch.equal(a, b)

    def test_global_bottleneck_via_duplicated_rows(self):
        torch.manual_seed(4)
        cfg = tiny_cfg()
        model = WeekModel(cfg)
        model.eval()
        with torch.no_grad():
            model.pe.dow.zero_()
            model.pe.tod.zero_()
        rows = torch.randn(1, 4, D)
        ctx_a = torch.cat([rows, rows], dim=1)
        perm = torch.randperm(8)
        ctx_b = ctx_a[:, perm]
        pe = torch.randn(1, 5, D)
        with torch.no_grad():
            _, za = model.encode(ctx_a)
            _, zb = model.encode(ctx_b)
            out_a = model.decode_global(za, pe)
            out_b = model.decode_global(zb, pe)
        np.testing.assert_allclose(out_a.numpy(), out_b.numpy(), atol=1e-5)

    def test_global_zero_everything_is_zero(self):
        model = WeekModel(tiny_cfg())
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            out = model.decode_global(torch.zeros(2, D), torch.zeros(2, 7, D))
        assert torch.all(out == 0.0)


class TestReconstructionLoss:
    def test_perfect_reconstruction(self):
        t = torch.randn(5, D, dtype=torch.float64)
        loss = reconstruction_loss(t, t.clone(), t.clone(), torch.ones(5, dtype=torch.bool))
        assert float(loss) == 0.0

    def test_plus_one_closed_form(self):
        rng = np.random.default_rng(0)
        for d, m in ((3, 4), (8, 16), (5, 1)):
            t = torch.as_tensor(rng.standard_normal((m, d)))
            loss = reconstruction_loss(t, t + 1.0, t + 1.0,
                                       torch.ones(m, dtype=torch.bool))
            assert float(loss) == pytest.approx(2.0, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            d = int(rng.integers(1, 9))
            m = int(rng.integers(1, 17))
            t = rng.standard_normal((m, d))
            pl = rng.standard_normal((m, d))
            pg = rng.standard_normal((m, d))
            mask = rng.random(m) < 0.7
            if not mask.any():
                mask[0] = True
            m_hat = int(mask.sum())
            want = 0.0
            for sel, pred in ((mask, pl), (mask, pg)):
                acc = 0.0
                for i in np.flatnonzero(sel):
                    acc += float(np.sum((t[i] - pred[i]) ** 2))
                want += acc / (d * m_hat)
            got = reconstruction_loss(torch.as_tensor(t), torch.as_tensor(pl),
                                      torch.as_tensor(pg), torch.as_tensor(mask))
            assert float(got) == pytest.approx(want, abs=1e-8)

    def test_disabled_branch_contributes_zero(self):
        t = torch.randn(4, D, dtype=torch.float64)
        only_local = reconstruction_loss(t, t + 1.0, None,
                                         torch.ones(4, dtype=torch.bool))
        assert float(only_local) == pytest.approx(1.0, abs=1e-12)

    def test_empty_target_set_skipped(self):
        t = torch.randn(4, D)
        out = reconstruction_loss(t, t, t, torch.zeros(4, dtype=torch.bool))
        assert out is None


class TestTraining:
    def _weeks(self, rng, n=10):
        """Weeks with calendar-dependent structure so masking is learnable."""
        weeks = []
        base = rng.standard_normal(D).astype(np.float32)
        for i in range(n):
            t = np.arange(32)
            phase = 2 * np.pi * t / 16.0
            values = (base[None, :] * np.cos(phase)[:, None]
                      + 0.05 * rng.standard_normal((32, D))).astype(np.float32)
            missing = rng.random(32) < 0.2
            values[missing] = 0.0
            weeks.append(BinSequence(f"S{i:03d}", 0, 0, values, missing,
                                     (~missing).astype(np.int64)))
        return weeks

    def test_loss_drops(self):
        rng = np.random.default_rng(0)
        weeks = self._weeks(rng)
        cfg = tiny_cfg(iterations=120, eval_every=40, lr=3e-3)
        model, log = train_stage2(weeks, cfg, master_seed=5)
        assert log[-1]["eval_loss"] < log[0]["eval_loss"] * 0.7

    def test_branch_logging_contract(self):
        rng = np.random.default_rng(1)
        weeks = self._weeks(rng)
        _, log_dual = train_stage2(weeks, tiny_cfg(iterations=10, eval_every=10),
                                   master_seed=6)
        assert log_dual[-1]["eval_local"] is not None
        assert log_dual[-1]["eval_global"] is not None
        _, log_local = train_stage2(
            weeks, tiny_cfg(iterations=10, eval_every=10, global_branch=False),
            master_seed=6)
        assert log_local[-1]["eval_local"] is not None
        assert log_local[-1]["eval_global"] is None

    def test_ablated_checkpoint_lacks_global_tensors(self, tmp_path):
        rng = np.random.default_rng(2)
        weeks = self._weeks(rng)
        cfg = tiny_cfg(iterations=5, eval_every=5, global_branch=False)
        model, _ = train_stage2(weeks, cfg, master_seed=7)
        save_stage2(tmp_path / "ck.ck1", model, "cd" * 16, 5)
        from hiersig.shards import read_checkpoint

        _, tensors = read_checkpoint(tmp_path / "ck.ck1")
        assert not any(k.startswith("global_decoder") for k in tensors)
        assert any(k.startswith("local_decoder") for k in tensors)

    def test_resume_continues(self):
        rng = np.random.default_rng(3)
        weeks = self._weeks(rng)
        cfg = tiny_cfg(iterations=20, eval_every=10)
        model, log = train_stage2(weeks, cfg, master_seed=8)
        state = {"state_dict": model.state_dict(), "step": 20}
        cfg2 = tiny_cfg(iterations=30, eval_every=10)
        _, log2 = train_stage2(weeks, cfg2, master_seed=8, resume_state=state)
        assert log2[0]["step"] == 20
        assert log2[0]["eval_loss"] == pytest.approx(log[-1]["eval_loss"], rel=1e-5)

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        weeks = self._weeks(rng)
        cfg = tiny_cfg(iterations=5, eval_every=5)
        model, _ = train_stage2(weeks, cfg, master_seed=9)
        save_stage2(tmp_path / "m.ck1", model, "ef" * 16, 5)
        loaded, meta = load_stage2(tmp_path / "m.ck1")
        assert meta["config"]["n_bins"] == 32
        v = torch.as_tensor(np.stack([weeks[0].values]))
        m = torch.as_tensor(np.stack([weeks[0].missing]))
        with torch.no_grad():
            za, _ = model.embed(v, m)
            zb, _ = loaded.embed(v, m)
        np.testing.assert_allclose(za.numpy(), zb.numpy(), atol=1e-6)


class TestEmbedWeek:
    def _model_and_week(self, missing_frac=0.3, seed=0):
        torch.manual_seed(seed)
        model = WeekModel(tiny_cfg(n_bins=WEEK_BINS))
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((WEEK_BINS, D)).astype(np.float32)
        missing = rng.random(WEEK_BINS) < missing_frac
        values[missing] = 0.0
        week = BinSequence("s", 0, 0, values, missing, (~missing).astype(np.int64))
        return model, week

    def test_deterministic(self):
        model, week = self._model_and_week()
        a = embed_week(model, week)
        b = embed_week(model, week)
        assert np.array_equal(a, b)
        assert a.shape == (D,)

    def test_all_missing_flagged(self):
        model, week = self._model_and_week()
        week.missing[:] = True
        assert embed_week(model, week) is None

    def test_missing_token_changes_masked_bins_only_through_token(self):
        model, week = self._model_and_week()
        a = embed_week(model, week)
        week2 = BinSequence(week.subject_id, 0, 0,
                            week.values + np.where(week.missing[:, None], 99.0, 0.0),
                            week.missing.copy(), week.counts.copy())
        b = embed_week(model, week2)
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestGradients:
    def test_finite_differences_tiny_config(self):
        """Analytic gradients of the dual-branch objective versus central
        differences on a reduced parameter sample (full sweep runs in the
        acceptance suite)."""
        torch.manual_seed(0)
        cfg = tiny_cfg()
        model = WeekModel(cfg).double()
        rng = np.random.default_rng(0)
        values = torch.as_tensor(rng.standard_normal((2, 32, D)))
        missing = torch.as_tensor(rng.random((2, 32)) < 0.3)
        plans = [sample_mask_plan(np.random.default_rng(i), 32, 8, (1, 2, 4))
                 for i in range(2)]

        def loss_value() -> float:
            with torch.no_grad():
                return float(model.forward_train(values, missing, plans)["loss"])

        model.zero_grad()
        out = model.forward_train(values, missing, plans)
        out["loss"].backward()
        eps = 1e-6
        rng2 = np.random.default_rng(1)
        for name, p in model.named_parameters():
            if p.grad is None:
                continue
            flat = p.data.view(-1)
            gflat = p.grad.view(-1)
            picks = rng2.choice(flat.numel(), size=min(4, flat.numel()),
                                replace=False)
            for j in picks:
                orig = float(flat[j])
                flat[j] = orig + eps
                lp = loss_value()
                flat[j] = orig - eps
                lm = loss_value()
                flat[j] = orig
                fd = (lp - lm) / (2 * eps)
                an = float(gflat[j])
                assert an == pytest.approx(fd, rel=1e-3, abs=1e-7), (name, j)

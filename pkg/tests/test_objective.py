import numpy as np
import pytest

from mvp_lab import autodiff as ad
from mvp_lab.aggregation import ContextualizedRegions, causal_targets
from mvp_lab.autodiff import Tensor
from mvp_lab.harness import finite_diff_gradcheck
from mvp_lab.objective import (cpc_loss, cpc_targets, cvrl_seq_loss, init_heads,
                               mvp_info_nce, predict_future, pretrain_region_accuracy,
                               similarity_matrix, single_clip_targets)


def info_nce_oracle(preds, targets, tau):
    """Literal double-loop enumeration of the region-contrastive loss."""
    b_n, n_p, r, d = preds.shape
    anchors = [(b, j, n) for b in range(b_n) for j in range(n_p) for n in range(r)]
    total = 0.0
    for (b, j, n) in anchors:
        zhat = preds[b, j, n]
        pos = np.exp(zhat @ targets[b, j, n] / tau)
        denom = sum(np.exp(zhat @ targets[b2, j2, n2] / tau) for (b2, j2, n2) in anchors)
        total += -np.log(pos / denom)
    return total


def two_view_oracle(za, zb, tau):
    b_n = za.shape[0]

    def one_direction(x, y):
        s = 0.0
        for b in range(b_n):
            logits = np.array([x[b] @ y[m] / tau for m in range(b_n)])
            s += -np.log(np.exp(logits[b]) / np.exp(logits).sum())
        return s / b_n

    return 0.5 * (one_direction(za, zb) + one_direction(zb, za))


def orthogonal_set(m, d, r=1.5):
    assert m <= d
    basis = np.linalg.qr(np.random.default_rng(0).standard_normal((d, d)))[0]
    return r * basis[:m]


class TestPredictFuture:
    def test_shape_contract(self):
        heads = init_heads(4, 64, 128, seed=0, dtype=np.float64)
        ctx = ContextualizedRegions(
            values=Tensor(np.random.default_rng(0).standard_normal((8, 2, 2, 64))),
            n_clips=4, l_per_clip=2)
        out = predict_future(ctx, heads)
        assert out.values.shape == (4, 8, 64)

    def test_zero_weights_give_zero_predictions(self):
        heads = init_heads(2, 8, 16, seed=0, dtype=np.float64)
        for h in heads.heads:
            for t in h.values():
                t.data[:] = 0.0
        ctx = ContextualizedRegions(
            values=Tensor(np.random.default_rng(1).standard_normal((4, 1, 2, 8))),
            n_clips=2, l_per_clip=2)
        np.testing.assert_array_equal(predict_future(ctx, heads).values.data, 0.0)

    def test_distinct_heads_give_distinct_outputs(self):
        heads = init_heads(3, 8, 16, seed=2, dtype=np.float64)
        ctx = ContextualizedRegions(
            values=Tensor(np.random.default_rng(3).standard_normal((4, 1, 2, 8))),
            n_clips=2, l_per_clip=2)
        out = predict_future(ctx, heads).values.data
        assert not np.allclose(out[0], out[1])
        assert not np.allclose(out[1], out[2])

    def test_uses_only_last_clip_entries(self):
        heads = init_heads(2, 8, 16, seed=4, dtype=np.float64)
        rng = np.random.default_rng(5)
        vals = rng.standard_normal((6, 1, 2, 8))
        base = predict_future(ContextualizedRegions(Tensor(vals), 3, 2), heads).values.data
        vals2 = vals.copy()
        vals2[:4] += 1.0  # earlier clips
        out = predict_future(ContextualizedRegions(Tensor(vals2), 3, 2), heads).values.data
        np.testing.assert_array_equal(base, out)

    def test_gradcheck(self):
        assert finite_diff_gradcheck("prediction_heads", seed=0) < 1e-4


class TestMvpInfoNCE:
    def test_uniform_similarity_closed_form(self):
        # identical features: every logit equal -> per-anchor loss ln(M)
        feat = np.ones((1, 1, 4, 3))
        report = mvp_info_nce(feat, feat, tau=0.7)
        assert report.anchor_count == 4
        assert abs(report.total - 4 * np.log(4)) < 1e-9
        assert abs(report.total - 5.5452) < 1e-3

    def test_orthogonal_targets_closed_form(self):
        r = 1.5
        m = 6
        z = orthogonal_set(m, 8, r=r).reshape(1, 2, 3, 8)
        report = mvp_info_nce(z, z, tau=1.0)
        expect = -np.log(np.exp(r * r) / (np.exp(r * r) + (m - 1)))
        assert abs(report.mean - expect) < 1e-9

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            preds = rng.standard_normal((2, 2, 4, 3))
            targets = rng.standard_normal((2, 2, 4, 3))
            report = mvp_info_nce(preds, targets, tau=0.5)
            want = info_nce_oracle(preds, targets, 0.5)
            assert abs(report.total - want) < 1e-9

    def test_normalized_matches_oracle_on_unit_vectors(self):
        rng = np.random.default_rng(1)
        preds = rng.standard_normal((1, 2, 3, 4))
        targets = rng.standard_normal((1, 2, 3, 4))
        pn = preds / np.linalg.norm(preds, axis=-1, keepdims=True)
        tn = targets / np.linalg.norm(targets, axis=-1, keepdims=True)
        a = mvp_info_nce(preds, targets, tau=0.3, normalize=True).total
        b = info_nce_oracle(pn, tn, 0.3)
        assert abs(a - b) < 1e-9

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(2)
        preds = rng.standard_normal((4, 2, 3, 5))
        targets = rng.standard_normal((4, 2, 3, 5))
        perm = np.array([3, 1, 0, 2])
        a = mvp_info_nce(preds, targets, tau=0.4).total
        b = mvp_info_nce(preds[perm], targets[perm], tau=0.4).total
        assert abs(a - b) < 1e-9

    def test_tau_scaling_equals_logit_scaling(self):
        rng = np.random.default_rng(3)
        preds = rng.standard_normal((2, 1, 3, 4))
        targets = rng.standard_normal((2, 1, 3, 4))
        c = 2.5
        a = mvp_info_nce(preds, targets, tau=c * 0.2).total
        b = mvp_info_nce(preds / c, targets, tau=0.2).total
        assert abs(a - b) < 1e-9

    def test_loss_nonnegative_and_per_horizon_reported(self):
        rng = np.random.default_rng(4)
        report = mvp_info_nce(rng.standard_normal((2, 3, 2, 4)),
                              rng.standard_normal((2, 3, 2, 4)), tau=0.5)
        assert report.total >= 0
        assert report.per_horizon.shape == (3,)
        assert abs(report.per_horizon.mean() - report.mean) < 1e-12

    def test_errors(self):
        x = np.ones((1, 1, 2, 3))
        with pytest.raises(ValueError, match="temperature"):
            mvp_info_nce(x, x, tau=0.0)
        bad = x.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            mvp_info_nce(bad, x, tau=1.0)
        with pytest.raises(ValueError, match="shape"):
            mvp_info_nce(x, np.ones((1, 1, 3, 3)), tau=1.0)

    def test_gradcheck(self):
        assert finite_diff_gradcheck("mvp_info_nce", seed=0) < 1e-4

    def test_stop_gradient_blocks_target_grads(self):
        rng = np.random.default_rng(5)
        fut = Tensor(rng.standard_normal((1, 4, 1, 2, 2, 3)), requires_grad=True)
        preds = Tensor(rng.standard_normal((1, 2, 4, 3)), requires_grad=True)
        stopped = causal_targets(fut, stride=2, stop_grad=True).values
        mvp_info_nce(preds, stopped, tau=0.5).loss.backward()
        assert fut.grad is None
        assert preds.grad is not None
        live = causal_targets(fut, stride=2, stop_grad=False).values
        mvp_info_nce(preds, live, tau=0.5).loss.backward()
        assert fut.grad is not None and np.abs(fut.grad).sum() > 0


class TestPretrainRegionAccuracy:
    def test_orthogonal_equal_norm_targets_score_one(self):
        z = orthogonal_set(6, 8).reshape(1, 2, 3, 8)
        assert pretrain_region_accuracy(z, z) == 1.0

    def test_identical_features_score_zero(self):
        z = np.ones((1, 1, 4, 3))
        assert pretrain_region_accuracy(z, z) == 0.0  # ties lose

    def test_matches_argmax_oracle(self):
        rng = np.random.default_rng(6)
        preds = rng.standard_normal((2, 2, 3, 4))
        targets = rng.standard_normal((2, 2, 3, 4))
        sims = similarity_matrix(preds, targets)
        m = sims.shape[0]
        correct = 0
        for i in range(m):
            best = max(range(m), key=lambda j: (sims[i, j], j == i))
            strict = all(sims[i, i] > sims[i, j] for j in range(m) if j != i)
            correct += strict and best == i
        assert pretrain_region_accuracy(preds, targets) == correct / m

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(7)
        sims = rng.standard_normal((10, 10))
        from mvp_lab.objective import accuracy_from_similarities
        a = accuracy_from_similarities(sims)
        b = accuracy_from_similarities(np.exp(3 * sims) + 5)
        assert a == b


class TestCvrlSeqLoss:
    def test_closed_form_two_orthogonal_videos(self):
        r = 1.2
        z = orthogonal_set(2, 4, r=r)
        loss = float(cvrl_seq_loss(z, z.copy(), tau=1.0).data)
        expect = -np.log(np.exp(r * r) / (np.exp(r * r) + 1))
        assert abs(loss - expect) < 1e-9

    def test_batch_shuffle_invariance(self):
        rng = np.random.default_rng(8)
        za, zb = rng.standard_normal((2, 5, 6))
        perm = np.array([4, 2, 0, 3, 1])
        a = float(cvrl_seq_loss(za, zb, tau=0.5).data)
        b = float(cvrl_seq_loss(za[perm], zb[perm], tau=0.5).data)
        assert abs(a - b) < 1e-9

    def test_matches_oracle(self):
        rng = np.random.default_rng(9)
        za, zb = rng.standard_normal((2, 4, 5))
        got = float(cvrl_seq_loss(za, zb, tau=0.7).data)
        assert abs(got - two_view_oracle(za, zb, 0.7)) < 1e-9

    def test_needs_two_items(self):
        with pytest.raises(ValueError, match=">= 2"):
            cvrl_seq_loss(np.ones((1, 4)), np.ones((1, 4)), tau=1.0)

    def test_gradcheck(self):
        assert finite_diff_gradcheck("cvrl_seq_loss", seed=0) < 1e-4


class TestCpcLoss:
    def _ctx_and_heads(self, rng, n_p, d=6):
        heads = init_heads(n_p, d, 2 * d, seed=0, dtype=np.float64)
        vals = Tensor(rng.standard_normal((4, 1, 2, d)))
        return ContextualizedRegions(vals, n_clips=2, l_per_clip=2), heads

    def test_single_future_clip_equals_mvp_first_horizon(self):
        rng = np.random.default_rng(10)
        ctx, heads = self._ctx_and_heads(rng, n_p=1)
        fut = rng.standard_normal((1, 1, 1, 1, 2, 6))
        a = cpc_loss(ctx, fut, heads, tau=0.5).total
        preds = predict_future(ctx, heads)
        mvp_targets = causal_targets(fut, stride=1).values
        b = mvp_info_nce(preds, mvp_targets, tau=0.5).total
        assert abs(a - b) < 1e-12

    def test_uniform_similarity_closed_form(self):
        heads = init_heads(1, 3, 6, seed=1, dtype=np.float64)
        for h in heads.heads:
            for t in h.values():
                t.data[:] = 0.0
        ctx = ContextualizedRegions(Tensor(np.ones((2, 1, 2, 3))), 1, 2)
        fut = np.zeros((1, 1, 1, 1, 4, 3))  # all-zero targets: uniform logits
        report = cpc_loss(ctx, fut, heads, tau=1.0)
        assert abs(report.total - report.anchor_count * np.log(report.anchor_count)) < 1e-9

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(11)
        ctx, heads = self._ctx_and_heads(rng, n_p=2)
        fut = rng.standard_normal((1, 3, 1, 2, 2, 6))
        got = cpc_loss(ctx, fut, heads, tau=0.4).total
        preds = predict_future(ctx, heads).values.data[None]
        targets = cpc_targets(fut, 2)
        assert abs(got - info_nce_oracle(preds, targets, 0.4)) < 1e-9

    def test_requires_enough_future_clips(self):
        rng = np.random.default_rng(12)
        ctx, heads = self._ctx_and_heads(rng, n_p=4)
        with pytest.raises(ValueError, match="future clips"):
            cpc_loss(ctx, rng.standard_normal((1, 2, 1, 2, 2, 6)), heads, tau=0.5)

    def test_gradcheck(self):
        assert finite_diff_gradcheck("cpc_loss", seed=0) < 1e-4


class TestSingleClipTargets:
    def test_positions_and_shape(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 8, 1, 2, 2, 3))
        t = single_clip_targets(x, stride=2)
        assert t.shape == (2, 4, 4, 3)
        np.testing.assert_array_equal(t[:, 0], x[:, 1].reshape(2, 4, 3))
        np.testing.assert_array_equal(t[:, 3], x[:, 7].reshape(2, 4, 3))

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="stride must divide"):
            single_clip_targets(np.zeros((1, 8, 1, 1, 1, 2)), stride=3)

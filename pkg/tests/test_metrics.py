from itertools import combinations, permutations

import numpy as np
import pytest
import torch

from relmotion import metrics as mt


def brute_force_ari(a, b):
    """Pair-counting definition of the adjusted Rand index."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    n = len(a)
    ss = sd = ds = dd = 0
    for i, j in combinations(range(n), 2):
        same_a = a[i] == a[j]
        same_b = b[i] == b[j]
        ss += same_a and same_b
        sd += same_a and not same_b
        ds += not same_a and same_b
        dd += not (same_a or same_b)
    total = ss + sd + ds + dd
    expected = (ss + sd) * (ss + ds) / total
    max_index = ((ss + sd) + (ss + ds)) / 2.0
    if max_index == expected:
        return 1.0
    return (ss - expected) / (max_index - expected)


def brute_force_spearman(a, b):
    """Rank via pairwise counting, then Pearson on the ranks."""
    def ranks(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(len(x))
        for i in range(len(x)):
            less = np.sum(x < x[i])
            equal = np.sum(x == x[i])
            out[i] = less + (equal + 1) / 2.0
        return out

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)))


class TestARI:
    def test_perfect_match(self):
        gt = np.zeros((2, 8, 8), dtype=bool)
        gt[0, 1:4, 1:4] = True
        gt[1, 5:7, 5:7] = True
        pred = np.zeros((3, 8, 8))
        pred[0][gt[0]] = 1.0
        pred[1][gt[1]] = 1.0
        pred[2] = 0.5 - pred[0] - pred[1] + 0.5  # background slot wins elsewhere
        assert mt.foreground_ari(pred, gt) == pytest.approx(1.0)

    def test_single_slot_covers_two_objects(self):
        gt = np.zeros((2, 6, 6), dtype=bool)
        gt[0, 0:3, 0:3] = True
        gt[1, 3:6, 3:6] = True
        pred = np.zeros((2, 6, 6))
        pred[0] = 1.0  # everything in slot 0
        fg, labels = mt._gt_labels(gt)
        expected = brute_force_ari(labels[fg], np.zeros(fg.sum(), dtype=int))
        assert mt.foreground_ari(pred, gt) == pytest.approx(expected, abs=1e-12)

    def test_empty_foreground_returns_none(self):
        gt = np.zeros((2, 4, 4), dtype=bool)
        pred = np.random.default_rng(0).random((2, 4, 4))
        assert mt.foreground_ari(pred, gt) is None

    def test_matches_oracle_random_small(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = rng.integers(2, 13)
            a = rng.integers(0, 3, n)
            b = rng.integers(0, 3, n)
            mine = mt.ari_from_labels(a, b)
            oracle = brute_force_ari(a, b)
            assert mine == pytest.approx(oracle, abs=1e-12)

    def test_random_assignment_near_zero(self):
        rng = np.random.default_rng(2)
        vals = [mt.ari_from_labels(rng.integers(0, 2, 400), rng.integers(0, 2, 400))
                for _ in range(50)]
        assert abs(np.mean(vals)) < 0.05

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError, match="resolution"):
            mt.foreground_ari(np.zeros((2, 4, 4)), np.zeros((2, 8, 8), dtype=bool))


class TestMatchedIoU:
    def test_perfect(self):
        gt = np.zeros((2, 8, 8), dtype=bool)
        gt[0, :4, :4] = True
        gt[1, 4:, 4:] = True
        pred = np.zeros((3, 8, 8))
        pred[1][gt[0]] = 1.0
        pred[2][gt[1]] = 1.0
        pred[0] = 0.4
        iou, match = mt.matched_iou(pred, gt)
        assert np.allclose(iou, 1.0)
        assert match == (1, 2)

    def test_half_overlap_value(self):
        # |I| = a/2 and |U| = 3a/2 gives IoU = 1/3
        gt = np.zeros((1, 4, 8), dtype=bool)
        gt[0, :, 0:4] = True
        pred = np.zeros((2, 4, 8))
        pred[0][:, 2:6] = 1.0
        pred[1] = 1.0 - pred[0]
        iou, _ = mt.matched_iou(pred, gt)
        assert iou[0] == pytest.approx(1.0 / 3.0)

    def test_optimal_vs_enumeration(self):
        rng = np.random.default_rng(3)
        for k in (2, 3, 4):
            for _ in range(20):
                pred_soft = rng.random((k, 6, 6))
                gt = rng.random((2, 6, 6)) > 0.6
                if not gt.any():
                    continue
                iou, _ = mt.matched_iou(pred_soft, gt)
                # independent enumeration
                pred = pred_soft.argmax(axis=0)
                best = -1.0
                for perm in permutations(range(k), 2):
                    score = 0.0
                    for i, j in enumerate(perm):
                        pj = pred == j
                        union = (gt[i] | pj).sum()
                        score += (gt[i] & pj).sum() / union if union else 0.0
                    best = max(best, score)
                assert iou.sum() == pytest.approx(best, abs=1e-12)


class TestDegeneracy:
    def _gt(self):
        gt = np.zeros((2, 8, 8), dtype=bool)
        gt[0, 0:4, 0:4] = True
        gt[1, 4:8, 4:8] = True
        return gt

    def test_perfect_zero(self):
        gt = self._gt()
        pred = np.zeros((3, 8, 8))
        pred[0][gt[0]] = 1.0
        pred[1][gt[1]] = 1.0
        pred[2] = 0.5 - pred[0] - pred[1] + 0.4
        assert mt.degeneracy_rate([pred], [gt]) == 0.0

    def test_single_slot_everything(self):
        gt = self._gt()
        pred = np.zeros((3, 8, 8))
        pred[0] = 1.0
        assert mt.degeneracy_rate([pred] * 4, [gt] * 4) == 1.0

    def test_exactly_half_counts(self):
        gt = self._gt()  # each object is 16 px
        pred = np.zeros((2, 8, 8))
        pred[0, 0:2, 0:4] = 1.0  # 8 px of object 0 (exactly 50%)
        pred[0, 4:6, 4:8] = 1.0  # 8 px of object 1 (exactly 50%)
        assert mt.frame_is_degenerate(pred, gt)


class TestSpearman:
    def test_strictly_increasing(self):
        d = np.linspace(-1, 1, 20)
        assert mt.relation_monotonicity(2 * d + 3, d) == pytest.approx(1.0)

    def test_strictly_decreasing(self):
        d = np.linspace(-1, 1, 20)
        assert mt.relation_monotonicity(-d, d) == pytest.approx(-1.0)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = rng.integers(10, 13)
            s = rng.integers(0, 5, n).astype(float)  # ties included
            d = rng.normal(size=n)
            mine = mt.relation_monotonicity(s, d)
            oracle = brute_force_spearman(s, d)
            assert mine == pytest.approx(oracle, abs=1e-12)

    def test_constant_returns_none(self):
        assert mt.relation_monotonicity(np.ones(12), np.arange(12)) is None

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 10"):
            mt.relation_monotonicity(np.arange(5), np.arange(5))


class TestPCA:
    def test_line_explains_everything(self):
        rng = np.random.default_rng(5)
        direction = rng.normal(size=6)
        t = rng.normal(size=50)
        x = np.outer(t, direction)
        coords, ratios, axes = mt.pca2(x)
        assert ratios[0] == pytest.approx(1.0, abs=1e-9)
        assert coords.shape == (50, 2)

    def test_isotropic_gaussian_even_split(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4000, 2))
        _, ratios, _ = mt.pca2(x)
        assert ratios[0] == pytest.approx(0.5, abs=0.05)
        assert ratios[1] == pytest.approx(0.5, abs=0.05)

    def test_planar_data_preserves_distances(self):
        rng = np.random.default_rng(7)
        basis = np.linalg.qr(rng.normal(size=(5, 2)))[0].T  # orthonormal (2, 5)
        z = rng.normal(size=(40, 2)) * [3.0, 1.5]
        x = z @ basis
        coords, _, _ = mt.pca2(x)
        d_orig = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
        d_proj = np.linalg.norm(coords[:, None] - coords[None, :], axis=-1)
        assert np.allclose(d_orig, d_proj, atol=1e-8)

    def test_order_invariance_and_sign_convention(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(30, 4)) * [4, 2, 1, 0.5]
        coords, ratios, axes = mt.pca2(x)
        perm = rng.permutation(30)
        coords_p, ratios_p, axes_p = mt.pca2(x[perm])
        assert np.allclose(axes, axes_p, atol=1e-9)
        assert np.allclose(ratios, ratios_p, atol=1e-12)
        assert np.allclose(coords[perm], coords_p, atol=1e-9)
        for ax in axes:
            nz = np.nonzero(np.abs(ax) > 1e-12)[0]
            assert ax[nz[0]] > 0

    def test_rank0_rejected(self):
        with pytest.raises(ValueError, match="rank-0"):
            mt.pca2(np.ones((10, 3)))

    def test_preconditions(self):
        with pytest.raises(ValueError):
            mt.pca2(np.ones((2, 4)))
        with pytest.raises(ValueError):
            mt.pca2(np.ones((10, 1)))


class TestReport:
    def test_json_roundtrip(self):
        rep = mt.MetricsReport(checkpoint_id="abc", ari_per_episode=[0.5, 0.75],
                               ari_mean=0.625, iou_per_object=[0.8, 0.9],
                               degeneracy_rate=0.1, homo_residual=0.01,
                               spearman=0.85, pca_coords=[[0.0, 1.0]],
                               pca_explained=[0.7, 0.2], scalar_values=[0.3])
        back = mt.MetricsReport.from_json(rep.to_json())
        assert back == rep

    def test_emit_files(self, tmp_path):
        rng = np.random.default_rng(9)
        n = 25
        rep = mt.MetricsReport(
            ari_mean=0.9,
            pca_coords=rng.normal(size=(n, 2)).tolist(),
            pca_explained=[0.8, 0.15],
            scalar_values=rng.normal(size=n).tolist(),
        )
        viz = {
            "frames": rng.random((4, 3, 16, 16)).astype(np.float32),
            "pred_masks": rng.random((4, 3, 16, 16)),
            "gt_masks": rng.random((4, 2, 16, 16)) > 0.7,
        }
        written = mt.emit_report(rep, tmp_path / "out", viz=viz)
        names = {p.name for p in written}
        assert names == {"metrics.json", "pca_scatter.png", "mask_strips.png"}
        back = mt.MetricsReport.from_json((tmp_path / "out" / "metrics.json").read_text())
        assert back == rep

    def test_missing_pca_skips_plot(self, tmp_path):
        rep = mt.MetricsReport(ari_mean=0.5)
        written = mt.emit_report(rep, tmp_path / "out")
        assert {p.name for p in written} == {"metrics.json"}

    def test_unwritable_dir(self, tmp_path):
        target = tmp_path / "blocked"
        target.write_text("a file, not a directory")
        with pytest.raises(OSError):
            mt.emit_report(mt.MetricsReport(), target)

    def test_scatter_marker_count(self, tmp_path):
        # n points in -> n markers out; checked via the saved offsets
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        coords = np.random.default_rng(10).normal(size=(17, 2))
        fig, ax = plt.subplots()
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=np.arange(17), cmap="coolwarm")
        assert sc.get_offsets().shape[0] == 17
        plt.close(fig)

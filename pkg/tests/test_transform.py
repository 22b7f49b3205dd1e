import numpy as np
import pytest
import torch

from relmotion import transform as tr


def rand_params(n, rng, l_max=1.0, t_max=5.0):
    ls = rng.uniform(-l_max, l_max, size=(n, 2))
    t = rng.uniform(-t_max, t_max, size=(n, 2))
    return torch.tensor(np.concatenate([ls, t], axis=1), dtype=torch.float64)


def gaussian_blobs(hw, n=1, seed=0):
    rng = np.random.default_rng(seed)
    h, w = hw
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.zeros((n, 1, h, w))
    for i in range(n):
        for _ in range(3):
            cx = rng.uniform(w * 0.3, w * 0.7)
            cy = rng.uniform(h * 0.3, h * 0.7)
            s = rng.uniform(2.0, 4.0)
            img[i, 0] += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
    return torch.tensor(img / img.max(), dtype=torch.float64)


class TestGroupLaw:
    def test_identity_left_right(self):
        rng = np.random.default_rng(1)
        g = rand_params(100, rng)
        e = tr.identity((100,), dtype=torch.float64)
        assert torch.allclose(tr.compose(e, g), g, atol=1e-12)
        assert torch.allclose(tr.compose(g, e), g, atol=1e-12)

    def test_translations_add(self):
        g1 = torch.tensor([0.0, 0.0, 2.0, 0.0], dtype=torch.float64)
        g2 = torch.tensor([0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        out = tr.compose(g2, g1)
        assert torch.allclose(out, torch.tensor([0.0, 0.0, 3.0, 0.0], dtype=torch.float64))

    def test_non_commutative_witness(self):
        translate = torch.tensor([0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        scale = torch.tensor([np.log(2.0), 0.0, 0.0, 0.0], dtype=torch.float64)
        a = tr.compose(scale, translate)
        b = tr.compose(translate, scale)
        assert torch.allclose(a[2:], torch.tensor([2.0, 0.0], dtype=torch.float64))
        assert torch.allclose(b[2:], torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert not torch.allclose(a, b)

    def test_associativity_1000_triples(self):
        rng = np.random.default_rng(2)
        g1, g2, g3 = (rand_params(1000, rng) for _ in range(3))
        left = tr.compose(tr.compose(g3, g2), g1)
        right = tr.compose(g3, tr.compose(g2, g1))
        assert (left - right).abs().max().item() <= 1e-9

    def test_inverse_1000(self):
        rng = np.random.default_rng(3)
        g = rand_params(1000, rng)
        e = tr.identity((1000,), dtype=torch.float64)
        assert (tr.compose(g, tr.inverse(g)) - e).abs().max().item() <= 1e-9
        assert (tr.compose(tr.inverse(g), g) - e).abs().max().item() <= 1e-9

    def test_inverse_examples(self):
        e = tr.identity(dtype=torch.float64)
        assert torch.equal(tr.inverse(e), e)
        g = torch.tensor([0.0, 0.0, 3.0, -2.0], dtype=torch.float64)
        assert torch.allclose(tr.inverse(g), torch.tensor([0.0, 0.0, -3.0, 2.0], dtype=torch.float64))
        rng = np.random.default_rng(4)
        h = rand_params(50, rng)
        assert (tr.inverse(tr.inverse(h)) - h).abs().max().item() <= 1e-12

    def test_in_range_and_clamp(self):
        g = torch.tensor([[0.5, -0.5, 10.0, 0.0], [1.5, 0.0, 0.0, 0.0]], dtype=torch.float64)
        assert tr.in_range(g, 1.0).tolist() == [True, False]
        clamped = tr.clamp_scales(g, 1.0)
        assert clamped[1, 0].item() == 1.0
        assert clamped[0, 2].item() == 10.0


class TestField:
    def test_identity_zero_field(self):
        f = tr.to_field(tr.identity(dtype=torch.float64), (8, 10))
        assert f.shape == (8, 10, 2)
        assert f.abs().max().item() == 0.0

    def test_translation_constant_field(self):
        g = torch.tensor([0.0, 0.0, 2.0, 1.0], dtype=torch.float64)
        f = tr.to_field(g, (6, 6))
        assert torch.allclose(f[..., 0], torch.full((6, 6), 2.0, dtype=torch.float64))
        assert torch.allclose(f[..., 1], torch.full((6, 6), 1.0, dtype=torch.float64))

    def test_scaling_fixed_point_at_center(self):
        g = torch.tensor([np.log(2.0), 0.0, 0.0, 0.0], dtype=torch.float64)
        f = tr.to_field(g, (9, 9))
        assert f[:, 4, 0].abs().max().item() == 0.0  # center column, x displacement

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            tr.to_field(tr.identity(), (0, 4))


class TestWarp:
    def test_identity_exact(self):
        img = gaussian_blobs((16, 16))
        out = tr.warp(img, tr.identity((1,), dtype=torch.float64))
        assert torch.equal(out, img)

    def test_integer_shift_exact(self):
        rng = np.random.default_rng(5)
        img = torch.tensor(rng.random((1, 2, 12, 12)), dtype=torch.float64)
        g = torch.tensor([[0.0, 0.0, 3.0, 0.0]], dtype=torch.float64)
        out = tr.warp(img, g)
        # content moves +3 px in x: out[..., x] == img[..., x-3]
        assert torch.equal(out[..., :, 3:], img[..., :, :-3])
        assert out[..., :, :3].abs().max().item() == 0.0

    def test_composition_consistency(self):
        rng = np.random.default_rng(6)
        img = gaussian_blobs((32, 32), n=4, seed=7)
        g1 = rand_params(4, rng, l_max=0.2, t_max=3.0)
        g2 = rand_params(4, rng, l_max=0.2, t_max=3.0)
        twice = tr.warp(tr.warp(img, g1), g2)
        once = tr.warp(img, tr.compose(g2, g1))
        assert (twice - once).abs().mean().item() <= 1e-2

    def test_warp_gradients_match_finite_differences(self):
        img = gaussian_blobs((12, 12))
        g = torch.tensor([[0.07, -0.11, 0.63, -1.21]], dtype=torch.float64, requires_grad=True)
        x = img.clone().requires_grad_(True)
        loss = (tr.warp(x, g) ** 2).sum()
        loss.backward()
        eps = 1e-6
        for k in range(4):
            gp = g.detach().clone()
            gm = g.detach().clone()
            gp[0, k] += eps
            gm[0, k] -= eps
            fd = ((tr.warp(img, gp) ** 2).sum() - (tr.warp(img, gm) ** 2).sum()).item() / (2 * eps)
            an = g.grad[0, k].item()
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) <= 1e-3
        # image gradient at a few random pixels
        rng = np.random.default_rng(8)
        for _ in range(5):
            i, j = rng.integers(0, 12, size=2)
            xp = img.clone()
            xm = img.clone()
            xp[0, 0, i, j] += eps
            xm[0, 0, i, j] -= eps
            fd = ((tr.warp(xp, g.detach()) ** 2).sum() - (tr.warp(xm, g.detach()) ** 2).sum()).item() / (2 * eps)
            an = x.grad[0, 0, i, j].item()
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) <= 1e-3


class TestPhiEncoder:
    def test_output_contract(self):
        enc = PhiEncoder = tr.PhiEncoder((32, 32), l_max=1.0, width=16)
        x = torch.rand(5, 3, 32, 32)
        g = enc(x, x)
        assert g.shape == (5, 4)
        assert torch.isfinite(g).all()
        assert tr.in_range(g, 1.0 + 1e-6).all()

    def test_deterministic_in_eval(self):
        torch.manual_seed(0)
        enc = tr.PhiEncoder((32, 32), width=16).eval()
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            a = enc(x, x)
            b = enc(x, x)
        assert torch.equal(a, b)

    def test_resolution_mismatch(self):
        enc = tr.PhiEncoder((32, 32), width=16)
        with pytest.raises(ValueError):
            enc(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16))

    def test_translation_recovery_after_smoke_training(self):
        # train on synthetic pure-translation pairs; held-out error < 0.5 px
        torch.manual_seed(0)
        hw = (32, 32)
        enc = tr.PhiEncoder(hw, width=16)
        opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
        base = gaussian_blobs(hw, n=1, seed=9).float().repeat(1, 3, 1, 1)

        def make_batch(rng, n):
            t = torch.tensor(rng.uniform(-4, 4, size=(n, 2)), dtype=torch.float32)
            g = torch.cat([torch.zeros(n, 2), t], dim=1)
            x0 = base.expand(n, -1, -1, -1)
            # object at a random start offset, target frame at start + t
            g0 = torch.cat([torch.zeros(n, 2), torch.tensor(rng.uniform(-4, 4, size=(n, 2)), dtype=torch.float32)], dim=1)
            xa = tr.warp(x0, g0)
            xb = tr.warp(x0, tr.compose(g, g0))
            return xa, xb, t

        rng = np.random.default_rng(10)
        enc.train()
        for _ in range(300):
            xa, xb, t = make_batch(rng, 16)
            pred = enc(xa, xb)
            loss = ((pred[:, 2:] - t) ** 2).mean() + (pred[:, :2] ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        enc.eval()
        rng_held = np.random.default_rng(11)
        xa, xb, t = make_batch(rng_held, 32)
        with torch.no_grad():
            pred = enc(xa, xb)
        err = (pred[:, 2:] - t).abs().max().item()
        assert err < 0.5, f"held-out translation error {err:.3f} px"

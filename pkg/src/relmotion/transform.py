"""Diagonal-affine transformation group and differentiable image warping.

A transform g acts on center-relative pixel coordinates u as

    u' = S u + t,   S = diag(exp(lsx), exp(lsy)),   t = (tx, ty)

and is stored as a tensor whose last dimension holds (lsx, lsy, tx, ty).
Log scales make the scaling subgroup additive and keep S invertible, so
composition, inverse and identity are exact in parameter space.  The group
is non-abelian: scaling does not commute with translation.

All group operations broadcast over leading batch dimensions and work in
any float dtype (float64 is used by the gradient checks).
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

# parameter layout indices
LSX, LSY, TX, TY = 0, 1, 2, 3

PARAM_DIM = 4

DEFAULT_L_MAX = 1.0


def identity(batch_shape=(), dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity element: zero log-scales and zero translation."""
    return torch.zeros(*batch_shape, PARAM_DIM, dtype=dtype, device=device)


def compose(g2: torch.Tensor, g1: torch.Tensor) -> torch.Tensor:
    """Group law for "g1 then g2": S = S2 S1 (log scales add), t = S2 t1 + t2.

    The result may leave the configured log-scale range; callers that care
    should check ``in_range(result, 2 * l_max)`` and clamp or reject.
    """
    ls = g2[..., :2] + g1[..., :2]
    t = torch.exp(g2[..., :2]) * g1[..., 2:] + g2[..., 2:]
    return torch.cat([ls, t], dim=-1)


def inverse(g: torch.Tensor) -> torch.Tensor:
    """Inverse element: (-lsx, -lsy, -S^{-1} t)."""
    ls = -g[..., :2]
    t = -torch.exp(ls) * g[..., 2:]
    return torch.cat([ls, t], dim=-1)


def in_range(g: torch.Tensor, l_max: float = DEFAULT_L_MAX) -> torch.Tensor:
    """Boolean mask of elements whose log scales stay within [-l_max, l_max]."""
    return g[..., :2].abs().amax(dim=-1) <= l_max


def clamp_scales(g: torch.Tensor, l_max: float) -> torch.Tensor:
    """Clamp log scales into [-l_max, l_max]; translations are unbounded."""
    ls = g[..., :2].clamp(-l_max, l_max)
    return torch.cat([ls, g[..., 2:]], dim=-1)


def _center_grid(hw, dtype, device):
    h, w = hw
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = torch.arange(h, dtype=dtype, device=device) - cy
    xs = torch.arange(w, dtype=dtype, device=device) - cx
    uy, ux = torch.meshgrid(ys, xs, indexing="ij")
    return ux, uy


def to_field(g: torch.Tensor, hw) -> torch.Tensor:
    """Dense forward displacement field of g on an (H, W) grid.

    Returns shape (..., H, W, 2) with components (dx, dy) in pixels:
    ``field(u) = (S u + t) - u`` for center-relative u.  The identity maps
    to an all-zero field; the map is smooth in g.
    """
    h, w = hw
    if h <= 0 or w <= 0:
        raise ValueError(f"grid must be positive, got {hw}")
    ux, uy = _center_grid(hw, g.dtype, g.device)
    sx = torch.exp(g[..., LSX, None, None])
    sy = torch.exp(g[..., LSY, None, None])
    dx = (sx - 1.0) * ux + g[..., TX, None, None]
    dy = (sy - 1.0) * uy + g[..., TY, None, None]
    return torch.stack([dx, dy], dim=-1)


def _bilinear_sample(img: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample img (B, C, H, W) at pixel coords xs, ys (B, H, W), zero padding.

    Kept in raw pixel coordinates (no [-1, 1] normalization) so integer
    source coordinates reproduce input pixels exactly.
    """
    b, c, h, w = img.shape
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    wx = xs - x0
    wy = ys - y0
    x0l = x0.long()
    y0l = y0.long()

    flat = img.reshape(b, c, h * w)
    out = torch.zeros_like(img)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0l + dx
            yi = y0l + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, h * w)
            vals = torch.gather(flat, 2, idx.expand(b, c, h * w)).reshape(b, c, h, w)
            weight = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            out = out + vals * (weight * valid.to(img.dtype)).unsqueeze(1)
    return out


def warp(img: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Apply transform g to an image by inverse coordinate mapping.

    Content at center-relative position u moves to S u + t.  Bilinearly
    interpolates, pads with zeros outside, and is differentiable in both
    the image and g.  Accepts (C, H, W) with g (4,) or (B, C, H, W) with
    g (B, 4).
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
        g = g.reshape(1, PARAM_DIM)
    b, _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ux, uy = _center_grid((h, w), img.dtype, img.device)
    # inverse map: src = S^{-1} (u - t)
    inv_sx = torch.exp(-g[:, LSX]).view(b, 1, 1)
    inv_sy = torch.exp(-g[:, LSY]).view(b, 1, 1)
    xs = inv_sx * (ux.unsqueeze(0) - g[:, TX].view(b, 1, 1)) + cx
    ys = inv_sy * (uy.unsqueeze(0) - g[:, TY].view(b, 1, 1)) + cy
    out = _bilinear_sample(img, xs, ys)
    return out.squeeze(0) if squeeze else out


class PhiEncoder(nn.Module):
    """Convolutional regressor from (masked object at t, full frame at t+1)
    to a transform parameter.

    Log scales are squashed into [-l_max, l_max] with tanh so every output
    is a valid in-range group element; translations are unconstrained.
    Coordinate channels give the stack access to absolute position, which
    plain convolutions lack.
    """

    def __init__(self, hw, l_max: float = DEFAULT_L_MAX, width: int = 32):
        super().__init__()
        self.hw = tuple(hw)
        self.l_max = float(l_max)
        h, w = self.hw
        if h % 8 or w % 8:
            raise ValueError(f"input size must be divisible by 8, got {hw}")
        chans = [8, width, 2 * width, 2 * width]
        layers = []
        cin = chans[0]
        for cout in chans[1:]:
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, cout), cout),
                nn.SiLU(),
            ]
            cin = cout
        self.conv = nn.Sequential(*layers)
        feat = cin * (h // 8) * (w // 8)
        self.head = nn.Sequential(nn.Linear(feat, 128), nn.SiLU(), nn.Linear(128, PARAM_DIM))
        ux, uy = _center_grid(self.hw, torch.float32, None)
        coords = torch.stack([ux / max(w, h), uy / max(w, h)])
        self.register_buffer("coords", coords.unsqueeze(0))

    def forward(self, x_obj: torch.Tensor, x_next: torch.Tensor) -> torch.Tensor:
        if x_obj.shape[-2:] != self.hw or x_next.shape[-2:] != self.hw:
            raise ValueError(
                f"expected {self.hw} inputs, got {tuple(x_obj.shape[-2:])} and {tuple(x_next.shape[-2:])}"
            )
        coords = self.coords.to(x_obj.dtype).expand(x_obj.shape[0], -1, -1, -1)
        feats = self.conv(torch.cat([x_obj, x_next, coords], dim=1))
        raw = self.head(feats.flatten(1))
        ls = self.l_max * torch.tanh(raw[:, :2])
        return torch.cat([ls, raw[:, 2:]], dim=-1)

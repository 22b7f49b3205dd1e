"""Multi-slot segmentation network, its regularizers, and the compositional
next-frame predictor.

The U-Net style encoder-decoder emits K per-pixel-softmax attention masks,
so each pixel's mass is fully distributed across slots and the masked
slot images always sum back to the input frame.  The predictor warps each
masked slot with its own transform and sums the results; overlaps are left
unclamped and handled by the reconstruction loss.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transform import warp


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class MaskNet(nn.Module):
    """U-Net with 3 down/up levels producing K softmax attention masks.

    Slot K-1 is reserved for the background by convention only; nothing
    enforces it during training.
    """

    def __init__(self, hw, num_slots: int = 3, base: int = 32, in_channels: int = 3):
        super().__init__()
        h, w = hw
        if h % 8 or w % 8:
            raise ValueError(f"input size must be divisible by 8, got {hw}")
        self.hw = (h, w)
        self.num_slots = num_slots
        self.enc1 = _block(in_channels, base)
        self.enc2 = _block(base, base * 2)
        self.enc3 = _block(base * 2, base * 4)
        self.mid = _block(base * 4, base * 8)
        self.up3 = nn.ConvTranspose2d(base * 8, base * 4, 2, stride=2)
        self.dec3 = _block(base * 8, base * 4)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = _block(base * 4, base * 2)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = _block(base * 2, base)
        self.head = nn.Conv2d(base, num_slots, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != self.hw:
            raise ValueError(f"expected {self.hw} frames, got {tuple(x.shape[-2:])}")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        m = self.mid(F.max_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([e3, self.up3(m)], dim=1))
        d2 = self.dec2(torch.cat([e2, self.up2(d3)], dim=1))
        d1 = self.dec1(torch.cat([e1, self.up1(d2)], dim=1))
        return torch.softmax(self.head(d1), dim=1)


def forward_masks(net: MaskNet, x: torch.Tensor) -> torch.Tensor:
    """Inference-mode mask computation (deterministic, no gradients)."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(x)
    finally:
        net.train(was_training)


def seg_losses(masks: torch.Tensor, lam_div: float, lam_bin: float,
               lam_area: float, a_max: float):
    """Mask regularizers.

    L_div  = mean over pixels of sum_{i<j} m_i m_j      (spatial exclusivity)
    L_bin  = mean over pixels of sum_k m_k (1 - m_k)    (binarization)
    L_area = sum_k relu(mean(m_k) - a_max)^2            (area cap)

    Returns (L_div, L_bin, L_area, L_seg) with
    L_seg = lam_div L_div + lam_bin L_bin + lam_area L_area.
    """
    if masks.dim() == 3:
        masks = masks.unsqueeze(0)
    b, k, h, w = masks.shape
    total = masks.sum(dim=1)
    sum_sq = (masks * masks).sum(dim=1)
    l_div = ((total * total - sum_sq) / 2.0).mean()
    l_bin = (masks * (1.0 - masks)).sum(dim=1).mean()
    area = masks.mean(dim=(0, 2, 3))
    l_area = (F.relu(area - a_max) ** 2).sum()
    l_seg = lam_div * l_div + lam_bin * l_bin + lam_area * l_area
    return l_div, l_bin, l_area, l_seg


def compose_prediction(x_t: torch.Tensor, masks: torch.Tensor,
                       g: torch.Tensor) -> torch.Tensor:
    """Predict the next frame as the sum of per-slot warped masked images.

    x_t (B, C, H, W), masks (B, K, H, W), g (B, K, 4).  With identity
    transforms this returns x_t exactly because softmax masks sum to one.
    Overlapping warped slots may exceed [0, 1]; left unclamped.
    """
    single = x_t.dim() == 3
    if single:
        x_t, masks, g = x_t.unsqueeze(0), masks.unsqueeze(0), g.unsqueeze(0)
    b, c, h, w = x_t.shape
    k = masks.shape[1]
    if g.shape[:2] != (b, k):
        raise ValueError(f"need one transform per slot, got {tuple(g.shape)} for K={k}")
    slot_imgs = x_t.unsqueeze(1) * masks.unsqueeze(2)          # (B, K, C, H, W)
    warped = warp(slot_imgs.reshape(b * k, c, h, w), g.reshape(b * k, 4))
    out = warped.reshape(b, k, c, h, w).sum(dim=1)
    return out.squeeze(0) if single else out


def pred_recon_loss(x_pred: torch.Tensor, x_next: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    if x_pred.shape != x_next.shape:
        raise ValueError(f"shape mismatch: {tuple(x_pred.shape)} vs {tuple(x_next.shape)}")
    return ((x_pred - x_next) ** 2).mean()

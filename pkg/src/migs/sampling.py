"""Differentiable bilinear sampling shared by layout composition and object cropping."""
from __future__ import annotations

import torch


def bilinear_sample(grid: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample ``grid`` [N, C, h, w] at continuous cell coordinates ``xs``, ``ys`` [N, P].

    Coordinate ``i`` is the center of cell ``i``; samples beyond the outer centers take the
    border value. Returns [N, C, P]. Differentiable w.r.t. the grid and the coordinates.
    """
    N, C, h, w = grid.shape
    x = xs.clamp(0.0, w - 1.0)
    y = ys.clamp(0.0, h - 1.0)
    x0 = torch.floor(x).clamp(max=max(w - 2, 0))
    y0 = torch.floor(y).clamp(max=max(h - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = grid.reshape(N, C, h * w)

    def gather(iy, ix):
        idx = (iy * w + ix).unsqueeze(1).expand(N, C, iy.shape[1])
        return torch.gather(flat, 2, idx)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy

"""Triplet graph convolution, box/mask heads and layout composition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from .sampling import bilinear_sample

# minimum side of a predicted box once it is drawn into the layout
BOX_EPS = 1e-3


class NumericError(FloatingPointError):
    pass


@dataclass
class GcnConfig:
    embed_dim: int = 128
    num_layers: int = 5
    propagation_hidden: int = 512
    update_hidden: int = 512
    box_head_hidden: int = 128
    mask_size: int = 16

    def __post_init__(self):
        for name in ("embed_dim", "num_layers", "propagation_hidden", "update_hidden", "box_head_hidden", "mask_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        m = self.mask_size
        if m & (m - 1):
            raise ValueError(f"mask_size must be a power of two, got {m}")


class GraphFeatures(NamedTuple):
    nodes: torch.Tensor  # [N, D]
    edges: torch.Tensor  # [E, D]


def two_layer_mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


class TripletConv(nn.Module):
    """One round of message passing over (subject, predicate, object) triplets."""

    def __init__(self, dim: int, propagation_hidden: int, update_hidden: int):
        super().__init__()
        self.dim = dim
        self.propagate = two_layer_mlp(3 * dim, propagation_hidden, 3 * dim)
        self.update = two_layer_mlp(dim, update_hidden, dim)

    def forward(self, nodes: torch.Tensor, edge_feats: torch.Tensor, edges: torch.Tensor):
        """``edges`` is a LongTensor [E, 2] of (subject, object) node indices."""
        if edges.shape[0] == 0:
            return nodes, edge_feats
        D = self.dim
        s_idx, o_idx = edges[:, 0], edges[:, 1]
        out = self.propagate(torch.cat([nodes[s_idx], edge_feats, nodes[o_idx]], dim=1))
        s_cand, new_edges, o_cand = out[:, :D], out[:, D : 2 * D], out[:, 2 * D :]

        pooled = nodes.new_zeros(nodes.shape)
        pooled = pooled.index_add(0, s_idx, s_cand).index_add(0, o_idx, o_cand)
        counts = nodes.new_zeros(nodes.shape[0])
        ones = nodes.new_ones(edges.shape[0])
        counts = counts.index_add(0, s_idx, ones).index_add(0, o_idx, ones)
        touched = counts > 0
        pooled = pooled / counts.clamp(min=1).unsqueeze(1)
        # isolated nodes pass through untouched
        new_nodes = torch.where(touched.unsqueeze(1), self.update(pooled), nodes)
        return new_nodes, new_edges


class GraphNet(nn.Module):
    def __init__(self, num_objects: int, num_predicates: int, config: Optional[GcnConfig] = None):
        super().__init__()
        self.config = config = config or GcnConfig()
        D = config.embed_dim
        self.num_objects = num_objects
        self.num_predicates = num_predicates
        self.obj_embedding = nn.Embedding(num_objects, D)
        self.pred_embedding = nn.Embedding(num_predicates, D)
        self.layers = nn.ModuleList(
            TripletConv(D, config.propagation_hidden, config.update_hidden) for _ in range(config.num_layers)
        )
        self.box_head = two_layer_mlp(D, config.box_head_hidden, 4)
        self.mask_head = two_layer_mlp(D, config.box_head_hidden, config.mask_size**2)

    def embed(self, objects: torch.Tensor, predicates: torch.Tensor) -> GraphFeatures:
        if objects.numel() and (objects.min() < 0 or objects.max() >= self.num_objects):
            raise IndexError("object category outside the embedding table")
        if predicates.numel() and (predicates.min() < 0 or predicates.max() >= self.num_predicates):
            raise IndexError("predicate outside the embedding table")
        return GraphFeatures(self.obj_embedding(objects), self.pred_embedding(predicates))

    def gcn_forward(self, objects: torch.Tensor, triples: torch.Tensor) -> GraphFeatures:
        """``triples`` is [E, 3] of (subject, predicate, object) with node indices into ``objects``."""
        triples = triples.reshape(-1, 3)
        nodes, edge_feats = self.embed(objects, triples[:, 1])
        pairs = triples[:, [0, 2]]
        for k, layer in enumerate(self.layers):
            nodes, edge_feats = layer(nodes, edge_feats, pairs)
            if not (torch.isfinite(nodes).all() and torch.isfinite(edge_feats).all()):
                raise NumericError(f"non-finite activations after GCN layer {k}")
        return GraphFeatures(nodes, edge_feats)

    def predict_boxes(self, nodes: torch.Tensor) -> torch.Tensor:
        """Raw (x0, y0, x1, y1) in [0, 1]; may be degenerate, see :func:`repair_boxes`."""
        return torch.sigmoid(self.box_head(nodes))

    def predict_masks(self, nodes: torch.Tensor) -> torch.Tensor:
        M = self.config.mask_size
        return self.mask_head(nodes).view(-1, M, M)

    def forward(self, objects: torch.Tensor, triples: torch.Tensor):
        feats = self.gcn_forward(objects, triples)
        return feats.nodes, self.predict_boxes(feats.nodes), self.predict_masks(feats.nodes)


def repair_boxes(raw: torch.Tensor, eps: float = BOX_EPS) -> torch.Tensor:
    """Order each coordinate pair and widen pairs closer than ``eps`` around their midpoint."""
    out = []
    for a, b in ((raw[:, 0], raw[:, 2]), (raw[:, 1], raw[:, 3])):
        lo, hi = torch.minimum(a, b), torch.maximum(a, b)
        mid = 0.5 * (lo + hi)
        thin = (hi - lo) < eps
        lo = torch.where(thin, mid - 0.5 * eps, lo)
        hi = torch.where(thin, mid + 0.5 * eps, hi)
        out.append((lo, hi))
    (x0, x1), (y0, y1) = out
    return torch.stack([x0, y0, x1, y1], dim=1)


def warp_masks(boxes: torch.Tensor, masks: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Resample each M x M mask onto its box inside an H x W canvas -> [N, H, W], zero outside."""
    N, M = masks.shape[0], masks.shape[-1]
    if N == 0:
        return masks.new_zeros(0, H, W)
    px = (torch.arange(W, dtype=boxes.dtype, device=boxes.device) + 0.5) / W
    py = (torch.arange(H, dtype=boxes.dtype, device=boxes.device) + 0.5) / H
    x0, y0, x1, y1 = (boxes[:, k : k + 1] for k in range(4))
    u = (px.unsqueeze(0) - x0) / (x1 - x0)  # [N, W]
    v = (py.unsqueeze(0) - y0) / (y1 - y0)  # [N, H]
    in_x = (px.unsqueeze(0) >= x0) & (px.unsqueeze(0) < x1)
    in_y = (py.unsqueeze(0) >= y0) & (py.unsqueeze(0) < y1)
    xs = (u * M - 0.5).unsqueeze(1).expand(N, H, W).reshape(N, H * W)
    ys = (v * M - 0.5).unsqueeze(2).expand(N, H, W).reshape(N, H * W)
    sampled = bilinear_sample(masks.unsqueeze(1), xs, ys).view(N, H, W)
    inside = (in_y.unsqueeze(2) & in_x.unsqueeze(1)).to(sampled.dtype)
    return sampled * inside


def compose_layout(
    features: torch.Tensor,
    boxes: torch.Tensor,
    mask_probs: torch.Tensor,
    H: int,
    W: int,
    obj_to_img: Optional[torch.Tensor] = None,
    batch_size: Optional[int] = None,
) -> torch.Tensor:
    """Sum over objects of node feature x warped mask.

    Without ``obj_to_img`` all objects belong to one image and the result is [D, H, W];
    otherwise [batch_size, D, H, W].
    """
    D = features.shape[1]
    single = obj_to_img is None
    if single:
        obj_to_img = torch.zeros(features.shape[0], dtype=torch.long, device=features.device)
        batch_size = 1
    elif batch_size is None:
        batch_size = int(obj_to_img.max()) + 1 if obj_to_img.numel() else 1
    warped = warp_masks(boxes, mask_probs, H, W).view(-1, 1, H * W)
    layout = features.new_zeros(batch_size, D, H * W)
    layout = layout.index_add(0, obj_to_img, features.unsqueeze(2) * warped)
    layout = layout.view(batch_size, D, H, W)
    return layout[0] if single else layout

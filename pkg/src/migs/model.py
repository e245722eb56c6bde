"""Scene graph -> layout -> image pipeline with both discriminators, plus batching helpers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .discriminators import DiscriminatorConfig, GlobalDiscriminator, ObjectDiscriminator
from .generators import DESK_CHANNELS, CrnConfig, CrnGenerator, SpadeConfig, SpadeGenerator
from .graphnet import GcnConfig, GraphNet, compose_layout, repair_boxes
from .scenegraph import AnnotatedScene, SceneGraph

# parameter groups that receive separate outer updates
GROUPS = {
    "generator": ("graph.", "generator."),
    "d_global": ("d_global.",),
    "d_obj": ("d_obj.",),
}


@dataclass
class ModelConfig:
    num_objects: int = 9
    num_predicates: int = 6
    image_size: tuple[int, int] = (64, 64)
    decoder: str = "spade"
    channels: list[int] = field(default_factory=lambda: list(DESK_CHANNELS))
    modulation_width: int = 64
    noise_dim: int = 64
    gcn: GcnConfig = field(default_factory=GcnConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.decoder not in ("crn", "spade"):
            raise ValueError(f"decoder must be 'crn' or 'spade', got {self.decoder!r}")
        self.image_size = tuple(self.image_size)
        if isinstance(self.gcn, dict):
            self.gcn = GcnConfig(**self.gcn)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class SceneBatch(NamedTuple):
    images: torch.Tensor  # [B, 3, H, W] in [-1, 1]
    objects: torch.Tensor  # [N]
    triples: torch.Tensor  # [E, 3], node indices global to the batch
    boxes: torch.Tensor  # [N, 4]
    obj_to_img: torch.Tensor  # [N]

    @property
    def size(self) -> int:
        return self.images.shape[0]


def graph_tensors(graphs: Sequence[SceneGraph]):
    objects, triples, obj_to_img = [], [], []
    offset = 0
    for b, g in enumerate(graphs):
        objects.extend(g.objects)
        triples.extend((s + offset, p, o + offset) for s, p, o in g.edges)
        obj_to_img.extend([b] * len(g.objects))
        offset += len(g.objects)
    return (
        torch.tensor(objects, dtype=torch.long),
        torch.tensor(triples, dtype=torch.long).reshape(-1, 3),
        torch.tensor(obj_to_img, dtype=torch.long),
    )


def collate(scenes: Sequence[AnnotatedScene], dtype=torch.float32) -> SceneBatch:
    if not scenes:
        raise ValueError("empty batch")
    objects, triples, obj_to_img = graph_tensors([s.graph for s in scenes])
    images = np.stack([np.asarray(s.image, dtype=np.float32) for s in scenes])
    images = torch.from_numpy(images).permute(0, 3, 1, 2).to(dtype) * 2.0 - 1.0
    boxes = torch.tensor([b.as_tuple() for s in scenes for b in s.boxes], dtype=dtype).reshape(-1, 4)
    return SceneBatch(images.contiguous(), objects, triples, boxes, obj_to_img)


class Generated(NamedTuple):
    images: torch.Tensor  # [B, 3, H, W] in [-1, 1]
    raw_boxes: torch.Tensor
    layout_boxes: torch.Tensor
    mask_logits: torch.Tensor
    layout: torch.Tensor


class SceneGraphToImage(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.graph = GraphNet(config.num_objects, config.num_predicates, config.gcn)
        D = config.gcn.embed_dim
        if config.decoder == "spade":
            self.generator = SpadeGenerator(
                D, SpadeConfig(list(config.channels), config.modulation_width, config.noise_dim), config.image_size
            )
        else:
            self.generator = CrnGenerator(D, CrnConfig(list(config.channels), noise_dim=config.noise_dim))
        self.d_global = GlobalDiscriminator(config.discriminator)
        self.d_obj = ObjectDiscriminator(config.num_objects, config.discriminator)

    @property
    def noise_dim(self) -> int:
        return self.generator.config.noise_dim

    def sample_noise(self, batch_size: int, seed: int) -> Optional[torch.Tensor]:
        if not self.noise_dim:
            return None
        gen = torch.Generator().manual_seed(int(seed))
        dtype = next(self.parameters()).dtype
        return torch.randn(batch_size, self.noise_dim, generator=gen).to(dtype)

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        prefixes = GROUPS[group]
        return [p for name, p in self.named_parameters() if name.startswith(prefixes)]

    def generate(
        self,
        objects: torch.Tensor,
        triples: torch.Tensor,
        obj_to_img: torch.Tensor,
        batch_size: int,
        noise: Optional[torch.Tensor] = None,
        gt_boxes: Optional[torch.Tensor] = None,
    ) -> Generated:
        H, W = self.config.image_size
        nodes, raw_boxes, mask_logits = self.graph(objects, triples)
        layout_boxes = gt_boxes if gt_boxes is not None else repair_boxes(raw_boxes)
        layout = compose_layout(nodes, layout_boxes, torch.sigmoid(mask_logits), H, W, obj_to_img, batch_size)
        images = self.generator(layout, noise)
        return Generated(images, raw_boxes, layout_boxes, mask_logits, layout)


def group_keys(state_keys, group: str) -> list[str]:
    prefixes = GROUPS[group]
    return [k for k in state_keys if k.startswith(prefixes)]

"""Miniature query-based mask classification network.

Strided conv backbone -> top-down pixel decoder -> transformer decoder over the
query queue.  Masks are dot products between final query states (after a
bias-free linear map) and full-resolution pixel embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .queue import QueryQueue


@dataclass
class PredictionSet:
    class_logits: torch.Tensor  # B x M x (K + 1), last column is no-object
    mask_logits: torch.Tensor  # B x M x H x W
    layer_query_states: list[torch.Tensor]  # L tensors of B x M x d_q
    pod_features: list[torch.Tensor]  # backbone stages + pixel decoder maps
    # (class_logits, mask_logits) read out from every earlier decoder layer
    aux: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    # boolean blocking masks fed to each layer's cross-attention (None if unmasked)
    attention_masks: list[torch.Tensor | None] = field(default_factory=list)


def _groups(ch: int) -> int:
    return 4 if ch % 4 == 0 else 1


class Backbone(nn.Module):
    def __init__(self, channels: list[int]):
        super().__init__()
        stages, cin = [], 3
        for cout in channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                    nn.GroupNorm(_groups(cout), cout),
                    nn.GELU(),
                    nn.Conv2d(cout, cout, 3, padding=1),
                    nn.GroupNorm(_groups(cout), cout),
                    nn.GELU(),
                )
            )
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PixelDecoder(nn.Module):
    """Top-down fusion of backbone stages into a d-channel pixel embedding.

    The embedding lives at the finest backbone resolution.  Its full-resolution
    version is the bilinear upsample; since upsampling is linear, the model
    upsamples mask logits instead, which is identical and far cheaper.
    """

    def __init__(self, channels: list[int], d: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, d, 1) for c in channels)
        self.out = nn.Sequential(nn.Conv2d(d, d, 3, padding=1), nn.GroupNorm(_groups(d), d), nn.GELU())
        self.pixel = nn.Conv2d(d, d, 1)

    def forward(self, feats):
        maps = []
        y = self.lateral[-1](feats[-1])
        maps.append(y)
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            y = lat(f) + F.interpolate(y, size=f.shape[-2:], mode="nearest")
            maps.append(y)
        y = self.out(y)
        return maps, y, self.pixel(y)


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.cross = nn.MultiheadAttention(d, heads, batch_first=True)
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, tgt, query_pos, memory, memory_pos, attn_mask=None):
        q = tgt + query_pos
        attended = self.cross(q, memory + memory_pos, memory, attn_mask=attn_mask, need_weights=False)[0]
        tgt = self.norm1(tgt + attended)
        q = tgt + query_pos
        tgt = self.norm2(tgt + self.self_attn(q, q, tgt, need_weights=False)[0])
        return self.norm3(tgt + self.ffn(tgt))


class SegModel(nn.Module):
    def __init__(self, config: ModelConfig, mode: str = "semantic", seed: int = 0):
        super().__init__()
        self.config = config
        d = config.d_q
        h, w = config.image_size
        ds = config.memory_stride
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone(config.backbone_channels)
            self.pixel_decoder = PixelDecoder(config.backbone_channels, d)
            if config.multi_scale_memory:
                n_levels = len(config.backbone_channels)
                cells = [(h >> (n_levels - i)) * (w >> (n_levels - i)) for i in range(n_levels)]
                self.memory_pos = nn.ParameterList(
                    nn.Parameter(torch.randn(1, c, d) * 0.02) for c in cells
                )
            else:
                self.memory_pos = nn.Parameter(torch.randn(1, (h // ds) * (w // ds), d) * 0.02)
            self.layers = nn.ModuleList(
                DecoderLayer(d, config.attention_heads) for _ in range(config.decoder_layers)
            )
            self.mask_embed = nn.Linear(d, d, bias=False)
            self.class_head = nn.Linear(d, 1)  # no-object column only until classes arrive
        self.queue = QueryQueue(d, mode)

    @property
    def num_classes(self) -> int:
        return self.class_head.out_features - 1

    def extend(self, new_class_ids, seed: int = 0, freeze: bool = True):
        """Add a query group and matching class-head columns for new classes."""
        self.queue.extend(new_class_ids, seed=seed, freeze=freeze)
        self.queue.groups[-1].to(self.class_head.weight.dtype)
        self.grow_class_head(len(new_class_ids), seed=seed + 1)
        return self

    def grow_class_head(self, n_new_classes: int, seed: int = 0):
        if n_new_classes < 1:
            raise ValueError("n_new_classes must be positive")
        old = self.class_head
        d, k = old.in_features, old.out_features - 1
        gen = torch.Generator().manual_seed(seed)
        bound = d**-0.5
        new_w = (torch.rand(n_new_classes, d, generator=gen) * 2 - 1) * bound
        new_b = (torch.rand(n_new_classes, generator=gen) * 2 - 1) * bound
        with torch.random.fork_rng(devices=[]):
            head = nn.Linear(d, k + n_new_classes + 1).to(old.weight.dtype)
        with torch.no_grad():
            w, b = old.weight.detach(), old.bias.detach()
            head.weight.copy_(torch.cat([w[:k], new_w.to(w.dtype), w[k:]]))
            head.bias.copy_(torch.cat([b[:k], new_b.to(b.dtype), b[k:]]))
        self.class_head = head
        return self

    def forward(self, images: torch.Tensor, attention_masks=None) -> PredictionSet:
        """``images``: B x 3 x H x W (or B x H x W x 3) in [0, 1].

        ``attention_masks`` replays the per-layer masks of an earlier call, which
        makes the output a smooth function of the parameters (used for
        gradient checking).
        """
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4:
            raise ValueError(f"expected a batch of images, got shape {tuple(images.shape)}")
        if images.shape[1] != 3 and images.shape[-1] == 3:
            images = images.permute(0, 3, 1, 2)
        if images.shape[1] != 3:
            raise ValueError(f"channel axis must have 3 entries, got {images.shape[1]}")
        h, w = self.config.image_size
        if images.shape[2] != h:
            raise ValueError(f"height axis {images.shape[2]} != configured {h}")
        if images.shape[3] != w:
            raise ValueError(f"width axis {images.shape[3]} != configured {w}")
        if not len(self.queue.groups):
            raise ValueError("query queue is empty")

        b = images.shape[0]
        feats = self.backbone(images)
        maps, fused, pixel = self.pixel_decoder(feats)
        if self.config.multi_scale_memory:
            levels = [(m.flatten(2).transpose(1, 2), m.shape[-2:], pos) for m, pos in zip(maps, self.memory_pos)]
        else:
            m = maps[self.config.memory_level]
            levels = [(m.flatten(2).transpose(1, 2), m.shape[-2:], self.memory_pos)]
        tgt = self.queue.features().unsqueeze(0).expand(b, -1, -1)
        qpos = self.queue.positions().unsqueeze(0).expand(b, -1, -1)
        states, outs, used = [], [], []
        masked = self.config.masked_attention and attention_masks is None
        mask_logits = self._mask_logits(tgt, pixel) if masked else None
        for i, layer in enumerate(self.layers):
            memory, mem_size, memory_pos = levels[i % len(levels)]
            if attention_masks is not None:
                attn_mask = attention_masks[i]
            elif masked:
                attn_mask = self._attention_mask(mask_logits, mem_size)
            else:
                attn_mask = None
            used.append(attn_mask)
            tgt = layer(tgt, qpos, memory, memory_pos, attn_mask)
            states.append(tgt)
            outs.append(self._heads(tgt, pixel, (h, w)))
            if masked and i + 1 < len(self.layers):
                mask_logits = self._mask_logits(tgt, pixel)
        class_logits, mask_logits = outs[-1]
        return PredictionSet(class_logits, mask_logits, states, feats + [fused], outs[:-1], used)

    def _mask_logits(self, q, pixel):
        return torch.einsum("bmd,bdhw->bmhw", self.mask_embed(q), pixel)

    def _attention_mask(self, mask_logits, size):
        """Block attention outside each query's current mask (sigmoid < 0.5).

        Queries whose mask is empty fall back to attending everywhere.
        """
        m = F.interpolate(mask_logits.detach(), size=size, mode="bilinear", align_corners=False)
        blocked = (m.sigmoid() < 0.5).flatten(2)  # B x M x P
        blocked[blocked.all(dim=-1)] = False
        heads = self.config.attention_heads
        return blocked.repeat_interleave(heads, dim=0)

    def _heads(self, q, pixel, size):
        class_logits = self.class_head(q)
        mask_logits = self._mask_logits(q, pixel)
        if size is not None and mask_logits.shape[-2:] != size:
            mask_logits = F.interpolate(mask_logits, size=size, mode="bilinear", align_corners=False)
        return class_logits, mask_logits


def parameter_count(model: nn.Module) -> int:
    """All learnable parameters, frozen query groups included."""
    return sum(p.numel() for p in model.parameters())

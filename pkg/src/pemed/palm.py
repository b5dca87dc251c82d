"""Prompt attention: enhance the click/mask prompt tokens among themselves
(the "inner" half) and fuse the resulting prompt feature with the stage-1
image feature (the "outer" half).

Every attention site owns its query/key/value projections; the printed
cross-attention forms operate on the projected tensors. No weights are
shared between sites.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeMismatchError
from .prompts import PromptMaps
from .tensor import AttentionConfig, Tensor


class AttentionSite:
    """One cross/self-attention application with its own q/k/v projections."""

    def __init__(self, d: int, heads: int, scale_mode: str, rng, dtype=np.float32):
        from .backbone import LinearLayer

        self.cfg = AttentionConfig(d_model=d, n_heads=heads, scale_mode=scale_mode)
        self.wq = LinearLayer(d, d, rng, dtype)
        self.wk = LinearLayer(d, d, rng, dtype)
        self.wv = LinearLayer(d, d, rng, dtype)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if q.shape[1] != k.shape[1] or k.shape != v.shape:
            raise ShapeMismatchError(f"attention site shapes: {q.shape}/{k.shape}/{v.shape}")
        return T.attention(self.wq(q), self.wk(k), self.wv(v), self.cfg)

    def params(self, prefix: str) -> dict:
        out = {}
        for name in ("wq", "wk", "wv"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out


class PalmModule:
    def __init__(self, d: int, heads: int, scale_mode: str, rng, dtype=np.float32, stride: int = 4):
        from .backbone import Norm, PatchEmbed

        self.d = d
        # prompt token embeddings share the stage-1 stride and width so the
        # prompt tokens align one-to-one with the stage-1 image tokens
        self.embed_pos = PatchEmbed(2, stride, d, rng, dtype)
        self.embed_neg = PatchEmbed(2, stride, d, rng, dtype)
        self.embed_global = PatchEmbed(3, stride, d, rng, dtype)
        self.site_pos = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.site_neg = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.site_global = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.site_ep_pos = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.site_ep_neg = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.site_out_image = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.site_out_prompt = AttentionSite(d, heads, scale_mode, rng, dtype)
        self.norm_image = Norm(d, dtype)
        self.norm_prompt = Norm(d, dtype)

    def params(self, prefix: str) -> dict:
        out = {}
        for name in (
            "embed_pos",
            "embed_neg",
            "embed_global",
            "site_pos",
            "site_neg",
            "site_global",
            "site_ep_pos",
            "site_ep_neg",
            "site_out_image",
            "site_out_prompt",
            "norm_image",
            "norm_prompt",
        ):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out

    # -- the four stages of prompt processing ------------------------------

    def palm_i_embed(self, maps: PromptMaps) -> tuple[Tensor, Tensor, Tensor]:
        """Patch-embed the prompt channel stacks into three token maps:
        positive+prev, the global pos+neg+prev stack, and negative+prev."""
        pos_tokens = self.embed_pos(T.concat([maps.pos, maps.prev], axis=0))
        neg_tokens = self.embed_neg(T.concat([maps.neg, maps.prev], axis=0))
        global_tokens = self.embed_global(T.concat([maps.pos, maps.neg, maps.prev], axis=0))
        return pos_tokens, global_tokens, neg_tokens

    def enhance_prompts(self, pos_tokens: Tensor, neg_tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Cross-attend each polarity against the other: the enhanced
        positive tokens use the negative ones as query, and vice versa."""
        pos_enhanced = self.site_pos(neg_tokens, pos_tokens, pos_tokens)
        neg_enhanced = self.site_neg(pos_tokens, neg_tokens, neg_tokens)
        return pos_enhanced, neg_enhanced

    def enhance_global(self, global_tokens: Tensor) -> Tensor:
        return self.site_global(global_tokens, global_tokens, global_tokens)

    def prompt_feature(self, pos_enhanced: Tensor, neg_enhanced: Tensor, global_enhanced: Tensor) -> Tensor:
        """Sum of both polarities cross-attending into the global tokens."""
        a = self.site_ep_pos(pos_enhanced, global_enhanced, global_enhanced)
        b = self.site_ep_neg(neg_enhanced, global_enhanced, global_enhanced)
        return T.add(a, b)

    def palm_o(self, image_tokens: Tensor, prompt_feat: Tensor) -> Tensor:
        """Bridge prompt and image features: both raw terms plus both
        normalized cross-attention terms, summed."""
        if image_tokens.shape != prompt_feat.shape:
            raise ShapeMismatchError(f"image {image_tokens.shape} vs prompt {prompt_feat.shape} tokens")
        img_term = self.norm_image(self.site_out_image(image_tokens, prompt_feat, prompt_feat))
        prm_term = self.norm_prompt(self.site_out_prompt(prompt_feat, image_tokens, image_tokens))
        return T.add(T.add(image_tokens, img_term), T.add(prompt_feat, prm_term))

    def forward(self, maps: PromptMaps, image_tokens: Tensor, enable_inner: bool, enable_outer: bool) -> Tensor:
        """Produce the enhanced stage-1 feature for whichever halves are on.

        With the inner half off, the prompt feature is the raw global
        embedding; with the outer half off, prompt and image features are
        summed directly.
        """
        if not (enable_inner or enable_outer):
            return image_tokens
        pos_tokens, global_tokens, neg_tokens = self.palm_i_embed(maps)
        if enable_inner:
            pos_enhanced, neg_enhanced = self.enhance_prompts(pos_tokens, neg_tokens)
            global_enhanced = self.enhance_global(global_tokens)
            prompt_feat = self.prompt_feature(pos_enhanced, neg_enhanced, global_enhanced)
        else:
            prompt_feat = global_tokens
        if enable_outer:
            return self.palm_o(image_tokens, prompt_feat)
        return T.add(image_tokens, prompt_feat)

"""Two-tower detector: patch transformer for images, causal transformer for text.

Every output patch token of the image tower is an object proposal.  A linear
text-prediction head maps it into the shared embedding space and an MLP box
head regresses a normalised cxcywh box for it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T

PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    text_vocab_size: int = 128
    text_max_len: int = 12
    mlp_hidden: int = 128
    proj_dim: int = 32
    logit_scale_init: float = math.log(1 / 0.07)
    logit_scale_max: float = math.log(100.0)
    box_bias: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_proposals(self) -> int:
        return self.grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)


# Full-scale reference: ViT-L/14 at 840 px (never instantiated in tests).
REFERENCE_CONFIG = ModelConfig(image_size=840, patch_size=14, embed_dim=768, num_layers=24,
                               num_heads=16, text_vocab_size=49408, text_max_len=16,
                               mlp_hidden=3072, proj_dim=768)
MICRO_CONFIG = ModelConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=1, num_heads=2,
                           text_vocab_size=16, text_max_len=6, mlp_hidden=8, proj_dim=8)


@dataclass
class ModelOutput:
    boxes: T.Tensor              # P x 4, cxcywh in (0, 1)
    visual_embeddings: T.Tensor  # P x D, unit norm
    logits: T.Tensor             # P x Q


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _inverse_sigmoid(x):
    return np.log(x) - np.log1p(-x)


class LOWAModel:
    """Parameters live in ``self.params`` (name -> Tensor), ordered by creation."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(seed)
        E, D, H = cfg.embed_dim, cfg.proj_dim, cfg.mlp_hidden
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels

        def weight(name, shape):
            self.params[name] = T.parameter(_trunc_normal(rng, shape, cfg.init_std))

        def zeros(name, shape):
            self.params[name] = T.parameter(np.zeros(shape))

        def ones(name, shape):
            self.params[name] = T.parameter(np.ones(shape))

        def block(prefix):
            ones(f"{prefix}.ln1.g", E)
            zeros(f"{prefix}.ln1.b", E)
            weight(f"{prefix}.attn.qkv.w", (E, 3 * E))
            zeros(f"{prefix}.attn.qkv.b", 3 * E)
            weight(f"{prefix}.attn.proj.w", (E, E))
            zeros(f"{prefix}.attn.proj.b", E)
            ones(f"{prefix}.ln2.g", E)
            zeros(f"{prefix}.ln2.b", E)
            weight(f"{prefix}.mlp.fc1.w", (E, H))
            zeros(f"{prefix}.mlp.fc1.b", H)
            weight(f"{prefix}.mlp.fc2.w", (H, E))
            zeros(f"{prefix}.mlp.fc2.b", E)

        weight("image.patch.w", (patch_dim, E))
        zeros("image.patch.b", E)
        weight("image.pos", (cfg.num_proposals, E))
        for i in range(cfg.num_layers):
            block(f"image.block{i}")
        ones("image.ln_post.g", E)
        zeros("image.ln_post.b", E)

        weight("head.cls.w", (E, D))
        zeros("head.cls.b", D)
        weight("head.box.fc1.w", (E, E))
        zeros("head.box.fc1.b", E)
        weight("head.box.fc2.w", (E, E))
        zeros("head.box.fc2.b", E)
        weight("head.box.fc3.w", (E, 4))
        zeros("head.box.fc3.b", 4)
        self.params["logit_scale"] = T.parameter(np.array(cfg.logit_scale_init))

        weight("text.tok", (cfg.text_vocab_size, E))
        weight("text.pos", (cfg.text_max_len, E))
        for i in range(cfg.num_layers):
            block(f"text.block{i}")
        ones("text.ln_final.g", E)
        zeros("text.ln_final.b", E)
        weight("text.proj.w", (E, D))

        g = cfg.grid
        centers = (np.arange(g) + 0.5) / g
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        prior = np.stack([cx.ravel(), cy.ravel(), np.full(g * g, 1.0 / g), np.full(g * g, 1.0 / g)], axis=1)
        self._box_prior = _inverse_sigmoid(prior) if cfg.box_bias else np.zeros_like(prior)

    # -- parameter bookkeeping --------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def parameter_groups(self) -> dict[str, list[str]]:
        text = [n for n in self.params if n.startswith("text.")]
        image = [n for n in self.params if not n.startswith("text.")]
        return {"image": image, "text": text}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {n}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks ----------------------------------------------------
    def _linear(self, x, prefix, bias=True):
        y = x @ self.params[f"{prefix}.w"]
        return y + self.params[f"{prefix}.b"] if bias else y

    def _ln(self, x, prefix):
        return T.layernorm(x) * self.params[f"{prefix}.g"] + self.params[f"{prefix}.b"]

    def _block(self, x, prefix, batch, length, mask=None):
        """Pre-norm transformer block on a flattened ``(batch*length, E)`` input."""
        cfg = self.config
        E, nh = cfg.embed_dim, cfg.num_heads
        dh = E // nh
        h = self._ln(x, f"{prefix}.ln1")
        qkv = self._linear(h, f"{prefix}.attn.qkv")
        qkv = T.permute(T.reshape(qkv, (batch, length, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.scale(q @ T.permute(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        if mask is not None:
            att = att + mask
        ctx = T.softmax(att) @ v
        ctx = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (batch * length, E))
        x = x + self._linear(ctx, f"{prefix}.attn.proj")
        h = self._ln(x, f"{prefix}.ln2")
        h = self._linear(T.relu(self._linear(h, f"{prefix}.mlp.fc1")), f"{prefix}.mlp.fc2")
        return x + h

    # -- towers -------------------------------------------------------------
    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        """``(B, H, W, C)`` -> ``(B, P, patch*patch*C)`` in row-major patch order."""
        cfg = self.config
        x = np.asarray(pixels, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        B, Hh, W, C = x.shape
        if Hh != cfg.image_size or W != cfg.image_size or C != cfg.channels:
            raise ValueError(f"expected images {cfg.image_size}x{cfg.image_size}x{cfg.channels}, got {Hh}x{W}x{C}")
        g, p = cfg.grid, cfg.patch_size
        x = x.reshape(B, g, p, g, p, C).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * C)

    def encode_images(self, pixels) -> T.Tensor:
        """Batch of images -> ``(B*P, E)`` proposal embeddings."""
        cfg = self.config
        patches = self.patchify(pixels)
        B, P, _ = patches.shape
        x = self._linear(T.Tensor(patches.reshape(B * P, -1)), "image.patch")
        pos = T.reshape(T.broadcast_to(self.params["image.pos"], (B, P, cfg.embed_dim)), (B * P, cfg.embed_dim))
        x = x + pos
        for i in range(cfg.num_layers):
            x = self._block(x, f"image.block{i}", B, P)
        return self._ln(x, "image.ln_post")

    def encode_image(self, pixels) -> T.Tensor:
        """Single image ``(H, W, C)`` -> ``(P, E)``."""
        return self.encode_images(np.asarray(pixels)[None])

    def encode_texts(self, token_lists: Sequence[Sequence[int]]) -> T.Tensor:
        """Token-id lists -> ``(Q, D)`` unit-norm query embeddings."""
        cfg = self.config
        Q = len(token_lists)
        if Q == 0:
            return T.Tensor(np.zeros((0, cfg.proj_dim)))
        lengths = [len(t) for t in token_lists]
        if min(lengths) < 1:
            raise ValueError("cannot encode an empty token list")
        if max(lengths) > cfg.text_max_len:
            raise ValueError(f"token list longer than text_max_len={cfg.text_max_len}")
        L = max(lengths)
        ids = np.full((Q, L), PAD_ID, dtype=np.int64)
        for i, t in enumerate(token_lists):
            ids[i, :len(t)] = t
        if ids.max() >= cfg.text_vocab_size or ids.min() < 0:
            raise ValueError("token id outside the text vocabulary")
        E = cfg.embed_dim
        x = T.gather_rows(self.params["text.tok"], ids.ravel())
        pos = T.getitem(self.params["text.pos"], slice(0, L))
        x = x + T.reshape(T.broadcast_to(pos, (Q, L, E)), (Q * L, E))
        causal = np.triu(np.full((L, L), -1e9), k=1)
        mask = T.Tensor(np.broadcast_to(causal, (Q, cfg.num_heads, L, L)))
        for i in range(cfg.num_layers):
            x = self._block(x, f"text.block{i}", Q, L, mask)
        last = np.arange(Q) * L + np.asarray(lengths) - 1
        h = self._ln(T.gather_rows(x, last), "text.ln_final")
        return T.l2_normalize(self._linear(h, "text.proj", bias=False))

    def encode_text(self, token_ids: Sequence[int]) -> T.Tensor:
        return T.reshape(self.encode_texts([token_ids]), (self.config.proj_dim,))

    # -- heads --------------------------------------------------------------
    def heads(self, image_embeddings: T.Tensor, num_images: int):
        """Box and visual embeddings for ``(B*P, E)`` proposals."""
        P = self.config.num_proposals
        vis = T.l2_normalize(self._linear(image_embeddings, "head.cls"))
        h = T.relu(self._linear(image_embeddings, "head.box.fc1"))
        h = T.relu(self._linear(h, "head.box.fc2"))
        raw = self._linear(h, "head.box.fc3")
        prior = np.tile(self._box_prior, (num_images, 1)) if num_images > 1 else self._box_prior
        boxes = T.sigmoid(raw + T.Tensor(prior[: num_images * P]))
        return boxes, vis

    def logits(self, visual: T.Tensor, queries: T.Tensor) -> T.Tensor:
        if queries.shape[0] == 0:
            return T.Tensor(np.zeros((visual.shape[0], 0)))
        return T.mul(visual @ T.transpose(queries), T.exp(self.params["logit_scale"]))

    def predict(self, image_embeddings: T.Tensor, query_embeddings: T.Tensor) -> ModelOutput:
        """Single-image prediction from ``(P, E)`` proposal embeddings and ``(Q, D)`` queries."""
        boxes, vis = self.heads(image_embeddings, 1)
        return ModelOutput(boxes, vis, self.logits(vis, query_embeddings))

    def forward_batch(self, pixels, query_embeddings_per_image) -> list[ModelOutput]:
        """Full forward for ``B`` images; returns one ModelOutput per image."""
        x = self.encode_images(pixels)
        B = len(query_embeddings_per_image)
        P = self.config.num_proposals
        boxes, vis = self.heads(x, B)
        outs = []
        for b, q in enumerate(query_embeddings_per_image):
            rows = slice(b * P, (b + 1) * P)
            bx = boxes if B == 1 else T.getitem(boxes, rows)
            vb = vis if B == 1 else T.getitem(vis, rows)
            outs.append(ModelOutput(bx, vb, self.logits(vb, q)))
        return outs

    def clamp_logit_scale(self):
        p = self.params["logit_scale"]
        p.data = np.minimum(p.data, self.config.logit_scale_max)

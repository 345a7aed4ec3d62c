"""Toy frozen decoder-only transformer: tokenizer, patch embedder, causal stack.

Stands in for a large multimodal LM. Weights are randomly initialized
(optionally pre-trained briefly on synthetic captions, see training.py) and
then frozen; per-position final-layer hidden states are the product consumed
downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionMismatchError, SequenceTooLongError

KIND_TEXT = "text"
KIND_IMAGE = "image-patch"
KIND_QUERY = "query"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    vocab_size: int = 16
    max_positions: int = 256
    patch_size: int = 8
    image_channels: int = 3

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "vocab_size",
                     "max_positions", "patch_size", "image_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class TokenSequence:
    """Token ids with per-position kind tags and position indices."""

    ids: list[int]
    kinds: list[str] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.kinds:
            self.kinds = [KIND_TEXT] * len(self.ids)
        if not self.positions:
            self.positions = list(range(len(self.ids)))
        if not (len(self.ids) == len(self.kinds) == len(self.positions)):
            raise ValueError("ids, kinds and positions must have equal length")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("positions must be strictly increasing")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class HiddenStates:
    """Per-position hidden states from one layer (final layer by default)."""

    values: Tensor
    layer_index: int


class Tokenizer:
    """Whitespace word-level tokenizer over a fixed vocabulary.

    Unknown words map to a reserved UNK id; the mapping is total over ASCII
    input and round-trips exactly for in-vocabulary text.
    """

    def __init__(self, words: list[str] | None = None):
        if words is None:
            from .shapes import grammar_words
            words = grammar_words()
        self._itos = [PAD_TOKEN, UNK_TOKEN] + sorted(set(words))
        self._stoi = {w: i for i, w in enumerate(self._itos)}
        self.pad_id = self._stoi[PAD_TOKEN]
        self.unk_id = self._stoi[UNK_TOKEN]

    @property
    def vocab_size(self) -> int:
        return len(self._itos)

    def tokenize(self, text: str) -> TokenSequence:
        ids = [self._stoi.get(w, self.unk_id) for w in text.split()]
        return TokenSequence(ids=ids)

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self._itos[i] for i in ids)


class PatchEmbedder(nn.Module):
    """Single linear map from flattened non-overlapping patches to hidden_dim."""

    def __init__(self, config: BackboneConfig, generator: torch.Generator):
        super().__init__()
        self.patch_size = config.patch_size
        self.channels = config.image_channels
        in_dim = config.image_channels * config.patch_size ** 2
        self.proj = nn.Linear(in_dim, config.hidden_dim)
        _init_linear(self.proj, generator)

    def forward(self, image: Tensor) -> Tensor:
        c, h, w = image.shape
        p = self.patch_size
        if c != self.channels:
            raise DimensionMismatchError(f"expected {self.channels} channels, got {c}")
        if h % p != 0 or w % p != 0:
            raise DimensionMismatchError(
                f"image size {h}x{w} not divisible by patch_size {p}"
            )
        patches = image.unfold(1, p, p).unfold(2, p, p)  # [c, h/p, w/p, p, p]
        patches = patches.permute(1, 2, 0, 3, 4).reshape(-1, c * p * p)
        return self.proj(patches)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, generator: torch.Generator, causal: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.causal = causal
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        _init_linear(self.qkv, generator)
        _init_linear(self.out, generator)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            logits = logits.masked_fill(mask, float("-inf"))
        if key_padding_mask is not None:
            logits = logits.masked_fill(
                key_padding_mask.view(b, 1, 1, t), float("-inf")
            )
        attn = F.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block: attention then 4x GELU MLP."""

    def __init__(self, dim: int, num_heads: int, generator: torch.Generator, causal: bool = True):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads, generator, causal=causal)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )
        _init_linear(self.mlp[0], generator)
        _init_linear(self.mlp[2], generator)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), key_padding_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class ToyBackbone(nn.Module):
    """Decoder-only transformer with learned absolute positions.

    Position embeddings are shared across text/image/query kinds with
    continuing indices; they are added inside forward_causal so that
    embed_image stays a pure per-patch map.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.position_embedding = nn.Embedding(config.max_positions, config.hidden_dim)
        _init_embedding(self.token_embedding, g)
        _init_embedding(self.position_embedding, g)
        self.patch_embedder = PatchEmbedder(config, g)
        self.blocks = nn.ModuleList(
            Block(config.hidden_dim, config.num_heads, g) for _ in range(config.num_layers)
        )
        self.ln_f = nn.LayerNorm(config.hidden_dim)
        self.lm_head = nn.Linear(config.hidden_dim, config.vocab_size, bias=False)
        _init_linear(self.lm_head, g)

    def embed_tokens(self, ids: Tensor | list[int]) -> Tensor:
        if not isinstance(ids, Tensor):
            ids = torch.tensor(ids, dtype=torch.long)
        return self.token_embedding(ids)

    def embed_image(self, image: Tensor) -> Tensor:
        """Map a [channels, H, W] image to [num_patches, hidden_dim]."""
        return self.patch_embedder(image)

    def forward_causal(
        self,
        seq_embeddings: Tensor,
        layer_index: int = -1,
        key_padding_mask: Tensor | None = None,
    ) -> HiddenStates:
        """Run the causal stack over [L, D] or [B, L, D] embeddings.

        Output row i depends only on input rows 0..i. layer_index selects
        which block's output to return; -1 means final layer (after the
        closing LayerNorm). key_padding_mask ([B, L], True = masked) removes
        filler positions from attention; position 0 must never be masked.
        """
        squeeze = seq_embeddings.dim() == 2
        x = seq_embeddings.unsqueeze(0) if squeeze else seq_embeddings
        t = x.shape[1]
        if t > self.config.max_positions:
            raise SequenceTooLongError(
                f"sequence length {t} exceeds max_positions {self.config.max_positions}"
            )
        pos = torch.arange(t, device=x.device)
        x = x + self.position_embedding(pos).to(x.dtype)
        n_layers = len(self.blocks)
        target = layer_index if layer_index >= 0 else n_layers + layer_index
        for i, block in enumerate(self.blocks):
            x = block(x, key_padding_mask)
            if i == target and i != n_layers - 1:
                out = x
                break
        else:
            out = self.ln_f(x)
        if squeeze:
            out = out.squeeze(0)
        return HiddenStates(values=out, layer_index=target)

    def next_token_logits(self, ids: Tensor, pad_id: int | None = None) -> Tensor:
        """Logits for next-token prediction; used by the brief pre-training pass."""
        mask = None
        if pad_id is not None:
            mask = ids == pad_id
            mask[..., 0] = False
        h = self.forward_causal(self.embed_tokens(ids), key_padding_mask=mask).values
        return self.lm_head(h)


def _init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    with torch.no_grad():
        layer.weight.normal_(0.0, 0.02, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


def _init_embedding(layer: nn.Embedding, generator: torch.Generator) -> None:
    with torch.no_grad():
        layer.weight.normal_(0.0, 0.02, generator=generator)

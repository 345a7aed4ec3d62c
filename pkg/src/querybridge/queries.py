"""Learnable query bank, sequence assembly and condition extraction.

The bank's rows are appended after all conditioning content; under causal
masking they attend back over the whole prompt, and their final-layer hidden
states become the generation conditions. Also implements the two reference
condition sources: frozen random queries and last-layer input-token
embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import ToyBackbone, TokenSequence
from .errors import DimensionMismatchError, SequenceTooLongError

SOURCE_LEARNABLE = "learnable_queries"
SOURCE_RANDOM = "random_queries"
SOURCE_LAST_LAYER = "last_layer_embedding"


class QueryBank(nn.Module):
    """N x D block of query vectors, Gaussian-initialized (mean 0, std 0.02)."""

    def __init__(self, num_tokens: int, dim: int, trainable: bool = True, init_seed: int = 0):
        super().__init__()
        if num_tokens <= 0:
            raise ValueError(f"num_tokens must be positive, got {num_tokens}")
        if dim <= 0:
            raise ValueError(f"dim must be positive, got {dim}")
        g = torch.Generator().manual_seed(init_seed)
        weights = torch.empty(num_tokens, dim).normal_(0.0, 0.02, generator=g)
        self.weights = nn.Parameter(weights, requires_grad=trainable)
        self.num_tokens = num_tokens
        self.dim = dim
        self.trainable = trainable
        self.init_seed = init_seed


@dataclass
class SequenceLayout:
    """Assembled [prompt | images | queries] embeddings with span metadata.

    embeddings is [L, D] for a single example or [B, L, D] for a batch that
    shares one layout.
    """

    embeddings: Tensor
    prompt_span: tuple[int, int]
    image_span: tuple[int, int] | None
    query_span: tuple[int, int]

    def __post_init__(self):
        length = self.embeddings.shape[-2]
        spans = [self.prompt_span, self.query_span]
        if self.image_span is not None:
            spans.insert(1, self.image_span)
        total = sum(e - s for s, e in spans)
        if total != length:
            raise ValueError(f"span lengths {total} do not cover sequence length {length}")
        for (_, e1), (s2, _) in zip(sorted(spans), sorted(spans)[1:]):
            if e1 != s2:
                raise ValueError("spans must be contiguous and non-overlapping")
        if self.query_span[1] != length:
            raise ValueError("query span must occupy the final positions")

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]


@dataclass
class ConditionSet:
    """Variable-length set of condition vectors handed to the decoder side."""

    vectors: Tensor  # [M, dim] or [B, M, dim]
    source: str

    @property
    def num_vectors(self) -> int:
        return self.vectors.shape[-2]

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]


def assemble(
    backbone: ToyBackbone,
    prompt: TokenSequence,
    images: list[Tensor] | None,
    bank: QueryBank,
    images_first: bool = False,
) -> SequenceLayout:
    """Build the conditioning sequence; query rows occupy the final N slots.

    Default order is [text | images | queries]; images_first swaps the two
    content blocks (used for instruction-style multimodal prompts). Image
    entries may be raw [C, H, W] images or precomputed [P, D] patch
    embeddings.
    """
    if bank.dim != backbone.config.hidden_dim:
        raise DimensionMismatchError(
            f"bank dim {bank.dim} != backbone hidden dim {backbone.config.hidden_dim}"
        )
    text = backbone.embed_tokens(prompt.ids) if prompt.ids else None
    patch_blocks = []
    for img in images or []:
        patch_blocks.append(img if img.dim() == 2 else backbone.embed_image(img))
    patches = torch.cat(patch_blocks, dim=0) if patch_blocks else None

    blocks = []
    n_text = 0 if text is None else text.shape[0]
    n_img = 0 if patches is None else patches.shape[0]
    if images_first:
        img_start, text_start = 0, n_img
    else:
        text_start, img_start = 0, n_text
    if text is not None:
        blocks.append((text_start, text))
    if patches is not None:
        blocks.append((img_start, patches))
    blocks.sort(key=lambda b: b[0])
    content = torch.cat([b for _, b in blocks], dim=0) if blocks else None

    n_content = n_text + n_img
    total = n_content + bank.num_tokens
    if total > backbone.config.max_positions:
        raise SequenceTooLongError(
            f"assembled length {total} exceeds max_positions {backbone.config.max_positions}"
        )
    parts = ([content] if content is not None else []) + [bank.weights]
    embeddings = torch.cat(parts, dim=0)
    return SequenceLayout(
        embeddings=embeddings,
        prompt_span=(text_start, text_start + n_text),
        image_span=(img_start, img_start + n_img) if n_img else None,
        query_span=(n_content, total),
    )


def extract_conditions(backbone: ToyBackbone, layout: SequenceLayout) -> ConditionSet:
    """Final-layer hidden states at the query positions."""
    hidden = backbone.forward_causal(layout.embeddings)
    s, e = layout.query_span
    source = SOURCE_LEARNABLE
    return ConditionSet(vectors=hidden.values[..., s:e, :], source=source)


def last_layer_embedding_conditions(
    backbone: ToyBackbone,
    prompt: TokenSequence,
    images: list[Tensor] | None = None,
) -> ConditionSet:
    """Reference source: final-layer hidden states of the input tokens themselves."""
    parts = []
    if prompt.ids:
        parts.append(backbone.embed_tokens(prompt.ids))
    for img in images or []:
        parts.append(img if img.dim() == 2 else backbone.embed_image(img))
    if not parts:
        raise ValueError("empty-condition: at least one input token is required")
    embeddings = torch.cat(parts, dim=0)
    hidden = backbone.forward_causal(embeddings)
    return ConditionSet(vectors=hidden.values, source=SOURCE_LAST_LAYER)


def random_query_conditions(
    backbone: ToyBackbone,
    prompt: TokenSequence,
    images: list[Tensor] | None,
    frozen_random_bank: QueryBank,
) -> ConditionSet:
    """Reference source: a frozen random bank; contract matches extract_conditions."""
    if frozen_random_bank.trainable:
        raise ValueError("random-query bank must be constructed with trainable=False")
    layout = assemble(backbone, prompt, images, frozen_random_bank)
    conditions = extract_conditions(backbone, layout)
    return ConditionSet(vectors=conditions.vectors, source=SOURCE_RANDOM)

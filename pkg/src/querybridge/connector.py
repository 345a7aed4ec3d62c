"""Trainable bridge from extracted conditions to the decoder's condition space.

Two variants: encode at the backbone width then project down/up (enc_proj),
or project first and encode at the decoder width (proj_enc). The encoder
mirrors the backbone block with bi-directional attention; a zero-layer
encoder degenerates to the bare affine projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import Block, _init_embedding, _init_linear
from .errors import DimensionMismatchError
from .queries import ConditionSet

VARIANT_ENC_PROJ = "enc_proj"
VARIANT_PROJ_ENC = "proj_enc"


@dataclass(frozen=True)
class ConnectorConfig:
    variant: str = VARIANT_ENC_PROJ
    num_layers: int = 4
    input_dim: int = 128  # backbone hidden dim
    model_dim: int = 128  # encoder width
    decoder_cond_dim: int = 192
    num_heads: int = 4
    max_rows: int = 256
    use_positions: bool = True

    def __post_init__(self):
        if self.variant not in (VARIANT_ENC_PROJ, VARIANT_PROJ_ENC):
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("input_dim", "model_dim", "decoder_cond_dim", "num_heads", "max_rows"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.variant == VARIANT_ENC_PROJ and self.model_dim != self.input_dim:
            raise ValueError("enc_proj encoder width must equal the backbone hidden dim")
        if self.variant == VARIANT_PROJ_ENC and self.model_dim != self.decoder_cond_dim:
            raise ValueError("proj_enc encoder width must equal decoder_cond_dim")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")


class Connector(nn.Module):
    def __init__(self, config: ConnectorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        self.proj = nn.Linear(config.input_dim, config.decoder_cond_dim)
        _init_linear(self.proj, g)
        if config.num_layers > 0:
            self.blocks = nn.ModuleList(
                Block(config.model_dim, config.num_heads, g, causal=False)
                for _ in range(config.num_layers)
            )
            self.ln_f = nn.LayerNorm(config.model_dim)
            if config.use_positions:
                self.position_embedding = nn.Embedding(config.max_rows, config.model_dim)
                _init_embedding(self.position_embedding, g)
            else:
                self.position_embedding = None
        else:
            self.blocks = nn.ModuleList()
            self.ln_f = None
            self.position_embedding = None

    def _encode(self, x: Tensor) -> Tensor:
        if not self.blocks:
            return x
        if self.position_embedding is not None:
            pos = torch.arange(x.shape[-2], device=x.device)
            x = x + self.position_embedding(pos).to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, vectors: Tensor) -> Tensor:
        """[.., M, input_dim] -> [.., M, decoder_cond_dim]; row count preserved."""
        if vectors.shape[-1] != self.config.input_dim:
            raise DimensionMismatchError(
                f"expected input dim {self.config.input_dim}, got {vectors.shape[-1]}"
            )
        squeeze = vectors.dim() == 2
        x = vectors.unsqueeze(0) if squeeze else vectors
        if x.shape[-2] > self.config.max_rows and self.position_embedding is not None:
            raise DimensionMismatchError(
                f"{x.shape[-2]} rows exceed connector max_rows {self.config.max_rows}"
            )
        if self.config.variant == VARIANT_ENC_PROJ:
            x = self.proj(self._encode(x))
        else:
            x = self._encode(self.proj(x))
        return x.squeeze(0) if squeeze else x


def connect(connector: Connector, conditions: ConditionSet) -> ConditionSet:
    return ConditionSet(vectors=connector(conditions.vectors), source=conditions.source)


def parameter_count(config: ConnectorConfig) -> int:
    """Exact scalar parameter count of Connector(config), computed closed-form."""
    w = config.model_dim
    per_layer = (
        2 * w                # ln1
        + 3 * w * w + 3 * w  # qkv
        + w * w + w          # attn out
        + 2 * w              # ln2
        + 4 * w * w + 4 * w  # mlp up
        + 4 * w * w + w      # mlp down
    )
    count = config.input_dim * config.decoder_cond_dim + config.decoder_cond_dim
    if config.num_layers > 0:
        count += config.num_layers * per_layer
        count += 2 * w  # final layer norm
        if config.use_positions:
            count += config.max_rows * w
    return count

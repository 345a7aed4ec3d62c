"""End-to-end generation pipeline: frozen backbone -> queries -> connector -> decoder.

Handles batched prompt padding (captions are padded to a fixed length with the
PAD token so one layout serves the whole batch), the three condition sources,
decoding, reconstruction and checkpoint round-trips.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch
from torch import Tensor, nn

from . import checkpoint as ckpt
from .backbone import BackboneConfig, Tokenizer, ToyBackbone
from .connector import Connector, ConnectorConfig, connect
from .diffusion import ConditionalDenoiser, DiffusionConfig, NoiseSchedule, sample
from .errors import ConfigError
from .queries import (
    SOURCE_LAST_LAYER,
    SOURCE_LEARNABLE,
    SOURCE_RANDOM,
    ConditionSet,
    QueryBank,
)

SOURCES = (SOURCE_LEARNABLE, SOURCE_RANDOM, SOURCE_LAST_LAYER)


class GenerationPipeline(nn.Module):
    def __init__(
        self,
        backbone: ToyBackbone,
        tokenizer: Tokenizer,
        bank: QueryBank | None,
        connector: Connector,
        denoiser: ConditionalDenoiser,
        source: str = SOURCE_LEARNABLE,
        prompt_pad: int = 16,
        instruction_pad: int = 24,
    ):
        super().__init__()
        if source not in SOURCES:
            raise ConfigError(f"unknown condition source {source!r}")
        if source != SOURCE_LAST_LAYER and bank is None:
            raise ConfigError(f"source {source!r} requires a query bank")
        self.backbone = backbone
        self.tokenizer = tokenizer
        self.bank = bank
        self.connector = connector
        self.denoiser = denoiser
        self.schedule = NoiseSchedule(denoiser.config)
        self.source = source
        self.prompt_pad = prompt_pad
        self.instruction_pad = instruction_pad

    @classmethod
    def build(
        cls,
        backbone_config: BackboneConfig | None = None,
        connector_config: ConnectorConfig | None = None,
        diffusion_config: DiffusionConfig | None = None,
        source: str = SOURCE_LEARNABLE,
        num_query_tokens: int = 16,
        seed: int = 0,
        prompt_pad: int = 16,
        instruction_pad: int = 24,
    ) -> "GenerationPipeline":
        tokenizer = Tokenizer()
        if backbone_config is None:
            backbone_config = BackboneConfig()
        if backbone_config.vocab_size != tokenizer.vocab_size:
            backbone_config = BackboneConfig(
                **{**asdict(backbone_config), "vocab_size": tokenizer.vocab_size}
            )
        backbone = ToyBackbone(backbone_config, seed=seed)
        if connector_config is None:
            connector_config = ConnectorConfig(
                input_dim=backbone_config.hidden_dim,
                model_dim=backbone_config.hidden_dim,
            )
        if diffusion_config is None:
            diffusion_config = DiffusionConfig(
                cond_dim=connector_config.decoder_cond_dim
            )
        if connector_config.input_dim != backbone_config.hidden_dim:
            raise ConfigError("connector input_dim must equal backbone hidden_dim")
        if diffusion_config.cond_dim != connector_config.decoder_cond_dim:
            raise ConfigError("diffusion cond_dim must equal connector decoder_cond_dim")
        bank = None
        if source != SOURCE_LAST_LAYER:
            bank = QueryBank(
                num_query_tokens,
                backbone_config.hidden_dim,
                trainable=source == SOURCE_LEARNABLE,
                init_seed=seed + 1,
            )
        connector = Connector(connector_config, seed=seed + 2)
        denoiser = ConditionalDenoiser(diffusion_config, seed=seed + 3)
        return cls(
            backbone, tokenizer, bank, connector, denoiser,
            source=source, prompt_pad=prompt_pad, instruction_pad=instruction_pad,
        )

    # ---- condition extraction (batched) ----

    def _pad_ids(self, texts: list[str], pad_to: int) -> tuple[Tensor, Tensor]:
        """Right-pad token ids to a fixed length; the mask marks pad positions."""
        rows = []
        for text in texts:
            ids = self.tokenizer.tokenize(text).ids[:pad_to]
            rows.append(ids + [self.tokenizer.pad_id] * (pad_to - len(ids)))
        ids = torch.tensor(rows, dtype=torch.long)
        return ids, ids == self.tokenizer.pad_id

    def _extract(self, embeddings: Tensor, pad_mask: Tensor | None) -> Tensor:
        """Append query rows to [B, L, D] content, run the stack, slice queries."""
        b, length = embeddings.shape[:2]
        queries = self.bank.weights.unsqueeze(0).expand(b, -1, -1).to(embeddings.dtype)
        seq = torch.cat([embeddings, queries], dim=1)
        mask = None
        if pad_mask is not None:
            mask = torch.cat(
                [pad_mask, torch.zeros(b, self.bank.num_tokens, dtype=torch.bool)], dim=1
            )
        hidden = self.backbone.forward_causal(seq, key_padding_mask=mask).values
        return hidden[:, length:, :]

    def extract_backbone_conditions(
        self, content: Tensor, pad_mask: Tensor | None = None
    ) -> ConditionSet:
        """Backbone-space conditions for [B, L, D] content embeddings."""
        if self.source == SOURCE_LAST_LAYER:
            vectors = self.backbone.forward_causal(content, key_padding_mask=pad_mask).values
        else:
            vectors = self._extract(content, pad_mask)
        return ConditionSet(vectors=vectors, source=self.source)

    def conditions_for_text(self, captions: list[str]) -> ConditionSet:
        ids, pad_mask = self._pad_ids(captions, self.prompt_pad)
        content = self.backbone.embed_tokens(ids)
        return connect(self.connector, self.extract_backbone_conditions(content, pad_mask))

    def conditions_for_images(self, images: Tensor) -> ConditionSet:
        patches = torch.stack([self.backbone.embed_image(img) for img in images])
        return connect(self.connector, self.extract_backbone_conditions(patches))

    def conditions_for_instruction(
        self, source_images: Tensor, instructions: list[str]
    ) -> ConditionSet:
        """[source patches | instruction tokens | queries] conditioning."""
        patches = torch.stack(
            [
                torch.cat([self.backbone.embed_image(img) for img in sample_sources])
                for sample_sources in source_images
            ]
        )
        ids, text_mask = self._pad_ids(instructions, self.instruction_pad)
        text = self.backbone.embed_tokens(ids)
        content = torch.cat([patches, text], dim=1)
        pad_mask = torch.cat(
            [torch.zeros(patches.shape[:2], dtype=torch.bool), text_mask], dim=1
        )
        return connect(self.connector, self.extract_backbone_conditions(content, pad_mask))

    # ---- generation ----

    def decode(
        self, conditions: ConditionSet, seed: int = 0, guidance_scale: float | None = None
    ) -> Tensor:
        return sample(
            self.denoiser, self.schedule, conditions, seed=seed,
            guidance_scale=guidance_scale,
        )

    def generate(
        self, captions: list[str], seed: int = 0, guidance_scale: float | None = None
    ) -> Tensor:
        with torch.no_grad():
            conditions = self.conditions_for_text(captions)
        return self.decode(conditions, seed=seed, guidance_scale=guidance_scale)

    def reconstruct(self, images: Tensor, seed: int = 0, guidance_scale: float = 0.0) -> Tensor:
        with torch.no_grad():
            conditions = self.conditions_for_images(images)
        return self.decode(conditions, seed=seed, guidance_scale=guidance_scale)

    # ---- parameter groups and persistence ----

    def parameter_groups(self) -> dict[str, nn.Module | None]:
        return {
            "backbone": self.backbone,
            "query_bank": self.bank,
            "connector": self.connector,
            "decoder": self.denoiser,
        }

    def describe(self) -> dict:
        desc = {
            "source": self.source,
            "prompt_pad": self.prompt_pad,
            "instruction_pad": self.instruction_pad,
            "backbone": asdict(self.backbone.config),
            "connector": asdict(self.connector.config),
            "diffusion": asdict(self.denoiser.config),
        }
        if self.bank is not None:
            desc["query_bank"] = {
                "num_tokens": self.bank.num_tokens,
                "trainable": self.bank.trainable,
                "init_seed": self.bank.init_seed,
            }
        return desc

    def save(self, path: str | Path, extra_metadata: dict | None = None) -> Path:
        tensors = {}
        for name, module in self.parameter_groups().items():
            if module is not None:
                tensors.update(ckpt.state_dict_tensors(module, name))
        metadata = {"pipeline": self.describe()}
        if extra_metadata:
            metadata.update(extra_metadata)
        return ckpt.save_archive(path, tensors, metadata)

    @classmethod
    def load(cls, path: str | Path) -> tuple["GenerationPipeline", dict]:
        tensors, metadata = ckpt.load_archive(path)
        desc = metadata["pipeline"]
        pipe = cls.build(
            backbone_config=BackboneConfig(**desc["backbone"]),
            connector_config=ConnectorConfig(**desc["connector"]),
            diffusion_config=DiffusionConfig(**desc["diffusion"]),
            source=desc["source"],
            num_query_tokens=desc.get("query_bank", {}).get("num_tokens", 16),
            prompt_pad=desc["prompt_pad"],
            instruction_pad=desc["instruction_pad"],
        )
        for name, module in pipe.parameter_groups().items():
            if module is not None:
                ckpt.load_state_dict_tensors(module, tensors, name)
        return pipe, metadata

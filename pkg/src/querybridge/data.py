"""Training datasets and deterministic batching."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import shapes
from .errors import ObjectiveBatchMismatchError


@dataclass
class ShapesData:
    """In-memory shapes dataset split into train/held-out by caption hash."""

    images: Tensor  # [n, 3, H, W]
    captions: list[str]

    @classmethod
    def generate(cls, n: int, seed: int, held_out: bool = False) -> "ShapesData":
        samples = shapes.generate_dataset(n, seed)
        keep = [s for s in samples if shapes.is_held_out(s.caption) == held_out]
        images = torch.from_numpy(np.stack([s.image for s in keep]))
        return cls(images=images, captions=[s.caption for s in keep])

    def __len__(self) -> int:
        return len(self.captions)

    def batch(self, idx: list[int]) -> dict:
        return {
            "images": self.images[idx],
            "captions": [self.captions[i] for i in idx],
        }


@dataclass
class InstructionRecord:
    source_refs: list[str]
    target_ref: str
    instruction: str


class InstructionData:
    """Instruction-tuning pairs loaded from a curation JSONL plus an image root."""

    def __init__(self, records: list[InstructionRecord], images_root: str | Path):
        self.records = records
        self.images_root = Path(images_root)

    @classmethod
    def load(cls, samples_path: str | Path, images_root: str | Path) -> "InstructionData":
        records = []
        with Path(samples_path).open() as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                records.append(
                    InstructionRecord(
                        source_refs=list(obj["source_refs"]),
                        target_ref=obj["target_ref"],
                        instruction=obj["instruction"],
                    )
                )
        return cls(records, images_root)

    def __len__(self) -> int:
        return len(self.records)

    def num_sources(self, i: int) -> int:
        return len(self.records[i].source_refs)

    def batch(self, idx: list[int]) -> dict:
        recs = [self.records[i] for i in idx]
        widths = {len(r.source_refs) for r in recs}
        if len(widths) != 1:
            raise ObjectiveBatchMismatchError(
                "instruction batches must share one source count; got "
                f"{sorted(widths)}"
            )
        sources = torch.stack(
            [
                torch.stack(
                    [
                        torch.from_numpy(shapes.load_image(self.images_root / ref))
                        for ref in r.source_refs
                    ]
                )
                for r in recs
            ]
        )
        targets = torch.stack(
            [
                torch.from_numpy(shapes.load_image(self.images_root / r.target_ref))
                for r in recs
            ]
        )
        return {
            "source_images": sources,
            "instructions": [r.instruction for r in recs],
            "targets": targets,
        }


def batch_indices(
    n: int, batch_size: int, epoch: int, seed: int, buckets: list[int] | None = None
) -> list[list[int]]:
    """Deterministic per-epoch batch order.

    When buckets is given (one key per example), each batch draws from a
    single bucket so ragged examples never mix.
    """
    g = torch.Generator().manual_seed(seed * 100003 + epoch)
    perm = torch.randperm(n, generator=g).tolist()
    if buckets is None:
        groups = {0: perm}
    else:
        groups = {}
        for i in perm:
            groups.setdefault(buckets[i], []).append(i)
    batches = []
    for key in sorted(groups):
        order = groups[key]
        for start in range(0, len(order) - batch_size + 1, batch_size):
            batches.append(order[start:start + batch_size])
        rem = len(order) % batch_size
        if rem and len(order) < batch_size:
            batches.append(order)  # dataset smaller than one batch
    if not batches and perm:
        batches = [perm]
    return batches

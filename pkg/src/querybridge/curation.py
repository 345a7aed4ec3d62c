"""Instruction-tuning data curation: similarity grouping plus generated prompts.

Captions are embedded (hashed bag-of-words by default, any embedding service
as a drop-in), greedily grouped by cosine similarity to an in-order seed,
and each group's least-central member becomes the generation target. A
pluggable generator client writes one transformation instruction per group.
"""

from __future__ import annotations

import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from hashlib import blake2b
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    ClientUnavailableError,
    EmptyResponseError,
    GroupTooSmallError,
    TransientGenerationError,
)

PROMPT_ASSET = "instruction_prompt_v1.txt"
DEFAULT_THRESHOLD = 0.5
DEFAULT_MAX_GROUP = 6


def system_prompt() -> str:
    """The versioned instruction-generation system prompt, byte-stable."""
    return (
        resources.files("querybridge.assets").joinpath(PROMPT_ASSET).read_text()
    )


@dataclass
class CaptionedImage:
    image_ref: str
    caption: str
    embedding: np.ndarray | None = None


@dataclass
class CurationGroup:
    members: list[CaptionedImage]
    similarity: np.ndarray  # symmetric [k, k]
    target_index: int = -1
    instruction: str | None = None

    def __post_init__(self):
        k = len(self.members)
        if self.similarity.shape != (k, k):
            raise ValueError("similarity matrix must be [k, k]")


@dataclass
class InstructionSample:
    source_refs: list[str]
    target_ref: str
    instruction: str
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.source_refs:
            raise ValueError("source_refs must be non-empty")
        if self.target_ref in self.source_refs:
            raise ValueError("target_ref must not appear among source_refs")

    def to_json(self) -> str:
        return json.dumps(
            {
                "source_refs": self.source_refs,
                "target_ref": self.target_ref,
                "instruction": self.instruction,
                "provenance": self.provenance,
            },
            sort_keys=True,
        )


def normalize_caption(caption: str) -> str:
    return re.sub(r"\s+", " ", caption.strip().lower())


class HashedBowEmbedder:
    """Deterministic hashed bag-of-words embedding, L2-normalized."""

    def __init__(self, dim: int = 512):
        self.dim = dim
        self.embedder_id = f"hashed-bow/d{dim}/v1"

    def _bucket(self, word: str) -> int:
        digest = blake2b(word.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed(self, captions: list[str]) -> np.ndarray:
        out = np.zeros((len(captions), self.dim), dtype=np.float64)
        for i, caption in enumerate(captions):
            for word in normalize_caption(caption).split():
                out[i, self._bucket(word)] += 1.0
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


def embed_captions(items: list[CaptionedImage], embedder=None) -> list[CaptionedImage]:
    """Populate unit-norm caption embeddings in place (and return the items)."""
    if embedder is None:
        embedder = HashedBowEmbedder()
    for item in items:
        if not item.caption or not item.caption.strip():
            raise ValueError(f"empty caption for image {item.image_ref!r}")
    vectors = embedder.embed([item.caption for item in items])
    for item, vec in zip(items, vectors):
        item.embedding = vec
    return items


def select_target(group: CurationGroup) -> int:
    """Index with minimum mean similarity to the other members; ties -> lowest.

    Means within 1e-12 of the minimum count as tied, so float summation
    order cannot flip a mathematical tie.
    """
    k = len(group.members)
    if k < 2:
        raise GroupTooSmallError(f"group needs >= 2 members, got {k}")
    sims = group.similarity
    means = (sims.sum(axis=1) - sims.diagonal()) / (k - 1)
    lowest = means.min()
    return int(np.flatnonzero(means <= lowest + 1e-12)[0])


def group(
    items: list[CaptionedImage],
    threshold: float = DEFAULT_THRESHOLD,
    max_group: int = DEFAULT_MAX_GROUP,
) -> list[CurationGroup]:
    """Greedy seed-based grouping in input order.

    The first ungrouped item seeds a group; later ungrouped items join while
    cosine(seed, item) >= threshold, up to max_group members. Singletons are
    discarded. Deterministic for a fixed input order.
    """
    for item in items:
        if item.embedding is None:
            raise ValueError(f"item {item.image_ref!r} has no embedding; run embed_captions")
    taken = [False] * len(items)
    groups = []
    for i, seed_item in enumerate(items):
        if taken[i]:
            continue
        member_idx = [i]
        for j in range(i + 1, len(items)):
            if len(member_idx) >= max_group:
                break
            if taken[j]:
                continue
            sim = float(seed_item.embedding @ items[j].embedding)
            if sim >= threshold:
                member_idx.append(j)
        if len(member_idx) < 2:
            continue
        for j in member_idx:
            taken[j] = True
        members = [items[j] for j in member_idx]
        vectors = np.stack([m.embedding for m in members])
        sims = vectors @ vectors.T
        g = CurationGroup(members=members, similarity=sims)
        g.target_index = select_target(g)
        groups.append(g)
    return groups


class EchoStubGenerator:
    """Offline client: folds the captions into a fixed instruction template."""

    generator_id = "echo-stub/v1"

    def generate(self, request: dict) -> str:
        sources = ", ".join(request["source_captions"])
        return f"show {sources} transformed into {request['target_caption']}"


class ScriptedFlakyGenerator:
    """Test client failing transiently a fixed number of times before succeeding."""

    generator_id = "scripted-flaky/v1"

    def __init__(self, failures: int, inner=None):
        self.failures = failures
        self.calls = 0
        self.inner = inner or EchoStubGenerator()

    def generate(self, request: dict) -> str:
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientGenerationError(f"scripted failure {self.calls}")
        return self.inner.generate(request)


class HttpGenerator:
    """Remote client: POSTs the request JSON and expects {'instruction': ...}."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.generator_id = f"http/{endpoint}"

    def generate(self, request: dict) -> str:
        import urllib.error
        import urllib.request

        body = json.dumps(request).encode()
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except urllib.error.URLError as exc:
            raise TransientGenerationError(str(exc)) from exc
        return payload.get("instruction", "")


def build_request(group_: CurationGroup) -> dict:
    """Request payload: system prompt plus source/target captions and refs."""
    target = group_.members[group_.target_index]
    sources = [m for i, m in enumerate(group_.members) if i != group_.target_index]
    return {
        "system_prompt": system_prompt(),
        "source_captions": [m.caption for m in sources],
        "target_caption": target.caption,
        "image_refs": [m.image_ref for m in group_.members],
    }


def generate_instruction(
    group_: CurationGroup,
    client,
    max_retries: int = 3,
    backoff: float = 0.05,
    group_id: str = "",
) -> InstructionSample:
    """Ask the client for an instruction; retries transient failures with backoff."""
    if group_.target_index < 0:
        group_.target_index = select_target(group_)
    request = build_request(group_)
    retries = 0
    while True:
        try:
            text = client.generate(request)
            break
        except TransientGenerationError as exc:
            retries += 1
            if retries > max_retries:
                raise ClientUnavailableError(
                    f"generator failed after {max_retries} retries: {exc}"
                ) from exc
            time.sleep(backoff * retries)
    if not text or not text.strip():
        raise EmptyResponseError("generator returned an empty instruction")
    target = group_.members[group_.target_index]
    sources = [m for i, m in enumerate(group_.members) if i != group_.target_index]
    sample = InstructionSample(
        source_refs=[m.image_ref for m in sources],
        target_ref=target.image_ref,
        instruction=text.strip(),
        provenance={
            "group_id": group_id,
            "generator_id": getattr(client, "generator_id", "unknown"),
            "retries": retries,
        },
    )
    sample.validate()
    return sample


class RateLimiter:
    """Minimum interval between client calls, shared across worker threads."""

    def __init__(self, min_interval: float):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._next_free = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            delay = max(0.0, self._next_free - now)
            self._next_free = max(now, self._next_free) + self.min_interval
        if delay > 0:
            time.sleep(delay)


def generate_instructions(
    groups: list[CurationGroup],
    client,
    max_in_flight: int = 4,
    min_interval: float = 0.0,
    max_retries: int = 3,
) -> list[InstructionSample]:
    """Generate one sample per group, bounded-parallel with rate limiting."""
    limiter = RateLimiter(min_interval)

    def work(pair):
        idx, g = pair
        limiter.wait()
        return generate_instruction(g, client, max_retries=max_retries, group_id=f"g{idx:05d}")

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        samples = list(pool.map(work, enumerate(groups)))
    for g, s in zip(groups, samples):
        g.instruction = s.instruction
    return samples


def load_manifest(path: str | Path) -> list[CaptionedImage]:
    items = []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            items.append(CaptionedImage(image_ref=obj["image_ref"], caption=obj["caption"]))
    return items


def write_samples(samples: list[InstructionSample], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")
    return path


def curate(
    manifest_path: str | Path,
    out_path: str | Path,
    client=None,
    embedder=None,
    threshold: float = DEFAULT_THRESHOLD,
    max_group: int = DEFAULT_MAX_GROUP,
    max_in_flight: int = 4,
) -> list[InstructionSample]:
    """Full pipeline: manifest -> embeddings -> groups -> instructions -> JSONL."""
    items = load_manifest(manifest_path)
    embed_captions(items, embedder=embedder)
    groups = group(items, threshold=threshold, max_group=max_group)
    client = client or EchoStubGenerator()
    samples = generate_instructions(groups, client, max_in_flight=max_in_flight)
    write_samples(samples, out_path)
    return samples

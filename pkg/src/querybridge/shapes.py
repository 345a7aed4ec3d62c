"""Synthetic colored-shapes dataset: invertible caption grammar plus renderer.

Scenes hold 1..3 (shape, color, position) items on a 32x32 canvas. The
caption grammar is small (~270 canonical captions) and exactly parseable, so
prompt alignment can be scored programmatically against rendered or sampled
images. Held-out membership is decided by hashing the canonical caption.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UnparseableCaptionError

CANVAS = 32
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SHAPES = ("circle", "square", "triangle")
POSITIONS = {
    "left": (6, 16),
    "right": (26, 16),
    "top": (16, 6),
    "bottom": (16, 26),
    "center": (16, 16),
}
# render slots for items whose caption states no position
_SLOTS = {1: ["center"], 2: ["left", "right"], 3: ["left", "center", "right"]}


@dataclass(frozen=True)
class SceneItem:
    shape: str
    color: str
    stated_position: str | None
    render_position: str


@dataclass
class ShapesSpec:
    items: list[SceneItem]
    caption: str
    canvas: int = CANVAS

    def expected_tuples(self) -> list[tuple[str, str, str | None]]:
        """(shape, color, stated-position) tuples the alignment scorer checks."""
        return [(it.shape, it.color, it.stated_position) for it in self.items]


def grammar_words() -> list[str]:
    return list(COLORS) + list(SHAPES) + list(POSITIONS) + ["and", "at"]


def parse_caption(caption: str) -> list[tuple[str, str, str | None]]:
    """Parse a grammar caption into (shape, color, stated-position) tuples."""
    tokens = caption.split()
    if not tokens:
        raise UnparseableCaptionError("empty caption")
    items: list[list[str]] = [[]]
    for tok in tokens:
        if tok == "and":
            items.append([])
        else:
            items[-1].append(tok)
    if not 1 <= len(items) <= 3:
        raise UnparseableCaptionError(f"expected 1..3 items, got {len(items)}")
    parsed = []
    for words in items:
        if len(words) == 4 and words[2] == "at":
            words = words[:2] + words[3:]
        if len(words) not in (2, 3):
            raise UnparseableCaptionError(f"malformed item {' '.join(words)!r}")
        color, shape = words[0], words[1]
        pos = words[2] if len(words) == 3 else None
        if color not in COLORS:
            raise UnparseableCaptionError(f"unknown color {color!r}")
        if shape not in SHAPES:
            raise UnparseableCaptionError(f"unknown shape {shape!r}")
        if pos is not None and pos not in POSITIONS:
            raise UnparseableCaptionError(f"unknown position {pos!r}")
        parsed.append((shape, color, pos))
    return parsed


def spec_from_caption(caption: str) -> ShapesSpec:
    """Derive the full scene from a caption; unstated positions fall to slots."""
    parsed = parse_caption(caption)
    slots = _SLOTS[len(parsed)]
    items = [
        SceneItem(shape, color, pos, pos if pos is not None else slots[i])
        for i, (shape, color, pos) in enumerate(parsed)
    ]
    return ShapesSpec(items=items, caption=caption)


def canonical_caption(items: list[SceneItem]) -> str:
    parts = []
    for it in items:
        words = [it.color, it.shape]
        if it.stated_position is not None:
            words.append(it.stated_position)
        parts.append(" ".join(words))
    return " and ".join(parts)


def _shape_mask(shape: str, cx: int, cy: int, canvas: int) -> np.ndarray:
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= 18.49
    if shape == "square":
        return (np.abs(dx) <= 4) & (np.abs(dy) <= 4)
    if shape == "triangle":
        # apex (0,-5), base corners (-4,4) and (4,4); sized so two same-color
        # shapes in adjacent slots never form one connected blob
        inside = (dy >= -5) & (dy <= 4)
        width = 4.0 * (dy + 5) / 9.0
        return inside & (np.abs(dx) <= width)
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: ShapesSpec) -> np.ndarray:
    """Render a scene to a float32 [3, canvas, canvas] image in [0, 1]."""
    img = np.zeros((3, spec.canvas, spec.canvas), dtype=np.float32)
    for it in spec.items:
        cx, cy = POSITIONS[it.render_position]
        mask = _shape_mask(it.shape, cx, cy, spec.canvas)
        rgb = COLORS[it.color]
        for ch in range(3):
            img[ch][mask] = rgb[ch]
    return img


def all_canonical_captions() -> list[str]:
    """Every caption the generator can emit, in canonical (no 'at') form."""
    singles = [(s, c) for c in COLORS for s in SHAPES]
    captions = [f"{c} {s}" for s, c in singles]
    captions += [f"{c} {s} {p}" for s, c in singles for p in POSITIONS]
    captions += [
        f"{c1} {s1} and {c2} {s2}"
        for s1, c1 in singles
        for s2, c2 in singles
        if (s1, c1) != (s2, c2)
    ]
    captions += [
        f"{c1} circle and {c2} square and {c3} triangle"
        for c1 in COLORS
        for c2 in COLORS
        for c3 in COLORS
    ]
    return captions


def is_held_out(caption: str) -> bool:
    """Split by canonical-caption hash; ~20% of scenes are held out."""
    canon = canonical_caption(spec_from_caption(caption).items)
    digest = hashlib.md5(canon.encode()).digest()
    return digest[0] % 5 == 0


@dataclass
class Sample:
    image: np.ndarray
    caption: str
    spec: ShapesSpec = field(repr=False)


def _sample_spec(rng: np.random.Generator) -> ShapesSpec:
    singles = [(s, c) for c in COLORS for s in SHAPES]
    kind = rng.choice(4, p=[0.45, 0.15, 0.25, 0.15])
    if kind == 0:
        shape, color = singles[rng.integers(len(singles))]
        pos = list(POSITIONS)[rng.integers(len(POSITIONS))]
        items = [SceneItem(shape, color, pos, pos)]
    elif kind == 1:
        shape, color = singles[rng.integers(len(singles))]
        items = [SceneItem(shape, color, None, "center")]
    elif kind == 2:
        i, j = rng.choice(len(singles), size=2, replace=False)
        (s1, c1), (s2, c2) = singles[i], singles[j]
        items = [SceneItem(s1, c1, None, "left"), SceneItem(s2, c2, None, "right")]
    else:
        colors = [list(COLORS)[rng.integers(len(COLORS))] for _ in range(3)]
        items = [
            SceneItem(shape, color, None, slot)
            for shape, color, slot in zip(SHAPES, colors, _SLOTS[3])
        ]
    return ShapesSpec(items=items, caption=canonical_caption(items))


def _with_synonyms(caption: str, rng: np.random.Generator) -> str:
    """Randomly use the 'at <position>' paraphrase for located items."""
    parts = caption.split(" and ")
    out = []
    for part in parts:
        words = part.split()
        if len(words) == 3 and rng.random() < 0.5:
            words = words[:2] + ["at", words[2]]
        out.append(" ".join(words))
    return " and ".join(out)


def generate_dataset(n: int, seed: int) -> list[Sample]:
    """Deterministically generate n (image, caption, spec) samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        spec = _sample_spec(rng)
        caption = _with_synonyms(spec.caption, rng)
        spec = ShapesSpec(items=spec.items, caption=caption)
        samples.append(Sample(image=render(spec), caption=caption, spec=spec))
    return samples


def save_dataset(samples: list[Sample], out_dir: str | Path) -> Path:
    """Write PNG files plus a JSONL caption manifest; returns manifest path."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w") as fh:
        for i, s in enumerate(samples):
            name = f"img_{i:05d}.png"
            arr = (np.clip(s.image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0)).save(out / name)
            fh.write(json.dumps({"image_ref": name, "caption": s.caption}) + "\n")
    return manifest


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)

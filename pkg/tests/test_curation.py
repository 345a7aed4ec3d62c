import json

import numpy as np
import pytest

from querybridge import curation
from querybridge.curation import (
    CaptionedImage,
    CurationGroup,
    EchoStubGenerator,
    HashedBowEmbedder,
    ScriptedFlakyGenerator,
    embed_captions,
    generate_instruction,
    generate_instructions,
    group,
    select_target,
    system_prompt,
)
from querybridge.errors import (
    ClientUnavailableError,
    EmptyResponseError,
    GroupTooSmallError,
    TransientGenerationError,
)


def items_from_captions(captions):
    items = [CaptionedImage(image_ref=f"img_{i}.png", caption=c)
             for i, c in enumerate(captions)]
    return embed_captions(items)


def items_with_similarity(sims: np.ndarray):
    """Build items whose embeddings realize the given Gram matrix exactly."""
    chol = np.linalg.cholesky(sims + 1e-9 * np.eye(len(sims)))
    items = []
    for i in range(len(sims)):
        vec = np.zeros(len(sims))
        vec[:len(sims)] = chol[i]
        vec /= np.linalg.norm(vec)
        items.append(CaptionedImage(image_ref=f"g{i}.png", caption=f"caption {i}",
                                    embedding=vec))
    return items


# ---- embeddings ----

def test_identical_captions_have_similarity_one():
    items = items_from_captions(["red circle at left", "red circle at left"])
    sim = float(items[0].embedding @ items[1].embedding)
    assert abs(sim - 1.0) < 1e-6


def test_embeddings_are_unit_norm():
    items = items_from_captions(["red circle", "blue square and green triangle"])
    for item in items:
        assert abs(np.linalg.norm(item.embedding) - 1.0) < 1e-6


def test_caption_normalization_before_embedding():
    items = items_from_captions(["red circle", "  Red   CIRCLE  "])
    assert abs(float(items[0].embedding @ items[1].embedding) - 1.0) < 1e-6


def test_disjoint_vocabulary_is_orthogonal():
    items = items_from_captions(["red circle left", "blue square top"])
    assert float(items[0].embedding @ items[1].embedding) == 0.0


def test_empty_caption_rejected():
    with pytest.raises(ValueError, match="empty caption"):
        embed_captions([CaptionedImage(image_ref="x.png", caption="   ")])


# ---- grouping ----

def test_three_item_group():
    sims = np.array([
        [1.0, 0.9, 0.8],
        [0.9, 1.0, 0.7],
        [0.8, 0.7, 1.0],
    ])
    groups = group(items_with_similarity(sims), threshold=0.5)
    assert len(groups) == 1
    assert len(groups[0].members) == 3


def test_below_threshold_pair_discarded():
    sims = np.array([[1.0, 0.49], [0.49, 1.0]])
    assert group(items_with_similarity(sims), threshold=0.5) == []


def test_max_group_splits_eight_similar_items():
    sims = np.full((8, 8), 0.9)
    np.fill_diagonal(sims, 1.0)
    groups = group(items_with_similarity(sims), threshold=0.5, max_group=6)
    assert [len(g.members) for g in groups] == [6, 2]


def test_partition_no_item_in_two_groups():
    items = items_from_captions([s.caption for s in
                                 __import__("querybridge.shapes", fromlist=["generate_dataset"])
                                 .generate_dataset(60, seed=3)])
    groups = group(items)
    seen = set()
    for g in groups:
        for m in g.members:
            assert m.image_ref not in seen
            seen.add(m.image_ref)
        assert 2 <= len(g.members) <= 6


def test_grouping_deterministic():
    captions = [s.caption for s in
                __import__("querybridge.shapes", fromlist=["generate_dataset"])
                .generate_dataset(40, seed=5)]
    a = group(items_from_captions(captions))
    b = group(items_from_captions(captions))
    assert [[m.image_ref for m in g.members] for g in a] == \
           [[m.image_ref for m in g.members] for g in b]


# ---- target selection ----

def plain_members(k):
    return [CaptionedImage(f"i{j}", f"c{j}") for j in range(k)]


def test_select_target_tie_breaks_low_index():
    sims = np.array([
        [1.0, 0.9, 0.9],
        [0.9, 1.0, 0.6],
        [0.9, 0.6, 1.0],
    ])
    g = CurationGroup(members=plain_members(3), similarity=sims)
    # means: member0 = 0.9, members 1 and 2 = 0.75 -> tie broken at index 1
    assert select_target(g) == 1


def test_select_target_pair_symmetry():
    sims = np.array([[1.0, 0.8], [0.8, 1.0]])
    g = CurationGroup(members=plain_members(2), similarity=sims)
    assert select_target(g) == 0


def test_select_target_distinct_means():
    sims = np.array([
        [1.0, 0.9, 0.8],
        [0.9, 1.0, 0.5],
        [0.8, 0.5, 1.0],
    ])
    g = CurationGroup(members=plain_members(3), similarity=sims)
    # means: {0: 0.85, 1: 0.70, 2: 0.65}
    assert select_target(g) == 2


def test_select_target_group_too_small():
    g = CurationGroup(members=plain_members(1), similarity=np.eye(1))
    with pytest.raises(GroupTooSmallError):
        select_target(g)


def brute_force_target(sims: np.ndarray) -> int:
    """Exhaustive argmin with lowest-index tie break (independent loop impl)."""
    k = len(sims)
    means = []
    for i in range(k):
        means.append(sum(sims[i][j] for j in range(k) if j != i) / (k - 1))
    lowest = min(means)
    for i, m in enumerate(means):
        if m <= lowest + 1e-12:
            return i
    raise AssertionError


def test_select_target_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for trial in range(300):
        k = int(rng.integers(2, 7))
        a = rng.random((k, k)).round(1)  # rounding forces frequent ties
        sims = (a + a.T) / 2
        np.fill_diagonal(sims, 1.0)
        g = CurationGroup(members=plain_members(k), similarity=sims)
        assert select_target(g) == brute_force_target(sims)


# ---- instruction generation ----

def make_group(captions=("red circle", "red circle left", "blue square")):
    items = items_from_captions(list(captions))
    vectors = np.stack([m.embedding for m in items])
    g = CurationGroup(members=items, similarity=vectors @ vectors.T)
    g.target_index = select_target(g)
    return g


def test_system_prompt_contains_required_substring_byte_exact():
    assert "create an interesting text prompt that can be used with the source images" \
        in system_prompt()


def test_request_carries_prompt_and_captions():
    g = make_group()
    request = curation.build_request(g)
    assert request["system_prompt"] == system_prompt()
    assert len(request["source_captions"]) == 2
    assert len(request["image_refs"]) == 3


def test_stub_instruction_contains_captions():
    g = make_group()
    sample = generate_instruction(g, EchoStubGenerator())
    for i, m in enumerate(g.members):
        if i == g.target_index:
            assert m.image_ref == sample.target_ref
        else:
            assert m.caption in sample.instruction
            assert m.image_ref in sample.source_refs
    assert sample.target_ref not in sample.source_refs


def test_retry_then_success_logs_count():
    g = make_group()
    client = ScriptedFlakyGenerator(failures=2)
    sample = generate_instruction(g, client, max_retries=3, backoff=0.0)
    assert sample.provenance["retries"] == 2
    assert client.calls == 3


def test_client_unavailable_after_retries():
    g = make_group()
    client = ScriptedFlakyGenerator(failures=10)
    with pytest.raises(ClientUnavailableError):
        generate_instruction(g, client, max_retries=2, backoff=0.0)


def test_empty_response_rejected():
    g = make_group()

    class Empty:
        generator_id = "empty/v1"

        def generate(self, request):
            return "   "

    with pytest.raises(EmptyResponseError):
        generate_instruction(g, Empty())


def test_parallel_generation_bounded(tmp_path):
    groups = [make_group() for _ in range(8)]
    samples = generate_instructions(groups, EchoStubGenerator(), max_in_flight=3)
    assert len(samples) == 8
    assert all(g.instruction for g in groups)
    out = curation.write_samples(samples, tmp_path / "samples.jsonl")
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 8
    for line in lines:
        obj = json.loads(line)
        assert set(obj) == {"source_refs", "target_ref", "instruction", "provenance"}
        assert obj["target_ref"] not in obj["source_refs"]


def test_flaky_generator_raises_transient():
    client = ScriptedFlakyGenerator(failures=1)
    with pytest.raises(TransientGenerationError):
        client.generate({"source_captions": [], "target_caption": ""})


def test_end_to_end_curate(tmp_path):
    from querybridge import shapes

    samples = shapes.generate_dataset(20, seed=7)
    manifest = shapes.save_dataset(samples, tmp_path / "data")
    out = curation.curate(manifest, tmp_path / "out.jsonl")
    assert len(out) >= 1
    hashed = HashedBowEmbedder()
    assert hashed.embedder_id.startswith("hashed-bow/")

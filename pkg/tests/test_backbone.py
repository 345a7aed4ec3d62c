import math

import pytest
import torch

from querybridge import shapes
from querybridge.backbone import BackboneConfig, Tokenizer, ToyBackbone
from querybridge.errors import DimensionMismatchError, SequenceTooLongError


@pytest.fixture(scope="module")
def tokenizer():
    return Tokenizer()


@pytest.fixture(scope="module")
def tiny_backbone(tokenizer):
    cfg = BackboneConfig(
        num_layers=2, hidden_dim=32, num_heads=4, vocab_size=tokenizer.vocab_size,
        max_positions=64, patch_size=8,
    )
    bb = ToyBackbone(cfg, seed=0)
    bb.requires_grad_(False)
    return bb


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(hidden_dim=30, num_heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(num_layers=0)


def test_tokenize_two_word_caption(tokenizer):
    seq = tokenizer.tokenize("red circle")
    assert len(seq.ids) == 2
    assert seq.kinds == ["text", "text"]


def test_tokenize_whitespace_only(tokenizer):
    assert tokenizer.tokenize(" ").ids == []


def test_tokenize_unknown_word_maps_to_unk(tokenizer):
    seq = tokenizer.tokenize("red zeppelin")
    assert seq.ids[1] == tokenizer.unk_id


def test_tokenize_roundtrip_over_grammar(tokenizer):
    samples = shapes.generate_dataset(1000, seed=11)
    for s in samples:
        first = tokenizer.tokenize(s.caption)
        again = tokenizer.tokenize(tokenizer.detokenize(first.ids))
        assert again.ids == first.ids


def test_embed_image_patch_count(tiny_backbone):
    img = torch.rand(3, 32, 32)
    patches = tiny_backbone.embed_image(img)
    assert patches.shape == (16, 32)


def test_embed_image_divisibility_error(tiny_backbone):
    with pytest.raises(DimensionMismatchError):
        tiny_backbone.embed_image(torch.rand(3, 33, 32))


def test_embed_image_single_patch_difference(tiny_backbone):
    a = torch.rand(3, 32, 32)
    b = a.clone()
    b[:, 8:16, 16:24] += 0.5  # patch row 1, col 2 -> index 1*4+2=6
    pa = tiny_backbone.embed_image(a)
    pb = tiny_backbone.embed_image(b)
    diff = (pa - pb).abs().sum(dim=1)
    assert diff[6] > 0
    mask = torch.ones(16, dtype=torch.bool)
    mask[6] = False
    assert torch.equal(pa[mask], pb[mask])


def test_forward_causal_perturbation_exact(tiny_backbone):
    bb = tiny_backbone.double()
    x = torch.randn(10, 32, dtype=torch.float64)
    base = bb.forward_causal(x).values
    for j in [3, 7, 9]:
        perturbed = x.clone()
        perturbed[j] += 1.0
        out = bb.forward_causal(perturbed).values
        assert torch.equal(out[:j], base[:j])
        assert not torch.equal(out[j:], base[j:])
    tiny_backbone.float()


def test_forward_causal_length_one(tiny_backbone):
    x = torch.randn(1, 32)
    out = tiny_backbone.forward_causal(x)
    assert out.values.shape == (1, 32)


def test_forward_causal_too_long(tiny_backbone):
    with pytest.raises(SequenceTooLongError):
        tiny_backbone.forward_causal(torch.randn(65, 32))


def test_forward_deterministic_bitwise(tiny_backbone):
    torch.set_num_threads(1)
    x = torch.randn(12, 32)
    a = tiny_backbone.forward_causal(x).values
    b = tiny_backbone.forward_causal(x).values
    assert torch.equal(a, b)


def test_forward_shape_preserved(tiny_backbone):
    for length in (1, 5, 33):
        out = tiny_backbone.forward_causal(torch.randn(length, 32)).values
        assert out.shape == (length, 32)


def _reference_forward(backbone: ToyBackbone, x: torch.Tensor) -> torch.Tensor:
    """Naive per-position re-implementation of the causal stack (loops, no batching)."""
    cfg = backbone.config
    length = x.shape[0]
    h = x.double().clone()
    for i in range(length):
        h[i] = h[i] + backbone.position_embedding.weight[i].double()

    def layer_norm(v, ln):
        mean = v.mean()
        var = v.var(unbiased=False)
        return (v - mean) / math.sqrt(var + ln.eps) * ln.weight.double() + ln.bias.double()

    for block in backbone.blocks:
        attn = block.attn
        head_dim = attn.head_dim
        normed = torch.stack([layer_norm(h[i], block.ln1) for i in range(length)])
        w_qkv = attn.qkv.weight.double()
        b_qkv = attn.qkv.bias.double()
        qkv = torch.stack([w_qkv @ normed[i] + b_qkv for i in range(length)])
        dim = cfg.hidden_dim
        q, k, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]
        out = torch.zeros_like(h)
        for i in range(length):
            per_head = []
            for head in range(attn.num_heads):
                sl = slice(head * head_dim, (head + 1) * head_dim)
                scores = []
                for j in range(i + 1):
                    scores.append(float(q[i, sl] @ k[j, sl]) / math.sqrt(head_dim))
                weights = torch.softmax(torch.tensor(scores, dtype=torch.float64), dim=0)
                acc = torch.zeros(head_dim, dtype=torch.float64)
                for j in range(i + 1):
                    acc += weights[j] * v[j, sl]
                per_head.append(acc)
            merged = torch.cat(per_head)
            out[i] = attn.out.weight.double() @ merged + attn.out.bias.double()
        h = h + out
        up, down = block.mlp[0], block.mlp[2]
        for i in range(length):
            normed_i = layer_norm(h[i], block.ln2)
            hidden = torch.nn.functional.gelu(up.weight.double() @ normed_i + up.bias.double())
            h[i] = h[i] + down.weight.double() @ hidden + down.bias.double()
    return torch.stack([layer_norm(h[i], backbone.ln_f) for i in range(length)])


@torch.no_grad()
def test_forward_matches_naive_reference():
    cfg = BackboneConfig(num_layers=2, hidden_dim=8, num_heads=2, vocab_size=4,
                         max_positions=16, patch_size=4)
    bb = ToyBackbone(cfg, seed=3).double()
    x = torch.randn(6, 8, dtype=torch.float64)
    fast = bb.forward_causal(x).values
    slow = _reference_forward(bb, x)
    rel = ((fast - slow).abs() / slow.abs().clamp_min(1e-8)).max()
    assert rel < 1e-5

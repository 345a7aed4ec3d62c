import pytest
import torch

from querybridge.connector import (
    Connector,
    ConnectorConfig,
    connect,
    parameter_count,
)
from querybridge.errors import DimensionMismatchError
from querybridge.queries import ConditionSet


def make_config(**kw):
    defaults = dict(variant="enc_proj", num_layers=2, input_dim=16, model_dim=16,
                    decoder_cond_dim=24, num_heads=2, max_rows=64)
    defaults.update(kw)
    return ConnectorConfig(**defaults)


def test_config_width_rules():
    with pytest.raises(ValueError):
        make_config(variant="enc_proj", model_dim=24)
    with pytest.raises(ValueError):
        make_config(variant="proj_enc", model_dim=16)
    make_config(variant="proj_enc", model_dim=24)  # ok


def test_shape_contract_both_variants():
    for variant, model_dim in (("enc_proj", 16), ("proj_enc", 24)):
        conn = Connector(make_config(variant=variant, model_dim=model_dim), seed=0)
        out = conn(torch.randn(64, 16))
        assert out.shape == (64, 24)


def test_connect_preserves_rows_and_source():
    conn = Connector(make_config(), seed=0)
    conditions = ConditionSet(torch.randn(7, 16), "learnable_queries")
    out = connect(conn, conditions)
    assert out.vectors.shape == (7, 24)
    assert out.source == "learnable_queries"


def test_zero_layer_is_pure_projection():
    conn = Connector(make_config(num_layers=0), seed=0)
    with torch.no_grad():
        proj = torch.randn(24, 16)
        conn.proj.weight.copy_(proj)
        conn.proj.bias.zero_()
    x = torch.randn(5, 16)
    assert torch.allclose(conn(x), x @ proj.T, atol=1e-6)


def test_dimension_mismatch_error():
    conn = Connector(make_config(), seed=0)
    with pytest.raises(DimensionMismatchError):
        conn(torch.randn(5, 17))


def test_gradients_match_finite_differences():
    torch.set_num_threads(1)
    conn = Connector(make_config(num_layers=1, max_rows=8), seed=0).double()
    x = torch.randn(3, 16, dtype=torch.float64)
    target = torch.randn(3, 24, dtype=torch.float64)

    def loss_fn():
        return ((conn(x) - target) ** 2).mean()

    loss = loss_fn()
    loss.backward()
    g = torch.Generator().manual_seed(0)
    params = [p for p in conn.parameters() if p.grad is not None]
    checked = 0
    for p in params:
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        for _ in range(3):
            i = int(torch.randint(flat.numel(), (1,), generator=g))
            h = 1e-5 * max(1.0, abs(float(flat[i])))
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(grad[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            assert rel < 1e-4, f"param grad mismatch: analytic {an}, fd {fd}"
            checked += 1
    assert checked >= 20


@pytest.mark.parametrize("case", range(5))
def test_parameter_count_matches_instantiation(case):
    g = torch.Generator().manual_seed(case)

    def pick(options):
        return options[int(torch.randint(len(options), (1,), generator=g))]

    variant = pick(["enc_proj", "proj_enc"])
    input_dim = pick([8, 16, 32])
    cond = pick([12, 24, 40])
    model_dim = input_dim if variant == "enc_proj" else cond
    heads = pick([1, 2, 4])
    while model_dim % heads != 0:
        heads //= 2
    cfg = ConnectorConfig(
        variant=variant, num_layers=pick([0, 1, 3]), input_dim=input_dim,
        model_dim=model_dim, decoder_cond_dim=cond, num_heads=max(heads, 1),
        max_rows=pick([16, 64]), use_positions=pick([True, False]),
    )
    conn = Connector(cfg, seed=case)
    actual = sum(p.numel() for p in conn.parameters())
    assert parameter_count(cfg) == actual


def test_enc_proj_fewer_params_at_equal_depth():
    # backbone width below decoder width, as in the 896 -> 2304 setting
    for depth in (2, 6, 24):
        enc = ConnectorConfig(variant="enc_proj", num_layers=depth, input_dim=896,
                              model_dim=896, decoder_cond_dim=2304, num_heads=4)
        proj = ConnectorConfig(variant="proj_enc", num_layers=depth, input_dim=896,
                               model_dim=2304, decoder_cond_dim=2304, num_heads=4)
        assert parameter_count(enc) < parameter_count(proj)


def test_zero_depth_count_is_projection_only():
    cfg = make_config(num_layers=0)
    assert parameter_count(cfg) == 16 * 24 + 24


def test_permutation_equivariance_without_positions():
    conn = Connector(make_config(num_layers=2, use_positions=False), seed=1)
    x = torch.randn(6, 16)
    perm = torch.randperm(6)
    out = conn(x)
    out_perm = conn(x[perm])
    assert torch.allclose(out_perm, out[perm], atol=1e-5)


def test_noncausal_witness_with_positions():
    conn = Connector(make_config(num_layers=2, use_positions=True), seed=1).double()
    x = torch.randn(6, 16, dtype=torch.float64)
    bumped = x.clone()
    bumped[5, 3] += 1.0  # single component of the last row
    out, out_bumped = conn(x), conn(bumped)
    assert not torch.equal(out[0], out_bumped[0])


def test_variable_row_counts_accepted():
    conn = Connector(make_config(), seed=0)
    for m in (1, 2, 5, 33):
        assert conn(torch.randn(m, 16)).shape == (m, 24)


def test_batched_input():
    conn = Connector(make_config(), seed=0)
    out = conn(torch.randn(4, 9, 16))
    assert out.shape == (4, 9, 24)

import pytest
import torch

from geoscore.errors import ConfigError
from geoscore.geoxform import NUM_CLASSES
from geoscore.network import NetConfig, count_params, init_params
from geoscore.training import load_checkpoint, save_checkpoint

TINY = NetConfig(input_size=16, filters=(2, 2, 2, 2), latent_dim=4)


def _hand_count(cfg: NetConfig) -> int:
    """Layer-by-layer count written out independently of the module tree."""
    total = 0
    chans = [1, *cfg.filters]
    for c_in, c_out in zip(chans, chans[1:]):
        total += c_in * c_out * 9 + c_out  # encoder conv
    flat = cfg.filters[-1] * (cfg.input_size // 2 ** len(cfg.filters)) ** 2
    total += 2 * (flat * cfg.latent_dim + cfg.latent_dim)  # mu, log_var
    total += cfg.latent_dim * flat + flat  # decoder fc
    rev = [*cfg.filters[::-1], 1]
    for c_in, c_out in zip(rev, rev[1:]):
        total += c_in * c_out * 9 + c_out  # transposed conv
    head_in = cfg.filters[-1] if cfg.geo_pool == "avg" else flat
    total += head_in * NUM_CLASSES + NUM_CLASSES  # transform head
    return total


def test_tiny_param_count():
    assert _hand_count(TINY) == 361
    assert count_params(init_params(0, TINY)) == 361


@pytest.mark.parametrize(
    "cfg",
    [
        NetConfig(input_size=32, filters=(3, 5, 7), latent_dim=6),
        NetConfig(input_size=32, filters=(3, 5, 7), latent_dim=6, geo_pool="flatten"),
        NetConfig(),
    ],
)
def test_param_count_matches_formula(cfg):
    assert count_params(init_params(0, cfg)) == _hand_count(cfg)


def test_param_count_grows_with_latent_dim():
    small = count_params(init_params(0, TINY))
    big = count_params(init_params(0, NetConfig(input_size=16, filters=(2, 2, 2, 2), latent_dim=8)))
    assert big > small


def test_count_after_checkpoint_roundtrip(tmp_path):
    m = init_params(0, TINY)
    save_checkpoint(tmp_path / "m.ckpt", m, None, None, 0)
    assert count_params(load_checkpoint(tmp_path / "m.ckpt").model) == count_params(m)


def test_init_deterministic():
    a, b, c = init_params(7, TINY), init_params(7, TINY), init_params(8, TINY)
    for (n, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_biases_start_at_zero():
    m = init_params(0, TINY)
    for name, p in m.named_parameters():
        if name.endswith("bias"):
            assert torch.all(p == 0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(latent_dim=0), dict(filters=(2, 0, 2, 2)), dict(filters=()), dict(input_size=20)],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        NetConfig(**{"input_size": 16, "filters": (2, 2, 2, 2), "latent_dim": 4, **kwargs})


def test_forward_shapes_and_ranges():
    m = init_params(0, TINY)
    x = torch.rand(3, 1, 16, 16)
    out = m(x, mode="train", generator=torch.Generator().manual_seed(0))
    assert out.reconstruction.shape == x.shape
    assert out.geo_logits.shape == (3, 20)
    assert out.mu.shape == out.log_var.shape == (3, 4)
    assert torch.all(out.reconstruction > 0) and torch.all(out.reconstruction < 1)
    assert torch.isfinite(out.geo_logits).all()


@pytest.mark.parametrize("side", [16, 32, 64])
def test_reconstruction_shape_for_sizes(side):
    m = init_params(0, NetConfig(input_size=side, filters=(2, 2, 2, 2), latent_dim=4))
    assert m(torch.rand(1, 1, side, side)).reconstruction.shape == (1, 1, side, side)


def test_eval_mode_is_deterministic():
    m = init_params(0, TINY)
    x = torch.rand(2, 1, 16, 16)
    a, b = m(x, mode="eval"), m(x, mode="eval")
    for ta, tb in zip(a, b):
        assert torch.equal(ta, tb)


def test_train_mode_uses_generator():
    m = init_params(0, TINY)
    with torch.no_grad():
        m.fc_log_var.bias.fill_(2.0)  # make the sampling noise visible
    x = torch.rand(2, 1, 16, 16)
    a = m(x, "train", torch.Generator().manual_seed(1)).reconstruction
    b = m(x, "train", torch.Generator().manual_seed(1)).reconstruction
    c = m(x, "train", torch.Generator().manual_seed(2)).reconstruction
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_zero_geo_head_gives_zero_logits():
    m = init_params(0, TINY)
    with torch.no_grad():
        m.geo_head.weight.zero_()
        m.geo_head.bias.zero_()
    logits = m(torch.rand(2, 1, 16, 16)).geo_logits
    assert torch.all(logits == 0)
    assert torch.allclose(torch.softmax(logits, 1), torch.full((2, 20), 1 / 20))


def test_shape_mismatch_rejected():
    m = init_params(0, TINY)
    with pytest.raises(ValueError):
        m(torch.rand(1, 1, 32, 32))

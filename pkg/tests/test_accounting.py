import pytest

from rommamba.accounting import count_flops, count_params, dense_twin, format_count, mamba_param_groups
from rommamba.cli import resolve_config
from rommamba.model import ModelConfig, build_model

MATRIX = [
    dict(pattern="M"),
    dict(pattern="R"),
    dict(pattern="R", expertized="conv,gate,out,dt,x"),
    dict(pattern="R", routing_mode="independent"),
    dict(pattern="RE", n_layers=4),
    dict(pattern="RE", n_layers=4, ffn_reuse_router=False, ffn_num_experts=3),
    dict(pattern="MARE", n_layers=4, tie_embeddings=False, n_heads=2),
    dict(pattern="MFAF", n_layers=8, dense_tail_layers=1),
    dict(pattern="RE", n_layers=4, dense_tail_layers=2, use_skip=False, top_k=2),
]


@pytest.mark.parametrize("kw", MATRIX, ids=[str(i) for i in range(len(MATRIX))])
def test_count_equals_built_model(kw):
    base = dict(vocab_size=97, d_model=32, n_layers=2, num_experts=4, d_state=4)
    base.update(kw)
    cfg = ModelConfig(**base)
    rep = count_params(cfg)
    assert rep.total_params == build_model(cfg).num_params()
    assert rep.active_params <= rep.total_params


PAPER_TOTALS = [
    ("mamba-115m", 115e6), ("mamba-353m", 353e6), ("mamba-765m", 765e6), ("mamba-1.3b", 1.3e9),
    ("rom-710m", 710e6), ("rom-2.5b", 2.5e9), ("rom-5.5b", 5.5e9), ("rom-10b", 10e9),
]


@pytest.mark.parametrize("name,target", PAPER_TOTALS)
def test_bundled_configs_hit_reported_totals(name, target):
    total = count_params(resolve_config(name).model).total_params
    assert abs(total - target) <= 0.03 * target, f"{name}: {total:,}"


@pytest.mark.parametrize("name", ["samba-421m-rom", "samba-421m-moe-mamba", "samba-511m-rom",
                                  "samba-511m-rom-gate-out", "samba-511m-rom-dtx"])
def test_routed_twin_flop_parity(name):
    cfg = resolve_config(name).model
    ratio = count_flops(cfg, 4096).forward_flops / count_flops(dense_twin(cfg), 4096).forward_flops
    assert 1.0 <= ratio <= 1.001


@pytest.mark.parametrize("name", ["mamba-115m", "mamba-353m", "mamba-765m", "mamba-1.3b"])
def test_top1_twin_costs_only_the_router(name):
    cfg = ModelConfig.from_dict(dict(resolve_config(name).model.to_dict(), pattern="R", num_experts=8))
    extra = count_flops(cfg, 4096).forward_flops - count_flops(dense_twin(cfg), 4096).forward_flops
    assert extra == cfg.n_layers * 4096 * 2 * cfg.d_model * 8


def test_mamba_stack_flops_linear_in_length():
    cfg = ModelConfig(vocab_size=1000, d_model=64, n_layers=4, pattern="RM", num_experts=4)
    a, b = count_flops(cfg, 1000), count_flops(cfg, 2000)
    for la, lb in zip(a.layers, b.layers):
        assert lb.flops == 2 * la.flops
    assert b.forward_flops == 2 * a.forward_flops


def test_second_expert_adds_exactly_one_expertized_pass():
    cfg1 = ModelConfig(vocab_size=100, d_model=64, n_layers=3, pattern="R", num_experts=4, top_k=1)
    cfg2 = ModelConfig.from_dict(dict(cfg1.to_dict(), top_k=2))
    extra = 2 * 64 * 128 * 3  # conv, gate and out projections, 2 FLOPs per MAC
    L = 50
    assert count_flops(cfg2, L).forward_flops - count_flops(cfg1, L).forward_flops == 3 * extra * L


def test_totals_affine_in_experts_and_active_constant():
    base = dict(vocab_size=100, d_model=64, n_layers=2, pattern="R", top_k=1)
    reps = {N: count_params(ModelConfig(num_experts=N, **base)) for N in (2, 3, 4, 8)}
    slope = sum(v for k, v in mamba_param_groups(ModelConfig(**base)).items() if k in ("conv", "gate", "out"))
    router = 64  # one Dm x N router per layer grows by Dm per extra expert
    for N in (3, 4, 8):
        assert reps[N].total_params - reps[2].total_params == 2 * (N - 2) * (slope + router)
        assert reps[N].active_params - reps[2].active_params == 2 * (N - 2) * router


def test_breakdown_sums_to_totals():
    rep = count_flops(resolve_config("samba-511m-rom").model, 128)
    assert sum(c.total_params for c in rep.layers) == rep.total_params
    assert sum(c.flops for c in rep.layers) == rep.forward_flops
    assert isinstance(rep.forward_flops, int)


def test_format_count():
    assert format_count(115_000_000) == "115M" and format_count(2_470_000_000) == "2.47B"
    assert format_count(4_740_000_000_000) == "4.74T" and format_count(12) == "12"

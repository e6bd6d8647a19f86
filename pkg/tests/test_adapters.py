import numpy as np
import pytest

from steerlab.adapters import (LoRAConfig, SideBranchAdapter, budget_parity, choose_rank,
                               effective_scale, lora_param_count, lora_scaling, lora_targets, lora_wrap,
                               rank1_extract, solve_multiplier)
from steerlab.autodiff import Tensor, backward, mse_loss, no_grad
from steerlab.autodiff.checkpoint import digest
from steerlab.errors import ConfigurationError, ContractError
from steerlab.steering import SteeringConfig, SteeringModule, count_params
from steerlab.unet import UNetConfig, build_unet

TINY = UNetConfig(image_size=8, base_channels=8, groups=4, cond_dim=8, time_dim=16)


def backbone(seed=0):
    model, descs = build_unet(TINY, np.random.default_rng(seed))
    w = model.out_conv.weight
    w.data = (0.1 * np.random.default_rng(seed + 1).standard_normal(w.shape)).astype(w.dtype)
    return model.freeze(), descs


def probe(batch=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 8, 8, 3)).astype(np.float32)
    return x, rng.integers(1, 1001, size=batch), rng.standard_normal((batch, 8)).astype(np.float32)


def forward(fn_or_model, x, t, c, adapters=()):
    with no_grad():
        return fn_or_model.forward(x, t, c, adapters).data


def perturb(params, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)


def test_scaling_modes():
    assert lora_scaling(4, 4, "standard") == 1.0
    assert lora_scaling(4, 4, "rank_stabilized") == 2.0
    assert effective_scale(1, 4, 4, "rank_stabilized") == 2.0
    assert effective_scale(0, 4, 4, "standard") == 0.0
    assert solve_multiplier(1.25, 4, 4, "rank_stabilized") == 0.625
    with pytest.raises(ConfigurationError):
        lora_scaling(4, 4, "sqrt")
    with pytest.raises(ConfigurationError):
        LoRAConfig(rank=0)


def test_wrapped_model_reports_scaling():
    model, _ = backbone()
    std = lora_wrap(model, None, LoRAConfig(rank=4, alpha=4, scaling_mode="standard"), np.random.default_rng(0))
    rs = lora_wrap(model, None, LoRAConfig(rank=4, alpha=4, scaling_mode="rank_stabilized"), np.random.default_rng(0))
    assert std.effective_scale(1.0) == 1.0 and rs.effective_scale(1.0) == 2.0


def test_fresh_lora_is_base_bit_exact():
    model, _ = backbone()
    lm = lora_wrap(model, None, LoRAConfig(rank=2), np.random.default_rng(0))
    x, t, c = probe()
    base = forward(model, x, t, c)
    for m in (0.0, 1.0, 3.0):
        assert forward(lm.with_multiplier(m), x, t, c).tobytes() == base.tobytes()


def test_trained_lora_off_switch_and_activity():
    model, _ = backbone()
    before = digest(model.state_dict())
    lm = lora_wrap(model, None, LoRAConfig(rank=2), np.random.default_rng(0))
    perturb(lm.lora_parameters())
    x, t, c = probe()
    base = forward(model, x, t, c)
    assert forward(lm.with_multiplier(0.0), x, t, c).tobytes() == base.tobytes()
    assert np.max(np.abs(forward(lm.with_multiplier(1.0), x, t, c) - base)) > 0
    assert digest(model.state_dict()) == before


def test_lora_first_order_regime():
    model, _ = backbone()
    lm = lora_wrap(model, None, LoRAConfig(rank=2), np.random.default_rng(0))
    perturb(lm.lora_parameters(), scale=0.05)
    x, t, c = probe()
    base = forward(model, x, t, c).astype(np.float64)
    ratios = [np.linalg.norm(forward(lm.with_multiplier(m), x, t, c) - base) / m for m in (0.05, 0.1)]
    assert abs(ratios[0] - ratios[1]) / ratios[0] < 0.2


def test_lora_delta_weight_matches_dense_update():
    model, _ = backbone()
    lm = lora_wrap(model, ["mid.0.conv1", "mid.0.emb_proj"], LoRAConfig(rank=2), np.random.default_rng(0))
    perturb(lm.lora_parameters(), seed=4)
    lm = lm.with_multiplier(0.7)
    x, t, c = probe()
    wrapped = forward(lm, x, t, c)
    conv, lin = lm.layers
    w0, l0 = conv.base.weight.data, lin.base.weight.data
    try:
        conv.base.weight.data = (w0 + conv.delta_weight()).astype(np.float32)
        lin.base.weight.data = (l0 + lin.delta_weight()).astype(np.float32)
        conv.multiplier = lin.multiplier = 0.0
        dense = forward(lm, x, t, c)
    finally:
        conv.base.weight.data, lin.base.weight.data = w0, l0
    assert np.allclose(wrapped, dense, atol=1e-5)


def test_lora_unknown_target():
    model, _ = backbone()
    with pytest.raises(ConfigurationError, match="nope"):
        lora_wrap(model, ["mid.0.nope"], LoRAConfig(), np.random.default_rng(0))


def test_lora_param_count_and_budget_choice():
    model, descs = build_unet(UNetConfig(image_size=16, base_channels=16), np.random.default_rng(0))
    targets = lora_targets(model, ("mid", "up"))
    lm = lora_wrap(model, targets, LoRAConfig(rank=3), np.random.default_rng(0))
    assert lm.num_lora_parameters() == lora_param_count(model, targets, 3)
    st = SteeringModule(SteeringConfig(k=16), descs, 32, 8, np.random.default_rng(0))
    n_steer, _ = count_params(st, model)
    r = choose_rank(model, targets, n_steer)
    n_lora = lora_param_count(model, targets, r)
    assert all(abs(lora_param_count(model, targets, q) - n_steer) >= abs(n_lora - n_steer) for q in range(1, 9))
    assert budget_parity(n_lora, n_steer) == abs(n_lora - n_steer) / n_steer
    assert budget_parity(1150, 1000) <= 0.15 < budget_parity(1151, 1000)


def constant_direction_steering(descs, c=2.5):
    st = SteeringModule(SteeringConfig(k=4), descs, 8, 4, np.random.default_rng(0))
    for p in st.proj:
        b = np.zeros(p.beta.out_features, np.float32)
        b[0] = c
        p.beta.bias.data = b
    return st


def test_rank1_extracts_constant_direction():
    model, descs = backbone()
    st = constant_direction_steering(descs)
    x, t, c = probe(batch=6)
    r1, norms = rank1_extract(model, st, x, t, c, batch=4)
    assert r1.block_ids == sorted(st.block_ids)
    for bid, s in r1.directions.items():
        e1 = np.zeros_like(s)
        e1[0] = 1.0
        assert np.allclose(s, e1, atol=1e-7)
        assert abs(np.linalg.norm(s.astype(np.float64)) - 1.0) < 1e-6
        assert norms[bid] > 0
    again, _ = rank1_extract(model, st, x, t, c, batch=4)
    assert all(again.directions[b].tobytes() == r1.directions[b].tobytes() for b in r1.block_ids)


def test_rank1_degenerate_without_residuals():
    model, descs = backbone()
    st = SteeringModule(SteeringConfig(k=4), descs, 8, 4, np.random.default_rng(0))
    x, t, c = probe()
    with pytest.raises(ContractError, match="zero"):
        rank1_extract(model, st, x, t, c)


def test_rank1_apply():
    model, descs = backbone()
    r1, _ = rank1_extract(model, constant_direction_steering(descs), *probe(batch=4))
    x, t, c = probe()
    base = forward(model, x, t, c)
    assert forward(model, x, t, c, [r1.at(0.0)]).tobytes() == base.tobytes()
    assert np.max(np.abs(forward(model, x, t, c, [r1.at(2.0)]) - base)) > 0
    h = Tensor(np.random.default_rng(0).standard_normal((2, 4, 4, 16)).astype(np.float32))
    d = r1.at(3.0).delta(descs[4], h, 2).data
    assert np.array_equal(d[0], d[1]) and np.allclose(d[0, 1, 2], 3.0 * r1.directions[descs[4].block_id])
    assert r1.trainable_parameters() == []
    with pytest.raises(ContractError):
        r1.delta(descs[4], Tensor(np.zeros((1, 4, 4, 8), np.float32)), 1)


def test_rank1_condition_independent():
    model, descs = backbone()
    r1 = rank1_extract(model, constant_direction_steering(descs), *probe(batch=4))[0].at(1.5)
    rng = np.random.default_rng(0)
    h1, h2 = (Tensor(rng.standard_normal((2, 4, 4, 16)).astype(np.float32)) for _ in range(2))
    assert r1.delta(descs[4], h1, 2).data.tobytes() == r1.delta(descs[4], h2, 2).data.tobytes()


def test_sidebranch_fresh_and_off_are_base():
    model, _ = backbone()
    sb = SideBranchAdapter(model, np.random.default_rng(0))
    x, t, c = probe()
    base = forward(model, x, t, c)
    assert forward(model, x, t, c, [sb]).tobytes() == base.tobytes()
    perturb([(n, p) for n, p in sb.trainable_parameters() if n.startswith("proj")], scale=0.2)
    assert forward(model, x, t, c, [sb.at(0.0)]).tobytes() == base.tobytes()
    assert np.max(np.abs(forward(model, x, t, c, [sb.at(1.0)]) - base)) > 0


def test_sidebranch_is_much_larger_than_steering():
    model, descs = build_unet(UNetConfig(image_size=16, base_channels=16), np.random.default_rng(0))
    sb = SideBranchAdapter(model.freeze(), np.random.default_rng(0))
    st = SteeringModule(SteeringConfig(k=16), descs, 32, 8, np.random.default_rng(0))
    n_sb, _ = count_params(sb, model)
    n_st, _ = count_params(st, model)
    assert 5 < n_sb / n_st < 50
    # training the branch never touches the backbone tensors
    shared = {id(p) for p in model.parameters()}
    assert not any(id(p) in shared for _, p in sb.trainable_parameters())


def test_sidebranch_gradient_reaches_projections_only():
    model, _ = backbone()
    sb = SideBranchAdapter(model, np.random.default_rng(0))
    x, t, c = probe()
    backward(mse_loss(model.forward(x, t, c, [sb]), np.ones_like(x)))
    assert all(p.grad is None for p in model.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in sb.proj[0].parameters())

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import compose_loop, fuse_loop, merge_loop
from psstrnet.model import (ContextExploration, InputContractError, IterationState, PSSTRNet,
                            PSSTRNetConfig, adaptive_fuse, compose_region, merge_masks,
                            parameter_count)


def _state(removed, mask, index=1):
    return IterationState(index, removed, mask, mask, mask)


# ---------------------------------------------------------------- config

def test_config_defaults():
    cfg = PSSTRNetConfig()
    assert cfg.iterations == 3
    assert cfg.ce_dilations == (1, 2, 3, 5)
    assert cfg.epsilon == 1e-8
    assert cfg.input_size == (256, 256)


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(epsilon=0.0), dict(ce_dilations=()),
                                dict(ce_dilations=(1, 3, 2)), dict(input_size=(30, 32))])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        PSSTRNetConfig(**kw)


def test_config_roundtrip():
    cfg = PSSTRNetConfig(iterations=2, base_channels=12, input_size=(64, 128))
    assert PSSTRNetConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- encode

def test_encode_bottleneck_is_quarter_scale():
    torch.manual_seed(0)
    model = PSSTRNet(PSSTRNetConfig(base_channels=8)).eval()
    with torch.no_grad():
        feats = model.encode(torch.rand(1, 7, 256, 256))
    assert len(feats) == 5
    assert feats[-1].shape == (1, 32, 64, 64)
    assert [f.shape[-1] for f in feats] == [256, 128, 64, 64, 64]


def test_encode_zero_input_finite(small_model):
    small_model.eval()
    with torch.no_grad():
        feats = small_model.encode(torch.zeros(1, 7, 32, 32))
    assert all(torch.isfinite(f).all() for f in feats)


def test_encode_preserves_batch(small_model):
    feats = small_model.encode(torch.rand(2, 7, 64, 64))
    assert len(feats) == 5
    assert all(f.shape[0] == 2 for f in feats)


@pytest.mark.parametrize("shape", [(1, 7, 30, 32), (1, 7, 32, 34), (1, 6, 32, 32)])
def test_encode_rejects_bad_shapes(small_model, shape):
    with pytest.raises(InputContractError):
        small_model.encode(torch.rand(*shape))


# ---------------------------------------------------------------- segment_text

def test_segment_text_full_resolution_and_range():
    torch.manual_seed(0)
    model = PSSTRNet(PSSTRNetConfig(base_channels=8)).eval()
    with torch.no_grad():
        m = model.segment_text([None, None, None, None, torch.randn(1, 32, 64, 64)])
    assert m.shape == (1, 1, 256, 256)
    assert m.min() >= 0 and m.max() <= 1


def test_segment_text_constant_features_give_constant_interior(small_model):
    small_model.eval()
    f = torch.full((1, 32, 64, 64), 0.7)
    with torch.no_grad():
        m = small_model.segment_text([None] * 4 + [f])
    # two 3x3 convs touch 2 quarter-res pixels at the border -> 8 full-res px, +bilinear margin
    interior = m[0, 0, 16:-16, 16:-16]
    assert interior.std().item() < 1e-5


# ---------------------------------------------------------------- merge_masks

def test_merge_masks_is_max():
    a = torch.tensor([[[[0.7]]]])
    b = torch.tensor([[[[0.2]]]])
    assert merge_masks(a, b).item() == pytest.approx(0.7)


def test_merge_with_zero_prev_is_identity():
    m = torch.rand(2, 1, 4, 4)
    assert torch.equal(merge_masks(m, torch.zeros_like(m)), m)


def test_merge_matches_loop_oracle():
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(2, 1, 4, 4, generator=g), torch.rand(2, 1, 4, 4, generator=g)
    assert np.array_equal(merge_masks(a, b).numpy(), merge_loop(a.numpy(), b.numpy()))


def test_merge_shape_mismatch():
    with pytest.raises(InputContractError):
        merge_masks(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_merge_properties(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(1, 1, 5, 5, generator=g), torch.rand(1, 1, 5, 5, generator=g)
    m = merge_masks(a, b)
    assert (m >= a).all() and (m >= b).all()
    assert torch.equal(merge_masks(a, a), a)


# ---------------------------------------------------------------- context_explore

def test_context_explore_preserves_size():
    ce = ContextExploration(32).eval()
    with torch.no_grad():
        assert ce(torch.rand(1, 32, 64, 64)).shape == (1, 32, 64, 64)


def test_context_explore_zero_in_zero_out():
    ce = ContextExploration(16).eval()
    with torch.no_grad():
        assert torch.equal(ce(torch.zeros(1, 16, 20, 20)), torch.zeros(1, 16, 20, 20))


def test_context_explore_receptive_field_reaches_rate5():
    torch.manual_seed(3)
    ce = ContextExploration(8).eval()
    x = torch.zeros(1, 8, 31, 31)
    x[0, :, 15, 15] = 1.0
    with torch.no_grad():
        y = ce(x).abs().sum(1)[0]
    assert y[15, 20] > 0 and y[15, 10] > 0 and y[20, 15] > 0
    # nothing beyond the largest dilation
    assert y[15, 21] == 0 and y[21, 15] == 0
    # offset 4 is reached by no branch (taps at 0, +-1, 2, 3, 5)
    assert y[15, 19] == 0


# ---------------------------------------------------------------- correct_mask

def test_correct_mask_range_and_shape(small_model):
    small_model.eval()
    feats = [None] * 4 + [torch.randn(2, 32, 8, 8)]
    z0 = torch.randn(2, 32, 8, 8)
    with torch.no_grad():
        m = small_model.correct_mask(torch.rand(2, 1, 32, 32), feats, z0)
    assert m.shape == (2, 1, 32, 32)
    assert m.min() >= 0 and m.max() <= 1


def test_correct_mask_alpha_beta_init_to_one(small_model):
    assert small_model.mum.alpha.item() == 1.0
    assert small_model.mum.beta.item() == 1.0


def test_correct_mask_zero_gates_cut_context_blocks(small_model):
    mum = small_model.mum
    with torch.no_grad():
        mum.alpha.zero_()
        mum.beta.zero_()
    feats = [None] * 4 + [torch.randn(2, 32, 8, 8)]
    out = small_model.correct_mask(torch.rand(2, 1, 32, 32), feats, torch.randn(2, 32, 8, 8))
    out.sum().backward()
    for p in list(mum.ce_fp.parameters()) + list(mum.ce_fn.parameters()):
        assert p.grad is None or torch.count_nonzero(p.grad) == 0


def test_correct_mask_misaligned_inputs(small_model):
    with pytest.raises(InputContractError):
        small_model.correct_mask(torch.rand(1, 1, 32, 32), [None] * 4 + [torch.randn(1, 32, 4, 4)],
                                 torch.randn(1, 32, 4, 4))


# ---------------------------------------------------------------- remove_text

def test_remove_text_shape_range_batch():
    torch.manual_seed(0)
    model = PSSTRNet(PSSTRNetConfig(base_channels=8)).eval()
    with torch.no_grad():
        out = model.remove_text(model.encode(torch.rand(1, 7, 256, 256)))
        out2 = model.remove_text(model.encode(torch.rand(2, 7, 32, 32)))
    assert out.shape == (1, 3, 256, 256)
    assert out.min() >= 0 and out.max() <= 1
    assert out2.shape[0] == 2


# ---------------------------------------------------------------- compose_region

def test_compose_zero_and_full_mask():
    g = torch.Generator().manual_seed(2)
    i_in, i_temp = torch.rand(2, 3, 4, 4, generator=g), torch.rand(2, 3, 4, 4, generator=g)
    assert torch.equal(compose_region(i_in, i_temp, torch.zeros(2, 1, 4, 4)), i_in)
    assert torch.equal(compose_region(i_in, i_temp, torch.ones(2, 1, 4, 4)), i_temp)


def test_compose_matches_loop_oracle():
    g = torch.Generator().manual_seed(5)
    i_in, i_temp, m = (torch.rand(2, 3, 4, 4, generator=g), torch.rand(2, 3, 4, 4, generator=g),
                       torch.rand(2, 1, 4, 4, generator=g))
    got = compose_region(i_in, i_temp, m).numpy()
    assert np.array_equal(got, compose_loop(i_in.numpy(), i_temp.numpy(), m.numpy()))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_compose_interpolates(seed):
    g = torch.Generator().manual_seed(seed)
    i_in, i_temp, m = (torch.rand(1, 3, 6, 6, generator=g), torch.rand(1, 3, 6, 6, generator=g),
                       torch.rand(1, 1, 6, 6, generator=g))
    out = compose_region(i_in, i_temp, m)
    tol = 1e-7
    assert (out >= torch.minimum(i_in, i_temp) - tol).all()
    assert (out <= torch.maximum(i_in, i_temp) + tol).all()


def test_compose_shape_mismatch():
    with pytest.raises(InputContractError):
        compose_region(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4), torch.rand(1, 1, 2, 2))


# ---------------------------------------------------------------- adaptive_fuse

def test_fuse_single_full_mask():
    eps = 1e-8
    i1 = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    i_in = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    out, mm = adaptive_fuse([_state(i1, torch.ones(1, 1, 4, 4, dtype=torch.float64))], i_in, eps)
    assert torch.allclose(out, (i1 + eps) / (1 + eps), rtol=0, atol=1e-15)
    assert (out - i1).abs().max() <= eps
    assert torch.equal(mm, torch.ones(1, 1, 4, 4, dtype=torch.float64))


def test_fuse_zero_masks_return_input_exactly():
    g = torch.Generator().manual_seed(0)
    i_in = torch.rand(2, 3, 4, 4, generator=g)
    states = [_state(torch.rand(2, 3, 4, 4, generator=g), torch.zeros(2, 1, 4, 4)) for _ in range(3)]
    out, _ = adaptive_fuse(states, i_in, 1e-8)
    assert torch.equal(out, i_in)


def test_fuse_matches_loop_oracle():
    g = torch.Generator().manual_seed(7)
    i_in = torch.rand(1, 3, 4, 4, generator=g)
    outs = [torch.rand(1, 3, 4, 4, generator=g) for _ in range(3)]
    masks = [torch.rand(1, 1, 4, 4, generator=g) for _ in range(3)]
    got, got_m = adaptive_fuse([_state(o, m) for o, m in zip(outs, masks)], i_in, 1e-8)
    ref, ref_m = fuse_loop([o.numpy() for o in outs], [m.numpy() for m in masks], i_in.numpy(), 1e-8)
    assert np.abs(got.numpy() - ref).max() <= 1e-6
    assert np.abs(got_m.numpy() - ref_m).max() <= 1e-6


def test_fuse_empty_raises():
    with pytest.raises(ValueError):
        adaptive_fuse([], torch.rand(1, 3, 4, 4))


# ---------------------------------------------------------------- run_iteration / forward

def test_first_iteration_stack(small_model, monkeypatch):
    seen = {}
    orig = small_model.encode

    def spy(stack):
        seen.setdefault("stack", stack)
        return orig(stack)

    monkeypatch.setattr(small_model, "encode", spy)
    x = torch.rand(1, 3, 32, 32)
    small_model(x, iterations=1)
    stack = seen["stack"]
    assert torch.equal(stack[:, :3], x) and torch.equal(stack[:, 3:6], x)
    assert torch.count_nonzero(stack[:, 6:]) == 0


def test_run_iteration_merged_dominates_previous(small_model):
    small_model.eval()
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        s1 = small_model.run_iteration(IterationState.initial(x), x)
        s2 = small_model.run_iteration(s1, x)
    assert s1.index == 1 and s2.index == 2
    assert (s2.mask_merged >= s1.mask).all()
    assert s2.removed.shape == x.shape and s2.mask.shape == (2, 1, 32, 32)


def test_forward_three_iterations_full_resolution():
    torch.manual_seed(0)
    model = PSSTRNet(PSSTRNetConfig(base_channels=8)).eval()
    with torch.no_grad():
        final, mask, states = model(torch.rand(1, 3, 256, 256))
    assert len(states) == 3
    assert [s.index for s in states] == [1, 2, 3]
    assert final.shape == (1, 3, 256, 256) and mask.shape == (1, 1, 256, 256)


def test_forward_outputs_bounded(small_model):
    small_model.eval()
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for _ in range(100):
            x = torch.rand(1, 3, 16, 16, generator=g)
            final, mask, states = small_model(x)
            raw, _ = adaptive_fuse(states, x, small_model.cfg.epsilon)
            assert raw.min() >= -1e-6 and raw.max() <= 1 + 1e-6
            assert final.min() >= 0 and final.max() <= 1


def test_forward_deterministic(small_model):
    small_model.eval()
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        a = small_model(x)
        b = small_model(x)
    assert torch.equal(a.final, b.final) and torch.equal(a.fused_mask, b.fused_mask)


def test_forward_without_fusion_returns_last_iteration(small_model):
    small_model.eval()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        r = small_model(x, iterations=2, adaptive_fusion=False)
    assert torch.equal(r.final, r.states[-1].removed)
    assert torch.equal(r.fused_mask, r.states[-1].mask)


def test_gradient_reaches_every_parameter(small_model):
    small_model.train()
    x = torch.rand(2, 3, 32, 32)
    final, mask, states = small_model(x)
    loss = final.mean() + sum(s.mask.mean() + s.removed.mean() for s in states)
    loss.backward()
    for name, p in small_model.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
    assert small_model.mum.alpha.grad.abs().item() > 0
    assert small_model.mum.beta.grad.abs().item() > 0


# ---------------------------------------------------------------- parameter_count

def test_parameter_count_arithmetic():
    assert parameter_count({}) == 0
    assert parameter_count({"a": torch.zeros(3, 3), "b": torch.zeros(4)}) == 13


def test_parameter_count_default_in_budget():
    n = parameter_count(PSSTRNet())
    assert 0.5 * 4.88e6 <= n <= 1.5 * 4.88e6


def test_named_parameter_set_has_unique_names(small_model):
    params = small_model.named_parameter_set()
    assert "mum.alpha" in params and "mum.beta" in params
    assert len(params) == len(set(params))

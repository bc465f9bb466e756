import pytest
import torch

from mdlab.denoiser import (
    ContextSet,
    Denoiser,
    DenoiserConfig,
    SelfAttention,
    combined_eps,
    forward_full,
    forward_masked,
    load_denoiser,
    save_denoiser,
)
from mdlab.errors import ContractViolationError, InvalidMaskError
from mdlab.numerics import Rng
from mdlab.objective import disentanglement_loss
from mdlab.schedule import background, make_linear_schedule, masked_noise


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = Denoiser(DenoiserConfig(), seed=3)
    # non-trivial prior so the baseline does not dominate
    m.fit_prior(Rng(1).normal((16, 4, 16, 16)))
    with torch.no_grad():
        for p in m.head.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return m


def _mask(seed, b=1):
    m = torch.zeros(b, 1, 16, 16)
    r = Rng(seed, (3,))
    for i in range(b):
        y, x = int(r.integers(2, 9)), int(r.integers(2, 9))
        m[i, 0, y : y + 5, x : x + 4] = 1
    return m


def _perturbed(ctx: ContextSet, name: str, seed: int) -> ContextSet:
    out = ContextSet(ctx.c_def.shape[0], ctx.c_def.shape[1])
    out.load_state_dict(ctx.state_dict())
    with torch.no_grad():
        getattr(out, name).add_(Rng(seed).normal(getattr(out, name).shape))
    return out


@torch.no_grad()
def test_context_views_share_parameters(model):
    ctx = model.contexts
    assert ctx.c1[1] is ctx.c2[1] is ctx.c_bg
    assert ctx.c1[0] is ctx.c_def and ctx.c2[0] is ctx.c_m


@torch.no_grad()
def test_full_branch_ignores_defect_context_with_empty_mask(model):
    z = Rng(0).normal((2, 4, 16, 16))
    m = torch.zeros(2, 1, 16, 16)
    a, _ = forward_full(z, 500, model, m)
    b, _ = forward_full(z, 500, model, m, _perturbed(model.contexts, "c_def", 1))
    assert torch.equal(a, b)


@torch.no_grad()
def test_full_branch_ignores_background_context_with_full_mask(model):
    z = Rng(0).normal((2, 4, 16, 16))
    m = torch.ones(2, 1, 16, 16)
    a, _ = forward_full(z, 500, model, m)
    b, _ = forward_full(z, 500, model, m, _perturbed(model.contexts, "c_bg", 1))
    assert torch.equal(a, b)


@torch.no_grad()
def test_attention_rows_sum_to_one(model):
    for seed in range(5):
        z = Rng(seed).normal((2, 4, 16, 16))
        _, rec = forward_full(z, 1 + 100 * seed, model, _mask(seed, 2), capture=True)
        assert len(rec.maps) == 3 and rec.branch == "full"
        for a, (h, w) in zip(rec.maps, rec.resolutions):
            assert a.shape == (2, h * w, model.cfg.tokens)
            assert torch.allclose(a.sum(-1), torch.ones(2, h * w), atol=1e-6)


@torch.no_grad()
def test_mask_extent_mismatch(model):
    z = Rng(0).normal((1, 4, 16, 16))
    with pytest.raises(InvalidMaskError):
        forward_full(z, 10, model, torch.zeros(1, 1, 8, 8))
    with pytest.raises(InvalidMaskError):
        forward_full(z, 10, model, [torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 4, 4)])


@torch.no_grad()
def test_masked_branch_contract(model):
    z = Rng(0).normal((1, 4, 16, 16))
    with pytest.raises(ContractViolationError):
        forward_masked(z, 10, model, _mask(0))


@torch.no_grad()
def test_background_isolation_hundred_perturbations(model):
    m = _mask(7)
    base = Rng(0).normal((1, 4, 16, 16))
    ref = background(forward_masked(background(base, m), 400, model, m), m)
    for k in range(100):
        x = torch.where(m > 0, Rng(k, (11,)).normal(base.shape) * 3, base)
        out = forward_masked(background(x, m), 400, model, m)
        assert torch.equal(background(out, m), ref)


@torch.no_grad()
def test_context_disentanglement(model):
    m = _mask(4)
    z = Rng(0).normal((1, 4, 16, 16))
    zm = background(z, m)
    a = forward_masked(zm, 300, model, m)
    assert torch.equal(a, forward_masked(zm, 300, model, m, _perturbed(model.contexts, "c_def", 2)))
    f, _ = forward_full(z, 300, model, m)
    g, _ = forward_full(z, 300, model, m, _perturbed(model.contexts, "c_m", 2))
    assert torch.equal(f, g)


@torch.no_grad()
def test_masked_branch_with_empty_mask_is_plain_forward(model):
    z = Rng(0).normal((2, 4, 16, 16))
    m = torch.zeros(2, 1, 16, 16)
    c_m, c_bg = model.contexts.c2
    plain, _ = model(z, 600, c_m, c_bg, m, restrict=False)
    assert torch.allclose(forward_masked(z, 600, model, m), plain, atol=1e-6)


def test_zero_input_rows_give_zero_values():
    sa = SelfAttention(16)
    x = torch.randn(2, 10, 16)
    x[:, 3:6] = 0
    sa(x)
    assert torch.all(sa.last_values[:, 3:6] == 0)
    km = torch.zeros(2, 10, 1)
    km[:, 7] = 1
    sa(x, km)
    assert torch.all(sa.last_values[:, 7] == 0)


@torch.no_grad()
def test_output_finite_and_same_extents(model):
    for seed in range(5):
        m = _mask(seed)
        z = background(Rng(seed).normal((1, 4, 16, 16)) * 4, m)
        out = forward_masked(z, 999, model, m)
        assert out.shape == z.shape and torch.isfinite(out).all()


@torch.no_grad()
def test_combined_eps_selects_branches(model):
    s = make_linear_schedule()
    z0, eps = Rng(0).normal((2, 4, 16, 16)), Rng(1).normal((2, 4, 16, 16))
    for m in (torch.ones(2, 1, 16, 16), torch.zeros(2, 1, 16, 16), _mask(5, 2)):
        pair = masked_noise(z0, m, 321, eps, s)
        comb = combined_eps(pair, model)
        full, _ = forward_full(pair.z_t, 321, model, m)
        if torch.all(m == 1):
            assert torch.equal(comb, full)
            continue
        masked = forward_masked(pair.z_t_m, 321, model, m)
        if torch.all(m == 0):
            assert torch.equal(comb, masked)
        zero = torch.zeros(())
        assert torch.equal(torch.where(m > 0, comb, zero), torch.where(m > 0, full, zero))
        assert torch.equal(torch.where(m > 0, zero, comb), torch.where(m > 0, zero, masked))


def test_every_parameter_gets_gradient(model):
    s = make_linear_schedule()
    z0, eps = Rng(0).normal((4, 4, 16, 16)), Rng(1).normal((4, 4, 16, 16))
    pair = masked_noise(z0, _mask(6, 4), torch.tensor([10, 200, 600, 900]), eps, s)
    model.zero_grad(set_to_none=True)
    disentanglement_loss(pair, eps, model).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    model.zero_grad(set_to_none=True)
    assert dead == []


def test_checkpoint_roundtrip(tmp_path, model):
    save_denoiser(tmp_path, model, {"defect_id": 1})
    back, meta = load_denoiser(tmp_path)
    assert meta["defect_id"] == 1
    z = Rng(0).normal((1, 4, 16, 16))
    with torch.no_grad():
        a, _ = forward_full(z, 77, model, _mask(1))
        b, _ = forward_full(z, 77, back, _mask(1))
    assert torch.equal(a, b)
    assert (tmp_path / "checkpoint.txt").read_text().startswith("meta ")

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from stylegs import gradcheck
from stylegs.camera import fixed_ring_cameras, flatten_extrinsics
from stylegs.errors import FormatError, ParameterError
from stylegs.guidance import (
    ConditioningContext,
    LoraAdapter,
    OracleDenoiser,
    ToyDenoiser,
    attention,
    decoupled_cross_attention,
    encode_text,
    guidance_difference,
    load_weights,
    lora_forward,
    lora_loss,
    lora_loss_and_grads,
    make_schedule,
    oracle_denoiser_predict,
    perturb,
    sample_timestep,
    save_weights,
    sds_grad,
    vsd_grad,
    vssd_grad,
)
from stylegs.guidance.denoisers import style_patches

SCHED = make_schedule()


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# schedule


def test_schedule_endpoints_and_product():
    assert SCHED.betas[0] == pytest.approx(1e-4) and SCHED.betas[-1] == pytest.approx(2e-2)
    prod = 1.0
    for i in range(1000):
        prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i / 999)
    assert SCHED.alpha_bars[-1] == pytest.approx(prod, rel=1e-10)
    assert SCHED.alpha_bars[-1] < 5e-5
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    np.testing.assert_allclose(SCHED.sigmas**2 + SCHED.alpha_bars, 1.0, atol=1e-15)


def test_weight_is_one_minus_alpha_bar():
    for t in (0, 10, 500, 999):
        assert SCHED.weight(t) == pytest.approx(1 - SCHED.alpha_bars[t])


def test_two_step_schedule():
    s = make_schedule(T=2)
    assert s.alpha_bars[1] == pytest.approx((1 - 1e-4) * (1 - 2e-2))


@pytest.mark.parametrize("kwargs", [{"T": 1}, {"beta_min": 0.0}, {"beta_min": 0.1, "beta_max": 0.05},
                                    {"beta_max": 1.0}])
def test_schedule_rejects(kwargs):
    with pytest.raises(ParameterError):
        make_schedule(**kwargs)


@pytest.mark.parametrize("t", [-1, 1000])
def test_timestep_out_of_range(t):
    with pytest.raises(ParameterError):
        SCHED.weight(t)


def test_perturb_moments():
    rng = np.random.default_rng(0)
    x0 = np.full((200, 200, 3), 0.7)
    t = 300
    z = perturb(x0, t, rng.standard_normal(x0.shape), SCHED)
    assert z.mean() == pytest.approx(math.sqrt(SCHED.alpha_bars[t]) * 0.7, abs=5e-3)
    assert z.var() == pytest.approx(1 - SCHED.alpha_bars[t], rel=0.02)


def test_perturb_shape_mismatch():
    with pytest.raises(ParameterError):
        perturb(np.zeros((4, 4, 3)), 0, np.zeros((4, 4, 1)), SCHED)


def test_sample_timestep_ranges():
    rng = np.random.default_rng(0)
    full = [sample_timestep(rng, schedule=SCHED) for _ in range(5000)]
    assert min(full) == 0 and max(full) == 999
    upper = [sample_timestep(rng, 0.5, 1.0, SCHED) for _ in range(2000)]
    assert min(upper) == 500 and max(upper) == 999
    mid = [sample_timestep(rng, 0.02, 0.98, T=1000) for _ in range(5000)]
    assert min(mid) >= 20 and max(mid) < 980
    with pytest.raises(ParameterError):
        sample_timestep(rng, 0.6, 0.4, SCHED)


# attention and LoRA


def test_attention_hand_computed():
    q = _t([[1.0, 0.0]])
    k = _t([[1.0, 0.0], [0.0, 1.0]])
    v = _t([[1.0, 2.0], [3.0, 4.0]])
    w = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    expected = [w * 1 + (1 - w) * 3, w * 2 + (1 - w) * 4]
    np.testing.assert_allclose(attention(q, k, v).numpy()[0], expected, atol=1e-14)


def test_attention_shape_errors():
    with pytest.raises(ParameterError):
        attention(torch.zeros(2, 3), torch.zeros(4, 2), torch.zeros(4, 5))
    with pytest.raises(ParameterError):
        attention(torch.zeros(2, 3), torch.zeros(4, 3), torch.zeros(5, 5))


@given(st.integers(0, 10_000), st.floats(0, 3))
def test_decoupled_attention_affine_in_lambda(seed, lam):
    g = torch.Generator().manual_seed(seed)
    q, ky, vy, ki, vi = (torch.randn(n, 4, generator=g, dtype=torch.float64) for n in (3, 5, 5, 6, 6))
    text = attention(q, ky, vy)
    np.testing.assert_allclose(decoupled_cross_attention(q, ky, vy, ki, vi, 0.0).numpy(), text.numpy(), atol=1e-14)
    np.testing.assert_allclose(decoupled_cross_attention(q, ky, vy, ki, vi, lam).numpy(),
                               (text + lam * attention(q, ki, vi)).numpy(), atol=1e-12)
    np.testing.assert_array_equal(decoupled_cross_attention(q, ky, vy).numpy(), text.numpy())


def test_fresh_lora_is_identity():
    ad = LoraAdapter(6, 5, rank=4, generator=torch.Generator().manual_seed(0))
    assert not torch.any(ad.delta())
    w = torch.randn(5, 6, dtype=torch.float64)
    x = torch.randn(7, 6, dtype=torch.float64)
    np.testing.assert_array_equal(lora_forward(w, ad, x).detach().numpy(), (x @ w.T).numpy())


def test_lora_forward_equals_merged_weight():
    g = torch.Generator().manual_seed(1)
    ad = LoraAdapter(6, 5, rank=4, alpha=2.0, generator=g)
    with torch.no_grad():
        ad.B.copy_(torch.randn(5, 4, generator=g, dtype=torch.float64))
    w = torch.randn(5, 6, generator=g, dtype=torch.float64)
    b = torch.randn(5, generator=g, dtype=torch.float64)
    x = torch.randn(3, 6, generator=g, dtype=torch.float64)
    merged = w + 0.5 * ad.B @ ad.A
    np.testing.assert_allclose(lora_forward(w, ad, x, b).detach().numpy(), (x @ merged.T + b).detach().numpy(),
                               atol=1e-13)


def test_lora_fits_low_rank_update():
    # least-squares recovery of a rank-2 weight change through the adapter factors
    g = torch.Generator().manual_seed(2)
    target = torch.randn(5, 2, generator=g, dtype=torch.float64) @ torch.randn(2, 6, generator=g, dtype=torch.float64)
    ad = LoraAdapter(6, 5, rank=4, generator=g)
    x = torch.randn(64, 6, generator=g, dtype=torch.float64)
    w = torch.zeros(5, 6, dtype=torch.float64)
    opt = torch.optim.LBFGS(ad.parameters(), max_iter=500, tolerance_grad=1e-14, tolerance_change=1e-16,
                            line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = torch.mean((lora_forward(w, ad, x) - x @ target.T) ** 2)
        loss.backward()
        return loss

    opt.step(closure)
    assert torch.max(torch.abs(ad.delta() - target)) < 1e-6


def test_lora_shape_errors():
    ad = LoraAdapter(6, 5, rank=4)
    with pytest.raises(ParameterError):
        lora_forward(torch.zeros(5, 7, dtype=torch.float64), ad, torch.zeros(2, 7, dtype=torch.float64))
    with pytest.raises(ParameterError):
        LoraAdapter(6, 5, rank=0)


def test_lora_reset_zeroes_b():
    ad = LoraAdapter(6, 5, rank=4, generator=torch.Generator().manual_seed(0))
    a0 = ad.A.detach().clone()
    with torch.no_grad():
        ad.B.fill_(1.0)
    ad.reset(torch.Generator().manual_seed(0))
    assert not torch.any(ad.B) and torch.equal(ad.A, a0)


# toy denoiser


@pytest.fixture(scope="module")
def toy():
    return ToyDenoiser(seed=0)


def _z(seed=0, size=16):
    return np.random.default_rng(seed).standard_normal((size, size, 3))


def _flat(k=0, size=16):
    return flatten_extrinsics(fixed_ring_cameras(4, resolution=size)[k])


def test_camera_token_distinct_and_affine(toy):
    tokens = [toy.camera_token(_flat(k)).detach().numpy() for k in range(4)]
    assert tokens[0].shape == (32,)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(tokens[i] - tokens[j]) > 1e-3
    assert not torch.any(toy.camera_token(np.zeros(12)))  # zero bias at init


def test_fresh_lora_is_neutral(toy):
    ctx = ConditioningContext(e_y=encode_text("a"), e_c=toy.camera_token(_flat()).detach())
    z = _z()
    np.testing.assert_array_equal(toy.predict(z, 100, ctx, use_lora=True), toy.predict(z, 100, ctx, use_lora=False))


def test_toy_is_deterministic():
    ctx = ConditioningContext(e_y=encode_text("a toy object"))
    a = ToyDenoiser(seed=3).predict(_z(1), 10, ctx)
    b = ToyDenoiser(seed=3).predict(_z(1), 10, ctx)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, ToyDenoiser(seed=4).predict(_z(1), 10, ctx))


def test_lambda_zero_matches_no_style(toy):
    e_y = encode_text("a toy object")
    e_i = toy.style_tokens(np.random.default_rng(0).uniform(size=(32, 32, 3))).detach()
    z = _z(2)
    plain = toy.predict(z, 50, ConditioningContext(e_y=e_y))
    off = toy.predict(z, 50, ConditioningContext(e_y=e_y, e_I=e_i, lambda_scale=0.0))
    on = toy.predict(z, 50, ConditioningContext(e_y=e_y, e_I=e_i, lambda_scale=1.0))
    np.testing.assert_allclose(off, plain, atol=1e-12)
    assert np.max(np.abs(on - plain)) > 1e-6


def test_toy_rejects_bad_size(toy):
    with pytest.raises(ParameterError):
        toy.predict(np.zeros((12, 12, 3)), 0, ConditioningContext())


def test_context_cannot_mix_style_and_camera():
    with pytest.raises(ParameterError):
        ConditioningContext(e_I=np.zeros((1, 32)), e_c=np.zeros(32)).validate()
    with pytest.raises(ParameterError):
        ConditioningContext(lambda_scale=-1).validate()


def test_encode_text():
    assert np.array_equal(encode_text("abc"), encode_text("abc"))
    assert not np.array_equal(encode_text(""), encode_text("abc"))
    assert encode_text("").shape == (8, 32)
    assert encode_text(None) is None


def test_style_patches_layout():
    img = np.zeros((16, 16, 3))
    img[:4, 4:8] = 1.0  # second cell of the first row
    p = style_patches(img)
    assert p.shape == (16, 48)
    assert np.all(p[1] == 1.0) and np.all(np.delete(p, 1, axis=0) == 0.0)


# oracle denoiser and the guidance gradients


def test_oracle_fixed_point():
    rng = np.random.default_rng(0)
    target = rng.uniform(size=(8, 8, 3))
    eps = rng.standard_normal(target.shape)
    oracle = OracleDenoiser(SCHED, {"v": target})
    ctx = ConditioningContext(camera_id="v")
    for t in (0, 500, 999):
        np.testing.assert_allclose(oracle.predict(perturb(target, t, eps, SCHED), t, ctx), eps, atol=1e-9)
        assert np.max(np.abs(sds_grad(target, t, eps, oracle, ctx, SCHED))) < 1e-9


@given(st.integers(0, 10_000), st.integers(0, 999), st.floats(0, 1))
def test_oracle_residual_is_scaled_image_error(seed, t, blend):
    rng = np.random.default_rng(seed)
    target, style, x = (rng.uniform(size=(4, 4, 3)) for _ in range(3))
    eps = rng.standard_normal(x.shape)
    oracle = OracleDenoiser(SCHED, {"v": target}, style_tile=style, blend=blend)
    x_star = (1 - blend) * target + blend * style
    np.testing.assert_allclose(oracle.clean_target("v"), x_star, atol=1e-14)
    got = sds_grad(x, t, eps, oracle, ConditioningContext(camera_id="v"), SCHED)
    a = SCHED.alpha_bars[t]
    expected = (1 - a) * math.sqrt(a) / math.sqrt(1 - a) * (x - x_star)
    np.testing.assert_allclose(got, expected, rtol=1e-7, atol=1e-7)


def test_oracle_blend_mask():
    target = np.zeros((2, 2, 3))
    style = np.ones((2, 2, 3))
    mask = np.array([[1.0, 0.0], [0.5, 0.0]])
    oracle = OracleDenoiser(SCHED, style_tile=style, blend=0.8)
    oracle.register("v", target, blend_mask=mask)
    np.testing.assert_allclose(oracle.clean_target("v")[..., 0], 0.8 * mask)
    z = perturb(target, 10, np.zeros_like(target), SCHED)
    direct = oracle_denoiser_predict({"v": target}, style, 0.8, z, 10, "v", SCHED, np.ones((2, 2)))
    plain = oracle_denoiser_predict({"v": target}, style, 0.8, z, 10, "v", SCHED)
    np.testing.assert_array_equal(direct, plain)
    oracle.forget("v")
    with pytest.raises(ParameterError):
        oracle.predict(z, 10, ConditioningContext(camera_id="v"))


def test_oracle_blend_range():
    with pytest.raises(ParameterError):
        OracleDenoiser(SCHED, blend=1.5)


class _Const:
    def __init__(self, value):
        self.value = value

    def predict(self, z_t, t, ctx):
        return np.full(z_t.shape, self.value)


def test_guidance_identities():
    x = np.zeros((4, 4, 3))
    eps = np.zeros_like(x)
    t = 400
    w = SCHED.weight(t)
    cam = ConditioningContext(e_c=np.zeros(32))
    sty = ConditioningContext(e_I=np.zeros((16, 32)))
    np.testing.assert_allclose(vsd_grad(x, t, eps, _Const(2.0), ConditioningContext(), _Const(0.5), cam, SCHED),
                               w * 1.5)
    np.testing.assert_allclose(vsd_grad(x, t, eps, _Const(0.5), ConditioningContext(), _Const(2.0), cam, SCHED),
                               -w * 1.5)
    np.testing.assert_allclose(vssd_grad(x, t, eps, _Const(1.0), sty, _Const(1.0), cam, SCHED), 0.0)
    np.testing.assert_allclose(sds_grad(x, t, eps + 0.25, _Const(1.0), ConditioningContext(), SCHED), w * 0.75)
    np.testing.assert_allclose(guidance_difference([1.0], [3.0], t, SCHED), [-2 * w])
    with pytest.raises(ParameterError):
        guidance_difference(np.zeros(2), np.zeros(3), t, SCHED)


def test_guidance_context_errors():
    x = np.zeros((4, 4, 3))
    cam = ConditioningContext(e_c=np.zeros(32))
    sty = ConditioningContext(e_I=np.zeros((16, 32)))
    with pytest.raises(ParameterError):
        vsd_grad(x, 0, x, _Const(0), sty, _Const(0), cam, SCHED)
    with pytest.raises(ParameterError):
        vssd_grad(x, 0, x, _Const(0), ConditioningContext(), _Const(0), cam, SCHED)
    with pytest.raises(ParameterError):
        vssd_grad(x, 0, x, _Const(0), sty, _Const(0), ConditioningContext(), SCHED)


def test_denoiser_shape_checked():
    class Bad:
        def predict(self, z_t, t, ctx):
            return np.zeros(3)

    with pytest.raises(ParameterError):
        sds_grad(np.zeros((4, 4, 3)), 0, np.zeros((4, 4, 3)), Bad(), ConditioningContext(), SCHED)


# LoRA diffusion loss


def test_lora_loss_nonnegative_and_text_rejected(toy):
    z, eps = _z(3), _z(4)
    assert float(lora_loss(toy, z, 200, _flat(), eps).detach()) >= 0
    with pytest.raises(ParameterError):
        lora_loss(toy, z, 200, _flat(), eps, text="a cat")


def test_lora_loss_grads_cover_trainable_only(toy):
    value, grads = lora_loss_and_grads(toy, _z(3), 200, _flat(1), _z(4))
    assert set(grads) == set(toy.trainable_parameters())
    assert value == pytest.approx(float(lora_loss(toy, _z(3), 200, _flat(1), _z(4)).detach()))
    assert all(not p.requires_grad for p in toy.base_parameters())


@pytest.mark.parametrize("seed", [0, 1])
def test_lora_gradients_match_finite_differences(seed):
    for r in gradcheck.check_guidance(seed):
        assert r.passed, r.line()


# weights blob


def test_weights_round_trip(tmp_path):
    a = ToyDenoiser(seed=1)
    with torch.no_grad():
        a.lora[0]["v"].B.fill_(0.25)
    save_weights(a, tmp_path / "w")
    b = load_weights(ToyDenoiser(seed=2), tmp_path / "w")
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n
    assert (tmp_path / "w.bin").stat().st_size == sum(p.numel() * 8 for p in a.state_dict().values())


def test_weights_corrupt(tmp_path):
    save_weights(ToyDenoiser(seed=1), tmp_path / "w")
    blob = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "w.bin").write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_weights(ToyDenoiser(), tmp_path / "w")
    with pytest.raises(FormatError):
        load_weights(ToyDenoiser(), tmp_path / "missing")

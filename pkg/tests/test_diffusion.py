import numpy as np
import pytest
import torch

from _gradcheck import check_param_gradients
from fepdiff.dataio import ResidualStats
from fepdiff.diffusion import (
    NoiseSchedule,
    ResidualDenoiser,
    build_tokens,
    ddim_sample,
    ddim_timesteps,
    denormalize_residual,
    forward_sample,
    make_schedule,
    min_snr_loss,
    normalize_residual,
    refine,
)


# ------------------------------------------------------------------ schedule


def test_schedule_endpoints():
    s = make_schedule(200, 1e-4, 0.02)
    np.testing.assert_allclose(s.beta[0].item(), 1e-4, rtol=1e-12)
    np.testing.assert_allclose(s.beta[-1].item(), 0.02, rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bar[0].item(), 1 - 1e-4, rtol=1e-12)


def test_schedule_beta_strictly_increasing():
    s = make_schedule(200, 1e-4, 0.02)
    assert bool((s.beta[1:] > s.beta[:-1]).all())


def test_schedule_alpha_bar_product_oracle():
    s = make_schedule(200, 1e-4, 0.02)
    direct = 1.0
    for t in range(200):
        direct *= 1.0 - s.beta[t].item()
    np.testing.assert_allclose(s.alpha_bar[-1].item(), direct, rtol=1e-12)
    assert bool((s.alpha_bar[1:] < s.alpha_bar[:-1]).all())
    assert 0.0 < s.alpha_bar[-1].item() < 0.15


def test_schedule_ratio_identity():
    s = make_schedule(200, 1e-4, 0.02)
    ratios = s.alpha_bar[1:] / s.alpha_bar[:-1]
    np.testing.assert_allclose(ratios.numpy(), s.alpha[1:].numpy(), rtol=1e-12)


def test_schedule_rejects_bad_bounds():
    with pytest.raises(ValueError):
        make_schedule(200, 0.02, 1e-4)
    with pytest.raises(ValueError):
        make_schedule(200, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_schedule(0, 1e-4, 0.02)


# ------------------------------------------------------------- forward_sample


def test_forward_sample_noiseless():
    s = make_schedule(50)
    x0 = torch.randn(12, 2, dtype=torch.float64)
    x_t = forward_sample(x0, 10, torch.zeros_like(x0), s)
    expected = float(np.sqrt(s.alpha_bar[9].item())) * x0
    torch.testing.assert_close(x_t, expected)


def test_forward_sample_pure_noise():
    s = make_schedule(50)
    eps = torch.randn(12, 2, dtype=torch.float64)
    x_t = forward_sample(torch.zeros_like(eps), 50, eps, s)
    expected = float(np.sqrt(1 - s.alpha_bar[-1].item())) * eps
    torch.testing.assert_close(x_t, expected)


def test_forward_sample_range_check():
    s = make_schedule(50)
    x0 = torch.zeros(12, 2)
    with pytest.raises(ValueError):
        forward_sample(x0, 0, torch.zeros_like(x0), s)
    with pytest.raises(ValueError):
        forward_sample(x0, 51, torch.zeros_like(x0), s)
    with pytest.raises(ValueError):
        forward_sample(x0, 1, torch.zeros(3, 2), s)


def test_forward_sample_matches_iterated_composition():
    # compose the single-step kernel and compare the empirical marginal
    s = make_schedule(50, 1e-3, 0.05)
    t = 30
    x0 = torch.tensor([0.7, -0.4], dtype=torch.float64)
    n = 100_000
    gen = torch.Generator().manual_seed(0)
    x = x0.expand(n, 2).clone()
    for step in range(1, t + 1):
        beta = s.beta[step - 1].item()
        noise = torch.randn(n, 2, generator=gen, dtype=torch.float64)
        x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * noise
    ab = s.alpha_bar[t - 1].item()
    mean_se = np.sqrt((1 - ab) / n)
    for c in range(2):
        assert abs(x[:, c].mean().item() - np.sqrt(ab) * x0[c].item()) < 3 * mean_se
        var = x[:, c].var(unbiased=True).item()
        var_se = (1 - ab) * np.sqrt(2.0 / (n - 1))
        assert abs(var - (1 - ab)) < 3 * var_se


def test_forward_sample_marginal_monte_carlo():
    s = make_schedule(200)
    t = 120
    x0 = torch.tensor([1.3, -0.2], dtype=torch.float64)
    n = 100_000
    gen = torch.Generator().manual_seed(1)
    eps = torch.randn(n, 2, generator=gen, dtype=torch.float64)
    x_t = forward_sample(x0.expand(n, 2), t, eps, s)
    ab = s.alpha_bar[t - 1].item()
    mean_se = np.sqrt((1 - ab) / n)
    var_se = (1 - ab) * np.sqrt(2.0 / (n - 1))
    for c in range(2):
        assert abs(x_t[:, c].mean().item() - np.sqrt(ab) * x0[c].item()) < 3 * mean_se
        assert abs(x_t[:, c].var(unbiased=True).item() - (1 - ab)) < 3 * var_se


# ------------------------------------------------------------- normalization


def make_stats(mu=(1.0, 1.0), sigma=(2.0, 2.0)):
    return ResidualStats(mu_r=np.array(mu), sigma_r=np.array(sigma))


def test_normalize_centers_mean():
    stats = make_stats()
    delta = torch.ones(12, 2)
    assert torch.equal(normalize_residual(delta, stats), torch.zeros(12, 2))


def test_normalize_hand_case():
    stats = make_stats()
    x0 = normalize_residual(torch.tensor([[3.0, 5.0]]), stats)
    torch.testing.assert_close(x0, torch.tensor([[1.0, 2.0]]))


def test_normalize_round_trip():
    stats = ResidualStats(mu_r=np.array([0.3, -0.7]), sigma_r=np.array([1.7, 0.4]))
    gen = torch.Generator().manual_seed(2)
    delta = torch.randn(12, 2, generator=gen, dtype=torch.float64)
    back = denormalize_residual(normalize_residual(delta, stats), stats)
    assert (back - delta).abs().max().item() < 1e-9


# -------------------------------------------------------------------- tokens


def test_tokens_zero_residual():
    proxy = torch.randn(12, 2)
    tokens = build_tokens(torch.zeros(12, 2), proxy)
    assert tokens.shape == (12, 4)
    assert torch.equal(tokens[:, :2], torch.zeros(12, 2))
    assert torch.equal(tokens[:, 2:], proxy)


def test_tokens_permutation_is_elementwise():
    gen = torch.Generator().manual_seed(3)
    residual = torch.randn(12, 2, generator=gen)
    proxy = torch.randn(12, 2, generator=gen)
    perm = torch.randperm(12, generator=gen)
    tokens = build_tokens(residual, proxy)
    assert torch.equal(build_tokens(residual[perm], proxy[perm]), tokens[perm])


def test_tokens_length_mismatch():
    with pytest.raises(ValueError):
        build_tokens(torch.zeros(12, 2), torch.zeros(11, 2))


# ------------------------------------------------------------------ denoiser


def make_denoiser(seed=0, **kwargs) -> ResidualDenoiser:
    torch.manual_seed(seed)
    return ResidualDenoiser(
        make_schedule(20), cond_dim=10, width=32, depth=2, heads=2, **kwargs
    )


def test_denoiser_deterministic_and_shaped():
    model = make_denoiser()
    gen = torch.Generator().manual_seed(4)
    x_t = torch.randn(3, 12, 2, generator=gen)
    cond = torch.randn(3, 10, generator=gen)
    proxy = torch.randn(3, 12, 2, generator=gen)
    out = model(x_t, 5, cond, proxy)
    assert out.shape == (3, 12, 2)
    assert torch.equal(out, model(x_t, 5, cond, proxy))


def test_denoiser_sensitive_to_proxy():
    gen = torch.Generator().manual_seed(5)
    x_t = torch.randn(1, 12, 2, generator=gen)
    cond = torch.randn(1, 10, generator=gen)
    changed = 0
    for seed in range(100):
        model = make_denoiser(seed=seed)
        proxy_a = torch.randn(1, 12, 2, generator=gen)
        proxy_b = torch.randn(1, 12, 2, generator=gen)
        with torch.no_grad():
            if not torch.allclose(model(x_t, 3, cond, proxy_a), model(x_t, 3, cond, proxy_b)):
                changed += 1
    assert changed >= 99


def test_denoiser_token_condition_ablation():
    model = make_denoiser(use_token_condition=False)
    gen = torch.Generator().manual_seed(6)
    x_t = torch.randn(1, 12, 2, generator=gen)
    cond = torch.randn(1, 10, generator=gen)
    with torch.no_grad():
        out_a = model(x_t, 3, cond, torch.randn(1, 12, 2, generator=gen))
        out_b = model(x_t, 3, cond, torch.randn(1, 12, 2, generator=gen))
    assert torch.equal(out_a, out_b)  # proxy no longer enters the tokens


# ---------------------------------------------------------------- min-snr


def test_min_snr_zero_error():
    s = make_schedule(200)
    eps = torch.randn(12, 2)
    assert min_snr_loss(eps, eps, 10, s).item() == 0.0


def test_min_snr_handcrafted_alpha_bar():
    alpha_bar = torch.tensor([0.9, 0.75], dtype=torch.float64)
    s = NoiseSchedule(
        t_steps=2,
        beta=torch.tensor([0.1, 1 - 0.75 / 0.9], dtype=torch.float64),
        alpha=torch.tensor([0.9, 0.75 / 0.9], dtype=torch.float64),
        alpha_bar=alpha_bar,
    )
    np.testing.assert_allclose(s.snr(2).item(), 3.0, rtol=1e-12)
    eps_hat = torch.zeros(2, 2, dtype=torch.float64)
    eps = torch.ones(2, 2, dtype=torch.float64)
    np.testing.assert_allclose(min_snr_loss(eps_hat, eps, 2, s).item(), 0.25 * 4.0, rtol=1e-12)


def test_min_snr_weight_identity_over_schedule():
    s = make_schedule(200, 1e-4, 0.02)
    for t in range(1, 201):
        w_snr = 1.0 / (s.snr(t).item() + 1.0)
        w_direct = 1.0 - s.alpha_bar_at(t).item()
        assert abs(w_snr - w_direct) < 1e-12


def test_min_snr_batched_mean():
    s = make_schedule(50)
    gen = torch.Generator().manual_seed(7)
    eps_hat = torch.randn(4, 12, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 12, 2, generator=gen, dtype=torch.float64)
    t = torch.tensor([1, 10, 25, 50])
    total = min_snr_loss(eps_hat, eps, t, s).item()
    manual = np.mean(
        [min_snr_loss(eps_hat[i], eps[i], int(t[i]), s).item() for i in range(4)]
    )
    np.testing.assert_allclose(total, manual, rtol=1e-12)


def test_min_snr_gradient_matches_fd():
    model = make_denoiser().double()
    s = make_schedule(20)
    gen = torch.Generator().manual_seed(8)
    x0 = torch.randn(2, 12, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 12, 2, generator=gen, dtype=torch.float64)
    cond = torch.randn(2, 10, generator=gen, dtype=torch.float64)
    proxy = torch.randn(2, 12, 2, generator=gen, dtype=torch.float64)
    t = torch.tensor([5, 17])
    x_t = forward_sample(x0, t, eps, s)

    def loss_fn():
        return min_snr_loss(model(x_t, t, cond, proxy), eps, t, s)

    worst = check_param_gradients(model, loss_fn, probes_per_param=1, tol=1e-4)
    assert worst < 1e-4


# ---------------------------------------------------------------------- DDIM


def test_ddim_timestep_grids():
    assert ddim_timesteps(200, 1) == [200]
    full = ddim_timesteps(200, 200)
    assert full == list(range(200, 0, -1))
    fifty = ddim_timesteps(200, 50)
    assert fifty[0] == 200 and fifty[-1] == 1
    assert all(a > b for a, b in zip(fifty, fifty[1:]))
    with pytest.raises(ValueError):
        ddim_timesteps(200, 201)


@pytest.mark.parametrize("n_steps", [1, 50, 200])
def test_ddim_oracle_round_trip(n_steps):
    s = make_schedule(200)
    gen = torch.Generator().manual_seed(9)
    x0 = torch.randn(3, 12, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(3, 12, 2, generator=gen, dtype=torch.float64)
    x_T = forward_sample(x0, 200, eps, s)

    def oracle(x, t, cond, proxy):
        return eps

    recovered = ddim_sample(
        oracle, None, torch.zeros_like(x0), s, n_steps=n_steps, x_t=x_T
    )
    assert (recovered - x0).abs().max().item() < 1e-6


def test_ddim_single_step_algebra():
    s = make_schedule(200)
    gen = torch.Generator().manual_seed(10)
    x_T = torch.randn(1, 12, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 12, 2, generator=gen, dtype=torch.float64)
    out = ddim_sample(lambda x, t, c, p: eps, None, torch.zeros_like(x_T), s, n_steps=1, x_t=x_T)
    ab = s.alpha_bar[-1].item()
    expected = (x_T - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    torch.testing.assert_close(out, expected)


def test_ddim_seeded_determinism():
    model = make_denoiser()
    gen_inputs = torch.Generator().manual_seed(11)
    cond = torch.randn(2, 10, generator=gen_inputs)
    proxy = torch.randn(2, 12, 2, generator=gen_inputs)
    s = make_schedule(20)
    a = ddim_sample(model, cond, proxy, s, n_steps=5, generator=torch.Generator().manual_seed(3))
    b = ddim_sample(model, cond, proxy, s, n_steps=5, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    c = ddim_sample(model, cond, proxy, s, n_steps=5, generator=torch.Generator().manual_seed(4))
    assert not torch.equal(a, c)


def test_ddim_rejects_too_many_steps():
    s = make_schedule(20)
    with pytest.raises(ValueError):
        ddim_sample(lambda *a: None, None, torch.zeros(1, 12, 2), s, n_steps=21)


# -------------------------------------------------------------------- refine


def test_refine_identity_on_zero_residual():
    proxy = torch.randn(12, 2)
    assert torch.equal(refine(proxy, torch.zeros(12, 2)), proxy)


def test_refine_inverts_residual_definition():
    gen = torch.Generator().manual_seed(12)
    gt = torch.randn(12, 2, generator=gen)
    residual = torch.randn(12, 2, generator=gen)
    proxy = gt - residual
    torch.testing.assert_close(refine(proxy, residual), gt)


def test_refine_matches_elementwise_sum():
    gen = torch.Generator().manual_seed(13)
    proxy = torch.randn(12, 2, generator=gen, dtype=torch.float64)
    residual = torch.randn(12, 2, generator=gen, dtype=torch.float64)
    np.testing.assert_allclose(
        refine(proxy, residual).numpy(), proxy.numpy() + residual.numpy()
    )


def test_refine_length_mismatch():
    with pytest.raises(ValueError):
        refine(torch.zeros(12, 2), torch.zeros(11, 2))

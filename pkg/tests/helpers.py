"""Small policies and synthetic batches shared by several test modules."""

from __future__ import annotations

import numpy as np

from nodiff.ndmath import RngStream, finite_diff_grad, net_apply
from nodiff.policy import Batch, Draws, ModelConfig, NormStats, Policy
from nodiff.schedule import build_schedule, forward_noise

SMALL = dict(
    T_o=2, T_p=4, state_dim=3, action_dim=3, image_shape=(1, 4, 4, 1), feature_dim=8,
    encoder_hidden=6, denoiser_hidden=(10, 10), head_hidden=5, k_embed_dim=4,
)


def small_policy(setup="I", seed=0, K_m=20, **overrides) -> Policy:
    cfg = ModelConfig(**{**SMALL, **overrides})
    norm = NormStats.identity(cfg.action_dim, cfg.state_dim)
    return Policy.create(cfg, setup, build_schedule(K_m, 1e-3, 0.2), norm, RngStream.named(seed, "init"))


def small_problem(policy: Policy, seed=0, B=3):
    c = policy.config
    rng = RngStream.named(seed, "test-batch")
    obs = np.concatenate(
        [rng.normal(B * c.T_o * c.state_dim).reshape(B, c.T_o, c.state_dim),
         rng.uniform(B * c.T_o * c.image_size).reshape(B, c.T_o, c.image_size)], axis=2
    ).reshape(B, -1)
    M0 = np.tanh(rng.normal(B * c.motion_size)).reshape(B, c.T_p, c.action_dim)
    k = rng.integers(1, policy.schedule.K_m + 1, B)
    eps = rng.normal(B * c.motion_size).reshape(B, c.T_p, c.action_dim)
    # push the heads off their zero-ish init so sigma and mu are generic
    for g in ("eta", "xi"):
        if g in policy.group_slices:
            policy.params[policy.group_slices[g]] += 0.3 * rng.normal(policy.param_count(g))
    # zero biases put a ReLU exactly on its kink whenever a row's inputs to it vanish
    theta = policy.nets["theta"]
    for i in range(len(theta.activations)):
        theta.bias(i)[:] += 0.1 * rng.normal(theta.bias(i).size)
    return Batch(obs, M0), Draws(k, eps)


def relu_margin(policy: Policy, batch: Batch, draws: Draws) -> float:
    """Smallest |pre-activation| over the denoiser's ReLU units for this problem."""
    X, _ = net_apply(policy.nets["psi"], batch.obs)
    Xn = net_apply(policy.nets["psi_noam"], batch.obs)[0] if "psi_noam" in policy.nets else X
    if policy.spec.conditioning == "none":
        z = draws.eps
    else:
        dist = policy.noam_estimate(Xn)
        z = dist.mu + dist.sigma[..., None, :] * draws.eps
    Mk = forward_noise(policy.schedule, batch.M0, draws.k, z)
    _, cache = net_apply(policy.nets["theta"], policy._denoiser_input(Mk, X, draws.k))
    acts = policy.nets["theta"].activations
    return min(float(np.abs(p).min()) for p, a in zip(cache.pre, acts) if a == "relu")


def current_mu(policy: Policy, batch: Batch) -> np.ndarray:
    group = "psi_noam" if policy.spec.encoder == "separated" else "psi"
    return policy.noam_estimate(policy.encode_obs(batch.obs, group)).mu


def gradient_check(policy: Policy, batch: Batch, draws: Draws, h=1e-6):
    """Analytic gradient, finite-difference gradient (stop-gradient on mu in L_sigma reproduced)."""
    base = policy.params.copy()
    mu0 = current_mu(policy, batch)
    analytic = policy.loss_total(batch, draws, detached_mu=mu0).grad

    def f(p):
        policy.params[:] = p
        try:
            return policy.loss_total(batch, draws, need_grad=False, detached_mu=mu0).total
        finally:
            policy.params[:] = base

    return analytic, finite_diff_grad(f, base, h=h)

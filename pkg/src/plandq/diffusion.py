"""DDPM core: noise schedule, forward noising, simplified loss, and reverse
sampling with optional scalar-predictor guidance and cell inpainting.

Arrays are handled flattened; callers reshape planning arrays as needed.
Diffusion step indices m run from 1 to M.
"""

import numpy as np

from .nets import MlpNet


class DiffusionSchedule:
    """beta_m, alpha_m, cumulative alpha_bar_m and posterior variances."""

    def __init__(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a non-empty vector")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta entries must lie in (0, 1)")
        self.M = len(beta)
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.sigma2 = beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def _at(self, arr, m):
        m = np.asarray(m)
        if np.any(m < 1) or np.any(m > self.M):
            raise ValueError(f"step index out of [1, {self.M}]")
        return arr[m - 1]


def make_schedule(M, kind="linear"):
    if M < 1:
        raise ValueError("M must be >= 1")
    if kind == "linear":
        beta = np.linspace(1e-4, 2e-2, M)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(M + 1) / M
        f = np.cos((grid + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(beta)


def q_sample(x0, m, eps, schedule):
    """Closed-form forward noising x_m = sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps shape mismatch")
    ab = schedule._at(schedule.alpha_bar, m)
    if x0.ndim == 2 and np.ndim(m) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def embed_steps(m, dim=16):
    m = np.atleast_1d(m).astype(np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = m[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserNet:
    """MLP noise predictor over flattened arrays with step/state conditioning.

    Input layout: [x_flat, sinusoidal step embedding, cond]; output matches
    x_flat.
    """

    EMB_DIM = 16

    def __init__(self, x_dim, cond_dim, rng, hidden=128, depth=3):
        self.x_dim = x_dim
        self.cond_dim = cond_dim
        sizes = [x_dim + self.EMB_DIM + cond_dim] + [hidden] * depth + [x_dim]
        self.net = MlpNet(sizes, rng)

    def _pack(self, x, m, cond):
        x = np.atleast_2d(x)
        m = np.broadcast_to(np.atleast_1d(m), (x.shape[0],))
        parts = [x, embed_steps(m, self.EMB_DIM)]
        if self.cond_dim:
            parts.append(np.atleast_2d(cond))
        return np.concatenate(parts, axis=1)

    def predict(self, x, m, cond=None):
        """(eps_hat, cache); cache feeds backward()."""
        return self.net.forward(self._pack(x, m, cond))

    def backward(self, cache, gout):
        """(param grads, grad w.r.t. x) for sum(gout * eps_hat)."""
        grads, gin = self.net.backward(cache, gout)
        return grads, gin[:, :self.x_dim]


def denoise_loss(dnet, x0, cond, schedule, rng):
    """Simplified DDPM objective: mean squared noise-prediction error.

    Per-row random step m and Gaussian noise; returns (loss, param grads).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B, n = x0.shape
    m = rng.integers(1, schedule.M + 1, size=B)
    eps = rng.standard_normal((B, n))
    x_m = q_sample(x0, m, eps, schedule)
    pred, cache = dnet.predict(x_m, m, cond)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite denoise loss")
    grads, _ = dnet.backward(cache, 2.0 * diff / diff.size)
    return loss, grads


def posterior_mean(dnet, x_m, m, schedule, cond=None):
    """DDPM posterior mean mu_theta computed from the noise prediction."""
    eps_hat, _ = dnet.predict(x_m, m, cond)
    beta = schedule._at(schedule.beta, m)
    ab = schedule._at(schedule.alpha_bar, m)
    alpha = schedule._at(schedule.alpha, m)
    return (x_m - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)


def _apply_fixed(x, fixed):
    if fixed is not None:
        mask, values = fixed
        x = np.where(mask, values, x)
    return x


def p_sample_step(dnet, x_m, m, schedule, rng, cond=None, guidance=None,
                  omega=0.0, fixed=None, clip_denoised=True):
    """One reverse step x_m -> x_{m-1}.

    The implied clean signal is clipped to [-1, 1] before forming the
    posterior mean (schedules with near-1 terminal betas amplify denoiser
    error by 1/sqrt(alpha_m) otherwise).  With guidance, the mean is then
    shifted by omega * sigma_m^2 * grad J evaluated at the posterior mean;
    inpainted cells are overwritten afterwards.
    """
    x_m = np.atleast_2d(x_m)
    if clip_denoised:
        eps_hat, _ = dnet.predict(x_m, m, cond)
        ab = schedule._at(schedule.alpha_bar, m)
        ab_prev = schedule._at(schedule.alpha_bar_prev, m)
        beta = schedule._at(schedule.beta, m)
        alpha = schedule._at(schedule.alpha, m)
        x0_hat = np.clip((x_m - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab),
                         -1.0, 1.0)
        mu = (np.sqrt(ab_prev) * beta * x0_hat
              + np.sqrt(alpha) * (1.0 - ab_prev) * x_m) / (1.0 - ab)
    else:
        mu = posterior_mean(dnet, x_m, m, schedule, cond)
    if guidance is not None and omega != 0.0:
        sigma2 = schedule._at(schedule.sigma2, m)
        _, gx = guidance.value_and_input_grad(mu, m)
        mu = mu + omega * sigma2 * gx
    if m > 1:
        sigma = np.sqrt(schedule._at(schedule.sigma2, m))
        x_prev = mu + sigma * rng.standard_normal(mu.shape)
    else:
        x_prev = mu
    return _apply_fixed(x_prev, fixed)


def sample(dnet, shape, schedule, rng, cond=None, guidance=None, omega=0.0,
           fixed=None):
    """Full reverse chain from Gaussian noise; output clipped to [-1, 1]."""
    x = rng.standard_normal(shape if isinstance(shape, tuple) else (1, shape))
    x = _apply_fixed(x, fixed)
    for m in range(schedule.M, 0, -1):
        x = p_sample_step(dnet, x, m, schedule, rng, cond=cond,
                          guidance=guidance, omega=omega, fixed=fixed)
    return _apply_fixed(np.clip(x, -1.0, 1.0), fixed)

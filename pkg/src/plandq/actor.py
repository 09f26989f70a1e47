"""Conditioned diffusion actors and twin critics.

A DiffusionPolicy denoises an output vector (actions for the low level,
sub-goal states for the Q-Conductor) conditioned on a context vector.  It
supports a taped sampling mode so policy-improvement gradients can flow back
through the whole denoising chain into the denoiser parameters.
"""

import numpy as np

from .diffusion import DenoiserNet, denoise_loss, make_schedule
from .nets import MlpNet, accumulate, zero_grads_like


class DiffusionPolicy:
    """Few-step conditional DDPM over a flat output vector."""

    def __init__(self, out_dim, cond_dim, rng, M=5, hidden=128, depth=3,
                 schedule_kind="cosine"):
        self.out_dim = out_dim
        self.cond_dim = cond_dim
        self.dnet = DenoiserNet(out_dim, cond_dim, rng, hidden=hidden, depth=depth)
        self.schedule = make_schedule(M, schedule_kind)

    @property
    def params(self):
        return self.dnet.net.params

    def _coeffs(self, m):
        sch = self.schedule
        c1 = 1.0 / np.sqrt(sch.alpha[m - 1])
        c2 = sch.beta[m - 1] / np.sqrt(1.0 - sch.alpha_bar[m - 1])
        return c1, c2

    def sample(self, cond, rng):
        """Denoise from Gaussian noise; output clipped to [-1, 1]."""
        cond = np.atleast_2d(cond)
        x = rng.standard_normal((cond.shape[0], self.out_dim))
        for m in range(self.schedule.M, 0, -1):
            eps, _ = self.dnet.predict(x, m, cond)
            c1, c2 = self._coeffs(m)
            x = c1 * (x - c2 * eps)
            if m > 1:
                x = x + np.sqrt(self.schedule.sigma2[m - 1]) * rng.standard_normal(x.shape)
        return np.clip(x, -1.0, 1.0)

    def sample_taped(self, cond, rng):
        """Sample while recording per-step caches for chain backprop."""
        cond = np.atleast_2d(cond)
        x = rng.standard_normal((cond.shape[0], self.out_dim))
        tape = []
        for m in range(self.schedule.M, 0, -1):
            eps, cache = self.dnet.predict(x, m, cond)
            c1, c2 = self._coeffs(m)
            x = c1 * (x - c2 * eps)
            if m > 1:
                x = x + np.sqrt(self.schedule.sigma2[m - 1]) * rng.standard_normal(x.shape)
            tape.append((cache, c1, c2))
        clip_mask = (np.abs(x) <= 1.0).astype(np.float64)
        return np.clip(x, -1.0, 1.0), (tape, clip_mask)

    def chain_backward(self, tape_state, g_out):
        """Denoiser-parameter gradients of sum(g_out * sampled_output)."""
        tape, clip_mask = tape_state
        g = np.asarray(g_out) * clip_mask
        total = zero_grads_like(self.params)
        for cache, c1, c2 in reversed(tape):
            pgrads, gin = self.dnet.backward(cache, -c1 * c2 * g)
            accumulate(total, pgrads)
            g = c1 * g + gin
        return total

    def bc_loss(self, targets, cond, rng):
        """Noise-prediction regression toward dataset outputs."""
        return denoise_loss(self.dnet, targets, cond, self.schedule, rng)


class TwinCritic:
    """Two independent scalar critics with Polyak-averaged targets."""

    def __init__(self, in_dim, rng, hidden=128, depth=3, twin=True):
        n = 2 if twin else 1
        self.nets = [MlpNet([in_dim] + [hidden] * depth + [1], rng) for _ in range(n)]
        self.targets = [net.copy() for net in self.nets]

    def value_min(self, x):
        vals = [net(x)[:, 0] for net in self.nets]
        return np.min(np.stack(vals), axis=0)

    def target_min(self, x):
        vals = [net(x)[:, 0] for net in self.targets]
        return np.min(np.stack(vals), axis=0)

    def td_loss(self, x, y):
        """Mean squared TD error over all critics; y is treated as constant.

        Returns (loss, per-critic param-grad lists).
        """
        B = len(y)
        loss = 0.0
        grad_lists = []
        for net in self.nets:
            q, cache = net.forward(x)
            diff = q[:, 0] - y
            loss += float(np.mean(diff * diff))
            grads, _ = net.backward(cache, (2.0 * diff / B)[:, None])
            grad_lists.append(grads)
        return loss / len(self.nets), grad_lists

    def min_value_and_input_grad(self, x, scale):
        """(mean of min-critic values, d(mean*scale)/dx) for policy improvement."""
        outs = []
        caches = []
        for net in self.nets:
            q, cache = net.forward(x)
            outs.append(q[:, 0])
            caches.append(cache)
        vals = np.stack(outs)
        pick = np.argmin(vals, axis=0)
        gx = np.zeros_like(np.atleast_2d(x), dtype=np.float64)
        B = vals.shape[1]
        for i, net in enumerate(self.nets):
            sel = (pick == i).astype(np.float64) * scale / B
            if np.any(sel):
                _, gin = net.backward(caches[i], sel[:, None])
                gx += gin
        return float(np.mean(np.min(vals, axis=0))), gx

    def polyak(self, eta):
        for net, tgt in zip(self.nets, self.targets):
            for p_t, p_o in zip(tgt.params, net.params):
                p_t *= (1.0 - eta)
                p_t += eta * p_o

    @property
    def params(self):
        out = []
        for net in self.nets:
            out.extend(net.params)
        return out

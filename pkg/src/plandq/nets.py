"""Minimal feed-forward networks with manual reverse-mode gradients.

Everything downstream (denoisers, return predictors, critics, policies) is a
small Mish MLP trained with Adam, so this module is the only place gradients
are computed.  All arithmetic is float64.
"""

import json

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def mish(x):
    return x * np.tanh(softplus(x))


def mish_grad(x):
    sp = softplus(x)
    t = np.tanh(sp)
    sig = 1.0 / (1.0 + np.exp(-x))
    return t + x * sig * (1.0 - t * t)


def timestep_embedding(m, dim=16):
    """Sinusoidal embedding of an integer diffusion step, shape (dim,)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = m * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class MlpNet:
    """Fully-connected net: affine layers interleaved with Mish.

    The final layer is affine with no activation.  Inputs are batched row-wise:
    forward maps (B, d_in) -> (B, d_out).
    """

    def __init__(self, sizes, rng, activation="mish"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output size")
        if activation not in ("mish", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = list(sizes)
        self.activation = activation
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(1.0 / d_in)
            self.weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, params):
        n = len(self.weights)
        if len(params) != 2 * n:
            raise ValueError("parameter count mismatch")
        for i in range(n):
            if params[2 * i].shape != self.weights[i].shape:
                raise ValueError("weight shape mismatch")
            if params[2 * i + 1].shape != self.biases[i].shape:
                raise ValueError("bias shape mismatch")
            self.weights[i] = params[2 * i].astype(np.float64)
            self.biases[i] = params[2 * i + 1].astype(np.float64)

    def copy(self):
        clone = MlpNet.__new__(MlpNet)
        clone.sizes = list(self.sizes)
        clone.activation = self.activation
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def forward(self, x):
        """Run the net, returning (output, cache) with cache for backward."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        pre = []   # pre-activation z per hidden layer
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last and self.activation == "mish":
                pre.append(z)
                h = mish(z)
            else:
                pre.append(None)
                h = z
            acts.append(h)
        return h, (pre, acts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, gout):
        """Gradients of sum(gout * output) w.r.t. params and input.

        Returns (param_grads, input_grad); param_grads is ordered like
        ``self.params``.
        """
        pre, acts = cache
        g = np.atleast_2d(np.asarray(gout, dtype=np.float64))
        wgrads = [None] * len(self.weights)
        bgrads = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            if pre[i] is not None:
                g = g * mish_grad(pre[i])
            wgrads[i] = acts[i].T @ g
            bgrads[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        grads = []
        for wg, bg in zip(wgrads, bgrads):
            grads.extend([wg, bg])
        return grads, g


class Adam:
    """Standard Adam with bias correction over a list of parameter arrays."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient count mismatch")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)


def zero_grads_like(params):
    return [np.zeros_like(p) for p in params]


def accumulate(total, grads, scale=1.0):
    for t, g in zip(total, grads):
        t += scale * g


def grad_check(net, loss_fn, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(net)`` must return ``(scalar_loss, param_grads)``.  The error is
    reported per parameter tensor as ||a - n|| / max(||a|| + ||n||, 1e-12) and
    the max over tensors is returned.
    """
    _, analytic = loss_fn(net)
    worst = 0.0
    for p, a in zip(net.params, analytic):
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = loss_fn(net)
            p[idx] = orig - h
            lm, _ = loss_fn(net)
            p[idx] = orig
            num[idx] = (lp - lm) / (2.0 * h)
            it.iternext()
        denom = max(np.linalg.norm(a) + np.linalg.norm(num), 1e-12)
        worst = max(worst, np.linalg.norm(a - num) / denom)
    return worst


def save_arrays(path, meta, arrays):
    """Write named float64 arrays: one JSON header line + LE payload.

    ``arrays`` is a list of (name, ndarray); round-trip is bit-exact.
    """
    header = {
        "version": 1,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path):
    """Inverse of save_arrays: returns (meta, list of (name, ndarray))."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("version") != 1:
            raise ValueError("unsupported checkpoint version")
        out = []
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated checkpoint payload")
            out.append((spec["name"], np.frombuffer(buf, dtype="<f8").reshape(shape).copy()))
        if f.read(1):
            raise ValueError("trailing bytes in checkpoint")
    return header["meta"], out


def net_to_arrays(prefix, net):
    out = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}.w{i}", w))
        out.append((f"{prefix}.b{i}", b))
    return out


def net_from_arrays(prefix, sizes, named, activation="mish"):
    net = MlpNet(sizes, rng=np.random.default_rng(0), activation=activation)
    lookup = dict(named)
    params = []
    for i in range(len(net.weights)):
        params.extend([lookup[f"{prefix}.w{i}"], lookup[f"{prefix}.b{i}"]])
    net.set_params(params)
    return net

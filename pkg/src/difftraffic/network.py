"""Small numpy MLPs with exact reverse-mode gradients, a squashed Gaussian policy and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

POLICY_MAGIC = b"DTPOLv01"


@dataclass(frozen=True)
class PolicySpec:
    hidden: tuple = (64, 64)
    init_log_std: float = -1.0


class MLP:
    """tanh hidden layers, linear output. ``params`` is ``[W1, b1, W2, b2, ...]``.

    Inputs are standardized as ``(x - in_shift) / in_scale`` before the first layer. The
    standardizer is fixed, not trained.
    """

    def __init__(self, sizes, rng=None, out_scale=1.0):
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = []
        n_layers = len(self.sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = np.sqrt(1.0 / fan_in)
            if k == n_layers - 1:
                scale *= out_scale
            self.params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self.in_shift = np.zeros(self.sizes[0])
        self.in_scale = np.ones(self.sizes[0])

    def set_input_stats(self, shift, scale) -> None:
        self.in_shift[...] = shift
        self.in_scale[...] = scale

    def forward(self, x):
        x = (np.atleast_2d(x) - self.in_shift) / self.in_scale
        acts = [x]
        h = x
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            z = h @ self.params[2 * k] + self.params[2 * k + 1]
            h = np.tanh(z) if k < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, dout):
        """Gradients of ``sum(dout * out)`` with respect to every parameter."""
        grads = [None] * len(self.params)
        n_layers = len(self.sizes) - 1
        delta = np.atleast_2d(dout)
        for k in reversed(range(n_layers)):
            h_in = acts[k]
            grads[2 * k] = h_in.T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.params[2 * k].T) * (1.0 - acts[k] ** 2)
        return grads


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total


LOG_2PI = np.log(2.0 * np.pi)


class GaussianPolicy:
    """Gaussian over a scalar action whose mean is squashed into ``[low, high]``."""

    def __init__(self, obs_dim, low, high, spec: PolicySpec = PolicySpec(), rng=None):
        self.low = float(low)
        self.high = float(high)
        self.spec = spec
        self.net = MLP((obs_dim, *spec.hidden, 1), rng, out_scale=0.01)
        self.log_std = np.array([spec.init_log_std])

    @property
    def params(self):
        return self.net.params + [self.log_std]

    @property
    def state(self):
        """Everything the policy file stores: input standardizer, then ``params``."""
        return [self.net.in_shift, self.net.in_scale] + self.params

    def _squash(self, z):
        t = np.tanh(z)
        half = 0.5 * (self.high - self.low)
        return self.low + half * (t + 1.0), half * (1.0 - t**2)

    def mean(self, obs):
        z = self.net(obs)[:, 0]
        return self._squash(z)[0]

    def log_prob(self, obs, actions):
        mu = self.mean(obs)
        return self._log_prob(mu, np.asarray(actions, dtype=float))

    def _log_prob(self, mu, actions):
        ls = self.log_std[0]
        return -0.5 * ((actions - mu) / np.exp(ls)) ** 2 - ls - 0.5 * LOG_2PI

    def sample(self, obs, rng):
        mu = self.mean(obs)
        return mu + np.exp(self.log_std[0]) * rng.standard_normal(mu.shape)

    def grad_log_prob(self, obs, actions, weights):
        """Gradient of ``sum(weights * log_prob(obs, actions))`` and the log-probs."""
        z, acts = self.net.forward(obs)
        mu, dmu_dz = self._squash(z[:, 0])
        ls = self.log_std[0]
        var = np.exp(2.0 * ls)
        diff = actions - mu
        logp = -0.5 * diff**2 / var - ls - 0.5 * LOG_2PI
        dz = weights * diff / var * dmu_dz
        grads = self.net.backward(acts, dz[:, None])
        dls = np.sum(weights * (diff**2 / var - 1.0))
        return grads + [np.array([dls])], logp

    def to_bytes(self) -> bytes:
        sizes = self.net.sizes
        head = POLICY_MAGIC + struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
        body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.state)
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes, low, high) -> "GaussianPolicy":
        if data[: len(POLICY_MAGIC)] != POLICY_MAGIC:
            raise ValueError("not a policy file (bad magic)")
        off = len(POLICY_MAGIC)
        (n_sizes,) = struct.unpack_from("<I", data, off)
        off += 4
        sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
        off += 4 * n_sizes
        if n_sizes < 2 or sizes[-1] != 1:
            raise ValueError(f"bad policy layer sizes {sizes}")
        pol = cls(sizes[0], low, high, PolicySpec(hidden=tuple(sizes[1:-1])))
        expected = sum(p.size for p in pol.state)
        if len(data) - off != 8 * expected:
            raise ValueError(f"policy file size mismatch: expected {expected} float64 values")
        flat = np.frombuffer(data, dtype="<f8", offset=off).astype(float)
        if not np.all(np.isfinite(flat)) or np.any(flat[sizes[0] : 2 * sizes[0]] <= 0):
            raise ValueError("policy file holds non-finite values or a non-positive input scale")
        pos = 0
        for p in pol.state:
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        return pol


class ValueFunction:
    def __init__(self, obs_dim, spec: PolicySpec = PolicySpec(), rng=None):
        self.net = MLP((obs_dim, *spec.hidden, 1), rng, out_scale=1.0)

    @property
    def params(self):
        return self.net.params

    def __call__(self, obs):
        return self.net(obs)[:, 0]

    def grad_mse(self, obs, targets):
        """Gradient of ``0.5 * mean((V - targets)**2)`` and the loss."""
        out, acts = self.net.forward(obs)
        err = out[:, 0] - targets
        loss = 0.5 * float(np.mean(err**2))
        grads = self.net.backward(acts, (err / err.size)[:, None])
        return grads, loss

"""Hand-rolled dense networks: forward, exact backward, Adam, grad checks.

Everything is float64 numpy.  Layers hold (out, in) weight matrices; a
forward pass on a batch X (N, in) is tanh(X W^T + b) except on layers
flagged linear.  The backward pass returns exact analytic gradients and
is verified against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Stream


def tanh(x):
    return np.tanh(x)


def dtanh_from_out(y):
    # derivative of tanh expressed through its output
    return 1.0 - y * y


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def dsoftplus(x):
    return sigmoid(np.asarray(x, dtype=float))


@dataclass
class Dense:
    """One fully connected layer; activation is 'tanh' or 'linear'."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


class Mlp:
    """A stack of Dense layers with exact backprop.

    `dims` is [in, h1, ..., out]; all hidden layers use tanh, the final
    layer is linear unless `final_activation` says otherwise.
    """

    def __init__(self, dims, stream: Stream, final_activation="linear"):
        self.layers = []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            scale = 1.0 / np.sqrt(fan_in)
            W = stream.uniform((dims[i + 1], fan_in), low=-scale, high=scale)
            b = np.zeros(dims[i + 1])
            act = final_activation if i == len(dims) - 2 else "tanh"
            self.layers.append(Dense(W, b, act))

    @property
    def dims(self):
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def parameters(self):
        out = []
        for l in self.layers:
            out.extend([l.weight, l.bias])
        return out

    def forward(self, x, keep_trace=False):
        """Batch forward: x (N, in) -> (N, out); optionally keep activations."""
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        trace = [a]
        for l in self.layers:
            z = a @ l.weight.T + l.bias
            a = tanh(z) if l.activation == "tanh" else z
            trace.append(a)
        if keep_trace:
            return (a[0], trace) if single else (a, trace)
        return a[0] if single else a

    def backward(self, trace, upstream):
        """Exact gradients given the forward trace and dL/d(output).

        Returns (param_grads aligned with parameters(), input_grad).
        `upstream` is (N, out) or (out,) matching the traced batch.
        """
        g = np.asarray(upstream, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads = [None] * (2 * len(self.layers))
        for idx in range(len(self.layers) - 1, -1, -1):
            l = self.layers[idx]
            a_out = trace[idx + 1]
            a_in = trace[idx]
            if l.activation == "tanh":
                g = g * dtanh_from_out(a_out if a_out.ndim == 2 else a_out[None, :])
            grads[2 * idx] = g.T @ (a_in if a_in.ndim == 2 else a_in[None, :])
            grads[2 * idx + 1] = g.sum(axis=0)
            g = g @ l.weight
        return grads, g

    def clone(self):
        import copy
        dup = Mlp.__new__(Mlp)
        dup.layers = [Dense(l.weight.copy(), l.bias.copy(), l.activation)
                      for l in self.layers]
        return dup


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def grad_check(mlp: Mlp, n_samples=20, eps=1e-5, stream=None):
    """Max relative error between backprop and central differences.

    Each sample draws a random input and a random upstream direction u,
    compares u . (dout/dtheta) against (L(theta+eps d) - L(theta-eps d))
    / (2 eps) along random parameter directions d.
    """
    if not 1e-8 < eps < 1e-3:
        raise ValueError("eps must be in (1e-8, 1e-3)")
    stream = stream or Stream(0, "gradcheck")
    worst = 0.0
    params = mlp.parameters()
    for _ in range(n_samples):
        x = stream.normal(mlp.layers[0].in_dim)
        u = stream.normal(mlp.layers[-1].out_dim)
        _, trace = mlp.forward(x, keep_trace=True)
        grads, _ = mlp.backward(trace, u)

        direction = [stream.normal(p.shape) for p in params]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
        direction = [d / norm for d in direction]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, direction))

        for p, d in zip(params, direction):
            p += eps * d
        f_plus = float(np.dot(mlp.forward(x), u))
        for p, d in zip(params, direction):
            p -= 2 * eps * d
        f_minus = float(np.dot(mlp.forward(x), u))
        for p, d in zip(params, direction):
            p += eps * d

        numeric = (f_plus - f_minus) / (2 * eps)
        denom = max(abs(numeric), abs(analytic), 1e-12)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst

"""Minimal dense numeric kernel: two-layer nets, softmax, Adam, grad checking.

Everything is float64 numpy. Backward passes are hand-derived and verified
against central differences by ``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


def softmax(scores) -> np.ndarray:
    """Stable softmax of a non-empty 1-D score vector (max-shifted before exp)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("softmax expects a non-empty 1-D vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax input must be finite")
    z = np.exp(s - np.max(s))
    return z / np.sum(z)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], the package-wide init rule."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def prefix_params(prefix: str, params: dict) -> dict:
    return {prefix + name: arr for name, arr in params.items()}


class TwoLayerNet:
    """Feed-forward net  x -> act(x @ W1 + b1) @ W2 + b2.

    W1 is (in_dim, hidden_dim), W2 is (hidden_dim, out_dim). A single vector
    or a row-stacked batch goes through the same code path. ``params`` returns
    live array references so an optimizer can update the net in place.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 activation: str = "relu", rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.activation = activation
        self.W1 = uniform_init(rng, in_dim, (in_dim, hidden_dim))
        self.b1 = uniform_init(rng, in_dim, (hidden_dim,))
        self.W2 = uniform_init(rng, hidden_dim, (hidden_dim, out_dim))
        self.b2 = uniform_init(rng, hidden_dim, (out_dim,))

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.W1 = np.asarray(params["W1"], dtype=np.float64)
        self.b1 = np.asarray(params["b1"], dtype=np.float64)
        self.W2 = np.asarray(params["W2"], dtype=np.float64)
        self.b2 = np.asarray(params["b2"], dtype=np.float64)

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def _act_grad(self, z, h):
        if self.activation == "relu":
            return (z > 0.0).astype(np.float64)
        return 1.0 - h * h

    def forward(self, x) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x):
        """Forward pass keeping intermediates needed by ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input has dim {X.shape[1]}, net expects {self.in_dim}")
        Z1 = X @ self.W1 + self.b1
        H = self._act(Z1)
        Y = H @ self.W2 + self.b2
        cache = (X, Z1, H, single)
        return (Y[0] if single else Y), cache

    def backward(self, cache, dout):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (param_grads, dx) where dx matches the shape of the original input.
        """
        X, Z1, H, single = cache
        dY = np.atleast_2d(np.asarray(dout, dtype=np.float64))
        dW2 = H.T @ dY
        db2 = dY.sum(axis=0)
        dH = dY @ self.W2.T
        dZ1 = dH * self._act_grad(Z1, H)
        dW1 = X.T @ dZ1
        db1 = dZ1.sum(axis=0)
        dX = dZ1 @ self.W1.T
        grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}
        return grads, (dX[0] if single else dX)


def forward_two_layer(net: TwoLayerNet, x) -> np.ndarray:
    """Plain forward pass of a two-layer net (deterministic)."""
    return net.forward(x)


@dataclass
class AdamState:
    """Adam accumulators; moment shapes mirror the tracked parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``grads`` may cover a subset of the tracked parameters; untracked names or
    mismatched shapes are an error. Returns (params, state) for convenience.
    """
    unknown = set(grads) - set(state.m)
    if unknown:
        raise ValueError(f"gradients for untracked parameters: {sorted(unknown)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Convenience wrapper tying an AdamState to a live parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, **kw):
        self.params = params
        self.state = adam_init(params, lr, **kw)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


def grad_check(loss_fn, grad_fn, params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    Parameters are perturbed in place and restored, so ``loss_fn`` may close
    over the same arrays.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    analytic = grad_fn(params)
    worst = 0.0
    for name in sorted(analytic):
        p = params[name]
        g = np.asarray(analytic[name], dtype=np.float64)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            lp = float(loss_fn(params))
            p[idx] = orig - eps
            lm = float(loss_fn(params))
            p[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"non-finite loss while perturbing {name}{list(idx)}")
            numeric = (lp - lm) / (2.0 * eps)
            a = float(g[idx])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst

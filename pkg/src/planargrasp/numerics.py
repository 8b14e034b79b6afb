"""Dense neural-network core: MLP forward/backward, ELU, Adam, Gaussian heads.

Everything is float64 and deterministic. Parameters live in flat dicts of
numpy arrays so the optimizer and checkpoint code can treat every network
uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class DimensionError(ValueError):
    """Shape mismatch between parameters and data."""


class NonFiniteError(ValueError):
    """A gradient or input contained NaN/inf."""


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for (seed, stream_id); identical pairs give
    identical sequences."""
    return np.random.default_rng([np.uint64(seed), np.uint64(stream_id)])


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(x))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, np.exp(x))


def orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal-style init (QR of a Gaussian), scaled by gain."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # deterministic sign convention
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class Mlp:
    """Fully connected net with ELU hidden layers and a linear output layer.

    layer_sizes = (input, hidden..., output). Weights are stored row-major as
    (in, out) matrices; parameters are exposed as a dict w0/b0/w1/b1/...
    """

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None,
                 out_gain: float = 1.0):
        if len(layer_sizes) < 2:
            raise DimensionError("need at least input and output sizes")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.params: dict[str, np.ndarray] = {}
        rng = rng if rng is not None else rng_stream(0)
        n = len(self.layer_sizes) - 1
        for i in range(n):
            rows, cols = self.layer_sizes[i], self.layer_sizes[i + 1]
            gain = out_gain if i == n - 1 else np.sqrt(2.0)
            self.params[f"w{i}"] = orthogonal(rows, cols, gain, rng)
            self.params[f"b{i}"] = np.zeros(cols)

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def _check_input(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.layer_sizes[0]:
            raise DimensionError(
                f"input shape {batch.shape} incompatible with input size "
                f"{self.layer_sizes[0]}")
        return batch

    def forward(self, batch: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(batch)
        return out

    def forward_cached(self, batch: np.ndarray):
        """Forward pass keeping pre-activations and layer inputs for backward."""
        x = self._check_input(batch)
        inputs = []
        preacts = []
        for i in range(self.num_layers):
            inputs.append(x)
            z = x @ self.params[f"w{i}"] + self.params[f"b{i}"]
            preacts.append(z)
            x = z if i == self.num_layers - 1 else elu(z)
        return x, (inputs, preacts)

    def backward(self, cache, upstream: np.ndarray):
        """Gradients of sum(upstream * output) w.r.t. params and input.

        Returns (grads dict matching self.params, input gradient).
        """
        inputs, preacts = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (inputs[0].shape[0], self.layer_sizes[-1]):
            raise DimensionError(
                f"upstream shape {upstream.shape} does not match output")
        grads: dict[str, np.ndarray] = {}
        delta = upstream
        for i in range(self.num_layers - 1, -1, -1):
            if i != self.num_layers - 1:
                delta = delta * elu_grad(preacts[i])
            grads[f"w{i}"] = inputs[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ self.params[f"w{i}"].T
        return grads, delta


@dataclass
class AdamState:
    """Per-parameter first/second moments plus shared step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, max_grad_norm: float = 1.0) -> None:
    """In-place Adam update with bias correction and global-norm clipping."""
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name!r}")
    scale = 1.0
    if max_grad_norm > 0.0:
        norm = global_grad_norm(grads)
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        g = g * scale
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def gaussian_sample(mean: np.ndarray, log_std: np.ndarray,
                    rng: np.random.Generator,
                    deterministic: bool = False) -> np.ndarray:
    """Draw from a diagonal Gaussian; deterministic mode returns the mean."""
    mean = np.asarray(mean, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise NonFiniteError("non-finite Gaussian parameters")
    if deterministic:
        return mean.copy()
    z = rng.standard_normal(mean.shape)
    return mean + np.exp(log_std) * z


def gaussian_logprob(mean: np.ndarray, log_std: np.ndarray,
                     x: np.ndarray) -> np.ndarray:
    """Exact diagonal-Gaussian log density, summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z + LOG_2PI, axis=-1) - np.sum(log_std)


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of the diagonal Gaussian (independent of the mean)."""
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)

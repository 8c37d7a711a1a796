"""Fully connected lifting backend with SELU hidden activations.

The final layer is purely affine so the network can place observables
anywhere in output space. Backward pass is exact reverse-mode, batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def selu(x):
    x = np.asarray(x, dtype=float)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(x))


def selu_deriv(x):
    x = np.asarray(x, dtype=float)
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(x))


@dataclass
class MlpNetwork:
    shape: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = flat[pos : pos + b.size]
            pos += b.size


def mlp_init(shape, seed: int) -> MlpNetwork:
    """LeCun-normal weights (variance 1/fan_in), zero biases."""
    shape = [int(s) for s in shape]
    if len(shape) < 2 or any(s < 1 for s in shape):
        raise ValueError("shape must list >= 2 positive layer widths")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(shape[:-1], shape[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpNetwork(shape=shape, weights=weights, biases=biases)


def _forward_cached(net: MlpNetwork, x):
    a = np.asarray(x, dtype=float)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.shape[1] != net.shape[0]:
        raise ValueError(f"input width {a.shape[1]} != network input {net.shape[0]}")
    pre_acts = []
    acts = [a]
    last = len(net.weights) - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre_acts.append(z)
        a = z if li == last else selu(z)
        acts.append(a)
    return a, pre_acts, acts, squeeze


def mlp_forward(net: MlpNetwork, x) -> np.ndarray:
    """Evaluate the network; accepts one state (1-D) or a batch (2-D)."""
    out, _, _, squeeze = _forward_cached(net, x)
    return out[0] if squeeze else out


def mlp_backward(net: MlpNetwork, x, upstream_grad):
    """Exact gradients of sum(upstream * output) w.r.t. parameters and input.

    Returns (grads, input_grad) with grads flat in get_params order.
    """
    out, pre_acts, acts, squeeze = _forward_cached(net, x)
    u = np.asarray(upstream_grad, dtype=float)
    if squeeze:
        u = u[None, :]
    if u.shape != out.shape:
        raise ValueError(f"upstream shape {u.shape} != output shape {out.shape}")
    last = len(net.weights) - 1
    parts = [None] * len(net.weights)
    for li in range(last, -1, -1):
        dz = u if li == last else u * selu_deriv(pre_acts[li])
        parts[li] = [(dz.T @ acts[li]).ravel(), dz.sum(axis=0)]
        u = dz @ net.weights[li]
    flat = np.concatenate([seg for layer_parts in parts for seg in layer_parts])
    return flat, (u[0] if squeeze else u)


def mlp_to_dict(net: MlpNetwork) -> dict:
    return {
        "kind": "mlp",
        "shape": list(net.shape),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(doc: dict) -> MlpNetwork:
    if doc.get("kind") != "mlp":
        raise ValueError(f"not an mlp document: kind={doc.get('kind')!r}")
    return MlpNetwork(
        shape=[int(s) for s in doc["shape"]],
        weights=[np.asarray(w, dtype=float) for w in doc["weights"]],
        biases=[np.asarray(b, dtype=float) for b in doc["biases"]],
    )

"""Minimal neural substrate: fixed-shape MLPs with hand-rolled reverse-mode
gradients, Adam, and Polyak target averaging.  Everything is float64; the
networks are small enough that exact gradient checks are part of the test
suite.
"""

from __future__ import annotations

import numpy as np

RELU, TANH, LINEAR = "relu", "tanh", "linear"


class Mlp:
    """Feedforward net: ReLU hidden layers, tanh or linear head.

    Parameters live in ``weights``/``biases`` (lists of float64 arrays,
    W shaped (out, in)).  Single samples (d,) and batches (n, d) both work.
    """

    def __init__(self, dims, head=TANH, rng=None):
        if len(dims) < 2:
            raise ValueError("need at least input and output dimensions")
        if head not in (TANH, LINEAR):
            raise ValueError(f"unsupported head {head!r}")
        self.dims = list(dims)
        self.head = head
        self.weights = []
        self.biases = []
        rng = rng or np.random.default_rng(0)
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x):
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.dims[0]:
            raise ValueError(f"input dim {h.shape[1]} != {self.dims[0]}")
        inputs = [h]
        pre = []
        for li in range(self.n_layers):
            z = h @ self.weights[li].T + self.biases[li]
            pre.append(z)
            if li < self.n_layers - 1:
                h = np.maximum(z, 0.0)
            elif self.head == TANH:
                h = np.tanh(z)
            else:
                h = z
            inputs.append(h)
        y = inputs[-1]
        return (y[0] if squeeze else y), (inputs, pre, squeeze)

    def backward(self, cache, upstream):
        """Gradients of sum(upstream * output) wrt parameters and input.

        Returns (grads, gx): grads matches parameters() order, gx matches
        the input's shape.
        """
        inputs, pre, squeeze = cache
        g = np.asarray(upstream, dtype=float)
        if squeeze:
            g = g.reshape(1, -1)
        grads = [None] * (2 * self.n_layers)
        for li in reversed(range(self.n_layers)):
            z = pre[li]
            if li < self.n_layers - 1:
                dz = g * (z > 0.0)
            elif self.head == TANH:
                y = inputs[li + 1]
                dz = g * (1.0 - y * y)
            else:
                dz = g
            grads[2 * li] = dz.T @ inputs[li]
            grads[2 * li + 1] = dz.sum(axis=0)
            g = dz @ self.weights[li]
        return grads, (g[0] if squeeze else g)

    def copy(self):
        twin = Mlp.__new__(Mlp)
        twin.dims = list(self.dims)
        twin.head = self.head
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def set_parameters(self, params):
        for li in range(self.n_layers):
            self.weights[li][...] = params[2 * li]
            self.biases[li][...] = params[2 * li + 1]


class Adam:
    """Standard Adam with bias correction; state shaped like the params."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def polyak(target: Mlp, online: Mlp, tau: float):
    """target <- tau * online + (1 - tau) * target, in place."""
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - tau
        tb += tau * ob


def flatten_params(net: Mlp) -> np.ndarray:
    return np.concatenate([p.ravel() for p in net.parameters()])


def set_flat_params(net: Mlp, theta: np.ndarray):
    i = 0
    for p in net.parameters():
        p[...] = theta[i:i + p.size].reshape(p.shape)
        i += p.size
    if i != theta.size:
        raise ValueError("parameter vector size mismatch")


def save_checkpoint(path, nets: dict[str, Mlp], extra: dict | None = None):
    """Versioned .npz checkpoint; float64 arrays round-trip bit-exactly."""
    payload = {"__version__": np.array([1])}
    for name, net in nets.items():
        payload[f"{name}/dims"] = np.array(net.dims)
        payload[f"{name}/head"] = np.array(net.head)
        for li in range(net.n_layers):
            payload[f"{name}/w{li}"] = net.weights[li]
            payload[f"{name}/b{li}"] = net.biases[li]
    for key, arr in (extra or {}).items():
        payload[f"extra/{key}"] = np.asarray(arr)
    np.savez(path, **payload)


def load_checkpoint(path):
    data = np.load(path, allow_pickle=False)
    names = {key.split("/")[0] for key in data.files if "/" in key and not key.startswith("extra/")}
    nets = {}
    for name in names:
        dims = data[f"{name}/dims"].tolist()
        head = str(data[f"{name}/head"])
        net = Mlp(dims, head=head)
        for li in range(net.n_layers):
            net.weights[li] = data[f"{name}/w{li}"].copy()
            net.biases[li] = data[f"{name}/b{li}"].copy()
        nets[name] = net
    extra = {key[len("extra/"):]: data[key].copy()
             for key in data.files if key.startswith("extra/")}
    return nets, extra

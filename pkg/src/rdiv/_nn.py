"""Fully connected network on a flat parameter vector with manual backprop."""
import numpy as np

ACTIVATIONS = ("tanh", "relu")


class DenseNet:
    """Layer sizes ``(n_in, h_1, ..., h_L, n_out)``; tanh or relu hidden units, linear output.

    With no hidden layers the network is a single affine map.
    """

    def __init__(self, sizes, activation="tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        self.size = sum(a * b + b for a, b in self.shapes)

    def unpack(self, params):
        layers, pos = [], 0
        for a, b in self.shapes:
            W = params[pos:pos + a * b].reshape(a, b)
            pos += a * b
            c = params[pos:pos + b]
            pos += b
            layers.append((W, c))
        return layers

    def init(self, rng, out_scale=1.0):
        params = np.zeros(self.size)
        layers = self.unpack(params)
        for i, (W, _) in enumerate(layers):
            a, b = W.shape
            scale = np.sqrt((2.0 if self.activation == "relu" else 1.0) / a)
            if i == len(layers) - 1:
                scale *= out_scale
            W[...] = rng.standard_normal((a, b)) * scale
        return params

    def output_layer(self, params):
        return self.unpack(params)[-1]

    def forward(self, params, x):
        acts = [x]
        layers = self.unpack(params)
        h = x
        for i, (W, c) in enumerate(layers):
            h = h @ W + c
            if i < len(layers) - 1:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, params, acts, dout):
        """Gradient of ``sum(dout * output)`` with respect to the flat parameters."""
        layers = self.unpack(params)
        grads = []
        delta = dout
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            inp = acts[i]
            grads.append((inp.T @ delta, delta.sum(axis=0)))
            if i > 0:
                slope = 1.0 - acts[i] ** 2 if self.activation == "tanh" else (acts[i] > 0)
                delta = (delta @ W.T) * slope
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gc]) for gW, gc in grads])

    def param_jacobian(self, params, x):
        """Per-sample gradient of a scalar-output network, shape ``(n, size)``."""
        out, acts = self.forward(params, x)
        rows = [self.backward(params, [a[i:i + 1] for a in acts], np.ones((1, 1)))
                for i in range(x.shape[0])]
        return np.array(rows)

"""Dense feed-forward network with manual backprop and an Adam optimizer."""
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LMQNET01"


class DenseNet:
    """Fully-connected net: leaky-rectifier hidden layers, linear output.

    Parameters are float64 ``(W, b)`` pairs with ``W`` shaped ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes, alpha=0.01, rng=None, params=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.alpha = float(alpha)
        if params is not None:
            self.params = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in params]
            self._check()
            return
        rng = np.random.default_rng(rng)
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            # He-style scale for leaky rectifiers
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params.append((W, np.zeros(fan_out)))

    def _check(self):
        for (W, b), fan_in, fan_out in zip(self.params, self.sizes[:-1], self.sizes[1:]):
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError("parameter shapes do not match layer sizes")

    def copy(self):
        return DenseNet(self.sizes, self.alpha, params=self.params)

    def load_from(self, other):
        for (W, b), (W2, b2) in zip(self.params, other.params):
            W[...] = W2
            b[...] = b2

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in self.params)

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {h.shape[1]}")
        cache = [h]
        last = len(self.params) - 1
        for layer, (W, b) in enumerate(self.params):
            z = h @ W + b
            if layer < last:
                h = np.where(z > 0, z, self.alpha * z)
                cache.append(z)
                cache.append(h)
            else:
                h = z
        if keep:
            return h, cache
        return h[0] if single else h

    __call__ = forward

    def backward(self, x, target, action, weight):
        """Gradients of ``mean(weight * (Q(x)[action] - target)**2)``.

        Returns ``(grads, td)`` where ``td = target - Q(x)[action]``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        target = np.asarray(target, dtype=np.float64).reshape(-1)
        action = np.asarray(action, dtype=np.int64).reshape(-1)
        weight = np.asarray(weight, dtype=np.float64).reshape(-1)
        n = x.shape[0]
        q, cache = self.forward(x, keep=True)
        rows = np.arange(n)
        td = target - q[rows, action]
        dq = np.zeros_like(q)
        dq[rows, action] = -2.0 * weight * td / n
        grads = [None] * len(self.params)
        g = dq
        for layer in range(len(self.params) - 1, -1, -1):
            W, _ = self.params[layer]
            h_in = cache[2 * layer]
            grads[layer] = (h_in.T @ g, g.sum(axis=0))
            if layer > 0:
                z = cache[2 * layer - 1]
                g = (g @ W.T) * np.where(z > 0, 1.0, self.alpha)
        return grads, td

    def loss(self, x, target, action, weight):
        q = self.forward(np.atleast_2d(x))
        action = np.asarray(action).reshape(-1)
        err = q[np.arange(len(action)), action] - np.asarray(target, dtype=np.float64).reshape(-1)
        return float(np.mean(np.asarray(weight, dtype=np.float64).reshape(-1) * err ** 2))

    # ------------------------------------------------------------------ checkpoints

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(dump_params(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return parse_params(fh.read())[0]


def dump_params(net: DenseNet, extra: bytes = b"") -> bytes:
    """Flat layout: magic, u32 layer count, u32 sizes, f64 alpha, f64 params (W row-major, b), extra."""
    head = MAGIC + struct.pack("<I", len(net.sizes)) + struct.pack(f"<{len(net.sizes)}I", *net.sizes)
    head += struct.pack("<d", net.alpha)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for W, b in net.params for a in (W, b))
    return head + body + extra


def parse_params(blob: bytes):
    """Inverse of :func:`dump_params`; returns ``(net, trailing_bytes)``."""
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError("not a network checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    sizes = struct.unpack_from(f"<{n}I", blob, off)
    off += 4 * n
    (alpha,) = struct.unpack_from("<d", blob, off)
    off += 8
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * W.size
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += 8 * b.size
        params.append((W, b))
    return DenseNet(sizes, alpha, params=params), blob[off:]


@dataclass
class OptimizerState:
    """Adam moments for one network."""
    lr: float = 0.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, **kw):
        st = cls(**kw)
        st.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
        st.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
        return st


def step(net: DenseNet, grads, opt: OptimizerState) -> DenseNet:
    """One in-place Adam update; returns ``net``."""
    if not opt.m:
        opt.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
        opt.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    for params, g_pair, m_pair, v_pair in zip(net.params, grads, opt.m, opt.v):
        for p, g, m, v in zip(params, g_pair, m_pair, v_pair):
            if p.shape != g.shape:
                raise ValueError("gradient shape mismatch")
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * g * g
            p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return net


def _loss_ext(params, alpha, x, target, action, weight):
    # extended precision so the difference quotient is not swamped by rounding
    h = x
    last = len(params) - 1
    for layer, (W, b) in enumerate(params):
        z = h @ W + b
        h = np.where(z > 0, z, alpha * z) if layer < last else z
    err = h[np.arange(len(action)), action] - target
    return np.mean(weight * err * err)


def grad_check(net: DenseNet, batch, epsilon=1e-5):
    """Max relative gap between backprop and central finite differences.

    ``batch`` is ``(x, target, action, weight)``. The finite differences are
    taken in ``np.longdouble``: at float64 a loss near 10 leaves about 1e-10 of
    rounding noise in each quotient, which is larger than 1e-5 of a small
    gradient entry. Entries where both gradients are below ``1e-10`` in
    magnitude are treated as agreeing.
    """
    x, target, action, weight = batch
    analytic, _ = net.backward(x, target, action, weight)
    ext = np.longdouble
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).astype(ext)
    target = np.asarray(target, dtype=np.float64).reshape(-1).astype(ext)
    action = np.asarray(action, dtype=np.int64).reshape(-1)
    weight = np.asarray(weight, dtype=np.float64).reshape(-1).astype(ext)
    params = [(W.astype(ext), b.astype(ext)) for W, b in net.params]
    alpha = ext(net.alpha)
    worst = 0.0
    for (W, b), (gW, gb) in zip(params, analytic):
        for p, g in ((W, gW), (b, gb)):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + epsilon
                up = _loss_ext(params, alpha, x, target, action, weight)
                flat[i] = keep - epsilon
                down = _loss_ext(params, alpha, x, target, action, weight)
                flat[i] = keep
                num = float((up - down) / (2 * ext(epsilon)))
                scale = max(abs(num), abs(gflat[i]))
                if scale < 1e-10:
                    continue
                worst = max(worst, abs(num - gflat[i]) / scale)
    return worst

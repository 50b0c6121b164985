"""Noise predictors with hand-written reverse-mode gradients.

Every predictor keeps its parameters in one flat vector ``theta``; layer
weights are views into it, so optimizers and checkpoints only ever see the
flat array. Convolutions run in NHWC layout as nine shifted matmuls.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import DTYPE


class NoisePredictor:
    """Base class: ``forward(x, t) -> (out, cache)`` and ``backward(cache, g) -> dtheta``.

    ``x`` is ``(B, C, H, W)``, ``t`` an int array of shape ``(B,)`` with
    values in ``1..T``. ``backward`` returns the gradient w.r.t. ``theta``
    given the upstream gradient w.r.t. the output.
    """

    theta: np.ndarray

    def __call__(self, x, t):
        return self.forward(x, t)[0]

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def dtype(self):
        return self.theta.dtype

    def config(self) -> dict:
        raise NotImplementedError

    def copy(self, dtype=None) -> "NoisePredictor":
        new = build_predictor(self.config(), dtype=dtype or self.dtype)
        new.theta[...] = self.theta
        return new

    def _prep(self, x, t):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            raise ValueError("forward expects a batch (B, C, H, W)")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
        return x, t


# --------------------------------------------------------------------------
# conv primitives (NHWC, 3x3, stride 1, zero padding 1)

def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def conv3x3(x, w, b=None):
    """``x``: (B, H, W, Cin), ``w``: (3, 3, Cin, Cout) -> (B, H, W, Cout)."""
    B, H, W, _ = x.shape
    xp = _pad(x)
    out = np.zeros((B, H, W, w.shape[-1]), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + H, j:j + W, :] @ w[i, j]
    if b is not None:
        out += b
    return out


def conv3x3_backward(x, w, dout, need_dx=True):
    """Gradients of :func:`conv3x3` w.r.t. weight, bias and (optionally) input."""
    B, H, W, cin = x.shape
    cout = w.shape[-1]
    xp = _pad(x)
    g2 = dout.reshape(-1, cout)
    dw = np.empty_like(w)
    for i in range(3):
        for j in range(3):
            dw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, cin).T @ g2
    db = g2.sum(axis=0)
    dx = None
    if need_dx:
        # correlation with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = conv3x3(dout, wf)
    return dw, db, dx


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_backward(x, s, g):
    return g * (s * (1.0 + x * (1.0 - s)))


# --------------------------------------------------------------------------

class TimeEmbedding:
    """Fixed sinusoidal features of ``t / T``.

    Angular frequencies are geometric from ``pi`` upward, so the lowest pair
    ``(sin, cos)`` of ``pi * t / T`` is already injective on ``1..T``.
    """

    def __init__(self, dim: int, T: int):
        if dim < 2 or dim % 2:
            raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
        self.dim, self.T = dim, T
        half = dim // 2
        self.freqs = math.pi * float(T) ** (np.arange(half) / half)

    def __call__(self, t) -> np.ndarray:
        ang = (np.asarray(t, dtype=np.float64) / self.T)[:, None] * self.freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class NetConfig:
    channels: int = 1
    height: int = 28
    width: int = 28
    hidden: int = 32
    depth: int = 4
    emb_dim: int = 32
    T: int = 200
    kind: str = "reference"

    def validate(self):
        for name in ("channels", "height", "width", "hidden", "emb_dim", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")


def reference_param_count(cfg: NetConfig) -> int:
    c, w, d = cfg.channels, cfg.hidden, cfg.depth
    convs = [(c, w)] + [(w, w)] * (d - 2) + [(w, c)]
    n = sum(9 * a * b + b for a, b in convs)
    return n + cfg.emb_dim * w + w + 1


class ReferenceNet(NoisePredictor):
    """Small convolutional noise predictor.

    ``depth`` 3x3 convolutions with SiLU between them, the projected time
    embedding added after the first layer, and a learned scalar skip from
    the input to the output (initialised at zero).
    """

    def __init__(self, cfg: NetConfig, dtype=DTYPE, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        c, w, d = cfg.channels, cfg.hidden, cfg.depth
        self._convs = [(c, w)] + [(w, w)] * (d - 2) + [(w, c)]
        shapes = []
        for k, (a, b) in enumerate(self._convs):
            shapes += [(f"conv{k}.w", (3, 3, a, b)), (f"conv{k}.b", (b,))]
        shapes += [("emb.w", (cfg.emb_dim, w)), ("emb.b", (w,)), ("skip", (1,))]
        self._shapes = shapes
        total = sum(int(np.prod(s)) for _, s in shapes)
        self.theta = np.zeros(total, dtype=dtype)
        self.params = self._views(self.theta)
        self.embed = TimeEmbedding(cfg.emb_dim, cfg.T)
        if rng is not None:
            self.init_params(rng)

    def _views(self, flat):
        out, off = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = flat[off:off + n].reshape(shape)
            off += n
        return out

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform(-k, k) with ``k = sqrt(1/fan_in)``; last conv at one tenth scale."""
        last = len(self._convs) - 1
        for k, (a, _) in enumerate(self._convs):
            bound = math.sqrt(1.0 / (9 * a))
            if k == last:
                bound *= 0.1
            for suffix in ("w", "b"):
                p = self.params[f"conv{k}.{suffix}"]
                p[...] = rng.uniform(-bound, bound, p.shape)
        bound = math.sqrt(1.0 / self.cfg.emb_dim)
        for suffix in ("w", "b"):
            p = self.params[f"emb.{suffix}"]
            p[...] = rng.uniform(-bound, bound, p.shape)
        self.params["skip"][...] = 0.0

    def config(self) -> dict:
        return asdict(self.cfg)

    def forward(self, x, t):
        x, t = self._prep(x, t)
        p = self.params
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        x_nhwc = h
        emb = self.embed(t).astype(self.dtype)
        acts = []
        last = len(self._convs) - 1
        for k in range(len(self._convs)):
            z = conv3x3(h, p[f"conv{k}.w"], p[f"conv{k}.b"])
            if k == last:
                acts.append((h, None, None))
                h = z
                break
            if k == 0:
                z += (emb @ p["emb.w"] + p["emb.b"])[:, None, None, :]
            a, s = silu(z)
            acts.append((h, z, s))
            h = a
        out = h + p["skip"][0] * x_nhwc
        cache = (x_nhwc, emb, acts)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache

    def backward(self, cache, grad_out):
        x_nhwc, emb, acts = cache
        g = np.ascontiguousarray(np.asarray(grad_out, dtype=self.dtype).transpose(0, 2, 3, 1))
        grad = np.zeros_like(self.theta)
        gp = self._views(grad)
        p = self.params
        gp["skip"][0] = np.sum(g * x_nhwc)
        for k in range(len(self._convs) - 1, -1, -1):
            h_in, z, s = acts[k]
            if z is not None:
                g = silu_backward(z, s, g)
                if k == 0:
                    ge = g.sum(axis=(1, 2))
                    gp["emb.w"][...] = emb.T @ ge
                    gp["emb.b"][...] = ge.sum(axis=0)
            dw, db, dx = conv3x3_backward(h_in, p[f"conv{k}.w"], g, need_dx=k > 0)
            gp[f"conv{k}.w"][...] = dw
            gp[f"conv{k}.b"][...] = db
            g = dx
        return grad


class LinearPredictor(NoisePredictor):
    """A single 3x3 convolution plus bias: linear in its parameters.

    Used as a baseline and for exact closed-form gradient checks.
    """

    def __init__(self, cfg: NetConfig, dtype=DTYPE, rng: np.random.Generator | None = None):
        self.cfg = cfg
        c = cfg.channels
        self.theta = np.zeros(9 * c * c + c, dtype=dtype)
        self.w = self.theta[:9 * c * c].reshape(3, 3, c, c)
        self.b = self.theta[9 * c * c:]
        if rng is not None:
            self.theta[...] = rng.uniform(-1 / 3, 1 / 3, self.theta.shape)

    def config(self) -> dict:
        return {**asdict(self.cfg), "kind": "linear"}

    def forward(self, x, t):
        x, t = self._prep(x, t)
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        out = conv3x3(h, self.w, self.b)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), h

    def backward(self, cache, grad_out):
        g = np.ascontiguousarray(np.asarray(grad_out, dtype=self.dtype).transpose(0, 2, 3, 1))
        dw, db, _ = conv3x3_backward(cache, self.w, g, need_dx=False)
        return np.concatenate([dw.ravel(), db])


def build_predictor(config: dict | NetConfig, dtype=DTYPE, rng=None) -> NoisePredictor:
    cfg = config if isinstance(config, NetConfig) else NetConfig(**config)
    if cfg.kind == "linear":
        return LinearPredictor(cfg, dtype=dtype, rng=rng)
    if cfg.kind == "reference":
        return ReferenceNet(cfg, dtype=dtype, rng=rng)
    raise ValueError(f"unknown predictor kind {cfg.kind!r}")


def reference_net(config: dict | NetConfig | None = None, seed: int = 0, dtype=DTYPE) -> ReferenceNet:
    """Build and initialise a :class:`ReferenceNet` from a config mapping."""
    from .core import rng_stream

    cfg = config if isinstance(config, NetConfig) else NetConfig(**(config or {}))
    cfg.kind = "reference"
    return ReferenceNet(cfg, dtype=dtype, rng=rng_stream(seed, "init"))


def grad_check(model: NoisePredictor, batch, loss_spec, n_check: int = 128, h: float = 1e-5,
               rng: np.random.Generator | None = None, atol: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference dLoss/dtheta.

    The check runs on a float64 copy of ``model``. ``batch`` is a batched
    :class:`~rddpm.diffusion.NoisySample`. For LTS the kept set is fixed at
    the unperturbed parameters. Relative error is
    ``|a - n| / max(|a|, |n|, atol)`` over ``n_check`` random parameters
    (all of them if there are fewer).
    """
    from .losses import loss_and_grad, residuals_from_prediction

    m = model.copy(dtype=np.float64)
    x = np.asarray(batch.x_t, np.float64)
    eps = np.asarray(batch.eps, np.float64)
    t = batch.t
    pred, cache = m.forward(x, t)
    res = residuals_from_prediction(eps, pred)
    _, g_pred, kept = loss_and_grad(res, loss_spec)
    analytic = m.backward(cache, g_pred)

    def loss_at():
        r = residuals_from_prediction(eps, m(x, t))
        return loss_and_grad(r, loss_spec, selected=kept if loss_spec.kind == "lts" else None)[0]

    rng = rng if rng is not None else np.random.default_rng(0)
    n = m.n_params
    idx = np.arange(n) if n <= n_check else rng.choice(n, size=n_check, replace=False)
    worst = 0.0
    for i in idx:
        orig = m.theta[i]
        m.theta[i] = orig + h
        lp = loss_at()
        m.theta[i] = orig - h
        lm = loss_at()
        m.theta[i] = orig
        num = (lp - lm) / (2 * h)
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), atol))
    return float(worst)

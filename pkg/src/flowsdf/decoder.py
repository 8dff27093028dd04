"""Auto-decoder SDF network: (latent code, point) -> signed distance.

Eight affine layers, softplus hidden activations, identity output and a
skip connection re-injecting the input at layer 4. Everything is plain
numpy with hand-written backpropagation so that Gauss-Newton gets exact
Jacobians.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_codes, check_points
from .corpus import sample_sdf_training_pairs

logger = logging.getLogger(__name__)

LATENT_DIM = 16
N_LAYERS = 8
SKIP_LAYER = 4


@dataclass
class DecoderWeights:
    """Layer ``l`` maps ``inp @ W[l] + b[l]``; ``W[l]`` has shape (in, out)."""

    W: list
    b: list
    latent_dim: int = LATENT_DIM
    beta: float = 100.0
    skip_layer: int = SKIP_LAYER

    def __post_init__(self):
        self.W = [np.asarray(w, dtype=np.float64) for w in self.W]
        self.b = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.b]
        self.validate()

    @property
    def in_dim(self):
        return self.latent_dim + 3

    @property
    def hidden(self):
        return self.W[0].shape[1]

    def validate(self):
        if len(self.W) != N_LAYERS or len(self.b) != N_LAYERS:
            raise ValueError(f"decoder needs {N_LAYERS} layers")
        H, d = self.hidden, self.in_dim
        for l, (w, b) in enumerate(zip(self.W, self.b)):
            want_in = d if l == 0 else (H + d if l == self.skip_layer else H)
            want_out = 1 if l == N_LAYERS - 1 else H
            if w.shape != (want_in, want_out) or b.shape != (want_out,):
                raise ValueError(f"layer {l}: got W{w.shape} b{b.shape}, want ({want_in}, {want_out})")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")

    def copy(self):
        return DecoderWeights([w.copy() for w in self.W], [b.copy() for b in self.b], self.latent_dim, self.beta, self.skip_layer)

    def zeros_like(self):
        return DecoderWeights([np.zeros_like(w) for w in self.W], [np.zeros_like(b) for b in self.b], self.latent_dim, self.beta, self.skip_layer)

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.W, self.b) for a in pair])

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.W, self.b))


def init_decoder(hidden=128, latent_dim=LATENT_DIM, seed=0, beta=100.0, radius=0.5):
    """Geometric initialization: the untrained field approximates a sphere of ``radius`` for every code."""
    rng = np.random.default_rng(seed)
    d = latent_dim + 3
    W, b = [], []
    for l in range(N_LAYERS):
        fan_in = d if l == 0 else (hidden + d if l == SKIP_LAYER else hidden)
        if l == N_LAYERS - 1:
            W.append(rng.normal(np.sqrt(np.pi) / np.sqrt(hidden), 1e-4, size=(hidden, 1)))
            b.append(np.array([-radius]))
            continue
        w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(hidden), size=(fan_in, hidden))
        if l == 0:
            w[:latent_dim] *= 1e-2
        if l == SKIP_LAYER:
            w[hidden : hidden + latent_dim] *= 1e-2
        W.append(w)
        b.append(np.zeros(hidden))
    return DecoderWeights(W, b, latent_dim, beta)


def _matmul(X, W):
    # route single rows through gemm so batched and single evaluations agree bitwise
    if X.shape[0] == 1:
        return (np.concatenate([X, X], axis=0) @ W)[:1]
    return X @ W


def _softplus(h, beta, with_slope=True):
    bh = beta * h
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(bh))
        a = np.maximum(h, 0.0) + np.log1p(e) / beta
        sig = 1.0 / (1.0 + np.exp(-bh)) if with_slope else None
    return a, sig


def _inputs(theta, z, p):
    p = check_points(p)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = np.broadcast_to(check_codes(z, theta.latent_dim)[0], (p.shape[0], theta.latent_dim))
    else:
        z = check_codes(z, theta.latent_dim)
        if z.shape[0] != p.shape[0]:
            raise ValueError("per-point codes must match the number of points")
    return np.concatenate([z, p], axis=1)


def forward_raw(theta, X, keep=False):
    """Forward pass on stacked inputs ``X`` (n, latent+3); optionally keep the backprop cache."""
    cache = []
    a = X
    for l in range(N_LAYERS - 1):
        inp = np.concatenate([a, X], axis=1) if l == theta.skip_layer else a
        h = _matmul(inp, theta.W[l]) + theta.b[l]
        a, sig = _softplus(h, theta.beta, keep)
        if keep:
            cache.append((inp, sig))
    s = (a * theta.W[-1][:, 0]).sum(axis=1) + theta.b[-1][0]
    if keep:
        cache.append((a, None))
    return s, cache


def backward_raw(theta, cache, g, want_params=False):
    """Backpropagate per-point upstream weights ``g`` (n,).

    Returns d(sum g*s)/dX of shape (n, latent+3) and, if requested, the
    parameter gradients as a :class:`DecoderWeights`.
    """
    H = theta.hidden
    a_last = cache[-1][0]
    grads = theta.zeros_like() if want_params else None
    if want_params:
        grads.W[-1][:, 0] = a_last.T @ g
        grads.b[-1][0] = g.sum()
    delta = g[:, None] * theta.W[-1][:, 0][None, :]
    dX = None
    for l in range(N_LAYERS - 2, -1, -1):
        inp, sig = cache[l]
        dh = delta * sig
        if want_params:
            grads.W[l] = inp.T @ dh
            grads.b[l] = dh.sum(axis=0)
        dinp = dh @ theta.W[l].T
        if l == theta.skip_layer:
            delta = dinp[:, :H]
            dX = dinp[:, H:] if dX is None else dX + dinp[:, H:]
        elif l == 0:
            dX = dinp if dX is None else dX + dinp
        else:
            delta = dinp
    return dX, grads


def decoder_forward(theta, z, p):
    """Signed distances at points ``p`` (n, 3) for code ``z`` (shared or per-point)."""
    return forward_raw(theta, _inputs(theta, z, p))[0]


def decoder_jacobian(theta, z, p):
    """Per-point gradients (ds/dz of shape (n, latent), ds/dp of shape (n, 3))."""
    X = _inputs(theta, z, p)
    _, cache = forward_raw(theta, X, keep=True)
    dX, _ = backward_raw(theta, cache, np.ones(X.shape[0]))
    return dX[:, : theta.latent_dim], dX[:, theta.latent_dim :]


def decoder_value_and_jacobian(theta, z, p):
    X = _inputs(theta, z, p)
    s, cache = forward_raw(theta, X, keep=True)
    dX, _ = backward_raw(theta, cache, np.ones(X.shape[0]))
    return s, dX[:, : theta.latent_dim], dX[:, theta.latent_dim :]


def decoder_param_grads(theta, z, p, upstream):
    """Gradient of ``sum_i upstream_i * s_i`` with respect to every weight and bias."""
    X = _inputs(theta, z, p)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (X.shape[0],)).astype(np.float64)
    _, cache = forward_raw(theta, X, keep=True)
    _, grads = backward_raw(theta, cache, upstream, want_params=True)
    return grads


# -- training ---------------------------------------------------------------


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, rows=None):
        """Apply one update. ``rows`` restricts a 2-D parameter update to those rows (sparse codes)."""
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if rows is not None:
                m[rows] = self.beta1 * m[rows] + (1 - self.beta1) * g[rows]
                v[rows] = self.beta2 * v[rows] + (1 - self.beta2) * g[rows] ** 2
                p[rows] -= self.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
            else:
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class DecoderTrainConfig:
    hidden: int = 128
    beta: float = 100.0
    epochs: int = 300
    samples_per_shape: int = 6000
    points_per_shape: int = 512
    shapes_per_batch: int = 8
    near_fraction: float = 0.8
    near_sigma: float = 0.02
    lr_net: float = 1e-3
    lr_codes: float = 2e-3
    lr_decay_every: int = 100
    lr_decay: float = 0.5
    clamp: float = 0.1
    code_reg: float = 1e-4
    code_init_std: float = 0.01
    seed: int = 0


@dataclass
class DecoderTrainResult:
    theta: DecoderWeights
    codes: np.ndarray
    history: list = field(default_factory=list)


def clamped_l1(pred, label, delta):
    """Per-sample clamped L1 loss and its derivative with respect to ``pred``."""
    cp = np.clip(pred, -delta, delta)
    cl = np.clip(label, -delta, delta)
    diff = cp - cl
    grad = np.sign(diff) * (np.abs(pred) < delta)
    return np.abs(diff), grad


def train_decoder(shapes, config=None, samples=None, callback=None):
    """Auto-decoder training: per-shape codes and network weights are fitted jointly.

    Returns a :class:`DecoderTrainResult` with the loss history (one
    clamped-L1 value per epoch). Raises ``FloatingPointError`` on divergence.
    """
    cfg = config or DecoderTrainConfig()
    if len(shapes) == 0:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    theta = init_decoder(cfg.hidden, LATENT_DIM, int(rng.integers(2**62)), cfg.beta)
    codes = rng.normal(0.0, cfg.code_init_std, size=(len(shapes), LATENT_DIM))
    if samples is None:
        samples = [
            sample_sdf_training_pairs(s, cfg.samples_per_shape, int(rng.integers(2**62)), cfg.near_fraction, cfg.near_sigma)
            for s in shapes
        ]
    params = theta.W + theta.b
    opt_net = Adam(params, cfg.lr_net)
    opt_codes = Adam([codes], cfg.lr_codes)
    n_shapes = len(shapes)
    history = []
    t0 = time.time()
    for epoch in range(cfg.epochs):
        if epoch and cfg.lr_decay_every and epoch % cfg.lr_decay_every == 0:
            opt_net.lr *= cfg.lr_decay
            opt_codes.lr *= cfg.lr_decay
        order = rng.permutation(n_shapes)
        ep_loss, ep_n = 0.0, 0
        for start in range(0, n_shapes, cfg.shapes_per_batch):
            idx = order[start : start + cfg.shapes_per_batch]
            P, L, owner = [], [], []
            for j, si in enumerate(idx):
                pts, lab = samples[si]
                take = rng.choice(len(pts), size=min(cfg.points_per_shape, len(pts)), replace=False)
                P.append(pts[take])
                L.append(lab[take])
                owner.append(np.full(len(take), j))
            P = np.concatenate(P)
            L = np.concatenate(L)
            owner = np.concatenate(owner)
            X = np.concatenate([codes[idx][owner], P], axis=1)
            s, cache = forward_raw(theta, X, keep=True)
            loss, dl = clamped_l1(s, L, cfg.clamp)
            n = len(s)
            dX, grads = backward_raw(theta, cache, dl / n, want_params=True)
            gcodes = np.zeros_like(codes)
            np.add.at(gcodes, idx[owner], dX[:, :LATENT_DIM])
            gcodes[idx] += 2.0 * cfg.code_reg * codes[idx] / len(idx)
            batch_loss = loss.mean()
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"decoder training diverged at epoch {epoch}")
            opt_net.step(grads.W + grads.b)
            opt_codes.step([gcodes], rows=idx)
            ep_loss += batch_loss * n
            ep_n += n
        history.append(ep_loss / ep_n)
        if callback is not None:
            callback(epoch, history[-1])
        if epoch % 25 == 0:
            logger.info("decoder epoch %d loss %.5f (%.0fs)", epoch, history[-1], time.time() - t0)
    return DecoderTrainResult(theta, codes, history)


class SDFDecoder(BaseEstimator):
    """Estimator wrapper: ``fit`` on a list of shapes, ``predict`` signed distances.

    After fitting, ``weights_`` holds the network and ``codes_`` the
    per-shape latent codes in corpus order.
    """

    def __init__(self, hidden=128, beta=100.0, epochs=300, samples_per_shape=6000, points_per_shape=512,
                 shapes_per_batch=8, lr_net=1e-3, lr_codes=2e-3, clamp=0.1, code_reg=1e-4, random_state=0):
        self.hidden = hidden
        self.beta = beta
        self.epochs = epochs
        self.samples_per_shape = samples_per_shape
        self.points_per_shape = points_per_shape
        self.shapes_per_batch = shapes_per_batch
        self.lr_net = lr_net
        self.lr_codes = lr_codes
        self.clamp = clamp
        self.code_reg = code_reg
        self.random_state = random_state

    def _config(self):
        return DecoderTrainConfig(
            hidden=self.hidden, beta=self.beta, epochs=self.epochs, samples_per_shape=self.samples_per_shape,
            points_per_shape=self.points_per_shape, shapes_per_batch=self.shapes_per_batch, lr_net=self.lr_net,
            lr_codes=self.lr_codes, clamp=self.clamp, code_reg=self.code_reg, seed=self.random_state,
        )

    def fit(self, shapes, y=None):
        res = train_decoder(list(shapes), self._config())
        self.weights_ = res.theta
        self.codes_ = res.codes
        self.history_ = res.history
        return self

    def predict(self, points, code):
        if not hasattr(self, "weights_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("SDFDecoder is not fitted")
        return decoder_forward(self.weights_, code, points)

"""Gaussianization flow between normalized codes w (standard normal) and decoder codes z.

The flow is a stack of blocks, each an orthogonal rotation (product of
Householder reflections) followed by an elementwise kernel layer

    y_d = Phi^{-1}( sum_k pi_dk * sigmoid((x_d - mu_dk) / h_dk) ),

a logistic-mixture CDF composed with the inverse normal CDF. Blocks run in
the data-to-Gaussian direction ``w = G^{-1}(z)``, which is closed form. The
generative direction ``z = G(w)`` inverts each kernel per dimension with a
bracketed Newton iteration, and its Jacobian follows from the inverse
function theorem.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, ndtri
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_codes
from .decoder import Adam

logger = logging.getLogger(__name__)

CDF_EPS = 1e-12
LOG_2PI = np.log(2.0 * np.pi)


class FlowSaturationWarning(RuntimeWarning):
    """A kernel-layer CDF hit the clamp (eps, 1 - eps) before the inverse normal CDF."""


class FlowInversionError(RuntimeError):
    def __init__(self, block, dims):
        self.block = block
        self.dims = list(dims)
        super().__init__(f"kernel inversion did not converge in block {block}, dimensions {self.dims}")


@dataclass
class FlowBlock:
    V: np.ndarray  # (m, dim) Householder vectors
    mu: np.ndarray  # (dim, K) anchors
    log_h: np.ndarray  # (dim, K) log bandwidths
    logits: np.ndarray  # (dim, K) mixture logits

    def rotation(self):
        return householder_product(self.V)

    def copy(self):
        return FlowBlock(self.V.copy(), self.mu.copy(), self.log_h.copy(), self.logits.copy())

    def arrays(self):
        return [self.V, self.mu, self.log_h, self.logits]


@dataclass
class FlowWeights:
    blocks: list
    dim: int = 16

    @property
    def K(self):
        return self.blocks[0].mu.shape[1]

    def copy(self):
        return FlowWeights([b.copy() for b in self.blocks], self.dim)

    def arrays(self):
        return [a for b in self.blocks for a in b.arrays()]

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])


def householder_product(V):
    """R = H(v_1) H(v_2) ... H(v_m) with H(v) = I - 2 v v^T / (v^T v)."""
    dim = V.shape[1]
    R = np.eye(dim)
    for v in V:
        R = R - 2.0 * np.outer(R @ v, v) / (v @ v)
    return R


def householder_vjp(V, G):
    """Gradient with respect to ``V`` of <G, householder_product(V)>."""
    m, dim = V.shape
    Hs = [np.eye(dim) - 2.0 * np.outer(v, v) / (v @ v) for v in V]
    prefix = [np.eye(dim)]
    for H in Hs[:-1]:
        prefix.append(prefix[-1] @ H)
    suffix = [np.eye(dim)] * m
    acc = np.eye(dim)
    for k in range(m - 1, -1, -1):
        suffix[k] = acc
        acc = Hs[k] @ acc
    gV = np.zeros_like(V)
    for k, v in enumerate(V):
        GH = prefix[k].T @ G @ suffix[k].T
        n = v @ v
        q = v @ GH @ v
        gV[k] = -2.0 * ((GH + GH.T) @ v / n - 2.0 * q * v / n**2)
    return gV


def householder_vectors_for(Q):
    """Householder vectors whose product equals ``Q`` up to the sign of each row.

    Householder QR of ``Q^T`` gives ``Q^T = H_1 ... H_{n-1} D`` with a sign
    diagonal ``D``; a final reflection on the last axis fills the count to n.
    Row signs of a rotation do not matter where it is used (decorrelation).
    """
    A = np.array(Q, dtype=np.float64).T
    n = A.shape[0]
    vs = []
    for k in range(n - 1):
        x = A[k:, k]
        v = np.zeros(n)
        v[k:] = x
        v[k] += np.copysign(np.linalg.norm(x), x[0] if x[0] != 0 else 1.0)
        if v @ v < 1e-300:
            v = np.zeros(n)
            v[k] = 1.0
        A = A - 2.0 * np.outer(v, v @ A) / (v @ v)
        vs.append(v)
    last = np.zeros(n)
    last[-1] = 1.0
    # product H(last) H(v_{n-1}) ... H(v_1) = D Q up to the last-row sign
    return np.stack([last] + vs[::-1])


def init_flow(dim=16, K=8, n_blocks=3, seed=0, identity=False):
    """Untrained flow. ``identity=True`` gives R = I and a single matched logistic per dimension."""
    rng = np.random.default_rng(seed)
    blocks = []
    h0 = np.log(1.0 / 1.702)  # logistic scale closest to the standard normal CDF
    for _ in range(n_blocks):
        if identity:
            half = rng.normal(size=(dim // 2, dim))
            V = np.repeat(half, 2, axis=0)  # H(v) H(v) = I
            if V.shape[0] < dim:
                V = np.concatenate([V, V[-1:], V[-1:]], axis=0)
            mu = np.zeros((dim, K))
        else:
            V = rng.normal(size=(dim, dim))
            mu = np.tile(ndtri((np.arange(K) + 0.5) / K), (dim, 1))
        blocks.append(FlowBlock(V, mu, np.full((dim, K), h0), np.zeros((dim, K))))
    return FlowWeights(blocks, dim)


# -- kernel layer ------------------------------------------------------------


def _mixture(block, x):
    """CDF value (as lower and upper tail), density F' and F'' of each dimension, plus per-component terms."""
    inv_h = np.exp(-block.log_h)  # (dim, K)
    a = (x[:, :, None] - block.mu[None]) * inv_h[None]  # (n, dim, K)
    logpi = log_softmax(block.logits, axis=1)
    pi = np.exp(logpi)
    s = expit(a)
    sc = expit(-a)
    F = np.sum(pi * s, axis=2)
    Fc = np.sum(pi * sc, axis=2)
    s1 = s * sc
    s2 = s1 * (sc - s)
    dF = np.sum(pi * s1 * inv_h, axis=2)
    d2F = np.sum(pi * s2 * inv_h**2, axis=2)
    return F, Fc, dF, d2F, (a, s, sc, s1, s2, pi, inv_h)


def _gauss_from_tails(F, Fc):
    """Phi^{-1}(F) using whichever tail is smaller for accuracy; returns (y, number clamped)."""
    lower = F <= 0.5
    p = np.where(lower, F, Fc)
    clamped = int(np.sum(p < CDF_EPS))
    p = np.maximum(p, CDF_EPS)
    y = ndtri(p)
    return np.where(lower, y, -y), clamped


def _log_normal_pdf(y):
    return -0.5 * y * y - 0.5 * LOG_2PI


def kernel_forward(block, x):
    """Data-to-Gaussian kernel: returns y, log dy/dx (elementwise), number of clamped CDF values."""
    F, Fc, dF, _, _ = _mixture(block, x)
    y, clamped = _gauss_from_tails(F, Fc)
    with np.errstate(divide="ignore"):  # density underflow in the far tail gives -inf
        logd = np.log(dF) - _log_normal_pdf(y)
    return y, logd, clamped


def kernel_inverse(block, y, block_index=0, tol=1e-13, max_iter=200):
    """Solve kernel_forward(x) = y per dimension with bracketed Newton steps."""
    n, dim = y.shape
    mu_lo = block.mu.min(axis=1) - 10.0 * np.exp(block.log_h.max(axis=1))
    mu_hi = block.mu.max(axis=1) + 10.0 * np.exp(block.log_h.max(axis=1))
    lo = np.broadcast_to(mu_lo, (n, dim)).copy()
    hi = np.broadcast_to(mu_hi, (n, dim)).copy()
    width = hi - lo
    # widen until the bracket holds the target
    for _ in range(60):
        ylo, _, _ = kernel_forward(block, lo)
        bad = ylo > y
        if not bad.any():
            break
        lo[bad] -= width[bad]
        width[bad] *= 2
    width = hi - lo
    for _ in range(60):
        yhi, _, _ = kernel_forward(block, hi)
        bad = yhi < y
        if not bad.any():
            break
        hi[bad] += width[bad]
        width[bad] *= 2
    x = 0.5 * (lo + hi)
    done = np.zeros((n, dim), dtype=bool)
    for _ in range(max_iter):
        fx, logd, _ = kernel_forward(block, x)
        g = fx - y
        lo = np.where(g < 0, x, lo)
        hi = np.where(g > 0, x, hi)
        with np.errstate(divide="ignore"):
            # a vanishing derivative gives an infinite step, which falls back to bisection below
            step = g / np.exp(logd)
        x_new = x - step
        outside = ~((x_new > lo) & (x_new < hi)) | ~np.isfinite(x_new)
        x_new = np.where(outside, 0.5 * (lo + hi), x_new)
        done = (np.abs(x_new - x) <= tol * (1.0 + np.abs(x))) | (g == 0)
        x = x_new
        if done.all():
            break
    if not done.all():
        bad_dims = np.unique(np.nonzero(~done)[1])
        raise FlowInversionError(block_index, bad_dims)
    return x


def _warn_clamped(n):
    if n:
        warnings.warn(f"{n} kernel CDF values clamped to ({CDF_EPS}, 1 - {CDF_EPS})", FlowSaturationWarning, stacklevel=3)


# -- flow maps -----------------------------------------------------------------


def _as_batch(phi, v, name):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    return check_codes(v, phi.dim, name), single


def flow_inverse(phi, z):
    """w = G^{-1}(z) in closed form. Accepts one code or an (n, dim) batch."""
    x, single = _as_batch(phi, z, "z")
    total = 0
    for blk in phi.blocks:
        x = x @ blk.rotation().T
        x, _, c = kernel_forward(blk, x)
        total += c
    _warn_clamped(total)
    return x[0] if single else x


def _inverse_with_logdet(phi, z):
    """w and log|det dw/dz| per sample."""
    x = z
    logdet = np.zeros(z.shape[0])
    clamped = 0
    for blk in phi.blocks:
        x = x @ blk.rotation().T
        x, logd, c = kernel_forward(blk, x)
        logdet += logd.sum(axis=1)
        clamped += c
    return x, logdet, clamped


def flow_forward(phi, w):
    """z = G(w), inverting each kernel layer numerically."""
    x, single = _as_batch(phi, w, "w")
    for bi in range(len(phi.blocks) - 1, -1, -1):
        blk = phi.blocks[bi]
        x = kernel_inverse(blk, x, bi)
        x = x @ blk.rotation()
    return x[0] if single else x


def flow_logdet(phi, w):
    """log|det dz/dw| at w; the rotations contribute nothing."""
    w_arr, single = _as_batch(phi, w, "w")
    z = flow_forward(phi, w_arr)
    _, logdet_inv, _ = _inverse_with_logdet(phi, z)
    out = -logdet_inv
    return float(out[0]) if single else out


def flow_block_logdets(phi, w):
    """Per-block contributions to log|det dz/dw| (they sum to :func:`flow_logdet`)."""
    w = check_codes(w, phi.dim, "w")
    z = flow_forward(phi, w)
    x = z
    parts = []
    for blk in phi.blocks:
        x = x @ blk.rotation().T
        x, logd, _ = kernel_forward(blk, x)
        parts.append(-logd.sum(axis=1))
    return np.stack(parts, axis=1)


def flow_value_and_jacobian(phi, w):
    """z = G(w) and dz/dw (dim x dim) for a single w."""
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    z = flow_forward(phi, w)
    # dw/dz is a product of (diag(kernel') R); invert it for dz/dw
    x = z
    J = np.eye(phi.dim)
    for blk in phi.blocks:
        R = blk.rotation()
        x = x @ R.T
        x, logd, _ = kernel_forward(blk, x)
        J = (np.exp(logd[0])[:, None] * R) @ J
    return z[0], np.linalg.inv(J)


def flow_jacobian(phi, w):
    return flow_value_and_jacobian(phi, w)[1]


def log_likelihood(phi, z):
    """Per-sample log density of codes under the flow pulled back from N(0, I)."""
    z = check_codes(z, phi.dim)
    w, logdet, clamped = _inverse_with_logdet(phi, z)
    _warn_clamped(clamped)
    return -0.5 * np.sum(w * w, axis=1) - 0.5 * phi.dim * LOG_2PI + logdet


# -- training ---------------------------------------------------------------------


def _kernel_backward(block, x, gy, gl):
    """Backprop through one kernel layer.

    ``gy`` is the upstream gradient on y (n, dim); ``gl`` (n,) weights the
    summed log-derivative. Returns gx and gradients for (mu, log_h, logits).
    """
    F, Fc, dF, d2F, (a, s, sc, s1, s2, pi, inv_h) = _mixture(block, x)
    y, _ = _gauss_from_tails(F, Fc)
    pdf_y = np.exp(_log_normal_pdf(y))
    fprime = dF / pdf_y  # dy/dx
    gl = gl[:, None]
    # total upstream on y: direct + through log f' = log F' - log phi(y), d/dy = y
    gy_tot = gy + gl * y
    # d log F' / dx = F'' / F'
    gx = gy_tot * fprime + gl * d2F / dF
    # parameter sensitivities of F and F'
    coef_F = (gy_tot / pdf_y)[:, :, None]  # dL/dF
    coef_dF = (gl / dF)[:, :, None]  # dL/dF'
    ih = inv_h[None]
    dF_dmu = -pi * s1 * ih
    dF_dlh = -pi * s1 * a
    dFp_dmu = -pi * s2 * ih**2
    dFp_dlh = -pi * ih * (a * s2 + s1)
    g_mu = np.sum(coef_F * dF_dmu + coef_dF * dFp_dmu, axis=0)
    g_lh = np.sum(coef_F * dF_dlh + coef_dF * dFp_dlh, axis=0)
    # softmax: dF/dlogit_j = pi_j (s_j - F), dF'/dlogit_j = pi_j (s1_j/h_j - F')
    dF_dlg = pi * (s - F[:, :, None])
    dFp_dlg = pi * (s1 * ih - dF[:, :, None])
    g_lg = np.sum(coef_F * dF_dlg + coef_dF * dFp_dlg, axis=0)
    return gx, g_mu, g_lh, g_lg


def nll_and_grads(phi, z, reg=0.0, ref=None):
    """Mean negative log-likelihood of codes ``z`` and its gradient for every flow array.

    ``reg`` adds a quadratic pull of every kernel parameter toward ``ref``
    (anchors measured in units of the reference bandwidth); with few codes
    this keeps the kernels from collapsing onto individual samples.
    """
    n = z.shape[0]
    xs, rots, kin = [], [], []
    x = z
    logdet = np.zeros(n)
    for blk in phi.blocks:
        R = blk.rotation()
        rots.append(R)
        xs.append(x)
        x = x @ R.T
        kin.append(x)
        x, logd, _ = kernel_forward(blk, x)
        logdet += logd.sum(axis=1)
    w = x
    ll = -0.5 * np.sum(w * w, axis=1) - 0.5 * phi.dim * LOG_2PI + logdet
    loss = -ll.mean()
    gx = w / n  # d loss / d w
    gl = np.full(n, -1.0 / n)  # d loss / d logdet
    grads = [None] * len(phi.blocks)
    for bi in range(len(phi.blocks) - 1, -1, -1):
        blk = phi.blocks[bi]
        gkin, g_mu, g_lh, g_lg = _kernel_backward(blk, kin[bi], gx, gl)
        # kin = xs @ R^T  ->  dL/dR = gkin^T xs, dL/dxs = gkin R
        gR = gkin.T @ xs[bi]
        gV = householder_vjp(blk.V, gR)
        gx = gkin @ rots[bi]
        if reg and ref is not None:
            rb = ref.blocks[bi]
            scale = np.exp(-2.0 * rb.log_h)
            g_mu = g_mu + 2.0 * reg * scale * (blk.mu - rb.mu)
            g_lh = g_lh + 2.0 * reg * (blk.log_h - rb.log_h)
            g_lg = g_lg + 2.0 * reg * (blk.logits - rb.logits)
            loss += reg * np.sum(scale * (blk.mu - rb.mu) ** 2 + (blk.log_h - rb.log_h) ** 2 + (blk.logits - rb.logits) ** 2)
        grads[bi] = [gV, g_mu, g_lh, g_lg]
    return loss, [g for blk_g in grads for g in blk_g]


def data_init(phi, z, bandwidth_factor=0.3, pca=True):
    """Align each block with the data reaching it: PCA rotation, anchors at marginal quantiles."""
    x = z
    K = phi.K
    qs = (np.arange(K) + 0.5) / K
    for blk in phi.blocks:
        if pca:
            _, U = np.linalg.eigh(np.cov(x, rowvar=False))
            blk.V[:] = householder_vectors_for(U[:, ::-1].T)
        x = x @ blk.rotation().T
        blk.mu[:] = np.quantile(x, qs, axis=0).T
        std = np.std(x, axis=0) + 1e-8
        blk.log_h[:] = np.log(bandwidth_factor * std)[:, None]
        blk.logits[:] = 0.0
        x, _, _ = kernel_forward(blk, x)
    return phi


@dataclass
class FlowTrainConfig:
    K: int = 8
    n_blocks: int = 3
    epochs: int = 25
    lr: float = 5e-3
    batch_size: int = 0  # 0 = full batch
    bandwidth_reg: float = 3.0
    bandwidth_factor: float = 0.3
    seed: int = 0


@dataclass
class FlowTrainResult:
    phi: FlowWeights
    history: list = field(default_factory=list)


def train_flow(codes, config=None):
    """Maximum-likelihood fit of the flow to a code set; history holds the mean log-likelihood per epoch."""
    cfg = config or FlowTrainConfig()
    Z = check_codes(codes, np.asarray(codes).shape[-1])
    if Z.shape[0] <= Z.shape[1]:
        raise ValueError(f"need more codes than dimensions to fit a density, got {Z.shape[0]} codes of dimension {Z.shape[1]}")
    rng = np.random.default_rng(cfg.seed)
    phi = init_flow(Z.shape[1], cfg.K, cfg.n_blocks, int(rng.integers(2**62)))
    data_init(phi, Z, cfg.bandwidth_factor)
    ref = phi.copy()
    opt = Adam(phi.arrays(), cfg.lr)
    history = []
    bs = cfg.batch_size or Z.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(Z.shape[0])
        for start in range(0, Z.shape[0], bs):
            batch = Z[order[start : start + bs]]
            loss, grads = nll_and_grads(phi, batch, cfg.bandwidth_reg, ref)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(f"flow training diverged at epoch {epoch}")
            opt.step(grads)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FlowSaturationWarning)
            history.append(float(log_likelihood(phi, Z).mean()))
        if epoch % 50 == 0:
            logger.info("flow epoch %d mean log-likelihood %.4f", epoch, history[-1])
    return FlowTrainResult(phi, history)


def gaussian_baseline_loglik(Z):
    """Mean log-likelihood of ``Z`` under its own moment-matched Gaussian (ML covariance)."""
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    cov = np.cov(Z, rowvar=False, bias=True)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return np.inf
    # with the ML covariance the mean Mahalanobis term is exactly d
    return -0.5 * (d * LOG_2PI + logdet + d)


class GaussianizationFlow(BaseEstimator, TransformerMixin):
    """Estimator wrapper. ``transform`` maps codes z to normalized w, ``inverse_transform`` maps back."""

    def __init__(self, K=8, n_blocks=3, epochs=25, lr=5e-3, bandwidth_reg=3.0, bandwidth_factor=0.3, random_state=0):
        self.K = K
        self.n_blocks = n_blocks
        self.epochs = epochs
        self.lr = lr
        self.bandwidth_reg = bandwidth_reg
        self.bandwidth_factor = bandwidth_factor
        self.random_state = random_state

    def fit(self, Z, y=None):
        cfg = FlowTrainConfig(self.K, self.n_blocks, self.epochs, self.lr, 0, self.bandwidth_reg, self.bandwidth_factor, self.random_state)
        res = train_flow(Z, cfg)
        self.weights_ = res.phi
        self.history_ = res.history
        return self

    def _check(self):
        if not hasattr(self, "weights_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("GaussianizationFlow is not fitted")

    def transform(self, Z):
        self._check()
        return flow_inverse(self.weights_, check_codes(Z, self.weights_.dim))

    def inverse_transform(self, W):
        self._check()
        return flow_forward(self.weights_, check_codes(W, self.weights_.dim))

    def score_samples(self, Z):
        self._check()
        return log_likelihood(self.weights_, Z)

    def score(self, Z, y=None):
        return float(np.mean(self.score_samples(Z)))


__all__ = [
    "FlowWeights",
    "FlowBlock",
    "init_flow",
    "flow_forward",
    "flow_inverse",
    "flow_logdet",
    "flow_jacobian",
    "flow_value_and_jacobian",
    "log_likelihood",
    "train_flow",
    "FlowTrainConfig",
    "GaussianizationFlow",
    "gaussian_baseline_loglik",
    "householder_product",
]

"""Energies, analytic gradients, and descent dynamics of the block.

A set of N tokens x (one D-vector per row) evolves by gradient descent on a
global energy.  The energy is the sum of two parts evaluated on the
layer-normalized tokens g: a log-sum-exp attention energy that aligns each
token's queries with other tokens' keys, and a Hopfield (associative memory)
energy that pulls each token toward stored patterns.  One discrete update is

    x' = x - alpha * dE/dg

i.e. the gradient is taken with respect to the normalized tokens but applied
to the raw ones.  Because the layer-norm Jacobian is positive semi-definite,
the continuous-time energy never increases, and the discrete dynamics is
non-increasing for small enough step size.

All functions here are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import (
    masked_logsumexp,
    masked_softmax,
    mean_subtract,
    rsqrt_normalize,
)
from .errors import DegenerateMaskError, InvalidInputError, ShapeError

Array = np.ndarray

# TokenState is a plain (N, D) float array; row A is token A.
TokenState = np.ndarray


# ---------------------------------------------------------------------------
# Attention mask modes

@dataclass(frozen=True)
class ExcludeSelf:
    """Each token attends to every other token but not to itself."""


@dataclass(frozen=True)
class IncludeSelf:
    """Each token attends to every token, itself included."""


@dataclass(frozen=True, eq=False)
class GraphNeighborhood:
    """Each token attends only to its graph neighbors.

    `adjacency` is a symmetric boolean (N, N) matrix; entry [C, B] means
    token C may attend to token B.  Every row must have at least one True
    entry (add self-loops for isolated nodes before constructing this).
    """

    adjacency: Array

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise InvalidInputError("adjacency must be symmetric (undirected)")
        object.__setattr__(self, "adjacency", a)


MaskMode = ExcludeSelf | IncludeSelf | GraphNeighborhood


def mask_matrix(mode: MaskMode, n: int) -> Array:
    """Boolean (N, N) matrix; [C, B] True iff token C may attend to B.

    Raises DegenerateMaskError when some row has no partner, which would
    put a log(0) in the attention energy (e.g. ExcludeSelf with N=1).
    """
    if isinstance(mode, ExcludeSelf):
        m = ~np.eye(n, dtype=bool)
    elif isinstance(mode, IncludeSelf):
        m = np.ones((n, n), dtype=bool)
    elif isinstance(mode, GraphNeighborhood):
        if mode.adjacency.shape[0] != n:
            raise ShapeError(
                f"adjacency is for {mode.adjacency.shape[0]} tokens, state has {n}"
            )
        m = mode.adjacency
    else:
        raise TypeError(f"unknown mask mode {mode!r}")
    empty = ~m.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        raise DegenerateMaskError(
            f"attention mask leaves token(s) {rows.tolist()} with no partner"
        )
    return m


# ---------------------------------------------------------------------------
# Hopfield activations

@dataclass(frozen=True)
class Relu:
    """Slow-growing activation; the memory energy is -1/2 sum relu(h)^2."""


@dataclass(frozen=True)
class Power:
    """Polynomial activation; the memory energy is -1/n sum relu(h)^n."""

    n: int = 3

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInputError("power activation requires n >= 2")


@dataclass(frozen=True)
class Softmax:
    """Sharply peaked activation; per-token log-sum-exp memory energy."""

    beta: float = 1.0

    def __post_init__(self):
        if not (self.beta > 0):
            raise InvalidInputError("softmax activation requires beta > 0")


Activation = Relu | Power | Softmax


# ---------------------------------------------------------------------------
# Parameter containers

@dataclass
class LayerNormParams:
    """Learnable scalar scale, vector bias, and the variance regularizer."""

    gamma: float
    delta: Array  # (D,)
    epsilon: float = 1e-5

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 1:
            raise ShapeError(f"delta must be a vector, got shape {self.delta.shape}")
        # epsilon == 0 is allowed for exact-identity checks on nonconstant input
        if not (self.epsilon >= 0):
            raise InvalidInputError("epsilon must be >= 0")
        if not np.isfinite(self.gamma) or not np.isfinite(self.delta).all():
            raise InvalidInputError("layer norm parameters must be finite")

    @property
    def dim(self) -> int:
        return self.delta.shape[0]


@dataclass
class AttentionParams:
    """Key/query projection tensors, inverse temperature, and mask mode.

    w_key and w_query have shape (Y, H, D): Y internal dimensions, H heads,
    D token dimensions.  There is no value matrix; the effective value
    projection is derived from the keys and queries themselves.
    """

    w_key: Array
    w_query: Array
    beta: float
    mask_mode: MaskMode = field(default_factory=ExcludeSelf)

    def __post_init__(self):
        self.w_key = np.asarray(self.w_key, dtype=np.float64)
        self.w_query = np.asarray(self.w_query, dtype=np.float64)
        if self.w_key.ndim != 3:
            raise ShapeError(f"w_key must be (Y, H, D), got {self.w_key.shape}")
        if self.w_key.shape != self.w_query.shape:
            raise ShapeError(
                f"w_key {self.w_key.shape} and w_query {self.w_query.shape} differ"
            )
        if not (self.beta > 0):
            raise InvalidInputError("beta must be > 0")

    @property
    def dim(self) -> int:
        return self.w_key.shape[2]

    @property
    def n_heads(self) -> int:
        return self.w_key.shape[1]


def default_beta(y: int) -> float:
    """Default inverse temperature 1/sqrt(Y); 1/8 at the base Y=64."""
    return 1.0 / np.sqrt(y)


@dataclass
class HopfieldParams:
    """Stored memory patterns (one per row) and the hidden activation."""

    xi: Array  # (M, D)
    activation: Activation = field(default_factory=Relu)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if self.xi.ndim != 2 or self.xi.shape[0] < 1:
            raise ShapeError(f"xi must be (M>=1, D), got {self.xi.shape}")
        if not np.isfinite(self.xi).all():
            raise InvalidInputError("memory rows must be finite")

    @property
    def dim(self) -> int:
        return self.xi.shape[1]


@dataclass
class EtParams:
    """All parameters of one block plus the module-ablation switches."""

    norm: LayerNormParams
    attn: AttentionParams
    hopfield: HopfieldParams
    enable_attn: bool = True
    enable_hopfield: bool = True

    def __post_init__(self):
        if not (self.enable_attn or self.enable_hopfield):
            raise InvalidInputError("at least one of attention/hopfield must be enabled")
        d = self.norm.dim
        if self.attn.dim != d or self.hopfield.dim != d:
            raise ShapeError(
                f"token dim mismatch: norm {d}, attention {self.attn.dim}, "
                f"hopfield {self.hopfield.dim}"
            )

    @property
    def dim(self) -> int:
        return self.norm.dim


@dataclass(frozen=True)
class EnergyBreakdown:
    """Energy of one state, split by module; disabled modules report 0."""

    e_att: float
    e_hn: float
    e_total: float


# ---------------------------------------------------------------------------
# Layer norm as the gradient of a scalar potential

def _check_finite(x: Array, what: str) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise InvalidInputError(f"{what} contains non-finite values")
    return x


def layer_norm(x: Array, p: LayerNormParams) -> Array:
    """Normalize the last axis: gamma * (x - mean)/std + delta.

    The divisor is sqrt(mean of squared deviations + epsilon), so the map
    is smooth everywhere and is exactly the gradient of `lagrangian`.
    Broadcasts over any leading axes.
    """
    x = _check_finite(x, "layer_norm input")
    if x.shape[-1] != p.dim:
        raise ShapeError(f"input dim {x.shape[-1]} != parameter dim {p.dim}")
    return p.gamma * rsqrt_normalize(mean_subtract(x), p.epsilon) + p.delta


def lagrangian(x: Array, p: LayerNormParams) -> float:
    """Scalar potential whose gradient is `layer_norm` (1-D input)."""
    x = _check_finite(x, "lagrangian input")
    if x.ndim != 1 or x.shape[0] != p.dim:
        raise ShapeError(f"expected a ({p.dim},) vector, got {x.shape}")
    u = x - x.mean()
    s = np.sqrt((u * u).mean() + p.epsilon)
    return float(x.size * p.gamma * s + p.delta @ x)


def layer_norm_jacobian(x: Array, p: LayerNormParams) -> Array:
    """(D, D) Jacobian dg/dx of `layer_norm` at a single token x.

    Symmetric and positive semi-definite for gamma >= 0, which is what
    makes the descent dynamics non-increasing in energy.
    """
    x = _check_finite(x, "jacobian input")
    if x.ndim != 1 or x.shape[0] != p.dim:
        raise ShapeError(f"expected a ({p.dim},) vector, got {x.shape}")
    d = x.shape[0]
    u = x - x.mean()
    s = np.sqrt((u * u).mean() + p.epsilon)
    proj = np.eye(d) - 1.0 / d
    return p.gamma * (proj / s - np.outer(u, u) / (d * s**3))


# ---------------------------------------------------------------------------
# Attention energy and its exact gradient

def _keys_queries(g: Array, a: AttentionParams) -> tuple[Array, Array, Array, Array]:
    """Project tokens to per-head keys and queries.

    Returns (K, Q, wk, wq) where K, Q have shape (..., H, N, Y) and wk, wq
    are the (H, Y, D) per-head projection matrices.
    """
    wk = a.w_key.transpose(1, 0, 2)   # (H, Y, D)
    wq = a.w_query.transpose(1, 0, 2)
    gh = g[..., None, :, :]           # (..., 1, N, D) broadcasts over heads
    k = np.matmul(gh, wk.transpose(0, 2, 1))
    q = np.matmul(gh, wq.transpose(0, 2, 1))
    return k, q, wk, wq


def _attention_scores(g: Array, a: AttentionParams) -> tuple[Array, Array, Array, Array, Array]:
    n = g.shape[-2]
    if isinstance(a.mask_mode, ExcludeSelf) and n < 2:
        raise DegenerateMaskError("self-exclusive attention needs at least 2 tokens")
    mask = mask_matrix(a.mask_mode, n)
    k, q, wk, wq = _keys_queries(g, a)
    scores = a.beta * np.matmul(q, k.swapaxes(-1, -2))  # (..., H, C, B)
    return scores, mask, k, q, (wk, wq)


def attention_energy(g: Array, a: AttentionParams) -> float:
    """Log-sum-exp alignment energy of normalized tokens g (N, D).

    For every head and every token C, the energy rewards large inner
    products between C's query and the keys of the tokens C may attend to:

        E = -(1/beta) * sum_h sum_C log sum_{B in mask(C)} exp(beta K_hB . Q_hC)
    """
    g = _check_finite(g, "attention input")
    scores, mask, *_ = _attention_scores(g, a)
    lse = masked_logsumexp(scores, mask)
    return float(-(1.0 / a.beta) * lse.sum())


def attention_grad(g: Array, a: AttentionParams) -> Array:
    """Descent direction -dE/dg of the attention energy, shape like g.

    The result is the sum of two terms.  The "from" term is conventional
    softmax attention for token A over its partners, with the value
    projection w_query^T applied to the keys.  The "to" term is the
    transposed flow: contributions from every token that attends to A.
    Broadcasts over leading axes of g.
    """
    g = _check_finite(g, "attention input")
    scores, mask, k, q, (wk, wq) = _attention_scores(g, a)
    w = masked_softmax(scores, mask)                      # (..., H, C, B)
    term_from = np.matmul(np.matmul(w, k), wq)            # A as the query
    term_to = np.matmul(np.matmul(w.swapaxes(-1, -2), q), wk)  # A as a key
    return (term_from + term_to).sum(axis=-3)


def attention_from_term(g: Array, a: AttentionParams) -> Array:
    """Only the conventional-attention half of `attention_grad`."""
    g = _check_finite(g, "attention input")
    scores, mask, k, q, (wk, wq) = _attention_scores(g, a)
    w = masked_softmax(scores, mask)
    return np.matmul(np.matmul(w, k), wq).sum(axis=-3)


# ---------------------------------------------------------------------------
# Hopfield (associative memory) energy and gradient

def _hidden(g: Array, h: HopfieldParams) -> Array:
    return np.matmul(g, h.xi.transpose())  # (..., N, M)


def hopfield_energy(g: Array, h: HopfieldParams) -> float:
    """Memory energy of normalized tokens; low when tokens align with rows of xi."""
    g = _check_finite(g, "hopfield input")
    hid = _hidden(g, h)
    act = h.activation
    if isinstance(act, Relu):
        r = np.maximum(hid, 0.0)
        return float(-0.5 * (r * r).sum())
    if isinstance(act, Power):
        r = np.maximum(hid, 0.0)
        return float(-(1.0 / act.n) * (r**act.n).sum())
    if isinstance(act, Softmax):
        lse = masked_logsumexp(act.beta * hid, None)
        return float(-(1.0 / act.beta) * lse.sum())
    raise TypeError(f"unknown activation {act!r}")


def hopfield_grad(g: Array, h: HopfieldParams) -> Array:
    """Descent direction -dE/dg of the memory energy: f(g xi^T) xi.

    f is relu for the quadratic energy, relu^(n-1) for the power energy,
    and a per-token softmax for the log-sum-exp energy.
    """
    g = _check_finite(g, "hopfield input")
    hid = _hidden(g, h)
    act = h.activation
    if isinstance(act, Relu):
        f = np.maximum(hid, 0.0)
    elif isinstance(act, Power):
        f = np.maximum(hid, 0.0) ** (act.n - 1)
    elif isinstance(act, Softmax):
        f = masked_softmax(act.beta * hid, None)
    else:
        raise TypeError(f"unknown activation {act!r}")
    return np.matmul(f, h.xi)


# ---------------------------------------------------------------------------
# Combined energy and the update dynamics

def total_energy(x: TokenState, p: EtParams) -> EnergyBreakdown:
    """Energy of a raw token state: normalize rows, then sum enabled parts."""
    x = _check_finite(x, "token state")
    if x.ndim != 2:
        raise ShapeError(f"token state must be (N, D), got {x.shape}")
    g = layer_norm(x, p.norm)
    e_att = attention_energy(g, p.attn) if p.enable_attn else 0.0
    e_hn = hopfield_energy(g, p.hopfield) if p.enable_hopfield else 0.0
    return EnergyBreakdown(e_att=e_att, e_hn=e_hn, e_total=e_att + e_hn)


def energy_update(g: Array, p: EtParams) -> Array:
    """Descent direction -dE/dg of the total enabled energy at g."""
    if p.enable_attn and p.enable_hopfield:
        return attention_grad(g, p.attn) + hopfield_grad(g, p.hopfield)
    if p.enable_attn:
        return attention_grad(g, p.attn)
    return hopfield_grad(g, p.hopfield)


def et_step(x: TokenState, p: EtParams, alpha: float) -> TokenState:
    """One discrete update x' = x - alpha * dE/dg at g = layer_norm(x).

    The gradient is taken with respect to the normalized tokens but is
    subtracted from the raw state (residual-stream semantics).  alpha == 0
    reproduces the input bit-exactly.
    """
    if not (alpha >= 0):
        raise InvalidInputError("alpha must be >= 0")
    g = layer_norm(x, p.norm)
    return x + alpha * energy_update(g, p)


def et_forward(
    x0: TokenState, p: EtParams, alpha: float, n_steps: int
) -> list[tuple[TokenState, EnergyBreakdown]]:
    """Unroll the dynamics for n_steps; returns n_steps+1 (state, energy) pairs.

    trajectory[0] is the input with its energy; trajectory[t] is the state
    after t updates.  Deterministic: identical inputs give bit-identical
    trajectories.
    """
    if n_steps < 1:
        raise InvalidInputError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    out = [(x, total_energy(x, p))]
    for _ in range(n_steps):
        x = et_step(x, p, alpha)
        out.append((x, total_energy(x, p)))
    return out


def descent_quadratic_forms(x: TokenState, p: EtParams) -> Array:
    """Per-token quadratic form <dE/dg_A, J_A dE/dg_A> with J_A = dg_A/dx_A.

    The continuous-time energy derivative is -1/tau times the sum of these,
    so non-negative values certify that the dynamics cannot increase the
    energy.  Returns shape (N,).
    """
    x = _check_finite(x, "token state")
    g = layer_norm(x, p.norm)
    grad = -energy_update(g, p)  # dE/dg
    out = np.empty(x.shape[0])
    for a in range(x.shape[0]):
        j = layer_norm_jacobian(x[a], p.norm)
        out[a] = grad[a] @ j @ grad[a]
    return out


def find_monotone_alpha(
    x0: TokenState,
    p: EtParams,
    n_steps: int = 12,
    alpha0: float = 0.1,
    slack: float = 1e-9,
    max_halvings: int = 60,
) -> tuple[float, list[tuple[TokenState, EnergyBreakdown]]]:
    """Halve the step size from alpha0 until the energy trajectory is monotone.

    Returns the first alpha whose n_steps trajectory never increases
    e_total by more than `slack`, together with that trajectory.
    """
    alpha = alpha0
    for _ in range(max_halvings + 1):
        traj = et_forward(x0, p, alpha, n_steps)
        e = np.array([b.e_total for _, b in traj])
        if (np.diff(e) <= slack).all():
            return alpha, traj
        alpha *= 0.5
    raise InvalidInputError(
        f"no monotone step size found after {max_halvings} halvings from {alpha0}"
    )


# ---------------------------------------------------------------------------
# Parameter counting

def param_count(
    d: int,
    h: int,
    y: int,
    m: int,
    n: int | None = None,
    p: int | None = None,
    *,
    with_embeddings: bool = False,
) -> int:
    """Number of learnable weights in one block (optionally plus embeddings).

    The block has no value matrix and a single shared memory matrix, so it
    counts 2*Y*H*D + M*D (biases excluded).  With embeddings the encoder
    kernel P*D, decoder kernel D*P, position bias N*D, and mask token D are
    added.
    """
    for name, v in (("d", d), ("h", h), ("y", y), ("m", m)):
        if v < 1:
            raise InvalidInputError(f"dimension {name} must be positive")
    block = 2 * y * h * d + m * d
    if not with_embeddings:
        return block
    if n is None or p is None or n < 1 or p < 1:
        raise InvalidInputError("embedding count needs positive n and p")
    return block + p * d + d * p + n * d + d

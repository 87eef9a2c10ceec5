"""Masked-patch image completion: patchify, encode, mask, evolve, decode.

Training minimizes the MSE on occluded patches only.  Occluded patches are
split into a majority that is replaced by a learnable mask token and a
small remainder left untouched (still scored by the loss), which helps the
memory module learn meaningful patch content.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .core import EtParams, EnergyBreakdown, layer_norm, et_forward, mask_matrix
from .data import Rng
from .errors import DivergenceError, InvalidInputError, ShapeError
from .optim import AdamState, adam_step
from .unroll import et_unroll_v, layer_norm_v

Array = np.ndarray


# ---------------------------------------------------------------------------
# Patch grids

@dataclass
class PatchGrid:
    """Non-overlapping patches in row-major order plus the grid shape."""

    patches: Array  # (N, P)
    rows: int
    cols: int

    def __post_init__(self):
        if self.patches.ndim != 2 or self.patches.shape[0] != self.rows * self.cols:
            raise ShapeError(
                f"{self.patches.shape} patches do not fill a {self.rows}x{self.cols} grid"
            )


def patchify(image: Array, k_h: int, k_w: int) -> PatchGrid:
    """Split (C, H, W) into row-major (N, C*k_h*k_w) patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got {image.shape}")
    c, h, w = image.shape
    if h % k_h or w % k_w:
        raise ShapeError(f"image {h}x{w} not divisible by patch {k_h}x{k_w}")
    rows, cols = h // k_h, w // k_w
    patches = (
        image.reshape(c, rows, k_h, cols, k_w)
        .transpose(1, 3, 0, 2, 4)
        .reshape(rows * cols, c * k_h * k_w)
    )
    return PatchGrid(patches, rows, cols)


def unpatchify(grid: PatchGrid, channels: int, k_h: int, k_w: int) -> Array:
    """Exact inverse of `patchify`."""
    n, p = grid.patches.shape
    if p != channels * k_h * k_w:
        raise ShapeError(f"patch size {p} != {channels}*{k_h}*{k_w}")
    return (
        grid.patches.reshape(grid.rows, grid.cols, channels, k_h, k_w)
        .transpose(2, 0, 3, 1, 4)
        .reshape(channels, grid.rows * k_h, grid.cols * k_w)
    )


# ---------------------------------------------------------------------------
# Mask plans

@dataclass
class MaskPlan:
    """Which tokens count toward the loss and which become the mask token."""

    occluded: Array   # sorted unique indices scored by the loss
    replaced: Array   # subset of occluded whose tokens become mask_token

    def __post_init__(self):
        self.occluded = np.asarray(self.occluded, dtype=np.intp)
        self.replaced = np.asarray(self.replaced, dtype=np.intp)
        if not np.isin(self.replaced, self.occluded).all():
            raise InvalidInputError("replaced indices must be occluded")
        if len(np.unique(self.occluded)) != self.occluded.size:
            raise InvalidInputError("occluded indices must be unique")

    @property
    def untouched(self) -> Array:
        return np.setdiff1d(self.occluded, self.replaced)

    def occluded_mask(self, n: int) -> Array:
        m = np.zeros(n, dtype=bool)
        m[self.occluded] = True
        return m

    def replaced_mask(self, n: int) -> Array:
        m = np.zeros(n, dtype=bool)
        m[self.replaced] = True
        return m


def make_mask_plan(
    n: int, n_occluded: int, n_replaced: int, rng: np.random.Generator
) -> MaskPlan:
    """Uniform sample of occluded tokens and the replaced subset."""
    if not (0 <= n_replaced <= n_occluded <= n):
        raise InvalidInputError(
            f"need 0 <= n_replaced ({n_replaced}) <= n_occluded ({n_occluded}) <= N ({n})"
        )
    occluded = rng.choice(n, size=n_occluded, replace=False)
    replaced = rng.choice(occluded, size=n_replaced, replace=False) if n_occluded else occluded[:0]
    return MaskPlan(np.sort(occluded), np.sort(replaced))


# ---------------------------------------------------------------------------
# Task parameters

@dataclass
class ImageTaskParams:
    """Encoder/decoder, mask token, position bias, and the block parameters."""

    enc_kernel: Array          # (P, D)
    enc_bias: Array            # (D,)
    dec_norm_gamma: float
    dec_norm_delta: Array      # (D,)
    dec_kernel: Array          # (D, P)
    dec_bias: Array            # (P,)
    mask_token: Array          # (D,)
    pos_bias: Array            # (N, D)
    et: EtParams
    alpha: float
    n_steps: int
    k_h: int
    k_w: int
    dec_norm_epsilon: float = 1e-5

    def __post_init__(self):
        d = self.et.dim
        p = self.enc_kernel.shape[0]
        if self.enc_kernel.shape != (p, d):
            raise ShapeError(f"encoder kernel {self.enc_kernel.shape} != ({p}, {d})")
        if self.dec_kernel.shape != (d, p):
            raise ShapeError(f"decoder kernel {self.dec_kernel.shape} != ({d}, {p})")
        if self.enc_bias.shape != (d,) or self.dec_bias.shape != (p,):
            raise ShapeError("encoder/decoder bias shapes inconsistent")
        if self.mask_token.shape != (d,) or self.pos_bias.shape[1] != d:
            raise ShapeError("mask token / position bias shapes inconsistent")

    @property
    def n_tokens(self) -> int:
        return self.pos_bias.shape[0]

    @property
    def patch_size(self) -> int:
        return self.enc_kernel.shape[0]


def init_image_params(
    *,
    n_tokens: int,
    patch_size: int,
    d: int,
    h: int,
    y: int,
    m: int,
    beta: float,
    alpha: float,
    n_steps: int,
    k_h: int,
    k_w: int,
    mask_mode,
    activation,
    enable_attn: bool = True,
    enable_hopfield: bool = True,
    rng: np.random.Generator | None = None,
    init_std: float = 0.02,
) -> ImageTaskParams:
    """Kernels, memories, mask token, and position bias from N(0, init_std);
    biases zero; layer-norm scale one."""
    from .core import AttentionParams, HopfieldParams, LayerNormParams

    rng = rng or np.random.default_rng(0)
    et = EtParams(
        norm=LayerNormParams(gamma=1.0, delta=np.zeros(d)),
        attn=AttentionParams(
            w_key=rng.normal(0, init_std, (y, h, d)),
            w_query=rng.normal(0, init_std, (y, h, d)),
            beta=beta,
            mask_mode=mask_mode,
        ),
        hopfield=HopfieldParams(
            xi=rng.normal(0, init_std, (m, d)), activation=activation
        ),
        enable_attn=enable_attn,
        enable_hopfield=enable_hopfield,
    )
    return ImageTaskParams(
        enc_kernel=rng.normal(0, init_std, (patch_size, d)),
        enc_bias=np.zeros(d),
        dec_norm_gamma=1.0,
        dec_norm_delta=np.zeros(d),
        dec_kernel=rng.normal(0, init_std, (d, patch_size)),
        dec_bias=np.zeros(patch_size),
        mask_token=rng.normal(0, init_std, d),
        pos_bias=rng.normal(0, init_std, (n_tokens, d)),
        et=et,
        alpha=alpha,
        n_steps=n_steps,
        k_h=k_h,
        k_w=k_w,
    )


def image_params_to_tensors(p: ImageTaskParams) -> dict[str, Array]:
    """Flatten all learnable tensors to names for the optimizer/checkpoint."""
    return {
        "enc.kernel": p.enc_kernel,
        "enc.bias": p.enc_bias,
        "dec.norm.gamma": np.asarray(p.dec_norm_gamma, dtype=np.float64),
        "dec.norm.delta": p.dec_norm_delta,
        "dec.kernel": p.dec_kernel,
        "dec.bias": p.dec_bias,
        "mask_token": p.mask_token,
        "pos_bias": p.pos_bias,
        "et.norm.gamma": np.asarray(p.et.norm.gamma, dtype=np.float64),
        "et.norm.delta": p.et.norm.delta,
        "et.attn.w_key": p.et.attn.w_key,
        "et.attn.w_query": p.et.attn.w_query,
        "et.hopfield.xi": p.et.hopfield.xi,
    }


# names whose parameters skip weight decay (biases, norms, per-token vectors)
IMAGE_DECAY_EXEMPT = frozenset(
    {
        "enc.bias",
        "dec.norm.gamma",
        "dec.norm.delta",
        "dec.bias",
        "mask_token",
        "pos_bias",
        "et.norm.gamma",
        "et.norm.delta",
    }
)


def image_params_from_tensors(
    tensors: dict[str, Array], like: ImageTaskParams
) -> ImageTaskParams:
    """Rebuild structured parameters from named tensors, checking shapes."""
    from .data import checkpoint_tensor as get

    et = like.et
    new_et = EtParams(
        norm=replace(
            et.norm,
            gamma=float(get(tensors, "et.norm.gamma", ())),
            delta=get(tensors, "et.norm.delta", et.norm.delta.shape),
        ),
        attn=replace(
            et.attn,
            w_key=get(tensors, "et.attn.w_key", et.attn.w_key.shape),
            w_query=get(tensors, "et.attn.w_query", et.attn.w_query.shape),
        ),
        hopfield=replace(
            et.hopfield, xi=get(tensors, "et.hopfield.xi", et.hopfield.xi.shape)
        ),
        enable_attn=et.enable_attn,
        enable_hopfield=et.enable_hopfield,
    )
    return replace(
        like,
        enc_kernel=get(tensors, "enc.kernel", like.enc_kernel.shape),
        enc_bias=get(tensors, "enc.bias", like.enc_bias.shape),
        dec_norm_gamma=float(get(tensors, "dec.norm.gamma", ())),
        dec_norm_delta=get(tensors, "dec.norm.delta", like.dec_norm_delta.shape),
        dec_kernel=get(tensors, "dec.kernel", like.dec_kernel.shape),
        dec_bias=get(tensors, "dec.bias", like.dec_bias.shape),
        mask_token=get(tensors, "mask_token", like.mask_token.shape),
        pos_bias=get(tensors, "pos_bias", like.pos_bias.shape),
        et=new_et,
    )


# ---------------------------------------------------------------------------
# Inference path (plain numpy)

def encode_and_mask(grid: PatchGrid, plan: MaskPlan, p: ImageTaskParams) -> Array:
    """Affine-encode patches, replace planned rows by the mask token, add
    position biases.  Returns the (N, D) initial token state."""
    if grid.patches.shape[0] != p.n_tokens:
        raise ShapeError(
            f"{grid.patches.shape[0]} patches but parameters expect {p.n_tokens}"
        )
    enc = np.matmul(grid.patches, p.enc_kernel) + p.enc_bias
    x = np.where(plan.replaced_mask(p.n_tokens)[:, None], p.mask_token, enc)
    return x + p.pos_bias


def decode_tokens(x: Array, p: ImageTaskParams) -> Array:
    """Decoder: layer norm then affine projection back to patch space."""
    from .core import LayerNormParams

    norm = LayerNormParams(
        gamma=p.dec_norm_gamma, delta=p.dec_norm_delta, epsilon=p.dec_norm_epsilon
    )
    return np.matmul(layer_norm(x, norm), p.dec_kernel) + p.dec_bias


def reconstruct(
    image: Array,
    plan: MaskPlan,
    p: ImageTaskParams,
    *,
    decode_at_min_energy: bool = False,
) -> tuple[Array, list[tuple[Array, EnergyBreakdown]]]:
    """Run the dynamics on a masked image and decode the result.

    Returns the reconstructed image and the full (state, energy) trajectory.
    By default the state after the final step is decoded; with
    decode_at_min_energy the recorded state of lowest total energy is used.
    """
    channels = image.shape[0]
    grid = patchify(image, p.k_h, p.k_w)
    x0 = encode_and_mask(grid, plan, p)
    traj = et_forward(x0, p.et, p.alpha, p.n_steps)
    if decode_at_min_energy:
        idx = int(np.argmin([b.e_total for _, b in traj]))
        state = traj[idx][0]
    else:
        state = traj[-1][0]
    out = PatchGrid(decode_tokens(state, p), grid.rows, grid.cols)
    return unpatchify(out, channels, p.k_h, p.k_w), traj


def masked_mse(recon: PatchGrid, orig: PatchGrid, plan: MaskPlan) -> float:
    """Mean squared error over occluded patches only (0 for an empty plan)."""
    if recon.patches.shape != orig.patches.shape:
        raise ShapeError("reconstruction and original differ in shape")
    if plan.occluded.size == 0:
        return 0.0
    w = plan.occluded_mask(recon.patches.shape[0])[:, None]
    diff = recon.patches - orig.patches
    sq = diff * diff
    return float((sq * w).sum() / (plan.occluded.size * recon.patches.shape[1]))


# ---------------------------------------------------------------------------
# Training path (recorded on tape)

def image_loss_fn(
    tape: ad.Tape,
    pv: dict[str, ad.Var],
    patches: Array,        # (B, N, P)
    replaced: Array,       # (B, N) bool
    occluded: Array,       # (B, N) bool
    spec: ImageTaskParams,
) -> ad.Var:
    """Average masked MSE of a batch, unrolled through the dynamics."""
    b, n, patch = patches.shape
    mask = mask_matrix(spec.et.attn.mask_mode, n)
    pc = tape.constant(patches)
    enc = ad.matmul(pc, pv["enc.kernel"]) + pv["enc.bias"]
    x = ad.where_rows(enc, pv["mask_token"], replaced)
    x = x + pv["pos_bias"]
    x = et_unroll_v(
        x,
        spec.n_steps,
        gamma=pv["et.norm.gamma"],
        delta=pv["et.norm.delta"],
        epsilon=spec.et.norm.epsilon,
        w_key=pv["et.attn.w_key"],
        w_query=pv["et.attn.w_query"],
        beta=spec.et.attn.beta,
        mask=mask,
        xi=pv["et.hopfield.xi"],
        activation=spec.et.hopfield.activation,
        enable_attn=spec.et.enable_attn,
        enable_hopfield=spec.et.enable_hopfield,
        alpha=spec.alpha,
    )
    g = layer_norm_v(x, pv["dec.norm.gamma"], pv["dec.norm.delta"], spec.dec_norm_epsilon)
    recon = ad.matmul(g, pv["dec.kernel"]) + pv["dec.bias"]
    sq = ad.square(recon - pc)
    weights = tape.constant(occluded[..., None].astype(np.float64))
    n_scored = int(occluded.sum()) * patch
    if n_scored == 0:
        return ad.scale(ad.sum_(sq * weights), 0.0)
    return ad.scale(ad.sum_(sq * weights), 1.0 / n_scored)


@dataclass
class ImageTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    n_occluded: int = 8
    n_replaced: int = 7
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.99
    weight_decay: float = 0.05
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    seed: int = 0
    max_steps: int | None = None


def train_image(
    images: Array, params: ImageTaskParams, cfg: ImageTrainConfig
) -> tuple[ImageTaskParams, list[dict]]:
    """Minimize masked MSE over the image set; returns trained parameters
    and a per-epoch metrics log.  Deterministic given cfg.seed."""
    n_img = images.shape[0]
    grids = [patchify(img, params.k_h, params.k_w) for img in images]
    patches_all = np.stack([g.patches for g in grids])  # (n_img, N, P)
    n = params.n_tokens
    rng_mask = Rng(cfg.seed).stream("image-masking")
    rng_order = Rng(cfg.seed).stream("image-batch-order")

    tensors = image_params_to_tensors(params)
    state = AdamState.init(
        tensors,
        lr=cfg.lr,
        b1=cfg.b1,
        b2=cfg.b2,
        weight_decay=cfg.weight_decay,
        grad_clip=cfg.grad_clip,
        decay_exempt=IMAGE_DECAY_EXEMPT,
    )
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(n_img)
        losses = []
        for start in range(0, n_img, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch_ids = order[start : start + cfg.batch_size]
            plans = [
                make_mask_plan(n, cfg.n_occluded, cfg.n_replaced, rng_mask)
                for _ in batch_ids
            ]
            replaced = np.stack([p.replaced_mask(n) for p in plans])
            occluded = np.stack([p.occluded_mask(n) for p in plans])
            loss, tape = ad.record_forward(
                image_loss_fn,
                tensors,
                patches_all[batch_ids],
                replaced,
                occluded,
                params,
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: {loss}"
                )
            grads = ad.backward(tape)
            lr_scale = (
                min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
            )
            tensors, state = adam_step(tensors, grads, state, lr_scale=lr_scale)
            losses.append(loss)
            step += 1
        if losses:
            history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return image_params_from_tensors(tensors, params), history


def eval_masked_mse(
    images: Array,
    params: ImageTaskParams,
    *,
    n_occluded: int,
    n_replaced: int,
    seed: int,
    decode_at_min_energy: bool = False,
) -> float:
    """Average masked-patch MSE over a set of images with seeded plans."""
    rng = Rng(seed).stream("image-eval-masking")
    total = 0.0
    for img in images:
        grid = patchify(img, params.k_h, params.k_w)
        plan = make_mask_plan(params.n_tokens, n_occluded, n_replaced, rng)
        recon, _ = reconstruct(
            img, plan, params, decode_at_min_energy=decode_at_min_energy
        )
        total += masked_mse(patchify(recon, params.k_h, params.k_w), grid, plan)
    return total / images.shape[0]


# ---------------------------------------------------------------------------
# Weight inspection

def export_weights_as_patches(p: ImageTaskParams, which: str) -> PatchGrid:
    """Decode weight rows into patch space for visual inspection.

    which: 'hopfield' for the stored memories, 'keys'/'queries' for the
    attention projections (rows grouped by head).
    """
    if which == "hopfield":
        rows = p.et.hopfield.xi
    elif which == "keys":
        w = p.et.attn.w_key
        rows = w.transpose(1, 0, 2).reshape(-1, w.shape[2])
    elif which == "queries":
        w = p.et.attn.w_query
        rows = w.transpose(1, 0, 2).reshape(-1, w.shape[2])
    else:
        raise InvalidInputError(f"unknown weight family {which!r}")
    decoded = decode_tokens(rows, p)
    return PatchGrid(decoded, decoded.shape[0], 1)

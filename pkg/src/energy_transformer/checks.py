"""Randomized finite-difference verification of every gradient path.

Each check compares an analytic or tape gradient against the central
finite-difference oracle over many small random instances and reports the
worst relative error per tensor.  The CLI `verify-grad` command and the
acceptance suite both run these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import core
from .core import (
    AttentionParams,
    EtParams,
    ExcludeSelf,
    GraphNeighborhood,
    HopfieldParams,
    IncludeSelf,
    LayerNormParams,
    Power,
    Relu,
    Softmax,
)
from .data import Rng

Array = np.ndarray


def rel_err(a: Array, b: Array) -> float:
    """Norm-based relative error, safe for near-zero references."""
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


@dataclass
class CheckReport:
    """Worst-case result of one gradient check family."""

    name: str
    worst_rel_err: float
    worst_seed: int
    n_instances: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status:4s} {self.name:40s} worst_rel_err={self.worst_rel_err:.3e} "
            f"(tol {self.tolerance:.1e}, {self.n_instances} instances, "
            f"worst seed {self.worst_seed})"
        )


def _random_mask_mode(kind: str, n: int, rng: np.random.Generator):
    if kind == "exclude_self":
        return ExcludeSelf()
    if kind == "include_self":
        return IncludeSelf()
    # random symmetric adjacency with guaranteed self-loops
    a = rng.random((n, n)) < 0.5
    a = a | a.T
    np.fill_diagonal(a, True)
    return GraphNeighborhood(a)


def check_energy_gradients(
    n_instances: int = 100,
    tolerance: float = 1e-6,
    seed0: int = 0,
    fd_step: float = 1e-5,
    corrupt: str | None = None,
) -> list[CheckReport]:
    """Analytic dE/dg for both energies vs. finite differences.

    Covers all three mask modes and all three memory activations on random
    instances with N<=6, D<=8, H<=2, Y<=3, M<=5.  `corrupt` names a check
    whose analytic result gets an injected fault (for testing the report).
    """
    mask_kinds = ("exclude_self", "include_self", "graph")
    activations = (Relu(), Power(3), Softmax(0.7))
    worst: dict[str, tuple[float, int]] = {}

    for i in range(n_instances):
        seed = seed0 + i
        rng = Rng(seed).stream("grad-check")
        n = int(rng.integers(2, 7))
        d = int(rng.integers(2, 9))
        h = int(rng.integers(1, 3))
        y = int(rng.integers(1, 4))
        m = int(rng.integers(1, 6))
        g = rng.normal(0.0, 1.0, (n, d))

        kind = mask_kinds[i % 3]
        attn = AttentionParams(
            w_key=rng.normal(0.0, 0.6, (y, h, d)),
            w_query=rng.normal(0.0, 0.6, (y, h, d)),
            beta=float(rng.uniform(0.3, 2.0)),
            mask_mode=_random_mask_mode(kind, n, rng),
        )
        name = f"attention_grad[{kind}]"
        analytic = core.attention_grad(g, attn)
        fd = ad.finite_diff(lambda gg: core.attention_energy(gg, attn), g, fd_step)
        if corrupt == name:
            analytic = analytic + 1.0
        err = rel_err(analytic, -fd)
        if err > worst.get(name, (-1.0, 0))[0]:
            worst[name] = (err, seed)

        act = activations[i % 3]
        hop = HopfieldParams(xi=rng.normal(0.0, 0.6, (m, d)), activation=act)
        name = f"hopfield_grad[{type(act).__name__.lower()}]"
        analytic = core.hopfield_grad(g, hop)
        fd = ad.finite_diff(lambda gg: core.hopfield_energy(gg, hop), g, fd_step)
        if corrupt == name:
            analytic = analytic + 1.0
        err = rel_err(analytic, -fd)
        if err > worst.get(name, (-1.0, 0))[0]:
            worst[name] = (err, seed)

    return [
        CheckReport(name, err, seed, n_instances, tolerance)
        for name, (err, seed) in sorted(worst.items())
    ]


def _random_et_params(rng: np.random.Generator, n: int, d: int, kind: str) -> EtParams:
    return EtParams(
        norm=LayerNormParams(gamma=float(rng.uniform(0.5, 1.5)), delta=rng.normal(0, 0.3, d)),
        attn=AttentionParams(
            w_key=rng.normal(0, 0.4, (2, 2, d)),
            w_query=rng.normal(0, 0.4, (2, 2, d)),
            beta=float(rng.uniform(0.3, 1.5)),
            mask_mode=_random_mask_mode(kind, n, rng),
        ),
        hopfield=HopfieldParams(xi=rng.normal(0, 0.4, (3, d))),
    )


def check_bptt_image(
    tolerance: float = 1e-6,
    seed0: int = 0,
    n_steps: int = 3,
    fd_step: float = 1e-5,
    corrupt: str | None = None,
) -> list[CheckReport]:
    """Tape gradients of the full image-task loss vs. finite differences.

    Every parameter tensor (encoder, decoder, mask token, position bias,
    norms, attention, memory) is perturbed coordinate-wise; tiny dims keep
    this fast.
    """
    from .image import (
        image_loss_fn,
        image_params_from_tensors,
        image_params_to_tensors,
        init_image_params,
        make_mask_plan,
    )

    rng = Rng(seed0).stream("bptt-image")
    n_tokens, patch = 4, 6
    params = init_image_params(
        n_tokens=n_tokens,
        patch_size=patch,
        d=5,
        h=2,
        y=2,
        m=3,
        beta=0.8,
        alpha=0.1,
        n_steps=n_steps,
        k_h=1,
        k_w=patch,
        mask_mode=ExcludeSelf(),
        activation=Relu(),
        rng=rng,
        init_std=0.5,
    )
    patches = rng.normal(0, 1, (2, n_tokens, patch))
    plans = [make_mask_plan(n_tokens, 2, 1, rng) for _ in range(2)]
    replaced = np.stack([p.replaced_mask(n_tokens) for p in plans])
    occluded = np.stack([p.occluded_mask(n_tokens) for p in plans])

    tensors = image_params_to_tensors(params)
    _, tape = ad.record_forward(
        image_loss_fn, tensors, patches, replaced, occluded, params
    )
    grads = ad.backward(tape)
    if corrupt is not None:
        short = corrupt.removeprefix("image/")
        if corrupt.startswith("image/") and short in grads:
            grads[short] = grads[short] + 1.0

    reports = []
    for name in tensors:
        def loss_of(value, name=name):
            probe = dict(tensors)
            probe[name] = value
            p2 = image_params_from_tensors(probe, params)
            v, _ = ad.record_forward(
                image_loss_fn,
                image_params_to_tensors(p2),
                patches,
                replaced,
                occluded,
                p2,
            )
            return v

        fd = ad.finite_diff(loss_of, tensors[name], fd_step)
        reports.append(
            CheckReport(f"image/{name}", rel_err(grads[name], fd), seed0, 1, tolerance)
        )
    return reports


def check_bptt_graph(
    tolerance: float = 1e-6,
    seed0: int = 0,
    n_steps: int = 2,
    fd_step: float = 1e-5,
    corrupt: str | None = None,
) -> list[CheckReport]:
    """Tape gradients of the full graph-task loss vs. finite differences."""
    from .graph import (
        GraphInstance,
        graph_loss_fn,
        graph_params_from_tensors,
        graph_params_to_tensors,
        init_graph_params,
    )

    rng = Rng(seed0).stream("bptt-graph")
    n = 5
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [0, 4], [1, 3]])
    g = GraphInstance(
        n_nodes=n,
        edges=edges,
        features=rng.normal(0, 1, (n, 3)),
        labels=np.array([0, 1, 0, 0, 1]),
    )
    params = init_graph_params(
        g,
        d=4,
        h=2,
        y=2,
        m=3,
        beta=0.9,
        alpha=0.2,
        n_steps=n_steps,
        hidden=4,
        rng=rng,
        init_std=0.5,
    )
    train_idx = np.array([0, 1, 2, 4])
    tensors = graph_params_to_tensors(params)
    _, tape = ad.record_forward(graph_loss_fn, tensors, g, train_idx, params)
    grads = ad.backward(tape)
    if corrupt is not None:
        short = corrupt.removeprefix("graph/")
        if corrupt.startswith("graph/") and short in grads:
            grads[short] = grads[short] + 1.0

    reports = []
    for name in tensors:
        def loss_of(value, name=name):
            probe = dict(tensors)
            probe[name] = value
            p2 = graph_params_from_tensors(probe, params)
            v, _ = ad.record_forward(
                graph_loss_fn, graph_params_to_tensors(p2), g, train_idx, p2
            )
            return v

        fd = ad.finite_diff(loss_of, tensors[name], fd_step)
        reports.append(
            CheckReport(f"graph/{name}", rel_err(grads[name], fd), seed0, 1, tolerance)
        )
    return reports


def check_energy_descent(
    n_instances: int = 100,
    seed0: int = 0,
    n_steps: int = 12,
    alpha0: float = 0.1,
    slack: float = 1e-9,
) -> tuple[int, int]:
    """Count instances monotone at alpha0 and monotone after halving.

    Returns (monotone_at_alpha0, monotone_after_halving); the latter should
    equal n_instances.  Instances use training-scale weights, where the
    small-step regime is expected to hold.
    """
    mask_kinds = ("exclude_self", "include_self", "graph")
    at_alpha0 = 0
    after_halving = 0
    for i in range(n_instances):
        rng = Rng(seed0 + i).stream("descent-check")
        n = int(rng.integers(3, 9))
        d = int(rng.integers(4, 17))
        p = EtParams(
            norm=LayerNormParams(gamma=1.0, delta=np.zeros(d)),
            attn=AttentionParams(
                w_key=rng.normal(0, 0.02, (3, 2, d)),
                w_query=rng.normal(0, 0.02, (3, 2, d)),
                beta=core.default_beta(3),
                mask_mode=_random_mask_mode(mask_kinds[i % 3], n, rng),
            ),
            hopfield=HopfieldParams(xi=rng.normal(0, 0.02, (8, d))),
        )
        x0 = rng.normal(0, 1, (n, d))
        traj = core.et_forward(x0, p, alpha0, n_steps)
        e = np.array([b.e_total for _, b in traj])
        if (np.diff(e) <= slack).all():
            at_alpha0 += 1
            after_halving += 1
        else:
            try:
                core.find_monotone_alpha(x0, p, n_steps, alpha0, slack)
                after_halving += 1
            except Exception:
                pass
    return at_alpha0, after_halving


def run_verification(
    *,
    n_instances: int = 100,
    tolerance: float = 1e-6,
    seed: int = 0,
    fd_step: float = 1e-5,
    corrupt: str | None = None,
) -> list[CheckReport]:
    """The full gradient verification suite (energies + both task BPTTs)."""
    reports = check_energy_gradients(
        n_instances=n_instances,
        tolerance=tolerance,
        seed0=seed,
        fd_step=fd_step,
        corrupt=corrupt,
    )
    reports += check_bptt_image(
        tolerance=tolerance, seed0=seed, fd_step=fd_step, corrupt=corrupt
    )
    reports += check_bptt_graph(
        tolerance=tolerance, seed0=seed, fd_step=fd_step, corrupt=corrupt
    )
    return reports

"""Batch command-line interface.

Subcommands: verify-grad, train, eval, dump-energy, export-weights,
gen-data.  Exit codes: 0 success, 1 verification/assertion failure,
2 usage or configuration error.  ET_THREADS caps multi-seed parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import graph as gr
from . import image as im
from .checks import run_verification
from .config import RunConfig, format_resolved, load_config
from .data import (
    Rng,
    gen_synthetic_images,
    load_checkpoint,
    load_image_dataset,
    load_netpbm,
    save_checkpoint,
    save_image_dataset,
    save_netpbm,
)
from .errors import ConfigError, DivergenceError, EtError, FormatError
from .core import et_forward

Array = np.ndarray


def _fmt(x) -> str:
    """Full round-trip decimal formatting for CSV numbers."""
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(c) if isinstance(c, (str, int)) else _fmt(c) for c in row) + "\n")


def _threads() -> int:
    raw = os.environ.get("ET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _echo_config(cfg: RunConfig) -> None:
    print("# resolved configuration")
    print(format_resolved(cfg), end="")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Shared builders

def _image_params_template(cfg: RunConfig) -> im.ImageTaskParams:
    rng = Rng(cfg.seed).stream("image-init")
    return im.init_image_params(
        n_tokens=cfg.n_tokens,
        patch_size=cfg.patch_dim,
        d=cfg.d,
        h=cfg.h,
        y=cfg.y,
        m=cfg.m,
        beta=float(cfg.beta),
        alpha=float(cfg.alpha),
        n_steps=int(cfg.t),
        k_h=cfg.patch_size,
        k_w=cfg.patch_size,
        mask_mode=cfg.image_mask_mode(),
        activation=cfg.activation(),
        enable_attn=cfg.enable_attn,
        enable_hopfield=cfg.enable_hopfield,
        rng=rng,
        init_std=float(cfg.init_std),
    )


def _graph_init_kwargs(cfg: RunConfig) -> dict:
    return dict(
        d=cfg.d,
        h=cfg.h,
        y=cfg.y,
        m=cfg.m,
        beta=float(cfg.beta),
        alpha=float(cfg.alpha),
        n_steps=int(cfg.t),
        hidden=cfg.head_hidden,
        include_self=cfg.allow_self_attention,
        enable_attn=cfg.enable_attn,
        enable_hopfield=cfg.enable_hopfield,
        activation=cfg.activation(),
        init_std=float(cfg.init_std),
    )


def _load_images(cfg: RunConfig) -> Array:
    if cfg.data_dir:
        return load_image_dataset(cfg.data_dir)
    return gen_synthetic_images(
        cfg.seed, cfg.n_images, size=cfg.image_size, channels=cfg.channels
    )


def _load_graph(cfg: RunConfig) -> gr.GraphInstance:
    if cfg.data_dir:
        return gr.load_graph_dir(cfg.data_dir)
    return gr.gen_planted_anomaly_graph(
        cfg.seed,
        cfg.n_nodes,
        cfg.anomaly_rate,
        cfg.shift,
        n_communities=cfg.n_communities,
        n_features=cfg.f,
        p_in=cfg.p_in,
        p_out=cfg.p_out,
    )


def _require_image_checkpoint(tensors: dict) -> None:
    if "enc.kernel" not in tensors:
        raise ConfigError("checkpoint is not from the image task")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_verify_grad(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    _echo_config(cfg)
    corrupt = os.environ.get("ET_CORRUPT_GRAD") or None
    reports = run_verification(
        n_instances=cfg.fd_instances,
        tolerance=cfg.tolerance,
        seed=cfg.seed,
        fd_step=cfg.fd_step,
        corrupt=corrupt,
    )
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"FAILED: {names}", file=sys.stderr)
        return 1
    print(f"all {len(reports)} gradient checks passed")
    return 0


def _train_image(cfg: RunConfig, out: Path) -> int:
    images = _load_images(cfg)
    params = _image_params_template(cfg)
    train_cfg = im.ImageTrainConfig(
        epochs=int(cfg.epochs),
        batch_size=cfg.batch_size,
        n_occluded=cfg.n_occluded,
        n_replaced=cfg.n_replaced,
        lr=cfg.lr,
        b1=cfg.b1,
        b2=cfg.b2,
        weight_decay=float(cfg.weight_decay),
        grad_clip=cfg.grad_clip,
        warmup_steps=cfg.warmup_steps,
        seed=cfg.seed,
        max_steps=cfg.max_steps or None,
    )
    trained, history = im.train_image(images, params, train_cfg)
    save_checkpoint(im.image_params_to_tensors(trained), out / "checkpoint.bin")
    _write_csv(
        out / "train_log.csv",
        ["epoch", "loss"],
        [[row["epoch"], row["loss"]] for row in history],
    )
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'train_log.csv'}")
    return 0


def _train_graph(cfg: RunConfig, out: Path) -> int:
    g = _load_graph(cfg)
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    train_cfg = gr.GraphTrainConfig(
        epochs=int(cfg.epochs),
        lr=cfg.lr,
        b1=cfg.b1,
        b2=cfg.b2,
        weight_decay=float(cfg.weight_decay),
        grad_clip=cfg.grad_clip,
        warmup_steps=cfg.warmup_steps,
    )
    init_kwargs = _graph_init_kwargs(cfg)

    def one(seed):
        return gr.run_graph_seed(
            g, seed, train_ratio=cfg.train_ratio, init_kwargs=init_kwargs, cfg=train_cfg
        )

    workers = min(_threads(), len(seeds))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(seed) for seed in seeds]

    rows = []
    for k, (seed, (params, metrics, history)) in enumerate(zip(seeds, results)):
        _write_csv(
            out / f"train_log_seed{seed}.csv",
            ["epoch", "loss", "val_macro_f1", "val_auc"],
            [
                [r["epoch"], r["loss"], r["val_macro_f1"], r["val_auc"]]
                for r in history
            ],
        )
        if k == 0:
            save_checkpoint(gr.graph_params_to_tensors(params), out / "checkpoint.bin")
        rows.append([seed, "test", metrics["test_macro_f1"], metrics["test_auc"]])
    f1s = np.array([r[2] for r in rows])
    aucs = np.array([r[3] for r in rows])
    rows.append(["mean", "test", float(f1s.mean()), float(aucs.mean())])
    rows.append(["std", "test", float(f1s.std()), float(aucs.std())])
    _write_csv(out / "metrics.csv", ["seed", "split", "macro_f1", "auc"], rows)
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'metrics.csv'}")
    return 0


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    _echo_config(cfg)
    out = _out_dir(args)
    (out / "resolved.cfg").write_text(format_resolved(cfg))
    if cfg.task == "image":
        return _train_image(cfg, out)
    return _train_graph(cfg, out)


def cmd_eval(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    if args.checkpoint:
        overrides = dict(overrides or {})
        overrides["checkpoint"] = args.checkpoint
    cfg = load_config(args.config, overrides)
    _echo_config(cfg)
    if not cfg.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    tensors = load_checkpoint(cfg.checkpoint)
    out = _out_dir(args)
    if cfg.task == "image":
        _require_image_checkpoint(tensors)
        params = im.image_params_from_tensors(tensors, _image_params_template(cfg))
        images = _load_images(cfg)
        mse = im.eval_masked_mse(
            images,
            params,
            n_occluded=cfg.n_occluded,
            n_replaced=cfg.n_replaced,
            seed=cfg.seed,
            decode_at_min_energy=cfg.decode_at_min_energy,
        )
        print(f"masked_mse={_fmt(mse)}")
        _write_csv(out / "eval.csv", ["metric", "value"], [["masked_mse", mse]])
        return 0
    g = _load_graph(cfg)
    template = gr.init_graph_params(
        g, rng=Rng(cfg.seed).stream("graph-init"), **_graph_init_kwargs(cfg)
    )
    params = gr.graph_params_from_tensors(tensors, template)
    split = gr.make_split(g.n_nodes, cfg.train_ratio, Rng(cfg.seed).stream("graph-split"))
    probs = gr.graph_forward(g, params)
    f1 = gr.macro_f1(probs[split.test], g.labels[split.test])
    roc = gr.auc(probs[split.test], g.labels[split.test])
    print(f"test_macro_f1={_fmt(f1)} test_auc={_fmt(roc)}")
    _write_csv(
        out / "eval.csv",
        ["metric", "value"],
        [["test_macro_f1", f1], ["test_auc", roc]],
    )
    return 0


def cmd_dump_energy(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    if args.checkpoint:
        overrides = dict(overrides or {})
        overrides["checkpoint"] = args.checkpoint
    cfg = load_config(args.config, overrides)
    _echo_config(cfg)
    if not cfg.checkpoint:
        raise ConfigError("dump-energy requires --checkpoint")
    tensors = load_checkpoint(cfg.checkpoint)
    if cfg.task == "image":
        _require_image_checkpoint(tensors)
        params = im.image_params_from_tensors(tensors, _image_params_template(cfg))
        if args.input:
            image = load_netpbm(args.input)
        else:
            image = gen_synthetic_images(
                cfg.seed, 1, size=cfg.image_size, channels=cfg.channels
            )[0]
        plan = im.make_mask_plan(
            params.n_tokens,
            cfg.n_occluded,
            cfg.n_replaced,
            Rng(cfg.seed).stream("image-eval-masking"),
        )
        _, traj = im.reconstruct(image, plan, params)
    else:
        g = gr.load_graph_dir(args.input) if args.input else _load_graph(cfg)
        template = gr.init_graph_params(
            g, rng=Rng(cfg.seed).stream("graph-init"), **_graph_init_kwargs(cfg)
        )
        params = gr.graph_params_from_tensors(tensors, template)
        x0 = gr.embed_nodes(g, params)
        traj = et_forward(x0, params.et, params.alpha, params.n_steps)
    lines = ["step,energy_att,energy_hn,energy_total"]
    for step, (_, b) in enumerate(traj):
        lines.append(f"{step},{_fmt(b.e_att)},{_fmt(b.e_hn)},{_fmt(b.e_total)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args)
        (out / "energy.csv").write_text(text)
        print(f"wrote {out / 'energy.csv'}")
    else:
        print(text, end="")
    return 0


def cmd_export_weights(args) -> int:
    overrides = {"checkpoint": args.checkpoint} if args.checkpoint else None
    cfg = load_config(args.config, overrides)
    _echo_config(cfg)
    if not cfg.checkpoint:
        raise ConfigError("export-weights requires --checkpoint")
    tensors = load_checkpoint(cfg.checkpoint)
    _require_image_checkpoint(tensors)
    params = im.image_params_from_tensors(tensors, _image_params_template(cfg))
    grid = im.export_weights_as_patches(params, args.which)
    prefix = {"hopfield": "mem", "keys": "key", "queries": "query"}[args.which]
    out = _out_dir(args)
    for i, row in enumerate(grid.patches):
        patch = row.reshape(cfg.channels, params.k_h, params.k_w)
        save_netpbm(out / f"{prefix}_{i:04d}.{'pgm' if cfg.channels == 1 else 'ppm'}", patch)
    print(f"wrote {grid.patches.shape[0]} {prefix} patches to {out}")
    return 0


def cmd_gen_data(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    _echo_config(cfg)
    out = _out_dir(args)
    if cfg.task == "image":
        images = gen_synthetic_images(
            cfg.seed, cfg.n_images, size=cfg.image_size, channels=cfg.channels
        )
        save_image_dataset(out, images)
        print(f"wrote {cfg.n_images} images to {out}")
    else:
        g = _load_graph(cfg)
        gr.save_graph_dir(g, out)
        print(f"wrote graph with {g.n_nodes} nodes to {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="et", description="energy-descent transformer toolbench"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, which=False, inp=False):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint path")
        if which:
            p.add_argument(
                "--which",
                choices=("hopfield", "keys", "queries"),
                default="hopfield",
                help="weight family to export",
            )
        if inp:
            p.add_argument("--input", default=None, help="input image file or graph dir")

    common(sub.add_parser("verify-grad", help="finite-difference gradient suite"))
    common(sub.add_parser("train", help="train the configured task"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    common(
        sub.add_parser("dump-energy", help="per-step energy trajectory CSV"),
        checkpoint=True,
        inp=True,
    )
    common(
        sub.add_parser("export-weights", help="decode weight rows to image patches"),
        checkpoint=True,
        which=True,
    )
    common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    return parser


_COMMANDS = {
    "verify-grad": cmd_verify_grad,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-energy": cmd_dump_energy,
    "export-weights": cmd_export_weights,
    "gen-data": cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, EtError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

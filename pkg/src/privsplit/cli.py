"""Batch-mode command line: train, attack, eval, serve-edge/serve-trainer,
and regeneration of the accuracy table + reconstruction panel figure.

All randomness flows from --seed (default 42); metrics files are
line-oriented plain text so downstream checks need no parser.
"""

from __future__ import annotations

import argparse
import socket
import sys
from pathlib import Path

import numpy as np

from .activations import StepWiseConfig, relu, sigmoid, step_wise
from .datasets import export_image_grid, load_cifar10, load_mnist, tile_image_grid
from .errors import CapabilityError, PrivSplitError
from .figures import render_panel_figure
from .inversion import invert_conv_layer
from .network import (
    TrainConfig,
    architecture_hash,
    build_reference_model,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    split_reference_model,
    train_model,
)
from .protocol import SessionConfig
from .split import (
    edge_process,
    split_train_frozen,
    split_train_straight_through,
    trainer_process,
)
from .tensor import Tensor, conv2d

ACTIVATIONS = ("sigmoid", "tanh", "relu", "stepwise")
ATTACK_CHOICES = ("none",) + ACTIVATIONS
STEPWISE_SWEEP = (3, 5, 11, 21)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (name, name.replace("-idx", ".idx")):
        path = data_dir / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"{data_dir / name} not found")


def load_split(dataset: str, data_dir, split: str, limit: int | None):
    data_dir = Path(data_dir)
    if dataset == "mnist":
        images, labels = MNIST_FILES[split]
        return load_mnist(_find(data_dir, images), _find(data_dir, labels),
                          limit)
    paths = [_find(data_dir, n) for n in CIFAR_FILES[split]]
    return load_cifar10(paths, limit)


def train_config(args) -> TrainConfig:
    mode = {"frozen": "frozen-prefix",
            "straight-through": "straight-through"}[args.grad_mode]
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                       batch_size=args.batch, epochs=args.epochs,
                       seed=args.seed, stepwise_gradient_mode=mode)


def write_metrics(path: Path, history: list[dict]) -> None:
    lines = []
    for record in history:
        epoch = record.get("epoch", "-")
        for key in ("train_loss", "train_accuracy", "test_accuracy"):
            if key in record:
                lines.append(f"{epoch} {key} {record[key]!r}\n")
    path.write_text("".join(lines))


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def run_train(args) -> int:
    train_set = load_split(args.dataset, args.data_dir, "train", args.limit)
    test_set = load_split(args.dataset, args.data_dir, "test", args.limit)
    cfg = train_config(args)
    sw_cfg = StepWiseConfig("sigmoid", args.n, args.v) \
        if args.activation == "stepwise" else StepWiseConfig()
    model = build_reference_model(
        args.dataset, args.activation, seed=args.seed, stepwise_cfg=sw_cfg,
        grad_mode=cfg.stepwise_gradient_mode)

    if args.mode == "split":
        if args.activation != "stepwise":
            raise CapabilityError("split mode requires --activation stepwise")
        prefix, suffix = split_reference_model(model)
        session = SessionConfig(architecture_hash(model), args.dataset,
                                sw_cfg, cfg,
                                gradient_return=args.grad_mode == "straight-through")
        if args.grad_mode == "straight-through":
            history = split_train_straight_through(
                prefix, suffix, train_set, train_cfg=cfg, session=session)
        else:
            history = split_train_frozen(
                prefix, suffix, train_set, train_cfg=cfg, session=session,
                eval_set=test_set)
        model = prefix + suffix
    else:
        history = train_model(model, train_set, cfg, test_set=test_set)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.txt", history)
    save_checkpoint(model, out / "model.svw")
    final = history[-1]
    acc = final.get("test_accuracy", final.get("train_accuracy"))
    print(f"final accuracy {acc!r}")
    return 0


def run_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    test_set = load_split(args.dataset, args.data_dir, "test", args.limit)
    acc = evaluate(model, test_set)
    print(f"accuracy {acc!r}")
    return 0


# ---------------------------------------------------------------------------
# attack / figure
# ---------------------------------------------------------------------------

def _panel_tag(activation: str, n: int | None) -> str:
    return f"stepwise_n{n}" if activation == "stepwise" else activation


def run_attack(args) -> int:
    """Reconstruct inputs from first-layer outputs under each activation.

    Emits one metrics line per configuration plus original/reconstruction
    grids, and returns the per-configuration reports for reuse.
    """
    dataset = load_split(args.dataset, args.data_dir, "train", None)
    images = Tensor(dataset.images.array[:args.num_images])
    model = load_checkpoint(args.checkpoint)
    if model[0].kind != "conv":
        raise CapabilityError("checkpoint does not start with a conv layer")
    spec = model[0].conv_spec()
    raw = conv2d(images, spec)

    activations = [a.strip() for a in args.activation.split(",") if a.strip()]
    sweep = [int(n) for n in str(args.n).split(",")]
    configs: list[tuple[str, int | None]] = []
    for act in activations:
        if act not in ATTACK_CHOICES:
            raise CapabilityError(f"unknown attack activation {act!r}")
        if act == "stepwise":
            configs.extend(("stepwise", n) for n in sweep)
        else:
            configs.append((act, None))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_image_grid(images, out / "original.pgm"
                      if images.shape[1] == 1 else out / "original.ppm")

    reports = {}
    lines = []
    for act, n in configs:
        if act == "none":
            observed, undo = raw, None
        elif act == "sigmoid":
            observed, undo = Tensor(sigmoid(raw.array)), "sigmoid"
        elif act == "tanh":
            observed, undo = Tensor(np.tanh(raw.array)), "tanh"
        elif act == "relu":
            observed, undo = Tensor(relu(raw.array)), "relu"
        else:
            cfg = StepWiseConfig("sigmoid", n, args.v)
            observed, undo = Tensor(step_wise(raw.array, cfg)), cfg
        report = invert_conv_layer(spec, observed, undo, ground_truth=images)
        tag = _panel_tag(act, n)
        reports[tag] = report
        ext = "pgm" if images.shape[1] == 1 else "ppm"
        export_image_grid(Tensor(np.clip(report.reconstructed.array, 0, 1)),
                          out / f"recon_{tag}.{ext}")
        lines.append(f"{act} {n if n is not None else '-'} "
                     f"{report.mse!r} {report.psnr_db!r}\n")
        print(lines[-1], end="")
    (out / "attack_metrics.txt").write_text("".join(lines))
    return 0


def run_figure(args) -> int:
    """Regenerate the desk-scale accuracy table and 9-panel reconstruction
    figure in one directory."""
    train_set = load_split(args.dataset, args.data_dir, "train", args.limit)
    test_set = load_split(args.dataset, args.data_dir, "test", args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(args)

    # Accuracy table: exact sigmoid baseline vs step-wise sweep.
    table = []
    for act, n in [("sigmoid", None)] + [("stepwise", n) for n in STEPWISE_SWEEP]:
        sw_cfg = StepWiseConfig("sigmoid", n or 1, args.v)
        model = build_reference_model(args.dataset, act, seed=args.seed,
                                      stepwise_cfg=sw_cfg)
        history = train_model(model, train_set, cfg, test_set=test_set)
        acc = history[-1]["test_accuracy"]
        table.append(f"{act} {n if n is not None else '-'} {acc!r}\n")
        print(table[-1], end="")
    (out / "table.txt").write_text("".join(table))

    # Reconstruction panels from the seeded (frozen) first layer.
    model = build_reference_model(args.dataset, "stepwise", seed=args.seed)
    spec = model[0].conv_spec()
    images = Tensor(train_set.images.array[:args.num_images])
    raw = conv2d(images, spec)
    panel_defs = [("(a) original", "original", None, images),
                  ("(b) no activation", "none", None, None),
                  ("(c) sigmoid", "sigmoid", "sigmoid", None),
                  ("(d) tanh", "tanh", "tanh", None),
                  ("(e) relu", "relu", "relu", None)]
    for i, n in enumerate(STEPWISE_SWEEP):
        panel_defs.append((f"({chr(ord('f') + i)}) step-wise n={n}",
                           f"stepwise_n{n}",
                           StepWiseConfig("sigmoid", n, args.v), None))

    panels_dir = out / "panels"
    panels_dir.mkdir(exist_ok=True)
    ext = "pgm" if images.shape[1] == 1 else "ppm"
    figure_panels = []
    lines = []
    for label, tag, act, ready in panel_defs:
        if ready is not None:
            shown = ready
        else:
            if act is None:
                observed = raw
            elif act == "sigmoid":
                observed = Tensor(sigmoid(raw.array))
            elif act == "tanh":
                observed = Tensor(np.tanh(raw.array))
            elif act == "relu":
                observed = Tensor(relu(raw.array))
            else:
                observed = Tensor(step_wise(raw.array, act))
            report = invert_conv_layer(spec, observed, act, ground_truth=images)
            shown = Tensor(np.clip(report.reconstructed.array, 0.0, 1.0))
            lines.append(f"{tag} {report.mse!r} {report.psnr_db!r}\n")
        export_image_grid(shown, panels_dir / f"{label[1]}.{ext}")
        figure_panels.append((label, tile_image_grid(shown)))
    (out / "attack_metrics.txt").write_text("".join(lines))
    render_panel_figure(figure_panels, out / "reconstruction_panels.png")
    print(f"wrote {out / 'table.txt'} and {out / 'reconstruction_panels.png'}")
    return 0


# ---------------------------------------------------------------------------
# serve commands
# ---------------------------------------------------------------------------

def _parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise CapabilityError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


def _session_for(args, model) -> tuple[SessionConfig, StepWiseConfig, TrainConfig]:
    cfg = train_config(args)
    sw_cfg = StepWiseConfig("sigmoid", args.n, args.v)
    session = SessionConfig(architecture_hash(model), args.dataset, sw_cfg,
                            cfg, gradient_return=False)
    return session, sw_cfg, cfg


def run_serve_trainer(args) -> int:
    model = build_reference_model(args.dataset, "stepwise", seed=args.seed,
                                  stepwise_cfg=StepWiseConfig("sigmoid", args.n, args.v))
    session, _, cfg = _session_for(args, model)
    _, suffix = split_reference_model(model)
    host, port = _parse_endpoint(args.listen)
    with socket.create_server((host, port)) as server:
        print(f"trainer listening on {host}:{port}")
        conn, peer = server.accept()
        with conn:
            rd = conn.makefile("rb")
            wr = conn.makefile("wb")
            _, history = trainer_process(rd, suffix, cfg, session=session,
                                         reply_stream=wr)
            wr.flush()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.txt", history)
    save_checkpoint(suffix, out / "suffix.svw")
    return 0


def run_serve_edge(args) -> int:
    train_set = load_split(args.dataset, args.data_dir, "train", args.limit)
    test_set = load_split(args.dataset, args.data_dir, "test", args.limit)
    model = build_reference_model(args.dataset, "stepwise", seed=args.seed,
                                  stepwise_cfg=StepWiseConfig("sigmoid", args.n, args.v))
    session, sw_cfg, cfg = _session_for(args, model)
    prefix, _ = split_reference_model(model)
    host, port = _parse_endpoint(args.connect)
    with socket.create_connection((host, port)) as conn:
        wr = conn.makefile("wb")
        edge_process(train_set, prefix[0].conv_spec(), sw_cfg, wr,
                     train_cfg=cfg, session=session, eval_set=test_set)
        wr.flush()
    print("edge session complete")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *, data: bool = True):
    if data:
        p.add_argument("--dataset", choices=("mnist", "cifar10"),
                       default="mnist")
        p.add_argument("--data-dir", required=data)
        p.add_argument("--limit", type=int, default=None,
                       help="cap the number of samples per split")
    p.add_argument("--n", default=5, help="step-wise interval count")
    p.add_argument("--v", type=float, default=10.0,
                   help="step-wise clipping value")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--grad-mode", choices=("frozen", "straight-through"),
                   default="frozen")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privsplit",
        description="Layer-partitioned training with step-wise activations "
                    "and a reconstruction-attack auditor.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the reference CNN")
    _add_common(p)
    p.add_argument("--activation", choices=ACTIVATIONS, default="sigmoid")
    p.add_argument("--mode", choices=("monolithic", "split"),
                   default="monolithic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("attack", help="invert first-layer metadata")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--activation", default="none,sigmoid,tanh,relu,stepwise")
    p.add_argument("--num-images", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_attack, n="3,5,11,21")

    p = sub.add_parser("figure", help="regenerate table + panel figure")
    _add_common(p)
    p.add_argument("--num-images", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_figure)

    p = sub.add_parser("serve-trainer", help="run the remote trainer")
    _add_common(p, data=False)
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_serve_trainer)

    p = sub.add_parser("serve-edge", help="run the local edge")
    _add_common(p)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.set_defaults(func=run_serve_edge)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "n") and isinstance(args.n, str) and "," not in str(args.n):
        args.n = int(args.n)
    try:
        return args.func(args)
    except (PrivSplitError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

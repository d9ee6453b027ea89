"""Command-line entry point: kernel design, scaling, training, evaluation,
and activation-map export.

Heavy imports happen inside the command handlers so the thread cap from
--threads / DESIGN_THREADS can be applied before numpy loads its BLAS.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time


def _apply_threads(n: int | None) -> int:
    n = n or int(os.environ.get("DESIGN_THREADS", "0")) or os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_manifest(out_dir: str, command: str, seed: int, config_hash: str,
                    started: float, artifacts: list[str]) -> str:
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "artifacts": sorted(artifacts),
        "git_describe": _git_describe(),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _hash_args(args: dict) -> str:
    return hashlib.sha256(
        json.dumps(args, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _load_data(spec: dict):
    from . import dataio

    kind = spec.get("type", "synth")
    if kind == "synth":
        split = dataio.synth_dataset(
            spec.get("n", 256), classes=spec.get("classes", 2),
            seed=spec.get("seed", 0), size=spec.get("size", 32))
    elif kind in ("cifar10", "converted"):
        split = dataio.load_cifar10(spec["dir"])
    else:
        raise ValueError(f"unknown data type {kind!r}")
    if spec.get("n_per_class"):
        split = dataio.subset(split, spec["n_per_class"],
                              seed=spec.get("subset_seed", 0))
    return split


def cmd_design(args) -> int:
    from . import dataio, threshold_design

    started = time.time()
    split = dataio.load_cifar10(args.data)
    images = split.train
    if args.subset:
        images = dataio.subset(split, args.subset, seed=args.seed).train
    table = threshold_design.search(images, split.stats, k=args.k, d=args.d,
                                    n_kernels=args.kernels, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "tv_scores.csv")
    table.to_csv(csv_path)

    from .threshold_scale import half_gaussian_kmeans, save_kernel_json

    kernel_path = os.path.join(args.out, "kernel.json")
    q = half_gaussian_kmeans(table.best.kernel.levels.n, seed=args.seed)
    save_kernel_json(kernel_path, t=table.best.kernel, q=q)
    _write_manifest(args.out, "design", args.seed, _hash_args(vars(args)),
                    started, [csv_path, kernel_path])
    print(f"ranked {len(table)} candidates; best kernel "
          f"{table.best.kernel.entries.ravel().tolist()} "
          f"(tv {table.best.score:.3f}) -> {kernel_path}")
    return 0


def cmd_scale(args) -> int:
    from . import threshold_scale as ts

    started = time.time()
    doc = ts.load_kernel_json(args.kernel)
    t = ts.kernel_from_doc(doc)
    q = ts.half_gaussian_kmeans(t.levels.n, seed=args.seed)
    mode_map = {"2d": None, "3d-s": "shift", "3d-c": "complement"}
    if args.mode not in mode_map:
        print(f"error: unknown mode {args.mode!r}", file=sys.stderr)
        return 2
    if args.mode == "2d" or args.channels == 1:
        kernels = [t]
    else:
        kernels = ts.make_3d(t, args.channels, mode_map[args.mode])
    scaled = [ts.scale_kernel(kern, q, t.levels) for kern in kernels]
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "scaled.json")
    ts.save_kernel_json(out_path, t=t,
                        scaled=scaled[0] if len(scaled) == 1 else scaled,
                        mode=args.mode, channels=args.channels, q=q)
    _write_manifest(args.out, "scale", args.seed, _hash_args(vars(args)),
                    started, [out_path])
    print(f"scaled {len(scaled)} kernel(s) -> {out_path}")
    return 0


def cmd_train(args) -> int:
    from . import network

    started = time.time()
    with open(args.config) as fh:
        raw = json.load(fh)
    data_spec = raw.pop("data", {"type": "synth"})
    out_dir = raw.pop("out", None) or args.out or "train_out"
    errors = []
    try:
        config = network.ModelConfig(**raw)
    except (TypeError, ValueError) as exc:
        errors.append(str(exc))
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    split = _load_data(data_spec)
    os.makedirs(out_dir, exist_ok=True)

    def progress(epoch, report):
        e, tr, te, lo = report.rows[-1]
        print(f"epoch {e:3d}  loss {lo:.4f}  train {tr:.3f}  test {te:.3f}",
              flush=True)

    model, report, best_state = network.train(config, split, progress=progress)
    report_path = os.path.join(out_dir, "report.csv")
    report.to_csv(report_path)
    last_path = os.path.join(out_dir, "last.npz")
    network.save_checkpoint(model, last_path)
    best_path = os.path.join(out_dir, "best.npz")
    network.restore_state_bytes(model, best_state)
    network.save_checkpoint(model, best_path)
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump({"last_acc": report.rows[-1][2], "best_acc": report.best_acc,
                   "best_epoch": report.best_epoch}, fh, indent=2)
        fh.write("\n")
    _write_manifest(out_dir, "train", config.seed, config.hash(), started,
                    [report_path, last_path, best_path, summary_path])
    print(f"done: last {report.rows[-1][2]:.3f}, best {report.best_acc:.3f} "
          f"(epoch {report.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    from . import dataio, network

    started = time.time()
    model = network.load_checkpoint(args.checkpoint)
    if args.data:
        split = dataio.load_cifar10(args.data)
    else:
        split = _load_data({"type": "synth", "n": 256,
                            "classes": model.config.num_classes,
                            "size": model.config.image_size})
    x, y = network.to_arrays(split.test, split.stats)
    acc = network.evaluate(model, x, y)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    eval_path = os.path.join(out_dir, "eval.json")
    with open(eval_path, "w") as fh:
        json.dump({"accuracy": acc, "n_test": len(y),
                   "checkpoint": os.path.abspath(args.checkpoint)}, fh, indent=2)
        fh.write("\n")
    _write_manifest(out_dir, "eval", model.config.seed, model.config.hash(),
                    started, [eval_path])
    print(f"accuracy {acc:.4f} on {len(y)} images")
    return 0


def _rescale_u8(a):
    import numpy as np

    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_dump_activations(args) -> int:
    import numpy as np

    from . import network, pgm
    from .activation import tile
    from .network import DeSignAct
    from .threshold_design import DEFAULT_KERNEL_ENTRIES, build_levels
    from .threshold_scale import half_gaussian_kmeans

    started = time.time()
    model = network.load_checkpoint(args.checkpoint)
    img = pgm.read_ppm(args.image).astype(np.float32) / 255.0
    if img.shape[0] != model.config.in_channels:
        raise ValueError("image channel count does not match the model")
    x = img[None]  # batch of one
    # standardize per channel like the training pipeline
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    std = np.maximum(x.std(axis=(0, 2, 3), keepdims=True), 1e-8)
    xc, xs = model.inspect((x - mean) / std, args.layer)

    act = model.blocks[args.layer][2]
    if isinstance(act, DeSignAct):
        bases = act.base
    else:
        levels = build_levels(model.config.k)
        q = half_gaussian_kmeans(levels.n, seed=0)
        boundaries = np.asarray(q.boundaries)
        idx = np.vectorize(levels.index)(DEFAULT_KERNEL_ENTRIES)
        bases = [boundaries[idx]]

    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    _, c, h, w = xs.shape
    for ch in range(c):
        base = bases[ch % len(bases)]
        sign_map = np.where(xs[0, ch] >= 0, 255, 0).astype(np.uint8)
        design_map = np.where(xs[0, ch] - tile(base, h, w) >= 0, 255, 0).astype(np.uint8)
        for name, data in (("conv", _rescale_u8(xc[0, ch])),
                           ("sign", sign_map), ("design", design_map)):
            path = os.path.join(args.out, f"layer{args.layer}_ch{ch:03d}_{name}.pgm")
            pgm.write_pgm(path, data)
            artifacts.append(path)
    _write_manifest(args.out, "dump-activations", model.config.seed,
                    model.config.hash(), started, artifacts)
    print(f"wrote {len(artifacts)} maps for {c} channels to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditherbnn",
        description="Binary CNN engine with dithered-sign threshold design")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker/BLAS threads (env: DESIGN_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="brute-force threshold kernel search")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--kernels", type=int, default=8,
                   help="random binary kernels per image")
    p.add_argument("--subset", type=int, default=0,
                   help="images per class (0 = full train split)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("scale", help="scale integer levels to real thresholds")
    p.add_argument("--kernel", required=True, help="kernel JSON from design")
    p.add_argument("--mode", default="2d", choices=["2d", "3d-s", "3d-c"])
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("train", help="train a compact binary CNN")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", default=None, help="override output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-activations",
                       help="export conv/sign/design maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM image file")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_activations)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands:
    gen-data    write a synthetic dataset bundle
    train       run a training experiment from a JSON config (+flag overrides)
    report      probe | knn | similarity | correlation | memory
    replay      re-run a command from its manifest

Every command that writes to an output directory also writes manifest.json
there (resolved arguments plus input/output hashes), sufficient to replay it.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.
Set SHARDMAX_THREADS to cap BLAS/OpenMP threads (applied before numpy loads).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .errors import ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_HASHED_SUFFIXES = (".ltf", ".json", ".csv")


def _default_config_path() -> str:
    return os.path.join(os.path.dirname(__file__), "configs", "default.json")


def _write_manifest(out_dir: str, command: str, args: dict, inputs=(), skip=()):
    """Record the resolved invocation plus hashes of inputs and of the
    deterministic outputs under out_dir (timing-bearing files are skipped)."""
    from .kernels import backend
    from .util import sha256_file

    skip = set(skip) | {"manifest.json", "log.jsonl"}
    output_hashes = {}
    for root, _dirs, files in os.walk(out_dir):
        for fname in sorted(files):
            rel = os.path.relpath(os.path.join(root, fname), out_dir)
            if fname in skip or not fname.endswith(_HASHED_SUFFIXES):
                continue
            output_hashes[rel] = sha256_file(os.path.join(root, fname))
    input_hashes = {}
    for path in inputs:
        if os.path.isdir(path):
            for root, _dirs, files in os.walk(path):
                for fname in sorted(files):
                    full = os.path.join(root, fname)
                    input_hashes[full] = sha256_file(full)
        elif os.path.isfile(path):
            input_hashes[path] = sha256_file(path)
    manifest = {
        "command": command,
        "args": args,
        "version": __version__,
        "kernel_backend": backend(),
        "input_hashes": input_hashes,
        "output_hashes": output_hashes,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_checkpoint(path: str):
    from .encoder import Encoder
    from .sharding import load_shards

    enc_dir = os.path.join(path, "encoder")
    cls_dir = os.path.join(path, "classifier")
    if not os.path.isdir(enc_dir) or not os.path.isdir(cls_dir):
        raise DataError(f"{path}: expected encoder/ and classifier/ subdirectories")
    return Encoder.load(enc_dir), load_shards(cls_dir)


def _require_labels(dataset, what: str):
    if dataset.semantic_labels is None:
        raise DataError(f"{what} needs a dataset bundle with labels.ltf")


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args: dict) -> int:
    from .data import generate_synthetic, save_dataset

    if args["classes"] < 1 or args["per_class"] < 1 or args["dim"] < 1:
        raise ConfigError("--classes, --per-class, and --dim must be >= 1")
    if args["spread"] < 0:
        raise ConfigError("--spread must be >= 0")
    dataset = generate_synthetic(
        args["classes"], args["per_class"], args["dim"], args["spread"], args["seed"]
    )
    out = args["out"]
    save_dataset(out, dataset)
    _write_manifest(out, "gen-data", args)
    print(f"wrote {dataset.num_instances} instances "
          f"({args['classes']} hidden classes, dim {args['dim']}) to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

_TRAIN_OVERRIDES = {
    "workers": "workers",
    "alpha": "alpha",
    "topk": "top_k",
    "tau": "tau",
    "epochs": "total_epochs",
    "warmup_epochs": "warmup_epochs",
    "batch_size": "batch_size",
    "lr": "base_lr",
    "seed": "seed",
    "precision": "precision",
    "label_mode": "label_mode",
    "loss_variant": "loss_variant",
    "embed_dim": "embed_dim",
    "views": "views_per_instance",
    "checkpoint_every": "checkpoint_every",
}

_INIT_FLAGS = {
    "random": "random",
    "prior-fixed": "prior_fixed_bn",
    "prior-running": "prior_running_bn",
}


def _resolve_train_config(args: dict):
    import dataclasses

    from .trainer import TrainConfig

    path = args.get("config") or "default"
    if path == "default":
        path = _default_config_path()
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            config = TrainConfig.from_json(fh.read())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    updates = {}
    for flag, field in _TRAIN_OVERRIDES.items():
        if args.get(flag) is not None:
            updates[field] = args[flag]
    if args.get("init") is not None:
        updates["init_mode"] = _INIT_FLAGS[args["init"]]
    if args.get("hidden") is not None:
        updates["hidden_dims"] = tuple(int(h) for h in args["hidden"].split(",") if h)
    if args.get("sampled_classes") is not None:
        if args["sampled_classes"] > 0:
            updates["class_mode"] = "sampled"
            updates["sampled_classes"] = args["sampled_classes"]
        else:
            updates["class_mode"] = "full"
    if updates:
        config = dataclasses.replace(config, **updates)
        config.validate()
    return config


def cmd_train(args: dict) -> int:
    from .data import load_dataset
    from .trainer import train

    config = _resolve_train_config(args)   # config errors exit before compute
    dataset = load_dataset(args["data"])
    out = args["out"]
    os.makedirs(out, exist_ok=True)
    result = train(config, dataset.without_labels(), out_dir=out)
    _write_manifest(out, "train", args, inputs=[args["data"]])
    last = result.log.epochs[-1]
    print(f"trained {config.total_epochs} epochs on {dataset.num_instances} instances "
          f"(workers={config.workers}); final mean loss {last.mean_loss:.6f}")
    print(f"checkpoint: {result.log.final_checkpoint}")
    return EXIT_OK


# -- reports -------------------------------------------------------------------

def _report_out(args, name, payload_json, extra_files=()):
    out = args.get("out")
    written = []
    if out:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, f"{name}.json")
        with open(path, "w") as fh:
            fh.write(payload_json + "\n")
        written.append(path)
        for fname, text in extra_files:
            fpath = os.path.join(out, fname)
            with open(fpath, "w") as fh:
                fh.write(text)
            written.append(fpath)
    return written


def cmd_report_probe(args: dict) -> int:
    from .data import load_dataset
    from .evaluate import ProbeConfig, embed_dataset, linear_probe

    dataset = load_dataset(args["data"])
    _require_labels(dataset, "the linear probe")
    encoder, _shards = _load_checkpoint(args["checkpoint"])
    emb = embed_dataset(encoder, dataset.features, layer=args["features"])
    probe = linear_probe(
        emb, dataset.semantic_labels,
        ProbeConfig(epochs=args["probe_epochs"], lr=args["probe_lr"], seed=args["seed"]),
    )
    _report_out(args, "probe", probe.to_json())
    if args.get("out"):
        _write_manifest(args["out"], "report probe", args,
                        inputs=[args["data"], args["checkpoint"]])
    print(f"linear probe top-1: {probe.top1:.4f} "
          f"({probe.meta['test_size']} held-out samples, features={args['features']})")
    return EXIT_OK


def cmd_report_knn(args: dict) -> int:
    from .data import load_dataset
    from .evaluate import embed_dataset, knn_eval

    dataset = load_dataset(args["data"])
    _require_labels(dataset, "knn evaluation")
    encoder, _shards = _load_checkpoint(args["checkpoint"])
    emb = embed_dataset(encoder, dataset.features)
    top1 = knn_eval(emb, dataset.semantic_labels, args["k"])
    payload = json.dumps({"k": args["k"], "top1": top1}, sort_keys=True)
    _report_out(args, "knn", payload)
    if args.get("out"):
        _write_manifest(args["out"], "report knn", args,
                        inputs=[args["data"], args["checkpoint"]])
    print(f"{args['k']}-nn top-1: {top1:.4f}")
    return EXIT_OK


def cmd_report_similarity(args: dict) -> int:
    from .data import AugmentationConfig, load_dataset
    from .encoder import BNMode, Encoder, EncoderConfig
    from .prior import similarity_report

    dataset = load_dataset(args["data"])
    if args.get("checkpoint"):
        encoder, _ = _load_checkpoint(args["checkpoint"])
    else:
        config = EncoderConfig(
            input_dim=dataset.input_dim,
            hidden_dims=tuple(int(h) for h in args["hidden"].split(",") if h),
            embed_dim=args["embed_dim"],
        )
        encoder = Encoder.init_random(config, args["encoder_seed"])
    aug = AugmentationConfig(noise_sigma=args["aug_noise"])
    modes = {"running": BNMode.PRIOR_EXTRACT, "fixed": BNMode.EVAL}
    wanted = ["running", "fixed"] if args["bn_mode"] == "both" else [args["bn_mode"]]
    reports = {
        name: similarity_report(encoder, dataset, args["sample_size"], args["seed"],
                                aug, modes[name])
        for name in wanted
    }
    if len(reports) == 1:
        payload = next(iter(reports.values())).to_json()
    else:
        payload = json.dumps(
            {name: json.loads(r.to_json()) for name, r in reports.items()}, sort_keys=True
        )
    _report_out(args, "similarity", payload)
    if args.get("out"):
        _write_manifest(args["out"], "report similarity", args, inputs=[args["data"]])
    for name, rep in reports.items():
        print(f"{name}: mean_intra={rep.mean_intra:.4f} mean_inter={rep.mean_inter:.4f} "
              f"gap={rep.gap:.4f}")
    return EXIT_OK


def cmd_report_correlation(args: dict) -> int:
    from .data import load_dataset
    from .evaluate import ProbeConfig, correlation_report

    dataset = load_dataset(args["data"])
    _require_labels(dataset, "the correlation report")
    ckpt_root = os.path.join(args["run_dir"], "checkpoints")
    if not os.path.isdir(ckpt_root):
        raise DataError(f"{args['run_dir']}: no checkpoints/ directory")
    names = sorted(
        (d for d in os.listdir(ckpt_root) if d.startswith("epoch_")),
        key=lambda d: int(d.split("_")[1]),
    )
    if os.path.isdir(os.path.join(ckpt_root, "final")):
        names.append("final")
    if len(names) < 2:
        raise DataError("correlation needs at least two checkpoints "
                        "(train with --checkpoint-every)")
    checkpoints = []
    for name in names:
        encoder, shards = _load_checkpoint(os.path.join(ckpt_root, name))
        checkpoints.append((name, encoder, shards))
    report = correlation_report(checkpoints, dataset,
                                ProbeConfig(seed=args["seed"]))
    _report_out(args, "correlation", report.to_json(),
                extra_files=[("correlation.csv", report.to_csv())])
    if args.get("out"):
        _write_manifest(args["out"], "report correlation", args,
                        inputs=[args["data"], args["run_dir"]])
    print(f"rank correlation over {len(report.points)} checkpoints: "
          f"{report.coefficient:.4f}")
    return EXIT_OK


def cmd_report_memory(args: dict) -> int:
    from .memcost import GIB, CostScenario, capacity_report, sweep_max_classes

    scenario = CostScenario(
        num_classes=args["classes"],
        num_workers=args["workers"],
        embed_dim=args["embed_dim"],
        global_batch=args["batch"],
        bytes_per_scalar=args["scalar_bytes"],
        budget_bytes=int(args["budget_gib"] * GIB),
        encoder_params=args["encoder_params"],
    )
    report = capacity_report(scenario)
    extra = []
    if args.get("sweep_budgets"):
        budgets = [float(x) for x in args["sweep_budgets"].split(",") if x]
        extra.append(("memory_sweep.csv", sweep_max_classes(scenario, budgets)))
    _report_out(args, "memory", report.to_json(), extra_files=extra)
    if args.get("out"):
        _write_manifest(args["out"], "report memory", args)
    print(report.to_text(), end="")
    return EXIT_OK


# -- replay ----------------------------------------------------------------------

def cmd_replay(args: dict) -> int:
    path = args["manifest"]
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    command = manifest.get("command")
    replay_args = dict(manifest.get("args", {}))
    if args.get("out"):
        replay_args["out"] = args["out"]
    handler = _DISPATCH.get(command)
    if handler is None:
        raise ConfigError(f"manifest names unknown command {command!r}")
    print(f"replaying: {command}")
    return handler(replay_args)


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "report probe": cmd_report_probe,
    "report knn": cmd_report_knn,
    "report similarity": cmd_report_similarity,
    "report correlation": cmd_report_correlation,
    "report memory": cmd_report_memory,
}


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shardmax",
        description="instance-classification pretraining on a simulated sharded softmax",
    )
    parser.add_argument("--version", action="version", version=f"shardmax {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset bundle")
    g.add_argument("--classes", type=int, required=True, help="hidden semantic classes")
    g.add_argument("--per-class", type=int, required=True, dest="per_class")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--spread", type=float, default=0.25, help="within-class noise scale")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train from a config JSON (flags override)")
    t.add_argument("--config", default=None, help="path to TrainConfig JSON, or 'default'")
    t.add_argument("--data", required=True, help="dataset bundle directory")
    t.add_argument("--out", required=True, help="output/run directory")
    t.add_argument("--workers", type=int, default=None)
    t.add_argument("--init", choices=sorted(_INIT_FLAGS), default=None)
    t.add_argument("--alpha", type=float, default=None)
    t.add_argument("--topk", type=int, default=None)
    t.add_argument("--tau", type=float, default=None)
    t.add_argument("--sampled-classes", type=int, default=None, dest="sampled_classes",
                   help="restrict softmax to M sampled classes (0 = full)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--warmup-epochs", type=int, default=None, dest="warmup_epochs")
    t.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--precision", choices=("f32", "f64"), default=None)
    t.add_argument("--label-mode", choices=("onehot", "smoothed"), default=None,
                   dest="label_mode")
    t.add_argument("--loss-variant", choices=("weighted_prob", "cross_entropy"),
                   default=None, dest="loss_variant")
    t.add_argument("--embed-dim", type=int, default=None, dest="embed_dim")
    t.add_argument("--hidden", default=None, help="comma-separated hidden widths")
    t.add_argument("--views", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")

    r = sub.add_parser("report", help="evaluation and analysis reports")
    rs = r.add_subparsers(dest="report_kind", required=True)

    rp = rs.add_parser("probe", help="linear probe on frozen embeddings")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--out", default=None)
    rp.add_argument("--features", choices=("head", "backbone"), default="head")
    rp.add_argument("--probe-epochs", type=int, default=20, dest="probe_epochs")
    rp.add_argument("--probe-lr", type=float, default=0.5, dest="probe_lr")
    rp.add_argument("--seed", type=int, default=0)

    rk = rs.add_parser("knn", help="leave-one-out kNN evaluation")
    rk.add_argument("--checkpoint", required=True)
    rk.add_argument("--data", required=True)
    rk.add_argument("--k", type=int, default=5)
    rk.add_argument("--out", default=None)

    rsim = rs.add_parser("similarity", help="intra/inter view similarity diagnostic")
    rsim.add_argument("--data", required=True)
    rsim.add_argument("--checkpoint", default=None,
                      help="optional; defaults to a fresh random encoder")
    rsim.add_argument("--hidden", default="64,64")
    rsim.add_argument("--embed-dim", type=int, default=64, dest="embed_dim")
    rsim.add_argument("--encoder-seed", type=int, default=0, dest="encoder_seed")
    rsim.add_argument("--sample-size", type=int, default=256, dest="sample_size")
    rsim.add_argument("--seed", type=int, default=0)
    rsim.add_argument("--aug-noise", type=float, default=0.1, dest="aug_noise")
    rsim.add_argument("--bn-mode", choices=("running", "fixed", "both"),
                      default="running", dest="bn_mode")
    rsim.add_argument("--out", default=None)

    rc = rs.add_parser("correlation", help="instance vs semantic accuracy over checkpoints")
    rc.add_argument("--run-dir", required=True, dest="run_dir")
    rc.add_argument("--data", required=True)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--out", default=None)

    rm = rs.add_parser("memory", help="replicated vs sharded capacity model")
    rm.add_argument("--classes", type=int, required=True)
    rm.add_argument("--workers", type=int, required=True)
    rm.add_argument("--embed-dim", type=int, default=128, dest="embed_dim")
    rm.add_argument("--batch", type=int, default=4096)
    rm.add_argument("--scalar-bytes", type=int, default=4, dest="scalar_bytes")
    rm.add_argument("--budget-gib", type=float, default=32.0, dest="budget_gib")
    rm.add_argument("--encoder-params", type=int, default=0, dest="encoder_params")
    rm.add_argument("--sweep-budgets", default=None, dest="sweep_budgets",
                    help="comma-separated GiB budgets for a capacity-curve CSV")
    rm.add_argument("--out", default=None)

    rep = sub.add_parser("replay", help="re-run a command from its manifest")
    rep.add_argument("manifest")
    rep.add_argument("--out", default=None, help="redirect outputs")

    return parser


def _apply_thread_cap():
    cap = os.environ.get("SHARDMAX_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = vars(ns)
    command = args.pop("command")
    if command == "report":
        command = f"report {args.pop('report_kind')}"
    if command == "replay":
        handler = cmd_replay
    else:
        handler = _DISPATCH[command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

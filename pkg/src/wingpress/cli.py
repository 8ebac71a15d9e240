"""Batch command-line surface: gen-data, pretrain, train, predict, evaluate.

Each stage consumes the previous stage's files; every run is a pure
function of its arguments and seed. Exit codes: 0 ok, 2 bad
configuration, 3 I/O failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .datasets import Dataset, SyntheticOracleConfig, build_splits, default_specs, \
    generate_wing_mesh, load_dataset, save_dataset
from .graph import graph_from_mesh, load_mesh, save_mesh
from .metrics import evaluate_series
from .model import Autoencoder, ModelConfig, PressureNet, Normalizer, \
    integrate_pretrained, load_checkpoint, rollout, save_checkpoint
from .reduction import SelectionConfig, build_hierarchy, load_hierarchy, \
    save_hierarchy
from .training import AugmentConfig, LossConfig, TrainConfig, TrainingDiverged, \
    default_refs, pretrain_autoencoder, train_bptt

KEEP_RATIOS = (0.33, 0.336)


def _load_split(data_dir: Path, split: str) -> List[Dataset]:
    out = []
    for manifest in sorted(data_dir.glob("*.json")):
        if manifest.name in ("mesh.json",):
            continue
        with open(manifest) as fh:
            meta = json.load(fh)
        if isinstance(meta, dict) and meta.get("split") == split:
            out.append(load_dataset(manifest.with_suffix("")))
    if not out:
        raise FileNotFoundError(f"no {split} datasets under {data_dir}")
    return out


def _load_named(data_dir: Path, name: str) -> Dataset:
    stem = data_dir / name
    if not stem.with_suffix(".json").exists():
        raise FileNotFoundError(f"dataset {name!r} not found under {data_dir}")
    return load_dataset(stem)


def _model_config(args) -> ModelConfig:
    return ModelConfig(temporal=args.temporal, armax=(args.mode == "armax"),
                       scale=args.scale)


def _hierarchy_for(args, data_dir: Path, mesh, graph, train_sets):
    stem = Path(args.hierarchy) if args.hierarchy else None
    if stem and stem.with_suffix(".json").exists():
        return load_hierarchy(stem)
    configs = [SelectionConfig(KEEP_RATIOS[0], seed=args.seed),
               SelectionConfig(KEEP_RATIOS[1], seed=args.seed + 1)]
    fields = np.concatenate([ds.cp for ds in train_sets])
    return build_hierarchy(mesh, fields, configs, graph=graph)


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = generate_wing_mesh(args.span_panels, args.chord_panels)
    save_mesh(mesh, out_dir / "mesh.json")
    oracle = SyntheticOracleConfig()
    specs = default_specs(duration=args.duration, dt=args.dt)
    datasets = build_splits(specs, oracle, mesh, mesh_path="mesh.json")
    for ds in datasets:
        save_dataset(ds, out_dir / ds.name)
    print(f"wrote mesh ({mesh.n_nodes} nodes) and {len(datasets)} datasets "
          f"to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = load_mesh(data_dir / "mesh.json")
    graph = graph_from_mesh(mesh)
    train_sets = _load_split(data_dir, "train")
    configs = [SelectionConfig(KEEP_RATIOS[0], seed=args.seed),
               SelectionConfig(KEEP_RATIOS[1], seed=args.seed + 1)]
    fields = np.concatenate([ds.cp for ds in train_sets])
    hierarchy = build_hierarchy(mesh, fields, configs, graph=graph)
    save_hierarchy(hierarchy, out_dir / "hierarchy", configs)
    normalizer = Normalizer.from_training(train_sets, mesh.points)
    cfg = ModelConfig(scale=args.scale)
    ae = Autoencoder(cfg, mesh, hierarchy, seed=args.seed,
                     normalizer=normalizer, graph=graph)
    snapshots = np.concatenate([ds.cp[::args.snapshot_stride] for ds in train_sets])
    history = pretrain_autoencoder(ae, snapshots, AugmentConfig(),
                                   TrainConfig(epochs=args.epochs, seed=args.seed))
    np.save(out_dir / "ae_history.npy", np.asarray(history))
    ae._net.normalizer = normalizer
    save_checkpoint(ae._net, out_dir / "ae.ckpt", seed=args.seed)
    print(f"autoencoder MAE {history[0]:.5f} -> {history[-1]:.5f} "
          f"over {len(history)} epochs; hierarchy sizes {hierarchy.sizes}")
    return 0


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = load_mesh(data_dir / "mesh.json")
    graph = graph_from_mesh(mesh)
    train_sets = _load_split(data_dir, "train")
    hierarchy = _hierarchy_for(args, data_dir, mesh, graph, train_sets)
    config = _model_config(args)
    normalizer = Normalizer.from_training(train_sets, mesh.points)
    model = PressureNet(config, mesh, hierarchy, seed=args.seed,
                        normalizer=normalizer, graph=graph)
    if args.init_ae:
        ae_net = load_checkpoint(args.init_ae, mesh, hierarchy, graph=graph)
        copied = sum(
            1 for name in model.params
            if _copy_ae_param(model, ae_net, name))
        print(f"initialized {copied} arrays from the pre-trained autoencoder")
    history = train_bptt(model, train_sets,
                         TrainConfig(epochs=args.epochs, seed=args.seed,
                                     learning_rate=args.learning_rate),
                         LossConfig(),
                         log_path=str(out_dir / "train_log.csv"))
    save_checkpoint(model, out_dir / "model.ckpt", seed=args.seed)
    print(f"loss {history[0]:.6f} -> {history[-1]:.6f} over {len(history)} epochs")
    return 0


def _copy_ae_param(model: PressureNet, ae_net: PressureNet, name: str) -> bool:
    source = "enc_b." + name[len("enc_a."):] if name.startswith("enc_a.") else name
    if source in ae_net.params and ae_net.params[source].shape == model.params[name].shape \
            and source.startswith(("enc_b.", "dec.")):
        model.params[name][...] = ae_net.params[source]
        return True
    return False


def cmd_predict(args) -> int:
    data_dir = Path(args.data)
    mesh = load_mesh(data_dir / "mesh.json")
    graph = graph_from_mesh(mesh)
    hierarchy = load_hierarchy(Path(args.hierarchy))
    model = load_checkpoint(args.checkpoint, mesh, hierarchy, graph=graph)
    ds = _load_named(data_dir, args.signal)
    mode = "armax_teacher_then_free" if model.config.armax else "feedforward"
    preds, start = rollout(model, ds, mode, teacher_fraction=args.teacher_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {"signal": ds.name, "n_nodes": preds.shape[1],
              "frame_count": preds.shape[0], "start_index": start, "dt": ds.dt}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(out, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(preds.astype("<f8").tobytes())
    print(f"wrote {preds.shape[0]} predicted frames to {out}")
    return 0


def load_predictions(path):
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        preds = np.frombuffer(fh.read(), dtype="<f8").reshape(
            header["frame_count"], header["n_nodes"])
    return header, preds


def cmd_evaluate(args) -> int:
    data_dir = Path(args.data)
    mesh = load_mesh(data_dir / "mesh.json")
    header, preds = load_predictions(args.predictions)
    ds = _load_named(data_dir, header["signal"])
    start = header["start_index"]
    true = ds.cp[start:start + preds.shape[0]]
    report = evaluate_series(ds.name, preds, true, mesh, refs=default_refs(mesh))
    out_stem = Path(args.out)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    report.save(out_stem)
    print(f"{ds.name}: MAPE {report.mape:.4f}%  R2 {report.r2:.6f}  "
          f"RMSE {report.rmse:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wingpress",
        description="surface-pressure surrogate pipeline (batch commands)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate mesh + synthetic signal corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--span-panels", type=int, default=19)
    g.add_argument("--chord-panels", type=int, default=19)
    g.add_argument("--duration", type=float, default=2.0)
    g.add_argument("--dt", type=float, default=2e-3)
    g.add_argument("--seed", type=int, default=42)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="build hierarchy and pre-train the AE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=16)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--snapshot-stride", type=int, default=4)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train a model on the training split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("feedforward", "armax"), default="feedforward")
    t.add_argument("--temporal", choices=("gru", "lstm", "attn", "stgcn"),
                   default="stgcn")
    t.add_argument("--scale", type=int, default=16)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--learning-rate", type=float, default=0.001)
    t.add_argument("--hierarchy", default=None)
    t.add_argument("--init-ae", default=None)
    t.add_argument("--seed", type=int, default=42)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="roll a trained model over a signal")
    r.add_argument("--data", required=True)
    r.add_argument("--signal", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--hierarchy", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--teacher-fraction", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"bad configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner.

Subcommands: train-source, transfer, eval, sweep, report. Every run
directory receives the resolved config, a manifest with the seeds, the
checkpoints, and CSV metrics; sweeps additionally emit an SVG plot
rendered from the sweep CSV.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from .attacks import AttackConfig, robust_accuracy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import echo_config, load_config, resolve_config
from .data import Dataset, load_cifar_binary, load_idx, stratified_subset, synth_blobs, synth_patterns
from .errors import CheckpointError, ConfigError, DataError, NumericsError, ShapeError
from .layers import build_network
from .reports import append_metrics, consolidate_report, plot_sweep, write_sweep_csv
from .rng import RngState
from .training import (
    FDMConfig,
    Schedule,
    TrainConfig,
    train_adversarial,
    train_source_cartl,
    train_standard,
)
from .transfer import BnPolicy, TransferConfig, finetune


def _load_split(data_cfg: dict, split: str) -> Dataset:
    fmt = data_cfg["format"]
    seed = data_cfg["seed"]
    if fmt == "patterns":
        per = data_cfg["per_class"] if split == "train" else data_cfg["test_per_class"]
        ds = synth_patterns(
            data_cfg["class_ids"], per, size=data_cfg["size"], noise=data_cfg["noise"],
            robust_amp=data_cfg["robust_amp"], fragile_amp=data_cfg["fragile_amp"],
            code_pixels=data_cfg["code_pixels"], code_noise=data_cfg["code_noise"],
            seed=seed, world_seed=data_cfg["world_seed"], split=split,
        )
    elif fmt == "blobs":
        per = data_cfg["per_class"] if split == "train" else data_cfg["test_per_class"]
        ds = synth_blobs(data_cfg["classes"], per, data_cfg["dims"], data_cfg["separation"],
                         seed=seed, split=split)
    elif fmt == "idx":
        ds = load_idx(data_cfg[f"{split}_images"], data_cfg[f"{split}_labels"], split)
    else:
        ds = load_cifar_binary(data_cfg[split], split)
    if split == "train" and data_cfg["fraction"] < 1.0:
        ds = stratified_subset(ds, data_cfg["fraction"], seed)
    return ds


def _check_arch_vs_data(arch: dict, ds: Dataset):
    if tuple(arch["input_shape"]) != ds.input_shape:
        raise ConfigError(
            f"arch.input_shape {arch['input_shape']} != dataset shape {list(ds.input_shape)}"
        )
    if arch["classes"] != ds.num_classes:
        raise ConfigError(f"arch.classes {arch['classes']} != dataset classes {ds.num_classes}")


def _schedule_from(section: dict, epochs: int) -> Schedule:
    return Schedule(base_lr=section["base_lr"], milestones=tuple(section["milestones"]),
                    decay=section["decay"], total_epochs=max(epochs, 1))


def _attack_from(section: dict) -> AttackConfig:
    return AttackConfig(eps=section["eps"], alpha=section["alpha"], steps=section["steps"],
                        random_start=section.get("random_start", True))


def _prepare_out(cfg: dict, out_flag: str | None, command: str) -> str:
    out = out_flag or cfg.get("output", {}).get("dir")
    if not out:
        raise ConfigError(f"{command} needs an output directory (--out or config output.dir)")
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out_dir: str, cfg: dict, command: str, extra: dict | None = None):
    manifest = {
        "command": command,
        "package_version": __version__,
        "seed": cfg["seed"],
        "data_seed": cfg.get("data", {}).get("seed"),
        "rng_streams": ["init", "head", "batches", "attack", "spectral", "eval-attack"],
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _eval_into(out_dir: str, cfg: dict, net, ds_test: Dataset, phase: str = "eval") -> dict:
    t0 = time.perf_counter()
    att = _attack_from(cfg["eval"])
    rng = RngState(cfg["seed"], "eval-attack")
    rep = robust_accuracy(net, ds_test.images, ds_test.labels, att, rng=rng,
                          batch_size=cfg["eval"]["batch_size"])
    row = {
        "run_id": os.path.basename(os.path.normpath(out_dir)),
        "phase": phase,
        "epoch": "",
        "clean_acc": repr(rep.clean_acc),
        "robust_acc": repr(rep.robust_acc),
        "clean_loss": repr(rep.clean_loss),
        "adv_loss": repr(rep.adv_loss),
        "penalty": "",
        "wall_clock": f"{time.perf_counter() - t0:.3f}",
    }
    append_metrics(os.path.join(out_dir, "metrics.csv"), [row])
    return {"clean_acc": rep.clean_acc, "robust_acc": rep.robust_acc,
            "clean_loss": rep.clean_loss, "adv_loss": rep.adv_loss}


def cmd_train_source(cfg: dict, out_dir: str) -> str:
    ds = _load_split(cfg["data"], "train")
    _check_arch_vs_data(cfg["arch"], ds)
    echo_config(cfg, os.path.join(out_dir, "config.json"))
    src = cfg["source"]
    net = build_network(cfg["arch"], cfg["seed"])
    run = TrainConfig(epochs=src["epochs"], batch_size=src["batch_size"],
                      schedule=_schedule_from(src["schedule"], src["epochs"]),
                      seed=cfg["seed"], csv_path=os.path.join(out_dir, "train_source.csv"))
    if src["mode"] == "standard":
        train_standard(net, ds.images, ds.labels, run)
    elif src["mode"] == "at":
        train_adversarial(net, ds.images, ds.labels, _attack_from(src["attack"]), run)
    else:
        fdm = FDMConfig(lam=src["lambda"], k=src["k"])
        train_source_cartl(net, ds.images, ds.labels, _attack_from(src["attack"]), fdm, run)
    meta = {
        "arch": cfg["arch"],
        "mode": src["mode"],
        "seed": cfg["seed"],
        "attack": src["attack"],
        "lambda": src.get("lambda"),
        "k": src.get("k"),
        "beta": None,
        "bn_policy": None,
    }
    ckpt = os.path.join(out_dir, "source.ckpt")
    save_checkpoint(net, meta, ckpt)
    _write_manifest(out_dir, cfg, "train-source", {"source_mode": src["mode"]})
    return ckpt


def cmd_transfer(cfg: dict, source_ckpt: str, out_dir: str) -> str:
    source, smeta = load_checkpoint(source_ckpt)
    if "arch" in cfg and cfg["arch"] != smeta["arch"]:
        raise ConfigError(
            f"config arch {cfg['arch']} incompatible with checkpoint arch {smeta['arch']}"
        )
    ds = _load_split(cfg["data"], "train")
    tr = cfg["transfer"]
    if ds.input_shape != tuple(smeta["arch"]["input_shape"]):
        raise ConfigError(
            f"target data shape {list(ds.input_shape)} incompatible with checkpoint "
            f"input shape {smeta['arch']['input_shape']}"
        )
    if tr["mode"] == "neft" and smeta.get("mode") == "at_fdm" and smeta.get("k") != tr["k"]:
        print(f"warning: transfer k={tr['k']} differs from the source feature split k={smeta.get('k')}",
              file=sys.stderr)
    echo_config(cfg, os.path.join(out_dir, "config.json"))
    policy = BnPolicy(extractor_stats=tr["bn_stats"], submodel_affine=tr["bn_affine"])
    tcfg = TransferConfig(mode=tr["mode"], k=tr["k"], beta=tr["beta"], lambda_d=tr["lambda_d"],
                          bn_policy=policy, reinit_head=tr["reinit_head"])
    run = TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"],
                      schedule=_schedule_from(tr["schedule"], tr["epochs"]),
                      seed=cfg["seed"], csv_path=os.path.join(out_dir, "transfer.csv"))
    result = finetune(source, ds.images, ds.labels, tcfg, run, classes=ds.num_classes)
    applied_policy = {
        "extractor_stats": tr["bn_stats"],
        "submodel_affine": "frozen" if tr["mode"] == "neft" else tr["bn_affine"],
    }
    meta = {
        "arch": result.net.arch,
        "mode": tr["mode"],
        "seed": cfg["seed"],
        "attack": None,
        "lambda_d": tr["lambda_d"],
        "k": tr["k"],
        "beta": tr["beta"] if tr["mode"] == "neft" else None,
        "bn_policy": applied_policy,
        "source_checkpoint": os.path.abspath(source_ckpt),
        "source_mode": smeta.get("mode"),
    }
    ckpt = os.path.join(out_dir, "target.ckpt")
    save_checkpoint(result.net, meta, ckpt)
    if result.spectral_report:
        with open(os.path.join(out_dir, "spectral.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["layer", "sigma_power", "baked_norm_svd", "degenerate"])
            w.writeheader()
            for row in result.spectral_report:
                w.writerow(row)
    _write_manifest(out_dir, cfg, "transfer", {
        "source_mode": smeta.get("mode"),
        "transfer_mode": tr["mode"],
        "bn_policy_applied": applied_policy,
    })
    return ckpt


def cmd_eval(cfg: dict, ckpt_path: str, out_dir: str) -> dict:
    net, meta = load_checkpoint(ckpt_path)
    ds = _load_split(cfg["data"], "test")
    if ds.input_shape != tuple(meta["arch"]["input_shape"]):
        raise ConfigError(
            f"eval data shape {list(ds.input_shape)} incompatible with checkpoint arch"
        )
    echo_config(cfg, os.path.join(out_dir, "config.json"))
    summary = _eval_into(out_dir, cfg, net, ds)
    manifest_extra = {
        "checkpoint": os.path.abspath(ckpt_path),
        "source_mode": meta.get("source_mode") or meta.get("mode"),
    }
    if meta.get("source_mode"):
        manifest_extra["transfer_mode"] = meta.get("mode")
    _write_manifest(out_dir, cfg, "eval", manifest_extra)
    print(f"clean_acc={summary['clean_acc']:.4f} robust_acc={summary['robust_acc']:.4f} "
          f"(eps={cfg['eval']['eps']:.5f}, steps={cfg['eval']['steps']})")
    return summary


def _sweep_value_config(cfg: dict, axis: str, value) -> dict:
    sub = json.loads(json.dumps(cfg))  # deep copy of plain JSON data
    if axis == "fraction":
        sub["data"]["fraction"] = value
    elif axis == "k":
        sub["transfer"]["k"] = int(value)
    else:
        sub["transfer"][axis] = value
    sub.pop("sweep", None)
    return sub


def _run_sweep_point(args) -> dict:
    cfg, axis, value, source_ckpt, point_dir = args
    cfg = resolve_config(cfg, need=_NEED["transfer"])
    os.makedirs(point_dir, exist_ok=True)
    ckpt = cmd_transfer(cfg, source_ckpt, point_dir)
    net, _ = load_checkpoint(ckpt)
    ds_test = _load_split(cfg["data"], "test")
    summary = _eval_into(point_dir, cfg, net, ds_test)
    return {
        "axis": axis,
        "value": value,
        "clean_acc": repr(summary["clean_acc"]),
        "robust_acc": repr(summary["robust_acc"]),
        "clean_loss": repr(summary["clean_loss"]),
        "adv_loss": repr(summary["adv_loss"]),
        "run_id": os.path.basename(point_dir),
    }


def cmd_sweep(cfg: dict, source_ckpt: str, out_dir: str, workers: int = 1) -> str:
    axis = cfg["sweep"]["axis"]
    values = cfg["sweep"]["values"]
    echo_config(cfg, os.path.join(out_dir, "config.json"))
    _write_manifest(out_dir, cfg, "sweep", {"axis": axis, "values": values})
    tasks = []
    for value in values:
        sub = _sweep_value_config(cfg, axis, value)
        point_dir = os.path.join(out_dir, f"{axis}_{value}")
        tasks.append((sub, axis, value, source_ckpt, point_dir))
    rows, failure = [], None
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_sweep_point, t) for t in tasks]
            for fut in futures:
                try:
                    rows.append(fut.result())
                except Exception as e:  # noqa: BLE001 - partial results must be preserved
                    failure = e
                    break
    else:
        for t in tasks:
            try:
                rows.append(_run_sweep_point(t))
            except Exception as e:  # noqa: BLE001
                failure = e
                break
    csv_path = os.path.join(out_dir, "sweep.csv")
    write_sweep_csv(csv_path, rows)
    if rows:
        plot_sweep(csv_path, os.path.join(out_dir, f"sweep_{axis}.svg"))
    if failure is not None:
        raise failure
    return csv_path


def cmd_report(run_dir: str, out_dir: str | None = None) -> list[dict]:
    if not os.path.isdir(run_dir):
        raise DataError(f"report: {run_dir} is not a directory")
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    table = consolidate_report(run_dir, os.path.join(out_dir, "report.csv"),
                               os.path.join(out_dir, "report.svg"))
    header = f"{'source':>10} {'transfer':>10} {'runs':>5} {'clean%':>8} {'robust%':>8}"
    print(header)
    print("-" * len(header))
    for row in table:
        print(f"{row['source_mode']:>10} {row['transfer_mode']:>10} {row['runs']:>5} "
              f"{100 * row['clean_acc']:>8.2f} {100 * row['robust_acc']:>8.2f}")
    return table


def _add_common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel sub-runs (sweep only)")


def _attack_overrides(p: argparse.ArgumentParser):
    p.add_argument("--eps", type=float, default=None, help="L-inf radius (default 8/255)")
    p.add_argument("--alpha", type=float, default=None, help="attack step size (default 2/255)")
    p.add_argument("--steps", type=int, default=None, help="attack step count")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rxf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    ts = sub.add_parser("train-source", help="train a source model (standard | at | at_fdm)")
    _add_common(ts)
    _attack_overrides(ts)

    tr = sub.add_parser("transfer", help="fine-tune a source checkpoint on the target data")
    _add_common(tr)
    tr.add_argument("--source-ckpt", required=True)
    tr.add_argument("--mode", choices=["vanilla", "neft", "lwf"], default=None)
    tr.add_argument("--k", type=int, default=None, help="fine-tuned block count")
    tr.add_argument("--beta", type=float, default=None, help="spectral scaling in (0, 1]")
    tr.add_argument("--lambda-d", type=float, default=None, dest="lambda_d")
    tr.add_argument("--bn-stats", choices=["frozen", "updating"], default=None, dest="bn_stats")
    tr.add_argument("--bn-affine", choices=["frozen", "trainable"], default=None, dest="bn_affine")

    ev = sub.add_parser("eval", help="clean + robust accuracy of a checkpoint")
    _add_common(ev)
    ev.add_argument("--ckpt", required=True)
    _attack_overrides(ev)

    sw = sub.add_parser("sweep", help="transfer+eval per axis value, shared source checkpoint")
    _add_common(sw)
    sw.add_argument("--source-ckpt", required=True)
    sw.add_argument("--axis", choices=["k", "lambda_d", "beta", "fraction"], default=None)

    rp = sub.add_parser("report", help="consolidate run metrics into one grid")
    _add_common(rp, config=False)
    rp.add_argument("--run-dir", required=True)
    return p


def _apply_overrides(raw: dict, args) -> dict:
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "eps", None) is not None or getattr(args, "alpha", None) is not None \
            or getattr(args, "steps", None) is not None:
        section = "source" if args.command == "train-source" else "eval"
        target = raw.setdefault(section, {})
        if args.command == "train-source":
            target = target.setdefault("attack", {})
        for key in ("eps", "alpha", "steps"):
            v = getattr(args, key, None)
            if v is not None:
                target[key] = v
    if args.command == "transfer":
        tr = raw.setdefault("transfer", {})
        for key in ("mode", "k", "beta", "lambda_d", "bn_stats", "bn_affine"):
            v = getattr(args, key, None)
            if v is not None:
                tr[key] = v
    if args.command == "sweep" and args.axis is not None:
        raw.setdefault("sweep", {})["axis"] = args.axis
    return raw


_NEED = {
    "train-source": ("data", "arch", "source"),
    "transfer": ("data", "arch", "transfer"),
    "eval": ("data",),
    "sweep": ("data", "arch", "transfer", "sweep"),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.run_dir, args.out)
            return 0
        raw = _apply_overrides(load_config(args.config), args)
        cfg = resolve_config(raw, need=_NEED[args.command])
        out_dir = _prepare_out(cfg, args.out, args.command)
        if args.command == "train-source":
            ckpt = cmd_train_source(cfg, out_dir)
            print(f"checkpoint: {ckpt}")
        elif args.command == "transfer":
            ckpt = cmd_transfer(cfg, args.source_ckpt, out_dir)
            print(f"checkpoint: {ckpt}")
        elif args.command == "eval":
            cmd_eval(cfg, args.ckpt, out_dir)
        elif args.command == "sweep":
            csv_path = cmd_sweep(cfg, args.source_ckpt, out_dir, workers=args.workers)
            print(f"sweep results: {csv_path}")
        return 0
    except (ConfigError, ShapeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

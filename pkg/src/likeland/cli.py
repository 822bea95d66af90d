"""Command line: train, eval, attack, landscape, flatness, histogram, verify.

Every command writes into ``--out`` (default: ``$LIKELAND_OUT``, else
``./likeland-out``) and finishes by writing ``<command>.manifest.json``,
which lists each produced file with its sha256. Outputs hold no timestamps,
so reruns with the same arguments are byte-identical.

Exit codes: 0 success, 1 verification failure, 2 bad config or input,
3 training divergence, 4 corrupted artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from ._io import atomic_write_bytes, atomic_write_text, dumps, sha256_file, write_json
from .attacks import PRESETS, AttackConfig, adversarial_accuracy, attack, clean_accuracy, preset
from .data import load_dataset, subset
from .errors import ArtifactCorruption, ConfigError, InputError, LikelandError
from .flatness import dataset_flatness
from .landscape import GridSpec, fgsm_plane, likelihood_histogram, random_plane, surface, write_surface
from .models import ArchitectureConfig, build, load_checkpoint, save_checkpoint
from .training import DefenseConfig, TrainConfig, train
from .verify import format_table, run_battery

OUT_ENV = "LIKELAND_OUT"
DEFAULT_OUT = "likeland-out"
TOOL_VERSION = "0.1.0"
CONFIG_KEYS = {"data", "architecture", "train", "defense", "precision", "seed", "probe"}


# -- manifests ------------------------------------------------------------------

def write_manifest(out_dir: Path, command: str, config: dict, seed, checksum: str, files: list[Path]) -> Path:
    """Written after every other output; lists each one with size and sha256."""
    entries = [
        {"path": f.name, "bytes": f.stat().st_size, "sha256": sha256_file(f)}
        for f in sorted(files, key=lambda p: p.name)
    ]
    body = {
        "command": command,
        "config": config,
        "seed": seed,
        "model_checksum": checksum,
        "tool_version": TOOL_VERSION,
        "outputs": entries,
    }
    return write_json(out_dir / f"{command}.manifest.json", body)


def check_manifest(path) -> list[str]:
    """Problems found re-hashing the outputs a manifest lists; empty when intact."""
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ArtifactCorruption(f"unreadable manifest {path}: {exc}") from exc
    problems = []
    for entry in body.get("outputs", []):
        f = path.parent / entry["path"]
        if not f.is_file():
            problems.append(f"missing: {entry['path']}")
        elif sha256_file(f) != entry["sha256"]:
            problems.append(f"modified: {entry['path']}")
    return problems


# -- config -----------------------------------------------------------------------

def read_config(path) -> dict:
    """JSON, or TOML for files ending in .toml; field names follow the config classes."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            cfg = tomllib.loads(raw.decode())
        else:
            cfg = json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a table/object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "data" not in cfg:
        raise ConfigError("config needs a data source")
    return cfg


def resolve_train_config(cfg: dict):
    seed = int(cfg.get("seed", 0))
    try:
        arch = ArchitectureConfig.from_dict(cfg.get("architecture", {}))
        train_cfg = TrainConfig.from_dict({"seed": seed, **cfg.get("train", {})})
        defense = DefenseConfig.from_dict(cfg.get("defense", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    precision = cfg.get("precision", "high")
    if precision not in T.PRECISIONS:
        raise ConfigError(f"unknown precision {precision!r}")
    probe = cfg.get("probe")
    resolved = {
        "data": cfg["data"],
        "seed": seed,
        "precision": precision,
        "architecture": arch.to_dict(),
        "train": train_cfg.to_dict(),
        "defense": defense.to_dict(),
    }
    if probe is not None:
        resolved["probe"] = probe
    return resolved, arch, train_cfg, defense


# -- commands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = read_config(args.config)
    resolved, arch, train_cfg, defense = resolve_train_config(cfg)
    out = Path(args.out)
    with T.precision(resolved["precision"]):
        data = load_dataset(resolved["data"])
        model = build(arch, seed=resolved["seed"])
        probe_kwargs, probe_set = None, None
        if "probe" in resolved:
            p = resolved["probe"]
            probe_set = subset(data, int(p.get("n", 16)), seed=resolved["seed"])
            probe_kwargs = {
                "n_planes": int(p.get("planes", 1)),
                "grid_spec": GridSpec(float(p.get("eps_max", 8 / 255)), int(p.get("resolution", 2))),
                "seed": resolved["seed"],
            }
        model, log = train(model, data, train_cfg, defense, probe_set, probe_kwargs)
    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt, extra={"train_config": resolved})
    metrics = atomic_write_text(out / "metrics.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    write_manifest(out, "train", resolved, resolved["seed"], model.checksum(), [ckpt, metrics])
    print(f"trained {len(log)} epochs; final clean_acc={log[-1]['clean_acc']:.4f}" if log else "trained 0 epochs")
    return 0


def _load(args):
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    if tuple(data.sample_shape) != tuple(model.input_shape):
        raise InputError(f"data samples {data.sample_shape} do not fit model input {model.input_shape}")
    if len(data) and data.labels.max() >= model.num_classes:
        raise InputError("data has labels beyond the model's classes")
    if getattr(args, "limit", None):
        data = data.take(np.arange(min(args.limit, len(data))))
    return model, data


def _attack_config(args) -> AttackConfig | None:
    if args.attack is None:
        return None
    if args.attack == "custom":
        if args.eps is None:
            raise ConfigError("custom attack needs --eps")
        kind = "fgsm" if args.steps == 1 and args.step is None else "pgd"
        step = args.eps if kind == "fgsm" else (args.step if args.step is not None else args.eps / 4)
        return AttackConfig(kind, args.eps, step, args.steps or 10, args.random_start)
    cfg = preset(args.attack, args.eps)
    if cfg.kind == "pgd" and (args.step is not None or args.steps is not None or args.random_start):
        cfg = AttackConfig("pgd", cfg.eps, args.step or cfg.step_size, args.steps or cfg.iters, args.random_start)
    return cfg


def cmd_eval(args) -> int:
    model, data = _load(args)
    atk = _attack_config(args)
    report = {"clean_acc": clean_accuracy(model, data), "n_samples": len(data), "seed": args.seed, "config": None}
    if atk is not None:
        report["adv_acc"] = adversarial_accuracy(model, data, atk, seed=args.seed)
        report["config"] = {**atk.to_dict(), "preset": args.attack, "steps": atk.iters, "step": atk.step_size}
    out = Path(args.out)
    path = write_json(out / "eval.json", report)
    write_manifest(out, "eval", _cmd_config(args), args.seed, model.checksum(), [path])
    print(dumps({k: report[k] for k in report if k.endswith("acc")}), end="")
    return 0


def cmd_attack(args) -> int:
    model, data = _load(args)
    atk = _attack_config(args)
    if atk is None:
        raise ConfigError("attack needs --attack")
    adv = attack(model, data.inputs, data.labels, atk, seed=np.random.default_rng(args.seed))
    out = Path(args.out)
    buf = _npy_bytes(adv)
    adv_path = atomic_write_bytes(out / "adversarial.npy", buf)
    labels_path = atomic_write_bytes(out / "labels.npy", _npy_bytes(data.labels.astype(np.int64)))
    report = {
        "config": atk.to_dict(), "n_samples": len(data), "seed": args.seed,
        "max_perturbation": float(np.max(np.abs(adv - data.inputs))) if len(data) else 0.0,
    }
    rep_path = write_json(out / "attack.json", report)
    write_manifest(out, "attack", _cmd_config(args), args.seed, model.checksum(), [adv_path, labels_path, rep_path])
    return 0


def _npy_bytes(arr) -> bytes:
    import io

    bio = io.BytesIO()
    np.save(bio, np.ascontiguousarray(arr), allow_pickle=False)
    return bio.getvalue()


def cmd_landscape(args) -> int:
    model, data = _load(args)
    if not 0 <= args.index < len(data):
        raise InputError(f"index {args.index} outside [0, {len(data)})")
    x, y = data.inputs[args.index], int(data.labels[args.index])
    if args.kind == "fgsm":
        plane = fgsm_plane(model, x, y, args.eps_max, args.resolution, args.seed)
    else:
        plane = random_plane(x, args.eps_max, args.resolution, args.seed)
    surf = surface(model, plane)
    c = plane.center_index
    if surf.values[c, c] != 0.0:
        raise LikelandError("surface centre is not zero")
    out = Path(args.out)
    stem = f"landscape_{args.kind}_{args.index}"
    csv_path, ppm_path = out / f"{stem}.csv", out / f"{stem}.ppm"
    write_surface(surf, csv_path, ppm_path)
    meta = {
        "index": args.index, "direction_kind": args.kind, "label": y, "seed": args.seed,
        "grid": GridSpec(args.eps_max, args.resolution).to_dict(), "vmin": surf.vmin, "vmax": surf.vmax,
        "zero_gradient": bool(plane.metadata.get("zero_gradient", False)),
    }
    meta_path = write_json(out / f"{stem}.json", meta)
    config = {**_cmd_config(args), "direction_kind": args.kind, "label": y}
    write_manifest(out, "landscape", config, args.seed, model.checksum(), [csv_path, ppm_path, meta_path])
    return 0


def cmd_flatness(args) -> int:
    if args.planes < 1:
        raise ConfigError("--planes must be >= 1")
    model, data = _load(args)
    report = dataset_flatness(model, data, args.planes, GridSpec(args.eps_max, args.resolution), args.seed)
    out = Path(args.out)
    path = write_json(out / "flatness.json", report.to_dict())
    write_manifest(out, "flatness", _cmd_config(args), args.seed, model.checksum(), [path])
    print(f"Phi = {report.Phi:.6g} over {report.sample_count} samples")
    return 0


def cmd_histogram(args) -> int:
    model, data = _load(args)
    hist = likelihood_histogram(model, data, args.eps, args.bins, args.seed)
    out = Path(args.out)
    csv_path = atomic_write_text(out / "histogram.csv", hist.to_csv())
    summary = {
        "eps": hist.eps, "bins": args.bins, "seed": args.seed, "n_samples": len(data),
        "clean_mean": float(np.mean(hist.clean_values)), "perturbed_mean": float(np.mean(hist.perturbed_values)),
        "wasserstein": hist.wasserstein(),
    }
    json_path = write_json(out / "histogram.json", summary)
    write_manifest(out, "histogram", _cmd_config(args), args.seed, model.checksum(), [csv_path, json_path])
    return 0


def cmd_verify(args) -> int:
    results = run_battery(inject_fault=args.inject_fault, quick=args.quick)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_check_manifest(args) -> int:
    problems = check_manifest(args.manifest)
    for p in problems:
        print(p, file=sys.stderr)
    return 4 if problems else 0


def _cmd_config(args) -> dict:
    skip = {"func", "out", "inject_fault"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUT_ENV, DEFAULT_OUT)
    parser = argparse.ArgumentParser(prog="likeland", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, data=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default=default_out, help=f"output directory (default ${OUT_ENV} or {DEFAULT_OUT})")
        if data:
            p.add_argument("--ckpt", required=True)
            p.add_argument("--data", required=True, help="IDX dir, CIFAR .bin file/dir, or blobs:... spec")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--limit", type=int, default=None, help="use only the first N samples")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a model from a config file", data=False)
    p.add_argument("--config", required=True)

    for name, func, help_text in (("eval", cmd_eval, "clean and adversarial accuracy"),
                                  ("attack", cmd_attack, "write adversarial examples")):
        p = add(name, func, help_text)
        p.add_argument("--attack", choices=sorted(PRESETS) + ["custom"], default=None)
        p.add_argument("--eps", type=float, default=None)
        p.add_argument("--step", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--random-start", action="store_true")

    p = add("landscape", cmd_landscape, "relative likelihood surface around one sample")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--kind", choices=["random", "fgsm"], default="random")
    p.add_argument("--eps-max", type=float, default=8 / 255)
    p.add_argument("--resolution", type=int, default=10)

    p = add("flatness", cmd_flatness, "per-sample phi and dataset Phi")
    p.add_argument("--planes", type=int, default=1)
    p.add_argument("--eps-max", type=float, default=8 / 255)
    p.add_argument("--resolution", type=int, default=10)

    p = add("histogram", cmd_histogram, "clean vs noise-perturbed log-likelihoods")
    p.add_argument("--eps", type=float, default=8 / 255)
    p.add_argument("--bins", type=int, default=30)

    p = add("verify", cmd_verify, "run the self-check battery", data=False)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("check-manifest", help="re-hash the outputs a manifest lists")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_check_manifest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LikelandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

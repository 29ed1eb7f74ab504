"""Operator entry points.

Commands: gen-data, pretrain, probe, segment, inspect. Each run is driven
by one JSON config file; command-line ``--set section.key=value`` overrides
individual keys, unknown keys are rejected, and a resolved copy of the full
configuration is written beside the outputs so any run can be reproduced
from that file alone. VOXSSL_OUT_ROOT prefixes relative output directories.

Exit codes: 0 success, 1 usage/config, 2 data/parse, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .distill import LossWeights, TemperatureConfig
from .downstream import (ProbeConfig, reduced_data_sweep,
                         run_classification_probe, run_segmentation_probe)
from .train import TrainAbort, TrainConfig, train_loop
from .vit3d import (CKPT_MAGIC, CheckpointError, ModelConfig, ModelParams,
                    checkpoint_manifest, load_checkpoint)
from .volio import (RAW_MAGIC, NiftiParseError, PhantomSpec, RawParseError,
                    Volume, parse_nifti_header, phantom_dataset, preprocess,
                    read_nifti, read_raw, write_nifti, write_raw)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise ConfigError(message)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, section: dict | None, what: str, **extra):
    section = dict(section or {})
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown keys in {what!r} section: {sorted(unknown)}")
    section.update(extra)
    try:
        return cls(**{k: _tuplify(v) for k, v in section.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what!r} section: {exc}") from exc


_SECTIONS = ("data", "model", "augment", "temperatures", "loss", "train", "probe")
_TOP_KEYS = {"seed", "out_dir", "encoder", "params_from", *_SECTIONS}


@dataclasses.dataclass(frozen=True)
class DataConfig:
    source: str = "phantom"            # "phantom" | "dir"
    dir: str | None = None
    n: int = 16
    format: str = "raw"                # "raw" | "nifti"
    target_extent: tuple[int, int, int] = (16, 16, 16)
    phantom: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("phantom", "dir"):
            raise ValueError(f"data source must be 'phantom' or 'dir', got {self.source!r}")
        if self.format not in ("raw", "nifti"):
            raise ValueError(f"data format must be 'raw' or 'nifti', got {self.format!r}")


def load_config(path: str | None, overrides: list[str], seed: int | None,
                out_dir: str | None) -> dict:
    cfg: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-section key")
        node[parts[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    cfg.setdefault("seed", 0)
    cfg.setdefault("out_dir", "runs/out")
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    return cfg


def resolve_out_dir(out_dir: str) -> Path:
    root = os.environ.get("VOXSSL_OUT_ROOT")
    p = Path(out_dir)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _write_resolved(out: Path, cfg: dict, command: str, resolved_parts: dict) -> None:
    record = {"command": command, **cfg}
    for name, obj in resolved_parts.items():
        if dataclasses.is_dataclass(obj):
            record[name] = dataclasses.asdict(obj)
        else:
            record[name] = obj
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


def _phantom_items(data_cfg: DataConfig, seed: int):
    base = _build(PhantomSpec, data_cfg.phantom, "data.phantom")
    return phantom_dataset(base, n=data_cfg.n, seed=seed)


def load_volume_file(path: Path) -> Volume:
    blob = path.read_bytes()
    if path.suffix == ".nii":
        return read_nifti(blob)
    return read_raw(blob)


def load_manifest_dataset(data_cfg: DataConfig):
    """(volumes, class labels, label maps) from a gen-data output directory."""
    if data_cfg.dir is None:
        raise ConfigError("data.dir is required when data.source is 'dir'")
    root = Path(data_cfg.dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"missing data dir or manifest: {manifest}")
    volumes, labels, maps = [], [], []
    with open(manifest) as f:
        for row in csv.DictReader(f):
            vol = load_volume_file(root / row["path"])
            volumes.append(preprocess(vol, data_cfg.target_extent).data)
            labels.append(int(row["class"]))
            if row.get("seg_path"):
                maps.append(np.rint(load_volume_file(root / row["seg_path"]).data).astype(np.int8))
    return volumes, np.array(labels), maps


def load_dataset(data_cfg: DataConfig, seed: int):
    if data_cfg.source == "phantom":
        items = _phantom_items(data_cfg, seed)
        volumes = [preprocess(v, data_cfg.target_extent).data for v, _, _ in items]
        labels = np.array([c for _, c, _ in items])
        maps = [m for _, _, m in items]
        return volumes, labels, maps
    return load_manifest_dataset(data_cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    data_cfg = _build(DataConfig, cfg.get("data"), "data")
    out = resolve_out_dir(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, cfg, "gen-data", {"data": data_cfg})
    ext = ".nii" if data_cfg.format == "nifti" else ".raw"
    write = write_nifti if data_cfg.format == "nifti" else write_raw
    rows = []
    for i, (vol, label, labelmap) in enumerate(_phantom_items(data_cfg, cfg["seed"])):
        vol_name = f"phantom_{i:04d}{ext}"
        seg_name = f"seg_{i:04d}{ext}"
        (out / vol_name).write_bytes(write(vol))
        seg_vol = Volume(labelmap.astype(np.float32), spacing=vol.spacing,
                         orientation=vol.orientation, provenance=vol.provenance)
        (out / seg_name).write_bytes(write(seg_vol))
        rows.append({"path": vol_name, "class": label, "seg_path": seg_name})
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["path", "class", "seg_path"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} phantoms to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    data_cfg = _build(DataConfig, cfg.get("data"), "data")
    model_cfg = _build(ModelConfig, cfg.get("model"), "model")
    aug_cfg = _build(AugmentConfig, cfg.get("augment"), "augment")
    temps = _build(TemperatureConfig, cfg.get("temperatures"), "temperatures")
    weights = _build(LossWeights, cfg.get("loss"), "loss")
    train_cfg = _build(TrainConfig, cfg.get("train"), "train", seed=cfg["seed"])
    out = resolve_out_dir(cfg["out_dir"])
    _write_resolved(out, cfg, "pretrain",
                    {"data": data_cfg, "model": model_cfg, "augment": aug_cfg,
                     "temperatures": temps, "loss": weights, "train": train_cfg})
    volumes, _, _ = load_dataset(data_cfg, cfg["seed"])
    result = train_loop(volumes, model_cfg, train_cfg, aug_cfg, temps, weights,
                        out_dir=out)
    r = result.final_report
    print(f"final: total={r.total:.4f} global={r.l_global:.4f} "
          f"patch={r.l_patch:.4f} rec={r.l_rec:.6f} entropy={r.teacher_entropy:.3f}")
    print(f"checkpoints: {result.last_checkpoint} {result.best_checkpoint}")
    return EXIT_OK


def _load_encoder(cfg: dict, model_cfg: ModelConfig | None) -> ModelParams:
    encoder = cfg.get("encoder", "random")
    which = cfg.get("params_from", "teacher")
    if which not in ("teacher", "student"):
        raise ConfigError(f"params_from must be 'teacher' or 'student', got {which!r}")
    if encoder == "random":
        if model_cfg is None:
            raise ConfigError("a model section is required with encoder='random'")
        return ModelParams.init(model_cfg, seed=cfg["seed"], dtype=np.float64,
                                requires_grad=False)
    ckpt_cfg, student, teacher, _ = load_checkpoint(encoder)
    if model_cfg is not None and model_cfg != ckpt_cfg:
        raise ConfigError(
            f"checkpoint/model-config mismatch: checkpoint has {ckpt_cfg}, "
            f"config requests {model_cfg}")
    params = teacher if which == "teacher" else student
    return params.copy(requires_grad=False)


def _probe_shared(cfg: dict):
    data_cfg = _build(DataConfig, cfg.get("data"), "data")
    model_cfg = _build(ModelConfig, cfg["model"], "model") if "model" in cfg else None
    probe_cfg = _build(ProbeConfig, cfg.get("probe"), "probe", seed=cfg["seed"])
    params = _load_encoder(cfg, model_cfg)
    volumes, labels, maps = load_dataset(data_cfg, cfg["seed"])
    return data_cfg, model_cfg, probe_cfg, params, volumes, labels, maps


def cmd_probe(cfg: dict) -> int:
    data_cfg, model_cfg, probe_cfg, params, volumes, labels, _ = _probe_shared(cfg)
    out = resolve_out_dir(cfg["out_dir"])
    _write_resolved(out, cfg, "probe",
                    {"data": data_cfg, "probe": probe_cfg,
                     "model": model_cfg or params.cfg})
    report = run_classification_probe(volumes, labels, params, probe_cfg, fraction=1.0)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    if tuple(probe_cfg.fractions) != (1.0,):
        rows = reduced_data_sweep(volumes, labels, params, probe_cfg)
        (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
        with open(out / "sweep.txt", "w") as f:
            for row in rows:
                f.write(f"{row['fraction']:.2f}  {row['auroc_mean']:.4f} "
                        f"+- {row['auroc_sd']:.4f}\n")
        print(f"sweep rows: {len(rows)}")
    return EXIT_OK


def cmd_segment(cfg: dict) -> int:
    data_cfg, model_cfg, probe_cfg, params, volumes, labels, maps = _probe_shared(cfg)
    if not maps:
        raise ConfigError("segmentation requires label maps in the dataset")
    out = resolve_out_dir(cfg["out_dir"])
    _write_resolved(out, cfg, "segment",
                    {"data": data_cfg, "probe": probe_cfg,
                     "model": model_cfg or params.cfg})
    report = run_segmentation_probe(volumes, maps, labels, params, probe_cfg)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_inspect(path: str) -> int:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    blob = p.read_bytes()
    if blob[:4] == CKPT_MAGIC:
        man = checkpoint_manifest(p)
        print(f"checkpoint: step={man['step']}")
        print(f"config: {man['config']}")
        for e in man["params"]:
            print(f"  {e['group']:8s} {e['name']:20s} {str(tuple(e['shape'])):>16s} {e['dtype']}")
        return EXIT_OK
    if blob[:4] == RAW_MAGIC:
        v = read_raw(blob)
        print(f"raw volume: extent={v.extent} spacing={v.spacing} "
              f"orientation={v.orientation}")
        return EXIT_OK
    hdr = parse_nifti_header(blob)
    print(f"nifti-1 header ({'little' if hdr.endian == '<' else 'big'}-endian)")
    print(f"  dim      = {hdr.dim}")
    print(f"  datatype = {hdr.datatype} (bitpix {hdr.bitpix})")
    print(f"  pixdim   = {tuple(round(x, 6) for x in hdr.pixdim)}")
    print(f"  vox_offset = {hdr.vox_offset}")
    print(f"  scl      = slope {hdr.scl_slope}, inter {hdr.scl_inter}")
    print(f"  qform/sform codes = {hdr.qform_code}/{hdr.sform_code}")
    print(f"  magic    = {hdr.magic!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="voxssl",
                     description="masked self-distillation pretraining for volumes")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "probe", "segment"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
    ins = sub.add_parser("inspect")
    ins.add_argument("path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "inspect":
            return cmd_inspect(args.path)
        cfg = load_config(args.config, args.set, args.seed, args.out)
        handler = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain,
                   "probe": cmd_probe, "segment": cmd_segment}[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NiftiParseError, RawParseError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(f"last report: {exc.report.to_line(step=-1)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

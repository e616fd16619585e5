"""Command-line entry point: synth, train, eval, explain, params, gradcheck.

Every command reads one flat :class:`RunConfig`.  Values come from the
dataclass defaults, then ``--config file.json``, then ``--key value`` flags.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import data as D
from . import evaluation as E
from . import training as TR
from .model import ConfigError, ModelConfig, build_model, count_params, default_grid, preset
from .tensor import GraphMutatedError, ShapeError

logger = logging.getLogger("sdeep")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "checkpoint.sdc"
HISTORY_NAME = "history.csv"
SNAPSHOT_NAME = "config.json"

_MODEL_KEYS = ("extraction", "strategy", "attention_mode", "conv_widths", "kernel_lens", "common_stages",
               "d_a", "head_widths", "dropout_rate")
_HP_KEYS = ("lambda_aux", "learning_rate", "weight_decay", "batch_size", "max_epochs", "patience", "optimizer")


@dataclass
class RunConfig:
    """All settings of one CLI invocation.

    Model fields left as ``None`` take the value of the ``arch`` preset;
    ``channel_groups = None`` means groups are computed from the training
    split by correlation.
    """

    # data and outputs
    data: str = ""  # SITS-CSV input (train/eval/explain)
    out_dir: str = "run"
    checkpoint: str = ""  # eval/explain; defaults to <out_dir>/checkpoint.sdc
    spec: str = ""  # synth spec JSON; empty -> built-in default corpus
    out: str = "synth.csv"  # synth output
    seed: int = 0
    # model
    arch: str = "Sdeep-B-Multi-ii"
    extraction: Optional[str] = None
    strategy: Optional[str] = None
    attention_mode: Optional[str] = None
    channel_groups: Optional[List[List[int]]] = None
    conv_widths: Optional[List[int]] = None
    kernel_lens: Optional[List[int]] = None
    common_stages: Optional[int] = None
    d_a: Optional[int] = None
    head_widths: Optional[List[int]] = None
    dropout_rate: Optional[float] = None
    # optimisation
    lambda_aux: Optional[float] = None
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    optimizer: str = "adam"
    # preprocessing and split
    derive_indexes: bool = False
    correlation_threshold: float = 0.6
    split_ratios: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    class_ratio_tolerance: float = 0.02
    # reporting
    split: str = "all"  # eval/explain subset: all | train | val | test
    normalization: str = "pixel"
    report_format: str = "csv"
    # params
    num_channels: int = 6
    num_timesteps: int = 21
    num_classes: int = 11
    all_configs: bool = False
    # gradcheck
    gradcheck_seeds: int = 3
    gradcheck_tol: float = 1e-4

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, **data_dims) -> ModelConfig:
        overrides = {k: getattr(self, k) for k in _MODEL_KEYS if getattr(self, k) is not None}
        if self.channel_groups is not None:
            overrides["channel_groups"] = self.channel_groups
        overrides.update(data_dims)
        return preset(self.arch, **overrides)

    def hyperparams(self) -> TR.HyperParams:
        return TR.HyperParams(seed=self.seed, **{k: getattr(self, k) for k in _HP_KEYS})

    def split_spec(self) -> D.SplitSpec:
        return D.SplitSpec(ratios=tuple(self.split_ratios), seed=self.seed,
                           class_ratio_tolerance=self.class_ratio_tolerance)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _converter(tp):
    """argparse ``type`` for a RunConfig field annotation."""
    optional = False
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional, tp = True, args[0]

    def convert(text: str):
        if optional and text == "null":
            return None
        if tp is bool:
            return _parse_bool(text)
        if typing.get_origin(tp) is list:
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = [v for v in text.split(",") if v]
                inner = typing.get_args(tp)[0]
                value = [inner(v) for v in value] if inner in (int, float) else value
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = [value]
            if not isinstance(value, list):
                raise argparse.ArgumentTypeError(f"expected a list, got {text!r}")
            return value
        return tp(text)

    convert.__name__ = getattr(tp, "__name__", "value")
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdeep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    hints = typing.get_type_hints(RunConfig)
    for name in ("synth", "train", "eval", "explain", "params", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file of RunConfig keys; flags override it")
        for f in dataclasses.fields(RunConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", f"--{f.name}", dest=f.name,
                           type=_converter(hints[f.name]), default=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a JSON object")
        values.update(loaded)
    skip = {"command", "config", "verbose"}
    values.update({k: v for k, v in vars(args).items() if k not in skip})
    return RunConfig.from_dict(values)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_dataset(path: str) -> D.SITSDataset:
    if not path:
        raise ConfigError("no dataset given (set 'data')")
    if not os.path.exists(path):
        raise ConfigError(f"dataset not found: {path}")
    meta = D.read_sidecar(D.sidecar_path(path)) if os.path.exists(D.sidecar_path(path)) else {}
    return D.load_sits_csv(path, meta.get("channel_names"), meta.get("class_names"))


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.spec:
        with open(cfg.spec) as fh:
            spec = D.SynthSpec.from_dict(json.load(fh))
    else:
        spec = D.default_synth_spec()
    ds, relevance = D.synth_generate(spec, cfg.seed)
    D.write_sits_csv(ds, cfg.out)
    D.write_sidecar(D.sidecar_path(cfg.out), ds.channel_names, ds.class_names, relevance, spec.designated_class)
    print(f"wrote {len(ds)} pixels ({ds.num_timesteps} timesteps x {ds.num_channels} channels) to {cfg.out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    raw = _load_dataset(cfg.data)
    if (raw.label == D.UNLABELED).any():
        raise ConfigError("training data contains unlabeled pixels")
    pp = D.preprocess(raw, cfg.split_spec(), cfg.derive_indexes, cfg.correlation_threshold)
    class_names = raw.class_names or [str(c) for c in range(int(raw.label.max()) + 1)]
    dims = dict(num_channels=pp.train.num_channels, num_timesteps=pp.train.num_timesteps,
                num_classes=len(class_names))
    if cfg.channel_groups is None:
        dims["channel_groups"] = pp.groups
    model_cfg = cfg.model_config(**dims)
    hp = cfg.hyperparams().resolve(model_cfg)  # surfaces config errors before any work
    model = build_model(model_cfg, seed=cfg.seed)
    meta = {
        "scaling": pp.scaling.to_dict(),
        "derive_indexes": cfg.derive_indexes,
        "channel_names": pp.channel_names,
        "class_names": class_names,
        "split_pixel_ids": {name: [int(i) for i in part.pixel_id]
                            for name, part in (("train", pp.train), ("val", pp.val), ("test", pp.test))},
    }
    ck, history = TR.train(model, pp.train, pp.val, hp, metadata=meta)

    os.makedirs(cfg.out_dir, exist_ok=True)
    TR.save_checkpoint(ck, os.path.join(cfg.out_dir, CHECKPOINT_NAME))
    TR.write_history_csv(history, os.path.join(cfg.out_dir, HISTORY_NAME))
    with open(os.path.join(cfg.out_dir, SNAPSHOT_NAME), "w") as fh:
        fh.write(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"best epoch {ck.epoch}: val_loss={ck.best_val_loss:.6f} ({len(history)} epochs run, "
          f"{model.num_params()} parameters, groups {model_cfg.channel_groups})")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig) -> str:
    return cfg.checkpoint or os.path.join(cfg.out_dir, CHECKPOINT_NAME)


def _prepared(cfg: RunConfig):
    """(model, checkpoint, dataset transformed with the stored preprocessing)."""
    ck = TR.load_checkpoint(_checkpoint_path(cfg))
    meta = ck.metadata
    raw = _load_dataset(cfg.data)
    if cfg.split != "all":
        ids = meta.get("split_pixel_ids", {}).get(cfg.split)
        if ids is None:
            raise ConfigError(f"split must be all, train, val or test, got {cfg.split!r}")
        raw = raw.subset(np.flatnonzero(np.isin(raw.pixel_id, ids)))
        if len(raw) == 0:
            raise ConfigError(f"no pixels of the {cfg.split} split in {cfg.data}")
    scaling = D.ChannelScaling(**meta["scaling"]) if "scaling" in meta else None
    derive = bool(meta.get("derive_indexes", False))
    expected_raw = ck.config.num_channels - (len(D.INDEX_CHANNELS) if derive else 0)
    if raw.num_channels != expected_raw or raw.num_timesteps != ck.config.num_timesteps:
        raise ConfigError(
            f"dataset is {raw.num_timesteps} timesteps x {raw.num_channels} channels; checkpoint expects "
            f"{ck.config.num_timesteps} x {expected_raw}"
        )
    ds = D.transform(raw, scaling, derive)
    ds.channel_names = list(meta.get("channel_names") or ds.channel_names)
    ds.class_names = list(meta.get("class_names") or ds.class_names)
    labeled = ds.label != D.UNLABELED
    if (ds.label[labeled] >= ck.config.num_classes).any():
        raise ConfigError(f"dataset labels exceed the checkpoint's {ck.config.num_classes} classes")
    return ck.to_model(), ck, ds.subset(np.flatnonzero(labeled))


def _report_path(cfg: RunConfig, stem: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, f"{stem}_{cfg.split}.{cfg.report_format}")


def cmd_eval(cfg: RunConfig) -> int:
    model, _, ds = _prepared(cfg)
    report = E.evaluate(model, ds, ds.class_names)
    path = _report_path(cfg, "metrics")
    E.export_report(report, path, cfg.report_format)
    fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
    for name, p, r in zip(report.class_names, report.precision, report.recall):
        print(f"{name:>16s}  precision {fmt(p)}  recall {fmt(r)}")
    print(f"accuracy {report.accuracy:.4f}  macro precision {fmt(report.macro_precision)}  "
          f"macro recall {fmt(report.macro_recall)}  -> {path}")
    return EXIT_OK


def cmd_explain(cfg: RunConfig) -> int:
    model, _, ds = _prepared(cfg)
    report = E.attention_report(model, ds, cfg.normalization, ds.class_names, ds.channel_names)
    path = _report_path(cfg, "attention")
    E.export_report(report, path, cfg.report_format)
    med = report.medians()
    print("median normalised attention")
    print(" " * 17 + " ".join(f"{c:>7s}" for c in report.channel_names))
    for name, row in zip(report.class_names, med):
        print(f"{name:>16s} " + " ".join("      -" if np.isnan(v) else f"{v:7.3f}" for v in row))
    print(f"-> {path}")
    return EXIT_OK


def cmd_params(cfg: RunConfig) -> int:
    dims = dict(num_channels=cfg.num_channels, num_timesteps=cfg.num_timesteps, num_classes=cfg.num_classes)
    if cfg.channel_groups is not None:
        dims["channel_groups"] = cfg.channel_groups
    if cfg.all_configs:
        configs = default_grid(**dims)
    else:
        configs = [cfg.model_config(**dims)]
    width = max(len(c.name) for c in configs)
    for c in configs:
        print(f"{c.name:<{width}s}  {count_params(c):>12,d}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .checks import gradient_suite

    worst = 0.0
    for name, err in gradient_suite(seeds=range(cfg.gradcheck_seeds)).items():
        worst = max(worst, err)
        print(f"{name:<28s} {err:.3e}")
    ok = worst <= cfg.gradcheck_tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {cfg.gradcheck_tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (TR.TrainingDivergedError, FloatingPointError, GraphMutatedError) as exc:
        print(f"sdeep {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, D.DataError, TR.CheckpointError, ShapeError, ValueError, TypeError, OSError) as exc:
        print(f"sdeep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

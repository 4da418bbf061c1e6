"""Command-line experiment runner.

Subcommands::

    graphmia prepare  --config C --out DIR       write shadow.graph / target.graph
    graphmia run      --config C [--seeds 0,1,2] [--variant V ...] [--out DIR]
    graphmia sweep    --config C --param alpha --values 0,0.3,0.5 [--seeds ...] [--out DIR]
    graphmia validate --config C                 print the resolved config or every error

The config is an INI file with one section per module.  Every key is optional;
``graphmia validate`` echoes the full resolved file including defaults.

Results directory of ``run``::

    config.ini                  resolved configuration
    checkpoints/<variant>-seed<s>-{shadow,target,attack}.params
    metrics.csv                 per-seed rows, then mean and std rows per variant
    log.txt

CSV columns, in order: ``seed, variant, ACC, AUC, Recall, target_train_acc,
target_test_acc, shadow_train_acc, shadow_test_acc``.  Numbers carry four
decimals.  ``sweep`` writes ``sweep.csv`` with ``parameter, value`` prepended.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .augment import AugmentConfig
from .backbones import KINDS, BackboneConfig, save_params
from .data import (FORMATS, DatasetBundle, ShiftConfig, default_output_root, load_graph,
                   read_container, read_edgelist_dir, spurious_benchmark, split_by_group,
                   synthetic_citation_graph, write_container)
from .diffcore import ContractError
from .objectives import RExConfig, ShadowLossConfig
from .pipeline import VARIANTS, OptimConfig, PipelineConfig, RunResult, TrainingError, run_pipeline

log = logging.getLogger("graphmia")

COLUMNS = ("seed", "variant", "ACC", "AUC", "Recall", "target_train_acc", "target_test_acc",
           "shadow_train_acc", "shadow_test_acc")
SOURCES = ("synthetic", "file", "prepared")
SPLITS = ("shift", "groups")


class ConfigError(ValueError):
    """All violations found in a configuration, one message per entry."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


# ------------------------------------------------------------------ schema

def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or ``"0-4"`` or a mix such as ``"0-2,7"``."""
    seeds: list[int] = []
    for part in _str_list(text):
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def _bool(text: str) -> bool:
    try:
        return configparser.ConfigParser.BOOLEAN_STATES[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


def _optional_float(text: str) -> float | None:
    return None if text.strip() in ("", "none") else float(text)


def _in(*choices) -> Callable[[Any], str | None]:
    return lambda v: None if v in choices else f"must be one of {', '.join(map(str, choices))}"


def _range(lo=None, hi=None, lo_open=False, hi_open=False) -> Callable[[Any], str | None]:
    def check(v):
        if v is None:
            return None
        bad = (lo is not None and (v <= lo if lo_open else v < lo)) or \
              (hi is not None and (v >= hi if hi_open else v > hi))
        if not bad:
            return None
        left = "(" if lo_open else "["
        right = ")" if hi_open else "]"
        return f"must lie in {left}{'-inf' if lo is None else lo}, {'inf' if hi is None else hi}{right}"
    return check


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    check: Callable[[Any], str | None] | None = None


SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "source": Key(str, "synthetic", _in(*SOURCES)),
        "path": Key(str, ""),
        "format": Key(str, "container", _in(*FORMATS)),
        "header": Key(_bool, "false"),
        "num_classes": Key(int, "0", _range(0)),
        "split": Key(str, "shift", _in(*SPLITS)),
        "shadow_groups": Key(_str_list, ""),
        "target_groups": Key(_str_list, ""),
        "nodes": Key(int, "1200", _range(4)),
        "classes": Key(int, "5", _range(2)),
        "features": Key(int, "300", _range(1)),
        "avg_degree": Key(float, "4.0", _range(0, lo_open=True)),
        "homophily": Key(float, "0.6", _range(0, 1)),
        "topic_purity": Key(float, "0.2", _range(0, 1)),
        "graph_seed": Key(int, "0"),
        "shift_dims": Key(int, "8", _range(0)),
        "shift_strength": Key(float, "0.5", _range(0, 1)),
        "shift_noise": Key(float, "1.0", _range(0)),
        "target_strength": Key(_optional_float, "none", _range(0, 1)),
        "shadow_seed": Key(int, "1"),
        "target_seed": Key(int, "2"),
        "split_seed": Key(int, "0"),
    },
    "backbone": {
        "kind": Key(str, "GCN", _in(*KINDS)),
        "layers": Key(int, "2", _range(1)),
        "hidden": Key(int, "64", _range(1)),
        "heads": Key(int, "1", _range(1)),
        "K": Key(int, "2", _range(1)),
        "bottleneck": Key(_bool, "true"),
    },
    "augment": {
        "M": Key(int, "4", _range(1)),
        "mask_rate": Key(float, "0.1", _range(0, 1, hi_open=True)),
        "drop_rate": Key(float, "0.1", _range(0, 1)),
        "include_original": Key(_bool, "false"),
    },
    "shadow_loss": {
        "alpha": Key(float, "0.5", _range(0, 1, hi_open=True)),
        "beta1": Key(float, "1.0", _range(0)),
        "xi": Key(float, "0.01", _range(0)),
    },
    "rex": {
        "beta2": Key(float, "1.0", _range(0)),
        "lambda_min": Key(float, "0.0", _range(0)),
    },
    "train": {
        "shadow_epochs": Key(int, "200", _range(1)),
        "target_epochs": Key(int, "200", _range(1)),
        "attack_epochs": Key(int, "200", _range(1)),
        "attack_hidden": Key(int, "64", _range(1)),
        "top_k": Key(int, "2", _range(1)),
        "shadow_train_fraction": Key(float, "0.5", _range(0, 1, True, True)),
        "target_train_fraction": Key(float, "0.5", _range(0, 1, True, True)),
        "optimizer": Key(str, "adam", _in("adam", "sgd")),
        "lr": Key(float, "0.01", _range(0, lo_open=True)),
        "momentum": Key(float, "0.9", _range(0, 1, hi_open=True)),
        "weight_decay": Key(float, "0.0", _range(0)),
    },
    "experiment": {
        "seeds": Key(parse_seeds, "0"),
        "variants": Key(_str_list, "full"),
    },
}

# sweepable parameter -> (section, key)
SWEEP_PARAMS = {
    "alpha": ("shadow_loss", "alpha"),
    "beta1": ("shadow_loss", "beta1"),
    "beta2": ("rex", "beta2"),
    "xi": ("shadow_loss", "xi"),
    "hidden": ("backbone", "hidden"),
    "mask_rate": ("augment", "mask_rate"),
    "drop_rate": ("augment", "drop_rate"),
    "M": ("augment", "M"),
}


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> parsed value, defaults filled in
    raw: dict     # section -> key -> text, defaults filled in

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["experiment"]["seeds"]

    @property
    def variants(self) -> tuple[str, ...]:
        return self.values["experiment"]["variants"]

    def with_overrides(self, overrides: dict[tuple[str, str], str]) -> "ExperimentConfig":
        raw = {s: dict(keys) for s, keys in self.raw.items()}
        for (section, key), text in overrides.items():
            raw[section][key] = text
        return _build(raw)

    def to_ini(self) -> str:
        buf = io.StringIO()
        for section, keys in self.raw.items():
            buf.write(f"[{section}]\n")
            for key, text in keys.items():
                buf.write(f"{key} = {text}".rstrip() + "\n")
            buf.write("\n")
        return buf.getvalue()

    def pipeline_config(self, variant: str) -> PipelineConfig:
        v = self.values
        b, a, sl, rx, t = v["backbone"], v["augment"], v["shadow_loss"], v["rex"], v["train"]
        optim = OptimConfig(lr=t["lr"], momentum=t["momentum"], method=t["optimizer"],
                            weight_decay=t["weight_decay"])
        return PipelineConfig(
            backbone=BackboneConfig(b["kind"], b["layers"], b["hidden"], b["heads"], b["K"], b["bottleneck"]),
            augment=AugmentConfig(a["mask_rate"], a["drop_rate"], include_original=a["include_original"]),
            M=a["M"],
            shadow_loss=ShadowLossConfig(sl["alpha"], sl["beta1"], sl["xi"]),
            rex=RExConfig(rx["beta2"], rx["lambda_min"]),
            shadow_optim=optim, target_optim=optim, attack_optim=optim,
            shadow_epochs=t["shadow_epochs"], target_epochs=t["target_epochs"],
            attack_epochs=t["attack_epochs"], attack_hidden=t["attack_hidden"], top_k=t["top_k"],
            shadow_train_fraction=t["shadow_train_fraction"],
            target_train_fraction=t["target_train_fraction"], variant=variant,
        )


def _read_ini(text: str) -> tuple[dict, list[str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M, K)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        return {}, [f"unreadable config: {exc}".replace("\n", " ")]
    errors = []
    raw = {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"[{section}]: unknown section; expected one of {', '.join(SCHEMA)}")
            continue
        for key, text in parser.items(section):
            if key not in SCHEMA[section]:
                errors.append(f"[{section}] {key}: unknown key")
            else:
                raw[section][key] = text
    return raw, errors


def _build(raw: dict, errors: list[str] | None = None) -> ExperimentConfig:
    errors = list(errors or [])
    values: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for name, key in keys.items():
            text = raw[section][name]
            try:
                value = key.parse(text)
            except ValueError as exc:
                errors.append(f"[{section}] {name} = {text!r}: {exc}")
                value = key.parse(key.default)  # keeps the cross-field checks meaningful
            problem = key.check(value) if key.check else None
            if problem:
                errors.append(f"[{section}] {name} = {text}: {problem}")
            values[section][name] = value
    errors += _cross_checks(values)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(values, raw)


def _cross_checks(v: dict) -> list[str]:
    errors = []
    d = v["data"]
    if not v["experiment"]["seeds"]:
        errors.append("[experiment] seeds: at least one seed is required")
    unknown = [x for x in v["experiment"]["variants"] if x not in VARIANTS]
    if unknown:
        errors.append(f"[experiment] variants: unknown {', '.join(unknown)}; expected {', '.join(VARIANTS)}")
    if not v["experiment"]["variants"]:
        errors.append("[experiment] variants: at least one variant is required")
    M = max(v["augment"]["M"], 1)
    needs_rex = [x for x in v["experiment"]["variants"] if x in ("full", "no-irm", "no-gib")]
    if M == 1 and needs_rex:
        errors.append(f"[augment] M = 1: variance-of-risk attack training needs M >= 2 environments "
                      f"(variants {', '.join(needs_rex)}); use M >= 2 or the no-rex/baseline variant")
    if v["rex"]["lambda_min"] > 1.0 / M:
        errors.append(f"[rex] lambda_min = {v['rex']['lambda_min']}: must be <= 1/M = {1.0 / M:g}")
    if d["source"] in ("file", "prepared") and not d["path"]:
        errors.append(f"[data] path: required when source = {d['source']}")
    if d["source"] == "file" and d["split"] == "groups":
        if d["format"] != "edgelist":
            errors.append("[data] split = groups: needs format = edgelist with a groups.txt file")
        if not d["shadow_groups"] or not d["target_groups"]:
            errors.append("[data] shadow_groups/target_groups: both are required when split = groups")
    if d["source"] == "synthetic" and d["split"] == "groups":
        errors.append("[data] split = groups: synthetic graphs carry no groups; use split = shift")
    if d["source"] == "synthetic" and d["features"] < d["classes"]:
        errors.append("[data] features: need at least one vocabulary word per class")
    return errors


def parse_config(text: str) -> ExperimentConfig:
    raw, errors = _read_ini(text)
    if not raw:
        raise ConfigError(errors)
    return _build(raw, errors)


def validate_config(path) -> ExperimentConfig:
    """Parse and check a config file; raises :class:`ConfigError` listing every violation."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    return parse_config(text)


# -------------------------------------------------------------------- data

def build_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.values["data"]
    if d["source"] == "prepared":
        root = Path(d["path"])
        meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
        return DatasetBundle(read_container(root / "target.graph"), read_container(root / "shadow.graph"), meta)
    num_classes = d["num_classes"] or None
    groups = None
    if d["source"] == "synthetic":
        base = synthetic_citation_graph(n=d["nodes"], C=d["classes"], f=d["features"],
                                        avg_degree=d["avg_degree"], homophily=d["homophily"],
                                        topic_purity=d["topic_purity"], seed=d["graph_seed"])
    elif d["format"] == "edgelist":
        base, groups = read_edgelist_dir(d["path"], header=d["header"], num_classes=num_classes)
    else:
        base = load_graph(d["path"], d["format"])
    if d["split"] == "groups":
        if groups is None:
            raise ContractError(f"{d['path']} has no groups.txt")
        return split_by_group(base, groups, d["shadow_groups"], d["target_groups"])
    shift = ShiftConfig(d["shift_dims"], d["shift_strength"], d["shift_noise"])
    target_shift = None if d["target_strength"] is None else replace(shift, strength=d["target_strength"])
    return spurious_benchmark(base, shift, d["shadow_seed"], d["target_seed"], d["split_seed"], target_shift)


def prepare(cfg: ExperimentConfig, out: Path) -> DatasetBundle:
    bundle = build_bundle(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_container(bundle.target, out / "target.graph")
    write_container(bundle.shadow, out / "shadow.graph")
    (out / "meta.json").write_text(json.dumps(bundle.meta, indent=2, sort_keys=True, default=str) + "\n")
    return bundle


# --------------------------------------------------------------------- run

def result_row(res: RunResult) -> list:
    r = res.report
    return [res.seed, res.variant, r.accuracy, r.auc, r.recall, res.target_train_acc,
            res.target_test_acc, res.shadow_train_acc, res.shadow_test_acc]


def aggregate_rows(rows: list[list]) -> list[list]:
    """Mean and standard deviation (ddof=1, 0 for one seed) per variant, in first-seen order."""
    out = []
    for variant in dict.fromkeys(r[1] for r in rows):
        block = np.array([r[2:] for r in rows if r[1] == variant], dtype=np.float64)
        std = block.std(axis=0, ddof=1) if len(block) > 1 else np.zeros(block.shape[1])
        out.append(["mean", variant, *block.mean(axis=0)])
        out.append(["std", variant, *std])
    return out


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, (float, np.floating)) else str(v)


def format_csv(rows: list[list], prefix: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*prefix, *COLUMNS])
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _checkpoint(res: RunResult, ckpt: Path, cfg: PipelineConfig) -> None:
    stem = f"{res.variant}-seed{res.seed}"
    save_params(ckpt / f"{stem}-shadow.params", res.shadow.params, res.shadow.config, role="shadow")
    save_params(ckpt / f"{stem}-target.params", res.target.params, res.target.config, role="target")
    save_params(ckpt / f"{stem}-attack.params", res.attack.params, role="attack", k=res.attack.k,
                hidden=cfg.attack_hidden)


def run_experiment(cfg: ExperimentConfig, out: Path, bundle: DatasetBundle | None = None) -> list[list]:
    """Every (variant, seed) pair of ``cfg``; writes the results directory and returns all CSV rows."""
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        bundle = build_bundle(cfg) if bundle is None else bundle
        log.info("target %s: n=%d f=%d C=%d; shadow %s: n=%d f=%d C=%d",
                 bundle.target.name, bundle.target.n, bundle.target.f, bundle.target.C,
                 bundle.shadow.name, bundle.shadow.n, bundle.shadow.f, bundle.shadow.C)
        rows = []
        for variant in cfg.variants:
            pcfg = cfg.pipeline_config(variant)
            for seed in cfg.seeds:
                res = run_pipeline(bundle, pcfg, seed=seed)
                _checkpoint(res, ckpt, pcfg)
                rows.append(result_row(res))
                log.info("%s seed %d: ACC %.4f AUC %.4f Recall %.4f target %.4f/%.4f", variant, seed,
                         res.report.accuracy, res.report.auc, res.report.recall,
                         res.target_train_acc, res.target_test_acc)
        rows += aggregate_rows(rows)
        (out / "metrics.csv").write_text(format_csv(rows))
        return rows
    except Exception:
        log.exception("run failed")
        raise
    finally:
        log.removeHandler(handler)
        handler.close()


def run_sweep(cfg: ExperimentConfig, param: str, values: Sequence[str], out: Path) -> list[list]:
    """One experiment per value, each in ``out/<param>=<value>``; combined rows go to ``sweep.csv``."""
    if param not in SWEEP_PARAMS:
        raise ConfigError([f"sweep parameter {param!r} is unknown; expected one of {', '.join(SWEEP_PARAMS)}"])
    if not values:
        raise ConfigError([f"sweep over {param} has an empty value list"])
    section, key = SWEEP_PARAMS[param]
    configs = []
    errors = []
    for value in values:
        try:
            configs.append(cfg.with_overrides({(section, key): str(value)}))
        except ConfigError as exc:
            errors += [f"{param}={value}: {e}" for e in exc.errors]
    if errors:
        raise ConfigError(errors)
    bundle = build_bundle(cfg)
    rows = []
    for value, sub in zip(values, configs):
        rows += [[param, str(value), *r] for r in run_experiment(sub, out / f"{param}={value}", bundle)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(format_csv(rows, prefix=("parameter", "value")))
    return rows


# -------------------------------------------------------------------- main

def _with_cli_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seeds", None):
        overrides[("experiment", "seeds")] = args.seeds
    if getattr(args, "variant", None):
        overrides[("experiment", "variants")] = ",".join(args.variant)
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(args, cfg_path: str) -> Path:
    return Path(args.out) if args.out else default_output_root() / Path(cfg_path).stem


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphmia", description="Membership inference experiments on graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("prepare", "build the shadow/target graphs and write them as containers"),
                       ("run", "train shadow, attack and target models and report attack metrics"),
                       ("sweep", "repeat `run` over the values of one hyperparameter"),
                       ("validate", "check a config file and print it with defaults resolved")):
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True, help="INI experiment config")
        if name != "validate":
            sp.add_argument("--out", help="results directory (default: $GRAPHMIA_OUT/<config name>)")
        if name in ("run", "sweep", "validate"):
            sp.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-4")
            sp.add_argument("--variant", action="append", choices=VARIANTS,
                            help="variant to run; repeat for several")
        if name == "sweep":
            sp.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
            sp.add_argument("--values", required=True, help="comma-separated values")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _with_cli_overrides(validate_config(args.config), args)
        if args.command == "validate":
            sys.stdout.write(cfg.to_ini())
        elif args.command == "prepare":
            out = _out_dir(args, args.config)
            bundle = prepare(cfg, out)
            print(f"wrote {out}/target.graph (n={bundle.target.n}) and {out}/shadow.graph (n={bundle.shadow.n})")
        elif args.command == "run":
            out = _out_dir(args, args.config)
            run_experiment(cfg, out)
            sys.stdout.write((out / "metrics.csv").read_text())
        else:
            out = _out_dir(args, args.config)
            run_sweep(cfg, args.param, list(_str_list(args.values)), out)
            print(f"wrote {out / 'sweep.csv'}")
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

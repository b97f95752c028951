"""Experiment configuration: documented defaults, strict validation, dotted overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

from . import align, xai
from .augment import AugmentConfig
from .data import OS_TAGS, SynthConfig
from .detect import DetectorConfig
from .eval.protocols import METHODS, PROTOCOLS, ProtocolConfig
from .nn import TrainConfig


class ConfigError(ValueError):
    pass


SYNTH_DEFAULTS = {
    "n_benign": 1000,
    "n_anomalies": 10,
    "d": 30,
    "n_clusters": 4,
    "anomaly_rarity": 0.7,
    "n_nuisance": 8,
    "nuisance_p": [0.1, 0.3],
    "shift": 0.0,
    "seed": None,  # None -> the run seed
}
TARGET_SYNTH_DEFAULTS = dict(SYNTH_DEFAULTS, shift=0.3)

DEFAULTS = {
    "source": None,
    "target": None,
    "augment": {
        "enabled": False,
        "latent_dim": 8,
        "epochs": 200,
        "learning_rate": 0.003,
        "batch_size": 64,
        "n_samples": None,
    },
    "selection": {
        "alpha": 0.5,
        "beta": 0.5,
        "gamma": 0.5,
        "xi": 0.95,
        "shap": {
            "n_coalitions": None,
            "background_size": 50,
            "explained_instances": 50,
            "instances": "top_error",
        },
    },
    "nn": {
        "learning_rate": 0.003,
        "batch_size": 128,
        "epochs": 100,
        "validation_fraction": 0.1,
        "lambda_reg": 0.01,
    },
    "surrogate": {
        "learning_rate": 0.003,
        "batch_size": 128,
        "epochs": 50,
    },
    "transfer": {
        "learning_rate": 0.001,
        "batch_size": 128,
        "epochs": 50,
        "lambda_src": 1.0,
        "p2_dropout": 0.2,
        "p3_dropout": 0.2,
    },
    "contrastive": {
        "tau": 0.1,
        "delta": 0.8,
        "batch_size": 128,
        "epochs": 100,
        "lr": 0.0001,
        "hard_negative_weight": 2.0,
        "n_clusters": 4,
    },
    "siamese": {
        "margin": 1.0,
        "lr": 0.001,
        "epochs": 30,
        "batch_size": 128,
        "pairs_per_setting": 512,
    },
    "detectors": {
        "if_n_trees": 100,
        "if_subsample": 256,
        "ocsvm_nu": 0.1,
        "ocsvm_rff_dim": 200,
        "ocsvm_gamma": None,
        "ocsvm_epochs": 50,
        "lof_k": 20,
        "knn_k": 10,
        "dbscan_eps": None,
        "dbscan_eps_scale": 1.0,
        "dbscan_k": 4,
        "dbscan_min_pts": 4,
        "net_epochs": 50,
        "net_lr": 0.001,
        "net_batch_size": 128,
    },
    "protocol": {
        "p0_train_fraction": 0.7,
        "p2_tune_fraction": 0.3,
        "p3_detector_input": "aligned",
        "ndcg_cutoff": None,
    },
    "methods": ["IsolationForest", "OneClassSVM", "LOF", "KNN", "DBSCAN", "DeepSVDD", "AAE"],
    "protocols": ["P0", "P1", "P2", "P3"],
    "seeds": [0],
    "output_dir": "aptkit-out",
}

# keys whose values are free-form blocks checked separately
_DATASET_KEYS = ("source", "target")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: Optional[Path] = None
    synthetic: Optional[dict] = None
    os_tag: str = "Synthetic"

    def synth_config(self, run_seed: int, domain: str, scenario: int) -> SynthConfig:
        s = dict(self.synthetic)
        fixed = s.pop("seed")
        seed = run_seed if fixed is None else fixed
        return SynthConfig(seed=int(seed), domain=domain, scenario=scenario,
                           nuisance_p=tuple(s.pop("nuisance_p")), **s)


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # fully defaulted, validated JSON-compatible tree (the echo)
    source: DatasetSpec
    target: DatasetSpec
    protocol: ProtocolConfig
    augment: AugmentConfig
    augment_enabled: bool
    methods: tuple
    protocols: tuple
    seeds: tuple
    output_dir: Path

    def echo(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


# ------------------------------------------------------------------ tree helpers


def _merge(defaults: Any, given: Any, path: str) -> Any:
    """Overlay ``given`` onto ``defaults``; unknown keys are errors."""
    if isinstance(defaults, dict) and defaults:
        if not isinstance(given, dict):
            raise ConfigError(f"{path or 'config'} must be an object")
        for key in given:
            if key not in defaults:
                raise ConfigError(f"unknown key '{_join(path, key)}'")
        return {k: _merge(v, given[k], _join(path, k)) if k in given else copy.deepcopy(v)
                for k, v in defaults.items()}
    return copy.deepcopy(given)


def _join(path, key):
    return f"{path}.{key}" if path else key


def parse_override(text: str):
    """``a.b=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def apply_overrides(tree: dict, overrides) -> dict:
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        parts = key.split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override below non-object key in {key!r}")
        node[parts[-1]] = value
    return tree


# ------------------------------------------------------------------ validation


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _dataset(spec, role: str, base_dir: Path, synth_defaults: dict) -> tuple:
    if spec is None:
        raise ConfigError(f"'{role}' is required")
    if isinstance(spec, str):
        spec = {"path": spec}
    _require(isinstance(spec, dict), f"'{role}' must be a path or an object")
    allowed = {"path", "synthetic", "os", "name"}
    for key in spec:
        if key not in allowed:
            raise ConfigError(f"unknown key '{role}.{key}'")
    _require(("path" in spec) != ("synthetic" in spec), f"'{role}' needs exactly one of path / synthetic")
    name = spec.get("name", role)
    _require(isinstance(name, str) and name, f"'{role}.name' must be a nonempty string")
    os_tag = spec.get("os", "Synthetic" if "synthetic" in spec else "Unknown")
    _require(os_tag in OS_TAGS + ("Unknown",), f"'{role}.os' must be one of {OS_TAGS}")
    if "path" in spec:
        p = Path(spec["path"])
        if not p.is_absolute():
            p = base_dir / p
        _require(p.is_file(), f"'{role}.path' does not exist: {p}")
        echo = {"path": str(spec["path"]), "os": os_tag, "name": name}
        return DatasetSpec(name, path=p, os_tag=os_tag), echo
    synth = _merge(synth_defaults, spec["synthetic"], f"{role}.synthetic")
    pair = synth["nuisance_p"]
    _require(isinstance(pair, list) and len(pair) == 2, f"'{role}.synthetic.nuisance_p' must be [lo, hi]")
    try:
        probe = dict(synth, seed=0 if synth["seed"] is None else synth["seed"])
        SynthConfig(**{k: (tuple(v) if k == "nuisance_p" else v) for k, v in probe.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{role}.synthetic': {exc}") from exc
    echo = {"synthetic": synth, "os": os_tag, "name": name}
    return DatasetSpec(name, synthetic=synth, os_tag=os_tag), echo


def _build(cls, values: dict, where: str, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{where}': {exc}") from exc


def validate_tree(tree: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config must be a JSON object")
    rest = {k: v for k, v in tree.items() if k not in _DATASET_KEYS}
    merged = _merge({k: v for k, v in DEFAULTS.items() if k not in _DATASET_KEYS}, rest, "")
    source, src_echo = _dataset(tree.get("source"), "source", base_dir, SYNTH_DEFAULTS)
    target, tgt_echo = _dataset(tree.get("target"), "target", base_dir, TARGET_SYNTH_DEFAULTS)
    _require(source.name != target.name, "source and target need different names")

    methods = merged["methods"]
    _require(isinstance(methods, list) and methods, "methods must be a nonempty list")
    for m in methods:
        _require(m in METHODS, f"unknown method {m!r}; expected one of {METHODS}")
    protocols = merged["protocols"]
    _require(isinstance(protocols, list) and protocols, "protocols must be a nonempty list")
    for p in protocols:
        _require(p in PROTOCOLS, f"unknown protocol {p!r}; expected one of {PROTOCOLS}")
    seeds = merged["seeds"]
    _require(isinstance(seeds, list) and seeds, "seeds must be a nonempty list")
    _require(all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds),
             "seeds must be nonnegative integers")
    _require(len(set(seeds)) == len(seeds), "seeds must be unique")
    _require(len(set(methods)) == len(methods) and len(set(protocols)) == len(protocols),
             "methods and protocols must not repeat")

    nn, sur, tr = merged["nn"], merged["surrogate"], merged["transfer"]
    sel, con, sia = merged["selection"], merged["contrastive"], merged["siamese"]
    train = _build(TrainConfig, dict(learning_rate=nn["learning_rate"], batch_size=nn["batch_size"],
                                     epochs=nn["epochs"], validation_fraction=nn["validation_fraction"]), "nn")
    finetune = replace(train, learning_rate=tr["learning_rate"], batch_size=tr["batch_size"], epochs=tr["epochs"])
    _build(TrainConfig, dict(learning_rate=tr["learning_rate"], batch_size=tr["batch_size"],
                             epochs=tr["epochs"]), "transfer")
    surrogate = _build(TrainConfig, dict(learning_rate=sur["learning_rate"], batch_size=sur["batch_size"],
                                         epochs=sur["epochs"]), "surrogate")
    shap = _build(xai.ShapConfig, sel["shap"], "selection.shap")
    contrastive = _build(align.ContrastiveConfig, {k: v for k, v in con.items() if k != "n_clusters"},
                         "contrastive")
    siamese = _build(align.SiameseConfig, sia, "siamese")
    detector = _build(DetectorConfig, merged["detectors"], "detectors")
    pc = merged["protocol"]
    protocol = _build(ProtocolConfig, dict(
        train=train, finetune=finetune, surrogate=surrogate, shap=shap,
        alpha=sel["alpha"], beta=sel["beta"], gamma=sel["gamma"], xi=sel["xi"],
        lambda_src=tr["lambda_src"], lambda_reg=nn["lambda_reg"],
        p2_dropout=tr["p2_dropout"], p3_dropout=tr["p3_dropout"],
        p2_tune_fraction=pc["p2_tune_fraction"], p0_train_fraction=pc["p0_train_fraction"],
        n_clusters=con["n_clusters"], contrastive=contrastive, siamese=siamese, detector=detector,
        p3_detector_input=pc["p3_detector_input"], ndcg_cutoff=pc["ndcg_cutoff"],
    ), "protocol")
    _require(0.0 < pc["p0_train_fraction"] < 1.0, "protocol.p0_train_fraction must be in (0, 1)")
    _require(0.0 < pc["p2_tune_fraction"] < 1.0, "protocol.p2_tune_fraction must be in (0, 1)")
    _require(sel["alpha"] >= 0 and sel["beta"] >= 0 and sel["gamma"] >= 0,
             "selection weights must be nonnegative")
    _require(isinstance(merged["augment"]["enabled"], bool), "augment.enabled must be true or false")
    aug = _build(AugmentConfig, {k: v for k, v in merged["augment"].items() if k != "enabled"}, "augment")
    _require(isinstance(merged["output_dir"], str) and merged["output_dir"], "output_dir must be a path")
    out = Path(merged["output_dir"])
    if not out.is_absolute():
        out = base_dir / out

    raw = dict(merged, source=src_echo, target=tgt_echo)
    return ExperimentConfig(raw, source, target, protocol, aug, merged["augment"]["enabled"],
                            tuple(methods), tuple(protocols), tuple(seeds), out)


def validate_config(path, overrides=()) -> ExperimentConfig:
    """Load a JSON config, apply ``key.path=value`` overrides, fill defaults and validate."""
    path = Path(path)
    try:
        tree = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_tree(apply_overrides(tree, overrides), path.parent)


def defaults_echo() -> str:
    """The documented default table as JSON (datasets left unset)."""
    return json.dumps(DEFAULTS, indent=2, sort_keys=True)

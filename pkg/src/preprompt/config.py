"""Run configuration: TOML schema, validation, defaults, dataset factories.

The whole file is validated before any run starts; unknown keys and bad
values are rejected with the offending ``section.key`` path.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import BackboneConfig, PREFIX_MODE, PROMPT_MODE
from .config_util import take_section
from .data import LabeledImageSet, gen_synthetic, load_idx
from .errors import ConfigError
from .harness import Scenario, make_splits
from .pipeline import PipelineConfig, StageConfig


def default_prompted_layers(depth: int) -> tuple[int, ...]:
    """First ceil(5/6 * depth)-ish layers, mirroring a layers-1..5-of-12 ratio."""
    n = max(1, int(round(depth * 5 / 6)))
    return tuple(range(min(n, depth)))


@dataclass
class PretrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 7
    source: str = "synthetic"
    synthetic: dict = field(default_factory=lambda: {
        "classes": 10, "per_class": 200, "noise": 0.12, "seed": 101})
    idx: dict | None = None


@dataclass
class ScenarioSpec:
    source: str = "synthetic"
    tasks: int = 5
    classes_per_task: int | None = None
    first_task_size: int | None = None
    seeds: list[int] = field(default_factory=lambda: [11, 12, 13])
    synthetic: dict = field(default_factory=lambda: {
        "classes": 20, "train_per_class": 150, "test_per_class": 40,
        "noise": 0.12, "seed": 202})
    idx: dict | None = None


@dataclass
class RunConfig:
    backbone: BackboneConfig
    pretrain: PretrainConfig
    prompt_mode: str
    prompt_len: int
    prompted_layers: tuple[int, ...]
    prompt_stage: StageConfig
    label_stage: StageConfig
    scenario: ScenarioSpec
    output_dir: str

    def pipeline_config(self, *, use_prompt_stage: bool = True,
                        translate_prompt_stage: bool = True,
                        translate_label_stage: bool = True) -> PipelineConfig:
        return PipelineConfig(
            prompt_mode=self.prompt_mode, prompt_len=self.prompt_len,
            prompted_layers=self.prompted_layers,
            prompt_stage=self.prompt_stage, label_stage=self.label_stage,
            use_prompt_stage=use_prompt_stage,
            translate_prompt_stage=translate_prompt_stage,
            translate_label_stage=translate_label_stage)

    def pretrain_dataset(self) -> LabeledImageSet:
        pc = self.pretrain
        if pc.source == "synthetic":
            s = pc.synthetic
            return gen_synthetic(s["classes"], s["per_class"],
                                 image_h=self.backbone.image_h,
                                 image_w=self.backbone.image_w,
                                 channels=self.backbone.channels,
                                 noise=s["noise"], seed=s["seed"])
        ds = load_idx(pc.idx["images"], pc.idx["labels"])
        cap = pc.idx.get("max_per_class")
        if cap is not None:
            import numpy as np
            keep = np.concatenate([np.flatnonzero(ds.labels == c)[:cap]
                                   for c in np.unique(ds.labels)])
            ds = ds.subset(np.sort(keep))
        return ds

    def scenario_datasets(self) -> tuple[LabeledImageSet, LabeledImageSet]:
        sc = self.scenario
        if sc.source == "synthetic":
            import numpy as np
            s = sc.synthetic
            n_train, n_test = s["train_per_class"], s["test_per_class"]
            bank = gen_synthetic(s["classes"], n_train + n_test,
                                 image_h=self.backbone.image_h,
                                 image_w=self.backbone.image_w,
                                 channels=self.backbone.channels,
                                 noise=s["noise"], seed=s["seed"])
            train_idx, test_idx = [], []
            for c in range(s["classes"]):
                rows = np.flatnonzero(bank.labels == c)
                train_idx.append(rows[:n_train])
                test_idx.append(rows[n_train:])
            return (bank.subset(np.concatenate(train_idx)),
                    bank.subset(np.concatenate(test_idx)))
        paths = sc.idx
        return (load_idx(paths["train_images"], paths["train_labels"]),
                load_idx(paths["test_images"], paths["test_labels"]))

    def make_scenario(self, seed: int) -> Scenario:
        train, test = self.scenario_datasets()
        caps = {}
        if self.scenario.source == "idx" and self.scenario.idx:
            caps = {
                "max_train_per_class": self.scenario.idx.get("max_train_per_class"),
                "max_test_per_class": self.scenario.idx.get("max_test_per_class")}
        return make_splits(train, test, self.scenario.tasks,
                           classes_per_task=self.scenario.classes_per_task,
                           first_task_size=self.scenario.first_task_size,
                           seed=seed, **caps)


def parse_config(raw: dict[str, Any]) -> RunConfig:
    known = {"backbone", "pretrain", "prompt", "prompt_stage", "label_stage",
             "scenario", "output"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    bb = take_section(raw.get("backbone", {}), "backbone", {
        "image_h": (int, 28), "image_w": (int, 28), "channels": (int, 1),
        "patch": (int, 7), "embed_dim": (int, 64), "heads": (int, 4),
        "depth": (int, 6), "mlp_ratio": (float, 4.0)})
    backbone = BackboneConfig(**bb)

    pt = take_section(raw.get("pretrain", {}), "pretrain", {
        "epochs": (int, 8), "batch_size": (int, 64),
        "learning_rate": (float, 1e-3), "seed": (int, 7),
        "source": (str, "synthetic")},
        subsections={"synthetic", "idx"})
    if pt["source"] not in ("synthetic", "idx"):
        raise ConfigError("pretrain.source must be 'synthetic' or 'idx'")
    if pt["learning_rate"] <= 0:
        raise ConfigError("pretrain.learning_rate must be positive")
    if pt["epochs"] < 0 or pt["batch_size"] < 1:
        raise ConfigError("pretrain.epochs/batch_size out of range")
    pt_syn = take_section(raw.get("pretrain", {}).get("synthetic", {}),
                          "pretrain.synthetic", {
        "classes": (int, 10), "per_class": (int, 200),
        "noise": (float, 0.12), "seed": (int, 101)})
    pt_idx = raw.get("pretrain", {}).get("idx")
    if pt_idx is not None:
        pt_idx = take_section(pt_idx, "pretrain.idx", {
            "images": (str, None), "labels": (str, None),
            "max_per_class": (int, None)})
    if pt["source"] == "idx" and (pt_idx is None or not pt_idx.get("images")):
        raise ConfigError("pretrain.idx.images/labels required for idx source")
    pretrain = PretrainConfig(epochs=pt["epochs"], batch_size=pt["batch_size"],
                              learning_rate=pt["learning_rate"], seed=pt["seed"],
                              source=pt["source"], synthetic=pt_syn, idx=pt_idx)

    pr = take_section(raw.get("prompt", {}), "prompt", {
        "mode": (str, "prefix"), "length": (int, 5), "layers": (list, None)})
    mode = {"prefix": PREFIX_MODE, "prompt": PROMPT_MODE}.get(pr["mode"])
    if mode is None:
        raise ConfigError("prompt.mode must be 'prefix' or 'prompt'")
    if pr["length"] < 1:
        raise ConfigError("prompt.length must be >= 1")
    if pr["layers"] is None:
        layers = default_prompted_layers(backbone.depth)
    else:
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in pr["layers"]):
            raise ConfigError("prompt.layers must be a list of integers")
        if any(v < 1 or v > backbone.depth for v in pr["layers"]):
            raise ConfigError(
                f"prompt.layers must be 1-indexed within 1..{backbone.depth}")
        layers = tuple(sorted(v - 1 for v in pr["layers"]))

    def stage(section_name: str, lr_default: float) -> StageConfig:
        sec = take_section(raw.get(section_name, {}), section_name, {
            "learning_rate": (float, lr_default), "epochs": (int, 50),
            "batch_size": (int, 24), "beta1": (float, 0.9),
            "beta2": (float, 0.999), "epsilon": (float, 1e-8)})
        try:
            return StageConfig(**sec)
        except ConfigError as exc:
            raise ConfigError(f"{section_name}: {exc}") from None

    sc = take_section(raw.get("scenario", {}), "scenario", {
        "source": (str, "synthetic"), "tasks": (int, 5),
        "classes_per_task": (int, None), "first_task_size": (int, None),
        "seeds": (list, None)},
        subsections={"synthetic", "idx"})
    if sc["source"] not in ("synthetic", "idx"):
        raise ConfigError("scenario.source must be 'synthetic' or 'idx'")
    if sc["tasks"] < 1:
        raise ConfigError("scenario.tasks must be >= 1")
    seeds = sc["seeds"] if sc["seeds"] is not None else [11, 12, 13]
    if (not seeds or not all(isinstance(v, int) and not isinstance(v, bool)
                             for v in seeds)):
        raise ConfigError("scenario.seeds must be a nonempty list of integers")
    sc_syn = take_section(raw.get("scenario", {}).get("synthetic", {}),
                          "scenario.synthetic", {
        "classes": (int, 20), "train_per_class": (int, 150),
        "test_per_class": (int, 40), "noise": (float, 0.12), "seed": (int, 202)})
    sc_idx = raw.get("scenario", {}).get("idx")
    if sc_idx is not None:
        sc_idx = take_section(sc_idx, "scenario.idx", {
            "train_images": (str, None), "train_labels": (str, None),
            "test_images": (str, None), "test_labels": (str, None),
            "max_train_per_class": (int, None), "max_test_per_class": (int, None)})
    if sc["source"] == "idx" and (sc_idx is None or not sc_idx.get("train_images")):
        raise ConfigError("scenario.idx paths required for idx source")
    scenario = ScenarioSpec(source=sc["source"], tasks=sc["tasks"],
                            classes_per_task=sc["classes_per_task"],
                            first_task_size=sc["first_task_size"],
                            seeds=list(seeds), synthetic=sc_syn, idx=sc_idx)

    out = take_section(raw.get("output", {}), "output", {"dir": (str, "results")})

    return RunConfig(backbone=backbone, pretrain=pretrain, prompt_mode=mode,
                     prompt_len=pr["length"], prompted_layers=layers,
                     prompt_stage=stage("prompt_stage", 5e-3),
                     label_stage=stage("label_stage", 0.1),
                     scenario=scenario, output_dir=out["dir"])


def read_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return parse_config(raw)


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides (TOML literals) to a raw config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, value = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            parsed = tomllib.loads(f"v = {value.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value.strip()
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a value")
        node[keys[-1]] = parsed
    return raw

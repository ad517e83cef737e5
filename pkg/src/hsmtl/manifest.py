"""Run manifest: one YAML file describing tasks, architecture, training and
evaluation for a whole experiment sweep.

Example:

    output_dir: runs/demo
    tasks:
      - id: scene_a
        cube: data/scene_a.bsq
        labels: data/scene_a_labels.bsq
        num_classes: 4
        align: ["repeat_last 1"]
    arch:
      patch_size: 9
      stem_channels: 64
      num_residual_blocks: 2
      feature_dim: 128
    train:
      batch_size: 20
      shared_epochs: 100
      finetune_epochs: 30
      share_first_conv: true
    eval:
      n_per_class: [5, 10, 15, 20, 25, 30]
      seeds: [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
      methods: [single, multitask]

The whole manifest is validated (unknown keys rejected) before any command
touches the filesystem for output.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .data import AlignmentSpec
from .network import ArchConfig
from .trainer import TrainConfig


class ManifestError(ValueError):
    """Raised for structurally invalid manifests."""


_TASK_KEYS = {"id", "cube", "labels", "num_classes", "align"}
_TOP_KEYS = {"output_dir", "tasks", "arch", "train", "eval"}
_EVAL_KEYS = {"n_per_class", "seeds", "methods"}
_METHODS = {"single", "multitask"}


@dataclass
class TaskEntry:
    task_id: str
    cube_path: str
    labels_path: str
    num_classes: int
    align: AlignmentSpec


@dataclass
class RunManifest:
    output_dir: str
    tasks: list[TaskEntry]
    arch: ArchConfig
    train: TrainConfig
    n_per_class: list[int]
    seeds: list[int]
    methods: list[str]
    source_path: str | None = None

    def task(self, task_id: str) -> TaskEntry:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ManifestError(f"manifest has no task {task_id!r}")


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ManifestError(f"unknown keys in {where}: {unknown} "
                            f"(allowed: {sorted(allowed)})")


def _build_dataclass(cls, section: dict, where: str):
    allowed = set(cls.__dataclass_fields__)
    _require_keys(section, allowed, where)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid {where}: {exc}") from exc


def load_manifest(path: str) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: manifest must be a mapping")
    _require_keys(raw, _TOP_KEYS, "manifest")
    for key in ("output_dir", "tasks"):
        if key not in raw:
            raise ManifestError(f"{path}: missing required key {key!r}")

    base = os.path.dirname(os.path.abspath(path))

    tasks = []
    if not isinstance(raw["tasks"], list) or not raw["tasks"]:
        raise ManifestError("tasks must be a non-empty list")
    for i, entry in enumerate(raw["tasks"]):
        if not isinstance(entry, dict):
            raise ManifestError(f"tasks[{i}] must be a mapping")
        _require_keys(entry, _TASK_KEYS, f"tasks[{i}]")
        for key in ("id", "cube", "labels", "num_classes"):
            if key not in entry:
                raise ManifestError(f"tasks[{i}] missing required key {key!r}")
        align = AlignmentSpec.parse(entry.get("align"))
        tasks.append(TaskEntry(
            task_id=str(entry["id"]),
            cube_path=os.path.join(base, entry["cube"]),
            labels_path=os.path.join(base, entry["labels"]),
            num_classes=int(entry["num_classes"]),
            align=align))
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"duplicate task ids: {ids}")

    arch = _build_dataclass(ArchConfig, raw.get("arch") or {}, "arch")
    train = _build_dataclass(TrainConfig, raw.get("train") or {}, "train")

    eval_section = raw.get("eval") or {}
    _require_keys(eval_section, _EVAL_KEYS, "eval")
    n_per_class = [int(n) for n in eval_section.get("n_per_class", [10])]
    seeds = [int(s) for s in eval_section.get("seeds", list(range(10)))]
    methods = list(eval_section.get("methods",
                                    ["multitask"] if len(tasks) > 1 else ["single"]))
    bad = sorted(set(methods) - _METHODS)
    if bad:
        raise ManifestError(f"unknown methods {bad}; allowed: {sorted(_METHODS)}")
    if "multitask" in methods and len(tasks) < 2:
        raise ManifestError("multitask method requires at least two tasks")
    if not n_per_class or not seeds:
        raise ManifestError("eval.n_per_class and eval.seeds must be non-empty")
    if min(n_per_class) < 1:
        raise ManifestError("eval.n_per_class entries must be >= 1")

    return RunManifest(
        output_dir=os.path.join(base, raw["output_dir"]),
        tasks=tasks, arch=arch, train=train,
        n_per_class=n_per_class, seeds=seeds, methods=methods,
        source_path=os.path.abspath(path))

"""Experiment orchestration: configs, run directories, and stage sequencing.

A run takes one JSON-compatible config, pretrains (or loads) a backbone,
freezes it, then walks the domain stream stage by stage: expand the pool
(when an expansion ratio is set), train prompts and head on the current
stage only, and score every task's test set to fill one row of the accuracy
matrix. Artifacts land in a run directory whose name is derived from the
config hash, so identical configs collide into identical paths.

Files written per run: ``config_echo.json``, ``status.json``,
``pretrain_log.csv`` (when pretraining happens here), ``epoch_log.csv``,
``accuracy_matrix.csv``, ``f1_matrix.csv``, ``metrics.json``,
``stage_similarity.csv``, ``backbone.bin`` and ``checkpoint_stage_<n>.bin``.
The ``PCL_RUN_DIR`` environment variable overrides the output root.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .data import (
    DEFAULT_SPLIT,
    LONG_TAIL_PROPORTIONS,
    StageStream,
    augment_training_subset,
    pretrain_datasets,
    synth_stream,
)
from .errors import ConfigError, InputError
from .losses import LossConfig
from .metrics import save_matrix_csv, summarize
from .optim import OptimSettings
from .pool import PromptGroup, PromptPool, round_half_up
from .rng import make_rng, rng_state
from .tensor import Tensor
from .train import TrainSettings, evaluate, pretrain_backbone, train_stage
from .vit import Backbone, ClassifierHead, ViTConfig

RUN_DIR_ENV = "PCL_RUN_DIR"


@dataclass(frozen=True)
class PretrainConfig:
    """Backbone pretraining knobs; this phase runs before any stage."""

    epochs: int = 60
    patience: int = 10
    accuracy_floor: float = 0.8
    stop_accuracy: Optional[float] = 0.995
    n_train: int = 3072
    n_val: int = 512
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("pretrain epochs and batch_size must be >= 1")
        if not (0.0 < self.accuracy_floor <= 1.0):
            raise ConfigError(f"accuracy_floor must be in (0, 1], got {self.accuracy_floor}")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic stream shape."""

    num_domains: int = 3
    n_per_domain: int = 1000
    image_size: int = 32
    proportions: tuple[float, ...] = LONG_TAIL_PROPORTIONS
    split: tuple[float, float, float] = DEFAULT_SPLIT
    # Shifted domains lead by default so every stage transition crosses a
    # real distribution gap; the in-distribution neutral domain closes the
    # stream as a sanity floor.
    stage_order: Optional[tuple[int, ...]] = (1, 2, 0)
    augment: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs; fully JSON round-trippable."""

    seed: int = 0
    pool_size: int = 32
    expansion_ratio: float = 0.2
    epochs: int = 40
    patience: int = 5
    batch_size: int = 32
    readout: str = "query"
    avg_acc_form: str = "seen"
    expansion_sweep: Optional[tuple[float, ...]] = None
    backbone_checkpoint: Optional[str] = None
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if not (0.0 <= self.expansion_ratio <= 1.0):
            raise ConfigError(f"expansion_ratio must be in [0, 1], got {self.expansion_ratio}")
        if self.readout not in ("query", "refined"):
            raise ConfigError(f"readout must be 'query' or 'refined', got {self.readout!r}")
        if self.avg_acc_form not in ("seen", "diagonal"):
            raise ConfigError(f"avg_acc_form must be 'seen' or 'diagonal', got {self.avg_acc_form!r}")
        if self.vit.image_size != self.data.image_size:
            raise ConfigError(
                f"vit.image_size {self.vit.image_size} != data.image_size {self.data.image_size}"
            )
        if self.expansion_sweep is not None:
            for r in self.expansion_sweep:
                if not (0.0 < r <= 1.0):
                    raise ConfigError(f"sweep ratios must be in (0, 1], got {r}")

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        def convert(value):
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                return {f.name: convert(getattr(value, f.name))
                        for f in dataclasses.fields(value)}
            if isinstance(value, tuple):
                return [convert(v) for v in value]
            return value

        return convert(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build_config(cls, data, "")


_TUPLE_FIELDS = {
    "proportions", "split", "stage_order", "prompt_layers", "expansion_sweep",
}


def _build_config(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object, got {type(data).__name__}")
    fields_by_name = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields_by_name)
    if unknown:
        where = path or "<root>"
        raise ConfigError(f"unknown config keys at {where}: {sorted(unknown)}")
    kwargs = {}
    nested = {"loss": LossConfig, "optim": OptimSettings, "pretrain": PretrainConfig,
              "data": DataConfig, "vit": ViTConfig}
    for name, value in data.items():
        sub = path + "." + name if path else name
        if name in nested and not dataclasses.is_dataclass(value):
            kwargs[name] = _build_config(nested[name], value, sub)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, InputError) as exc:
        raise ConfigError(f"bad config at {path or '<root>'}: {exc}") from exc


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:10]


def resolve_run_dir(config: RunConfig, run_dir: Optional[str] = None) -> Path:
    if run_dir is not None:
        return Path(run_dir)
    root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
    return root / f"run_{config_hash(config)}"


# -- checkpoint glue -----------------------------------------------------

@dataclass
class RunState:
    config: RunConfig
    backbone: Backbone
    head: ClassifierHead
    pool: Optional[PromptPool]
    completed_stage: Optional[int]
    rng_state: Optional[dict]


def save_run_checkpoint(path, config: RunConfig, backbone: Backbone, head: ClassifierHead,
                        pool: Optional[PromptPool], completed_stage: Optional[int]) -> None:
    arrays = [("backbone." + n, t.numpy()) for n, t in backbone.state_items()]
    arrays += [(n, t.numpy()) for n, t in head.state_items()]
    meta = {
        "kind": "run" if pool is not None else "backbone",
        "config": config.to_dict(),
        "completed_stage": completed_stage,
        "backbone_frozen": backbone.frozen,
        "pool": pool.metadata() if pool is not None else None,
        "rng_state": rng_state(make_rng(config.seed, "resume",
                                        -1 if completed_stage is None else completed_stage)),
    }
    if pool is not None:
        arrays += [(n, t.numpy()) for n, t in pool.state_items()]
    write_checkpoint(str(path), arrays, meta)


def load_run_checkpoint(path) -> RunState:
    meta, arrays = read_checkpoint(str(path))
    config = RunConfig.from_dict(meta["config"])
    backbone = Backbone(config.vit, seed=config.seed)
    for name, t in backbone.state_items():
        t.data = arrays["backbone." + name].copy()
    if meta["backbone_frozen"]:
        backbone.freeze()
    head = ClassifierHead(config.vit.dim, config.vit.num_classes, seed=config.seed)
    head.w.data = arrays["head.w"].copy()
    head.b.data = arrays["head.b"].copy()
    pool = None
    if meta.get("pool"):
        pm = meta["pool"]
        pool = PromptPool(pm["base_size"], pm["dim"], pm["expansion_ratio"], pm["seed"])
        groups = []
        for gi, ginfo in enumerate(pm["groups"]):
            keys = Tensor(arrays[f"pool.{gi}.keys"], requires_grad=not ginfo["frozen"])
            values = Tensor(arrays[f"pool.{gi}.values"], requires_grad=not ginfo["frozen"])
            groups.append(PromptGroup(keys, values, ginfo["stage_id"]))
        pool.groups = groups
    return RunState(config, backbone, head, pool, meta.get("completed_stage"),
                    meta.get("rng_state"))


# -- file helpers --------------------------------------------------------

def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_epoch_log(path, rows) -> None:
    lines = ["stage,epoch,train_loss,val_acc"]
    for r in rows:
        lines.append(f"{r['stage']},{r['epoch']},{repr(float(r['train_loss']))},"
                     f"{repr(float(r['val_acc']))}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _set_status(run_dir: Path, status: str, error: Optional[str] = None) -> None:
    payload = {"status": status}
    if error is not None:
        payload["error"] = error
    _write_json(run_dir / "status.json", payload)


# -- experiment body -----------------------------------------------------

def build_stream(config: RunConfig) -> StageStream:
    d = config.data
    stream = synth_stream(config.seed, num_domains=d.num_domains,
                          n_per_domain=d.n_per_domain, image_size=d.image_size,
                          proportions=d.proportions, split=d.split,
                          stage_order=d.stage_order)
    if d.augment:
        for k, domain in enumerate(stream.domains):
            domain.train = augment_training_subset(domain.train, config.seed * 1000003 + k)
    return stream


def obtain_backbone(config: RunConfig, run_dir: Optional[Path] = None):
    """Load the configured backbone checkpoint, or pretrain and freeze one.

    Returns (backbone, head, pretrain_log); the log is empty when loading.
    """
    if config.backbone_checkpoint:
        state = load_run_checkpoint(config.backbone_checkpoint)
        if state.config.vit != config.vit:
            raise ConfigError(
                "backbone checkpoint was built for a different backbone shape"
            )
        if not state.backbone.frozen:
            state.backbone.freeze()
        return state.backbone, state.head, []
    p = config.pretrain
    tr, va = pretrain_datasets(config.seed, n_train=p.n_train, n_val=p.n_val,
                               image_size=config.data.image_size)
    backbone, head, log = pretrain_backbone(
        tr, va, config.vit, seed=config.seed, epochs=p.epochs, patience=p.patience,
        accuracy_floor=p.accuracy_floor, stop_accuracy=p.stop_accuracy,
        batch_size=p.batch_size, optim=config.optim)
    if run_dir is not None:
        _write_epoch_log(run_dir / "pretrain_log.csv", log)
        save_run_checkpoint(run_dir / "backbone.bin", config, backbone, head,
                            pool=None, completed_stage=None)
    return backbone, head, log


def _stage_settings(config: RunConfig) -> TrainSettings:
    return TrainSettings(epochs=config.epochs, patience=config.patience,
                         batch_size=config.batch_size, readout=config.readout,
                         seed=config.seed, loss=config.loss, optim=config.optim)


def _run_stages(config: RunConfig, run_dir: Path) -> dict:
    stream = build_stream(config)
    backbone, head, _ = obtain_backbone(config, run_dir)
    pool = PromptPool(config.pool_size, config.vit.dim,
                      expansion_ratio=config.expansion_ratio, seed=config.seed)
    t = stream.num_stages
    acc = np.zeros((t, t), dtype=np.float64)
    f1 = np.zeros((t, t), dtype=np.float64)
    epoch_rows: list[dict] = []
    checkpoints = []
    settings = _stage_settings(config)
    for stage in range(t):
        stream.begin_stage(stage)
        if stage >= 1 and config.expansion_ratio > 0:
            pool.expand(stage)
        epoch_rows.extend(train_stage(stage, stream, pool, backbone, head, settings))
        _write_epoch_log(run_dir / "epoch_log.csv", epoch_rows)
        for task in range(t):
            acc[stage, task], f1[stage, task] = evaluate(
                pool, backbone, head, stream.test_set(task),
                batch_size=max(config.batch_size, 64), readout=config.readout)
        save_matrix_csv(run_dir / "accuracy_matrix.csv", acc[: stage + 1])
        save_matrix_csv(run_dir / "f1_matrix.csv", f1[: stage + 1])
        ckpt = run_dir / f"checkpoint_stage_{stage}.bin"
        save_run_checkpoint(ckpt, config, backbone, head, pool, completed_stage=stage)
        checkpoints.append(str(ckpt))
    metrics = summarize(acc, avg_acc_form=config.avg_acc_form)
    _write_json(run_dir / "metrics.json", metrics)
    sim = pool.stage_similarity()
    save_matrix_csv(run_dir / "stage_similarity.csv", sim,
                    row_prefix="stage", col_prefix="stage")
    return {
        "run_dir": str(run_dir),
        "accuracy_matrix": acc,
        "f1_matrix": f1,
        "metrics": metrics,
        "stage_similarity": sim,
        "epoch_log": epoch_rows,
        "checkpoints": checkpoints,
    }


def _run_sweep(config: RunConfig, run_dir: Path) -> dict:
    ratios = config.expansion_sweep
    backbone_path = config.backbone_checkpoint
    if not backbone_path:
        base = replace(config, expansion_sweep=None)
        obtain_backbone(base, run_dir)
        backbone_path = str(run_dir / "backbone.bin")
    rows = []
    results = {}
    for ratio in ratios:
        sub = replace(config, expansion_ratio=ratio, expansion_sweep=None,
                      backbone_checkpoint=backbone_path)
        sub_dir = run_dir / f"rho_{ratio:g}"
        result = run_experiment(sub, run_dir=sub_dir)
        results[ratio] = result
        rows.append({
            "ratio": ratio,
            "prompts_added_per_stage": round_half_up(ratio * config.pool_size),
            **result["metrics"],
        })
    lines = ["ratio,prompts_added_per_stage,avg_acc,faa,bwt,avg_f"]
    for r in rows:
        lines.append(f"{r['ratio']:g},{r['prompts_added_per_stage']},"
                     f"{repr(r['avg_acc'])},{repr(r['faa'])},{repr(r['bwt'])},{repr(r['avg_f'])}")
    with open(run_dir / "expansion_sweep.csv", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return {"run_dir": str(run_dir), "sweep": results, "table": rows}


def run_experiment(config: RunConfig, run_dir: Optional[str] = None) -> dict:
    """Execute one config end to end; returns the in-memory results.

    Any failure is recorded in ``status.json`` (partial artifacts are left
    in place) and re-raised.
    """
    rd = resolve_run_dir(config, run_dir)
    rd.mkdir(parents=True, exist_ok=True)
    _write_json(rd / "config_echo.json", config.to_dict())
    _set_status(rd, "running")
    try:
        if config.expansion_sweep:
            result = _run_sweep(config, rd)
        else:
            result = _run_stages(config, rd)
    except BaseException as exc:
        _set_status(rd, "failed", error=f"{type(exc).__name__}: {exc}")
        raise
    _set_status(rd, "complete")
    return result

"""Stage training, backbone pretraining, and evaluation loops.

All loops share one engine: cosine-decayed AdamW over the trainable set and
early stopping on validation accuracy with a patience budget. Pretraining
restores its best-validation weights at the end; stage training keeps the
last epoch, the usual continual-learning convention. Batching order comes
from a dedicated seeded generator so identical configurations replay
identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import StageStream, Subset
from .errors import ContractError, InputError, TrainingError
from .losses import LossConfig, loss_similarity, loss_total
from .metrics import accuracy, macro_f1
from .optim import OptimSettings, cosine_lr
from .pool import PromptPool
from .rng import make_rng
from .tensor import Tensor
from .vit import Backbone, ClassifierHead, PromptedViT, ViTConfig

READOUT_MODES = ("query", "refined")


@dataclass(frozen=True)
class TrainSettings:
    """Per-stage loop knobs shared by pretraining and stage training."""

    epochs: int = 40
    patience: int = 5
    batch_size: int = 32
    readout: str = "query"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise InputError("epochs/batch_size must be >= 1 and patience >= 0")
        if self.readout not in READOUT_MODES:
            raise InputError(f"readout must be one of {READOUT_MODES}, got {self.readout!r}")


class PoolPromptProvider:
    """Feeds pool readouts into the backbone and collects them for the loss.

    In ``query`` mode each prompt layer reads the pool with its own [CLS]
    query. In ``refined`` mode one softmax-weighted readout of a fixed
    reference embedding is computed lazily and reused at every prompt layer.
    """

    def __init__(self, pool: PromptPool, readout: str = "query",
                 reference: Optional[Tensor] = None):
        if readout not in READOUT_MODES:
            raise InputError(f"readout must be one of {READOUT_MODES}, got {readout!r}")
        if readout == "refined" and reference is None:
            raise ContractError("refined readout needs a reference embedding")
        self.pool = pool
        self.readout = readout
        self.reference = reference
        self.collected: list[Tensor] = []
        self._cached: Optional[Tensor] = None

    def __call__(self, layer: int, query: Tensor) -> Tensor:
        if self.readout == "refined":
            if self._cached is None:
                self._cached = self.pool.refined_select(self.reference)
            phi = self._cached
        else:
            phi = self.pool.select(query)
        self.collected.append(phi)
        return T.reshape(phi, (phi.shape[0], 1, phi.shape[1]))

    def aggregated_phi(self) -> Optional[Tensor]:
        """Per-sample mean of the collected readouts, row-normalized."""
        if not self.collected:
            return None
        acc = self.collected[0]
        for phi in self.collected[1:]:
            acc = acc + phi
        return T.normalize_rows(T.scale(acc, 1.0 / len(self.collected)))


def _reference_embedding(backbone: Backbone, images: np.ndarray) -> Tensor:
    """Promptless final [CLS] features, detached (the backbone is frozen)."""
    with T.no_grad():
        r = backbone.cls_features(images)
    return Tensor(r.numpy())


def p_star_from(provider: PoolPromptProvider, pool: PromptPool, source: str) -> Optional[Tensor]:
    """The aggregate prompt vector the similarity loss scores against keys."""
    if source == "aggregated_phi":
        return provider.aggregated_phi()
    if source == "new_prompt_values":
        newest = pool.groups[-1].stage_id
        return T.normalize_rows(pool.stage_mean_value(newest))
    raise InputError(f"unknown p_star source {source!r}")


def batch_indices(n: int, batch_size: int, rng=None) -> list[np.ndarray]:
    """Index chunks covering [0, n); shuffled when an rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


def _predict(model: PromptedViT, pool: Optional[PromptPool], subset: Subset,
             batch_size: int, readout: str) -> np.ndarray:
    preds = []
    with T.no_grad():
        for idx in batch_indices(len(subset), batch_size):
            images = subset.images[idx]
            provider = None
            if pool is not None:
                reference = None
                if readout == "refined":
                    reference = _reference_embedding(model.backbone, images)
                provider = PoolPromptProvider(pool, readout, reference)
            logits = model.classify(images, provider)
            preds.append(T.argmax_rows(logits))
    return np.concatenate(preds)


def evaluate(pool: Optional[PromptPool], backbone: Backbone, head: ClassifierHead,
             subset: Subset, batch_size: int = 64, readout: str = "query") -> tuple[float, float]:
    """Score one dataset: (accuracy, macro F1). Single deterministic pass."""
    model = PromptedViT(backbone, head)
    preds = _predict(model, pool, subset, batch_size, readout)
    return (accuracy(preds, subset.labels),
            macro_f1(preds, subset.labels, head.num_classes))


def _run_epochs(trainable: list[Tensor], batch_loss, val_accuracy, n_train: int,
                *, epochs: int, patience: int, batch_size: int, optim: OptimSettings,
                rng, log: list[dict], stage_tag: int, stop_accuracy: float | None = None,
                restore_best: bool = False) -> float:
    """Shared epoch loop: cosine lr, early stop on stage validation accuracy.

    With ``restore_best`` the best-validation snapshot is reinstated at the
    end (useful for pretraining); otherwise the last weights are kept, which
    is the usual continual-learning convention for per-stage fitting.
    """
    if not trainable:
        raise ContractError("nothing to train: the trainable set is empty")
    opt = optim.build(trainable)
    best = -1.0
    best_snap = _snapshot(trainable)
    bad = 0
    for epoch in range(epochs):
        opt.lr = cosine_lr(optim.lr, epoch, epochs, warmup=optim.warmup_epochs)
        losses = []
        for idx in batch_indices(n_train, batch_size, rng):
            with T.Tape():
                loss = batch_loss(idx)
                T.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
        va = val_accuracy()
        log.append({
            "stage": stage_tag,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_acc": va,
        })
        if va > best:
            best = va
            if restore_best:
                best_snap = _snapshot(trainable)
            bad = 0
        else:
            bad += 1
        if stop_accuracy is not None and best >= stop_accuracy:
            break
        if bad >= patience > 0:
            break
    if restore_best:
        _restore(trainable, best_snap)
    return best


def pretrain_backbone(train_subset: Subset, val_subset: Subset, config: ViTConfig,
                      *, seed: int = 0, epochs: int = 60, patience: int = 10,
                      accuracy_floor: float = 0.8, stop_accuracy: float | None = 0.995,
                      batch_size: int = 32,
                      optim: OptimSettings = OptimSettings()) -> tuple[Backbone, ClassifierHead, list[dict]]:
    """Train a fresh backbone + head on held-out data, then freeze the backbone.

    Raises TrainingError (with the best accuracy reached) when the validation
    floor is not met within the epoch budget.
    """
    backbone = Backbone(config, seed=seed)
    head = ClassifierHead(config.dim, config.num_classes, seed=seed)
    model = PromptedViT(backbone, head)
    rng = make_rng(seed, "pretrain-fit")
    log: list[dict] = []

    def batch_loss(idx):
        logits = model.classify(train_subset.images[idx])
        return T.cross_entropy(logits, train_subset.labels[idx])

    def val_accuracy():
        preds = _predict(model, None, val_subset, max(batch_size, 64), "query")
        return accuracy(preds, val_subset.labels)

    trainable = backbone.trainable() + head.trainable()
    best = _run_epochs(trainable, batch_loss, val_accuracy, len(train_subset),
                       epochs=epochs, patience=patience, batch_size=batch_size,
                       optim=optim, rng=rng, log=log, stage_tag=-1,
                       stop_accuracy=stop_accuracy, restore_best=True)
    if best < accuracy_floor:
        raise TrainingError(
            f"pretraining stalled at validation accuracy {best:.4f}, "
            f"below the required floor {accuracy_floor}"
        )
    backbone.freeze()
    return backbone, head, log


def train_stage(stage: int, stream: StageStream, pool: PromptPool, backbone: Backbone,
                head: ClassifierHead, settings: TrainSettings) -> list[dict]:
    """Fit the pool's trainable prompts and the head on one stage's data.

    Only the current stage's train/val views are touched, so the stream's
    rehearsal-free guard stays intact. Returns per-epoch log rows.
    """
    train_subset = stream.train_view(stage)
    val_subset = stream.val_view(stage)
    model = PromptedViT(backbone, head)
    loss_cfg = settings.loss
    rng = make_rng(settings.seed, "train-stage", stage)
    log: list[dict] = []

    def batch_loss(idx):
        images = train_subset.images[idx]
        reference = None
        if settings.readout == "refined":
            reference = _reference_embedding(backbone, images)
        provider = PoolPromptProvider(pool, settings.readout, reference)
        logits = model.classify(images, provider)
        ce = T.cross_entropy(logits, train_subset.labels[idx])
        ls = None
        if loss_cfg.similarity_weight > 0:
            p_star = p_star_from(provider, pool, loss_cfg.p_star_source)
            if p_star is not None:
                ls = loss_similarity(p_star, pool.keys(), batch=p_star.shape[0],
                                     mode=loss_cfg.ls_mode)
        return loss_total(ce, ls, loss_cfg.similarity_weight)

    def val_accuracy():
        preds = _predict(model, pool, val_subset, max(settings.batch_size, 64),
                         settings.readout)
        return accuracy(preds, val_subset.labels)

    trainable = pool.trainable() + head.trainable()
    _run_epochs(trainable, batch_loss, val_accuracy, len(train_subset),
                epochs=settings.epochs, patience=settings.patience,
                batch_size=settings.batch_size, optim=settings.optim,
                rng=rng, log=log, stage_tag=stage)
    return log

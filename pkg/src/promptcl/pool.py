"""An expandable pool of prompt key/value vector pairs.

The pool is a list of stage groups. Stage 0 holds the base prompts; each
later stage freezes everything already in the pool and appends a small group
of fresh trainable pairs sized by the pool's expansion ratio. Freezing is
structural: a frozen group's tensors are never handed to the optimizer, so
their bytes cannot change during training.

Readout is cosine-weighted. ``select`` scores a query against every key and
combines the value vectors with the raw scores. The refined variant scores a
reference embedding instead and squashes the scores through a softmax first,
concentrating the mixture on the best matching entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, ShapeError
from .rng import make_rng
from .tensor import NORM_EPS, Tensor

DEFAULT_EXPANSION_RATIO = 0.20


def round_half_up(x: float) -> int:
    """Round to the nearest integer with halves going up (3.5 -> 4)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PromptEntry:
    """Read-only snapshot of one key/value pair."""

    index: int
    stage_id: int
    frozen: bool
    key: np.ndarray
    value: np.ndarray


class PromptGroup:
    """The prompts added at one stage."""

    def __init__(self, keys: Tensor, values: Tensor, stage_id: int):
        if keys.shape != values.shape or keys.ndim != 2:
            raise ShapeError(
                f"group keys/values must share a [g x D] shape, got {keys.shape} / {values.shape}"
            )
        self.keys = keys
        self.values = values
        self.stage_id = stage_id

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def frozen(self) -> bool:
        return not (self.keys.requires_grad or self.values.requires_grad)

    def freeze(self) -> None:
        self.keys.requires_grad = False
        self.values.requires_grad = False


class PromptPool:
    """Key/value prompt storage with staged growth and structural freezing."""

    def __init__(self, size: int, dim: int, expansion_ratio: float = DEFAULT_EXPANSION_RATIO,
                 seed: int = 0):
        if size < 1 or dim < 1:
            raise InputError(f"pool needs positive size and dim, got {size} and {dim}")
        if not (0.0 <= expansion_ratio <= 1.0):
            raise InputError(f"expansion_ratio must lie in [0, 1], got {expansion_ratio}")
        self.dim = dim
        self.base_size = size
        self.expansion_ratio = expansion_ratio
        self.seed = seed
        self.groups: list[PromptGroup] = [self._new_group(size, stage_id=0)]

    def _new_group(self, count: int, stage_id: int, rng=None) -> PromptGroup:
        if rng is None:
            rng = make_rng(self.seed, "pool", stage_id)
        bound = 1.0 / math.sqrt(self.dim)
        keys = rng.uniform(-bound, bound, size=(count, self.dim)).astype(np.float32)
        values = rng.uniform(-bound, bound, size=(count, self.dim)).astype(np.float32)
        return PromptGroup(
            Tensor(keys, requires_grad=True),
            Tensor(values, requires_grad=True),
            stage_id,
        )

    @property
    def size(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def num_stages(self) -> int:
        return len(self.groups)

    def keys(self) -> Tensor:
        """All keys stacked to [M x D], differentiable into each live group."""
        if len(self.groups) == 1:
            return self.groups[0].keys
        return T.concat([g.keys for g in self.groups], axis=0)

    def values(self) -> Tensor:
        if len(self.groups) == 1:
            return self.groups[0].values
        return T.concat([g.values for g in self.groups], axis=0)

    def expansion_count(self, ratio: float | None = None) -> int:
        """Prompts added per stage: a fraction of the base size, half-up."""
        if ratio is None:
            ratio = self.expansion_ratio
        return round_half_up(ratio * self.base_size)

    def expand(self, stage_id: int, rng=None) -> int:
        """Freeze the whole pool, then append a fresh group for ``stage_id``.

        ``stage_id`` must be the next unseen stage (one call per stage, in
        order). New keys and values draw uniformly from [-1/sqrt(D),
        +1/sqrt(D)]. Returns the number of prompts added.
        """
        if stage_id != len(self.groups):
            raise ContractError(
                f"expand expects stage {len(self.groups)} next, got {stage_id}"
            )
        if stage_id < 1:
            raise ContractError("stage 0 prompts are created by the constructor")
        count = self.expansion_count()
        if count < 1:
            raise InputError(
                f"expansion ratio {self.expansion_ratio} adds zero prompts"
            )
        self.freeze_all()
        self.groups.append(self._new_group(count, stage_id=stage_id, rng=rng))
        return count

    def freeze_all(self) -> None:
        for g in self.groups:
            g.freeze()

    def trainable(self) -> list[Tensor]:
        out = []
        for g in self.groups:
            if g.keys.requires_grad:
                out.append(g.keys)
            if g.values.requires_grad:
                out.append(g.values)
        return out

    def entries(self) -> list[PromptEntry]:
        out = []
        idx = 0
        for g in self.groups:
            k = g.keys.numpy()
            v = g.values.numpy()
            for r in range(g.size):
                out.append(PromptEntry(idx, g.stage_id, g.frozen, k[r].copy(), v[r].copy()))
                idx += 1
        return out

    def select(self, query: Tensor) -> Tensor:
        """Cosine-weighted sum of values for each query row: [B x D].

        Every pool entry participates; the weights are the raw cosine scores
        of the query against each key.
        """
        if query.ndim != 2 or query.shape[1] != self.dim:
            raise ContractError(f"select expects [B x {self.dim}] queries, got {query.shape}")
        weights = T.cosine_rows(query, self.keys())
        return T.matmul(weights, self.values())

    def refined_select(self, reference: Tensor) -> Tensor:
        """Softmax-weighted sum of values for each reference row: [B x D]."""
        if reference.ndim != 2 or reference.shape[1] != self.dim:
            raise ContractError(
                f"refined_select expects [B x {self.dim}] rows, got {reference.shape}"
            )
        weights = T.softmax(T.cosine_rows(reference, self.keys()), axis=1)
        return T.matmul(weights, self.values())

    def stage_mean_value(self, stage_id: int) -> Tensor:
        """Mean value vector of one stage's group, as a [1 x D] tensor."""
        for g in self.groups:
            if g.stage_id == stage_id:
                return T.mean(g.values, axis=0, keepdims=True)
        raise ContractError(f"no prompt group for stage {stage_id}")

    def stage_similarity(self) -> np.ndarray:
        """[S x S] mean absolute cosine between stage groups' value vectors.

        Entry (i, j) averages |cos(u, v)| over every ordered pair of a value
        row u from stage i and v from stage j, so diagonal cells include the
        unit-similarity self-pairs. Computed in 64-bit floats.
        """
        units = []
        for g in self.groups:
            if g.size == 0:
                raise ContractError(f"stage {g.stage_id} group is empty")
            v = g.values.numpy().astype(np.float64)
            norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), NORM_EPS)
            units.append(v / norms)
        s = len(units)
        out = np.empty((s, s), dtype=np.float64)
        for i in range(s):
            for j in range(s):
                out[i, j] = np.mean(np.abs(units[i] @ units[j].T))
        return out

    def state_items(self) -> list[tuple[str, Tensor]]:
        items = []
        for gi, g in enumerate(self.groups):
            items.append((f"pool.{gi}.keys", g.keys))
            items.append((f"pool.{gi}.values", g.values))
        return items

    def metadata(self) -> dict:
        return {
            "dim": self.dim,
            "base_size": self.base_size,
            "expansion_ratio": self.expansion_ratio,
            "seed": self.seed,
            "groups": [
                {"stage_id": g.stage_id, "size": g.size, "frozen": g.frozen}
                for g in self.groups
            ],
        }


def select(query: Tensor, pool: PromptPool) -> Tensor:
    """Cosine-weighted pool readout for query rows (see PromptPool.select)."""
    return pool.select(query)


def refined_weights(reference: Tensor, keys: Tensor) -> Tensor:
    """Softmax over cosine scores of reference rows against key rows.

    Returns [M x B] (one probability column per reference row, [M x 1] for a
    single row); each column is nonnegative and sums to one.
    """
    if reference.ndim != 2 or keys.ndim != 2 or reference.shape[1] != keys.shape[1]:
        raise ContractError(
            f"refined_weights expects [B x D] and [M x D], got {reference.shape} and {keys.shape}"
        )
    return T.transpose(T.softmax(T.cosine_rows(reference, keys), axis=1), (1, 0))


def refined_select(weights: Tensor, pool: PromptPool) -> Tensor:
    """Weighted sum of pool values: [M x B] weight columns -> [B x D] rows."""
    if weights.ndim != 2 or weights.shape[0] != pool.size:
        raise ContractError(
            f"refined_select expects [{pool.size} x B] weights, got {weights.shape}"
        )
    return T.matmul(T.transpose(weights, (1, 0)), pool.values())


def stage_similarity(pool: PromptPool) -> np.ndarray:
    """Stage-by-stage mean absolute cosine matrix of the pool's values."""
    return pool.stage_similarity()


def expand(pool: PromptPool, stage_id: int, rng=None) -> PromptPool:
    """Freeze the pool and append the next stage's prompts; returns the pool."""
    pool.expand(stage_id, rng=rng)
    return pool

"""Training objectives.

The classification term is plain cross-entropy. The similarity term scores
a per-sample aggregated prompt vector against every pool key by cosine and
penalizes ``1 - mean(score)``, nudging new prompts toward the directions the
pool already encodes.

Two scoring modes exist because the obvious-looking one is a trap:

* ``literal_softmax`` squashes each row of cosines through a softmax before
  averaging. Softmax rows always average to exactly 1/M, so the loss is the
  constant (M-1)/M and its gradient cancels to zero. The mode is kept so the
  degeneracy can be demonstrated and tested, not trained with.
* ``raw_cosine`` averages the cosines directly, which actually moves the
  prompts. This is the training default.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError, InputError, ShapeError
from .tensor import Tensor

SIMILARITY_MODES = ("raw_cosine", "literal_softmax")
P_STAR_SOURCES = ("aggregated_phi", "new_prompt_values")

DEFAULT_SIMILARITY_WEIGHT = 0.001


@dataclass(frozen=True)
class LossConfig:
    """Knobs for the total training objective."""

    similarity_weight: float = DEFAULT_SIMILARITY_WEIGHT
    ls_mode: str = "raw_cosine"
    p_star_source: str = "aggregated_phi"

    def __post_init__(self):
        if self.similarity_weight < 0:
            raise InputError(
                f"similarity_weight must be non-negative, got {self.similarity_weight}"
            )
        if self.ls_mode not in SIMILARITY_MODES:
            raise InputError(f"ls_mode must be one of {SIMILARITY_MODES}, got {self.ls_mode!r}")
        if self.p_star_source not in P_STAR_SOURCES:
            raise InputError(
                f"p_star_source must be one of {P_STAR_SOURCES}, got {self.p_star_source!r}"
            )


def loss_similarity(p_star: Tensor, keys: Tensor, batch: int | None = None,
                    mode: str = "raw_cosine") -> Tensor:
    """``1 - mean(z)`` where z scores each p_star row against every key row.

    ``p_star`` is [b x D] (the caller normalizes rows if it wants unit
    vectors; cosine scoring is scale-invariant anyway), ``keys`` is [M x D].
    The mean runs over all b*M scores, so a batch of identical rows changes
    nothing. ``batch``, when given, must match the row count of ``p_star``.
    """
    if mode not in SIMILARITY_MODES:
        raise InputError(f"similarity mode must be one of {SIMILARITY_MODES}, got {mode!r}")
    if p_star.ndim != 2 or keys.ndim != 2:
        raise ShapeError(
            f"loss_similarity expects 2-D inputs, got {p_star.shape} and {keys.shape}"
        )
    if batch is not None:
        if batch == 0:
            raise ContractError("loss_similarity needs a non-empty batch")
        if batch != p_star.shape[0]:
            raise ContractError(
                f"batch {batch} does not match p_star rows {p_star.shape[0]}"
            )
    scores = T.cosine_rows(p_star, keys)
    if mode == "literal_softmax":
        scores = T.softmax(scores, axis=1)
    return 1.0 - T.mean(scores)


def loss_total(ce: Tensor, ls: Tensor | None,
               weight: float = DEFAULT_SIMILARITY_WEIGHT) -> Tensor:
    """``ce + weight * ls``; a zero weight returns ``ce`` untouched."""
    if weight < 0:
        raise InputError(f"similarity weight must be non-negative, got {weight}")
    if weight == 0 or ls is None:
        return ce
    return ce + T.scale(ls, weight)


cross_entropy = T.cross_entropy

"""A small vision transformer with optional per-layer prompt injection.

The backbone follows the standard pre-norm encoder recipe: images are cut
into non-overlapping patches, linearly embedded, prefixed with a learned
[CLS] token, and offset by learned positional embeddings. Each encoder block
is LayerNorm -> multi-head self-attention -> residual, then LayerNorm ->
GELU MLP -> residual, with a final LayerNorm over the output sequence.

Prompt injection is cooperative. ``forward_sequence`` accepts a provider
callback which, at each configured prompt layer, receives the layer index
and that layer's incoming [CLS] row and may return one extra token per
sample. The token is appended to the layer's input sequence and stripped
from its output, so the sequence length seen by downstream layers never
changes. With no provider (or an empty ``prompt_layers``) the code path is
exactly the plain transformer, token for token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, ShapeError
from .rng import make_rng
from .tensor import Tensor

PromptFn = Callable[[int, Tensor], Optional[Tensor]]


@dataclass(frozen=True)
class ViTConfig:
    """Shape hyperparameters for the backbone and its prompt hook points."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 3
    prompt_layers: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise InputError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise InputError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise InputError(f"dim {self.dim} is not a multiple of heads {self.heads}")
        if self.depth < 1 or self.channels < 1:
            raise InputError("depth and channels must be at least 1")
        if self.mlp_ratio <= 0:
            raise InputError("mlp_ratio must be positive")
        if self.num_classes < 2:
            raise InputError("num_classes must be at least 2")
        layers = tuple(sorted(set(int(l) for l in self.prompt_layers)))
        if layers and (layers[0] < 0 or layers[-1] >= self.depth):
            raise InputError(
                f"prompt_layers {layers} outside valid range [0, {self.depth})"
            )
        object.__setattr__(self, "prompt_layers", layers)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        """Patch tokens plus the [CLS] token."""
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange [B x H x W x C] images into [B x N x P*P*C] patch rows."""
    b, h, w, c = images.shape
    p = patch_size
    gh, gw = h // p, w // p
    x = images.reshape(b, gh, p, gw, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, p * p * c)


class Backbone:
    """The transformer encoder. Parameters live in an ordered name->Tensor map."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = make_rng(seed, "backbone")
        d = config.dim

        def w(name, shape, std=0.02):
            self.params[name] = Tensor(
                rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True
            )

        def const(name, shape, value):
            self.params[name] = Tensor(
                np.full(shape, value, dtype=np.float32), requires_grad=True
            )

        w("patch.w", (config.patch_dim, d))
        const("patch.b", (d,), 0.0)
        w("cls", (1, 1, d))
        w("pos", (1, config.seq_len, d))
        for i in range(config.depth):
            pre = f"blocks.{i}."
            const(pre + "ln1.g", (d,), 1.0)
            const(pre + "ln1.b", (d,), 0.0)
            w(pre + "attn.qkv.w", (d, 3 * d))
            const(pre + "attn.qkv.b", (3 * d,), 0.0)
            w(pre + "attn.proj.w", (d, d))
            const(pre + "attn.proj.b", (d,), 0.0)
            const(pre + "ln2.g", (d,), 1.0)
            const(pre + "ln2.b", (d,), 0.0)
            w(pre + "mlp.fc1.w", (d, config.mlp_dim))
            const(pre + "mlp.fc1.b", (config.mlp_dim,), 0.0)
            w(pre + "mlp.fc2.w", (config.mlp_dim, d))
            const(pre + "mlp.fc2.b", (d,), 0.0)
        const("ln_f.g", (d,), 1.0)
        const("ln_f.b", (d,), 0.0)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def state_items(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def embed(self, images: np.ndarray) -> Tensor:
        """Patch-embed a float image batch into a [B x (N+1) x D] sequence.

        Accepts a single [H x W x C] image or a [B x H x W x C] batch; row 0
        of every sequence is the [CLS] slot, and positional embeddings are
        already added.
        """
        cfg = self.config
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise InputError(
                f"embed: expected [B x {cfg.image_size} x {cfg.image_size} x {cfg.channels}] "
                f"images, got {images.shape}"
            )
        b = images.shape[0]
        patches = Tensor(patchify(images, cfg.patch_size))
        flat = T.reshape(patches, (b * cfg.num_patches, cfg.patch_dim))
        tok = T.matmul(flat, self.params["patch.w"]) + self.params["patch.b"]
        tok = T.reshape(tok, (b, cfg.num_patches, cfg.dim))
        cls = T.broadcast_to(self.params["cls"], (b, 1, cfg.dim))
        seq = T.concat([cls, tok], axis=1)
        return seq + self.params["pos"]

    def query_at(self, layer: int, x_l: Tensor) -> Tensor:
        """The [CLS] row of a layer input: a tracked value snapshot.

        ``x_l`` may be one sequence [N x D] (returns [1 x D]) or a batch
        [B x N x D] (returns [B x D]). ``layer`` must be a prompt layer.
        """
        if layer not in self.config.prompt_layers:
            raise ContractError(f"layer {layer} is not in prompt_layers {self.config.prompt_layers}")
        if x_l.ndim == 2:
            return T.narrow(x_l, 0, 0, 1)
        if x_l.ndim == 3:
            return T.reshape(T.narrow(x_l, 1, 0, 1), (x_l.shape[0], x_l.shape[2]))
        raise ShapeError(f"query_at expects [N x D] or [B x N x D], got {x_l.shape}")

    def _attention(self, x: Tensor, i: int, attn_sink: Optional[list] = None) -> Tensor:
        cfg = self.config
        b, t, d = x.shape
        h, dh = cfg.heads, cfg.head_dim
        pre = f"blocks.{i}.attn."
        z = T.matmul(T.reshape(x, (b * t, d)), self.params[pre + "qkv.w"])
        z = z + self.params[pre + "qkv.b"]

        def split(offset):
            part = T.narrow(z, 1, offset * d, d)
            part = T.reshape(part, (b, t, h, dh))
            part = T.transpose(part, (0, 2, 1, 3))
            return T.reshape(part, (b * h, t, dh))

        q, k, v = split(0), split(1), split(2)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if attn_sink is not None:
            attn_sink.append((i, attn.numpy().reshape(b, h, t, t).copy()))
        out = T.matmul(attn, v)
        out = T.reshape(out, (b, h, t, dh))
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (b * t, d))
        out = T.matmul(out, self.params[pre + "proj.w"]) + self.params[pre + "proj.b"]
        return T.reshape(out, (b, t, d))

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        b, t, d = x.shape
        pre = f"blocks.{i}.mlp."
        hcur = T.matmul(T.reshape(x, (b * t, d)), self.params[pre + "fc1.w"])
        hcur = T.gelu(hcur + self.params[pre + "fc1.b"])
        hcur = T.matmul(hcur, self.params[pre + "fc2.w"]) + self.params[pre + "fc2.b"]
        return T.reshape(hcur, (b, t, d))

    def _block(self, x: Tensor, i: int, attn_sink: Optional[list] = None) -> Tensor:
        pre = f"blocks.{i}."
        y = T.layernorm(x, self.params[pre + "ln1.g"], self.params[pre + "ln1.b"])
        x = x + self._attention(y, i, attn_sink)
        y = T.layernorm(x, self.params[pre + "ln2.g"], self.params[pre + "ln2.b"])
        return x + self._mlp(y, i)

    def forward_sequence(self, x0: Tensor, provider: Optional[PromptFn] = None,
                         attn_sink: Optional[list] = None) -> Tensor:
        """Run the encoder over an embedded sequence, final LayerNorm included.

        At each layer listed in ``config.prompt_layers`` (ascending order)
        the provider is offered ``(layer, query)`` and may return a
        [B x 1 x D] (or broadcastable [1 x 1 x D]) prompt token; ``None``
        skips injection. ``attn_sink``, if given, collects per-layer
        post-softmax attention as (layer, [B x heads x T x T]) entries.
        """
        cfg = self.config
        squeeze = x0.ndim == 2
        x = T.reshape(x0, (1,) + x0.shape) if squeeze else x0
        if x.ndim != 3 or x.shape[2] != cfg.dim:
            raise ShapeError(f"forward_sequence expects [B x N x {cfg.dim}], got {x0.shape}")
        b, n1, d = x.shape
        for i in range(cfg.depth):
            extra = None
            if provider is not None and i in cfg.prompt_layers:
                query = T.reshape(T.narrow(x, 1, 0, 1), (b, d))
                extra = provider(i, query)
            if extra is None:
                x = self._block(x, i, attn_sink)
                continue
            if extra.ndim == 2 and extra.shape == (1, d):
                extra = T.reshape(extra, (1, 1, d))
            if extra.ndim != 3 or extra.shape[0] not in (1, b) or extra.shape[1:] != (1, d):
                raise ContractError(
                    f"prompt for layer {i} must be [B x 1 x {d}], got {extra.shape}"
                )
            if extra.shape[0] == 1 and b > 1:
                extra = T.broadcast_to(extra, (b, 1, d))
            y = self._block(T.concat([x, extra], axis=1), i, attn_sink)
            x = T.narrow(y, 1, 0, n1)
        out = T.layernorm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        return T.reshape(out, x0.shape) if squeeze else out

    def cls_features(self, images: np.ndarray, provider: Optional[PromptFn] = None) -> Tensor:
        """The final-layer [CLS] embedding for an image batch, [B x D]."""
        feats = self.forward_sequence(self.embed(images), provider)
        return T.reshape(T.narrow(feats, 1, 0, 1), (feats.shape[0], self.config.dim))


class ClassifierHead:
    """Linear readout from the [CLS] embedding to class logits.

    Stays trainable in every stage; the shared label space means one head
    serves all domains.
    """

    def __init__(self, dim: int, num_classes: int, seed: int = 0):
        if num_classes < 2:
            raise InputError("classifier needs at least two classes")
        rng = make_rng(seed, "head")
        self.dim = dim
        self.num_classes = num_classes
        self.w = Tensor(rng.normal(0.0, 0.02, size=(dim, num_classes)).astype(np.float32),
                        requires_grad=True)
        self.b = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)

    def __call__(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ShapeError(f"head expects [B x {self.dim}] features, got {features.shape}")
        return T.matmul(features, self.w) + self.b

    def trainable(self) -> list[Tensor]:
        return [t for t in (self.w, self.b) if t.requires_grad]

    def state_items(self) -> list[tuple[str, Tensor]]:
        return [("head.w", self.w), ("head.b", self.b)]


class PromptedViT:
    """Backbone plus classifier head, wired for prompt injection."""

    def __init__(self, backbone: Backbone, head: ClassifierHead):
        if head.dim != backbone.config.dim:
            raise ShapeError(
                f"head width {head.dim} does not match backbone dim {backbone.config.dim}"
            )
        self.backbone = backbone
        self.head = head

    @property
    def config(self) -> ViTConfig:
        return self.backbone.config

    def forward_with_prompts(self, x0: Tensor, provider: Optional[PromptFn] = None) -> Tensor:
        """Logits for an embedded sequence: [B x C] ([1 x C] for one sample)."""
        seq = self.backbone.forward_sequence(x0, provider)
        if seq.ndim == 2:
            seq = T.reshape(seq, (1,) + seq.shape)
        cls = T.reshape(T.narrow(seq, 1, 0, 1), (seq.shape[0], self.config.dim))
        return self.head(cls)

    def classify(self, images: np.ndarray, provider: Optional[PromptFn] = None) -> Tensor:
        return self.forward_with_prompts(self.backbone.embed(images), provider)

    def predict(self, images: np.ndarray, provider: Optional[PromptFn] = None) -> np.ndarray:
        """Class ids for an image batch; logit ties go to the lowest index."""
        with T.no_grad():
            logits = self.classify(images, provider)
        return T.argmax_rows(logits)

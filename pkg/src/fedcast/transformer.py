"""Encoder-only transformer used as the frozen foundation model.

The encoder maps an (m x width) series to an (m x n) series: a linear
input projection lifts the (zero-padded) variables into the embedding
space, stacked self-attention blocks with group normalization follow,
and a linear output projection returns to variable space. The input
projection is sized for twice the base variable count so that inputs
widened by inter-variable prompts fit without resizing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    ShapeMismatchError,
    Tensor,
    add,
    broadcast_to,
    concat,
    dropout,
    getitem,
    group_norm,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)

__all__ = ["FMConfig", "TransformerFM", "SnapshotError"]

SNAPSHOT_FORMAT_VERSION = 1


class SnapshotError(RuntimeError):
    pass


@dataclass(frozen=True)
class FMConfig:
    """Architecture hyperparameters of the foundation model."""

    n_features: int = 12
    embed_dim: int = 256
    n_heads: int = 8
    ffn_dim: int = 256
    dropout: float = 0.3
    n_layers: int = 4
    max_seq_len: int = 48
    norm_groups: int = 8
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"fm: embed_dim {self.embed_dim} not divisible by {self.n_heads} heads"
            )
        if self.embed_dim % self.norm_groups:
            raise ValueError(
                f"fm: embed_dim {self.embed_dim} not divisible into "
                f"{self.norm_groups} norm groups"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"fm: dropout {self.dropout} outside [0, 1)")
        for field in ("n_features", "embed_dim", "n_heads", "ffn_dim", "n_layers",
                      "max_seq_len", "norm_groups"):
            if getattr(self, field) < 1:
                raise ValueError(f"fm: {field} must be positive")

    @property
    def input_width(self) -> int:
        # Sized for base variables plus a full set of inter-variable prompts.
        return 2 * self.n_features

    @classmethod
    def desk(cls, n_features: int = 4, **kw) -> "FMConfig":
        """Small configuration that keeps finite-difference suites fast."""
        defaults = dict(n_features=n_features, embed_dim=64, n_heads=4,
                        ffn_dim=64, n_layers=2)
        defaults.update(kw)
        return cls(**defaults)

    @classmethod
    def full_scale(cls, n_features: int = 12, **kw) -> "FMConfig":
        defaults = dict(n_features=n_features)
        defaults.update(kw)
        return cls(**defaults)


class TransformerFM:
    """Foundation model with named parameters and an override mechanism.

    Parameters live in an ordered dict name -> Tensor. ``forward`` accepts a
    per-call override map so a client can run the shared snapshot with its
    own copies of designated layers without touching the shared state.
    """

    def __init__(self, config: FMConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c = config

        def param(name, shape, init="gauss"):
            if init == "gauss":
                data = rng.normal(0.0, 0.02, size=shape)
            elif init == "zeros":
                data = np.zeros(shape)
            elif init == "ones":
                data = np.ones(shape)
            self.params[name] = Tensor(data, requires_grad=True)

        param("in_proj.w", (c.input_width, c.embed_dim))
        param("in_proj.b", (c.embed_dim,), "zeros")
        param("pos_enc", (c.max_seq_len, c.embed_dim))
        for i in range(c.n_layers):
            pre = f"enc{i}"
            for nm in ("wq", "wk", "wv", "wo"):
                param(f"{pre}.attn.{nm}", (c.embed_dim, c.embed_dim))
            for nm in ("bq", "bk", "bv", "bo"):
                param(f"{pre}.attn.{nm}", (c.embed_dim,), "zeros")
            param(f"{pre}.norm1.scale", (c.embed_dim,), "ones")
            param(f"{pre}.norm1.shift", (c.embed_dim,), "zeros")
            param(f"{pre}.ffn.w1", (c.embed_dim, c.ffn_dim))
            param(f"{pre}.ffn.b1", (c.ffn_dim,), "zeros")
            param(f"{pre}.ffn.w2", (c.ffn_dim, c.embed_dim))
            param(f"{pre}.ffn.b2", (c.embed_dim,), "zeros")
            param(f"{pre}.norm2.scale", (c.embed_dim,), "ones")
            param(f"{pre}.norm2.shift", (c.embed_dim,), "zeros")
        param("out_proj.w", (c.embed_dim, c.n_features))
        param("out_proj.b", (c.n_features,), "zeros")

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params:
                raise SnapshotError(f"fm: unknown parameter {k!r}")
            if self.params[k].data.shape != v.shape:
                raise SnapshotError(
                    f"fm: shape mismatch for {k!r}: {self.params[k].data.shape} vs {v.shape}"
                )
            self.params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "TransformerFM":
        twin = TransformerFM(self.config, np.random.default_rng(0))
        twin.load_arrays(self.named_arrays())
        return twin

    def default_mixed_layers(self) -> list[str]:
        """Designated layer set exchanged through graph mixing: the last
        encoder block's output-normalization scale and shift."""
        last = self.config.n_layers - 1
        return [f"enc{last}.norm2.scale", f"enc{last}.norm2.shift"]

    # -- forward ------------------------------------------------------------

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                overrides: dict[str, Tensor] | None = None) -> Tensor:
        """Sequence-to-sequence pass; output keeps the input's temporal length.

        Accepts (T, w) or (B, T, w) with w at most ``config.input_width``;
        narrower inputs are zero-padded into the projection width.
        """
        c = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 3:
            raise ShapeMismatchError(f"fm: expected rank 2 or 3 input, got {x.shape}")
        bsz, seq_len, width = x.shape
        if width > c.input_width:
            raise ShapeMismatchError(
                f"fm: input width {width} exceeds projection width {c.input_width}"
            )
        if seq_len > c.max_seq_len:
            raise ShapeMismatchError(
                f"fm: sequence length {seq_len} exceeds positional-encoding "
                f"capacity {c.max_seq_len}"
            )
        if train and c.dropout > 0.0 and rng is None:
            raise ValueError("fm: train-mode forward needs an rng for dropout")

        if overrides:
            for k in overrides:
                if k not in self.params:
                    raise SnapshotError(f"fm: override for unknown parameter {k!r}")
            get = lambda name: overrides.get(name, self.params[name])
        else:
            get = self.params.__getitem__

        if width < c.input_width:
            pad = Tensor(np.zeros((bsz, seq_len, c.input_width - width)))
            x = concat([x, pad], axis=2)

        h = linear(x, get("in_proj.w"), get("in_proj.b"))
        pos = getitem(get("pos_enc"), slice(0, seq_len))
        h = add(h, broadcast_to(reshape(pos, (1, seq_len, c.embed_dim)), h.shape))
        h = dropout(h, c.dropout, rng, train)

        n_heads = c.n_heads
        head_dim = c.embed_dim // n_heads
        inv_scale = 1.0 / np.sqrt(head_dim)

        def split_heads(t):
            t = reshape(t, (bsz, seq_len, n_heads, head_dim))
            t = transpose(t, (0, 2, 1, 3))
            return reshape(t, (bsz * n_heads, seq_len, head_dim))

        def join_heads(t):
            t = reshape(t, (bsz, n_heads, seq_len, head_dim))
            t = transpose(t, (0, 2, 1, 3))
            return reshape(t, (bsz, seq_len, c.embed_dim))

        for i in range(c.n_layers):
            pre = f"enc{i}"
            q = split_heads(linear(h, get(f"{pre}.attn.wq"), get(f"{pre}.attn.bq")))
            k = split_heads(linear(h, get(f"{pre}.attn.wk"), get(f"{pre}.attn.bk")))
            v = split_heads(linear(h, get(f"{pre}.attn.wv"), get(f"{pre}.attn.bv")))
            scores = mul(matmul(q, transpose(k, (0, 2, 1))), inv_scale)
            attn = softmax(scores, axis=-1)
            ctx = join_heads(matmul(attn, v))
            out = linear(ctx, get(f"{pre}.attn.wo"), get(f"{pre}.attn.bo"))
            h = group_norm(add(h, dropout(out, c.dropout, rng, train)),
                           c.norm_groups, c.norm_eps,
                           get(f"{pre}.norm1.scale"), get(f"{pre}.norm1.shift"))
            f = linear(relu(linear(h, get(f"{pre}.ffn.w1"), get(f"{pre}.ffn.b1"))),
                       get(f"{pre}.ffn.w2"), get(f"{pre}.ffn.b2"))
            h = group_norm(add(h, dropout(f, c.dropout, rng, train)),
                           c.norm_groups, c.norm_eps,
                           get(f"{pre}.norm2.scale"), get(f"{pre}.norm2.shift"))

        y = linear(h, get("out_proj.w"), get("out_proj.b"))
        if squeeze:
            y = reshape(y, y.shape[1:])
        return y

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        payload = {f"param:{k}": v.data for k, v in self.params.items()}
        payload["config_json"] = np.array(json.dumps(asdict(self.config), sort_keys=True))
        payload["format_version"] = np.array(SNAPSHOT_FORMAT_VERSION)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> "TransformerFM":
        with np.load(path, allow_pickle=False) as z:
            if "format_version" not in z or int(z["format_version"]) != SNAPSHOT_FORMAT_VERSION:
                raise SnapshotError(f"fm: unsupported snapshot format in {path}")
            config = FMConfig(**json.loads(str(z["config_json"])))
            fm = cls(config, np.random.default_rng(0))
            arrays = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
            if set(arrays) != set(fm.params):
                raise SnapshotError(f"fm: snapshot {path} parameter set mismatch")
            fm.load_arrays(arrays)
        return fm

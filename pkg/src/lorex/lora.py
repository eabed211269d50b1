"""Low-rank adapter algebra.

An adapter is a pair of factors (b, a) whose product is a strictly low-rank
delta on one frozen base weight. A layer carries one adapter per task and
composes them at inference time by *output aggregation*: the base path plus
each active adapter path scaled by its composition weight. The equivalent
*merged-weights* path (add the weighted deltas onto the base weight, then
run a plain forward) exists as an oracle and an export; per-layer linearity
in the weight makes the two agree up to float reassociation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import (
    DTYPE,
    GradTape,
    Tensor,
    add,
    bias_add,
    bias_add_rows,
    conv2d,
    lower_conv,
    matmul,
    reshape,
    scale,
    transpose2d,
)


@dataclass
class LoraAdapter:
    """One expert's factors for one base layer.

    ``b`` is (n, r) and zero at construction so a fresh adapter contributes
    exactly nothing; ``a`` is (r, m), seeded uniform on [-1/sqrt(m), 1/sqrt(m)].
    ``scale`` multiplies the delta b @ a.
    """

    b: Tensor
    a: Tensor
    rank: int
    scale: float = 1.0

    def __post_init__(self):
        if self.b.data.ndim != 2 or self.a.data.ndim != 2:
            raise ShapeError("adapter factors must be 2-D")
        n, rb = self.b.dims
        ra, m = self.a.dims
        if rb != ra or rb != self.rank:
            raise ShapeError(f"factor ranks disagree: b {self.b.dims}, a {self.a.dims}, rank {self.rank}")
        if not 1 <= self.rank < min(n, m):
            raise ConfigError(f"rank must satisfy 1 <= r < min(n,m)={min(n, m)}, got {self.rank}")
        if not math.isfinite(self.scale):
            raise NumericError("adapter scale must be finite")

    @classmethod
    def create(cls, n: int, m: int, rank: int, rng: np.random.Generator,
               scale: float = 1.0) -> "LoraAdapter":
        if not 1 <= rank < min(n, m):
            raise ConfigError(f"rank must satisfy 1 <= r < min(n,m)={min(n, m)}, got {rank}")
        bound = 1.0 / math.sqrt(m)
        a = rng.uniform(-bound, bound, size=(rank, m)).astype(DTYPE)
        return cls(b=Tensor.zeros((n, rank)), a=Tensor(a), rank=rank, scale=scale)

    @property
    def out_dim(self) -> int:
        return self.b.dims[0]

    @property
    def in_dim(self) -> int:
        return self.a.dims[1]

    def params(self) -> list[Tensor]:
        return [self.b, self.a]


@dataclass
class AdaptedLayer:
    """A frozen base layer plus its per-task adapters.

    ``kind`` is "linear" (weight (n,m), forward y = x W^T + bias) or "conv"
    (weight (c_out,c_in,k,k)); conv adapters factor the flattened kernel
    matrix (n = c_out, m = c_in*k*k) and the delta is reshaped back into
    kernel layout. An empty adapter list marks a layer outside the adapted
    set; otherwise the list length is the global task count.
    """

    kind: str
    base_weight: Tensor
    base_bias: Tensor | None
    adapters: list[LoraAdapter] = field(default_factory=list)
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in ("linear", "conv"):
            raise ConfigError(f"layer kind must be 'linear' or 'conv', got {self.kind!r}")
        n, m = self.flat_dims
        for ad in self.adapters:
            if ad.out_dim != n or ad.in_dim != m:
                raise ShapeError(f"adapter {ad.out_dim}x{ad.in_dim} does not fit weight {n}x{m}")

    @property
    def task_count(self) -> int:
        return len(self.adapters)

    @property
    def flat_dims(self) -> tuple[int, int]:
        if self.kind == "linear":
            return self.base_weight.dims
        co, ci, kh, kw = self.base_weight.dims
        return co, ci * kh * kw


def lora_delta(adapter: LoraAdapter) -> Tensor:
    """The dense delta scale * (b @ a)."""
    return scale(matmul(adapter.b, adapter.a), adapter.scale)


def _check_weights(layer: AdaptedLayer, s) -> np.ndarray:
    s = np.asarray(s, dtype=DTYPE).ravel()
    if s.shape != (layer.task_count,):
        raise ConfigError(
            f"weight vector has length {s.shape[0]}, layer has {layer.task_count} adapters")
    if not np.all(np.isfinite(s)):
        raise NumericError("weight vector contains non-finite values")
    return s


def _base_forward(layer: AdaptedLayer, x: Tensor, tape: GradTape | None,
                  weight: Tensor | None = None, lowered=None) -> Tensor:
    w = layer.base_weight if weight is None else weight
    if layer.kind == "linear":
        out = matmul(x, transpose2d(w, tape), tape)
        if layer.base_bias is not None:
            out = bias_add_rows(out, layer.base_bias, tape)
    else:
        out = conv2d(x, w, layer.padding, layer.stride, tape, lowered=lowered)
        if layer.base_bias is not None:
            out = bias_add(out, layer.base_bias, tape)
    return out


def _delta_forward(layer: AdaptedLayer, adapter: LoraAdapter, x: Tensor,
                   weight: float, tape: GradTape | None, lowered=None) -> Tensor:
    factor = float(weight) * adapter.scale
    if layer.kind == "linear":
        h = matmul(x, transpose2d(adapter.a, tape), tape)
        h = matmul(h, transpose2d(adapter.b, tape), tape)
        return scale(h, factor, tape)
    co, ci, kh, kw = layer.base_weight.dims
    ka = reshape(adapter.a, (adapter.rank, ci, kh, kw), tape)
    h = conv2d(x, ka, layer.padding, layer.stride, tape, lowered=lowered)
    kb = reshape(adapter.b, (co, adapter.rank, 1, 1), tape)
    h = conv2d(h, kb, "same", 1, tape)
    return scale(h, factor, tape)


def _lowering(layer: AdaptedLayer, x: Tensor, tape: GradTape | None):
    if layer.kind != "conv":
        return None
    return lower_conv(x, layer.base_weight.dims[2], layer.stride, layer.padding, tape)


def adapted_forward(layer: AdaptedLayer, x: Tensor, s, tape: GradTape | None = None) -> Tensor:
    """Base output plus weighted adapter outputs.

    Only adapters with a nonzero weight are evaluated. Outside of gradient
    recording, adapters whose up-projection is still all-zero are skipped
    too: their path is exactly zero, so the base output passes through
    bit-identical.
    """
    s = _check_weights(layer, s)
    active = [(float(si), ad) for si, ad in zip(s, layer.adapters)
              if si != 0.0 and not (tape is None and not ad.b.data.any())]
    lowered = _lowering(layer, x, tape)
    out = _base_forward(layer, x, tape, lowered=lowered)
    for si, adapter in active:
        out = add(out, _delta_forward(layer, adapter, x, si, tape, lowered=lowered), tape)
    return out


def merge_weights(layer: AdaptedLayer, s) -> Tensor:
    """The merged weight W + sum_k s_k * delta_k. Does not mutate the layer."""
    s = _check_weights(layer, s)
    if not s.any():
        return layer.base_weight.copy()
    acc = layer.base_weight.data.copy()
    n, m = layer.flat_dims
    flat = acc.reshape(n, m)
    for si, adapter in zip(s, layer.adapters):
        if si == 0.0:
            continue
        flat += DTYPE(float(si) * adapter.scale) * (adapter.b.data @ adapter.a.data)
    return Tensor._wrap(acc)


def merged_forward(layer: AdaptedLayer, merged_weight: Tensor, x: Tensor,
                   tape: GradTape | None = None) -> Tensor:
    """Plain forward with a replacement weight; the merge oracle's other half."""
    if merged_weight.dims != layer.base_weight.dims:
        raise ShapeError(
            f"merged weight dims {merged_weight.dims} != base {layer.base_weight.dims}")
    return _base_forward(layer, x, tape, weight=merged_weight,
                         lowered=_lowering(layer, x, tape))

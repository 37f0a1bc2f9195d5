"""Information-enhanced state encoder.

Three small conv branches read the ego, other-pursuer and evader matrices.
Every cell of the evader feature map becomes an attention token (key and
value share one projection); the query is the pooled ego feature map. The
attention output acts as a target-preference vector and is fused with the
pooled ego and other-pursuer features by two dense layers.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import ContractError
from .nn_core import LayerSpec, ParamStore, Tensor
from .state_codec import AgentState

BRANCHES = ("sf", "sp", "se")

# incremented on every encoder forward; lets callers prove a code path never ran
calls: Counter = Counter()


@dataclass(frozen=True)
class IeseSpec:
    rows: int
    cols: int
    channels: tuple[int, ...] = (8, 8)
    kernel: int = 3
    d_att: int = 32
    d_out: int = 128

    @property
    def conv_layers(self) -> list[LayerSpec]:
        widths = (1, *self.channels)
        return [LayerSpec("conv", a, b, self.kernel) for a, b in zip(widths, widths[1:])]

    @property
    def fuse_layers(self) -> list[LayerSpec]:
        c = self.channels[-1]
        return [LayerSpec("dense", 2 * c + self.d_att, self.d_out), LayerSpec("dense", self.d_out, self.d_out)]


@dataclass
class EncodedState:
    vector: np.ndarray
    attention: np.ndarray  # weights over the rows*cols evader tokens
    has_target: bool = field(default=True)


def init_params(store: ParamStore, spec: IeseSpec, rng: np.random.Generator) -> None:
    for br in BRANCHES:
        store.add_layers(f"iese.{br}", spec.conv_layers, rng)
    c = spec.channels[-1]
    store.add_uniform("iese.key.w", (c, spec.d_att), c, spec.d_att, rng)
    store.add_uniform("iese.query.w", (c, spec.d_att), c, spec.d_att, rng)
    store.add_layers("iese.fuse", spec.fuse_layers, rng)


def scale_inputs(x: np.ndarray, store: ParamStore) -> np.ndarray:
    div = np.asarray(store.meta["scale"], dtype=np.float64)
    dtype = store.params[next(iter(store.params))].dtype
    return (x / div[None, :, None, None]).astype(dtype)


def encode_batch(x: np.ndarray, store: ParamStore, spec: IeseSpec) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Encode raw-count states ``x`` of shape (B, 3, rows, cols).

    Returns the encoded states (B, d_out), attention weights (B, rows*cols)
    and a flag per sample telling whether any evader was present. Samples
    without evaders get an all-zero target-preference slice.
    """
    if x.ndim != 4 or x.shape[1:] != (3, spec.rows, spec.cols):
        raise ContractError(f"encoder expects (B, 3, {spec.rows}, {spec.cols}) inputs, got {x.shape}")
    calls["encode"] += 1
    has_target = x[:, 2].reshape(len(x), -1).sum(axis=1) > 0
    xs = scale_inputs(x, store)
    feats = {
        br: store.forward_layers(f"iese.{br}", spec.conv_layers, xs[:, i : i + 1])
        for i, br in enumerate(BRANCHES)
    }
    B, C, H, W = feats["se"].shape
    tokens = nn.reshape(nn.transpose(feats["se"], (0, 2, 3, 1)), (B, H * W, C))
    keys = nn.dense(tokens, store["iese.key.w"])
    pooled_sf = nn.mean_spatial(feats["sf"])
    query = nn.dense(pooled_sf, store["iese.query.w"])
    target_pref, weights = nn.attention(keys, keys, query)
    target_pref = nn.mul_const(target_pref, has_target[:, None].astype(np.float64))
    fused = nn.concat([pooled_sf, nn.mean_spatial(feats["sp"]), target_pref], axis=-1)
    return store.forward_layers("iese.fuse", spec.fuse_layers, fused), weights, has_target


def encode(s: AgentState, store: ParamStore, spec: IeseSpec) -> EncodedState:
    with nn.no_grad():
        out, weights, flag = encode_batch(s.stacked()[None], store, spec)
    return EncodedState(out.data[0].copy(), weights[0].copy(), bool(flag[0]))

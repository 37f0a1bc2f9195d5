"""Plain float64 reference computations used as test oracles.

Deliberately written with explicit loops and no tape so that they share no
code with the library's forward passes.
"""
from __future__ import annotations

import numpy as np


def conv_same(x, k, b):
    C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.zeros((C, H + kh - 1, W + kw - 1))
    xp[:, kh // 2:kh // 2 + H, kw // 2:kw // 2 + W] = x
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                out[o, i, j] = np.sum(xp[:, i:i + kh, j:j + kw] * k[o]) + b[o]
    return out


def relu(x):
    return np.where(x > 0, x, 0.0)


def p(store, name):
    return store.params[name].astype(np.float64)


def iese_forward(state, store, n_conv=2):
    """(3, H, W) raw counts -> (encoded vector, attention weights)."""
    scale = np.asarray(store.meta["scale"], dtype=np.float64)
    maps = {}
    for c, br in enumerate(("sf", "sp", "se")):
        h = state[c][None].astype(np.float64) / scale[c]
        for i in range(n_conv):
            h = relu(conv_same(h, p(store, f"iese.{br}.{i}.w"), p(store, f"iese.{br}.{i}.b")))
        maps[br] = h
    C = maps["se"].shape[0]
    tokens = maps["se"].reshape(C, -1).T
    keys = tokens @ p(store, "iese.key.w")
    q = maps["sf"].mean(axis=(1, 2)) @ p(store, "iese.query.w")
    logits = keys @ q / np.sqrt(len(q))
    w = np.exp(logits - logits.max())
    w /= w.sum()
    att = w @ keys if state[2].sum() > 0 else np.zeros(keys.shape[1])
    z = np.concatenate([maps["sf"].mean(axis=(1, 2)), maps["sp"].mean(axis=(1, 2)), att])
    z = relu(z @ p(store, "iese.fuse.0.w") + p(store, "iese.fuse.0.b"))
    z = relu(z @ p(store, "iese.fuse.1.w") + p(store, "iese.fuse.1.b"))
    return z, w


def q_forward(state, store):
    if "iese.key.w" in store.params:
        z, _ = iese_forward(state, store)
    else:
        scale = np.asarray(store.meta["scale"], dtype=np.float64)
        flat = (state.astype(np.float64) / scale[:, None, None]).ravel()
        z = relu(flat @ p(store, "flat.0.w") + p(store, "flat.0.b"))
    h = relu(z @ p(store, "head.0.w") + p(store, "head.0.b"))
    return h @ p(store, "head.1.w") + p(store, "head.1.b")


def mlp_forward(vec, store, prefix, n_layers):
    h = np.asarray(vec, dtype=np.float64)
    for i in range(n_layers):
        h = h @ p(store, f"{prefix}.{i}.w") + p(store, f"{prefix}.{i}.b")
        if i < n_layers - 1:
            h = relu(h)
    return h

"""Ground-state sparse evaluation and training of DeepCNets.

The input grid is sparse, and valid convolution/pooling preserve spatial
structure, so every hidden cell whose receptive field never touches an
active input sits exactly at its layer's ground state.  Each layer is
therefore represented by two parallel lists -- where the non-ground cells
are, and what they hold -- plus the shared ground vector.

Implementation notes:

  * Active cells of a whole batch are concatenated and addressed by flat
    int64 keys (sample * side + row) * side + col, kept sorted; per filter
    offset the map from input cells to output cells is injective, so
    scatter-adds are plain fancy-indexed ``+=`` with no duplicate rows.
  * A convolution's output active set is every cell whose window touches an
    active input; its value is ground_pre + sum of W . (value - ground)
    over the active taps.  Cells outside the set are exactly ground.
  * Max-pooling regions mixing active and ground cells take the
    componentwise max against the ground vector; a per-component winner
    index (-1 for ground) routes the backward pass.
  * The backward pass mirrors this structure: gradients flow to active
    cells plus one shared ground-state path per layer, which is what makes
    bias/weight gradients exact while never densifying.

Training-mode dropout masks active-cell features independently but the
ground vector once per layer per batch, keeping the shared-ground
representation intact (eval mode is exactly the dense semantics; train mode
is an unbiased variant of it).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import DeepCNet, dropout_mask

__all__ = [
    "DivergenceError",
    "SparseLayerState",
    "forward_sparse",
    "forward_batch",
    "loss_and_grads",
    "train_batch",
    "classify",
    "error_rate",
]


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class SparseLayerState:
    """Active-location list, feature list, and ground vector of one layer."""

    locations: np.ndarray  # (n, 2) int64 (row, col), unique
    features: np.ndarray  # (n, C)
    ground_state: np.ndarray  # (C,)


@dataclass
class _Batch:
    # One layer's active cells for a whole batch, sorted by flat key.
    keys: np.ndarray  # (n,) int64, strictly increasing
    sid: np.ndarray  # (n,) sample index
    rows: np.ndarray  # (n,)
    cols: np.ndarray  # (n,)
    values: np.ndarray  # (n, C)
    ground: np.ndarray  # (C,)
    side: int
    nsamp: int


@dataclass
class _DropCache:
    mask_values: np.ndarray
    mask_ground: np.ndarray


@dataclass
class _ConvCache:
    delta: np.ndarray  # input values - input ground, (n_in, c_in)
    ground_in: np.ndarray
    taps: list  # [(in_idx, out_rows, di, dj)] per filter offset
    pre: np.ndarray  # (n_out, c_out) pre-activation
    g_pre: np.ndarray  # (c_out,)
    layer: int


@dataclass
class _PoolCache:
    parent: np.ndarray  # (n_in,) output row of each input cell
    winner: np.ndarray  # (n_out, C) input row per component, -1 = ground
    n_in: int


@dataclass
class _HeadCache:
    sid: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    flat_dropped: np.ndarray  # (B, 4C) fully-connected input after dropout
    mask_fc: np.ndarray | None
    h_pre: np.ndarray
    h_dropped: np.ndarray
    mask_out: np.ndarray | None
    field_shape: tuple


def _decode(keys: np.ndarray, side: int):
    sid, rest = np.divmod(keys, side * side)
    rows, cols = np.divmod(rest, side)
    return sid, rows, cols


def grids_to_batch(net: DeepCNet, grids) -> _Batch:
    """Concatenate sparse grids into one sorted active-cell batch."""
    cfg = net.cfg
    locs, feats, sids = [], [], []
    for s, g in enumerate(grids):
        if g.N != cfg.N or g.M != cfg.M:
            raise ValueError(
                f"grid {s} has shape ({g.N}, {g.N}, {g.M}), network expects "
                f"({cfg.N}, {cfg.N}, {cfg.M})"
            )
        loc, feat = g.packed()
        locs.append(loc)
        feats.append(feat)
        sids.append(np.full(len(loc), s, dtype=np.int64))
    loc = np.concatenate(locs) if locs else np.zeros((0, 2), np.int64)
    feat = (
        np.concatenate(feats).astype(net.dtype)
        if feats
        else np.zeros((0, cfg.M), net.dtype)
    )
    sid = np.concatenate(sids) if sids else np.zeros(0, np.int64)
    keys = (sid * cfg.N + loc[:, 0]) * cfg.N + loc[:, 1]
    order = np.argsort(keys, kind="stable")
    return _Batch(
        keys=keys[order],
        sid=sid[order],
        rows=loc[order, 0],
        cols=loc[order, 1],
        values=feat[order],
        ground=np.zeros(cfg.M, net.dtype),
        side=cfg.N,
        nsamp=len(grids),
    )


def _dropout_state(b: _Batch, rate: float, rng, dtype):
    if rate <= 0.0:
        return b, None
    mv = dropout_mask(b.values.shape, rate, rng, dtype)
    mg = dropout_mask(b.ground.shape, rate, rng, dtype)
    dropped = replace(b, values=b.values * mv, ground=b.ground * mg)
    return dropped, _DropCache(mask_values=mv, mask_ground=mg)


def _conv_forward(b: _Batch, w: np.ndarray, bias: np.ndarray, act, layer: int):
    f = w.shape[0]
    side_out = b.side - f + 1
    g_pre = bias + b.ground @ w.sum(axis=(0, 1))
    delta = b.values - b.ground

    offsets = []
    candidates = []
    for di in range(f):
        for dj in range(f):
            r = b.rows - di
            c = b.cols - dj
            ok = (r >= 0) & (r < side_out) & (c >= 0) & (c < side_out)
            idx = np.nonzero(ok)[0]
            keys = (b.sid[idx] * side_out + r[idx]) * side_out + c[idx]
            offsets.append((idx, keys, di, dj))
            candidates.append(keys)

    out_keys = np.unique(np.concatenate(candidates))
    pre = np.repeat(g_pre[None, :], len(out_keys), axis=0)
    taps = []
    for idx, keys, di, dj in offsets:
        out_rows = np.searchsorted(out_keys, keys)
        # injective for a fixed offset: no duplicate rows, += is safe
        pre[out_rows] += delta[idx] @ w[di, dj]
        taps.append((idx, out_rows, di, dj))

    sid, rows, cols = _decode(out_keys, side_out)
    out = _Batch(
        keys=out_keys,
        sid=sid,
        rows=rows,
        cols=cols,
        values=act(pre),
        ground=act(g_pre),
        side=side_out,
        nsamp=b.nsamp,
    )
    cache = _ConvCache(
        delta=delta, ground_in=b.ground, taps=taps, pre=pre, g_pre=g_pre, layer=layer
    )
    return out, cache


def _conv_backward(cache: _ConvCache, w: np.ndarray, act_grad, dvals, dground):
    dpre = dvals * act_grad(cache.pre)
    dg_pre = dground * act_grad(cache.g_pre) + dpre.sum(axis=0)
    dw = np.zeros_like(w)
    ddelta = np.zeros_like(cache.delta)
    for idx, out_rows, di, dj in cache.taps:
        dw[di, dj] += cache.delta[idx].T @ dpre[out_rows]
        ddelta[idx] += dpre[out_rows] @ w[di, dj].T
    # every tap also sees the input ground state through ground_pre
    dw += cache.ground_in[:, None] * dg_pre[None, :]
    db = dg_pre
    dvals_in = ddelta
    dground_in = w.sum(axis=(0, 1)) @ dg_pre - ddelta.sum(axis=0)
    return dw, db, dvals_in, dground_in


def _pool_forward(b: _Batch):
    side_out = b.side // 2
    okeys = (b.sid * side_out + b.rows // 2) * side_out + b.cols // 2
    out_keys, parent = np.unique(okeys, return_inverse=True)
    n_out = len(out_keys)
    c = b.values.shape[1]
    counts = np.bincount(parent, minlength=n_out)

    # Regions with a missing child compete against the ground vector;
    # actives win ties (>=), later ones overriding, which fixes the routing
    # deterministically.
    best = np.where(counts[:, None] < 4, b.ground[None, :], -np.inf).astype(b.values.dtype)
    winner = np.full((n_out, c), -1, dtype=np.int64)
    for di in (0, 1):
        for dj in (0, 1):
            sel = np.nonzero(((b.rows & 1) == di) & ((b.cols & 1) == dj))[0]
            if sel.size == 0:
                continue
            prow = parent[sel]
            vals = b.values[sel]
            better = vals >= best[prow]
            best[prow] = np.where(better, vals, best[prow])
            winner[prow] = np.where(better, sel[:, None], winner[prow])

    sid, rows, cols = _decode(out_keys, side_out)
    out = _Batch(
        keys=out_keys,
        sid=sid,
        rows=rows,
        cols=cols,
        values=best,
        ground=b.ground,
        side=side_out,
        nsamp=b.nsamp,
    )
    return out, _PoolCache(parent=parent, winner=winner, n_in=len(b.keys))


def _pool_backward(cache: _PoolCache, dvals, dground):
    routed = cache.winner[cache.parent] == np.arange(cache.n_in)[:, None]
    dvals_in = dvals[cache.parent] * routed
    dground_in = dground + (dvals * (cache.winner == -1)).sum(axis=0)
    return dvals_in, dground_in


def _head_forward(net: DeepCNet, b: _Batch, mode: str, rng):
    cfg = net.cfg
    act = net.activation
    bsz = b.nsamp
    c = b.values.shape[1]
    field = np.repeat(
        np.repeat(b.ground[None, None, None, :], 2, axis=1), 2, axis=2
    ).repeat(bsz, axis=0) if bsz else np.zeros((0, 2, 2, c), net.dtype)
    field = np.ascontiguousarray(field)
    field[b.sid, b.rows, b.cols] = b.values
    flat = field.reshape(bsz, 4 * c)

    mask_fc = mask_out = None
    rates = cfg.dropout_per_level
    if mode == "train" and rates[cfg.l] > 0.0:
        mask_fc = dropout_mask(flat.shape, rates[cfg.l], rng, net.dtype)
        flat = flat * mask_fc
    h_pre = flat @ net.fc_w + net.fc_b
    h = act(h_pre)
    if mode == "train" and rates[cfg.l + 1] > 0.0:
        mask_out = dropout_mask(h.shape, rates[cfg.l + 1], rng, net.dtype)
        h = h * mask_out
    scores = h @ net.out_w + net.out_b
    cache = _HeadCache(
        sid=b.sid,
        rows=b.rows,
        cols=b.cols,
        flat_dropped=flat,
        mask_fc=mask_fc,
        h_pre=h_pre,
        h_dropped=h,
        mask_out=mask_out,
        field_shape=field.shape,
    )
    return scores, cache


def _head_backward(net: DeepCNet, cache: _HeadCache, dscores):
    act_grad = net.activation_grad
    grads = {
        "out_w": cache.h_dropped.T @ dscores,
        "out_b": dscores.sum(axis=0),
    }
    dh = dscores @ net.out_w.T
    if cache.mask_out is not None:
        dh = dh * cache.mask_out
    dh_pre = dh * act_grad(cache.h_pre)
    grads["fc_w"] = cache.flat_dropped.T @ dh_pre
    grads["fc_b"] = dh_pre.sum(axis=0)
    dflat = dh_pre @ net.fc_w.T
    if cache.mask_fc is not None:
        dflat = dflat * cache.mask_fc
    dfield = dflat.reshape(cache.field_shape).copy()
    dvals = dfield[cache.sid, cache.rows, cache.cols].copy()
    dfield[cache.sid, cache.rows, cache.cols] = 0.0
    dground = dfield.sum(axis=(0, 1, 2))
    return grads, dvals, dground


def forward_batch(net: DeepCNet, grids, mode: str = "eval", rng=None):
    """Sparse pass over a list of grids -> (scores (B, classes), caches).

    ``caches`` drive :func:`loss_and_grads`; in eval mode they are still
    returned but carry no dropout masks.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng()
    cfg = net.cfg
    act = net.activation
    b = grids_to_batch(net, grids)
    stages = []
    for i in range(cfg.l):
        dcache = None
        if mode == "train":
            b, dcache = _dropout_state(b, cfg.dropout_per_level[i], rng, net.dtype)
        b, ccache = _conv_forward(b, net.conv_w[i], net.conv_b[i], act, i)
        conv_out = b
        b, pcache = _pool_forward(b)
        stages.append((dcache, ccache, conv_out, b, pcache))
    scores, hcache = _head_forward(net, b, mode, rng)
    return scores, (stages, hcache)


def forward_sparse(net: DeepCNet, grid, mode: str = "eval", rng=None):
    """Class scores for one grid; in train mode also the per-layer states.

    Eval-mode scores match :func:`~sigcnn.network.model.forward_dense` on
    the densified grid up to float tolerance.
    """
    scores, (stages, _) = forward_batch(net, [grid], mode, rng)
    if mode == "eval":
        return scores[0]
    states = []
    for _, _, conv_out, pooled, _ in stages:
        for layer in (conv_out, pooled):
            states.append(
                SparseLayerState(
                    locations=np.stack([layer.rows, layer.cols], axis=1),
                    features=layer.values.copy(),
                    ground_state=layer.ground.copy(),
                )
            )
    return scores[0], states


def softmax_cross_entropy(scores: np.ndarray, labels):
    """Mean cross-entropy and d(loss)/d(scores), computed in float64."""
    z = np.asarray(scores, np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = np.arange(len(labels))
    labels = np.asarray(labels)
    loss = float(-logp[idx, labels].mean())
    dscores = np.exp(logp)
    dscores[idx, labels] -= 1.0
    dscores /= len(labels)
    return loss, dscores.astype(scores.dtype)


def loss_and_grads(net: DeepCNet, grids, labels, rng=None, want_grads: bool = True):
    """Mean batch loss and parameter gradients through the sparse structures."""
    scores, (stages, hcache) = forward_batch(net, grids, "train", rng)
    loss, dscores = softmax_cross_entropy(scores, labels)
    if not want_grads:
        return loss, None
    grads, dvals, dground = _head_backward(net, hcache, dscores)
    act_grad = net.activation_grad
    for dcache, ccache, _, _, pcache in reversed(stages):
        dvals, dground = _pool_backward(pcache, dvals, dground)
        dw, db, dvals, dground = _conv_backward(
            ccache, net.conv_w[ccache.layer], act_grad, dvals, dground
        )
        grads[f"conv{ccache.layer + 1}_w"] = dw
        grads[f"conv{ccache.layer + 1}_b"] = db
        if dcache is not None:
            dvals = dvals * dcache.mask_values
            dground = dground * dcache.mask_ground
    return loss, grads


def _sharded_loss_and_grads(net: DeepCNet, grids, labels, rng, threads: int):
    n = len(grids)
    shards = min(threads, n)
    bounds = np.linspace(0, n, shards + 1).astype(int)
    seeds = rng.spawn(shards) if rng is not None else [None] * shards
    jobs = [
        (grids[a:b], labels[a:b], seeds[i])
        for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))
        if b > a
    ]
    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        results = list(
            pool.map(lambda j: loss_and_grads(net, j[0], j[1], j[2]), jobs)
        )
    total = sum(len(j[0]) for j in jobs)
    loss = sum(r[0] * len(j[0]) for r, j in zip(results, jobs)) / total
    grads = None
    for r, j in zip(results, jobs):  # fixed reduction order: deterministic
        w = len(j[0]) / total
        if grads is None:
            grads = {k: v * w for k, v in r[1].items()}
        else:
            for k, v in r[1].items():
                grads[k] += v * w
    return loss, grads


def train_batch(net: DeepCNet, batch, lr: float, momentum: float, rng, threads: int = 1):
    """One momentum-SGD step on a batch of (grid, label) pairs -> mean loss.

    Gradients are taken through the sparse structures; ground states are
    refreshed after the update.  ``threads`` > 1 shards the batch across a
    thread pool with a fixed reduction order, so results stay deterministic.
    """
    if not batch:
        raise ValueError("training batch is empty")
    grids = [g for g, _ in batch]
    labels = [int(y) for _, y in batch]
    if threads > 1:
        loss, grads = _sharded_loss_and_grads(net, grids, labels, rng, threads)
    else:
        loss, grads = loss_and_grads(net, grids, labels, rng)
    if not math.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss {loss!r} on a batch of {len(batch)} "
            f"(lr={lr}, momentum={momentum}); reduce the learning rate"
        )
    for name, p in net.params():
        v = net.velocities.get(name)
        if v is None:
            v = net.velocities[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * grads[name].astype(p.dtype)
        p += v
    net.refresh_ground_states()
    return loss


def classify(net: DeepCNet, grids, batch_size: int = 256) -> np.ndarray:
    """Predicted class index per grid (eval mode, batched)."""
    preds = np.empty(len(grids), dtype=np.int64)
    for a in range(0, len(grids), batch_size):
        chunk = grids[a : a + batch_size]
        scores, _ = forward_batch(net, chunk, "eval")
        preds[a : a + len(chunk)] = scores.argmax(axis=1)
    return preds


def error_rate(net: DeepCNet, grids, labels, batch_size: int = 256):
    """(fraction misclassified, confusion matrix counts[true, predicted])."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = classify(net, grids, batch_size)
    k = net.cfg.classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return float((preds != labels).mean()), confusion

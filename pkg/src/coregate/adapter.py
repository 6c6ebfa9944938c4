"""Trainable per-scale projection producing patch embeddings.

Per scale the map is: per-location linear (1x1 projection) -> per-channel
normalization with trainable scale/shift and running statistics -> ReLU.
Scales are bilinearly aligned to the largest grid, channel-concatenated, and
each location vector is L2-normalized.

Gradients are derived by hand (the network is shallow), so the core has no
autodiff dependency. The derivation is standard chain rule; the two nontrivial
pieces are noted on the backward helpers below.
"""

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataio import MultiScaleFeatures, PatchEmbeddings
from .errors import ConfigError, DataError, NumericError
from .memory import coreset_greedy
from .interp import resize_weights

__all__ = [
    "ScaleParams",
    "AdapterParams",
    "PrototypeSet",
    "AdamState",
    "init_adapter",
    "forward",
    "prototype_loss",
    "training_loss",
    "loss_gradient",
    "batch_loss_gradient",
    "warmup",
    "flatten_trainable",
    "unflatten_trainable",
]

DEFAULT_OUT_DIM = 256
DEFAULT_WARMUP_EPOCHS = 5
DEFAULT_WARMUP_LR = 1e-4
DEFAULT_PROTO_BUDGET = 2048
DEFAULT_BATCH_SIZE = 32

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1
UNIT_EPS = 1e-12

TRAINABLE_FIELDS = ("weight", "bias", "norm_scale", "norm_shift")


@dataclass
class ScaleParams:
    weight: np.ndarray       # (out_dim, in_channels)
    bias: np.ndarray         # (out_dim,)
    norm_scale: np.ndarray   # (out_dim,)
    norm_shift: np.ndarray   # (out_dim,)
    running_mean: np.ndarray
    running_var: np.ndarray

    def copy(self) -> "ScaleParams":
        return ScaleParams(*(getattr(self, f).copy() for f in
                             TRAINABLE_FIELDS + ("running_mean", "running_var")))


@dataclass
class AdapterParams:
    scales: list
    out_dim: int

    def __post_init__(self) -> None:
        for sp in self.scales:
            if sp.weight.shape[0] != self.out_dim:
                raise DataError("all scales must project to the same out_dim")
            if np.any(sp.running_var <= 0):
                raise DataError("running_var entries must stay positive")

    @property
    def in_channels(self) -> tuple:
        return tuple(sp.weight.shape[1] for sp in self.scales)

    def copy(self) -> "AdapterParams":
        return AdapterParams([sp.copy() for sp in self.scales], self.out_dim)


@dataclass
class PrototypeSet:
    """Coreset of unit embedding vectors the training loss pulls patches toward."""

    vectors: np.ndarray  # (K, dim)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DataError("no prototypes")


def init_adapter(in_channels: Sequence[int], out_dim: int = DEFAULT_OUT_DIM, rng_seed: int = 0) -> AdapterParams:
    """He-style seeded initialization; normalization starts as identity."""
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x41da]))
    scales = []
    for c_in in in_channels:
        scales.append(ScaleParams(
            weight=rng.normal(0.0, math.sqrt(2.0 / c_in), size=(out_dim, c_in)),
            bias=np.zeros(out_dim),
            norm_scale=np.ones(out_dim),
            norm_shift=np.zeros(out_dim),
            running_mean=np.zeros(out_dim),
            running_var=np.ones(out_dim),
        ))
    return AdapterParams(scales, out_dim)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"numerical failure: non-finite values in {name}")


def _embed_batch(features_list: Sequence[MultiScaleFeatures], params: AdapterParams,
                 train: bool, update_running: bool, want_cache: bool):
    """Embed a batch of images; normalization statistics pool over every
    location of every image in the batch (per channel) in train mode.

    Returns (per-image unit-vector matrices in float64, cache-or-None).
    """
    n_scales = len(params.scales)
    for feats in features_list:
        if len(feats.scales) != n_scales:
            raise DataError(f"expected {n_scales} scales, got {len(feats.scales)}")
        for s, arr in enumerate(feats.scales):
            if arr.shape[0] != params.scales[s].weight.shape[1]:
                raise DataError(
                    f"scale {s}: {arr.shape[0]} channels do not match adapter "
                    f"in_channels {params.scales[s].weight.shape[1]}")

    grids = [[f.scales[s].shape[1:] for s in range(n_scales)] for f in features_list]
    out_grids = [(max(g[0] for g in per_img), max(g[1] for g in per_img)) for per_img in grids]

    cache = {"scales": [], "grids": grids, "out_grids": out_grids} if want_cache else None
    upsampled = [[] for _ in features_list]  # per image, per scale (D, H, W)

    for s, sp in enumerate(params.scales):
        slices, offsets, off = [], [], 0
        for feats in features_list:
            x = feats.scales[s].astype(np.float64).reshape(feats.scales[s].shape[0], -1)
            slices.append(x)
            offsets.append(off)
            off += x.shape[1]
        x_all = np.concatenate(slices, axis=1)            # (C, N_pool)
        a_all = sp.weight @ x_all + sp.bias[:, None]      # (D, N_pool)
        _check_finite(f"scale {s} projection", a_all)

        if train:
            mean = a_all.mean(axis=1)
            var = a_all.var(axis=1)                       # population variance
            if update_running:
                sp.running_mean[:] = (1 - NORM_MOMENTUM) * sp.running_mean + NORM_MOMENTUM * mean
                sp.running_var[:] = np.maximum(
                    (1 - NORM_MOMENTUM) * sp.running_var + NORM_MOMENTUM * var, NORM_EPS)
        else:
            mean, var = sp.running_mean, sp.running_var
        inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        xhat_all = (a_all - mean[:, None]) * inv_std[:, None]
        n_all = sp.norm_scale[:, None] * xhat_all + sp.norm_shift[:, None]
        _check_finite(f"scale {s} normalization", n_all)
        r_all = np.maximum(n_all, 0.0)

        scale_cache = {"x_all": x_all, "xhat_all": xhat_all, "inv_std": inv_std,
                       "mask_all": n_all > 0, "offsets": offsets, "resize": []}
        for i, feats in enumerate(features_list):
            h, w = grids[i][s]
            oh, ow = out_grids[i]
            r = r_all[:, offsets[i]:offsets[i] + h * w].reshape(params.out_dim, h, w)
            if (h, w) == (oh, ow):
                rh = rw = None
                u = r
            else:
                rh, rw = resize_weights(h, oh), resize_weights(w, ow)
                u = np.einsum("ij,cjk,lk->cil", rh, r, rw, optimize=True)
            upsampled[i].append(u)
            scale_cache["resize"].append((rh, rw))
        if want_cache:
            cache["scales"].append(scale_cache)

    q_list, v_list, norm_list = [], [], []
    for i in range(len(features_list)):
        oh, ow = out_grids[i]
        v = np.concatenate(upsampled[i], axis=0).reshape(n_scales * params.out_dim, oh * ow).T
        norms = np.linalg.norm(v, axis=1)
        q = v / (norms + UNIT_EPS)[:, None]
        _check_finite(f"image {i} embeddings", q)
        q_list.append(q)
        v_list.append(v)
        norm_list.append(norms)
    if want_cache:
        cache["v_list"] = v_list
        cache["norm_list"] = norm_list
    return q_list, cache


def forward(features: MultiScaleFeatures, params: AdapterParams, mode: str = "eval") -> PatchEmbeddings:
    """Embed one image. Train mode normalizes with this call's own statistics
    and updates the running ones; eval mode is a pure function of inputs."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    q_list, _ = _embed_batch([features], params, train=(mode == "train"),
                             update_running=(mode == "train"), want_cache=False)
    oh = max(s.shape[1] for s in features.scales)
    ow = max(s.shape[2] for s in features.scales)
    return PatchEmbeddings(grid_h=oh, grid_w=ow, dim=len(params.scales) * params.out_dim,
                           vectors=q_list[0].astype(np.float32))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _nearest_prototypes(q: np.ndarray, protos: np.ndarray):
    """Per patch: (index of nearest prototype, distance). Ties take the
    lowest prototype index (argmin semantics); the subgradient there is
    set-valued and this picks one member deterministically."""
    d2 = np.maximum(
        np.sum(q * q, axis=1)[:, None] - 2.0 * (q @ protos.T) + np.sum(protos * protos, axis=1)[None, :],
        0.0,
    )
    idx = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(q.shape[0]), idx])
    return idx, dist


def prototype_loss(q: PatchEmbeddings, protos: PrototypeSet) -> float:
    """Mean over patches of the Euclidean distance to the nearest prototype."""
    if q.vectors.shape[1] != protos.vectors.shape[1]:
        raise DataError("embedding and prototype dims differ")
    _, dist = _nearest_prototypes(q.vectors.astype(np.float64), protos.vectors)
    return float(dist.mean())


def training_loss(features_list, params: AdapterParams, protos: PrototypeSet) -> float:
    """Batch prototype loss under train-mode statistics, without touching
    running stats: the quantity the warm-up minimizes, as a pure function of
    the parameters (used for finite-difference verification)."""
    if isinstance(features_list, MultiScaleFeatures):
        features_list = [features_list]
    embed_dim = len(params.scales) * params.out_dim
    if protos.vectors.shape[1] != embed_dim:
        raise DataError("embedding and prototype dims differ")
    q_list, _ = _embed_batch(features_list, params, train=True, update_running=False, want_cache=False)
    total, count = 0.0, 0
    for q in q_list:
        _, dist = _nearest_prototypes(q, protos.vectors)
        total += float(dist.sum())
        count += q.shape[0]
    return total / count


def _zero_grads(params: AdapterParams) -> list:
    return [{f: np.zeros_like(getattr(sp, f)) for f in TRAINABLE_FIELDS} for sp in params.scales]


def batch_loss_gradient(features_list: Sequence[MultiScaleFeatures], params: AdapterParams,
                        protos: PrototypeSet, update_running: bool = False):
    """Loss and exact (sub)gradients of the batch prototype loss.

    Backward path, per patch vector v with norm s and q = v / (s + eps):
        dq/dv applied to g:  g/(s+eps) - v * (v.g) / (s * (s+eps)^2)
    (the projection term vanishes identically as v -> 0). Patches at exactly
    zero distance from their nearest prototype contribute zero gradient.
    Through the normalization layer the batch-statistics backward is
        g_a = inv_std * (g_xhat - mean(g_xhat) - xhat * mean(g_xhat * xhat))
    with means over the pooled batch locations per channel.
    """
    if protos.vectors.shape[1] != len(params.scales) * params.out_dim:
        raise DataError("embedding and prototype dims differ")
    q_list, cache = _embed_batch(list(features_list), params, train=True,
                                 update_running=update_running, want_cache=True)
    n_scales = len(params.scales)
    total_patches = sum(q.shape[0] for q in q_list)
    grads = _zero_grads(params)

    loss_sum = 0.0
    # dL/dq for every patch, then back through normalization per image.
    gu_per_scale = [[] for _ in range(n_scales)]  # per scale, per image (D, oh, ow)
    for i, q in enumerate(q_list):
        idx, dist = _nearest_prototypes(q, protos.vectors)
        loss_sum += float(dist.sum())
        diff = q - protos.vectors[idx]
        safe = np.where(dist > 0.0, dist, 1.0)
        g_q = np.where(dist[:, None] > 0.0, diff / safe[:, None], 0.0) / total_patches

        v, s = cache["v_list"][i], cache["norm_list"][i]
        denom = s + UNIT_EPS
        proj = np.einsum("pd,pd->p", v, g_q)
        scale_term = np.where(s > 0.0, proj / (np.where(s > 0.0, s, 1.0) * denom * denom), 0.0)
        g_v = g_q / denom[:, None] - v * scale_term[:, None]
        _check_finite(f"image {i} embedding gradient", g_v)

        oh, ow = cache["out_grids"][i]
        g_v = g_v.T.reshape(n_scales, params.out_dim, oh, ow)
        for s_idx in range(n_scales):
            gu_per_scale[s_idx].append(g_v[s_idx])

    for s_idx, sp in enumerate(params.scales):
        sc = cache["scales"][s_idx]
        pieces = []
        for i in range(len(q_list)):
            g_u = gu_per_scale[s_idx][i]
            rh, rw = sc["resize"][i]
            if rh is None:
                g_r = g_u
            else:
                g_r = np.einsum("ij,cik,kl->cjl", rh, g_u, rw, optimize=True)
            pieces.append(g_r.reshape(params.out_dim, -1))
        g_r_all = np.concatenate(pieces, axis=1)
        g_n_all = g_r_all * sc["mask_all"]

        xhat = sc["xhat_all"]
        grads[s_idx]["norm_scale"] = np.sum(g_n_all * xhat, axis=1)
        grads[s_idx]["norm_shift"] = np.sum(g_n_all, axis=1)

        g_xhat = g_n_all * sp.norm_scale[:, None]
        mean_g = g_xhat.mean(axis=1, keepdims=True)
        mean_gx = (g_xhat * xhat).mean(axis=1, keepdims=True)
        g_a = sc["inv_std"][:, None] * (g_xhat - mean_g - xhat * mean_gx)
        _check_finite(f"scale {s_idx} pre-normalization gradient", g_a)

        grads[s_idx]["weight"] = g_a @ sc["x_all"].T
        grads[s_idx]["bias"] = np.sum(g_a, axis=1)

    return loss_sum / total_patches, grads


def loss_gradient(features: MultiScaleFeatures, params: AdapterParams, protos: PrototypeSet):
    """Single-image convenience wrapper around :func:`batch_loss_gradient`."""
    return batch_loss_gradient([features], params, protos)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: AdapterParams, lr: float) -> "AdamState":
        state = cls(lr=lr)
        state.m = _zero_grads(params)
        state.v = _zero_grads(params)
        return state

    def step(self, params: AdapterParams, grads: list) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for s_idx, sp in enumerate(params.scales):
            for name in TRAINABLE_FIELDS:
                g = grads[s_idx][name]
                m = self.m[s_idx][name]
                v = self.v[s_idx][name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                arr = getattr(sp, name)
                arr -= update


# ---------------------------------------------------------------------------
# Warm-up
# ---------------------------------------------------------------------------

def warmup(
    features_by_id: Mapping[int, MultiScaleFeatures],
    seed_ids: Sequence[int],
    params: AdapterParams,
    epochs: int = DEFAULT_WARMUP_EPOCHS,
    lr: float = DEFAULT_WARMUP_LR,
    proto_budget: int = DEFAULT_PROTO_BUDGET,
    batch_size: int = DEFAULT_BATCH_SIZE,
    rng_seed: int = 123,
    optimizer: AdamState | None = None,
    on_epoch=None,
):
    """Warm the adapter on trusted seed images.

    Builds the seed vector pool at native grid resolution (no per-image cap),
    selects prototypes as a farthest-first coreset of budget ``proto_budget``,
    then runs ``epochs`` epochs of minibatch Adam on the prototype-coverage
    loss. Minibatch order is a fresh seeded shuffle each epoch. Returns the
    updated parameters and the prototype set. ``on_epoch(params)`` is invoked
    after each epoch, e.g. for posterior snapshotting.
    """
    if len(seed_ids) == 0:
        raise DataError("empty seed")
    seed_ids = list(seed_ids)
    pool = []
    for img_id in seed_ids:
        emb = forward(features_by_id[img_id], params, mode="eval")
        pool.append(emb.vectors.astype(np.float64))
    v_seed = np.concatenate(pool, axis=0)
    ratio = min(1.0, proto_budget / v_seed.shape[0])
    protos = PrototypeSet(v_seed[coreset_greedy(v_seed, ratio)])

    if optimizer is None:
        optimizer = AdamState.for_params(params, lr)
    for epoch in range(epochs):
        order = list(seed_ids)
        order_rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x3a7, epoch]))
        order_rng.shuffle(order)
        for lo in range(0, len(order), batch_size):
            batch = [features_by_id[i] for i in order[lo:lo + batch_size]]
            _, grads = batch_loss_gradient(batch, params, protos, update_running=True)
            optimizer.step(params, grads)
        if on_epoch is not None:
            on_epoch(params)
    return params, protos


# ---------------------------------------------------------------------------
# Flattened trainable-weight view (posterior bookkeeping)
# ---------------------------------------------------------------------------

def flatten_trainable(params: AdapterParams) -> np.ndarray:
    """Concatenate all trainable arrays (not running statistics) into one
    float64 vector, in a fixed scale/field order."""
    parts = []
    for sp in params.scales:
        for name in TRAINABLE_FIELDS:
            parts.append(getattr(sp, name).ravel())
    return np.concatenate(parts).astype(np.float64)


def unflatten_trainable(vec: np.ndarray, template: AdapterParams) -> AdapterParams:
    """Rebuild params from a flat trainable vector, keeping the template's
    running statistics."""
    expected = flatten_trainable(template).size
    if vec.size != expected:
        raise DataError(f"flat vector has {vec.size} entries, adapter expects {expected}")
    out = template.copy()
    off = 0
    for sp in out.scales:
        for name in TRAINABLE_FIELDS:
            arr = getattr(sp, name)
            n = arr.size
            arr[...] = vec[off:off + n].reshape(arr.shape)
            off += n
    return out

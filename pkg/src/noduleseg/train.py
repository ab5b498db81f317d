"""Optimization protocol: Adam, joint augmentation, the two-stage schedule, and random search.

Stage 1 trains the automatic block alone on the overlap loss until its
validation loss stops improving for 3 epochs. Its weights are then frozen
(the block runs in eval mode, so even its running statistics stay put) and
stage 2 trains the correction block on the blended loss with per-annotator
simulated end-points, patience 5. Every (nodule, annotator) pair counts once
per epoch; the train/validation split is made at case level so no nodule
leaks across it.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .field import FieldParams, PointPair, attraction_map
from .interact import DegenerateStrokeError, simulate_endpoints
from .loss import LossConfig, combined_loss, iou_loss
from .net import WNet, WNetConfig, concat_channels
from .volgrid import BinaryMask, ScalarVolume, sample_trilinear


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 0.001) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
            lr=lr,
        )


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Aborts on non-finite gradients instead of silently corrupting moments.
    """
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("parameter/gradient/state lengths do not match")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {getattr(p, 'name', '?')}")
        g = np.asarray(g, dtype=m.dtype)
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 0.001
    stage1_patience: int = 3
    stage2_patience: int = 5
    max_epochs: int = 40
    augment: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    improvement_tol: float = 1e-4  # strict-improvement margin on the epoch-mean val loss
    stage2_warm_start: bool = True  # start block 2 as a copy of the trained block 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage1_patience < 1 or self.stage2_patience < 1:
            raise ValueError("patience values must be >= 1")


@dataclass(frozen=True)
class TrainSample:
    """One (nodule, annotator) pairing at the network grid.

    ``pair`` is None when the target is too small at this grid to carry a
    two-point diameter stroke (sub-resolution nodule); the weight map is then
    the zero tensor and the attraction term is inert for that sample.
    """

    case_id: str
    volume: ScalarVolume
    target: BinaryMask
    pair: PointPair | None

    def __post_init__(self):
        if self.volume.geometry.dims != self.target.geometry.dims:
            raise ValueError("volume and target must share dims")


# --- joint augmentation -------------------------------------------------------


def _rot90_z(values: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(values, k, axes=(1, 2))


def _point_rot90_z(pt, k: int, n: int):
    z, y, x = pt
    for _ in range(k % 4):
        y, x = (n - 1) - x, y
    return (z, y, x)


def _warp_points(dims):
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz, yy, xx], axis=-1)


def augment(sample: TrainSample, rng: np.random.Generator) -> TrainSample:
    """Apply one random spatial transform jointly to volume, target and stroke points.

    Draw: per-axis flips (p=0.5 each), a quarter-turn about z, then a single
    continuous warp combining a small z-rotation (within 10 degrees), an
    isotropic zoom in [0.9, 1.1] and an integer translation in [-4, 4]^3.
    The volume is interpolated trilinearly, the mask nearest-neighbor so it
    stays binary. A draw that empties the target, collapses the points, or
    clips away more of the target than the zoom bounds explain (count outside
    [0.8*0.9^3, 1.2*1.1^3] of the original, beyond rasterization slack) is
    retried up to 5 times before falling back to the identity.
    """
    base_count = sample.target.voxel_count()
    for _ in range(5):
        flips = rng.random(3) < 0.5
        k90 = int(rng.integers(4))
        angle = math.radians(rng.uniform(-10.0, 10.0))
        zoom = rng.uniform(0.9, 1.1)
        shift = rng.integers(-4, 5, size=3).astype(np.float64)
        out = _apply_transform(sample, flips, k90, angle, zoom, shift)
        if out is None:
            continue
        count = out.target.voxel_count()
        ratio = count / base_count
        if 0.8 * 0.9 ** 3 <= ratio <= 1.2 * 1.1 ** 3 or abs(count - base_count) <= 2:
            return out
    return sample


def _apply_transform(sample: TrainSample, flips, k90, angle, zoom, shift) -> TrainSample | None:
    vol = sample.volume.values.astype(np.float64)
    tgt = sample.target.values.astype(np.float64)
    dims = sample.volume.geometry.dims
    n = dims[1]
    has_pair = sample.pair is not None
    pts = [np.asarray(p, dtype=np.float64)
           for p in ((sample.pair.p0, sample.pair.p1) if has_pair else ())]

    for ax in range(3):
        if flips[ax]:
            vol = np.flip(vol, axis=ax)
            tgt = np.flip(tgt, axis=ax)
            for p in pts:
                p[ax] = (dims[ax] - 1) - p[ax]
    if k90:
        vol = _rot90_z(vol, k90)
        tgt = _rot90_z(tgt, k90)
        pts = [np.asarray(_point_rot90_z(p, k90, n), dtype=np.float64) for p in pts]

    # forward map: p' = R_z(angle) * zoom * (p - c) + c + shift
    c = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    ca, sa = math.cos(angle), math.sin(angle)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    fwd = rot * zoom
    inv = rot.T / zoom
    grid = _warp_points(dims)
    src = (grid - c - shift) @ inv.T + c
    vol_w = sample_trilinear(vol, src)
    lo = np.floor(src + 0.5).astype(np.int64)
    inside = np.all((lo >= 0) & (lo < np.asarray(dims)), axis=-1)
    tgt_w = np.zeros(dims)
    cl = np.clip(lo, 0, np.asarray(dims) - 1)
    tgt_w = tgt[cl[..., 0], cl[..., 1], cl[..., 2]] * inside
    if not tgt_w.any():
        return None
    new_pair = None
    if has_pair:
        new_pts = [fwd @ (p - c) + c + shift for p in pts]
        new_pts = [np.clip(p, 0.0, np.asarray(dims, dtype=np.float64) - 1.0)
                   for p in new_pts]
        if np.allclose(new_pts[0], new_pts[1]):
            return None
        new_pair = PointPair(tuple(new_pts[0]), tuple(new_pts[1]))
    geo = sample.volume.geometry
    return TrainSample(
        case_id=sample.case_id,
        volume=ScalarVolume(geo, np.clip(vol_w, 0.0, 1.0)),
        target=BinaryMask(geo, tgt_w.astype(np.uint8)),
        pair=new_pair,
    )


# --- dataset plumbing ----------------------------------------------------------


def split_cases(case_ids: list[str], val_fraction: float = 0.2,
                seed: int = 0) -> tuple[list[str], list[str]]:
    """Deterministic train/validation split at case (scan) level."""
    ids = sorted(case_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_val = max(1, int(round(val_fraction * len(ids))))
    return ids[n_val:], ids[:n_val]


def pair_samples(cases, case_ids=None) -> list[TrainSample]:
    """Expand cases into (nodule, annotator) samples with simulated stroke end-points.

    ``cases`` is a list of objects exposing ``case_id``, ``volume`` and
    ``annotations`` already resampled to the network grid.
    """
    wanted = None if case_ids is None else set(case_ids)
    out = []
    for case in cases:
        if wanted is not None and case.case_id not in wanted:
            continue
        for target in case.annotations.masks:
            try:
                pair = simulate_endpoints(target)
            except DegenerateStrokeError:
                pair = None
            out.append(TrainSample(
                case_id=case.case_id,
                volume=case.volume,
                target=target,
                pair=pair,
            ))
    return out


# --- the two training stages ----------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _snapshot(net: WNet) -> list[np.ndarray]:
    return [arr.copy() for _, arr in net.state()]


def _restore(net: WNet, snap: list[np.ndarray]) -> None:
    for (_, arr), saved in zip(net.state(), snap):
        arr[...] = saved


def _maps_for(samples, idxs, decay_p: float) -> np.ndarray:
    geo = samples[idxs[0]].volume.geometry
    params = FieldParams(decay_p=decay_p)
    return np.stack([
        attraction_map(samples[i].pair, params, geo).values for i in idxs
    ])


class _History(list):
    """Per-epoch records; also knows how to append to a JSON-lines log."""

    def __init__(self, log_path=None):
        super().__init__()
        self.log_path = Path(log_path) if log_path else None

    def record(self, **kw):
        self.append(kw)
        if self.log_path:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(kw) + "\n")


def _early_stop_loop(net, config, patience, epoch_fn, val_fn, stage, log_path):
    history = _History(log_path)
    best_loss = math.inf
    best_snap = _snapshot(net)
    best_epoch = 0
    bad = 0
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        train_loss = epoch_fn(rng)
        val_loss, val_iou = val_fn()
        history.record(stage=stage, epoch=epoch, train_loss=train_loss,
                       val_loss=val_loss, val_iou=val_iou,
                       seconds=round(time.time() - t0, 3))
        if val_loss < best_loss - config.improvement_tol:
            best_loss = val_loss
            best_snap = _snapshot(net)
            best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    _restore(net, best_snap)
    for h in history:
        h["best_epoch"] = best_epoch
    return history


def _val_block1(net, val_samples, batch_size):
    losses, ious = [], []
    for i in range(0, len(val_samples), batch_size):
        batch = val_samples[i:i + batch_size]
        x = np.stack([s.volume.values for s in batch])[:, None]
        y = net.run_block1(x, train=False, cache=False)
        for j, s in enumerate(batch):
            l, _ = iou_loss(y[j, 0], s.target.values)
            losses.append(l)
            pred = y[j, 0] >= 0.5
            inter = np.logical_and(pred, s.target.values > 0).sum()
            union = np.logical_or(pred, s.target.values > 0).sum()
            ious.append(inter / union if union else 0.0)
    return float(np.mean(losses)), float(np.mean(ious))


def train_stage1(cases, config: TrainConfig, net: WNet | None = None,
                 log_path=None) -> tuple[WNet, list[dict]]:
    """Train the automatic block on the overlap loss with early stopping.

    Returns the network holding the best-validation-epoch parameters (not the
    last epoch's) and the per-epoch history.
    """
    if not cases:
        raise ValueError("empty dataset")
    net = net or WNet(WNetConfig(), seed=config.seed)
    train_ids, val_ids = split_cases([c.case_id for c in cases], seed=config.seed)
    train_samples = pair_samples(cases, train_ids)
    val_samples = pair_samples(cases, val_ids)
    aug_rng = np.random.default_rng(config.seed + 1)
    state = AdamState.for_params(net.parameters("block1"), lr=config.lr)

    def run_epoch(rng):
        losses = []
        for idxs in _batches(len(train_samples), config.batch_size, rng):
            batch = [train_samples[i] for i in idxs]
            if config.augment:
                batch = [augment(s, aug_rng) for s in batch]
            x = np.stack([s.volume.values for s in batch])[:, None]
            net.zero_grad()
            y = net.run_block1(x, train=True, cache=True)
            dy = np.empty_like(y)
            batch_loss = 0.0
            for j, s in enumerate(batch):
                l, g = iou_loss(y[j, 0], s.target.values)
                batch_loss += l
                dy[j, 0] = g / len(batch)
            net.block1.backward(dy)
            params = net.parameters("block1")
            adam_step(params, [p.grad for p in params], state)
            losses.append(batch_loss / len(batch))
        return float(np.mean(losses))

    history = _early_stop_loop(
        net, config, config.stage1_patience, run_epoch,
        lambda: _val_block1(net, val_samples, config.batch_size),
        stage=1, log_path=log_path,
    )
    return net, list(history)


def warm_start_block2(net: WNet) -> None:
    """Initialize the correction block from the trained automatic block.

    Weights, biases, batch-norm parameters and running statistics are copied
    layer for layer; the extra input channels of block 2 (initial
    segmentation and weight map) start with zero weights in the first
    convolution and in the skip-fed head. Block 2 therefore begins as an
    exact functional copy of block 1 and training spends its budget on
    learning how the stroke changes the answer, not on re-learning
    segmentation from scratch.
    """
    b1, b2 = net.block1, net.block2
    for (c1, n1), (c2, n2) in zip(b1.enc, b2.enc):
        if c1.in_ch == c2.in_ch:
            c2.weight.value[...] = c1.weight.value
        else:
            c2.weight.value[...] = 0.0
            c2.weight.value[:, :1] = c1.weight.value  # image channel only
        c2.bias.value[...] = c1.bias.value
        n2.gamma.value[...] = n1.gamma.value
        n2.beta.value[...] = n1.beta.value
        n2.running_mean[...] = n1.running_mean
        n2.running_var[...] = n1.running_var
    for (c1, n1), (c2, n2) in zip(b1.dec, b2.dec):
        c2.weight.value[...] = c1.weight.value
        c2.bias.value[...] = c1.bias.value
        n2.gamma.value[...] = n1.gamma.value
        n2.beta.value[...] = n1.beta.value
        n2.running_mean[...] = n1.running_mean
        n2.running_var[...] = n1.running_var
    h1, h2 = b1.head.conv, b2.head.conv
    shared = h1.in_ch  # decoder channels plus the image channel
    h2.weight.value[...] = 0.0
    h2.weight.value[:, :shared] = h1.weight.value
    h2.bias.value[...] = h1.bias.value


def _forward_stage2(net, batch, maps, train):
    x = np.stack([s.volume.values for s in batch])[:, None]
    y1 = net.run_block1(x, train=False, cache=False)  # frozen: eval mode, no caches
    m = maps[:, None].astype(net.dtype)
    stacked = concat_channels(concat_channels(x, y1), m)
    y2 = net.block2.forward(stacked, train=train, cache=train)
    return y2


def _val_stage2(net, val_samples, config):
    losses, ious = [], []
    decay = config.loss.decay_p
    bs = config.batch_size
    for i in range(0, len(val_samples), bs):
        idxs = list(range(i, min(i + bs, len(val_samples))))
        batch = [val_samples[k] for k in idxs]
        maps = _maps_for(val_samples, idxs, decay)
        y2 = _forward_stage2(net, batch, maps, train=False)
        for j, s in enumerate(batch):
            lv = combined_loss(y2[j, 0], s.target.values, maps[j], config.loss)
            losses.append(lv.total)
            pred = y2[j, 0] >= 0.5
            inter = np.logical_and(pred, s.target.values > 0).sum()
            union = np.logical_or(pred, s.target.values > 0).sum()
            ious.append(inter / union if union else 0.0)
    return float(np.mean(losses)), float(np.mean(ious))


def train_stage2(cases, net: WNet, config: TrainConfig,
                 log_path=None) -> tuple[WNet, list[dict]]:
    """Train the correction block with block 1 frozen.

    Per sample the weight map is regenerated from that annotator's simulated
    end-points, so the same nodule is corrected toward different targets.
    Block-1 parameters and running statistics are bit-identical afterwards.
    """
    if not cases:
        raise ValueError("empty dataset")
    train_ids, val_ids = split_cases([c.case_id for c in cases], seed=config.seed)
    train_samples = pair_samples(cases, train_ids)
    val_samples = pair_samples(cases, val_ids)
    aug_rng = np.random.default_rng(config.seed + 2)
    if config.stage2_warm_start:
        warm_start_block2(net)
    state = AdamState.for_params(net.parameters("block2"), lr=config.lr)
    decay = config.loss.decay_p

    def run_epoch(rng):
        losses = []
        for idxs in _batches(len(train_samples), config.batch_size, rng):
            batch = [train_samples[i] for i in idxs]
            if config.augment:
                batch = [augment(s, aug_rng) for s in batch]
            geo = batch[0].volume.geometry
            fp = FieldParams(decay_p=decay)
            maps = np.stack([attraction_map(s.pair, fp, geo).values for s in batch])
            net.zero_grad()
            y2 = _forward_stage2(net, batch, maps, train=True)
            dy = np.empty_like(y2)
            batch_loss = 0.0
            for j, s in enumerate(batch):
                lv = combined_loss(y2[j, 0], s.target.values, maps[j], config.loss)
                batch_loss += lv.total
                dy[j, 0] = lv.grad_wrt_pred / len(batch)
            net.block2.backward(dy)
            params = net.parameters("block2")
            adam_step(params, [p.grad for p in params], state)
            losses.append(batch_loss / len(batch))
        return float(np.mean(losses))

    history = _early_stop_loop(
        net, config, config.stage2_patience, run_epoch,
        lambda: _val_stage2(net, val_samples, config),
        stage=2, log_path=log_path,
    )
    return net, list(history)


def hyperparam_search(cases, stage1_net: WNet, steps: int = 100,
                      seed: int = 0, budget_epochs: int = 5,
                      base_config: TrainConfig | None = None,
                      log_path=None) -> dict:
    """Random search over (lambda1, gamma, decay_p) ~ U([0,1]^3).

    Each step re-initializes the correction block, trains it for a small
    epoch budget and scores validation IoU; returns the best triple. The
    shipped LossConfig defaults come from the full-scale reference search
    (lambda1=0.68, gamma=0.59, p=0.44) and are not re-derived here.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = base_config or TrainConfig()
    rng = np.random.default_rng(seed)
    log = _History(log_path)
    best = None
    for step in range(steps):
        lam, gam, dec = (float(v) for v in rng.random(3))
        cfg = replace(base, loss=LossConfig(lambda1=lam, gamma=gam, decay_p=dec),
                      max_epochs=budget_epochs, seed=seed + 1000 + step)
        trial = copy.deepcopy(stage1_net)
        fresh = WNet(trial.config, seed=cfg.seed)
        for p, q in zip(trial.block2.parameters(), fresh.block2.parameters()):
            p.value[...] = q.value
        _, hist = train_stage2(cases, trial, cfg)
        val_iou = max(h["val_iou"] for h in hist)
        log.record(step=step, lambda1=lam, gamma=gam, decay_p=dec, val_iou=val_iou)
        if best is None or val_iou > best["val_iou"]:
            best = {"lambda1": lam, "gamma": gam, "decay_p": dec, "val_iou": val_iou}
    return best

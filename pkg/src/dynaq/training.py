"""Balanced batch composition, the joint-loss training loop, and caching.

The action cache re-simulates each task's stored screen (1000 uniform
candidates, seeded by the task's ``screen_seed``), then keeps up to
``pool_size`` positive and negative rollouts per task.  Batches draw t
tasks and, per task, n positive plus n negative cached actions; the
hand-crafted mode attaches similarity targets for all (2n)^2 ordered
action pairs per task, the self-supervised mode attaches one random
frame window per sample.

Metric log: CSV with columns (step, lr, loss_solved, loss_aux, mode).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Adam, Tensor, cosine_lr, save_checkpoint
from .errors import DynaqError, TrainingDivergedError
from .physics import Rollout, SimConfig
from .similarity import SimilarityConfig, pair_matrix
from .tasks import Action, ScreenConfig, Task, TIER_DIMS, simulate_screen


@dataclass(frozen=True)
class TrainConfig:
    total_batches: int = 2000
    tasks_per_batch: int = 16        # t
    actions_per_task: int = 4        # n (positives; negatives match)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0        # 0 = final checkpoint only
    pool_size: int = 64

    def __post_init__(self):
        if self.tasks_per_batch < 1 or self.actions_per_task < 1:
            raise ValueError("t and n must be >= 1")
        if self.total_batches < 1:
            raise ValueError("total_batches must be >= 1")


@dataclass
class CacheEntry:
    task: Task
    pos_actions: np.ndarray          # (P, adim) unit-cube coords
    neg_actions: np.ndarray
    pos_rollouts: list
    neg_rollouts: list
    solve_rate: float

    @property
    def n_pos(self):
        return len(self.pos_rollouts)

    @property
    def n_neg(self):
        return len(self.neg_rollouts)


def build_cache(tasks: Sequence[Task], sim_cfg: SimConfig | None = None,
                screen: ScreenConfig | None = None,
                pool_size: int = 64) -> dict:
    """Label each task's screen candidates and keep rollout pools."""
    screen = screen or ScreenConfig()
    cache = {}
    for task in tasks:
        actions, labels, rolls = simulate_screen(task, screen, sim_cfg)
        coords = np.array([a.coords for a in actions], dtype=np.float32)
        pos = np.flatnonzero(labels)[:pool_size]
        neg = np.flatnonzero(~labels)[:pool_size]
        cache[task.task_id] = CacheEntry(
            task, coords[pos], coords[neg],
            [rolls[i] for i in pos], [rolls[i] for i in neg],
            float(labels.mean()))
    return cache


@dataclass
class Batch:
    task_ids: list                   # t entries, aligned with raster rows
    sample_task: np.ndarray          # (2tn,) row index into task_ids
    actions: np.ndarray              # (2tn, adim)
    labels: np.ndarray               # (2tn,) float 0/1
    sample_rollouts: list            # (2tn,) Rollout refs
    pair_i: np.ndarray               # (4tn^2,) sample indices (handcrafted)
    pair_j: np.ndarray
    pair_bins: np.ndarray            # (4tn^2,) int targets
    pair_v: np.ndarray               # (4tn^2,) float targets
    window_starts: np.ndarray        # (2tn,) int (selfsup)

    @property
    def n_samples(self):
        return len(self.actions)


def compose_batch(cache: dict, train_ids: Sequence[str], t: int, n: int,
                  rng: np.random.Generator, mode: str = "baseline",
                  sim_cfg: SimConfig | None = None,
                  sim_config: SimilarityConfig | None = None,
                  contrast_frames: int = 2) -> Batch:
    """Draw t tasks and n positive + n negative cached actions per task."""
    ids = list(train_ids)
    usable = [i for i in ids if cache[i].n_pos >= n and cache[i].n_neg >= n]
    if len(usable) < min(t, len(ids)):
        short = sorted(set(ids) - set(usable))
        raise DynaqError(
            f"tasks with fewer than {n} cached positives/negatives: {short[:4]}")
    if len(usable) >= t:
        pick = rng.choice(len(usable), size=t, replace=False)
    else:
        pick = rng.integers(0, len(usable), size=t)
    task_ids = [usable[i] for i in pick]

    adim = TIER_DIMS[cache[task_ids[0]].task.tier]
    actions = np.empty((2 * t * n, adim), dtype=np.float32)
    labels = np.empty(2 * t * n, dtype=np.float64)
    sample_task = np.repeat(np.arange(t), 2 * n)
    rollouts: list = []
    for k, tid in enumerate(task_ids):
        entry = cache[tid]
        pi = rng.choice(entry.n_pos, size=n, replace=False)
        ni = rng.choice(entry.n_neg, size=n, replace=False)
        lo = k * 2 * n
        actions[lo:lo + n] = entry.pos_actions[pi]
        actions[lo + n:lo + 2 * n] = entry.neg_actions[ni]
        labels[lo:lo + n] = 1.0
        labels[lo + n:lo + 2 * n] = 0.0
        rollouts.extend(entry.pos_rollouts[i] for i in pi)
        rollouts.extend(entry.neg_rollouts[i] for i in ni)

    pair_i = pair_j = pair_bins = pair_v = np.empty(0, dtype=np.int64)
    if mode == "handcrafted":
        scfg = sim_config or SimilarityConfig()
        ii, jj, bb, vv = [], [], [], []
        for k, tid in enumerate(task_ids):
            lo = k * 2 * n
            block = rollouts[lo:lo + 2 * n]
            targets = pair_matrix(cache[tid].task, [None] * len(block), block, scfg)
            gi, gj = np.meshgrid(np.arange(2 * n), np.arange(2 * n), indexing="ij")
            ii.append(gi.ravel() + lo)
            jj.append(gj.ravel() + lo)
            bb.append(targets.bins.ravel())
            vv.append(targets.v.ravel())
        pair_i = np.concatenate(ii)
        pair_j = np.concatenate(jj)
        pair_bins = np.concatenate(bb)
        pair_v = np.concatenate(vv)

    starts = np.zeros(2 * t * n, dtype=np.int64)
    if mode == "selfsup":
        for s, roll in enumerate(rollouts):
            hi = max(roll.length - contrast_frames, 0)
            starts[s] = rng.integers(0, hi + 1)

    return Batch(task_ids, sample_task, actions, labels, rollouts,
                 pair_i, pair_j, pair_bins, pair_v, starts)


def window_indices(roll: Rollout, start: int, k: int) -> np.ndarray:
    """K consecutive frame indices from `start`, clamped into the rollout
    (short rollouts repeat their final frame)."""
    return np.minimum(start + np.arange(k), roll.length - 1)


@dataclass
class TrainContext:
    """Per-run lookups: tasks by id and pre-drawn scene rasters."""

    tasks: dict
    rasters: dict

    @staticmethod
    def build(tasks: Sequence[Task], ids: Sequence[str], raster_size: int):
        by_id = {t.task_id: t for t in tasks}
        return TrainContext(
            {i: by_id[i] for i in ids},
            {i: M.rasterize(by_id[i].scene, None, raster_size) for i in ids})


def batch_losses(params: dict, mcfg: M.ModelConfig, batch: Batch,
                 ctx: TrainContext):
    """Forward pass: (loss_solved, loss_aux or None) as graph nodes."""
    if mcfg.repr_mode == "film":
        task_rasters = np.stack([ctx.rasters[tid] for tid in batch.task_ids])
        e = M.embed_film(params, task_rasters, batch.actions, batch.sample_task)
    else:
        rasters = np.empty((batch.n_samples, M.N_CHANNELS,
                            mcfg.raster_size, mcfg.raster_size), np.float32)
        for s in range(batch.n_samples):
            task = ctx.tasks[batch.task_ids[batch.sample_task[s]]]
            act = Action(task.tier, tuple(batch.actions[s]))
            rasters[s] = M.rasterize(task.scene, act, mcfg.raster_size)
        e = M.encode_plain(params, rasters)

    logits = M.score(params, e)
    loss_solved = M.solved_loss(logits, batch.labels)

    loss_aux = None
    if mcfg.loss_mode == "handcrafted":
        p = M.project_pair(params, mcfg, e)
        u = M.pair_head(params, mcfg,
                        ad.gather_rows(p, batch.pair_i),
                        ad.gather_rows(p, batch.pair_j))
        if mcfg.aux_target == "bins":
            loss_aux = M.aux_loss_handcrafted(u, batch.pair_bins)
        else:
            v_hat = ad.reshape(u, (u.shape[0],))
            loss_aux = M.aux_loss_mse(v_hat, batch.pair_v)
    elif mcfg.loss_mode == "selfsup":
        z = M.project_contrastive(params, mcfg, e)
        kc = mcfg.contrast_frames
        frames = np.empty((batch.n_samples * kc, M.N_CHANNELS,
                           mcfg.raster_size, mcfg.raster_size), np.float32)
        for s, roll in enumerate(batch.sample_rollouts):
            task = ctx.tasks[batch.task_ids[batch.sample_task[s]]]
            act = Action(task.tier, tuple(batch.actions[s]))
            idx = window_indices(roll, int(batch.window_starts[s]), kc)
            frames[s * kc:(s + 1) * kc] = M.rasterize_frames(
                task.scene, act, roll, idx, mcfg.raster_size)
        e_roll = M.rollout_embedding(params, mcfg, frames)
        loss_aux = M.contrastive_loss(z, e_roll, mcfg.temperature,
                                      mcfg.negatives)
    return loss_solved, loss_aux


def write_metrics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "lr", "loss_solved",
                                          "loss_aux", "mode"])
        w.writeheader()
        w.writerows(rows)


def train(tasks: Sequence[Task], train_ids: Sequence[str],
          mcfg: M.ModelConfig, tcfg: TrainConfig,
          sim_cfg: SimConfig | None = None, cache: dict | None = None,
          out_dir=None, quiet: bool = True):
    """Adam + cosine schedule on L (+ aux_weight * L_aux); returns
    (params, metric rows).  Fully reproducible from the seed."""
    sim_cfg = sim_cfg or SimConfig()
    by_id = {t.task_id: t for t in tasks}
    train_ids = [i for i in train_ids if i in by_id]
    if cache is None:
        cache = build_cache([by_id[i] for i in train_ids], sim_cfg,
                            pool_size=tcfg.pool_size)
    ctx = TrainContext.build(tasks, train_ids, mcfg.raster_size)

    params = M.init_params(mcfg, tcfg.seed)
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0xBA7C]))
    scfg = SimilarityConfig(bins=mcfg.bins, window=mcfg.window)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for step in range(tcfg.total_batches):
        lr = cosine_lr(step, tcfg.total_batches, tcfg.lr)
        batch = compose_batch(cache, train_ids, tcfg.tasks_per_batch,
                              tcfg.actions_per_task, rng, mcfg.loss_mode,
                              sim_cfg, scfg, mcfg.contrast_frames)
        loss_solved, loss_aux = batch_losses(params, mcfg, batch, ctx)
        if loss_aux is not None and mcfg.aux_weight > 0:
            total = ad.add(loss_solved, ad.scale(loss_aux, mcfg.aux_weight))
        else:
            total = loss_solved
        aux_val = float(loss_aux.data) if loss_aux is not None else 0.0
        if not (np.isfinite(total.data) and np.isfinite(aux_val)):
            if out_dir is not None:
                save_checkpoint(out_dir / "ckpt_diverged.bin", params)
            raise TrainingDivergedError(
                f"non-finite loss at step {step}"
                + (f"; diagnostic checkpoint in {out_dir}" if out_dir else ""))
        opt.zero_grad()
        total.backward()
        opt.step(lr)
        rows.append({"step": step, "lr": f"{lr:.8g}",
                     "loss_solved": f"{float(loss_solved.data):.6f}",
                     "loss_aux": f"{aux_val:.6f}", "mode": mcfg.loss_mode})
        if not quiet and (step % 100 == 0 or step == tcfg.total_batches - 1):
            print(f"  step {step:5d} lr {lr:.2e} "
                  f"L {float(loss_solved.data):.4f} L_aux {aux_val:.4f}")
        if out_dir is not None and tcfg.checkpoint_every and \
                (step + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_{step + 1:06d}.bin", params)
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final.bin", params)
        write_metrics(rows, out_dir / "metrics.csv")
    return params, rows

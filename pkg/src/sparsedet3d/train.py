"""Toy training loop: full-pipeline gradient steps with decoupled-weight-decay
adaptive moments and global gradient-norm clipping.

Deterministic for a fixed seed in 64-bit mode: scenes rotate through fixed
batches, per-scene losses are averaged in index order, and the semantic
threshold follows its epoch schedule with one epoch per pass over the scenes.
"""
import math
import time
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses as L
from .config import RunConfig, dump_config
from .data import SceneRecord
from .detector import Detector
from .nn import AdamW, clip_global_grad_norm
from .proposal import tau_schedule
from .voxelize import ClassSizeTable

__all__ = ["run_toy_train", "tau_for_step"]


def tau_for_step(cfg: RunConfig, step: int, steps_per_epoch: int) -> float:
    epoch = step // max(steps_per_epoch, 1)
    return tau_schedule(epoch, cfg.dataset_preset, cfg.tau_start, cfg.tau_step,
                        cfg.tau_min, cfg.tau_epoch_period)


def lr_for_step(cfg: RunConfig, step: int, n_steps: int) -> float:
    """Step-decay schedule: 10x drops at 2/3 and 11/12 of the run (the
    80/110-of-120-epoch pattern scaled to the configured step budget)."""
    frac = step / max(n_steps, 1)
    if frac >= 11.0 / 12.0:
        return cfg.learning_rate * 0.01
    if frac >= 2.0 / 3.0:
        return cfg.learning_rate * 0.1
    return cfg.learning_rate


def run_toy_train(scenes: List[SceneRecord], cfg: RunConfig,
                  detector: Optional[Detector] = None,
                  steps: Optional[int] = None,
                  log=None):
    """Train on the given scenes; returns (detector, trace).

    trace is one LossReport per step (terms averaged over the batch, counts
    summed). Raises NonFiniteLossError naming the offending term if a loss
    diverges.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    if detector is None:
        boxes = [b for s in scenes for b in s.boxes]
        cids = [c for s in scenes for c in s.class_ids]
        detector = Detector(cfg, ClassSizeTable.from_boxes(boxes, cids, cfg.n_class))
    opt = AdamW(detector.store.params, lr=cfg.learning_rate,
                weight_decay=cfg.weight_decay)
    n_steps = cfg.steps if steps is None else steps
    batch = max(1, min(cfg.batch_size, len(scenes)))
    steps_per_epoch = math.ceil(len(scenes) / batch)
    weights = L.LossWeights(cfg.beta_sem, cfg.beta_vote, cfg.beta_cntr,
                            cfg.beta_box, cfg.beta_cls, cfg.beta_rebox)
    trace = []
    t0 = time.monotonic()
    # the workload is thousands of small GEMMs; threaded BLAS loses badly there
    with threadpool_limits(limits=1, user_api="blas"):
        _train_steps(scenes, cfg, detector, opt, n_steps, batch, steps_per_epoch,
                     weights, trace, log, t0)
    return detector, trace


def _train_steps(scenes, cfg, detector, opt, n_steps, batch, steps_per_epoch,
                 weights, trace, log, t0):
    for step in range(n_steps):
        tau = tau_for_step(cfg, step, steps_per_epoch)
        opt.lr = lr_for_step(cfg, step, n_steps)
        idx0 = (step * batch) % len(scenes)
        picks = [(idx0 + k) % len(scenes) for k in range(batch)]
        opt.zero_grad()
        batch_terms = {name: None for name in L.TERM_ORDER}
        counts: dict = {}
        for i in picks:
            s = scenes[i]
            terms, cts = detector.training_losses(s.cloud, s.boxes, s.class_ids, tau)
            for k, v in terms.items():
                batch_terms[k] = v if batch_terms[k] is None else batch_terms[k] + v
            for k, v in cts.items():
                counts[k] = counts.get(k, 0) + v
        scale = 1.0 / batch
        batch_terms = {k: v * scale for k, v in batch_terms.items() if v is not None}
        total, report = L.total_loss(batch_terms, weights)
        total.backward()
        grad_norm = clip_global_grad_norm(detector.store.params, cfg.grad_clip)
        opt.step()
        report.counts = dict(counts, grad_norm=grad_norm, tau=tau)
        trace.append(report)
        if log is not None:
            log(f"step {step:4d} tau={tau:.2f} gnorm={grad_norm:8.3f} {report.line()}"
                f" [{time.monotonic() - t0:6.1f}s]")


def checkpoint_payload(detector: Detector):
    """(tensors, config_text) pair for the checkpoint container."""
    return detector.store.named_tensors(), dump_config(detector.cfg)

"""Adam training with an epoch-level polynomial learning-rate decay."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .checkpoint import AdamState, Checkpoint, save_checkpoint
from .errors import DataMissing, EpochOutOfRange, NonFiniteLoss, ShapeMismatch, WrongSubjectCount
from .inference import network_predictor, plan_tiles, report, segment_volume
from .network import NetworkConfig, build
from .patches import (
    SamplerConfig,
    SubjectData,
    build_samples,
    make_minibatches,
    normalize_intensity,
    prefetch,
)
from .spectral import solve_spectral
from .volume_io import read_volume, remap_labels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    maxepo: int = 50
    power: float = 0.9
    stop_epoch: int = 15
    patience: int | None = None
    batch: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: float | None = None
    max_steps: int | None = None
    val_batch: int = 16

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 1 <= self.stop_epoch <= self.maxepo:
            raise ValueError("need 1 <= stop_epoch <= maxepo")


def lr_at_epoch(config: TrainConfig, epo: int) -> float:
    if not 0 <= epo <= config.maxepo:
        raise EpochOutOfRange(f"epoch {epo} outside [0, {config.maxepo}]")
    return config.lr * (1.0 - epo / config.maxepo) ** config.power


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              config: TrainConfig = TrainConfig()) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place over the keys of ``grads``."""
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise ShapeMismatch(f"gradient for {k} does not match its parameter")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    scale = 1.0
    if config.clip_norm:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > config.clip_norm:
            scale = config.clip_norm / norm
    for k, g in grads.items():
        p = params[k]
        if scale != 1.0:
            g = g * scale
        if config.weight_decay:
            g = g + config.weight_decay * p
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)
    return state


class FoldSplit(NamedTuple):
    fold: int
    train: list
    val: list
    test: list


def cv_splits(subjects, seed: int = 0, folds: int = 9) -> list:
    """Nine folds over 18 subjects: test pair i, validation pair i+1, the rest train."""
    subjects = list(subjects)
    if len(subjects) != 2 * folds:
        raise WrongSubjectCount(f"expected {2 * folds} subjects, got {len(subjects)}")
    if len(set(subjects)) != len(subjects):
        raise WrongSubjectCount("subject ids must be unique")
    order = np.random.default_rng(seed).permutation(len(subjects))
    pairs = [[subjects[order[2 * i]], subjects[order[2 * i + 1]]] for i in range(folds)]
    splits = []
    for i in range(folds):
        test, val = pairs[i], pairs[(i + 1) % folds]
        train = [s for s in subjects if s not in test and s not in val]
        splits.append(FoldSplit(i, train, list(val), list(test)))
    return splits


class EpochLog(NamedTuple):
    epoch: int
    lr: float
    loss: float
    dice: tuple
    mean_dice: float
    steps: int

    def line(self) -> str:
        vals = [str(self.epoch), f"{self.lr:.9g}", f"{self.loss:.9g}"]
        vals += [f"{d:.6f}" for d in self.dice] + [f"{self.mean_dice:.6f}"]
        return "\t".join(vals)


def validation_dice(net, params, subjects, batch: int = 16) -> tuple:
    """Per-structure Dice (background excluded) averaged over subjects, and its mean.

    Predictions outside the brain mask are set to background, as in ``segment``.
    """
    cfg = net.config
    predict = network_predictor(net, params)
    per = []
    for subj in subjects:
        plan = plan_tiles(subj.intensity.shape, cfg.output_edge, cfg.input_edge)
        pred = segment_volume(predict, subj.intensity, subj.coords, plan, batch)
        if subj.mask is not None:
            pred = np.where(subj.mask, pred, 0)
        rows = report(pred, subj.labels, range(1, cfg.classes))
        per.append([r.dice for r in rows[:-1]])
    dice = tuple(float(v) for v in np.mean(per, axis=0))
    return dice, float(np.mean(dice))


def train_step(net, params, state, batch, lr, config: TrainConfig) -> float:
    logits, cache = net.forward(batch.inputs, batch.coords, params, train=True)
    loss, lcache = T.softmax_cross_entropy(logits, batch.targets)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    grads = net.backward(T.softmax_cross_entropy_backward(lcache), cache, params)
    adam_step(params, grads, state, lr, config)
    return loss


def fit_batch(net, params, batch, steps: int, config: TrainConfig = TrainConfig(),
              lr: float | None = None) -> list:
    """Repeated Adam steps on one fixed batch; returns the loss before each step."""
    state = AdamState()
    lr = config.lr if lr is None else lr
    return [train_step(net, params, state, batch, lr, config) for _ in range(steps)]


def train(train_subjects, val_subjects, net_config: NetworkConfig, config: TrainConfig,
          sampler: SamplerConfig, out_dir=None, params=None):
    """Train on pre-loaded subjects; returns (best Checkpoint, [EpochLog, ...]).

    With ``out_dir`` set, the log is appended line by line to ``train.log``
    and the best checkpoint is written to ``best.ckpt``.
    """
    if not train_subjects:
        raise DataMissing("no training subjects")
    net, init = build(net_config, config.seed)
    params = init if params is None else params
    state = AdamState()
    samples = build_samples(train_subjects, sampler, net_config.input_edge, net_config.output_edge)
    if not samples:
        raise DataMissing("training subjects contain no labeled structures")
    log.info("training on %d patches from %d subjects", len(samples), len(train_subjects))
    logpath = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        logpath = os.path.join(out_dir, "train.log")
        open(logpath, "w").close()
    history, best, since_best, steps = [], None, 0, 0
    for epoch in range(config.stop_epoch):
        lr = lr_at_epoch(config, epoch)
        losses = []
        for batch in prefetch(make_minibatches(samples, config.batch, config.seed, epoch)):
            try:
                losses.append(train_step(net, params, state, batch, lr, config))
            except NonFiniteLoss as exc:
                exc.checkpoint = best
                raise
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        dice, mean = validation_dice(net, params, val_subjects or train_subjects, config.val_batch)
        entry = EpochLog(epoch, lr, float(np.mean(losses)), dice, mean, steps)
        history.append(entry)
        log.info("epoch %d lr %.3g loss %.4f val dice %.4f", epoch, lr, entry.loss, mean)
        if logpath:
            with open(logpath, "a") as fh:
                fh.write(entry.line() + "\n")
        if best is None or mean > best.score:
            best = Checkpoint(net_config, copy.deepcopy(params), copy.deepcopy(state),
                              epoch, config.seed, mean)
            since_best = 0
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), best)
        else:
            since_best += 1
        if config.patience is not None and since_best >= config.patience:
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return best, history


def load_subject(data_dir, subject: str, remap=None, downsample: int = 1) -> SubjectData:
    """Read ``<data_dir>/<subject>/{image,labels,mask}.nii`` (mask optional)."""
    base = os.path.join(str(data_dir), subject)

    def find(stem, required=True):
        for ext in (".nii", ".rv3"):
            p = os.path.join(base, stem + ext)
            if os.path.exists(p):
                return p
        if required:
            raise DataMissing(f"missing {stem} volume for subject {subject} in {base}")
        return None

    _, image = read_volume(find("image"))
    _, labels = read_volume(find("labels"))
    mask_path = find("mask", required=False)
    mask = read_volume(mask_path)[1] > 0 if mask_path else image > 0
    if remap is not None:
        labels = remap_labels(labels, remap)
    coords = solve_spectral(mask, downsample=downsample).volumes()
    return SubjectData(subject, normalize_intensity(image), labels.astype(np.uint8), coords, mask)

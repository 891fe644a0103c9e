"""Hybrid prediction loss and the training loop.

Normal activities supply a self-supervised next-activity (or cloze)
signal with their one-hot targets; abnormal activities get an inverted
soft label (zero mass on the observed code, uniform elsewhere) and a
negative-feedback weight r, so their observed codes are actively
suppressed. The total objective adds the graph regularization loss.

The optimizer is AdamW with decoupled weight decay; early stopping
monitors validation AUC and the best-validation state is returned.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .evaluation import DegenerateLabels, roc_and_auc
from .ingest import make_ph_instances, make_rt_subsequences
from .pool import VectorPool
from .scorer import ActivityModel, prepare_batch

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class Divergence(RuntimeError):
    """Training hit a non-finite loss; the last finite state is kept."""


def soft_labels(one_hot, q):
    """Soft label rows: unchanged where q=0; where q=1, zero mass on the
    observed code and 1/(M-1) on every other code."""
    M = one_hot.shape[-1]
    qf = q.to(one_hot.dtype).unsqueeze(-1)
    return one_hot * (1.0 - qf) + qf * (1.0 - one_hot) / (M - 1)


def sample_weights(q, r):
    """Per-sample weights 1 + (r-1) q: 1 for normal, r for abnormal."""
    if not torch.is_floating_point(q):
        q = q.to(torch.get_default_dtype())
    return 1.0 + (float(r) - 1.0) * q


def hybrid_loss(pred, soft, weights, normalizer="count"):
    """Weighted soft cross-entropy.

    -(1/B) sum_i w_i sum_j Y'_ij log(max(Yhat_ij, 1e-12)) with
    ``normalizer="count"`` (B = batch size). The trainer uses
    ``normalizer="weight_sum"`` (divide by sum of weights instead),
    which makes weighted and replicated training produce identical
    full-batch gradients; the two coincide whenever all weights are 1.
    """
    logp = torch.log(pred.clamp_min(LOG_CLAMP))
    per_sample = -(soft * logp).sum(dim=-1)
    weights = weights.to(per_sample.dtype)
    total = (weights * per_sample).sum()
    if normalizer == "count":
        return total / per_sample.shape[0]
    if normalizer == "weight_sum":
        return total / weights.sum()
    raise ValueError(f"unknown normalizer {normalizer!r}")


def total_loss(hybrid, reg):
    """Overall objective: hybrid prediction loss plus (batch-averaged)
    graph regularization."""
    return hybrid + reg


def replicate_abnormal(instances, r):
    """Each abnormal instance appears r times (weights are then all 1);
    full-batch gradients match the weighted formulation."""
    r = int(r)
    if r < 1:
        raise ValueError("replication factor must be a positive integer")
    out = []
    for inst in instances:
        out.append(inst)
        if inst.label:
            out.extend(inst for _ in range(r - 1))
    return out


def build_instances(sessions, mode, mask_code=None, max_len=256):
    out = []
    for session in sessions:
        if mode == "rt":
            out.extend(make_rt_subsequences(session, max_len=max_len))
        else:
            out.extend(make_ph_instances(session, mask_code))
    return out


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auc: float
    wall_time: float


@dataclass
class TrainResult:
    model: ActivityModel
    pool: VectorPool
    history: list
    best_epoch: int
    best_val_auc: float
    r_value: float
    lr_value: float
    diverged: bool = False


def resolve_r(config, split_ir):
    """Negative-feedback weight: the config value, or the training-split
    imbalance ratio for "auto" (1 when the split has no minority)."""
    if not config.use_weighting:
        return 1.0
    if config.r == "auto":
        return 1.0 if math.isinf(split_ir) else float(split_ir)
    return float(config.r)


def _val_probs(model, instances, batch_size):
    model.eval()
    probs = []
    with torch.no_grad():
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo:lo + batch_size]
            codes, lengths, qpos, targets, _ = prepare_batch(chunk)
            p, _, _, _ = model.forward_batch(codes, lengths, qpos)
            probs.append(p[torch.arange(len(chunk)), targets])
    return torch.cat(probs) if probs else torch.empty(0)


def _validation_metric(model, instances, batch_size):
    """(metric, val_auc): AUC when both classes are present, otherwise
    the negated mean cross-entropy (and val_auc = nan)."""
    probs = _val_probs(model, instances, batch_size)
    labels = np.array([inst.label for inst in instances])
    p = probs.cpu().numpy()
    try:
        _, auc = roc_and_auc(p, labels)
        return auc, auc
    except DegenerateLabels:
        ce = -np.log(np.clip(p, LOG_CLAMP, None)).mean() if len(p) else math.inf
        return -ce, float("nan")


def train(split, table, config, mode="rt"):
    """Train on a DatasetSplit; returns the best-validation model.

    With ``lr="auto"`` each grid learning rate is trained fully and the
    best validation metric wins, per-run seeding identical.
    """
    config.validate()
    if config.lr == "auto":
        best = None
        for lr in config.lr_grid:
            result = _train_once(split, table, config, mode, float(lr))
            log.info("lr %g -> best val %s", lr, result.best_val_auc)
            if best is None or _metric_of(result) > _metric_of(best):
                best = result
        return best
    return _train_once(split, table, config, mode, float(config.lr))


def _metric_of(result):
    v = result.best_val_auc
    return -math.inf if (v is None or math.isnan(v)) else v


def _train_once(split, table, config, mode, lr):
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    vocab = table.vocab_size(posthoc=(mode == "ph"))
    mask_code = table.mask_code if mode == "ph" else None

    train_instances = build_instances(split.train, mode, mask_code,
                                      config.max_len)
    val_instances = build_instances(split.validation, mode, mask_code,
                                    config.max_len)
    if not train_instances:
        raise ValueError("no training instances (all sessions too short?)")

    r = resolve_r(config, split.imbalance_ratio)
    replicated = config.imbalance_mode == "replicate"
    if replicated:
        train_instances = replicate_abnormal(train_instances,
                                             max(1, int(round(r))))

    model = ActivityModel(vocab, config, mode=mode)
    pool = None
    if config.use_graph and config.k >= 1:
        pool = VectorPool.build(train_instances, config.hidden_size,
                                mode=config.pool_mode, seed=config.seed)
        model.attach_pool(pool)
    opt = torch.optim.AdamW(model.parameters(), lr=lr,
                            weight_decay=config.weight_decay)

    def refresh_pool():
        encode_fn = model.encode_sequences if pool.mode == "encoder_cache" else None
        if pool.index is None:
            if pool.mode == "encoder_cache":
                pool._index_params = dict(
                    metric=config.ann_metric, m=config.ann_m,
                    ef_construction=config.ann_ef_construction,
                    ef_search=config.ann_ef_search, seed=config.seed)
                pool.refresh(encode_fn)
            else:
                pool.build_index(metric=config.ann_metric, m=config.ann_m,
                                 ef_construction=config.ann_ef_construction,
                                 ef_search=config.ann_ef_search,
                                 seed=config.seed)
        else:
            pool.refresh(encode_fn)

    history = []
    best_state = None
    best_metric = -math.inf
    best_auc = float("nan")
    best_epoch = -1
    last_finite_state = copy.deepcopy(model.state_dict())
    bad_epochs = 0
    diverged = False
    order = np.arange(len(train_instances))

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        if pool is not None:
            if epoch % config.refresh_cadence == 0:
                refresh_pool()
            else:
                pool.staleness_counter += 1
        model.train()
        rng.shuffle(order)
        losses = []
        finite = True
        for lo in range(0, len(order), config.batch_size):
            batch = [train_instances[i] for i in order[lo:lo + config.batch_size]]
            codes, lengths, qpos, targets, labels = prepare_batch(batch)
            probs, reg, _, _ = model.forward_batch(codes, lengths, qpos)
            one_hot = torch.zeros_like(probs)
            one_hot[torch.arange(len(batch)), targets] = 1.0
            q = labels.to(probs.dtype)
            y_soft = soft_labels(one_hot, q) if config.use_hybrid else one_hot
            if config.use_weighting and not replicated:
                w = sample_weights(q, r)
            else:
                w = torch.ones_like(q)
            # weight-sum normalization (for both terms) makes weighted and
            # replicated training produce identical full-batch gradients
            loss = total_loss(
                hybrid_loss(probs, y_soft, w, normalizer="weight_sum"),
                (w * reg).sum() / w.sum(),
            )
            if not torch.isfinite(loss):
                finite = False
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if not finite:
            log.warning("non-finite loss at epoch %d; stopping", epoch)
            model.load_state_dict(last_finite_state)
            diverged = True
            break
        last_finite_state = copy.deepcopy(model.state_dict())
        metric, val_auc = (_validation_metric(model, val_instances,
                                              config.batch_size)
                           if val_instances else (-np.mean(losses), float("nan")))
        wall = time.perf_counter() - t0
        history.append(EpochLog(epoch=epoch,
                                train_loss=float(np.mean(losses)),
                                val_auc=float(val_auc), wall_time=wall))
        log.info("epoch %d loss %.4f val_auc %s (%.1fs)",
                 epoch, history[-1].train_loss, val_auc, wall)
        if metric > best_metric + 1e-12:
            best_metric = metric
            best_auc = val_auc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
        if pool is not None:
            # the restored pool vectors differ from the last index build
            refresh_pool()
    if diverged and best_state is None:
        raise Divergence("training diverged before completing an epoch")
    return TrainResult(model=model, pool=pool, history=history,
                       best_epoch=best_epoch, best_val_auc=best_auc,
                       r_value=r, lr_value=lr, diverged=diverged)

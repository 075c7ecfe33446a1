"""Seeded training loop, Adam, and the per-seed random-search sweep."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from .errors import DivergenceError, GradMaskError, ValidationError
from .loss import PenaltyConfig, batch_gradients
from .metrics import RunResult, roc_auc
from .model import init_model, predict_scores, save_checkpoint
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs_max < 1 or self.batch_size < 1:
            raise ValidationError("epochs_max and batch_size must be positive")
        if self.patience < 1:
            raise ValidationError("patience must be at least 1")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")


@dataclass(frozen=True)
class SweepConfig:
    n_trials: int = 20
    lam_range: tuple = (1e-3, 1e1)
    lr_range: tuple = (1e-4, 1e-2)
    base_seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValidationError("n_trials must be at least 1")


class Adam:
    """Adam with bias correction; moments kept in float64."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = Tensor._wrap((p.value.data - update).astype(p.dtype))


def _as_dtype(samples, dtype):
    out = []
    for s in samples:
        if s.x.dtype != dtype:
            s = D.Sample(s.x.astype(dtype), s.y, s.seg.astype(dtype), s.confounded)
        out.append(s)
    return out


def evaluate_auc(model, samples):
    scores = predict_scores(model, [s.x for s in samples])
    return roc_auc(scores, [s.y for s in samples])


def accuracy(model, samples):
    scores = predict_scores(model, [s.x for s in samples])
    return float(np.mean((scores > 0.5) == np.array([s.y for s in samples], dtype=bool)))


def train(model_cfg, data, cfg):
    """Train one model; returns ``(RunResult, model)`` with the best-validation parameters loaded.

    ``data`` is a :class:`gradmask.data.Dataset`.
    """
    if not data.train or not data.valid or not data.test:
        raise ValidationError("train, valid and test splits must all be nonempty")
    model = init_model(model_cfg)
    dtype = model.params[0].dtype
    train_set = _as_dtype(data.train, dtype)
    valid_set = _as_dtype(data.valid, dtype)
    test_set = _as_dtype(data.test, dtype)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle = Rng(cfg.seed).substream("shuffle")

    best_auc, best_epoch, best_state = -1.0, 0, model.state()
    history = []
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.epochs_max + 1):
        order = shuffle.shuffle(range(len(train_set)))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            grads, total, lc, pen = batch_gradients(model, batch, cfg.penalty)
            if not all(math.isfinite(v) for v in (total, lc, pen)) or not all(np.isfinite(g).all() for g in grads):
                raise DivergenceError(epoch, {"total": total, "classification": lc, "penalty": pen})
            opt.step(grads)
            sums += np.array([total, lc, pen]) * len(batch)
        valid_auc = evaluate_auc(model, valid_set)
        mean_terms = sums / len(train_set)
        history.append({
            "epoch": epoch,
            "loss": float(mean_terms[0]),
            "classification": float(mean_terms[1]),
            "penalty": float(mean_terms[2]),
            "valid_auc": valid_auc,
        })
        log.debug("seed %d epoch %d loss %.4f valid_auc %.4f", cfg.seed, epoch, mean_terms[0], valid_auc)
        if valid_auc > best_auc:
            best_auc, best_epoch, best_state = valid_auc, epoch, model.state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.load_state(best_state)
    result = RunResult(
        seed=cfg.seed,
        variant=cfg.penalty.variant,
        hyperparams={"lambda": cfg.penalty.lam if cfg.penalty.variant != "none" else 0.0, "lr": cfg.lr},
        best_valid_auc=best_auc,
        test_auc=evaluate_auc(model, test_set),
        train_auc=evaluate_auc(model, train_set),
        epochs_trained=epoch,
        best_epoch=best_epoch,
        n_train=len(train_set),
        history=history,
    )
    return result, model


def sample_hyperparams(seed, sweep_cfg):
    """(lambda, lr) drawn log-uniformly from the trial's ``sweep`` substream."""
    r = Rng(seed).substream("sweep")
    lam = r.log_uniform(*sweep_cfg.lam_range)
    lr = r.log_uniform(*sweep_cfg.lr_range)
    return lam, lr


def run_trial(model_cfg, data_cfg, sweep_cfg, train_cfg, variant, trial, dataset=None):
    """One sweep trial; failures are captured in the returned record.

    Without ``dataset`` a fresh dataset is generated from ``data_cfg`` with
    the trial seed.
    """
    seed = sweep_cfg.base_seed + trial
    lam, lr = sample_hyperparams(seed, sweep_cfg)
    penalty = replace(train_cfg.penalty, variant=variant, lam=lam if variant != "none" else 0.0)
    cfg = replace(train_cfg, lr=lr, seed=seed, penalty=penalty)
    try:
        data = dataset if dataset is not None else D.generate(replace(data_cfg, seed=seed))
        result, model = train(replace(model_cfg, seed=seed), data, cfg)
        return result, model.state()
    except GradMaskError as exc:
        log.warning("trial %d (seed %d, %s) failed: %s", trial, seed, variant, exc)
        failed = RunResult(
            seed=seed, variant=variant, hyperparams={"lambda": penalty.lam, "lr": lr},
            best_valid_auc=float("nan"), test_auc=float("nan"), train_auc=float("nan"),
            epochs_trained=getattr(exc, "epoch", 0), best_epoch=0,
            n_train=len(dataset.train) if dataset is not None else data_cfg.n_train,
            status="failed", error=str(exc),
        )
        return failed, None


def _trial_job(args):
    return run_trial(*args)


def _single_thread_blas():
    os.environ["OMP_NUM_THREADS"] = "1"
    os.environ["OPENBLAS_NUM_THREADS"] = "1"
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


def sweep(model_cfg, data_cfg, sweep_cfg, variant, train_cfg=None, threads=1, out_dir=None, dataset=None):
    """Run ``n_trials`` independent seeded trials of one variant.

    Trial ``i`` uses seed ``base_seed + i`` for data, initialisation,
    shuffling and its hyperparameter draw, so results do not depend on
    execution order.  With ``out_dir`` each trial's record is appended to
    ``runs.jsonl`` and its parameters saved as a checkpoint, in trial order.
    A fixed ``dataset`` replaces per-trial generation.
    """
    train_cfg = train_cfg or TrainConfig()
    jobs = [(model_cfg, data_cfg, sweep_cfg, train_cfg, variant, i, dataset) for i in range(sweep_cfg.n_trials)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_single_thread_blas) as pool:
            outcomes = list(pool.map(_trial_job, jobs))
    else:
        outcomes = [_trial_job(j) for j in jobs]
    if out_dir is not None:
        for result, state in outcomes:
            record_trial(out_dir, result, state, model_cfg)
    results = [r for r, _ in outcomes]
    if all(r.status != "ok" for r in results):
        raise DivergenceError(results[0].epochs_trained, {"failed_trials": len(results)})
    return results


def checkpoint_name(result):
    return f"ckpt_{result.variant}_seed{result.seed}.gmc"


def record_trial(out_dir, result, state, model_cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    line = json.dumps(result.to_json(), sort_keys=True) + "\n"
    with open(out / "runs.jsonl", "a") as fh:
        fh.write(line)
    if state is not None:
        model = init_model(replace(model_cfg, seed=result.seed), zero=True)
        model.load_state(state)
        save_checkpoint(out / checkpoint_name(result), model, extra={"run": {
            "seed": result.seed, "variant": result.variant, "best_valid_auc": result.best_valid_auc}})


def read_runs(path):
    with open(path) as fh:
        return [RunResult.from_json(json.loads(line)) for line in fh if line.strip()]


def train_config_json(cfg):
    return asdict(cfg)

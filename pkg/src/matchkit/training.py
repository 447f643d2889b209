"""Supervision targets, NLL loss, Adam with the hinge-then-decay schedule,
and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .features import PairRecord, RelativePose, load_pair
from .geomeval import EvalConfig, apply_affine, apply_homography, correspondence_pr
from .matching import AssignmentMatrix, extract_matches
from .model import (MatcherConfig, MatcherModel, OptimizerState, forward_pair,
                    save_checkpoint)

log = logging.getLogger("matchkit.training")


class TrainingAbortedError(RuntimeError):
    pass


class UnsupervisablePairError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss targets


@dataclass
class LossTarget:
    positive_pairs: list[tuple[int, int]]
    dustbin_a: list[int]
    dustbin_b: list[int]
    ignored: list[tuple[int, int]]  # pairs inside the [correct, incorrect] band


def build_target(pair: PairRecord, correct_px: float = 3.0,
                 incorrect_px: float = 5.0) -> LossTarget:
    """Positives are mutually-nearest reprojection pairs below correct_px in
    both directions; keypoints with nothing within incorrect_px in either
    frame go to the dustbin; the band in between supervises nothing."""
    gt = pair.gt_transform
    if isinstance(gt, RelativePose):
        if pair.gt_matches is None:
            raise ValueError("pose ground truth without gt_matches: no reprojection available")
        positives = [(int(i), int(j)) for i, j in pair.gt_matches]
        pos_a = {i for i, _ in positives}
        pos_b = {j for _, j in positives}
        dustbin_a = [i for i in range(pair.set_a.num_keypoints) if i not in pos_a]
        dustbin_b = [j for j in range(pair.set_b.num_keypoints) if j not in pos_b]
        return LossTarget(positives, dustbin_a, dustbin_b, ignored=[])

    loc_a = np.asarray(pair.set_a.locations, dtype=np.float64)
    loc_b = np.asarray(pair.set_b.locations, dtype=np.float64)
    if gt.shape == (3, 3):
        proj_a = apply_homography(gt, loc_a)
        proj_b = apply_homography(np.linalg.inv(gt), loc_b)
    else:
        proj_a = apply_affine(gt, loc_a)
        full = np.vstack([gt, [0.0, 0.0, 1.0]])
        inv = np.linalg.inv(full)[:2]
        proj_b = apply_affine(inv, loc_b)
    d_fwd = np.linalg.norm(proj_a[:, None, :] - loc_b[None, :, :], axis=2)
    d_bwd = np.linalg.norm(loc_a[:, None, :] - proj_b[None, :, :], axis=2)
    d_max = np.maximum(d_fwd, d_bwd)
    d_min = np.minimum(d_fwd, d_bwd)

    positives: list[tuple[int, int]] = []
    best_j = d_max.argmin(axis=1)
    best_i = d_max.argmin(axis=0)
    for i, j in enumerate(best_j):
        if best_i[j] == i and d_max[i, j] < correct_px:
            positives.append((i, int(j)))
    pos_a = {i for i, _ in positives}
    pos_b = {j for _, j in positives}
    dustbin_a = [i for i in range(loc_a.shape[0])
                 if i not in pos_a and d_min[i].min() > incorrect_px]
    dustbin_b = [j for j in range(loc_b.shape[0])
                 if j not in pos_b and d_min[:, j].min() > incorrect_px]
    ignored = [(i, int(j)) for i, j in enumerate(best_j)
               if i not in pos_a and i not in set(dustbin_a)]
    return LossTarget(positives, dustbin_a, dustbin_b, ignored)


def nll_loss(assign: AssignmentMatrix, target: LossTarget) -> nc.Tensor:
    """Mean negative log-likelihood over positives, A-dustbins and
    B-dustbins, each term averaged separately and summed."""
    if not (target.positive_pairs or target.dustbin_a or target.dustbin_b):
        raise UnsupervisablePairError("unsupervisable pair: no positives and no dustbins")
    log_probs = assign.log_probs
    if log_probs is None:
        log_probs = nc.log(nc.Tensor(np.maximum(assign.probs, 1e-300)))
    n, m = assign.shape
    terms = []
    if target.positive_pairs:
        rows = np.asarray([i for i, _ in target.positive_pairs], dtype=np.intp)
        cols = np.asarray([j for _, j in target.positive_pairs], dtype=np.intp)
        terms.append(nc.mean_all(nc.take(log_probs, rows, cols)))
    if target.dustbin_a:
        rows = np.asarray(target.dustbin_a, dtype=np.intp)
        cols = np.full(len(target.dustbin_a), m, dtype=np.intp)
        terms.append(nc.mean_all(nc.take(log_probs, rows, cols)))
    if target.dustbin_b:
        rows = np.full(len(target.dustbin_b), n, dtype=np.intp)
        cols = np.asarray(target.dustbin_b, dtype=np.intp)
        terms.append(nc.mean_all(nc.take(log_probs, rows, cols)))
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    return nc.scale(total, -1.0)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 1.0   # per-step multiplier applied after hinge_step
    hinge_step: int = 0


class Adam:
    """Adam with a constant-then-exponential-decay learning rate."""

    def __init__(self, params: Sequence[nc.Tensor], config: OptimizerConfig,
                 state: Optional[OptimizerState] = None):
        self.params = list(params)
        self.config = config
        if state is not None:
            if len(state.first_moments) != len(self.params):
                raise ValueError("optimizer state does not match parameter count")
            self.m = [a.copy() for a in state.first_moments]
            self.v = [a.copy() for a in state.second_moments]
            self.t = state.step
        else:
            self.m = [np.zeros(p.shape) for p in self.params]
            self.v = [np.zeros(p.shape) for p in self.params]
            self.t = 0

    def learning_rate(self) -> float:
        cfg = self.config
        exponent = max(0, self.t - cfg.hinge_step)
        return cfg.lr * cfg.decay_rate ** exponent

    def step(self, grads: Sequence[np.ndarray]) -> None:
        cfg = self.config
        self.t += 1
        lr = self.learning_rate()
        correction1 = 1.0 - cfg.beta1 ** self.t
        correction2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p._assign(p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps))

    def state(self) -> OptimizerState:
        return OptimizerState(step=self.t,
                              first_moments=[a.copy() for a in self.m],
                              second_moments=[a.copy() for a in self.v])


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainConfig:
    model: MatcherConfig = field(default_factory=MatcherConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8
    steps: int = 500
    eval_interval: int = 100
    checkpoint_interval: int = 0  # 0: final checkpoint only
    seed: int = 0
    train_data: Optional[str] = None
    eval_data: Optional[str] = None

    def validate(self) -> None:
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"model.{exc}") from exc
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps: must be >= 0")
        if self.optimizer.lr < 0:
            raise ConfigError("optimizer.lr: must be >= 0")


def _from_dict(cls, doc: dict, prefix: str):
    known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(prefix + k for k in unknown))}")
    return doc


def train_config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    model_doc = doc.pop("model", {})
    opt_doc = doc.pop("optimizer", {})
    _from_dict(MatcherConfig, model_doc, "model.")
    _from_dict(OptimizerConfig, opt_doc, "optimizer.")
    _from_dict(TrainConfig, doc, "")
    config = TrainConfig(model=MatcherConfig(**model_doc),
                         optimizer=OptimizerConfig(**opt_doc), **doc)
    config.validate()
    return config


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return train_config_from_dict(doc)


def train_config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    steps_run: int
    final_loss: Optional[float]


def evaluate_pairs(model: MatcherModel, pairs: Sequence[PairRecord],
                   eval_cfg: Optional[EvalConfig] = None) -> dict:
    """Micro-averaged correspondence precision/recall over a pair list."""
    eval_cfg = eval_cfg or EvalConfig()
    correct = incorrect = matchable = 0
    for pair in pairs:
        matches, _ = _match_for_eval(model, pair)
        res = correspondence_pr(matches, pair, eval_cfg)
        correct += res.n_correct
        incorrect += res.n_incorrect
        matchable += res.n_matchable
    precision = correct / (correct + incorrect) if (correct + incorrect) else 0.0
    recall = correct / matchable if matchable else 0.0
    return {"precision": precision, "recall": recall,
            "correct": correct, "incorrect": incorrect, "matchable": matchable}


def _match_for_eval(model: MatcherModel, pair: PairRecord):
    assign = forward_pair(model, pair.set_a, pair.set_b)
    return extract_matches(assign, model.config.min_confidence), assign


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def pair_loss(model: MatcherModel, pair: PairRecord) -> tuple[nc.Tensor, AssignmentMatrix]:
    target = build_target(pair)
    assign = forward_pair(model, pair.set_a, pair.set_b)
    return nll_loss(assign, target), assign


def train(model: MatcherModel, train_pairs: Sequence[Path | PairRecord],
          config: TrainConfig, out_dir, eval_pairs: Sequence[Path | PairRecord] = (),
          optimizer_state: Optional[OptimizerState] = None,
          progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run config.steps optimizer updates (each over batch_size pairs,
    gradients summed) and write checkpoints plus a JSON-lines metric log.

    Data order, and therefore the whole run, is a pure function of
    (seed, pair list, config); resuming from a checkpointed optimizer state
    continues the exact uninterrupted sequence.
    """
    if not train_pairs:
        raise ValueError("empty training dataset")
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.ogck"

    def load(entry) -> PairRecord:
        return entry if isinstance(entry, PairRecord) else load_pair(entry)

    opt = Adam(model.parameters(), config.optimizer, state=optimizer_state)
    params = opt.params
    n_pairs = len(train_pairs)
    final_loss: Optional[float] = None
    mode = "a" if optimizer_state is not None and metrics_path.exists() else "w"
    with open(metrics_path, mode) as metrics:
        start = opt.t
        for step in range(start, config.steps):
            grads = [np.zeros(p.shape) for p in params]
            batch_loss = 0.0
            used = 0
            for b in range(config.batch_size):
                k = step * config.batch_size + b
                order = _epoch_order(config.seed, k // n_pairs, n_pairs)
                pair = load(train_pairs[order[k % n_pairs]])
                try:
                    with nc.Tape() as tape:
                        loss, _ = pair_loss(model, pair)
                    value = loss.item()
                except UnsupervisablePairError:
                    log.warning("skipping unsupervisable pair at step %d", step)
                    continue
                except FloatingPointError as exc:
                    raise TrainingAbortedError(
                        f"non-finite forward value at step {step}: {exc}") from exc
                if not np.isfinite(value):
                    raise TrainingAbortedError(f"non-finite loss at step {step}")
                batch_loss += value
                used += 1
                for g, extra in zip(grads, tape.gradients(loss, params)):
                    g += extra
            if used == 0:
                raise TrainingAbortedError(f"no supervisable pair in batch at step {step}")
            if any(not np.all(np.isfinite(g)) for g in grads):
                raise TrainingAbortedError(f"non-finite gradient at step {step}")
            opt.step(grads)
            final_loss = batch_loss / used
            metrics.write(json.dumps({"step": opt.t, "loss": final_loss}) + "\n")
            if progress is not None:
                progress(opt.t, final_loss)
            if eval_pairs and config.eval_interval and opt.t % config.eval_interval == 0:
                stats = evaluate_pairs(model, [load(e) for e in eval_pairs])
                metrics.write(json.dumps({"step": opt.t, **stats}) + "\n")
                log.info("step %d: precision %.3f recall %.3f", opt.t,
                         stats["precision"], stats["recall"])
            if (config.checkpoint_interval and opt.t % config.checkpoint_interval == 0
                    and opt.t < config.steps):
                save_checkpoint(model, out_dir / f"checkpoint_{opt.t:06d}.ogck", opt.state())
    save_checkpoint(model, ckpt_path, opt.state())
    return TrainResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                       steps_run=opt.t, final_loss=final_loss)

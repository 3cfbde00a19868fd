"""Principled training loop, learning-rate grid search and gradient verification."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .core import ConfigError, ContractError, Dataset, ListSample, NumericalError, length_groups
from .losses import TERMS, frozen_objective, principled_loss, principled_terms
from .metrics import MetricsReport, evaluate
from .model import Reranker, RerankerConfig, get_flat_params, init_params, loss_and_gradients, make_batch, set_flat_params
from .obedience import obedience_report

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1e-4, 5e-5, 1e-5)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LR_GRID))
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    principle_weights: tuple[float, float] = (1.0, 1.0)
    eval_every: int = 0
    keep_best: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        w1, w2 = self.principle_weights
        if w1 < 0 or w2 < 0:
            raise ConfigError("principle weights must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["principle_weights"] = list(self.principle_weights)
        d["lr_grid"] = list(self.lr_grid)
        return d


@dataclass
class EpochRecord:
    epoch: int
    total: float
    terms: dict[str, float]
    valid: MetricsReport | None = None
    p1_rate: float | None = None
    p2_rate: float | None = None
    wall_clock: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    principle_weights: tuple[float, float] = (1.0, 1.0)
    checkpoint: str | None = None

    def losses(self) -> list[float]:
        return [r.total for r in self.records]

    def to_csv(self, timing: bool = False) -> str:
        """One row per epoch.  Wall-clock is left out unless asked for, so reruns are byte-identical."""
        header = ["epoch", "total", *TERMS, "w_p1", "w_p2",
                  "valid_auc", "valid_ndcg", "valid_p1_obedience", "valid_p2_obedience"]
        if timing:
            header.append("wall_clock_s")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w1, w2 = self.principle_weights
        for r in self.records:
            row = [r.epoch, repr(r.total), *(repr(r.terms[t]) for t in TERMS), repr(float(w1)), repr(float(w2))]
            row += [_fmt(r.valid.auc if r.valid else None), _fmt(r.valid.ndcg if r.valid else None),
                    _fmt(r.p1_rate), _fmt(r.p2_rate)]
            if timing:
                row.append(f"{r.wall_clock:.3f}")
            w.writerow(row)
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for batch shuffling and swap sampling."""
    shuffle_seq, swap_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(swap_seq)


def draw_swap_indices(data: Dataset, rng: np.random.Generator) -> np.ndarray:
    """One uniform adjacent-swap index per list (0 for lists too short to swap)."""
    ks = np.zeros(len(data), dtype=np.int64)
    for i, s in enumerate(data):
        if s.n >= 2:
            ks[i] = rng.integers(0, s.n - 1)
    return ks


def make_optimizer(model: Reranker, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        foreach=False,
    )


def train(
    cfg: TrainConfig,
    model_cfg: RerankerConfig,
    data: Dataset,
    valid: Dataset | None = None,
) -> tuple[Reranker, TrainLog]:
    """Fit a re-ranker with the principled objective.

    ``cfg.seed`` seeds initialization, batch shuffling and the per-list swap
    draws, so identical arguments give an identical parameter trajectory.
    """
    cfg.validate()
    if len(data) == 0:
        raise ContractError("training data is empty")
    if (data.d_item, data.d_user) != (model_cfg.d_item, model_cfg.d_user):
        raise ContractError(
            f"data has d_item={data.d_item}, d_user={data.d_user}; "
            f"model expects {model_cfg.d_item}, {model_cfg.d_user}"
        )
    model = init_params(replace(model_cfg, seed=cfg.seed))
    opt = make_optimizer(model, cfg)
    shuffle_rng, swap_rng = rng_streams(cfg.seed)
    w1, w2 = cfg.principle_weights
    trainlog = TrainLog(principle_weights=(w1, w2))
    best = (-math.inf, None)
    start = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        ks_all = draw_swap_indices(data, swap_rng)
        sums = {t: 0.0 for t in TERMS}
        total_sum = 0.0
        for idx in length_groups(data, cfg.batch_size, shuffle_rng):
            batch = make_batch([data[i] for i in idx])
            terms = principled_terms(model, batch, torch.as_tensor(ks_all[idx]))
            per_list = terms.total(w1, w2)
            loss = per_list.mean()
            if not torch.isfinite(loss):
                ids = [data[i].list_id for i in idx]
                raise NumericalError(f"non-finite loss at epoch {epoch}, lists {ids}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for t in TERMS:
                sums[t] += float(getattr(terms, t).detach().sum())
            total_sum += float(per_list.detach().sum())

        rec = EpochRecord(epoch, total_sum / len(data), {t: v / len(data) for t, v in sums.items()})
        if valid is not None and len(valid) and cfg.eval_every and epoch % cfg.eval_every == 0:
            rec.valid = evaluate(model, valid)
            ob = obedience_report(model, valid, eval_seed=cfg.seed)
            rec.p1_rate, rec.p2_rate = ob.p1_rate, ob.p2_rate
            score = rec.valid.ndcg if rec.valid.ndcg is not None else -math.inf
            if cfg.keep_best and score > best[0]:
                best = (score, get_flat_params(model))
        rec.wall_clock = time.perf_counter() - start
        trainlog.records.append(rec)
        log.info("epoch %d loss %.6f", epoch, rec.total)

    if cfg.keep_best and best[1] is not None:
        set_flat_params(model, best[1])
    return model, trainlog


# -- learning-rate grid -------------------------------------------------------------


@dataclass
class GridRun:
    learning_rate: float
    metrics: MetricsReport
    selected: bool = False


def _key(v) -> float:
    return -math.inf if v is None else v


def grid_search(
    cfg: TrainConfig, model_cfg: RerankerConfig, train_data: Dataset, valid: Dataset
) -> tuple[TrainConfig, list[GridRun], Reranker, TrainLog]:
    """Train once per grid rate; pick the best validation NDCG, then AUC, then the lower rate."""
    if not cfg.lr_grid:
        raise ConfigError("learning-rate grid is empty")
    if len(valid) == 0:
        raise ContractError("grid search needs a nonempty validation split")
    runs, fitted = [], []
    for lr in cfg.lr_grid:
        run_cfg = replace(cfg, learning_rate=float(lr))
        model, trainlog = train(run_cfg, model_cfg, train_data, valid)
        runs.append(GridRun(float(lr), evaluate(model, valid)))
        fitted.append((run_cfg, model, trainlog))
    best = max(
        range(len(runs)),
        key=lambda i: (_key(runs[i].metrics.ndcg), _key(runs[i].metrics.auc), -runs[i].learning_rate),
    )
    runs[best].selected = True
    best_cfg, model, trainlog = fitted[best]
    return best_cfg, runs, model, trainlog


def grid_csv(runs: list[GridRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [c for c, _ in runs[0].metrics.columns()] if runs else []
    w.writerow(["learning_rate", *cols, "selected"])
    for r in runs:
        w.writerow([repr(r.learning_rate), *(_fmt(v) for _, v in r.metrics.columns()), int(r.selected)])
    return buf.getvalue()


# -- gradient verification ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    n_coords: int
    threshold: float
    h: float
    passed: bool

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max relative error {self.max_rel_error:.3e} "
                f"at {self.worst_param}[{self.worst_index}] over {self.n_coords} coordinates "
                f"(h={self.h:g}, threshold={self.threshold:g})")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - f| / max(|a|, |f|, floor)``; the floor keeps near-zero gradients from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(
    model_cfg: RerankerConfig,
    sample: ListSample,
    swap_k: int,
    h: float = 1e-5,
    threshold: float = 1e-4,
    weights: tuple[float, float] = (1.0, 1.0),
    position_scale: float = 0.5,
    corrupt: bool = False,
    model: Reranker | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of the principled objective with central differences.

    The four orders are derived once and then frozen, so every probe evaluates
    the same smooth function.  Unless a model is given, one is built from
    ``model_cfg`` and its position table filled with seeded noise of scale
    ``position_scale`` so that the consistency terms are active.
    """
    if model is None:
        model = init_params(model_cfg)
        gen = torch.Generator().manual_seed(int(model_cfg.seed) + 1)
        with torch.no_grad():
            model.pos_table.copy_(position_scale * torch.randn(model.pos_table.shape, generator=gen,
                                                                dtype=model.pos_table.dtype))
    frozen = principled_loss(model, sample, swap_k, weights).frozen()
    objective = frozen_objective(sample, frozen, weights)
    _, grads = loss_and_gradients(model, objective)
    if corrupt:
        first = next(iter(grads))
        grads[first].reshape(-1)[0] += 1.0

    worst = (-1.0, "", -1)
    n_coords = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            analytic = grads[name].reshape(-1)
            numeric = np.empty_like(analytic)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(objective(model))
                flat[i] = orig - h
                down = float(objective(model))
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            err = relative_error(analytic, numeric)
            n_coords += err.size
            j = int(np.argmax(err))
            if err[j] > worst[0]:
                worst = (float(err[j]), name, j)
    return GradCheckReport(worst[0], worst[1], worst[2], n_coords, threshold, h, worst[0] <= threshold)


def grad_check_sample(n: int = 4, d_item: int = 3, d_user: int = 2, seed: int = 0) -> ListSample:
    """A small random list with a shuffled initial order and at least one click."""
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < 0.5).astype(np.float64)
    labels[rng.integers(n)] = 1.0
    return ListSample.build(
        rng.standard_normal((n, d_item)), rng.standard_normal(d_user), labels, rng.permutation(n), f"gradcheck-{seed}"
    )

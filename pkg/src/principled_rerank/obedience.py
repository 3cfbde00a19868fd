"""How often a trained re-ranker actually obeys the two consistency principles.

* convergence (P1): re-ranking the model's own output changes nothing;
* adversarial (P2): swapping two adjacent items of the input order leaves the
  re-ranked output unchanged.

Permutations are compared exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
import torch

from .core import ConfigError, ContractError, Dataset, length_groups
from .model import Reranker, make_batch, rank_positions, swap_adjacent_batch


def _check(data: Dataset) -> None:
    if len(data) == 0:
        raise ContractError("obedience needs a nonempty dataset")


def p1_flags(model: Reranker, data: Dataset) -> np.ndarray:
    _check(data)
    flags = np.zeros(len(data), dtype=bool)
    for idx in length_groups(data, 256):
        b = make_batch([data[i] for i in idx])
        with torch.no_grad():
            p1 = rank_positions(model(b.X, b.U, b.P), b.P)
            p2 = rank_positions(model(b.X, b.U, p1), p1)
        flags[idx] = (p1 == p2).all(dim=-1).numpy()
    return flags


def p1_obedience(model: Reranker, data: Dataset) -> float:
    return float(p1_flags(model, data).mean())


def draw_swaps(n: int, trials: int, eval_seed: int, list_index: int) -> np.ndarray:
    """Distinct swap indices for one list; ``trials >= n - 1`` enumerates them all."""
    if n < 2:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng([eval_seed, list_index])
    return rng.choice(n - 1, size=min(trials, n - 1), replace=False).astype(np.int64)


def p2_flags(model: Reranker, data: Dataset, trials: int = 1, eval_seed: int = 0) -> np.ndarray:
    _check(data)
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    flags = np.ones(len(data), dtype=bool)
    for idx in length_groups(data, 256):
        n = data[idx[0]].n
        if n < 2:
            continue
        b = make_batch([data[i] for i in idx])
        swaps = np.stack([draw_swaps(n, trials, eval_seed, i) for i in idx])
        ok = torch.ones(len(idx), dtype=torch.bool)
        with torch.no_grad():
            ref = rank_positions(model(b.X, b.U, b.P), b.P)
            for t in range(swaps.shape[1]):
                p_hat = swap_adjacent_batch(b.P, torch.as_tensor(swaps[:, t]))
                out = rank_positions(model(b.X, b.U, p_hat), p_hat)
                ok &= (out == ref).all(dim=-1)
        flags[idx] = ok.numpy()
    return flags


def p2_obedience(model: Reranker, data: Dataset, trials: int = 1, eval_seed: int = 0) -> float:
    return float(p2_flags(model, data, trials, eval_seed).mean())


@dataclass
class ObedienceReport:
    p1_rate: float
    p2_rate: float
    n_lists: int
    p2_trials_per_list: int
    eval_seed: int

    def to_dict(self) -> dict:
        return {
            "p1_rate": self.p1_rate,
            "p2_rate": self.p2_rate,
            "n_lists": self.n_lists,
            "p2_trials_per_list": self.p2_trials_per_list,
            "eval_seed": self.eval_seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p1_obedience", "p2_obedience", "n_lists", "p2_trials_per_list", "eval_seed"])
        w.writerow([repr(self.p1_rate), repr(self.p2_rate), self.n_lists,
                    self.p2_trials_per_list, self.eval_seed])
        return buf.getvalue()


def obedience_report(
    model: Reranker, data: Dataset, trials: int = 1, eval_seed: int = 0, strict: bool = False
) -> ObedienceReport:
    """Both rates; ``strict`` checks every adjacent swap of every list."""
    if strict:
        trials = max(s.n for s in data) - 1 if len(data) else 1
        trials = max(trials, 1)
    return ObedienceReport(
        p1_rate=p1_obedience(model, data),
        p2_rate=p2_obedience(model, data, trials, eval_seed),
        n_lists=len(data),
        p2_trials_per_list=trials,
        eval_seed=eval_seed,
    )

"""Synthetic click lists with known ground truth, JSONL persistence and splitting.

Generator, per list::

    u ~ N(0, I_{d_user}),  x_i ~ N(0, I_{d_item})
    w_u   = w0 + W u / sqrt(d_user)                 (w0, W drawn once per seed)
    b_i   = <w_u, x_i>                              base relevance
    v_i   = b_i + context_weight * <x_i, mean_{j!=i} x_j>
    y_i   ~ Bernoulli(sigmoid(click_scale * v_i))
    initial order: descending b_i + N(0, ranker_noise^2)

Items are stored in initial order, so ``init_pos`` is the identity.

JSONL format, one list per line::

    {"list_id": ..., "user": [...], "items": [[...], ...], "labels": [...], "init_pos": [...]}

``items`` are listed in initial-ranker order; ``init_pos`` may be omitted
(identity).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ConfigError, Dataset, ListSample, identity_positions, validate_sample


class DataParseError(ValueError):
    def __init__(self, path, line: int, field: str, message: str):
        super().__init__(f"{path}:{line}: field {field!r}: {message}")
        self.line = line
        self.field = field


@dataclass
class SynthConfig:
    n_lists: int = 1000
    n: int = 10
    d_item: int = 6
    d_user: int = 8
    context_weight: float = 0.5
    ranker_noise: float = 1.0
    click_scale: float = 1.0
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_lists < 0:
            raise ConfigError("n_lists must be >= 0")
        if self.n < 2:
            raise ConfigError("list length n must be >= 2")
        if self.d_item < 1 or self.d_user < 0:
            raise ConfigError("d_item must be >= 1 and d_user >= 0")
        if self.ranker_noise < 0:
            raise ConfigError("ranker_noise must be >= 0")
        if not np.isfinite([self.context_weight, self.click_scale, self.ranker_noise]).all():
            raise ConfigError("generator parameters must be finite")
        return self


@dataclass
class GroundTruth:
    click_prob: list[np.ndarray]
    relevance: list[np.ndarray]
    utility: list[np.ndarray]
    w0: np.ndarray
    W: np.ndarray


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def generate(cfg: SynthConfig) -> tuple[Dataset, GroundTruth]:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    latent_seq, *list_seqs = root.spawn(cfg.n_lists + 1)
    latent = np.random.default_rng(latent_seq)
    w0 = latent.standard_normal(cfg.d_item)
    W = latent.standard_normal((cfg.d_item, cfg.d_user))

    samples, probs, rels, utils = [], [], [], []
    for i, seq in enumerate(list_seqs):
        rng = np.random.default_rng(seq)
        u = rng.standard_normal(cfg.d_user)
        x = rng.standard_normal((cfg.n, cfg.d_item))
        w_u = w0 + (W @ u / np.sqrt(cfg.d_user) if cfg.d_user else 0.0)
        b = x @ w_u
        others = (x.sum(axis=0, keepdims=True) - x) / (cfg.n - 1)
        v = b + cfg.context_weight * np.einsum("ij,ij->i", x, others)
        p = _sigmoid(cfg.click_scale * v)
        y = (rng.random(cfg.n) < p).astype(np.float64)
        noisy = b + cfg.ranker_noise * rng.standard_normal(cfg.n)
        order = np.argsort(-noisy, kind="stable")
        samples.append(ListSample.build(x[order], u, y[order], identity_positions(cfg.n), i))
        probs.append(p[order])
        rels.append(b[order])
        utils.append(v[order])
    data = Dataset(samples, cfg.d_item, cfg.d_user, "train", fixed_n=True)
    return data, GroundTruth(probs, rels, utils, w0, W)


# -- persistence ------------------------------------------------------------------


def sample_to_record(s: ListSample) -> dict:
    return {
        "list_id": s.list_id,
        "user": s.user.tolist(),
        "items": s.items.tolist(),
        "labels": [int(v) for v in s.labels],
        "init_pos": s.init_pos.tolist(),
    }


def save(data: Dataset, path) -> None:
    with open(path, "w") as fh:
        for s in data:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n")


def _field(rec: dict, name: str, path, line: int, default=None):
    if name not in rec:
        if default is not None:
            return default
        raise DataParseError(path, line, name, "missing")
    return rec[name]


def _array(value, ndim: int, path, line: int, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataParseError(path, line, name, f"not numeric ({exc})") from None
    if arr.ndim != ndim and not (ndim == 2 and arr.size == 0):
        raise DataParseError(path, line, name, f"expected {ndim}-D array, got shape {arr.shape}")
    return arr


def load(path, split_tag: str = "train") -> Dataset:
    """Read a JSONL dataset; an empty file is an empty dataset."""
    samples = []
    d_item = d_user = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataParseError(path, line_no, "<record>", f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataParseError(path, line_no, "<record>", "not a JSON object")
            items = _array(_field(rec, "items", path, line_no), 2, path, line_no, "items")
            user = _array(_field(rec, "user", path, line_no, []), 1, path, line_no, "user")
            labels = _array(_field(rec, "labels", path, line_no), 1, path, line_no, "labels")
            raw_pos = rec.get("init_pos")
            if raw_pos is None:
                pos = identity_positions(items.shape[0])
            else:
                pos = np.asarray(raw_pos)
                if pos.ndim != 1 or (pos.size and not np.issubdtype(pos.dtype, np.integer)):
                    raise DataParseError(path, line_no, "init_pos", "must be a list of integers")
                pos = pos.astype(np.int64)
            s = ListSample(items, user, labels, pos, rec.get("list_id"))
            check = validate_sample(s)
            if not check:
                name = {"non-binary label": "labels", "not a permutation": "init_pos"}.get(
                    check.reason, check.reason.split()[0]
                )
                raise DataParseError(path, line_no, name, check.reason)
            if d_item is None:
                d_item, d_user = items.shape[1], user.shape[0]
            elif (items.shape[1], user.shape[0]) != (d_item, d_user):
                raise DataParseError(path, line_no, "items", "feature width differs from first record")
            samples.append(s)
    return Dataset(samples, d_item or 0, d_user or 0, split_tag)


def split(data: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle lists and cut them into train/valid/test.

    Valid and test sizes are ``round(fraction * N)``; train takes the rest.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three nonnegative numbers summing to 1: {fractions}")
    n = len(data)
    n_valid = int(round(fr[1] * n))
    n_test = min(int(round(fr[2] * n)), n - n_valid)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = sorted(order[:n_test].tolist())
    valid_idx = sorted(order[n_test:n_test + n_valid].tolist())
    train_idx = sorted(order[n_test + n_valid:].tolist())
    return (
        data.subset(train_idx, "train"),
        data.subset(valid_idx, "valid"),
        data.subset(test_idx, "test"),
    )


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)

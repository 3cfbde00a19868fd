"""Self-attention list re-ranker.

The network embeds each item, adds a learned embedding of the item's current
rank, lets items attend to each other, appends a projection of the user
features and maps every item to one logit.  Logits become a distribution over
the list (``softmax_list``) or independent click probabilities
(``sigmoid_item``).

Everything runs in float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .core import ConfigError, ContractError, ListSample, NumericalError, as_positions

DTYPE = torch.float64
CHECKPOINT_FORMAT = "principled-rerank-checkpoint/1"
HEAD_MODES = ("softmax_list", "sigmoid_item")
POSITION_MODES = ("learned_add", "off")


@dataclass
class RerankerConfig:
    d_item: int
    d_user: int = 0
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 1
    mlp_hidden: list[int] = field(default_factory=lambda: [32])
    n_max: int = 64
    head_mode: str = "softmax_list"
    position_mode: str = "learned_add"
    seed: int = 0

    def validate(self) -> "RerankerConfig":
        if self.d_item < 1:
            raise ConfigError("d_item must be >= 1")
        if self.d_user < 0:
            raise ConfigError("d_user must be >= 0")
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("d_model and n_heads must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError("mlp_hidden widths must be >= 1")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"position_mode must be one of {POSITION_MODES}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RerankerConfig":
        d = dict(d)
        d["mlp_hidden"] = list(d.get("mlp_hidden", [32]))
        return cls(**d)


class AttentionBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.ff1 = nn.Linear(d_model, 2 * d_model)
        self.ff2 = nn.Linear(2 * d_model, d_model)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, n, d = h.shape
        dh = d // self.n_heads

        def split(t):
            return t.view(b, n, self.n_heads, dh).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(b, n, d)
        h = h + self.o(mixed)
        return h + self.ff2(nn.functional.gelu(self.ff1(h)))


class Reranker(nn.Module):
    def __init__(self, cfg: RerankerConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.item_proj = nn.Linear(cfg.d_item, cfg.d_model)
        self.user_proj = nn.Linear(cfg.d_user, cfg.d_model) if cfg.d_user > 0 else None
        self.pos_table = nn.Parameter(torch.zeros(cfg.n_max, cfg.d_model))
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_blocks)
        )
        width = cfg.d_model * (2 if cfg.d_user > 0 else 1)
        layers: list[nn.Module] = []
        for hidden in cfg.mlp_hidden:
            layers += [nn.Linear(width, hidden), nn.GELU()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.head = nn.Sequential(*layers)
        self.to(DTYPE)

    def logits(self, X: torch.Tensor, U: torch.Tensor | None, P: torch.Tensor) -> torch.Tensor:
        """Per-item logits for a batch: X (B, n, d_item), U (B, d_user), P (B, n) -> (B, n)."""
        cfg = self.cfg
        if X.dim() != 3 or X.shape[-1] != cfg.d_item:
            raise ContractError(f"item tensor must be (B, n, {cfg.d_item}), got {tuple(X.shape)}")
        if P.shape != X.shape[:2]:
            raise ContractError(f"positions {tuple(P.shape)} do not match items {tuple(X.shape[:2])}")
        if X.shape[1] > cfg.n_max:
            raise ContractError(f"list length {X.shape[1]} exceeds n_max={cfg.n_max}")
        h = self.item_proj(X)
        if cfg.position_mode == "learned_add":
            h = h + self.pos_table[P]
        for block in self.blocks:
            h = block(h)
        if self.user_proj is not None:
            if U is None or U.shape != (X.shape[0], cfg.d_user):
                raise ContractError(f"user tensor must be (B, {cfg.d_user})")
            u = self.user_proj(U).unsqueeze(1).expand(-1, X.shape[1], -1)
            h = torch.cat([h, u], dim=-1)
        return self.head(h).squeeze(-1)

    def forward(self, X, U, P) -> torch.Tensor:
        z = self.logits(X, U, P)
        if self.cfg.head_mode == "softmax_list":
            return torch.softmax(z, dim=-1)
        return torch.sigmoid(z)


def init_params(cfg: RerankerConfig) -> Reranker:
    """Build a re-ranker with seeded fan-in uniform init and a zero position table.

    A fresh model therefore ignores positions until training moves ``pos_table``.
    """
    model = Reranker(cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_(_uniform(module.weight.shape, bound, gen))
                module.bias.copy_(_uniform(module.bias.shape, bound, gen))
        model.pos_table.zero_()
    return model


def _uniform(shape, bound: float, gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    X: torch.Tensor
    U: torch.Tensor | None
    Y: torch.Tensor
    P: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def n(self) -> int:
        return int(self.X.shape[1])


def make_batch(samples: Sequence[ListSample]) -> Batch:
    if not samples:
        raise ContractError("empty batch")
    n = samples[0].n
    if any(s.n != n for s in samples):
        raise ContractError("a batch must contain lists of one length")
    X = torch.as_tensor(np.stack([s.items for s in samples]), dtype=DTYPE)
    d_user = samples[0].user.shape[0]
    U = torch.as_tensor(np.stack([s.user for s in samples]), dtype=DTYPE) if d_user else None
    Y = torch.as_tensor(np.stack([s.labels for s in samples]), dtype=DTYPE)
    P = torch.as_tensor(np.stack([s.init_pos for s in samples]), dtype=torch.long)
    return Batch(X, U, Y, P)


def rank_positions(scores: torch.Tensor, tie_ref: torch.Tensor) -> torch.Tensor:
    """Batched descending-score ranking with ties broken by ascending ``tie_ref``."""
    with torch.no_grad():
        by_ref = torch.argsort(tie_ref, dim=-1)
        s = torch.gather(scores, -1, by_ref)
        perm = torch.sort(s, dim=-1, descending=True, stable=True).indices
        order = torch.gather(by_ref, -1, perm)
        ranks = torch.arange(order.shape[-1]).expand_as(order)
        return torch.empty_like(order).scatter_(-1, order, ranks)


def swap_adjacent_batch(P: torch.Tensor, ks: torch.Tensor) -> torch.Tensor:
    """Batched adjacent swap: row ``b`` exchanges ranks ``ks[b]`` and ``ks[b] + 1``."""
    ks = ks.view(-1, 1)
    return torch.where(P == ks, ks + 1, torch.where(P == ks + 1, ks, P))


def score_list(model: Reranker, items, user, pos) -> np.ndarray:
    """Scores for a single list as a numpy vector."""
    items = np.asarray(items, dtype=np.float64)
    pos = as_positions(pos)
    if items.ndim != 2 or items.shape[0] != pos.size:
        raise ContractError("items must be (n, d_item) with n == len(pos)")
    X = torch.as_tensor(items, dtype=DTYPE).unsqueeze(0)
    U = None
    if model.cfg.d_user:
        U = torch.as_tensor(np.asarray(user, dtype=np.float64), dtype=DTYPE).view(1, -1)
    P = torch.as_tensor(pos).unsqueeze(0)
    with torch.no_grad():
        return model(X, U, P)[0].numpy().copy()


# -- gradients ------------------------------------------------------------------


def loss_and_gradients(
    model: Reranker, objective: Callable[[Reranker], torch.Tensor | float]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``objective(model)`` and its gradient with respect to every parameter.

    Positions derived by ranking inside the objective carry no gradient.
    """
    names, params = zip(*model.named_parameters())
    loss = objective(model)
    if not torch.is_tensor(loss):
        loss = torch.tensor(float(loss), dtype=DTYPE)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalError(f"objective is non-finite ({value})")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = (None,) * len(params)
    out = {}
    for name, p, g in zip(names, params, grads):
        arr = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy()
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite gradient for {name}")
        out[name] = arr
    return value, out


def get_flat_params(model: Reranker) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in model.named_parameters()}


def set_flat_params(model: Reranker, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ContractError(f"parameter names differ: {missing}")
    with torch.no_grad():
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tuple(p.shape):
                raise ContractError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=DTYPE))


# -- checkpoint -----------------------------------------------------------------
#
# JSON document: {"format", "config", "arrays": {name: {"shape", "data"}}}.
# Python's float repr round-trips every float64 exactly.


def checkpoint_dict(model: Reranker) -> dict:
    arrays = {
        name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        for name, arr in get_flat_params(model).items()
    }
    return {"format": CHECKPOINT_FORMAT, "config": model.cfg.to_dict(), "arrays": arrays}


def save_checkpoint(model: Reranker, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model), sort_keys=True) + "\n")


def load_checkpoint(path) -> Reranker:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    model = Reranker(RerankerConfig.from_dict(doc["config"]))
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    set_flat_params(model, arrays)
    return model

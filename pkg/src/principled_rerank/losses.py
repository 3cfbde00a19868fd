"""Listwise log-loss, contrastive similarity loss and the principled objective.

The principled objective for one list with input order ``P`` is::

    total = ce(s, y)                                   # base term
          + w1 * (ce(s', y) + cs(P'', P', s'', s'))     # convergence consistency
          + w2 * (ce(s^, y) + cs(P^,  P', s^,  s'))     # adversarial consistency

where ``s = R(X, P)``, ``P'`` ranks ``s``, ``s' = R(X, P')``, ``P''`` ranks ``s'``,
``s'' = R(X, P'')``, ``P^`` swaps two adjacent ranks of ``P`` and ``s^ = R(X, P^)``.
Rankings are constants: no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import ContractError, ListSample, as_positions
from .model import DTYPE, Batch, Reranker, make_batch, rank_positions, swap_adjacent_batch

LOG_FLOOR = 1e-12
TERMS = ("ce_base", "ce_p_prime", "cs_p1", "ce_p_hat", "cs_p2")


def _pair(a, b, what: str):
    as_tensor = torch.is_tensor(a) or torch.is_tensor(b)
    a = torch.as_tensor(a, dtype=DTYPE) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=DTYPE) if not torch.is_tensor(b) else b
    if a.shape != b.shape:
        raise ContractError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return a, b, as_tensor


def log_loss(scores, labels):
    """``-sum(y * log p)`` over the last axis, with ``p`` floored at 1e-12.

    Tensors in give a (differentiable) tensor out; anything else gives a float.
    """
    s, y, as_tensor = _pair(scores, labels, "log_loss")
    out = -(y.to(s.dtype) * torch.log(torch.clamp(s, min=LOG_FLOOR))).sum(-1)
    return out if as_tensor else float(out)


def cs_loss(pos_a, pos_b, scores_a, scores_b):
    """Position-gap weighted squared score difference, summed over items.

    ``sum_i |pos_a[i] - pos_b[i]| * (scores_a[i] - scores_b[i]) ** 2``.  The
    weight is a constant, so it vanishes whenever the two orders agree.
    """
    sa, sb, as_tensor = _pair(scores_a, scores_b, "cs_loss score")
    pa = torch.as_tensor(pos_a)
    pb = torch.as_tensor(pos_b)
    if pa.shape != sa.shape or pb.shape != sa.shape:
        raise ContractError(
            f"cs_loss: positions {tuple(pa.shape)}, {tuple(pb.shape)} vs scores {tuple(sa.shape)}"
        )
    weight = (pa - pb).abs().to(sa.dtype)
    out = (weight * (sa - sb) ** 2).sum(-1)
    return out if as_tensor else float(out)


@dataclass
class Positions:
    """The four orders used by the objective, each (B, n)."""

    P: torch.Tensor
    P_prime: torch.Tensor
    P_pprime: torch.Tensor
    P_hat: torch.Tensor


@dataclass
class LossTerms:
    """Per-list loss terms (each shape (B,)) plus the orders that produced them."""

    ce_base: torch.Tensor
    ce_p_prime: torch.Tensor
    cs_p1: torch.Tensor
    ce_p_hat: torch.Tensor
    cs_p2: torch.Tensor
    positions: Positions

    def total(self, w_p1: float = 1.0, w_p2: float = 1.0) -> torch.Tensor:
        """Weighted per-list total; a zero weight drops its pair of terms outright."""
        out = self.ce_base
        if w_p1 != 0:
            out = out + w_p1 * (self.ce_p_prime + self.cs_p1)
        if w_p2 != 0:
            out = out + w_p2 * (self.ce_p_hat + self.cs_p2)
        return out


def perturbed_positions(P: torch.Tensor, swap_k) -> torch.Tensor:
    n = P.shape[-1]
    if n < 2:
        return P.clone()
    ks = torch.as_tensor(swap_k, dtype=torch.long).reshape(-1)
    if ks.numel() == 1:
        ks = ks.expand(P.shape[0])
    if ks.shape[0] != P.shape[0]:
        raise ContractError("need one swap index per list")
    if bool(((ks < 0) | (ks > n - 2)).any()):
        raise ContractError(f"swap index out of range 0..{n - 2}")
    return swap_adjacent_batch(P, ks)


def principled_terms(
    model: Reranker, batch: Batch, swap_k=None, positions: Positions | None = None
) -> LossTerms:
    """All five per-list terms for a batch.

    Pass ``positions`` to reuse previously derived orders (frozen), e.g. for
    finite-difference probes where re-ranking would make the objective jumpy.
    """
    X, U, Y, P = batch.X, batch.U, batch.Y, batch.P
    s = model(X, U, P)
    if positions is None:
        if swap_k is None:
            raise ContractError("swap_k is required unless positions are given")
        P_prime = rank_positions(s.detach(), P)
        s_prime = model(X, U, P_prime)
        P_pprime = rank_positions(s_prime.detach(), P_prime)
        positions = Positions(P, P_prime, P_pprime, perturbed_positions(P, swap_k))
    else:
        s_prime = model(X, U, positions.P_prime)
    s_pprime = model(X, U, positions.P_pprime)
    s_hat = model(X, U, positions.P_hat)
    return LossTerms(
        ce_base=log_loss(s, Y),
        ce_p_prime=log_loss(s_prime, Y),
        cs_p1=cs_loss(positions.P_pprime, positions.P_prime, s_pprime, s_prime),
        ce_p_hat=log_loss(s_hat, Y),
        cs_p2=cs_loss(positions.P_hat, positions.P_prime, s_hat, s_prime),
        positions=positions,
    )


@dataclass
class PrincipledLossBreakdown:
    ce_base: float
    ce_p_prime: float
    cs_p1: float
    ce_p_hat: float
    cs_p2: float
    total: float
    P: np.ndarray
    P_prime: np.ndarray
    P_pprime: np.ndarray
    P_hat: np.ndarray

    def frozen(self) -> Positions:
        return Positions(*(torch.as_tensor(p).unsqueeze(0) for p in
                           (self.P, self.P_prime, self.P_pprime, self.P_hat)))


def principled_loss(
    model: Reranker, sample: ListSample, swap_k: int, weights: tuple[float, float] = (1.0, 1.0)
) -> PrincipledLossBreakdown:
    """Evaluate the principled objective on one list."""
    as_positions(sample.init_pos)
    if sample.n >= 2 and not 0 <= swap_k <= sample.n - 2:
        raise ContractError(f"swap index {swap_k} out of range 0..{sample.n - 2}")
    with torch.no_grad():
        terms = principled_terms(model, make_batch([sample]), swap_k)
        total = terms.total(*weights)
    pos = terms.positions
    return PrincipledLossBreakdown(
        *(float(getattr(terms, t)[0]) for t in TERMS),
        total=float(total[0]),
        P=pos.P[0].numpy().copy(),
        P_prime=pos.P_prime[0].numpy().copy(),
        P_pprime=pos.P_pprime[0].numpy().copy(),
        P_hat=pos.P_hat[0].numpy().copy(),
    )


def frozen_objective(sample: ListSample, positions: Positions, weights=(1.0, 1.0)):
    """Scalar objective of ``model`` with the orders held fixed; for gradient work."""
    batch = make_batch([sample])

    def objective(model: Reranker) -> torch.Tensor:
        return principled_terms(model, batch, positions=positions).total(*weights).sum()

    return objective

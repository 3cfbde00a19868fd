"""scikit-learn style wrapper around the principled re-ranker.

Inputs are collections of lists rather than a flat design matrix.  ``fit``,
``predict``, ``transform`` and ``score`` accept any of:

* a :class:`~principled_rerank.core.Dataset`;
* a sequence of :class:`~principled_rerank.core.ListSample`;
* a sequence of 2-D item matrices (each already in initial order) together with
  ``y``, a matching sequence of binary label vectors.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Dataset, ListSample
from .metrics import MetricsReport, evaluate, predict_lists
from .model import RerankerConfig
from .obedience import ObedienceReport, obedience_report
from .training import TrainConfig, train


def check_lists(X, y=None, *, d_item: int | None = None, d_user: int | None = None) -> Dataset:
    """Coerce the accepted input forms into a validated :class:`Dataset`."""
    if isinstance(X, Dataset):
        data = X
    else:
        X = list(X)
        if X and isinstance(X[0], ListSample):
            data = Dataset(X)
        else:
            if y is None:
                y = [np.zeros(np.asarray(m).shape[0]) for m in X]
            y = list(y)
            if len(y) != len(X):
                raise ValueError(f"got {len(X)} item matrices but {len(y)} label vectors")
            data = Dataset([ListSample.build(m, None, lab, None, i) for i, (m, lab) in enumerate(zip(X, y))])
    if len(data) == 0:
        raise ValueError("no lists given")
    if d_item is not None and data.d_item != d_item:
        raise ValueError(f"lists have {data.d_item} item features, estimator was fitted with {d_item}")
    if d_user is not None and data.d_user != d_user:
        raise ValueError(f"lists have {data.d_user} user features, estimator was fitted with {d_user}")
    return data


class PrincipledReranker(BaseEstimator):
    """Self-attention list re-ranker trained with the two consistency principles.

    Parameters
    ----------
    p1_weight, p2_weight : float
        Weights of the convergence and adversarial consistency terms.  Both 0
        gives plain listwise log-loss training.
    random_state : int
        Seeds initialization, shuffling and swap sampling.
    """

    def __init__(
        self,
        d_model: int = 32,
        n_heads: int = 2,
        n_blocks: int = 1,
        mlp_hidden: Sequence[int] = (32,),
        n_max: int = 64,
        head_mode: str = "softmax_list",
        position_mode: str = "learned_add",
        epochs: int = 30,
        batch_size: int = 16,
        learning_rate: float = 1e-4,
        p1_weight: float = 1.0,
        p2_weight: float = 1.0,
        random_state: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.mlp_hidden = mlp_hidden
        self.n_max = n_max
        self.head_mode = head_mode
        self.position_mode = position_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.p1_weight = p1_weight
        self.p2_weight = p2_weight
        self.random_state = random_state

    def _configs(self, data: Dataset) -> tuple[TrainConfig, RerankerConfig]:
        model_cfg = RerankerConfig(
            d_item=data.d_item,
            d_user=data.d_user,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_blocks=self.n_blocks,
            mlp_hidden=list(self.mlp_hidden),
            n_max=max(self.n_max, max(s.n for s in data)),
            head_mode=self.head_mode,
            position_mode=self.position_mode,
            seed=self.random_state,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.random_state,
            principle_weights=(self.p1_weight, self.p2_weight),
        )
        return train_cfg, model_cfg

    def fit(self, X, y=None, valid=None):
        data = check_lists(X, y)
        train_cfg, model_cfg = self._configs(data)
        valid_data = check_lists(valid, d_item=data.d_item, d_user=data.d_user) if valid is not None else None
        if valid_data is not None:
            train_cfg.eval_every = 1
        self.model_, self.train_log_ = train(train_cfg, model_cfg, data, valid_data)
        self.n_features_in_ = data.d_item
        self.n_user_features_in_ = data.d_user
        return self

    def _lists(self, X, y=None) -> Dataset:
        check_is_fitted(self, "model_")
        return check_lists(X, y, d_item=self.n_features_in_, d_user=self.n_user_features_in_)

    def predict(self, X) -> list[np.ndarray]:
        """Per-item re-ranking scores for each list."""
        data = self._lists(X)
        scores, _ = predict_lists(self.model_, data)
        return scores

    def transform(self, X) -> list[np.ndarray]:
        """Re-ranked position vectors (0-based rank of every item) for each list."""
        data = self._lists(X)
        _, ranks = predict_lists(self.model_, data)
        return ranks

    def evaluate(self, X, y=None) -> MetricsReport:
        data = self._lists(X, y)
        return evaluate(self.model_, data)

    def obedience(self, X, trials: int = 1, eval_seed: int = 0, strict: bool = False) -> ObedienceReport:
        data = self._lists(X)
        return obedience_report(self.model_, data, trials, eval_seed, strict)

    def score(self, X, y=None) -> float:
        """Mean NDCG of the re-ranked lists (0 when no list has a click)."""
        ndcg = self.evaluate(X, y).ndcg
        return 0.0 if ndcg is None else ndcg

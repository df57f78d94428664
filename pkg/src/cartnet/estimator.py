"""scikit-learn style wrappers around graph construction and CartNet training."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .crystal import CrystalStructure
from .graph import DEFAULT_CUTOFF, CrystalGraph, build_graph
from .metrics import adp_mae
from .model import ModelConfig
from .training import TrainConfig, train


def check_structures(X, name="X"):
    """Validate a sequence of CrystalStructure objects and return it as a list."""
    if isinstance(X, CrystalStructure):
        raise TypeError(f"{name} must be a sequence of CrystalStructure, got a single structure")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a sequence of CrystalStructure") from None
    if not items:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(items):
        if not isinstance(s, CrystalStructure):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected CrystalStructure")
    return items


def check_graphs(X, name="X"):
    items = list(X)
    if not items:
        raise ValueError(f"{name} is empty")
    for i, g in enumerate(items):
        if not isinstance(g, CrystalGraph):
            raise TypeError(f"{name}[{i}] is {type(g).__name__}, expected CrystalGraph")
    return items


def _with_targets(structures, y):
    """Attach scalar targets ``y`` to structures (scalar head)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) != len(structures):
        raise ValueError(f"y has {len(y)} values for {len(structures)} structures")
    return [replace(s, target=float(t)) for s, t in zip(structures, y)]


class RadiusGraphTransformer(TransformerMixin, BaseEstimator):
    """Turns crystal structures into periodic radius graphs."""

    def __init__(self, cutoff=DEFAULT_CUTOFF, include_hydrogens=True):
        self.cutoff = cutoff
        self.include_hydrogens = include_hydrogens

    def fit(self, X, y=None):
        check_structures(X)
        if not self.cutoff > 0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return [build_graph(s, self.cutoff, self.include_hydrogens) for s in check_structures(X)]


class CartNetRegressor(RegressorMixin, BaseEstimator):
    """CartNet as an estimator over lists of CrystalStructure.

    With ``head="cholesky"`` the targets are the per-atom ADPs stored on the
    structures and ``y`` is ignored; ``predict`` returns one [n_target, 3, 3]
    array per structure. With ``head="scalar"`` ``y`` holds one value per
    structure and ``predict`` returns a 1-D array.
    """

    def __init__(self, num_layers=4, dim=256, rbf_k=64, cutoff=DEFAULT_CUTOFF,
                 use_temperature=True, head="cholesky", use_envelope=True,
                 use_direction=True, include_hydrogens=True, batch_size=4,
                 grad_accumulation=16, lr_max=1e-3, epochs=50, pct_start=0.01,
                 so3_augment=True, max_steps=None, random_state=0):
        self.num_layers = num_layers
        self.dim = dim
        self.rbf_k = rbf_k
        self.cutoff = cutoff
        self.use_temperature = use_temperature
        self.head = head
        self.use_envelope = use_envelope
        self.use_direction = use_direction
        self.include_hydrogens = include_hydrogens
        self.batch_size = batch_size
        self.grad_accumulation = grad_accumulation
        self.lr_max = lr_max
        self.epochs = epochs
        self.pct_start = pct_start
        self.so3_augment = so3_augment
        self.max_steps = max_steps
        self.random_state = random_state

    def _configs(self):
        model_cfg = ModelConfig(num_layers=self.num_layers, dim=self.dim, rbf_k=self.rbf_k,
                                cutoff=self.cutoff, use_temperature=self.use_temperature,
                                head=self.head, use_envelope=self.use_envelope,
                                use_direction=self.use_direction)
        train_cfg = TrainConfig(batch_size=self.batch_size,
                                grad_accumulation=self.grad_accumulation,
                                lr_max=self.lr_max, epochs=self.epochs,
                                pct_start=self.pct_start, so3_augment=self.so3_augment,
                                seed=int(self.random_state or 0),
                                include_hydrogens=self.include_hydrogens,
                                max_steps=self.max_steps)
        return model_cfg, train_cfg

    def fit(self, X, y=None, validation=None):
        X = check_structures(X)
        if self.head == "scalar":
            if y is None:
                raise ValueError("the scalar head needs y")
            X = _with_targets(X, y)
        model_cfg, train_cfg = self._configs()
        self.model_, self.history_ = train(X, model_cfg, train_cfg, val_structures=validation)
        self.n_features_in_ = 1
        return self

    def _graphs(self, X):
        return [build_graph(s, self.model_.config.cutoff, self.include_hydrogens)
                for s in check_structures(X)]

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_graphs(self._graphs(X))

    def score(self, X, y=None, sample_weight=None):
        """Negative mean absolute error (ADP entries or scalar targets); higher is better."""
        check_is_fitted(self, "model_")
        X = check_structures(X)
        if self.head == "scalar":
            pred = self.predict(X)
            y = np.asarray(y if y is not None else [s.target for s in X], dtype=np.float64)
            return -float(np.average(np.abs(pred - y), weights=sample_weight))
        graphs = self._graphs(X)
        preds = self.model_.predict_graphs(graphs)
        errs = np.concatenate([np.atleast_1d(adp_mae(p, g.adp[g.node_has_target]))
                               for p, g in zip(preds, graphs)])
        return -float(errs.mean())

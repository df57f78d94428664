import numpy as np
import pytest
from sklearn.base import clone

from cartnet import CartNetRegressor, RadiusGraphTransformer
from cartnet.estimator import check_structures
from cartnet.graph import CrystalGraph

from synth import cubic_one_atom, toy_dataset

SMALL = dict(num_layers=2, dim=8, rbf_k=8, batch_size=2, grad_accumulation=1, epochs=2,
             so3_augment=False)


def test_params_and_clone():
    est = CartNetRegressor(**SMALL, random_state=4)
    params = est.get_params()
    assert params["dim"] == 8 and params["random_state"] == 4
    c = clone(est)
    assert c.get_params() == params and not hasattr(c, "model_")


def test_fit_predict_score():
    data = toy_dataset(4, seed=1)
    est = CartNetRegressor(**SMALL).fit(data)
    preds = est.predict(data)
    assert len(preds) == 4
    for p, s in zip(preds, data):
        n = sum(1 for a in s.sites if a.atomic_number != 1)
        assert p.shape == (n, 3, 3)
        assert np.all(np.linalg.eigvalsh(p)[:, 0] > 0)
    score = est.score(data)
    assert score < 0 and np.isfinite(score)
    assert len(est.history_.step_losses) == 4


def test_reproducible():
    data = toy_dataset(4, seed=1)
    a = CartNetRegressor(**SMALL).fit(data).predict(data)
    b = CartNetRegressor(**SMALL).fit(data).predict(data)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_scalar_head():
    data = toy_dataset(4, seed=2)
    y = np.arange(4.0)
    est = CartNetRegressor(**SMALL, head="scalar").fit(data, y)
    assert est.predict(data).shape == (4,)
    assert est.score(data, y) <= 0
    with pytest.raises(ValueError):
        CartNetRegressor(**SMALL, head="scalar").fit(data)


def test_unfitted_and_bad_input():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        CartNetRegressor().predict(toy_dataset(1))
    with pytest.raises(TypeError):
        check_structures(cubic_one_atom())
    with pytest.raises(TypeError):
        check_structures([1, 2])
    with pytest.raises(ValueError):
        check_structures([])


def test_transformer():
    data = toy_dataset(2)
    graphs = RadiusGraphTransformer(cutoff=4.0).fit_transform(data)
    assert all(isinstance(g, CrystalGraph) for g in graphs)
    assert all(np.all(g.d <= 4.0 + 1e-9) for g in graphs)
    no_h = RadiusGraphTransformer(include_hydrogens=False).fit_transform(data)
    assert all(np.all(g.z != 1) for g in no_h)
    with pytest.raises(ValueError):
        RadiusGraphTransformer(cutoff=0).fit(data)

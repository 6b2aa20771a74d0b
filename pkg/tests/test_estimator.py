import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_classification
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.utils.estimator_checks import parametrize_with_checks

from eefl.estimator import EarlyExitClassifier, FederatedEarlyExitClassifier


@pytest.fixture(scope="module")
def data():
    X, y = make_classification(300, 6, n_informative=5, n_redundant=0, n_classes=3, random_state=0)
    return X, np.array(["a", "b", "c"])[y]


def test_fit_predict_string_labels(data):
    X, y = data
    clf = EarlyExitClassifier(hidden_dim=8, epochs=15).fit(X, y)
    assert set(clf.predict(X)) <= {"a", "b", "c"} and clf.n_exits_ == 3
    assert clf.score(X, y) > 0.7
    proba = clf.predict_proba(X, exit=1)
    assert proba.shape == (300, 3) and np.allclose(proba.sum(axis=1), 1.0)
    assert clf.predict_exits(X).shape == (3, 300)
    assert len(clf.score_exits(X, y)) == 3 and len(clf.exit_metrics(X, y)) == 3


def test_params_clone_and_determinism(data):
    X, y = data
    clf = EarlyExitClassifier(hidden_dim=8, epochs=3, random_state=4)
    assert clf.get_params()["hidden_dim"] == 8
    a = clone(clf).fit(X, y).predict_proba(X)
    b = clone(clf).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_input_validation(data):
    X, y = data
    with pytest.raises(NotFittedError):
        EarlyExitClassifier().predict(X)
    clf = EarlyExitClassifier(hidden_dim=8, epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :4])
    with pytest.raises(ValueError):
        clf.predict(X, exit=4)
    with pytest.raises(ValueError):
        EarlyExitClassifier().fit(X, y[:10])


def test_cross_validation(data):
    X, y = data
    scores = cross_val_score(EarlyExitClassifier(hidden_dim=8, epochs=5), X, y, cv=3)
    assert scores.shape == (3,) and np.all(scores > 0.5)


def test_federated_fit_with_groups(data):
    X, y = data
    groups = np.arange(len(X)) % 10
    fed = FederatedEarlyExitClassifier(hidden_dim=8, rounds=8, fraction=0.5, lr=0.05, server="fedavg_sgd")
    fed.fit(X, y, groups=groups)
    assert len(fed.clients_) == 10 and fed.history_[-1].round == 8
    assert fed.score(X, y) > 1 / 3
    with pytest.raises(ValueError):
        FederatedEarlyExitClassifier().fit(X, y)


def test_federated_warm_start(data):
    X, y = data
    central = EarlyExitClassifier(hidden_dim=8, epochs=15).fit(X, y)
    fed = FederatedEarlyExitClassifier(hidden_dim=8, rounds=2, warm_start=True)
    fed.params_ = central.params_
    fed.fit(X, y, groups=np.arange(len(X)) % 5)
    assert fed.history_[0].exit_loss == pytest.approx([m.loss for m in central.exit_metrics(X, y)])


@parametrize_with_checks([EarlyExitClassifier(hidden_dim=4, epochs=3)])
def test_sklearn_estimator_contract(estimator, check):
    check(estimator)

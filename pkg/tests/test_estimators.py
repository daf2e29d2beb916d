import numpy as np
import pytest
from sklearn.base import clone

from noisydarts.data import synthetic_blobs
from noisydarts.estimators import GenotypeClassifier, NoisyDARTSSearch
from noisydarts.searchspace import Genotype


@pytest.fixture(scope="module")
def blobs():
    x, y = synthetic_blobs(num_classes=3, n_samples=48, image_size=4, seed=0)
    return x, np.array(["cat", "dog", "eel"])[y]


def test_search_estimator_fit_predict(blobs):
    x, y = blobs
    est = NoisyDARTSSearch(epochs=1, batch_size=8, channels=2, stages=[1], sigma=0.3)
    assert est.fit(x, y) is est
    assert isinstance(est.genotype_, Genotype)
    assert 0 <= est.skip_count() <= 6
    pred = est.predict(x[:5])
    assert pred.shape == (5,) and set(pred) <= {"cat", "dog", "eel"}
    assert len(est.record_.epochs) == 1


def test_search_estimator_is_deterministic_and_clonable(blobs):
    x, y = blobs
    est = NoisyDARTSSearch(epochs=1, batch_size=8, channels=2, stages=[1])
    a = est.fit(x, y).genotype_.arch_string()
    b = clone(est).fit(x, y).genotype_.arch_string()
    assert a == b
    assert clone(est).get_params()["sigma"] == 0.2


def test_search_estimator_input_checks(blobs):
    x, y = blobs
    with pytest.raises(ValueError):
        NoisyDARTSSearch(epochs=1).fit(x.reshape(len(x), -1), y)
    with pytest.raises(ValueError):
        NoisyDARTSSearch(epochs=1).fit(x, y[:-1])
    with pytest.raises(Exception):
        NoisyDARTSSearch().predict(x)


def test_genotype_classifier(blobs):
    x, y = blobs
    geno = Genotype.from_arch_string("|nor_conv_3x3~0|+|skip_connect~0|nor_conv_3x3~1|"
                                     "+|skip_connect~0|avg_pool_3x3~1|nor_conv_3x3~2|")
    clf = GenotypeClassifier(genotype=geno, epochs=8, batch_size=8, channels=4, stages=[1])
    clf.fit(x, y)
    proba = clf.predict_proba(x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert clf.score(x, y) > 1 / 3
    same = GenotypeClassifier(genotype=geno.to_json(), epochs=8, batch_size=8, channels=4, stages=[1]).fit(x, y)
    np.testing.assert_array_equal(same.predict_proba(x), proba)


def test_genotype_classifier_needs_genotype(blobs):
    x, y = blobs
    with pytest.raises(ValueError, match="genotype"):
        GenotypeClassifier().fit(x, y)

import numpy as np
import pytest
from sklearn.base import clone

from dianet.data import SynthConfig, synth_generate
from dianet.dynimg import Phase, dynamic_image, normalize
from dianet.errors import NotFittedError, ShapeError
from dianet.estimator import DianetClassifier, DynamicImageTransformer, check_sequences

SMALL = dict(input_size=8, max_epochs=4, patience=4, feature_dim=16, n_tokens=4, stages=((4, 3, 1),), lr=3e-3)


@pytest.fixture(scope="module")
def seqs():
    return synth_generate(SynthConfig(n_subjects=2, samples_per_subject=9, frame_size=8, sequence_length=8))


class TestValidation:
    def test_single_sequence_rejected(self, seqs):
        with pytest.raises(ShapeError):
            check_sequences(seqs[0])

    def test_wrong_item_type(self):
        with pytest.raises(TypeError):
            check_sequences([np.zeros((3, 1, 4, 4))])

    def test_label_length(self, seqs):
        with pytest.raises(ShapeError):
            check_sequences(seqs[:3], [0, 1])

    def test_empty(self):
        with pytest.raises(ValueError):
            check_sequences([])


class TestTransformer:
    @pytest.mark.parametrize("phases,n", [("onset", 1), ("dual", 2), ("all", 3)])
    def test_channel_stacking(self, seqs, phases, n):
        out = DynamicImageTransformer(phases=phases, input_size=8).fit_transform(seqs[:4])
        assert out.shape == (4, n, 8, 8)

    def test_values(self, seqs):
        out = DynamicImageTransformer(phases="all", input_size=8).fit_transform(seqs[:1])[0]
        np.testing.assert_allclose(out[1], normalize(dynamic_image(seqs[0], Phase.APEX_OFFSET).raster)[0], atol=1e-6)
        np.testing.assert_allclose(out[2], normalize(dynamic_image(seqs[0], Phase.FULL).raster)[0], atol=1e-6)

    def test_not_fitted(self, seqs):
        with pytest.raises(NotFittedError):
            DynamicImageTransformer().transform(seqs)

    def test_bad_phase(self, seqs):
        with pytest.raises(ValueError):
            DynamicImageTransformer(phases="apex").fit(seqs)


class TestClassifier:
    def test_params_round_trip(self):
        clf = DianetClassifier(**SMALL)
        assert clone(clf).get_params() == clf.get_params()
        assert clf.set_params(lam=0.5).train_config().lam == 0.5

    def test_fit_predict_score(self, seqs):
        clf = DianetClassifier(**SMALL).fit(seqs)
        preds = clf.predict(seqs)
        assert preds.shape == (len(seqs),) and set(preds) <= set(clf.classes_)
        proba = clf.predict_proba(seqs)
        np.testing.assert_allclose(proba.sum(1), 1.0)
        assert 0.0 <= clf.score(seqs, [s.label for s in seqs]) <= 1.0

    def test_arbitrary_label_values(self, seqs):
        y = np.array(["neg", "pos", "sur"])[[s.label for s in seqs]]
        clf = DianetClassifier(**SMALL).fit(seqs, y)
        assert list(clf.classes_) == ["neg", "pos", "sur"]
        assert set(clf.predict(seqs)) <= {"neg", "pos", "sur"}

    def test_deterministic(self, seqs):
        a = DianetClassifier(**SMALL).fit(seqs).predict_proba(seqs)
        b = DianetClassifier(**SMALL).fit(seqs).predict_proba(seqs)
        np.testing.assert_array_equal(a, b)

    def test_not_fitted(self, seqs):
        with pytest.raises(NotFittedError):
            DianetClassifier().predict(seqs)

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.errors import RejectedInputError
from src.models import ClientConfig
from src.tensor_nn import RngStream
from src.uncertainty import ClientShard, client_upload, confidence_uncertainty, mc_predict, score_images


def two_pass_oracle(matrix: np.ndarray):
    predicted = int(np.argmax(matrix.sum(axis=0) / matrix.shape[0]))
    column = [float(v) for v in matrix[:, predicted]]
    r = sum(column) / len(column)
    alpha = sum((v - r) ** 2 for v in column) / len(column)
    return r, alpha, predicted


class TestConfidenceUncertainty:
    def test_example_two_passes(self):
        r, alpha, predicted = confidence_uncertainty([[0.4, 0.6], [0.2, 0.8]])
        assert predicted == 1
        assert r == pytest.approx(0.7)
        assert alpha == pytest.approx(0.01)

    def test_constant_passes_have_zero_alpha(self):
        r, alpha, predicted = confidence_uncertainty([[0.3, 0.7]] * 5)
        assert (r, alpha, predicted) == (0.7, 0.0, 1)

    def test_single_pass_has_zero_alpha(self):
        _, alpha, _ = confidence_uncertainty([[0.1, 0.5, 0.4]])
        assert alpha == 0.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            m, c = rng.integers(1, 8), rng.integers(2, 6)
            matrix = rng.dirichlet(np.ones(c), size=m)
            r, alpha, predicted = confidence_uncertainty(matrix)
            r_ref, alpha_ref, predicted_ref = two_pass_oracle(matrix)
            assert predicted == predicted_ref
            assert abs(r - r_ref) < 1e-9
            assert abs(alpha - alpha_ref) < 1e-9
            assert 0.0 <= r <= 1.0 and alpha >= 0.0

    def test_alpha_bounded_and_pass_order_free(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            m = int(rng.integers(1, 10))
            first = rng.uniform(0, 1, size=m)
            matrix = np.stack([first, 1 - first], axis=1)
            r, alpha, predicted = confidence_uncertainty(matrix)
            assert alpha <= 0.25
            shuffled = confidence_uncertainty(matrix[rng.permutation(m)])
            assert shuffled[2] == predicted
            assert shuffled[0] == pytest.approx(r, abs=1e-12)
            assert shuffled[1] == pytest.approx(alpha, abs=1e-12)
        _, extreme, _ = confidence_uncertainty([[0.0, 1.0], [1.0, 0.0]])
        assert extreme == pytest.approx(0.25)

    def test_class_permutation_follows_prediction(self):
        matrix = np.random.default_rng(2).dirichlet(np.ones(4), size=5)
        r, alpha, predicted = confidence_uncertainty(matrix)
        order = np.array([2, 0, 3, 1])
        r_p, alpha_p, predicted_p = confidence_uncertainty(matrix[:, order])
        assert order[predicted_p] == predicted
        assert (r_p, alpha_p) == pytest.approx((r, alpha))

    def test_empty_matrix_is_rejected(self):
        with pytest.raises(RejectedInputError):
            confidence_uncertainty(np.zeros((0, 2)))


class TestMcPredict:
    def test_mean_is_reaveraged_passes(self, blink_spec_16, blink_params_16, random_images):
        mean, per_pass = mc_predict(blink_spec_16, blink_params_16, random_images[0], 6, RngStream(1))
        assert per_pass.shape == (6, 2)
        assert_allclose(mean, per_pass.sum(axis=0) / 6, atol=1e-6)

    def test_zero_passes_rejected(self, blink_spec_16, blink_params_16, random_images):
        with pytest.raises(RejectedInputError):
            mc_predict(blink_spec_16, blink_params_16, random_images[0], 0, RngStream(1))

    def test_same_stream_same_scores(self, blink_spec_16, blink_params_16, random_images):
        a = score_images(blink_spec_16, blink_params_16, random_images, 3, RngStream(2, 3))
        b = score_images(blink_spec_16, blink_params_16, random_images, 3, RngStream(2, 3))
        assert a == b


class TestClientUpload:
    @pytest.fixture
    def shard(self, random_images):
        return ClientShard(7, np.arange(100, 105), random_images, np.array([0, 1, 0, 1, 0]))

    def test_zero_epsilon_uploads_everything(self, blink_spec_16, blink_params_16, shard):
        uploads = client_upload(7, blink_spec_16, blink_params_16, shard, ClientConfig(M=3, epsilon=0.0), RngStream(0))
        assert sorted(uploads.entries) == list(range(100, 105))
        assert uploads.entries[101].label == 1

    def test_large_epsilon_uploads_nothing(self, blink_spec_16, blink_params_16, shard):
        uploads = client_upload(7, blink_spec_16, blink_params_16, shard, ClientConfig(M=3, epsilon=1.0), RngStream(0))
        assert len(uploads) == 0

    def test_threshold_is_inclusive_and_records_match(self, blink_spec_16, blink_params_16, shard):
        records = []
        config = ClientConfig(M=4, epsilon=0.0)
        client_upload(7, blink_spec_16, blink_params_16, shard, config, RngStream(0), 3, records.append)
        alphas = sorted(r.alpha for r in records)
        epsilon = alphas[2]
        records = []
        uploads = client_upload(
            7, blink_spec_16, blink_params_16, shard, ClientConfig(M=4, epsilon=epsilon), RngStream(0), 3,
            records.append,
        )
        assert len(records) == 5
        assert all(r.round == 3 and r.client_id == 7 for r in records)
        assert {r.sample_id for r in records if r.uploaded} == set(uploads.entries)
        assert all((r.alpha >= epsilon) == r.uploaded for r in records)
        assert len(uploads) >= 3

    def test_empty_shard(self, blink_spec_16, blink_params_16):
        shard = ClientShard(0, np.zeros(0, dtype=np.int64), np.zeros((0, 16, 16, 1), np.float32), np.zeros(0, np.int64))
        assert len(client_upload(0, blink_spec_16, blink_params_16, shard, ClientConfig(), RngStream(0))) == 0

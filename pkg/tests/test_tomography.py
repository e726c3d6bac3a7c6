"""
Unit tests for the Radon operator, phantoms and noise
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

sys.path.append(str(Path(__file__).parent.parent))

from fedtucker.exceptions import GeometryError, InvalidArgumentError, ShapeMismatchError
from fedtucker.tomography import (Geometry, RadonOperator, add_speckle_noise,
                                  build_radon_operator, estimate_step_size, forward_project,
                                  loss_gradient, loss_value, phantom_labels, read_graymap,
                                  shepp_logan_phantom, synthesize_multimodal_truth, trace_ray,
                                  weighted_sum, write_graymap)


@pytest.fixture(scope='module')
def small_operator():
    return build_radon_operator(Geometry(n_angles=6, n_beamlets=13, grid=(8, 8)))


def identity_operator(shape):
    n = shape[0] * shape[1]
    return RadonOperator(matrix=sparse.identity(n, format='csr'), image_shape=shape,
                         sinogram_shape=shape)


def dense_sampling_sum(x0, y0, dx, dy, grid, samples=10000):
    """Chord length through the grid by sampling points along the ray"""
    n1, n2 = grid
    reach = np.hypot(n1, n2)
    t = np.linspace(-reach, reach, samples)
    px, py = x0 + t * dx, y0 + t * dy
    inside = (np.abs(px) <= n1 / 2) & (np.abs(py) <= n2 / 2)
    return inside.sum() * (2 * reach / (samples - 1))


class TestGeometry:
    """Test scan geometry"""

    def test_angles_cover_half_turn(self):
        g = Geometry(n_angles=4, n_beamlets=3, grid=(8, 8))
        assert np.allclose(g.angles, [0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])

    def test_offsets_symmetric(self):
        g = Geometry(n_angles=1, n_beamlets=5, grid=(8, 8))
        assert np.allclose(g.offsets, -g.offsets[::-1])
        assert g.offsets.max() < g.span / 2

    def test_invalid(self):
        with pytest.raises(GeometryError):
            Geometry(n_angles=0, n_beamlets=3, grid=(8, 8))


class TestRadonOperator:
    """Test ray tracing and the operator matrix"""

    def test_unit_chord(self):
        a = build_radon_operator(Geometry(n_angles=1, n_beamlets=1, grid=(1, 1)))
        assert a.matrix.nnz == 1
        assert a.matrix[0, 0] == pytest.approx(1.0)

    def test_ray_outside_grid(self):
        pixels, lengths = trace_ray(5.0, 0.0, 0.0, 1.0, (2, 2))
        assert pixels.size == 0 and lengths.size == 0

    def test_center_ray_through_unit_image(self):
        a = build_radon_operator(Geometry(n_angles=1, n_beamlets=1, grid=(2, 2)))
        assert forward_project(a, np.ones((2, 2)))[0, 0] == pytest.approx(2.0)

    def test_row_sums_match_dense_sampling(self):
        g = Geometry(n_angles=1, n_beamlets=7, grid=(4, 4))
        a = build_radon_operator(g)
        sums = np.asarray(a.matrix.sum(axis=1)).ravel()
        for b, s in enumerate(g.offsets):
            expected = dense_sampling_sum(s, 0.0, 0.0, 1.0, g.grid)
            assert sums[b] == pytest.approx(expected, abs=1e-2 * max(expected, 1.0))

    def test_diagonal_ray_length(self):
        pixels, lengths = trace_ray(0.0, 0.0, np.sqrt(0.5), np.sqrt(0.5), (4, 4))
        assert lengths.sum() == pytest.approx(4 * np.sqrt(2))
        assert set(pixels.tolist()) == {0, 5, 10, 15}

    def test_deterministic(self, small_operator):
        again = build_radon_operator(small_operator.geometry)
        assert (again.matrix != small_operator.matrix).nnz == 0

    def test_zero_image(self, small_operator):
        assert not np.any(forward_project(small_operator, np.zeros((8, 8))))

    def test_linearity(self, small_operator):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 8, 8))
        lhs = forward_project(small_operator, 2.0 * x - 3.0 * y)
        rhs = 2.0 * forward_project(small_operator, x) - 3.0 * forward_project(small_operator, y)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_adjoint(self, small_operator):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((8, 8))
        y = rng.standard_normal(small_operator.sinogram_shape)
        lhs = np.sum(forward_project(small_operator, x) * y)
        rhs = np.sum(x * small_operator.adjoint(y))
        assert abs(lhs - rhs) < 1e-10

    def test_shape_mismatch(self, small_operator):
        with pytest.raises(ShapeMismatchError):
            forward_project(small_operator, np.zeros((4, 4)))


class TestLoss:
    """Test the least-squares data term and its gradient"""

    def test_consistent_data_zero_loss(self, small_operator):
        x = np.random.default_rng(2).random((8, 8))
        b = forward_project(small_operator, x)
        assert loss_value(small_operator, x, b) == pytest.approx(0.0, abs=1e-20)
        assert np.allclose(loss_gradient(small_operator, x, b), 0.0)

    def test_zero_image_loss(self, small_operator):
        b = np.random.default_rng(3).random(small_operator.sinogram_shape)
        assert loss_value(small_operator, np.zeros((8, 8)), b) == pytest.approx(np.sum(b ** 2))

    def test_matches_double_loop(self, small_operator):
        rng = np.random.default_rng(4)
        x = rng.random((8, 8))
        b = rng.random(small_operator.sinogram_shape)
        dense = small_operator.matrix.toarray()
        total = 0.0
        n_angles = small_operator.sinogram_shape[0]
        for row in range(dense.shape[0]):
            a, beamlet = row % n_angles, row // n_angles
            pred = sum(dense[row, i + 8 * j] * x[i, j] for i in range(8) for j in range(8))
            total += (pred - b[a, beamlet]) ** 2
        assert loss_value(small_operator, x, b) == pytest.approx(total, rel=1e-12)

    def test_identity_operator_gradient(self):
        a = identity_operator((2, 3))
        rng = np.random.default_rng(5)
        x, b = rng.standard_normal((2, 2, 3))
        assert np.allclose(loss_gradient(a, x, b), 2 * (x - b))

    def test_finite_differences(self, small_operator):
        rng = np.random.default_rng(6)
        x = rng.random((8, 8))
        b = rng.random(small_operator.sinogram_shape)
        grad = loss_gradient(small_operator, x, b)
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            h = 1e-6 * (1 + abs(x[idx]))
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = (loss_value(small_operator, xp, b) - loss_value(small_operator, xm, b)) / (2 * h)
        assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-5


class TestStepSize:
    """Test power-iteration step size"""

    def test_identity_operator(self):
        assert estimate_step_size(identity_operator((2, 2))) == pytest.approx(1.0)

    def test_diagonal_operator(self):
        a = RadonOperator(matrix=sparse.diags([2.0, 1.0], format='csr'),
                          image_shape=(2, 1), sinogram_shape=(2, 1))
        assert estimate_step_size(a) == pytest.approx(0.25)

    def test_matches_dense_eigenvalue(self, small_operator):
        dense = small_operator.matrix.toarray()
        lam = np.linalg.eigvalsh(dense.T @ dense).max()
        assert estimate_step_size(small_operator) == pytest.approx(1.0 / lam, rel=1e-4)

    def test_start_vector_from_given_generator(self, small_operator):
        first = estimate_step_size(small_operator, iterations=3,
                                   rng=np.random.Generator(np.random.Philox(4)))
        second = estimate_step_size(small_operator, iterations=3,
                                    rng=np.random.Generator(np.random.Philox(4)))
        assert first == second

    def test_default_generator_is_deterministic(self, small_operator):
        assert estimate_step_size(small_operator, iterations=3) == \
            estimate_step_size(small_operator, iterations=3)

    def test_converged_value_independent_of_start(self, small_operator):
        a = estimate_step_size(small_operator, rng=np.random.Generator(np.random.Philox(1)))
        b = estimate_step_size(small_operator, rng=np.random.Generator(np.random.Philox(2)))
        assert a == pytest.approx(b, rel=1e-4)

    def test_zero_operator(self):
        a = RadonOperator(matrix=sparse.csr_matrix((4, 4)), image_shape=(2, 2),
                          sinogram_shape=(2, 2))
        with pytest.raises(GeometryError):
            estimate_step_size(a)

    def test_gradient_descent_non_increasing(self):
        a = build_radon_operator(Geometry(n_angles=10, n_beamlets=23, grid=(16, 16)))
        b = forward_project(a, shepp_logan_phantom(16, 16))
        eta = estimate_step_size(a, iterations=500)
        x = np.zeros((16, 16))
        previous = loss_value(a, x, b)
        for _ in range(50):
            x = x - eta * loss_gradient(a, x, b)
            current = loss_value(a, x, b)
            assert current <= previous * (1 + 1e-6)
            previous = current


class TestPhantom:
    """Test phantom and multimodal ground truth"""

    def test_range_and_background(self):
        p = shepp_logan_phantom(32, 32)
        assert p.min() >= 0.0 and p.max() <= 1.0
        assert p.sum() > 0
        assert p[0, 0] == 0 and p[-1, -1] == 0 and p[0, -1] == 0 and p[-1, 0] == 0

    def test_too_small(self):
        with pytest.raises(GeometryError):
            shepp_logan_phantom(7, 8)

    def test_labels_background(self):
        labels = phantom_labels(16, 16)
        assert labels[0, 0] == -1
        assert labels.max() < 10

    def test_two_clients_copy_phantom(self):
        p = shepp_logan_phantom(16, 16)
        truth = synthesize_multimodal_truth(p, 1, [1.0])
        assert np.array_equal(truth.elements[0], p)
        assert np.array_equal(truth.transmission, p)

    def test_four_clients_partition(self):
        p = shepp_logan_phantom(32, 32)
        truth = synthesize_multimodal_truth(p, 3, [0.5, 0.5, 0.5])
        supports = [e != 0 for e in truth.elements]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.any(supports[i] & supports[j])
        assert np.allclose(sum(truth.elements), p)
        assert truth.constraint_residual() == 0.0
        assert np.array_equal(truth.transmission, weighted_sum(truth.elements, [0.5, 0.5, 0.5]))

    def test_default_coefficients(self):
        truth = synthesize_multimodal_truth(shepp_logan_phantom(16, 16), 3)
        assert sum(c * c for c in truth.coefficients) == pytest.approx(1.0)
        assert len(truth.images) == 4

    def test_too_many_elements(self):
        with pytest.raises(GeometryError):
            synthesize_multimodal_truth(shepp_logan_phantom(16, 16), 11)


class TestNoise:
    """Test multiplicative speckle noise"""

    def test_zero_sigma_unchanged(self):
        b = np.random.default_rng(7).random((4, 5))
        assert np.array_equal(add_speckle_noise(b, 0.0, np.random.default_rng(0)), b)

    def test_zero_signal(self):
        out = add_speckle_noise(np.zeros((4, 5)), 0.3, np.random.default_rng(0))
        assert not np.any(out)

    def test_negative_sigma(self):
        with pytest.raises(InvalidArgumentError):
            add_speckle_noise(np.ones(3), -0.1, np.random.default_rng(0))

    def test_sample_std(self):
        b = np.full((1000, 1000), 2.0)
        out = add_speckle_noise(b, 0.1, np.random.default_rng(8))
        assert np.std((out - b) / b) == pytest.approx(0.1, rel=0.01)

    def test_same_stream_same_noise(self):
        b = np.ones((3, 3))
        first = add_speckle_noise(b, 0.2, np.random.default_rng(9))
        second = add_speckle_noise(b, 0.2, np.random.default_rng(9))
        assert np.array_equal(first, second)


class TestGraymap:
    """Test 16-bit graymap export"""

    def test_round_trip(self, tmp_path):
        image = np.random.default_rng(10).random((5, 7)) * 3 - 1
        path = write_graymap(tmp_path / 'img.pgm', image)
        restored = read_graymap(path)
        assert restored.shape == image.shape
        assert np.max(np.abs(restored - image)) <= (image.max() - image.min()) / 65535

    def test_header(self, tmp_path):
        path = write_graymap(tmp_path / 'img.pgm', np.zeros((4, 3)))
        assert path.read_bytes().startswith(b'P5\n4 3\n65535\n')
        assert 'min=0.0' in path.with_suffix('.txt').read_text()

    def test_rejects_other_formats(self, tmp_path):
        path = tmp_path / 'img.pgm'
        path.write_bytes(b'P2\n1 1\n255\n0\n')
        with pytest.raises(InvalidArgumentError):
            read_graymap(path)


if __name__ == "__main__":
    pytest.main([__file__, '-v'])

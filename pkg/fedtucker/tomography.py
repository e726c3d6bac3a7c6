"""
Tomography Module
Parallel-beam Radon operator, least-squares data term, Shepp-Logan phantoms,
multimodal ground truth and speckle noise

Pixel (i, j) of an n1 x n2 image is the unit square
[-n1/2 + i, -n1/2 + i + 1] x [-n2/2 + j, -n2/2 + j + 1]. Images are
linearized first-index-fastest, so operator column i + n1*j is pixel (i, j)
and row a + n_angles*b is the ray of angle a and beamlet b.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse

from fedtucker.exceptions import (
    GeometryError, InvalidArgumentError, NonFiniteError, ShapeMismatchError,
)
from fedtucker.tensor_core import flatten, from_flat

logger = logging.getLogger(__name__)

_PARALLEL_EPS = 1e-12
_MIN_SEGMENT = 1e-12

# Modified Shepp-Logan: intensity, semi-axis a, semi-axis b, x0, y0, rotation (deg)
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.8, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.1, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.1, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.1, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.1, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)

MIN_PHANTOM_SIZE = 8
NOISE_CLIP = 6.0


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam scan: uniform angles over [0, pi), beamlets across the grid diagonal"""

    n_angles: int
    n_beamlets: int
    grid: Tuple[int, int]

    def __post_init__(self):
        if self.n_angles < 1 or self.n_beamlets < 1:
            raise GeometryError(
                f"need at least one angle and one beamlet, got {self.n_angles}, {self.n_beamlets}"
            )
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise GeometryError(f"invalid grid {self.grid}")
        object.__setattr__(self, 'grid', tuple(int(n) for n in self.grid))

    @property
    def angles(self):
        return np.pi * np.arange(self.n_angles) / self.n_angles

    @property
    def span(self):
        """Diameter of the circle circumscribing the grid"""
        return float(np.hypot(*self.grid))

    @property
    def offsets(self):
        spacing = self.span / self.n_beamlets
        return -self.span / 2 + (np.arange(self.n_beamlets) + 0.5) * spacing

    @property
    def sinogram_shape(self):
        return (self.n_angles, self.n_beamlets)


@dataclass
class RadonOperator:
    """Sparse (rays x pixels) matrix of intersection lengths"""

    matrix: sparse.csr_matrix
    image_shape: Tuple[int, int]
    sinogram_shape: Tuple[int, int]
    geometry: Optional[Geometry] = None

    def __post_init__(self):
        self.matrix = sparse.csr_matrix(self.matrix, dtype=np.float64)
        rows = int(np.prod(self.sinogram_shape))
        cols = int(np.prod(self.image_shape))
        if self.matrix.shape != (rows, cols):
            raise ShapeMismatchError(
                f"operator shape {self.matrix.shape} does not match "
                f"sinogram {self.sinogram_shape} x image {self.image_shape}"
            )

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != tuple(self.image_shape):
            raise ShapeMismatchError(f"image shape {x.shape} != {tuple(self.image_shape)}")
        return from_flat(self.matrix @ flatten(x), self.sinogram_shape)

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != tuple(self.sinogram_shape):
            raise ShapeMismatchError(f"sinogram shape {y.shape} != {tuple(self.sinogram_shape)}")
        return from_flat(self.matrix.T @ flatten(y), self.image_shape)


def _slab(p, d, lo, hi):
    # Parameter interval where p + a*d lies within [lo, hi]
    if abs(d) < _PARALLEL_EPS:
        if lo <= p <= hi:
            return -np.inf, np.inf
        return None
    a1, a2 = (lo - p) / d, (hi - p) / d
    return min(a1, a2), max(a1, a2)


def trace_ray(x0, y0, dx, dy, grid):
    """
    Exact ray-grid intersection lengths by stepping across pixel boundaries

    Args:
        x0, y0: A point on the ray
        dx, dy: Unit direction
        grid: (n1, n2)

    Returns:
        Tuple (pixel_indices, lengths) with first-index-fastest pixel indices
    """
    n1, n2 = grid
    xmin, ymin = -n1 / 2.0, -n2 / 2.0
    sx = _slab(x0, dx, xmin, -xmin)
    sy = _slab(y0, dy, ymin, -ymin)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0))
    if sx is None or sy is None:
        return empty

    a_min, a_max = max(sx[0], sy[0]), min(sx[1], sy[1])
    if not a_max - a_min > _MIN_SEGMENT:
        return empty

    crossings = [np.array([a_min, a_max])]
    if abs(dx) >= _PARALLEL_EPS:
        crossings.append((xmin + np.arange(n1 + 1) - x0) / dx)
    if abs(dy) >= _PARALLEL_EPS:
        crossings.append((ymin + np.arange(n2 + 1) - y0) / dy)
    alphas = np.concatenate(crossings)
    alphas = np.unique(alphas[(alphas >= a_min) & (alphas <= a_max)])

    lengths = np.diff(alphas)
    mid = 0.5 * (alphas[:-1] + alphas[1:])
    i = np.floor(x0 + mid * dx - xmin).astype(np.int64)
    j = np.floor(y0 + mid * dy - ymin).astype(np.int64)
    keep = (lengths > _MIN_SEGMENT) & (i >= 0) & (i < n1) & (j >= 0) & (j < n2)
    return i[keep] + n1 * j[keep], lengths[keep]


def build_radon_operator(g: Geometry) -> RadonOperator:
    """
    Discrete parallel-beam Radon transform as a sparse matrix

    Args:
        g: Scan geometry

    Returns:
        RadonOperator whose entries are exact ray/pixel intersection lengths
    """
    logger.info(
        f"Building Radon operator: grid {g.grid}, {g.n_angles} angles, {g.n_beamlets} beamlets"
    )
    rows, cols, vals = [], [], []
    offsets = g.offsets
    for a, phi in enumerate(g.angles):
        cos_phi, sin_phi = np.cos(phi), np.sin(phi)
        for b, s in enumerate(offsets):
            pixels, lengths = trace_ray(s * cos_phi, s * sin_phi, -sin_phi, cos_phi, g.grid)
            if pixels.size:
                rows.append(np.full(pixels.size, a + g.n_angles * b, dtype=np.int64))
                cols.append(pixels)
                vals.append(lengths)

    n_rays = g.n_angles * g.n_beamlets
    n_pixels = g.grid[0] * g.grid[1]
    if rows:
        coo = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_rays, n_pixels),
        )
    else:
        coo = sparse.coo_matrix((n_rays, n_pixels))
    matrix = coo.tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    logger.info(f"Radon operator ready: {matrix.nnz} nonzeros")
    return RadonOperator(matrix=matrix, image_shape=g.grid, sinogram_shape=g.sinogram_shape,
                         geometry=g)


def forward_project(a: RadonOperator, x):
    """Sinogram A x X"""
    return a.forward(x)


def loss_value(a: RadonOperator, x, b):
    """
    Squared Frobenius norm of the data residual

    Args:
        a: Radon operator
        x: Image
        b: Observed sinogram

    Returns:
        ||A x X - B||_F^2
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != tuple(a.sinogram_shape):
        raise ShapeMismatchError(f"sinogram shape {b.shape} != {tuple(a.sinogram_shape)}")
    r = a.forward(x) - b
    return float(np.sum(r * r))


def loss_gradient(a: RadonOperator, x, b):
    """
    Gradient of loss_value with respect to the image: 2 A^T (A x X - B)

    Args:
        a: Radon operator
        x: Image
        b: Observed sinogram

    Returns:
        Image-shaped gradient
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != tuple(a.sinogram_shape):
        raise ShapeMismatchError(f"sinogram shape {b.shape} != {tuple(a.sinogram_shape)}")
    return 2.0 * a.adjoint(a.forward(x) - b)


def _pixel_centers(n1, n2):
    x = -1.0 + (2.0 * np.arange(n1) + 1.0) / n1
    y = -1.0 + (2.0 * np.arange(n2) + 1.0) / n2
    return np.meshgrid(x, y, indexing='ij')


def _ellipse_masks(n1, n2):
    if n1 < MIN_PHANTOM_SIZE or n2 < MIN_PHANTOM_SIZE:
        raise GeometryError(
            f"phantom grid must be at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE}, got {n1}x{n2}"
        )
    xx, yy = _pixel_centers(n1, n2)
    masks = []
    for _, a, b, x0, y0, deg in SHEPP_LOGAN_ELLIPSES:
        phi = np.deg2rad(deg)
        xr = (xx - x0) * np.cos(phi) + (yy - y0) * np.sin(phi)
        yr = -(xx - x0) * np.sin(phi) + (yy - y0) * np.cos(phi)
        masks.append((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return masks


def shepp_logan_phantom(n1, n2):
    """
    Modified Shepp-Logan phantom sampled at pixel centers

    Args:
        n1, n2: Grid extents, each at least 8

    Returns:
        n1 x n2 image with values in [0, 1]
    """
    image = np.zeros((n1, n2))
    for (intensity, *_), mask in zip(SHEPP_LOGAN_ELLIPSES, _ellipse_masks(n1, n2)):
        image += intensity * mask
    return np.clip(image, 0.0, 1.0)


def phantom_labels(n1, n2):
    """
    Index of the last ellipse covering each pixel, -1 for background

    Args:
        n1, n2: Grid extents

    Returns:
        Integer label map
    """
    labels = np.full((n1, n2), -1, dtype=np.int64)
    for e, mask in enumerate(_ellipse_masks(n1, n2)):
        labels[mask] = e
    return labels


def weighted_sum(images, coefficients):
    """Sum of c_j * X^j accumulated in index order"""
    total = np.zeros_like(np.asarray(images[0], dtype=np.float64))
    for c, x in zip(coefficients, images):
        total = total + c * x
    return total


def default_coefficients(n_elements):
    """Equal coefficients with unit sum of squares"""
    return [1.0 / np.sqrt(n_elements)] * n_elements


@dataclass
class MultimodalTruth:
    """XRF element maps plus the XRT image they combine into"""

    elements: List[np.ndarray]
    transmission: np.ndarray
    coefficients: List[float] = field(default_factory=list)

    @property
    def images(self):
        """Ground truth per client, XRT last"""
        return list(self.elements) + [self.transmission]

    def constraint_residual(self):
        return float(np.linalg.norm(self.transmission - weighted_sum(self.elements, self.coefficients)))


def synthesize_multimodal_truth(phantom, n_elements, coefficients=None):
    """
    Split a phantom into element maps and build the consistent XRT image

    Ellipse regions (background excluded) are dealt round-robin to the
    element maps, so the maps have disjoint supports and sum to the phantom.

    Args:
        phantom: Shepp-Logan image
        n_elements: Number of XRF clients (N - 1)
        coefficients: Positive c_j, defaults to 1/sqrt(N - 1) each

    Returns:
        MultimodalTruth with X^N = sum_j c_j X^j
    """
    phantom = np.asarray(phantom, dtype=np.float64)
    if n_elements < 1:
        raise GeometryError("need at least one XRF element map")
    if n_elements > len(SHEPP_LOGAN_ELLIPSES):
        raise GeometryError(
            f"{n_elements} element maps requested but the phantom has "
            f"{len(SHEPP_LOGAN_ELLIPSES)} ellipses"
        )
    if coefficients is None:
        coefficients = default_coefficients(n_elements)
    coefficients = [float(c) for c in coefficients]
    if len(coefficients) != n_elements:
        raise ShapeMismatchError(f"{len(coefficients)} coefficients for {n_elements} elements")
    if any(c <= 0 for c in coefficients):
        raise GeometryError(f"coefficients must be positive, got {coefficients}")

    labels = phantom_labels(*phantom.shape)
    elements = []
    for j in range(n_elements):
        owned = np.arange(j, len(SHEPP_LOGAN_ELLIPSES), n_elements)
        elements.append(np.where(np.isin(labels, owned), phantom, 0.0))
    transmission = weighted_sum(elements, coefficients)
    return MultimodalTruth(elements=elements, transmission=transmission, coefficients=coefficients)


def add_speckle_noise(b, sigma, rng: np.random.Generator):
    """
    Multiplicative Gaussian noise b * (1 + eps), eps ~ N(0, sigma^2) clipped at 6 sigma

    Args:
        b: Sinogram
        sigma: Standard deviation, >= 0
        rng: Generator owned by the caller

    Returns:
        Noisy sinogram
    """
    if sigma < 0:
        raise InvalidArgumentError(f"noise level must be non-negative, got {sigma}")
    b = np.asarray(b, dtype=np.float64)
    if sigma == 0:
        return b.copy()
    eps = rng.normal(0.0, sigma, size=b.shape)
    eps = np.clip(eps, -NOISE_CLIP * sigma, NOISE_CLIP * sigma)
    return b * (1.0 + eps)


def estimate_step_size(a: RadonOperator, iterations=100,
                       rng: Optional[np.random.Generator] = None):
    """
    Step size 1/lambda_max(A^T A) from power iteration

    Args:
        a: Radon operator
        iterations: Power iterations
        rng: Generator for the start vector; a Philox generator seeded with 0
            when omitted, so standalone calls stay deterministic

    Returns:
        Positive step size
    """
    if a.matrix.nnz == 0:
        raise GeometryError("cannot estimate a step size for a zero operator")
    m = a.matrix
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = m.T @ (m @ v)
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise GeometryError("power iteration collapsed to zero")
        v = w / norm
    if not np.isfinite(lam) or lam <= 0:
        raise NonFiniteError(f"invalid largest eigenvalue estimate {lam}")
    logger.debug(f"Estimated lambda_max(A^T A) = {lam:.6g}")
    return 1.0 / lam


def write_graymap(path, image):
    """
    Write a 16-bit binary PGM, min-max scaled, with a .txt sidecar of the scaling

    Args:
        path: Output .pgm path
        image: 2-D array; axis 0 runs left to right, axis 1 bottom to top

    Returns:
        Path of the written image
    """
    path = Path(path)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatchError(f"graymaps need a 2-D image, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    scale = hi - lo
    scaled = np.zeros_like(image) if scale == 0 else (image - lo) / scale
    pixels = np.rint(scaled * 65535).astype('>u2')
    raster = np.flipud(pixels.T)
    height, width = raster.shape

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(f"P5\n{width} {height}\n65535\n".encode('ascii'))
        f.write(raster.tobytes())
    path.with_suffix('.txt').write_text(f"min={lo!r}\nmax={hi!r}\n")
    return path


def read_graymap(path):
    """
    Read a graymap written by write_graymap back to (approximate) values

    Args:
        path: .pgm path with its .txt sidecar

    Returns:
        2-D array in the original orientation
    """
    path = Path(path)
    data = path.read_bytes()
    parts = data.split(b'\n', 3)
    if parts[0] != b'P5':
        raise InvalidArgumentError(f"{path} is not a binary graymap")
    width, height = (int(v) for v in parts[1].split())
    raster = np.frombuffer(parts[3], dtype='>u2').reshape(height, width)
    scaling = dict(line.split('=') for line in path.with_suffix('.txt').read_text().split())
    lo, hi = float(scaling['min']), float(scaling['max'])
    return lo + np.flipud(raster).T.astype(np.float64) / 65535 * (hi - lo)

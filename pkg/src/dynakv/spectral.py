"""Per-layer, per-stream spectral bases from offline calibration statistics.

Calibration accumulates first and second moments of pre-rotary key/value
states; the basis is the eigensystem of the mean-centered covariance, columns
ordered by descending captured variance, so trailing spectral components are
the cheapest to drop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dynakv import linalg, serialization
from dynakv.errors import DimensionError, InsufficientDataError, RankError

STREAMS = ("K", "V")

ORTHO_TOL = 1e-8


@dataclass
class CovarianceAccumulator:
    """Streaming sum / outer-product statistics for one layer and stream."""

    dim: int
    count: int = 0
    sum: np.ndarray = field(default=None)
    outer_sum: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sum is None:
            self.sum = np.zeros(self.dim)
        if self.outer_sum is None:
            self.outer_sum = np.zeros((self.dim, self.dim))

    def accumulate(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.size == 0:
            return self
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise DimensionError(f"batch width {batch.shape} != accumulator dim {self.dim}")
        self.count += batch.shape[0]
        self.sum = self.sum + batch.sum(axis=0)
        outer = batch.T @ batch
        self.outer_sum = self.outer_sum + (outer + outer.T) * 0.5
        return self

    def merge(self, other):
        if other.dim != self.dim:
            raise DimensionError(f"cannot merge accumulators of dims {self.dim} and {other.dim}")
        self.count += other.count
        self.sum = self.sum + other.sum
        self.outer_sum = self.outer_sum + other.outer_sum
        return self

    def covariance(self):
        """Mean-centered population covariance."""
        if self.count < 1:
            raise InsufficientDataError("no samples accumulated")
        mean = self.sum / self.count
        cov = self.outer_sum / self.count - np.outer(mean, mean)
        return (cov + cov.T) * 0.5


@dataclass
class SpectralBasis:
    """Projection matrix, its inverse, and eigenvalue metadata."""

    matrix: np.ndarray          # d x d, columns are ranked directions
    inverse: np.ndarray
    eigenvalues: np.ndarray     # descending
    orthonormal: bool
    layer_id: int
    stream: str

    @property
    def dim(self):
        return self.matrix.shape[0]


def identity_basis(dim, layer_id=0, stream="K"):
    eye = np.eye(dim)
    return SpectralBasis(matrix=eye.copy(), inverse=eye.copy(),
                         eigenvalues=np.ones(dim), orthonormal=True,
                         layer_id=layer_id, stream=stream)


def compute_basis(acc, layer_id=0, stream="K"):
    """Eigendecompose the accumulated covariance into a ranked basis.

    Columns are eigenvectors sorted by descending eigenvalue (ties broken by
    original column index); each is signed so its largest-magnitude entry is
    positive, making the basis deterministic across runs.
    """
    if stream not in STREAMS:
        raise DimensionError(f"stream must be one of {STREAMS}, got {stream!r}")
    if acc.count < acc.dim:
        raise InsufficientDataError(
            f"covariance needs >= {acc.dim} samples, have {acc.count}")
    eigvals, eigvecs = linalg.jacobi_eigh(acc.covariance())
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    for j in range(eigvecs.shape[1]):
        k = int(np.argmax(np.abs(eigvecs[:, j])))
        if eigvecs[k, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    return SpectralBasis(matrix=eigvecs, inverse=eigvecs.T.copy(),
                         eigenvalues=eigvals, orthonormal=True,
                         layer_id=layer_id, stream=stream)


def project(basis, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.dim:
        raise DimensionError(f"state width {x.shape[-1]} != basis dim {basis.dim}")
    return x @ basis.matrix


def reconstruct(basis, prefix):
    """Rebuild a full-width vector from its leading spectral components."""
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 1:
        raise RankError(f"prefix must be a vector, got shape {prefix.shape}")
    r = prefix.shape[0]
    if not 1 <= r <= basis.dim:
        raise RankError(f"retained length {r} outside [1, {basis.dim}]")
    return prefix @ basis.inverse[:r, :]


def refresh_inverse(basis):
    """Recompute the inverse after the matrix was updated by training."""
    inverse, _ = linalg.invert(basis.matrix)
    gram = basis.matrix.T @ basis.matrix
    ortho = bool(np.abs(gram - np.eye(basis.dim)).max() <= ORTHO_TOL)
    return SpectralBasis(matrix=basis.matrix.copy(), inverse=inverse,
                         eigenvalues=basis.eigenvalues.copy(), orthonormal=ortho,
                         layer_id=basis.layer_id, stream=basis.stream)


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/basis_L{layer}_{stream}.dkvt + .json sidecar
# ---------------------------------------------------------------------------

def basis_filename(layer_id, stream):
    return f"basis_L{layer_id}_{stream}"


def save_basis(directory, basis):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / basis_filename(basis.layer_id, basis.stream)
    serialization.write_tensor(stem.with_suffix(".dkvt"), basis.matrix)
    sidecar = {
        "layer": basis.layer_id,
        "stream": basis.stream,
        "eigenvalues": basis.eigenvalues.tolist(),
        "orthonormal_flag": basis.orthonormal,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_basis(directory, layer_id, stream):
    stem = Path(directory) / basis_filename(layer_id, stream)
    matrix = serialization.read_tensor(stem.with_suffix(".dkvt"))
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    eigenvalues = np.asarray(sidecar["eigenvalues"], dtype=np.float64)
    ortho = bool(sidecar["orthonormal_flag"])
    inverse = matrix.T.copy() if ortho else linalg.invert(matrix)[0]
    return SpectralBasis(matrix=matrix, inverse=inverse, eigenvalues=eigenvalues,
                         orthonormal=ortho, layer_id=int(sidecar["layer"]),
                         stream=sidecar["stream"])

"""Order-3 tensor algebra: matricization, mode products, Tucker pieces.

Conventions
-----------
A tensor ``t`` with shape ``(I1, I2, I3)`` is indexed ``t[i1, i2, i3]``.  The
mode-k matricization places mode k on the rows and flattens the remaining
modes in increasing order with the earlier mode varying fastest, so for
mode 1 the column index is ``i2 + i3 * I2``.  Volatility tensors use shape
``(p, p, D)`` with days on the third mode; frontal slice ``t[:, :, l]`` is
day ``l``'s matrix.

Left singular vectors carry a sign convention (the entry of largest absolute
value in each column is made positive, ties broken by the lowest row index)
so that repeated runs and different LAPACK builds agree.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_ORTHO_TOL = 1e-8


def _values(t) -> np.ndarray:
    if isinstance(t, VolTensor):
        return t.values
    return np.asarray(t, dtype=float)


def matricize(t, mode: int) -> np.ndarray:
    """Unfold an order-3 tensor along ``mode`` (1, 2, or 3).

    Returns the ``I_mode x (product of the others)`` matrix with the earlier
    remaining mode varying fastest along the columns.
    """
    t = _values(t)
    if t.ndim != 3:
        raise ValueError(f"expected an order-3 tensor, got ndim={t.ndim}")
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2, or 3, got {mode}")
    moved = np.moveaxis(t, mode - 1, 0)
    return moved.reshape(moved.shape[0], -1, order="F")


def fold(m: np.ndarray, mode: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of the given shape."""
    m = np.asarray(m, dtype=float)
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2, or 3, got {mode}")
    shape = tuple(shape)
    if len(shape) != 3:
        raise ValueError("shape must have three entries")
    rest = [shape[i] for i in range(3) if i != mode - 1]
    if m.shape != (shape[mode - 1], rest[0] * rest[1]):
        raise ValueError(f"matrix shape {m.shape} does not match tensor shape {shape}")
    moved = m.reshape((shape[mode - 1], rest[0], rest[1]), order="F")
    return np.moveaxis(moved, 0, mode - 1)


def mode_product(t, a: np.ndarray, mode: int) -> np.ndarray:
    """Multiply tensor ``t`` by matrix ``a`` along ``mode``.

    ``a`` has shape ``(J, I_mode)``; the result replaces the mode's dimension
    by ``J``.  Equivalently ``matricize(result, mode) = a @ matricize(t, mode)``.
    """
    t = _values(t)
    a = np.asarray(a, dtype=float)
    if t.ndim != 3:
        raise ValueError(f"expected an order-3 tensor, got ndim={t.ndim}")
    if a.ndim != 2 or a.shape[1] != t.shape[mode - 1]:
        raise ValueError(
            f"matrix shape {a.shape} does not match tensor dim {t.shape[mode - 1]} on mode {mode}"
        )
    if mode == 1:
        return np.einsum("ar,rjk->ajk", a, t, optimize=True)
    if mode == 2:
        return np.einsum("ar,irk->iak", a, t, optimize=True)
    if mode == 3:
        return np.einsum("ar,ijr->ija", a, t, optimize=True)
    raise ValueError(f"mode must be 1, 2, or 3, got {mode}")


def fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-|entry| element is positive.

    Ties are broken by the lowest row index (argmax's convention).  A zero
    column is left untouched.
    """
    u = np.array(u, dtype=float, copy=True)
    if u.ndim != 2:
        raise ValueError("expected a matrix")
    idx = np.argmax(np.abs(u), axis=0)
    pivot = u[idx, np.arange(u.shape[1])]
    flip = pivot < 0
    u[:, flip] *= -1.0
    return u


def leading_left_singular_vectors(m: np.ndarray, r: int) -> np.ndarray:
    """Return the ``r`` leading left singular vectors of ``m``, sign-fixed.

    Requires ``r <= min(m.shape)``.  A (near) tie between the r-th and
    (r+1)-th singular values means the returned subspace is not well
    separated; that case is flagged with a warning rather than an error.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError("expected a matrix")
    if not 1 <= r <= min(m.shape):
        raise ValueError(f"r={r} out of range for shape {m.shape}")
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if r < s.size:
        scale = s[0] if s[0] > 0 else 1.0
        if (s[r - 1] - s[r]) / scale < 1e-12:
            warnings.warn(
                f"singular values {r} and {r + 1} are degenerate "
                f"({s[r - 1]:.6e} vs {s[r]:.6e}); the leading subspace is not unique",
                RuntimeWarning,
                stacklevel=2,
            )
    return fix_signs(u[:, :r])


def slice_eigenvalues(t) -> np.ndarray:
    """Eigenvalues of each frontal slice of a ``(p, p, D)`` tensor.

    Slices are symmetrized before the decomposition.  Returns a ``(D, p)``
    array sorted in decreasing order per day.
    """
    t = _values(t)
    slices = np.moveaxis(t, -1, 0)
    sym = 0.5 * (slices + np.swapaxes(slices, 1, 2))
    vals = np.linalg.eigvalsh(sym)
    return vals[:, ::-1]


@dataclass
class VolTensor:
    """A ``(p, p, D)`` stack of daily matrices.

    ``values[i, j, l]`` is entry (i, j) of day ``l``.  Serialization is a
    JSON header plus a flat float64 binary laid out slice-major (day 0's
    matrix row-major, then day 1, ...).
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"expected shape (p, p, D), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("tensor contains non-finite entries")

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def n_days(self) -> int:
        return self.values.shape[2]

    def day(self, l: int) -> np.ndarray:
        return self.values[:, :, l]

    @classmethod
    def from_slices(cls, slices, check_symmetric: bool = False, tol: float = 1e-8) -> "VolTensor":
        """Stack a sequence of ``(p, p)`` matrices along the day mode."""
        arr = np.stack([np.asarray(s, dtype=float) for s in slices], axis=0)
        if check_symmetric:
            dev = np.max(np.abs(arr - np.swapaxes(arr, 1, 2)))
            scale = max(np.max(np.abs(arr)), 1.0)
            if dev > tol * scale:
                raise ValueError(f"slices are not symmetric (max deviation {dev:.3e})")
        return cls(np.moveaxis(arr, 0, -1))

    def save(self, prefix) -> None:
        """Write ``<prefix>.json`` and ``<prefix>.bin``."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "p": int(self.p),
            "D": int(self.n_days),
            "layout": "slice-major",
            "dtype": "float64",
            "data_file": prefix.name + ".bin",
        }
        with open(prefix.with_suffix(".json"), "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
            fh.write("\n")
        day_major = np.ascontiguousarray(np.moveaxis(self.values, -1, 0))
        day_major.astype("<f8").tofile(prefix.with_suffix(".bin"))

    @classmethod
    def load(cls, prefix) -> "VolTensor":
        prefix = Path(prefix)
        with open(prefix.with_suffix(".json")) as fh:
            header = json.load(fh)
        if header.get("layout") != "slice-major":
            raise ValueError(f"unsupported layout {header.get('layout')!r}")
        p, d = int(header["p"]), int(header["D"])
        data = np.fromfile(prefix.parent / header["data_file"], dtype="<f8")
        if data.size != p * p * d:
            raise ValueError(
                f"data file holds {data.size} values, header implies {p * p * d}"
            )
        return cls(np.moveaxis(data.reshape(d, p, p), 0, -1))


@dataclass
class TuckerFactors:
    """Core tensor plus loading matrices of a Tucker decomposition.

    ``core`` has shape ``(r1, r1, r2)``; ``loading_q`` is ``(p, r1)`` and
    ``loading_v`` is ``(D, r2)``, both with orthonormal columns (checked to
    1e-8 at construction).
    """

    core: np.ndarray
    loading_q: np.ndarray
    loading_v: np.ndarray

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=float)
        self.loading_q = np.asarray(self.loading_q, dtype=float)
        self.loading_v = np.asarray(self.loading_v, dtype=float)
        if self.core.ndim != 3 or self.core.shape[0] != self.core.shape[1]:
            raise ValueError(f"core must have shape (r1, r1, r2), got {self.core.shape}")
        r1, _, r2 = self.core.shape
        if self.loading_q.ndim != 2 or self.loading_q.shape[1] != r1:
            raise ValueError(f"loading_q must have {r1} columns, got {self.loading_q.shape}")
        if self.loading_v.ndim != 2 or self.loading_v.shape[1] != r2:
            raise ValueError(f"loading_v must have {r2} columns, got {self.loading_v.shape}")
        for name, mat in (("loading_q", self.loading_q), ("loading_v", self.loading_v)):
            gram = mat.T @ mat
            dev = np.max(np.abs(gram - np.eye(mat.shape[1])))
            if dev > _ORTHO_TOL:
                raise ValueError(f"{name} columns are not orthonormal (deviation {dev:.3e})")

    @property
    def ranks(self) -> tuple[int, int]:
        return self.core.shape[0], self.core.shape[2]


def tucker_reconstruct(factors: TuckerFactors) -> VolTensor:
    """Assemble ``core x1 Q x2 Q x3 V`` into a ``(p, p, D)`` tensor."""
    t = np.einsum(
        "ia,jb,lc,abc->ijl",
        factors.loading_q,
        factors.loading_q,
        factors.loading_v,
        factors.core,
        optimize=True,
    )
    return VolTensor(t)

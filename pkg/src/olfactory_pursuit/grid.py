"""Periodic square lattice: wrapping, minimum-image displacements, actions, D4."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Unit moves available to the agent: +e1, -e1, +e2, -e2.
ACTIONS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.int64)
ACTION_NAMES = ("+e1", "-e1", "+e2", "-e2")

CAPTURE_RADIUS = np.sqrt(2.0)

# The 8 elements of D4 as integer matrices acting on column vectors.
D4 = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, -1], [1, 0]],
        [[-1, 0], [0, -1]],
        [[0, 1], [-1, 0]],
        [[1, 0], [0, -1]],
        [[-1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1], [-1, 0]],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class GridSpec:
    """An ``L x L`` periodic lattice with spacing ``dx``.

    ``L`` must be odd so that the displacement space has a unique centre
    and minimum images are never tied.
    """

    L: int = 51
    dx: float = 1.0

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 5:
            raise ValueError(f"L must be an integer >= 5, got {self.L}")
        if self.L % 2 == 0:
            raise ValueError(f"L must be odd, got {self.L}")
        if not self.dx > 0:
            raise ValueError(f"dx must be positive, got {self.dx}")

    @property
    def half(self) -> int:
        return self.L // 2

    @property
    def center(self) -> tuple[int, int]:
        return (self.half, self.half)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Minimum-image value of each index ``k`` read as a displacement mod L."""
        k = np.arange(self.L)
        return np.where(k > self.half, k - self.L, k)

    @cached_property
    def dist2_table(self) -> np.ndarray:
        """Squared minimum-image norm of every displacement, indexed by ``d mod L``."""
        o = self.offsets
        return o[:, None] ** 2 + o[None, :] ** 2

    @cached_property
    def capture_mask(self) -> np.ndarray:
        """Boolean (L, L) table over displacements ``d mod L`` with ``|d| <= sqrt(2)``."""
        m = self.dist2_table <= 2
        m.flags.writeable = False
        return m

    @cached_property
    def capture_offsets(self) -> np.ndarray:
        """The 9 displacements of the capture neighbourhood, shape (9, 2)."""
        return np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=np.int64)


def wrap(p, g: GridSpec) -> tuple[int, int]:
    return (int(p[0]) % g.L, int(p[1]) % g.L)


def min_image(a, b, g: GridSpec) -> tuple[int, int]:
    """Shortest torus displacement ``a - b``.

    On odd ``L`` each component has a unique representative in
    ``[-L//2, L//2]`` so no tie rule is ever needed.
    """
    h = g.half
    di = (int(a[0]) - int(b[0]) + h) % g.L - h
    dj = (int(a[1]) - int(b[1]) + h) % g.L - h
    return (di, dj)


def min_image_array(d: np.ndarray, L: int) -> np.ndarray:
    """Vectorised minimum image for integer displacement arrays."""
    h = L // 2
    return (np.asarray(d) + h) % L - h


def within_capture(d, radius: float = CAPTURE_RADIUS, dx: float = 1.0) -> bool:
    """True iff ``|d| * dx <= radius``.

    The default radius is tested on the integer squared norm so the result
    is bit-exact (``di^2 + dj^2 <= 2``).
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    n2 = int(d[0]) ** 2 + int(d[1]) ** 2
    if radius == CAPTURE_RADIUS and dx == 1.0:
        return n2 <= 2
    return n2 * dx * dx <= radius * radius


def action_index(a) -> int:
    for k, v in enumerate(ACTIONS):
        if v[0] == a[0] and v[1] == a[1]:
            return k
    raise ValueError(f"not a unit action: {a}")


def d4_permutation(vectors: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Index permutation ``perm`` with ``vectors[perm[k]] == g @ vectors[k]``."""
    lookup = {tuple(v): k for k, v in enumerate(vectors.tolist())}
    out = np.empty(len(vectors), dtype=np.int64)
    for k, v in enumerate(vectors):
        gv = tuple((g @ v).tolist())
        if gv not in lookup:
            raise ValueError(f"{tuple(v)} is not mapped into the alphabet by {g.tolist()}")
        out[k] = lookup[gv]
    return out


def transform_field(field: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Apply ``g`` to the displacement axes (last two) of a field indexed by ``d mod L``.

    Returns ``h`` with ``h[..., g d] = field[..., d]``.
    """
    L = field.shape[-1]
    k = np.arange(L)
    d0, d1 = np.meshgrid(k, k, indexing="ij")
    n0 = (g[0, 0] * d0 + g[0, 1] * d1) % L
    n1 = (g[1, 0] * d0 + g[1, 1] * d1) % L
    out = np.empty_like(field)
    out[..., n0, n1] = field[..., d0, d1]
    return out

"""Screened-Poisson depth diffusion on the pixel grid, with an adjoint solve.

The dense depth map minimizes a quadratic energy: a per-pixel data term
``weights * (D - labels)^2`` plus an edge-aware smoothness term that
penalizes squared differences across 4-neighbor edges. Each undirected edge
(a, b) gets conductance ``(theta_a + theta_b) / 2`` where ``theta = exp(-Q)``
is the per-pixel smoothness weight. The normal equations form a symmetric
positive definite 5-point system solved by preconditioned conjugate
gradients; gradients flow back through the solve via the adjoint system
(identical matrix, by symmetry).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SmoothnessField", "DiffusionSystem", "AdjointGradients",
    "SingularSystemError", "SolveError", "assemble", "solve", "solve_adjoint",
    "smoothness_from_image",
]


class SingularSystemError(ValueError):
    """The diffusion energy has no minimizer (no data constraints anywhere)."""


class SolveError(RuntimeError):
    """Conjugate gradients failed to reach the requested residual."""


def smoothness_from_image(image: np.ndarray) -> np.ndarray:
    """Initial Q field: the gradient magnitude of the (channel-mean) image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    gx[:, 0] = img[:, 1] - img[:, 0]
    gx[:, -1] = img[:, -1] - img[:, -2]
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    gy[0, :] = img[1, :] - img[0, :]
    gy[-1, :] = img[-1, :] - img[-2, :]
    return np.hypot(gx, gy)


@dataclass
class SmoothnessField:
    """Unconstrained smoothness parameters Q; the edge weight field is exp(-Q)."""

    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim != 2:
            raise ValueError("Q must be a 2-D grid")

    @property
    def theta(self) -> np.ndarray:
        return np.exp(-self.q)

    @classmethod
    def from_image(cls, image: np.ndarray) -> "SmoothnessField":
        return cls(smoothness_from_image(image))


@dataclass
class DiffusionSystem:
    """Assembled 5-point system: A D = weights * labels.

    ``edge_h[i, j]`` couples pixels (i, j) and (i, j+1); ``edge_v[i, j]``
    couples (i, j) and (i+1, j). A is symmetric positive definite as long as
    the weights are nonnegative with at least one strictly positive entry.
    After :func:`solve` the solution is cached here for the adjoint pass.
    """

    lam: np.ndarray
    labels: np.ndarray
    theta: np.ndarray
    edge_h: np.ndarray
    edge_v: np.ndarray
    diag: np.ndarray
    rhs: np.ndarray
    solution: np.ndarray | None = None
    _precond: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.lam.shape

    def matvec(self, d: np.ndarray) -> np.ndarray:
        out = self.diag * d
        out[:, :-1] -= self.edge_h * d[:, 1:]
        out[:, 1:] -= self.edge_h * d[:, :-1]
        out[:-1, :] -= self.edge_v * d[1:, :]
        out[1:, :] -= self.edge_v * d[:-1, :]
        return out

    def as_sparse(self) -> sp.csr_matrix:
        h, w = self.shape
        idx = np.arange(h * w).reshape(h, w)
        rows = [idx.ravel()]
        cols = [idx.ravel()]
        vals = [self.diag.ravel()]
        for a, b, e in (
            (idx[:, :-1], idx[:, 1:], self.edge_h),
            (idx[:-1, :], idx[1:, :], self.edge_v),
        ):
            rows += [a.ravel(), b.ravel()]
            cols += [b.ravel(), a.ravel()]
            vals += [-e.ravel(), -e.ravel()]
        n = h * w
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )

    def preconditioner(self, name: str):
        if name not in self._precond:
            if name == "jacobi":
                self._precond[name] = _JacobiPreconditioner(self.diag)
            elif name == "hierarchical":
                self._precond[name] = HierarchicalBasisPreconditioner(self.as_sparse(), self.shape)
            else:
                raise ValueError(f"unknown preconditioner {name!r}")
        return self._precond[name]


def assemble(labels: np.ndarray, weights: np.ndarray, smooth: SmoothnessField) -> DiffusionSystem:
    """Build the diffusion normal equations from label/weight images and Q.

    Boundary handling is Neumann: missing neighbors simply contribute no
    edge. Raises :class:`SingularSystemError` when the weights vanish
    everywhere (the energy would be translation invariant).
    """
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.shape != weights.shape or labels.shape != smooth.q.shape:
        raise ValueError(
            f"grid shapes differ: labels {labels.shape}, weights {weights.shape}, Q {smooth.q.shape}"
        )
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-D grid")
    if weights.min() < 0:
        raise ValueError("weights must be nonnegative")
    if not np.any(weights > 0):
        raise SingularSystemError("singular system: no data constraints")
    theta = smooth.theta
    edge_h = 0.5 * (theta[:, :-1] + theta[:, 1:])
    edge_v = 0.5 * (theta[:-1, :] + theta[1:, :])
    diag = weights.copy()
    diag[:, :-1] += edge_h
    diag[:, 1:] += edge_h
    diag[:-1, :] += edge_v
    diag[1:, :] += edge_v
    return DiffusionSystem(
        lam=weights, labels=labels, theta=theta, edge_h=edge_h, edge_v=edge_v,
        diag=diag, rhs=weights * labels,
    )


class _JacobiPreconditioner:
    def __init__(self, diag: np.ndarray):
        self.inv_diag = 1.0 / diag

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.inv_diag * r


class HierarchicalBasisPreconditioner:
    """Additive multilevel diagonal scaling with matrix-adapted interpolation.

    Levels are built by quincunx (red-black) coarsening: at every level the
    nodes with odd coordinate parity are eliminated and interpolated from
    their neighbors in the current Galerkin operator, with weights
    proportional to the (negated) off-diagonal couplings. Applying the
    preconditioner scales the residual by the diagonal on every level of the
    hierarchy and sums the prolonged corrections.
    """

    def __init__(self, a: sp.csr_matrix, shape: tuple[int, int],
                 max_levels: int = 16, min_nodes: int = 64):
        h, w = shape
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        ii, jj = ii.ravel(), jj.ravel()
        self.prolong: list[sp.csr_matrix] = []
        self.inv_diags = [1.0 / a.diagonal()]
        for _ in range(max_levels):
            if a.shape[0] <= min_nodes:
                break
            p, ii, jj = self._interpolation(a, ii, jj)
            if p is None:
                break
            a = (p.T @ a @ p).tocsr()
            self.prolong.append(p)
            self.inv_diags.append(1.0 / a.diagonal())

    @staticmethod
    def _interpolation(a: sp.csr_matrix, ii: np.ndarray, jj: np.ndarray):
        fine = (ii + jj) % 2 == 1
        coarse = ~fine
        n_c = int(coarse.sum())
        if n_c == 0 or n_c == a.shape[0]:
            return None, ii, jj
        cid = np.full(a.shape[0], -1, dtype=np.int64)
        cid[coarse] = np.arange(n_c)
        coo = a.tocoo()
        # fine-row entries pointing at coarse columns, attractive couplings only
        keep = fine[coo.row] & coarse[coo.col] & (coo.data < 0)
        rows, cols, vals = coo.row[keep], cid[coo.col[keep]], -coo.data[keep]
        norm = np.bincount(rows, weights=vals, minlength=a.shape[0])
        ok = norm[rows] > 0
        rows, cols, vals = rows[ok], cols[ok], vals[ok] / norm[rows[ok]]
        c_rows = np.flatnonzero(coarse)
        p = sp.csr_matrix(
            (
                np.concatenate([vals, np.ones(n_c)]),
                (np.concatenate([rows, c_rows]), np.concatenate([cols, np.arange(n_c)])),
            ),
            shape=(a.shape[0], n_c),
        )
        # survivors move to the rotated half-resolution lattice
        si, sj = ii[coarse], jj[coarse]
        return p, (si + sj) // 2, (sj - si + ii.max() + jj.max()) // 2

    def __call__(self, r: np.ndarray) -> np.ndarray:
        shape = r.shape
        levels = [r.ravel()]
        for p in self.prolong:
            levels.append(p.T @ levels[-1])
        z = levels[-1] * self.inv_diags[-1]
        for lvl in range(len(self.prolong) - 1, -1, -1):
            z = self.prolong[lvl] @ z + levels[lvl] * self.inv_diags[lvl]
        return z.reshape(shape)


def _pcg(system: DiffusionSystem, b: np.ndarray, tol: float, max_iter: int,
         precond) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    b_norm = float(np.sqrt(np.dot(b.ravel(), b.ravel())))
    if b_norm == 0.0:
        return x
    z = precond(r)
    p = z.copy()
    rz = float(np.dot(r.ravel(), z.ravel()))
    for _ in range(max_iter):
        ap = system.matvec(p)
        alpha = rz / float(np.dot(p.ravel(), ap.ravel()))
        x += alpha * p
        r -= alpha * ap
        res = float(np.sqrt(np.dot(r.ravel(), r.ravel())))
        if res <= tol * b_norm:
            return x
        z = precond(r)
        rz_new = float(np.dot(r.ravel(), z.ravel()))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolveError(
        f"conjugate gradients: relative residual {res / b_norm:.3e} after {max_iter} iterations "
        f"(requested {tol:.1e})"
    )


def solve(system: DiffusionSystem, tol: float = 1e-8, max_iter: int = 2000,
          preconditioner: str = "hierarchical") -> np.ndarray:
    """Solve the assembled system for the dense depth map.

    Returns D and caches it on the system for :func:`solve_adjoint`.
    """
    d = _pcg(system, system.rhs, tol, max_iter, system.preconditioner(preconditioner))
    system.solution = d
    return d


@dataclass
class AdjointGradients:
    labels: np.ndarray
    weights: np.ndarray
    q: np.ndarray


def solve_adjoint(system: DiffusionSystem, grad_d: np.ndarray, tol: float = 1e-8,
                  max_iter: int = 2000, preconditioner: str = "hierarchical") -> AdjointGradients:
    """Propagate a gradient on D back to the label image, weight image, and Q.

    Solves A u = dL/dD (A is symmetric, so the adjoint system is the forward
    one) and applies the implicit-function rule:

    - dL/dlabels  = lam * u
    - dL/dlam     = u * (labels - D)
    - dL/dQ       = -theta * dL/dtheta, via the edge conductances.
    """
    if system.solution is None:
        raise SolveError("no cached forward solution; call solve() before solve_adjoint()")
    d = system.solution
    grad_d = np.asarray(grad_d, dtype=np.float64)
    if grad_d.shape != system.shape:
        raise ValueError(f"gradient shape {grad_d.shape} != system shape {system.shape}")
    u = _pcg(system, grad_d, tol, max_iter, system.preconditioner(preconditioner))
    g_labels = system.lam * u
    g_lam = u * (system.labels - d)
    # per-edge gradient: dL/de = -(u_a - u_b)(D_a - D_b), split half to each endpoint
    ge_h = -(u[:, :-1] - u[:, 1:]) * (d[:, :-1] - d[:, 1:])
    ge_v = -(u[:-1, :] - u[1:, :]) * (d[:-1, :] - d[1:, :])
    g_theta = np.zeros_like(d)
    g_theta[:, :-1] += 0.5 * ge_h
    g_theta[:, 1:] += 0.5 * ge_h
    g_theta[:-1, :] += 0.5 * ge_v
    g_theta[1:, :] += 0.5 * ge_v
    g_q = -system.theta * g_theta
    return AdjointGradients(labels=g_labels, weights=g_lam, q=g_q)

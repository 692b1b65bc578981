"""Degree-4 symmetric tensors over R^4 and their dominant eigenpairs.

A degree-4 symmetric tensor in dimension 4 has 35 independent components,
stored in the canonical order of sorted multi-indices (i<=j<=k<=l) produced
by combinations_with_replacement. Every module in the package shares this
ordering via INDEX_TUPLES / MULTIPLICITIES.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import factorial

import numpy as np

from .rotations import RotationSet, UnitQuaternion, canonicalize, sample_so3_uniform

INDEX_TABLE_VERSION = 1

INDEX_TUPLES: tuple[tuple[int, int, int, int], ...] = tuple(
    combinations_with_replacement(range(4), 4)
)
N_COMPS = len(INDEX_TUPLES)  # 35 = C(7, 4)


def _multiplicity(idx: tuple[int, ...]) -> int:
    reps = [idx.count(v) for v in set(idx)]
    out = factorial(len(idx))
    for r in reps:
        out //= factorial(r)
    return out


MULTIPLICITIES = np.array([_multiplicity(t) for t in INDEX_TUPLES], dtype=np.float64)
assert N_COMPS == 35 and int(MULTIPLICITIES.sum()) == 256

_COMP_OF = {t: i for i, t in enumerate(INDEX_TUPLES)}
# Component index for every one of the 4^4 unsorted index tuples, in
# row-major (i, j, k, l) order; reshaping to (16, 16) gives the square
# matrix unfolding M[(i,j),(k,l)].
FULL_MAP = np.array(
    [_COMP_OF[tuple(sorted((i, j, k, l)))]
     for i in range(4) for j in range(4) for k in range(4) for l in range(4)],
    dtype=np.intp,
)

# Columns of the index table, for vectorized monomial evaluation.
_T0, _T1, _T2, _T3 = (np.array([t[c] for t in INDEX_TUPLES], dtype=np.intp)
                      for c in range(4))


@dataclass(frozen=True)
class SymTensor4:
    """35 independent components of a degree-4 symmetric tensor over R^4."""

    comps: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.comps, dtype=np.float64)
        if arr.shape != (N_COMPS,):
            raise ValueError(f"expected {N_COMPS} components, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "comps", arr)

    @classmethod
    def zero(cls) -> "SymTensor4":
        return cls(np.zeros(N_COMPS))


@dataclass(frozen=True)
class EigenPair:
    """Dominant eigenvalue/eigenvector of a symmetric tensor."""

    eigenvalue: float
    quaternion: UnitQuaternion
    iterations: int
    converged: bool
    monotone: bool = True


def quartic_monomials(quats: np.ndarray) -> np.ndarray:
    """(N, 35) products q_i q_j q_k q_l over the canonical index table."""
    q = np.asarray(quats, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 4)
    out = q[:, _T0] * q[:, _T1] * q[:, _T2] * q[:, _T3]
    return out[0] if single else out


def sym_power4(q: UnitQuaternion | np.ndarray) -> SymTensor4:
    """Fourth symmetric tensor power of a quaternion."""
    arr = q.as_array() if isinstance(q, UnitQuaternion) else np.asarray(q, dtype=np.float64)
    return SymTensor4(quartic_monomials(arr))


def contract(t: SymTensor4, q: UnitQuaternion | np.ndarray) -> float:
    """Full contraction T . q^(x4), via multiplicity-weighted components."""
    arr = q.as_array() if isinstance(q, UnitQuaternion) else np.asarray(q, dtype=np.float64)
    return float(np.dot(MULTIPLICITIES * t.comps, quartic_monomials(arr)))


def frobenius(t: SymTensor4) -> float:
    """Frobenius norm of the fully expanded 4x4x4x4 tensor."""
    return float(np.sqrt(np.dot(MULTIPLICITIES, t.comps * t.comps)))


def full_tensor(t: SymTensor4) -> np.ndarray:
    """Expand to the dense (4, 4, 4, 4) array."""
    return t.comps[FULL_MAP].reshape(4, 4, 4, 4)


def unfold_square(t: SymTensor4) -> np.ndarray:
    """Square 16x16 matrix unfolding M[(i,j),(k,l)] = T[i,j,k,l]."""
    return t.comps[FULL_MAP].reshape(16, 16)


def _unfold_init(evals: np.ndarray, evecs: np.ndarray) -> np.ndarray:
    """Start vector from iterative eigendecomposition of the unfolding.

    Top |eigenvalue| eigenvector of the 16x16 unfolding, reshaped to 4x4,
    symmetrized, then its top |eigenvalue| eigenvector.
    """
    top = evecs[:, int(np.argmax(np.abs(evals)))].reshape(4, 4)
    top = 0.5 * (top + top.T)
    w2, v2 = np.linalg.eigh(top)
    v = v2[:, int(np.argmax(np.abs(w2)))]
    return v / np.linalg.norm(v)


_MONOTONE_SLACK = 1e-12


def sshopm_batch(unfolding: np.ndarray, starts: np.ndarray, alpha: float,
                 tol: float, max_iters: int):
    """Shifted symmetric higher-order power iteration over a batch of starts.

    Iterates q <- normalize(T q^3 + alpha q) in lockstep for all candidates,
    tracking per-candidate eigenvalue history. Returns final quaternions,
    eigenvalues, first-convergence iterations (-1 if none) and the most
    negative eigenvalue increment seen (monotonicity witness).
    """
    q = np.ascontiguousarray(starts, dtype=np.float64)
    nc = q.shape[0]
    u = (q[:, :, None] * q[:, None, :]).reshape(nc, 16)
    w = u @ unfolding
    g = (w.reshape(nc, 4, 4) * q[:, None, :]).sum(axis=2)
    lam = (g * q).sum(axis=1)
    conv_at = np.full(nc, -1, dtype=np.intp)
    min_delta = np.zeros(nc)
    for it in range(1, max_iters + 1):
        qn = g + alpha * q
        norms = np.linalg.norm(qn, axis=1)
        dead = norms < 1e-300
        if np.any(dead):
            qn[dead] = q[dead]
            norms[dead] = 1.0
        q = qn / norms[:, None]
        u = (q[:, :, None] * q[:, None, :]).reshape(nc, 16)
        w = u @ unfolding
        g = (w.reshape(nc, 4, 4) * q[:, None, :]).sum(axis=2)
        new_lam = (g * q).sum(axis=1)
        delta = new_lam - lam
        min_delta = np.minimum(min_delta, delta)
        newly = (np.abs(delta) <= tol) & (conv_at < 0)
        conv_at[newly] = it
        lam = new_lam
        if np.all(conv_at >= 0):
            break
    return q, lam, conv_at, min_delta


def dominant_eigenpair(t: SymTensor4, n_random_inits: int = 1000,
                       tol: float = 1e-10, max_iters: int = 500,
                       shift_eps: float = 1e-6) -> EigenPair:
    """Dominant eigenpair via SS-HOPM with multi-start initialization.

    The shift is max(0, -lambda_min(unfolding)) + shift_eps, which makes the
    shifted unfolding positive semidefinite. Starts are the unfolding-based
    ("iterative eigendecomposition") candidate plus n_random_inits uniformly
    distributed quaternions; the candidate reaching the largest eigenvalue
    wins. Non-convergence returns the best-so-far with converged=False.
    """
    m16 = unfold_square(t)
    evals, evecs = np.linalg.eigh(m16)
    alpha = max(0.0, -float(evals[0])) + shift_eps
    starts = [_unfold_init(evals, evecs)[None, :]]
    if n_random_inits > 0:
        starts.append(sample_so3_uniform(n_random_inits).quats)
    q0 = np.vstack(starts)
    q, lam, conv_at, min_delta = sshopm_batch(m16, q0, alpha, tol, max_iters)
    best = int(np.argmax(lam))
    scale = max(1.0, abs(float(lam[best])))
    return EigenPair(
        eigenvalue=float(lam[best]),
        quaternion=UnitQuaternion.from_array(canonicalize(q[best]), normalize=True),
        iterations=int(conv_at[best]) if conv_at[best] >= 0 else max_iters,
        converged=bool(conv_at[best] >= 0),
        monotone=bool(min_delta[best] >= -_MONOTONE_SLACK * scale),
    )

"""The tensorial template matching pipeline.

Stages: integrate a normalized template against quaternion fourth powers
over uniformly sampled rotations (tensorial template); correlate an image
against the 35 components (tensorial field, exactly 35 FFT correlations
regardless of angular accuracy); reduce to a scalar peak map (Frobenius
norm); find peaks; recover each peak's rotation as the dominant tensor
eigenpair; optionally refine positions by real-space rescoring in a small
ball around each peak.

Large images are processed in blocks with halos at least one template
radius wide; peak candidates come only from block cores, so circular FFT
wrap-around never reaches a reported score.
"""

from __future__ import annotations

import hashlib
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BlockGeometryError, IntegrationCountError, ShapeError
from .rotations import (RotationSet, UnitQuaternion, _centered_grid, canonicalize,
                        rotate_array, rotate_volume, sample_so3_uniform)
from .symtensor import (INDEX_TABLE_VERSION, MULTIPLICITIES, N_COMPS, SymTensor4,
                        dominant_eigenpair, frobenius, quartic_monomials)
from .volume import (FLAT_EPS, SoftMask, Volume, cross_correlate_fft, local_norm_field,
                     normalize_template, require_cubic_odd, smooth)


class CorrelationCounter:
    """Counts FFT correlations so tests can assert the constant-work property."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.template_correlations = 0
        self.mask_correlations = 0
        self.per_block: list[int] = []

    def reset(self) -> None:
        with self._lock:
            self.template_correlations = 0
            self.mask_correlations = 0
            self.per_block = []

    def add_template(self, n: int = 1) -> None:
        with self._lock:
            self.template_correlations += n

    def add_mask(self, n: int = 1) -> None:
        with self._lock:
            self.mask_correlations += n

    def record_block(self, count: int) -> None:
        with self._lock:
            self.per_block.append(count)


CORRELATION_COUNTER = CorrelationCounter()


@dataclass(frozen=True)
class EigenSettings:
    """Knobs for per-voxel dominant-eigenpair extraction."""

    n_random_inits: int = 1000
    refine_random_inits: int = 1000
    tol: float = 1e-10
    max_iters: int = 500
    shift_eps: float = 1e-6


@dataclass(frozen=True)
class TensorialTemplate:
    """35 template-sized component volumes plus provenance metadata."""

    comps: np.ndarray  # (35, s, s, s)
    normalized: Volume  # t', kept so refinement can rescore without the source
    r_in: float
    r_out: float
    n_integration: int
    generator: str
    source_hash: str
    voxel_size: float
    index_table_version: int = INDEX_TABLE_VERSION

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.comps, dtype=np.float64)
        s = self.normalized.dims[0]
        if arr.shape != (N_COMPS, s, s, s):
            raise ShapeError(f"expected comps shape {(N_COMPS, s, s, s)}, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "comps", arr)

    @property
    def size(self) -> int:
        return self.normalized.dims[0]

    def component(self, i: int) -> Volume:
        return Volume(self.comps[i], voxel_size=self.voxel_size)


@dataclass(frozen=True)
class TensorialField:
    """Per-voxel degree-4 tensor components over an image, plus the w field."""

    comps: np.ndarray  # (35, nx, ny, nz)
    w: Volume

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.comps, dtype=np.float64)
        if arr.shape != (N_COMPS,) + self.w.dims:
            raise ShapeError(f"expected comps shape {(N_COMPS,) + self.w.dims}, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "comps", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w.dims

    def tensor_at(self, pos: tuple[int, int, int]) -> SymTensor4:
        x, y, z = pos
        return SymTensor4(self.comps[:, x, y, z])


@dataclass(frozen=True)
class Peak:
    """A detection: voxel position, pose, and tagged similarity score."""

    pos: tuple[int, int, int]
    score: float
    kind: str = "frobenius"  # "frobenius" | "lncc"
    q: UnitQuaternion | None = None
    block_id: int = -1
    converged: bool | None = None


@dataclass(frozen=True)
class BlockSpec:
    """Core voxel ranges (inclusive) plus halo width for one processing block."""

    core: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    halo: int
    block_id: int = 0

    def outer(self, dims: tuple[int, int, int]) -> tuple[tuple[int, int], ...]:
        return tuple((max(0, lo - self.halo), min(n - 1, hi + self.halo))
                     for (lo, hi), n in zip(self.core, dims))


def template_halo(size: int) -> int:
    """Halo width: half of the template cube diagonal, rounded up.

    Stricter than one template radius, so circular-wrap contamination and
    block-edge smoothing artifacts can never reach a core score.
    """
    return math.ceil(math.sqrt(3.0) * size / 2.0)


def default_excl_radius(m: SoftMask) -> float:
    """Minimum peak separation: the template diameter (twice the mask radius)."""
    return 2.0 * m.r_out


def volume_hash(v: Volume) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(v.dims, dtype=np.int64).tobytes())
    h.update(np.float64(v.voxel_size).tobytes())
    h.update(v.data.astype(np.float32).tobytes())
    return h.hexdigest()


def build_tensorial_template(t: Volume, m: SoftMask, n_samples: int = 50000,
                             min_samples: int = 5000, chunk_size: int = 256,
                             rotations: RotationSet | None = None) -> TensorialTemplate:
    """Integrate the normalized template over uniformly sampled rotations.

    Each component accumulates sum_q k_i(q) * rotate(t', q) over the
    low-discrepancy rotation set, divided by the sample count so the result
    approximates the mean over SO(3). Accumulation order is fixed, so the
    result is bitwise reproducible.
    """
    if n_samples < min_samples:
        raise IntegrationCountError(
            f"n_samples={n_samples} below the integration guard {min_samples}")
    size = require_cubic_odd(t, "template")
    t_norm = normalize_template(t, m)
    if rotations is None:
        rotations = sample_so3_uniform(n_samples)
    quats = rotations.quats[:n_samples]
    grid = _centered_grid(size)
    nvox = size ** 3
    acc = np.zeros((N_COMPS, nvox), dtype=np.float64)
    rotated = np.empty((chunk_size, nvox), dtype=np.float64)
    for start in range(0, n_samples, chunk_size):
        chunk = quats[start:start + chunk_size]
        nc = chunk.shape[0]
        for j in range(nc):
            rotate_array(t_norm.data, chunk[j], grid, out=rotated[j])
        k = quartic_monomials(chunk)  # (nc, 35)
        acc += k.T @ rotated[:nc]
    acc /= n_samples
    return TensorialTemplate(
        comps=acc.reshape(N_COMPS, size, size, size),
        normalized=t_norm,
        r_in=m.r_in,
        r_out=m.r_out,
        n_integration=n_samples,
        generator=rotations.generator,
        source_hash=volume_hash(t),
        voxel_size=t.voxel_size,
    )


def _correlate_components(fs: np.ndarray, comps: np.ndarray, w: np.ndarray,
                          workers: int, counter: CorrelationCounter) -> np.ndarray:
    """w-weighted FFT correlation of the image against every component."""
    out = np.empty((N_COMPS,) + fs.shape, dtype=np.float64)

    def one(i: int) -> None:
        out[i] = w * cross_correlate_fft(fs, comps[i])
        counter.add_template(1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(N_COMPS)))
    else:
        for i in range(N_COMPS):
            one(i)
    return out


def tensorial_field(f: Volume, t: TensorialTemplate, m: SoftMask,
                    workers: int = 1,
                    counter: CorrelationCounter | None = None) -> TensorialField:
    """Correlate the smoothed image against all 35 template components.

    Exactly 35 template-vs-image FFT correlations are performed, independent
    of any angular parameter; two further mask correlations build w.
    """
    if any(ts > fs for ts, fs in zip((t.size,) * 3, f.dims)):
        raise ShapeError(f"image dims {f.dims} smaller than template size {t.size}")
    counter = counter or CORRELATION_COUNTER
    w = local_norm_field(f, m)
    counter.add_mask(2)
    fs = smooth(f).data
    comps = _correlate_components(fs, t.comps, w.data, workers, counter)
    return TensorialField(comps=comps, w=w)


def scalar_map(c: TensorialField) -> Volume:
    """Per-voxel multiplicity-weighted Frobenius norm of the tensor field."""
    acc = np.zeros(c.dims, dtype=np.float64)
    for i in range(N_COMPS):
        acc += MULTIPLICITIES[i] * c.comps[i] * c.comps[i]
    return c.w.with_data(np.sqrt(acc))


def _scalar_map_array(fs: np.ndarray, comps: np.ndarray, w: np.ndarray,
                      workers: int, counter: CorrelationCounter) -> np.ndarray:
    """Frobenius map without retaining the 35 per-voxel components."""
    acc = np.zeros(fs.shape, dtype=np.float64)
    lock = threading.Lock()

    def one(i: int) -> None:
        corr = w * cross_correlate_fft(fs, comps[i])
        counter.add_template(1)
        np.multiply(corr, corr, out=corr)
        with lock:
            acc += MULTIPLICITIES[i] * corr

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(N_COMPS)))
    else:
        for i in range(N_COMPS):
            one(i)
    return np.sqrt(acc)


def find_peaks(chat: Volume | np.ndarray, p: int, excl_radius: float,
               bounds: tuple[tuple[int, int, int], tuple[int, int, int]] | None = None,
               kind: str = "frobenius", block_id: int = -1) -> list[Peak]:
    """Greedy descending-value peak selection with an exclusion distance.

    A candidate is accepted iff its Euclidean distance to every previously
    accepted peak exceeds excl_radius. Ties break by lexicographic voxel
    order. bounds restricts eligibility to an inclusive voxel box.
    """
    if excl_radius < 1:
        raise ValueError(f"excl_radius must be >= 1, got {excl_radius}")
    if p <= 0:
        return []
    arr = chat.data if isinstance(chat, Volume) else np.asarray(chat)
    if bounds is None:
        lo = (0, 0, 0)
        hi = tuple(n - 1 for n in arr.shape)
    else:
        lo, hi = bounds
    sub = arr[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    if sub.size == 0:
        return []
    order = np.argsort(-sub, axis=None, kind="stable")
    coords = np.stack(np.unravel_index(order, sub.shape), axis=1) + np.asarray(lo)
    vals = sub.flat[order]
    accepted: list[Peak] = []
    acc_pos = np.empty((p, 3), dtype=np.float64)
    excl_sq = float(excl_radius) ** 2
    for i in range(coords.shape[0]):
        pos = coords[i]
        n_acc = len(accepted)
        if n_acc and np.min(np.sum((acc_pos[:n_acc] - pos) ** 2, axis=1)) <= excl_sq:
            continue
        acc_pos[n_acc] = pos
        accepted.append(Peak(pos=tuple(int(v) for v in pos), score=float(vals[i]),
                             kind=kind, block_id=block_id))
        if len(accepted) >= p:
            break
    return accepted


def merge_peaks(candidates: list[Peak], p: int, excl_radius: float) -> list[Peak]:
    """Global re-exclusion over per-block candidates: sort, filter, truncate."""
    ordered = sorted(candidates, key=lambda pk: (-pk.score, pk.pos))
    accepted: list[Peak] = []
    excl_sq = float(excl_radius) ** 2
    for cand in ordered:
        pos = np.asarray(cand.pos, dtype=np.float64)
        if any(np.sum((np.asarray(a.pos) - pos) ** 2) <= excl_sq for a in accepted):
            continue
        accepted.append(cand)
        if len(accepted) >= p:
            break
    return accepted


def _solve_pose(comps35: np.ndarray, eigen: EigenSettings,
                n_inits: int) -> tuple[UnitQuaternion, float, bool]:
    """Dominant eigenpair of a gathered per-voxel tensor; zero field
    degenerates to the identity pose flagged non-converged."""
    tensor = SymTensor4(comps35)
    if frobenius(tensor) == 0.0:
        return UnitQuaternion.identity(), 0.0, False
    pair = dominant_eigenpair(tensor, n_random_inits=n_inits, tol=eigen.tol,
                              max_iters=eigen.max_iters, shift_eps=eigen.shift_eps)
    return pair.quaternion, pair.eigenvalue, pair.converged


def assign_rotations(c: TensorialField, peaks: list[Peak],
                     eigen: EigenSettings = EigenSettings()) -> list[Peak]:
    """Attach to each peak the dominant eigenvector of its voxel tensor."""
    out = []
    for pk in peaks:
        q, _, conv = _solve_pose(c.comps[:, pk.pos[0], pk.pos[1], pk.pos[2]],
                                 eigen, eigen.n_random_inits)
        out.append(replace(pk, q=q, converged=conv))
    return out


def _ball_offsets(r_s: int) -> np.ndarray:
    """Integer offsets of the closed ball |d| <= r_s, center first,
    then by (radius, lex) for a deterministic scan order."""
    rng = range(-r_s, r_s + 1)
    offs = [(dx, dy, dz) for dx in rng for dy in rng for dz in rng
            if dx * dx + dy * dy + dz * dz <= r_s * r_s]
    offs.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2 + d[2] ** 2, d))
    return np.asarray(offs, dtype=np.int64)


class _PatchScorer:
    """Real-space LNCC of template-sized patches of the smoothed image."""

    def __init__(self, fs: np.ndarray, t_norm: Volume):
        self.fs = fs
        self.t_norm = t_norm
        self.size = t_norm.dims[0]
        self.rad = (self.size - 1) // 2
        self.grid = _centered_grid(self.size)

    def in_bounds(self, pos: np.ndarray) -> bool:
        return bool(np.all(pos - self.rad >= 0)
                    and np.all(pos + self.rad < np.asarray(self.fs.shape)))

    def patch(self, pos: np.ndarray) -> np.ndarray:
        x, y, z = (int(v) for v in pos)
        r = self.rad
        return self.fs[x - r:x + r + 1, y - r:y + r + 1, z - r:z + r + 1]

    def lncc(self, pos: np.ndarray, w: float, q: UnitQuaternion) -> float:
        rot = rotate_array(self.t_norm.data, q.as_array(), self.grid)
        return w * float(self.patch(pos).ravel() @ rot)


def _refine_one(pk: Peak, tensor_at, w_at, scorer: _PatchScorer,
                offsets: np.ndarray, dims: tuple[int, int, int],
                eigen: EigenSettings) -> Peak:
    best_pos = None
    best_q = UnitQuaternion.identity()
    best_score = -np.inf
    best_conv = False
    center = np.asarray(pk.pos, dtype=np.int64)
    for n, off in enumerate(offsets):
        pos = center + off
        if np.any(pos < 0) or np.any(pos >= np.asarray(dims)):
            continue
        if not scorer.in_bounds(pos):
            continue
        n_inits = eigen.n_random_inits if n == 0 else eigen.refine_random_inits
        q, _, conv = _solve_pose(tensor_at(pos), eigen, n_inits)
        score = scorer.lncc(pos, w_at(pos), q)
        # strict improvement only, so an already-exact center never moves
        if best_pos is None or score > best_score:
            best_pos, best_q, best_score, best_conv = pos, q, score, conv
    if best_pos is None:
        return replace(pk, q=UnitQuaternion.identity(), converged=False)
    return Peak(pos=tuple(int(v) for v in best_pos), score=float(best_score),
                kind="lncc", q=best_q, block_id=pk.block_id, converged=best_conv)


def refine_positions(f: Volume, t_norm: Volume, m: SoftMask, c: TensorialField,
                     peaks: list[Peak], r_s: int = 3,
                     eigen: EigenSettings = EigenSettings()) -> list[Peak]:
    """Local position refinement with real-space rescoring.

    For every voxel in the closed ball of radius r_s around a peak (center
    first, as the incumbent) the dominant eigenpair of the local tensor is
    extracted and the real-space LNCC at that rotation is evaluated; the
    best-scoring voxel wins. r_s = 0 degenerates to rotation assignment
    plus rescoring at the peak voxel.
    """
    if r_s < 0:
        raise ValueError(f"r_s must be >= 0, got {r_s}")
    scorer = _PatchScorer(smooth(f).data, t_norm)
    offsets = _ball_offsets(r_s)
    w_data = c.w.data

    def tensor_at(pos: np.ndarray) -> np.ndarray:
        return c.comps[:, int(pos[0]), int(pos[1]), int(pos[2])]

    def w_at(pos: np.ndarray) -> float:
        return float(w_data[int(pos[0]), int(pos[1]), int(pos[2])])

    return [_refine_one(pk, tensor_at, w_at, scorer, offsets, f.dims, eigen)
            for pk in peaks]


def partition_blocks(dims: tuple[int, int, int], blocks, halo: int,
                     template_size: int) -> list[BlockSpec]:
    """Tile the image into core regions; each core must fit the template.

    blocks: None or 1 for a single block, an int for per-axis block counts,
    or a 3-tuple of per-axis counts.
    """
    if blocks is None:
        counts = (1, 1, 1)
    elif isinstance(blocks, int):
        counts = (blocks,) * 3
    else:
        counts = tuple(int(b) for b in blocks)
    if any(b < 1 for b in counts):
        raise BlockGeometryError(f"block counts must be >= 1, got {counts}")
    if halo < (template_size - 1) // 2:
        raise BlockGeometryError(f"halo {halo} below template radius {(template_size - 1) // 2}")
    edges = []
    for n, b in zip(dims, counts):
        if n // b < template_size:
            raise BlockGeometryError(
                f"block core {n // b} smaller than template size {template_size}")
        cuts = np.linspace(0, n, b + 1).astype(int)
        edges.append([(int(cuts[i]), int(cuts[i + 1] - 1)) for i in range(b)])
    specs = []
    bid = 0
    for rx in edges[0]:
        for ry in edges[1]:
            for rz in edges[2]:
                specs.append(BlockSpec(core=(rx, ry, rz), halo=halo, block_id=bid))
                bid += 1
    return specs


@dataclass
class RunStats:
    """Instrumentation snapshot for one run_ttm invocation."""

    blocks: int = 0
    correlations_per_block: list[int] = field(default_factory=list)
    candidates: int = 0


def run_ttm(f: Volume, t: TensorialTemplate, m: SoftMask, p: int,
            refine: bool = True, r_s: int = 3, excl_radius: float | None = None,
            blocks=None, workers: int = 1,
            eigen: EigenSettings = EigenSettings(),
            counter: CorrelationCounter | None = None,
            stats: RunStats | None = None) -> list[Peak]:
    """Full detection pipeline: block-wise scalar map, global peak merge,
    rotation assignment, optional position refinement.

    Peak eligibility excludes a border margin equal to the halo width, in
    the single-block path too. Per block, up to p candidates are collected
    from the core before the global merge re-applies the exclusion rule.
    Rotation assignment and refinement evaluate per-voxel tensors by
    real-space gathering against the full smoothed image, so the output is
    independent of the block layout.
    """
    counter = counter or CORRELATION_COUNTER
    size = t.size
    halo = template_halo(size)
    margin = halo
    if excl_radius is None:
        excl_radius = default_excl_radius(m)
    specs = partition_blocks(f.dims, blocks, halo, size)
    dims = f.dims
    flat_floor = FLAT_EPS * float(np.max(np.abs(f.data))) ** 2

    candidates: list[Peak] = []
    for spec in specs:
        before = counter.template_correlations
        outer = spec.outer(dims)
        slab = Volume(f.data[outer[0][0]:outer[0][1] + 1,
                             outer[1][0]:outer[1][1] + 1,
                             outer[2][0]:outer[2][1] + 1],
                      voxel_size=f.voxel_size)
        w_b = _local_norm_with_floor(slab, m, flat_floor, counter)
        fs_b = smooth(slab).data
        chat = _scalar_map_array(fs_b, t.comps, w_b, workers, counter)
        lo = tuple(max(spec.core[a][0], margin) - outer[a][0] for a in range(3))
        hi = tuple(min(spec.core[a][1], dims[a] - 1 - margin) - outer[a][0] for a in range(3))
        if any(l > h for l, h in zip(lo, hi)):
            counter.record_block(counter.template_correlations - before)
            continue
        local = find_peaks(chat, p, excl_radius, bounds=(lo, hi),
                           block_id=spec.block_id)
        offset = np.asarray([outer[a][0] for a in range(3)])
        candidates.extend(
            replace(pk, pos=tuple(int(v) for v in (np.asarray(pk.pos) + offset)))
            for pk in local)
        counter.record_block(counter.template_correlations - before)

    merged = merge_peaks(candidates, p, excl_radius)
    if stats is not None:
        stats.blocks = len(specs)
        stats.correlations_per_block = counter.per_block[-len(specs):]
        stats.candidates = len(candidates)

    fs_full = smooth(f).data
    scorer = _PatchScorer(fs_full, t.normalized)
    mask_flat = m.volume.data.ravel()
    comps_flat = t.comps.reshape(N_COMPS, -1)

    def w_at(pos: np.ndarray) -> float:
        patch = scorer.patch(pos).ravel()
        b = float(patch @ mask_flat)
        a = float((patch * patch) @ mask_flat)
        rad = a - b * b / m.mask_sum
        return 0.0 if rad <= flat_floor else 1.0 / math.sqrt(rad)

    def tensor_at(pos: np.ndarray) -> np.ndarray:
        return (comps_flat @ scorer.patch(pos).ravel()) * w_at(pos)

    if refine:
        offsets = _ball_offsets(r_s)
        final = [_refine_one(pk, tensor_at, w_at, scorer, offsets, dims, eigen)
                 for pk in merged]
    else:
        final = []
        for pk in merged:
            q, _, conv = _solve_pose(tensor_at(np.asarray(pk.pos)), eigen,
                                     eigen.n_random_inits)
            final.append(replace(pk, q=q, converged=conv))
    return sorted(final, key=lambda pk: (-pk.score, pk.pos))


def _local_norm_with_floor(f: Volume, m: SoftMask, flat_floor: float,
                           counter: CorrelationCounter) -> np.ndarray:
    """local_norm_field with an externally fixed flat floor (block layout
    must not change the threshold)."""
    fs = smooth(f).data
    mask = m.volume.data
    b = cross_correlate_fft(fs, mask)
    a = cross_correlate_fft(fs * fs, mask)
    counter.add_mask(2)
    radicand = a - b * b / m.mask_sum
    w = np.zeros_like(radicand)
    ok = radicand > flat_floor
    w[ok] = 1.0 / np.sqrt(radicand[ok])
    return w

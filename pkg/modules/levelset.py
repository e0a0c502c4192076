# modules/levelset.py
"""Signed distance functions by Sussman redistancing.

Redistancing runs on the dense box with first-order Godunov upwind
gradients and Jacobi (simultaneous) pseudo-time updates. Box faces use
one-sided differences built from an odd reflection of phi, which is
linear extrapolation by one node.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from modules.sparse_grid import GridGeometry
from utils.errors import InputError

logger = logging.getLogger(__name__)


@dataclass
class DenseField:
    """One scalar per node of a full box, indexed [x, y(, z)]"""
    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.size != self.geometry.dense_node_count:
            raise InputError(
                f"field has {self.data.size} values, geometry needs {self.geometry.dense_node_count}")
        self.data = self.data.reshape(self.geometry.size)

    @classmethod
    def from_function(cls, geometry: GridGeometry, fn: Callable[[np.ndarray], np.ndarray]) -> 'DenseField':
        """Sample fn over node coordinates of shape size + (dims,)"""
        return cls(geometry, np.asarray(fn(geometry.node_coordinates()), dtype=np.float64))

    def copy(self) -> 'DenseField':
        return DenseField(self.geometry, self.data.copy())

    def __getitem__(self, index):
        return self.data[tuple(index)]


@dataclass
class LevelSetOptions:
    """Redistancing controls; tolerances and steps are in units of h"""
    max_iterations: int = 1000
    convergence_tolerance: float = 1e-3
    pseudo_time_step: float = 0.5
    band_width_for_error: float = 4.0
    stop_band_width: float = 6.0

    def __post_init__(self):
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise InputError(f"max_iterations must be an integer >= 1, got {self.max_iterations}")
        if not self.convergence_tolerance > 0:
            raise InputError(f"convergence_tolerance must be > 0, got {self.convergence_tolerance}")
        if not 0 < self.pseudo_time_step <= 1:
            raise InputError(f"pseudo_time_step must lie in (0, 1], got {self.pseudo_time_step}")
        if not self.band_width_for_error > 0:
            raise InputError(f"band_width_for_error must be > 0, got {self.band_width_for_error}")
        if not self.stop_band_width > 0:
            raise InputError(f"stop_band_width must be > 0, got {self.stop_band_width}")
        self.max_iterations = int(self.max_iterations)

    def to_dict(self):
        return asdict(self)


@dataclass
class RedistanceDiagnostics:
    iterations: int
    final_residual: float
    converged: bool
    warning: Optional[str] = None
    elapsed_seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


def smoothed_sign(phi, grad_mag, h):
    """phi / sqrt(phi^2 + |grad phi|^2 h^2); zero where phi is zero"""
    if not h > 0:
        raise InputError(f"h must be > 0, got {h}")
    phi = np.asarray(phi, dtype=np.float64)
    grad_mag = np.asarray(grad_mag, dtype=np.float64)
    denom = np.sqrt(phi * phi + grad_mag * grad_mag * (h * h))
    out = np.divide(phi, denom, out=np.zeros(np.broadcast(phi, denom).shape), where=denom > 0)
    out = np.clip(out, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _axis_slice(ndim: int, axis: int, sl: slice) -> Tuple[slice, ...]:
    index = [slice(None)] * ndim
    index[axis] = sl
    return tuple(index)


def godunov_gradient_field(phi: np.ndarray, spacing: Sequence[float], sign: np.ndarray) -> np.ndarray:
    """First-order Godunov upwind |grad phi| at every node of a dense array"""
    phi = np.asarray(phi, dtype=np.float64)
    sign = np.broadcast_to(np.asarray(sign), phi.shape)
    positive = sign >= 0
    total = np.zeros_like(phi)
    for axis, h in enumerate(spacing):
        if phi.shape[axis] < 2:
            continue
        pad = [(0, 0)] * phi.ndim
        pad[axis] = (1, 1)
        padded = np.pad(phi, pad, mode='reflect', reflect_type='odd')
        forward = (padded[_axis_slice(phi.ndim, axis, slice(2, None))] - phi) / h
        backward = (phi - padded[_axis_slice(phi.ndim, axis, slice(None, -2))]) / h
        outgoing_pos = np.maximum(np.maximum(backward, 0.0) ** 2, np.minimum(forward, 0.0) ** 2)
        outgoing_neg = np.maximum(np.minimum(backward, 0.0) ** 2, np.maximum(forward, 0.0) ** 2)
        total += np.where(positive, outgoing_pos, outgoing_neg)
    return np.sqrt(total)


def _godunov_parallel(phi: np.ndarray, spacing: Sequence[float], sign: np.ndarray,
                      pool: Optional[ThreadPoolExecutor], workers: int) -> np.ndarray:
    """Row-slab split along axis 0; slabs carry a one-node halo"""
    n = phi.shape[0]
    if pool is None or workers < 2 or n < 2 * workers:
        return godunov_gradient_field(phi, spacing, sign)

    bounds = np.linspace(0, n, workers + 1).astype(int)

    def slab(k):
        lo, hi = bounds[k], bounds[k + 1]
        halo_lo, halo_hi = max(lo - 1, 0), min(hi + 1, n)
        part = godunov_gradient_field(phi[halo_lo:halo_hi], spacing, sign[halo_lo:halo_hi])
        return part[lo - halo_lo:part.shape[0] - (halo_hi - hi)]

    return np.concatenate(list(pool.map(slab, range(workers))), axis=0)


def upwind_gradient_magnitude(phi: DenseField, index: Sequence[int], sign_at_index: float) -> float:
    """Godunov upwind |grad phi| at a single node"""
    data = phi.data
    index = tuple(int(i) for i in index)
    center = float(data[index])
    total = 0.0
    for axis, h in enumerate(phi.geometry.spacing):
        n = data.shape[axis]
        if n < 2:
            continue
        i = index[axis]

        def at(j):
            probe = list(index)
            probe[axis] = j
            return float(data[tuple(probe)])

        # linear extrapolation past the box faces
        minus = at(i - 1) if i > 0 else 2.0 * center - at(i + 1)
        plus = at(i + 1) if i < n - 1 else 2.0 * center - at(i - 1)
        forward = (plus - center) / h
        backward = (center - minus) / h
        if sign_at_index >= 0:
            total += max(max(backward, 0.0) ** 2, min(forward, 0.0) ** 2)
        else:
            total += max(min(backward, 0.0) ** 2, max(forward, 0.0) ** 2)
    return math.sqrt(total)


def sussman_redistance(indicator: DenseField, opts: Optional[LevelSetOptions] = None,
                       initial_is_sdf: bool = False,
                       workers: int = 1) -> Tuple[DenseField, RedistanceDiagnostics]:
    """Reshape a level function into a signed distance function.

    The zero level and the sign of every node are preserved. An indicator
    input is scaled by h first; with initial_is_sdf the field is used as is.
    """
    opts = opts or LevelSetOptions()
    geometry = indicator.geometry
    data = np.asarray(indicator.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise InputError("redistancing input contains non-finite values")

    h = geometry.min_spacing
    sign = np.sign(data)
    phi = data.copy() if initial_is_sdf else sign * h
    dt = opts.pseudo_time_step * h
    limit = geometry.diameter if geometry.diameter > 0 else h
    stop_band = opts.stop_band_width * h
    threshold = opts.convergence_tolerance * h

    started = time.perf_counter()
    residual = float('inf')
    converged = False
    iterations = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for iterations in range(1, opts.max_iterations + 1):
            grad = _godunov_parallel(phi, geometry.spacing, sign, pool, workers)
            sigma = smoothed_sign(phi, grad, h)
            delta = dt * sigma * (1.0 - grad)
            updated = np.clip(phi + delta, -limit, limit)

            band = np.abs(updated) <= stop_band
            residual = float(np.abs(updated - phi)[band].max()) if band.any() else 0.0
            phi = updated
            if iterations % 100 == 0:
                logger.debug(f"Redistance iteration {iterations}: residual {residual:.3e}",
                             extra={'iteration': iterations, 'residual': residual})
            if residual < threshold:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    warning = None
    if not converged:
        warning = (f"redistancing stopped after {iterations} iterations with residual "
                   f"{residual:.3e} >= {threshold:.3e}")
        logger.warning(warning)

    elapsed = time.perf_counter() - started
    logger.info(f"Redistanced {geometry.size} box in {iterations} iterations "
                f"(residual {residual:.3e}, {elapsed:.2f}s)")
    diagnostics = RedistanceDiagnostics(iterations=iterations, final_residual=residual,
                                        converged=converged, warning=warning,
                                        elapsed_seconds=elapsed)
    return DenseField(geometry, phi), diagnostics


def band_error_norms(phi: DenseField, exact: Callable[[np.ndarray], np.ndarray],
                     band_width: float) -> Dict[str, float]:
    """L2 (root mean square) and Linf errors over nodes with |exact| <= band_width*h"""
    if not band_width > 0:
        raise InputError(f"band_width must be > 0, got {band_width}")
    reference = np.asarray(exact(phi.geometry.node_coordinates()), dtype=np.float64)
    band = np.abs(reference) <= band_width * phi.geometry.min_spacing
    if not band.any():
        raise InputError("error band contains no nodes")
    errors = np.abs(phi.data - reference)[band]
    return {'L2': float(np.sqrt(np.mean(errors ** 2))), 'Linf': float(errors.max())}


def eikonal_residual_quantile(phi: DenseField, band_width: float = 4.0, quantile: float = 0.9) -> float:
    """Quantile of ||grad phi| - 1| over the band |phi| <= band_width*h"""
    grad = godunov_gradient_field(phi.data, phi.geometry.spacing, np.sign(phi.data))
    band = np.abs(phi.data) <= band_width * phi.geometry.min_spacing
    if not band.any():
        raise InputError("eikonal band contains no nodes")
    return float(np.quantile(np.abs(grad[band] - 1.0), quantile))


# ─── Analytic distance functions ──────────────────────────────────────────────

def ball_sdf(center: Sequence[float], radius: float, inside_positive: bool = True) -> Callable:
    """Exact signed distance to a sphere (circle in 2D)"""
    center = np.asarray(center, dtype=np.float64)

    def sdf(x):
        d = radius - np.linalg.norm(np.asarray(x) - center, axis=-1)
        return d if inside_positive else -d

    return sdf


def plane_sdf(normal: Sequence[float], offset: float = 0.0) -> Callable:
    """Signed distance n.x - offset to a plane; positive on the normal side"""
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)

    def sdf(x):
        return np.asarray(x) @ normal - offset

    return sdf

"""Plane map: extraction, filtering, association, fusion and duplicate merging.

Planes are extracted from an organized depth image by region growing over
coarse cells, associated with map planes through a normal-angle test
combined with either an offset test or an edge-point overlap test, refit by
total least squares after fusion, and periodically merged when two map
planes turn out to describe the same surface.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import f as f_dist

from .geometry import (
    DEPTH_MAX,
    DEPTH_MIN,
    DegenerateInputError,
    Intrinsics,
    PlaneParams,
    PointCloud,
    Pose,
    camera_points,
    to_metric_depth,
    transform_plane,
    valid_depth_mask,
)
from .static_map import movable_mask, voxel_downsample

logger = logging.getLogger(__name__)


@dataclass
class PlaneObservation:
    """A plane segment in camera coordinates.

    ``mask`` marks the segment's pixels; ``fit_tol`` is the largest
    point-to-plane tolerance used to classify its inliers.
    """

    params: PlaneParams
    inliers: np.ndarray
    boundary: np.ndarray
    inlier_ratio: float
    mean_depth: float
    mask: np.ndarray
    fit_tol: float

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class PointMoments:
    """Count, mean and centered scatter matrix of a point set; combinable without the points."""

    count: float
    mean: np.ndarray
    scatter: np.ndarray

    @classmethod
    def of(cls, points: np.ndarray) -> "PointMoments":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls(0.0, np.zeros(3), np.zeros((3, 3)))
        mean = pts.mean(axis=0)
        c = pts - mean
        return cls(float(len(pts)), mean, c.T @ c)

    def __add__(self, other: "PointMoments") -> "PointMoments":
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        scatter = self.scatter + other.scatter + np.outer(delta, delta) * (self.count * other.count / n)
        return PointMoments(n, mean, scatter)

    def plane(self, reference: np.ndarray) -> PlaneParams:
        """Total least squares plane, normal on the side of ``reference``."""
        if self.count < 3:
            raise DegenerateInputError("need at least 3 points to fit a plane")
        evals, evecs = np.linalg.eigh(self.scatter / self.count)
        if evals[1] <= 1e-12 * max(evals[2], 1e-300):
            raise DegenerateInputError("points are collinear")
        normal = evecs[:, 0]
        if normal @ reference < 0:
            normal = -normal
        return PlaneParams(normal, float(-normal @ self.mean))


@dataclass
class PlaneInstance:
    """World-frame map plane.

    ``inliers`` and ``boundary`` are voxel-downsampled for storage and the
    overlap test; ``moments`` summarize every raw inlier ever fused and are
    what the plane is refit from, so downsampling does not reweight the fit
    toward sparse outlying voxels.
    """

    id: int
    params: PlaneParams
    inliers: np.ndarray
    boundary: np.ndarray
    observations: int
    fit_tol: float
    moments: PointMoments | None = None

    def point_moments(self) -> PointMoments:
        return self.moments if self.moments is not None else PointMoments.of(self.inliers)


@dataclass(frozen=True)
class PlaneThresholds:
    beta_deg: float = 10.0
    offset: float = 0.05
    point: float = 0.03
    ratio: float = 0.6

    @classmethod
    def from_config(cls, cfg) -> "PlaneThresholds":
        return cls(cfg.plane_beta_deg, cfg.plane_d_th, cfg.plane_point_th, cfg.plane_ratio_th)


def _oriented(plane: PlaneParams, viewpoint=np.zeros(3)) -> PlaneParams:
    return plane.oriented_towards(viewpoint)


def _downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    if len(points) == 0:
        return points.reshape(0, 3)
    return voxel_downsample(PointCloud(points), leaf).points.copy()


# -- extraction --------------------------------------------------------------


def _cell_stats(pts: np.ndarray, valid: np.ndarray, cs: int):
    hc, wc = valid.shape[0] // cs, valid.shape[1] // cs
    p = pts[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs, 3).transpose(0, 2, 1, 3, 4).reshape(hc, wc, cs * cs, 3)
    m = valid[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs).transpose(0, 2, 1, 3).reshape(hc, wc, cs * cs)
    p = np.where(m[..., None], p, 0.0)
    n = m.sum(axis=-1).astype(np.float64)
    s = p.sum(axis=2)
    ss = np.einsum("hwki,hwkj->hwij", p, p)
    return n, s, ss


def _ray_stats(pts: np.ndarray, valid: np.ndarray, cs: int):
    """Per-cell normal equations of inverse depth regressed on ``(x/z, y/z, 1)``."""
    hc, wc = valid.shape[0] // cs, valid.shape[1] // cs
    p = pts[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs, 3).transpose(0, 2, 1, 3, 4).reshape(hc, wc, cs * cs, 3)
    m = valid[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs).transpose(0, 2, 1, 3).reshape(hc, wc, cs * cs)
    z = np.where(m, p[..., 2], 1.0)
    q = np.where(m[..., None], p / z[..., None], 0.0)
    w = np.where(m, 1.0 / z, 0.0)
    return np.einsum("hwki,hwkj->hwij", q, q), np.einsum("hwki,hwk->hwi", q, w)


def _plane_from_rays(qq: np.ndarray, qw: np.ndarray):
    """Plane ``n . p + d = 0`` with ``d > 0`` from inverse depth normal equations.

    On a plane ``1/z = -(n . (x/z, y/z, 1)) / d``. Depth noise only enters the
    response, so unlike a total least squares fit the normal is not pulled
    toward oblique viewing rays.
    """
    coef = np.linalg.solve(qq, qw[..., None])[..., 0]
    k = np.linalg.norm(coef, axis=-1)
    return -coef / k[..., None], 1.0 / k


def fit_plane_rays(points: np.ndarray) -> PlaneParams:
    """Least squares plane of camera-frame points with depth noise along the viewing rays."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3 or np.any(p[:, 2] <= 0):
        raise DegenerateInputError("need at least 3 points in front of the camera")
    q = p / p[:, 2:3]
    qq = q.T @ q
    if np.linalg.cond(qq) > 1e12:
        raise DegenerateInputError("viewing rays are collinear")
    normal, d = _plane_from_rays(qq, q.T @ (1.0 / p[:, 2]))
    return PlaneParams(normal / np.linalg.norm(normal), float(d))



def _cell_jumps(depth_m: np.ndarray, valid: np.ndarray, cs: int, noise_per_m: float, factor: float) -> np.ndarray:
    """Cells with a depth discontinuity between horizontally or vertically adjacent valid pixels."""
    z = np.where(valid, depth_m, 0.0)
    jump = np.zeros_like(valid)
    for axis in (0, 1):
        a = np.take(z, np.arange(z.shape[axis] - 1), axis=axis)
        b = np.take(z, np.arange(1, z.shape[axis]), axis=axis)
        both = np.take(valid, np.arange(z.shape[axis] - 1), axis=axis) & np.take(valid, np.arange(1, z.shape[axis]), axis=axis)
        th = np.maximum(0.05, factor * math.sqrt(2.0) * noise_per_m * np.minimum(a, b))
        j = both & (np.abs(a - b) > th)
        if axis == 0:
            jump[:-1] |= j
        else:
            jump[:, :-1] |= j
    hc, wc = valid.shape[0] // cs, valid.shape[1] // cs
    return jump[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs).any(axis=(1, 3))


def _cell_folds(pts: np.ndarray, valid: np.ndarray, cs: int, mean: np.ndarray, evecs: np.ndarray,
                alpha: float, floor: float) -> np.ndarray:
    """Cells whose plane residuals are significantly explained by a quadric in the plane coordinates.

    A cell straddling a crease has a small plane RMS but a residual that
    bends with position. The residual is regressed on ``[1, a, b]`` and on
    ``[1, a, b, a^2, ab, b^2]``; the cell is a fold when the nested F test
    rejects at ``alpha`` and the quadric explains more than ``floor`` meters RMS.
    """
    hc, wc = valid.shape[0] // cs, valid.shape[1] // cs
    p = pts[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs, 3).transpose(0, 2, 1, 3, 4).reshape(hc, wc, cs * cs, 3)
    m = valid[: hc * cs, : wc * cs].reshape(hc, cs, wc, cs).transpose(0, 2, 1, 3).reshape(hc, wc, cs * cs)
    m = m.astype(np.float64)
    d = (p - mean[..., None, :]) * m[..., None]
    r, b, a = (np.einsum("hwki,hwi->hwk", d, evecs[..., :, k]) for k in range(3))
    scale = np.sqrt(np.maximum((a * a).sum(-1), 1e-12))[..., None], np.sqrt(np.maximum((b * b).sum(-1), 1e-12))[..., None]
    a, b = a / scale[0], b / scale[1]
    X = np.stack([m, a, b, a * a, a * b, b * b], axis=-1)
    G = np.einsum("hwki,hwkj->hwij", X, X) + 1e-12 * np.eye(6)
    h = np.einsum("hwki,hwk->hwi", X, r)
    lin = np.einsum("hwi,hwi->hw", h[..., :3], np.linalg.solve(G[..., :3, :3], h[..., :3, None])[..., 0])
    quad = np.einsum("hwi,hwi->hw", h, np.linalg.solve(G, h[..., None])[..., 0])
    n = m.sum(axis=-1)
    gain = np.maximum(quad - lin, 0.0)
    rss = np.maximum((r * r).sum(-1) - quad, 1e-30)
    df2 = np.maximum(n - 6, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pval = f_dist.sf((gain / 3) / (rss / df2), 3, df2)
    return (pval < alpha) & (np.sqrt(gain / np.maximum(n, 1)) > floor)


def extract_planes(
    depth_image: np.ndarray,
    intrinsics: Intrinsics,
    cell_size: int = 16,
    cell_rms: float = 0.03,
    angle_deg: float = 15.0,
    grow_distance: float = 0.03,
    min_pixels: int = 500,
    inlier_tol: float = 0.03,
    noise_per_m: float = 0.01,
    cell_min_valid: float = 0.5,
    jump_factor: float = 5.0,
    fold_alpha: float = 1e-3,
    fold_floor: float = 0.001,
    max_boundary: int = 400,
    depth_min: float = DEPTH_MIN,
    depth_max: float = DEPTH_MAX,
) -> list[PlaneObservation]:
    """Segment an organized depth image into planar regions.

    Cells of ``cell_size`` pixels get an RMS residual from a total least
    squares fit and a normal from inverse depth regression (see
    ``_plane_from_rays``). Cells with RMS below ``cell_rms`` are grown into
    regions by normal agreement and centroid-to-plane distance. Regions with fewer than ``min_pixels``
    supporting pixels are dropped; the rest are refit and their inliers
    classified with the tolerance ``max(inlier_tol, 3 * noise_per_m * |d|)``:
    depth noise proportional to z moves a point on the plane along its ray,
    which changes its plane distance by ``noise_per_m * |n . p| = noise_per_m * |d|``.
    Cells containing a depth
    jump between adjacent pixels larger than
    ``max(0.05, jump_factor * sqrt(2) * noise_per_m * z)`` straddle an
    occlusion edge and are never planar, and so are cells flagged by
    the fold test (see ``_cell_folds``) with ``fold_alpha`` and ``fold_floor``.
    """
    depth_m = to_metric_depth(depth_image, intrinsics)
    valid = valid_depth_mask(depth_m, depth_min, depth_max)
    pts = camera_points(np.where(valid, depth_m, 0.0), intrinsics)
    cs = cell_size
    hc, wc = depth_m.shape[0] // cs, depth_m.shape[1] // cs
    if hc == 0 or wc == 0:
        return []
    n, s, ss = _cell_stats(pts, valid, cs)

    ok = n >= max(3, cell_min_valid * cs * cs)
    safe_n = np.where(ok, n, 1.0)
    mean = s / safe_n[..., None]
    cov = ss / safe_n[..., None, None] - mean[..., :, None] * mean[..., None, :]
    evals, evecs = np.linalg.eigh(cov)
    rms = np.sqrt(np.clip(evals[..., 0], 0, None))
    qq, qw = _ray_stats(pts, valid, cs)
    qq[~ok], qw[~ok] = np.eye(3), (0.0, 0.0, 1.0)
    normals, _ = _plane_from_rays(qq, qw)
    planar = ok & (rms < cell_rms) & ~_cell_jumps(depth_m, valid, cs, noise_per_m, jump_factor)
    planar &= ~_cell_folds(pts, valid, cs, mean, evecs, fold_alpha, fold_floor)

    cos_th = math.cos(math.radians(angle_deg))
    label = np.full((hc, wc), -1, dtype=np.int64)
    segments: list[list[tuple[int, int]]] = []
    for flat in np.argsort(np.where(planar, rms, np.inf), axis=None, kind="stable"):
        i, j = divmod(int(flat), wc)
        if not planar[i, j] or label[i, j] >= 0:
            continue
        sid = len(segments)
        cells = [(i, j)]
        label[i, j] = sid
        rqq, rqw = qq[i, j].copy(), qw[i, j].copy()
        rnorm, rd = normals[i, j], float(-normals[i, j] @ mean[i, j])
        queue = deque(cells)
        while queue:
            ci, cj = queue.popleft()
            for ni, nj in ((ci - 1, cj), (ci + 1, cj), (ci, cj - 1), (ci, cj + 1)):
                if not (0 <= ni < hc and 0 <= nj < wc) or not planar[ni, nj] or label[ni, nj] >= 0:
                    continue
                if abs(normals[ni, nj] @ rnorm) < cos_th:
                    continue
                if abs(rnorm @ mean[ni, nj] + rd) >= grow_distance:
                    continue
                label[ni, nj] = sid
                cells.append((ni, nj))
                queue.append((ni, nj))
                rqq, rqw = rqq + qq[ni, nj], rqw + qw[ni, nj]
                rnorm, rd = _plane_from_rays(rqq, rqw)
        segments.append(cells)

    out = []
    for sid, cells in enumerate(segments):
        cell_mask = label == sid
        if n[cell_mask].sum() < min_pixels:
            continue
        pix = np.kron(cell_mask, np.ones((cs, cs), dtype=bool))
        seg = np.zeros_like(valid)
        seg[: hc * cs, : wc * cs] = pix
        seg &= valid
        seg_pts = pts[seg]
        try:
            plane = fit_plane_rays(seg_pts)
            tol = _distance_tol(plane, inlier_tol, noise_per_m)
            inl = np.abs(plane.signed_distance(seg_pts)) < tol
            plane = fit_plane_rays(seg_pts[inl])
        except DegenerateInputError:
            continue
        plane = _oriented(plane)
        tol = _distance_tol(plane, inlier_tol, noise_per_m)
        inl = np.abs(plane.signed_distance(seg_pts)) < tol
        if inl.sum() < 3:
            continue
        inliers = seg_pts[inl]

        pad = np.pad(cell_mask, 1, constant_values=False)
        interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
        edge_cells = cell_mask & ~interior
        edge_pix = np.zeros_like(valid)
        edge_pix[: hc * cs, : wc * cs] = np.kron(edge_cells, np.ones((cs, cs), dtype=bool))
        on_edge = edge_pix[seg][inl]
        boundary = inliers[on_edge] if on_edge.any() else inliers
        if len(boundary) > max_boundary:
            boundary = boundary[:: int(math.ceil(len(boundary) / max_boundary))]
        res = plane.signed_distance(boundary)
        sd = res.std()
        if sd > 0:
            keep = np.abs(res - res.mean()) <= 2.0 * sd
            if keep.any():
                boundary = boundary[keep]

        out.append(
            PlaneObservation(
                params=plane,
                inliers=inliers,
                boundary=boundary,
                inlier_ratio=float(inl.mean()),
                mean_depth=float(inliers[:, 2].mean()),
                mask=seg,
                fit_tol=tol,
            )
        )
    return out


def _distance_tol(plane, inlier_tol: float, noise_per_m: float) -> float:
    return max(inlier_tol, 3.0 * noise_per_m * abs(plane.offset))


def filter_plane(
    obs: PlaneObservation,
    movable_boxes=(),
    max_depth: float = 6.0,
    min_inlier_ratio: float = 0.8,
    max_box_overlap: float = 0.5,
) -> bool:
    """Keep near, well-supported planes that are not mostly covered by movable boxes."""
    if obs.mean_depth >= max_depth or obs.inlier_ratio < min_inlier_ratio:
        return False
    if len(movable_boxes):
        inside = movable_mask(movable_boxes, obs.mask.shape)
        if (inside & obs.mask).sum() >= max_box_overlap * obs.pixel_count:
            return False
    return True


# -- association -------------------------------------------------------------


def association_metrics(
    params_c: PlaneParams, boundary_c: np.ndarray, pose: Pose, plane_w: PlaneParams, point_th: float
) -> tuple[float, float, float]:
    """Normal angle (radians), offset difference and boundary overlap ratio.

    The observation normal is brought to the world frame as ``R^T n_c`` and
    its offset as ``t . n_c + d_c``; when the two normals point in opposite
    directions the observation is flipped before offsets are compared, so
    the offset test agrees with the sign-free angle test.
    """
    n_c = params_c.normal
    n_cw = pose.rotation.T @ n_c
    d_cw = float(pose.translation @ n_c + params_c.offset)
    dot = float(n_cw @ plane_w.normal)
    cosb = min(1.0, abs(dot) / (np.linalg.norm(n_cw) * np.linalg.norm(plane_w.normal)))
    beta = math.acos(cosb)
    if dot < 0:
        d_cw = -d_cw
    d = abs(d_cw - plane_w.offset)
    if len(boundary_c):
        b_w = pose.apply_inverse(boundary_c)
        ratio = float(np.mean(np.abs(b_w @ plane_w.normal + plane_w.offset) < point_th))
    else:
        ratio = 0.0
    return beta, d, ratio


def association_passes(beta: float, d: float, ratio: float, th: PlaneThresholds) -> bool:
    return beta < math.radians(th.beta_deg) and (d < th.offset or ratio > th.ratio)


def associate_plane(
    obs: PlaneObservation, pose: Pose, map_planes: list[PlaneInstance], th: PlaneThresholds = PlaneThresholds()
) -> PlaneInstance | None:
    """Best matching map plane: smallest normal angle, then smallest offset gap."""
    best, best_key = None, None
    for inst in map_planes:
        beta, d, ratio = association_metrics(obs.params, obs.boundary, pose, inst.params, th.point)
        if association_passes(beta, d, ratio, th):
            key = (beta, d)
            if best_key is None or key < best_key:
                best, best_key = inst, key
    return best


# -- update and maintenance ----------------------------------------------------


def _trim(points: np.ndarray, plane: PlaneParams, limit: float) -> np.ndarray:
    if len(points) == 0:
        return points
    return points[np.abs(plane.signed_distance(points)) <= limit]


def new_instance(obs: PlaneObservation, pose: Pose, plane_id: int, leaf: float = 0.02) -> PlaneInstance:
    inliers = pose.apply_inverse(obs.inliers)
    return PlaneInstance(
        id=plane_id,
        params=transform_plane(obs.params, pose),
        inliers=_downsample(inliers, leaf),
        boundary=_downsample(pose.apply_inverse(obs.boundary), leaf),
        observations=1,
        fit_tol=obs.fit_tol,
        moments=PointMoments.of(inliers),
    )


def _fused(inst: PlaneInstance, inliers: np.ndarray, boundary: np.ndarray, moments: PointMoments,
           fit_tol: float, observations: int, leaf: float) -> PlaneInstance:
    inl = _downsample(np.vstack([inst.inliers, inliers]), leaf)
    bnd = _downsample(np.vstack([inst.boundary, boundary]), leaf)
    total = inst.point_moments() + moments
    try:
        params = total.plane(inst.params.normal)
    except DegenerateInputError:
        params = inst.params
    return replace(
        inst,
        params=params,
        inliers=_trim(inl, params, 2 * fit_tol),
        boundary=_trim(bnd, params, 2 * fit_tol),
        observations=observations,
        fit_tol=fit_tol,
        moments=total,
    )


def update_plane(inst: PlaneInstance, obs: PlaneObservation, pose: Pose, leaf: float = 0.02) -> PlaneInstance:
    """Fuse an associated observation and refit by total least squares over all fused inliers."""
    inliers = pose.apply_inverse(obs.inliers)
    return _fused(
        inst,
        inliers,
        pose.apply_inverse(obs.boundary),
        PointMoments.of(inliers),
        max(inst.fit_tol, obs.fit_tol),
        inst.observations + 1,
        leaf,
    )


def merge_missed(
    map_planes: list[PlaneInstance], th: PlaneThresholds = PlaneThresholds(), leaf: float = 0.02
) -> list[PlaneInstance]:
    """Merge pairs of map planes that satisfy the association test until none do.

    The test uses world parameters with an identity pose and the edge points
    of the less observed plane; that plane is absorbed by the other (equal
    counts keep the lower id).
    """
    planes = sorted(map_planes, key=lambda p: p.id)
    identity = Pose.identity()
    while True:
        merged = False
        for i in range(len(planes)):
            for j in range(i + 1, len(planes)):
                a, b = planes[i], planes[j]
                keep, gone = (a, b) if a.observations >= b.observations else (b, a)
                beta, d, ratio = association_metrics(gone.params, gone.boundary, identity, keep.params, th.point)
                if not association_passes(beta, d, ratio, th):
                    continue
                logger.debug("merging plane %d into %d", gone.id, keep.id)
                fused = _fused(keep, gone.inliers, gone.boundary, gone.point_moments(), max(keep.fit_tol, gone.fit_tol),
                               keep.observations + gone.observations, leaf)
                planes = [fused if p.id == keep.id else p for p in planes if p.id != gone.id]
                merged = True
                break
            if merged:
                break
        if not merged:
            return planes


class PlaneMap:
    """Single-writer container for world-frame plane instances."""

    def __init__(self, thresholds: PlaneThresholds = PlaneThresholds(), leaf: float = 0.02):
        self.thresholds = thresholds
        self.leaf = leaf
        self.planes: list[PlaneInstance] = []
        self._next_id = 0
        self.observations_seen = 0

    def __len__(self) -> int:
        return len(self.planes)

    def integrate(self, observations: list[PlaneObservation], pose: Pose) -> list[int]:
        """Associate and fuse observations; returns the plane id each one landed in."""
        ids = []
        for obs in observations:
            self.observations_seen += 1
            match = associate_plane(obs, pose, self.planes, self.thresholds)
            if match is None:
                inst = new_instance(obs, pose, self._next_id, self.leaf)
                self._next_id += 1
                self.planes.append(inst)
            else:
                inst = update_plane(match, obs, pose, self.leaf)
                self.planes = [inst if p.id == match.id else p for p in self.planes]
            ids.append(inst.id)
        return ids

    def maintain(self) -> None:
        before = len(self.planes)
        self.planes = merge_missed(self.planes, self.thresholds, self.leaf)
        if len(self.planes) != before:
            logger.info("merged %d missed plane associations", before - len(self.planes))

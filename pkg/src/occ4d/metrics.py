"""Ray-based near-field depth metrics and chamfer distances.

Every query ray is clamped to the evaluation volume before comparing the
ground-truth and predicted endpoints, so errors only count inside it.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ClassLabel, NO_LABEL, RayBatch, VolumeBounds, slab_intervals, spherical_project_many
from .grid import OccupancyGrid4D
from .renderer import render_rays

CONFIDENCE_THRESHOLD = 0.05
DEFAULT_AZ_BINS = 1024
DEFAULT_EL_BINS = 64
SEARCH_RADIUS_BINS = 2


class MetricError(ValueError):
    pass


class NoEvaluableRays(MetricError):
    pass


class NoNearFieldPoints(MetricError):
    pass


@dataclass
class ClampedPair:
    gt_clamped: float
    pred_clamped: float
    gt_raw: float
    excluded: bool


def clamp_depths(origins, directions, depths, bounds: VolumeBounds):
    """Vectorized clamp. Returns ``(clamped, excluded)``."""
    t_near, t_far, hit = slab_intervals(origins, directions, bounds.min_corner, bounds.max_corner)
    d = np.asarray(depths, dtype=np.float64)
    clamped = np.minimum(np.maximum(d, t_near), t_far)
    return np.where(hit, clamped, np.nan), ~hit


def clamp_ray(origin, direction, depth: float, bounds: VolumeBounds) -> tuple[float, bool]:
    if not depth > 0:
        raise MetricError("depth must be positive")
    c, ex = clamp_depths(np.asarray(origin)[None], np.asarray(direction)[None], [depth], bounds)
    return (math.nan if ex[0] else float(c[0])), bool(ex[0])


@dataclass
class NearFieldErrors:
    l1_mean: float
    absrel_mean: float
    n_eval: int
    n_excluded: int
    per_ray_l1: np.ndarray = field(repr=False, default=None)
    evaluated: np.ndarray = field(repr=False, default=None)


def nearfield_errors(rays: RayBatch, pred_depth, bounds: VolumeBounds) -> NearFieldErrors:
    """Mean clamped L1 and AbsRel (percent). NaN predictions count as excluded."""
    gt = rays.gt_depth
    if np.any(~(gt > 0)):
        raise MetricError("every query ray needs a positive gt_depth")
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt_c, excluded = clamp_depths(rays.origins, rays.directions, gt, bounds)
    pred_c, _ = clamp_depths(rays.origins, rays.directions, pred, bounds)
    excluded = excluded | np.isnan(pred)
    ok = ~excluded
    err = np.abs(gt_c - pred_c)
    n_eval = int(ok.sum())
    if n_eval == 0:
        raise NoEvaluableRays("no evaluable rays")
    l1 = math.fsum(err[ok]) / n_eval
    rel = math.fsum(err[ok] / gt[ok]) / n_eval * 100.0
    return NearFieldErrors(l1, rel, n_eval, int(excluded.sum()), np.where(ok, err, np.nan), ok)


def _check_points(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise MetricError(f"{name} point set is empty")
    return a


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_sqdist(queries: np.ndarray, reference: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(reference).query(queries, k=1)
    return _sqdist(queries, reference[idx])


def chamfer(gt_points, pred_points) -> float:
    gt = _check_points(gt_points, "ground-truth")
    pred = _check_points(pred_points, "predicted")
    a = nearest_sqdist(gt, pred)
    b = nearest_sqdist(pred, gt)
    return math.fsum(a) / (2 * len(gt)) + math.fsum(b) / (2 * len(pred))


def chamfer_nearfield(gt_points, pred_points, bounds: VolumeBounds) -> float:
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = gt[bounds.contains(gt)]
    pred = pred[bounds.contains(pred)]
    if len(gt) == 0 or len(pred) == 0:
        raise NoNearFieldPoints("no points inside the volume")
    return chamfer(gt, pred)


class RangeSurface:
    """Depth queries against a min-range spherical image of a point cloud.

    Azimuth bins cover (-pi, pi] and wrap; elevation bin centers span the
    elevation range of the cloud, first and last centers on its extremes.
    """

    def __init__(self, points, sensor_origin, az_bins: int = DEFAULT_AZ_BINS, el_bins: int = DEFAULT_EL_BINS,
                 search_radius: int = SEARCH_RADIUS_BINS):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.origin = np.asarray(sensor_origin, dtype=np.float64)
        rng_all = np.linalg.norm(pts - self.origin, axis=1)
        pts = pts[rng_all > 0]
        if len(pts) == 0:
            raise MetricError("no points to fit a surface to")
        self.az_bins, self.el_bins, self.search_radius = az_bins, el_bins, search_radius
        az, el, rng = spherical_project_many(pts, self.origin)
        self.az_step = 2 * math.pi / az_bins
        self.el_lo = float(el.min())
        span = float(el.max()) - self.el_lo
        self.el_step = span / (el_bins - 1) if el_bins > 1 and span > 0 else 1e-3
        i = self._az_index(az)
        j = np.clip(np.rint((el - self.el_lo) / self.el_step).astype(np.int64), 0, el_bins - 1)
        image = np.full(el_bins * az_bins, np.inf)
        np.minimum.at(image, j * az_bins + i, rng)
        self.image = image.reshape(el_bins, az_bins)
        self.image[np.isinf(self.image)] = np.nan

    def _az_coord(self, az):
        return (np.asarray(az) + math.pi) / self.az_step - 0.5

    def _az_index(self, az):
        return np.floor(self._az_coord(az) + 0.5).astype(np.int64) % self.az_bins

    def query(self, directions) -> np.ndarray:
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        az, el, _ = spherical_project_many(d)
        u = self._az_coord(az)
        v = (el - self.el_lo) / self.el_step
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        fu, fv = u - i0, v - j0
        num = np.zeros(len(d))
        den = np.zeros(len(d))
        for di, wu in ((0, 1 - fu), (1, fu)):
            for dj, wv in ((0, 1 - fv), (1, fv)):
                ii = (i0 + di) % self.az_bins
                jj = j0 + dj
                inrow = (jj >= 0) & (jj < self.el_bins)
                val = np.full(len(d), np.nan)
                val[inrow] = self.image[jj[inrow], ii[inrow]]
                w = np.where(np.isnan(val), 0.0, wu * wv)
                num += w * np.nan_to_num(val)
                den += w
        out = np.full(len(d), np.nan)
        good = den > 1e-12
        out[good] = num[good] / den[good]
        for k in np.flatnonzero(~good):
            out[k] = self._nearest(u[k], v[k])
        return out

    def _nearest(self, u: float, v: float) -> float:
        r = self.search_radius
        ic, jc = int(math.floor(u + 0.5)), int(math.floor(v + 0.5))
        best, best_d = math.nan, math.inf
        for jj in range(jc - r, jc + r + 1):
            if not 0 <= jj < self.el_bins:
                continue
            for ii in range(ic - r, ic + r + 1):
                val = self.image[jj, ii % self.az_bins]
                if math.isnan(val):
                    continue
                dist = (ii - u) ** 2 + (jj - v) ** 2
                if dist < best_d:
                    best, best_d = val, dist
        return best

    def __call__(self, direction) -> Optional[float]:
        val = self.query(np.asarray(direction)[None])[0]
        return None if math.isnan(val) else float(val)


def fit_range_surface(pred_points, confidences=None, sensor_origin=(0.0, 0.0, 0.0), az_bins: int = DEFAULT_AZ_BINS,
                      el_bins: int = DEFAULT_EL_BINS, confidence_threshold: Optional[float] = CONFIDENCE_THRESHOLD) -> RangeSurface:
    pts = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    if confidences is not None and confidence_threshold is not None:
        pts = pts[np.asarray(confidences, dtype=np.float64).reshape(-1) >= confidence_threshold]
    if len(pts) == 0:
        raise MetricError("prediction is empty after confidence filtering")
    return RangeSurface(pts, sensor_origin, az_bins, el_bins)


# -- reports -----------------------------------------------------------------


@dataclass
class ClassMetrics:
    l1: float
    absrel: float
    chamfer_nearfield: float
    chamfer_vanilla: float
    n_eval: int


@dataclass
class MetricReport:
    l1_mean: float
    absrel_mean: float
    chamfer_nearfield: float
    chamfer_vanilla: float
    n_rays_evaluated: int
    n_rays_excluded: int
    per_class: Optional[dict] = None

    def to_dict(self) -> "OrderedDict[str, object]":
        d = OrderedDict(
            [
                ("l1_m", _sig(self.l1_mean)),
                ("absrel_pct", _sig(self.absrel_mean)),
                ("chamfer_nf_m2", _sig(self.chamfer_nearfield)),
                ("chamfer_vanilla_m2", _sig(self.chamfer_vanilla)),
                ("n_eval", int(self.n_rays_evaluated)),
                ("n_excluded", int(self.n_rays_excluded)),
            ]
        )
        if self.per_class:
            pc = OrderedDict()
            for name in sorted(self.per_class):
                m = self.per_class[name]
                pc[name] = OrderedDict(
                    [
                        ("l1_m", _sig(m.l1)),
                        ("absrel_pct", _sig(m.absrel)),
                        ("chamfer_nf_m2", _sig(m.chamfer_nearfield)),
                        ("chamfer_vanilla_m2", _sig(m.chamfer_vanilla)),
                        ("n_eval", int(m.n_eval)),
                    ]
                )
            d["per_class"] = pc
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def csv_row(self) -> "OrderedDict[str, object]":
        flat = OrderedDict()
        for k, v in self.to_dict().items():
            if k == "per_class":
                for name, m in v.items():
                    for kk, vv in m.items():
                        flat[f"per_class.{name}.{kk}"] = vv
            else:
                flat[k] = v
        return flat


def _sig(x: float):
    """Round to 9 significant digits; NaN becomes ``None`` (JSON null)."""
    if x is None or not math.isfinite(x):
        return None
    return float(f"{x:.9g}")


PointClouds = Sequence[np.ndarray]


@dataclass
class PointCloudPrediction:
    """Per-timestep predicted clouds (world frame) with optional confidences."""

    points: PointClouds
    confidences: Optional[Sequence[np.ndarray]] = None


def _safe_chamfer(fn, *args) -> float:
    try:
        return fn(*args)
    except MetricError:
        return math.nan


def _mean_finite(vals) -> float:
    vals = [v for v in vals if math.isfinite(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def predict_depths(prediction, rays: RayBatch, az_bins: int = DEFAULT_AZ_BINS, el_bins: int = DEFAULT_EL_BINS,
                   confidence_threshold: Optional[float] = CONFIDENCE_THRESHOLD) -> np.ndarray:
    """Answer each query ray; NaN where the prediction has no answer."""
    if isinstance(prediction, OccupancyGrid4D):
        return render_rays(prediction, rays, mode="boundary")
    out = np.full(len(rays), np.nan)
    for t in np.unique(rays.timestep):
        sel = np.flatnonzero(rays.timestep == t)
        conf = None if prediction.confidences is None else prediction.confidences[t]
        origin = rays.origins[sel[0]]
        try:
            surf = fit_range_surface(prediction.points[t], conf, origin, az_bins, el_bins, confidence_threshold)
        except MetricError:
            continue
        out[sel] = surf.query(rays.directions[sel])
    return out


def evaluate_forecast(
    prediction: Union[OccupancyGrid4D, PointCloudPrediction],
    gt_rays: RayBatch,
    bounds: VolumeBounds,
    per_class: bool = False,
    az_bins: int = DEFAULT_AZ_BINS,
    el_bins: int = DEFAULT_EL_BINS,
    confidence_threshold: Optional[float] = CONFIDENCE_THRESHOLD,
) -> MetricReport:
    """Score a forecast against future query rays.

    Chamfer distances are computed per timestep and averaged. For grid
    predictions the predicted cloud is the set of rendered ray endpoints.
    """
    pred_depth = predict_depths(prediction, gt_rays, az_bins, el_bins, confidence_threshold)
    nf = nearfield_errors(gt_rays, pred_depth, bounds)
    gt_pts = gt_rays.endpoints()
    timesteps = np.unique(gt_rays.timestep)

    def pred_cloud(sel, t):
        if isinstance(prediction, OccupancyGrid4D):
            ok = sel[~np.isnan(pred_depth[sel])]
            return gt_rays.origins[ok] + pred_depth[ok, None] * gt_rays.directions[ok]
        pts = np.asarray(prediction.points[t], dtype=np.float64).reshape(-1, 3)
        if prediction.confidences is not None and confidence_threshold is not None:
            pts = pts[np.asarray(prediction.confidences[t]) >= confidence_threshold]
        return pts

    def chamfers(mask):
        nf_vals, van_vals = [], []
        for t in timesteps:
            sel = np.flatnonzero(mask & (gt_rays.timestep == t))
            if len(sel) == 0:
                continue
            pc = pred_cloud(sel, t)
            van_vals.append(_safe_chamfer(chamfer, gt_pts[sel], pc))
            nf_vals.append(_safe_chamfer(chamfer_nearfield, gt_pts[sel], pc, bounds))
        return _mean_finite(nf_vals), _mean_finite(van_vals)

    all_mask = np.ones(len(gt_rays), dtype=bool)
    cd_nf, cd_van = chamfers(all_mask)
    classes = None
    if per_class:
        classes = {}
        for lab in np.unique(gt_rays.class_label):
            if lab == NO_LABEL:
                continue
            mask = gt_rays.class_label == lab
            ok = mask & nf.evaluated
            n = int(ok.sum())
            err = nf.per_ray_l1[ok]
            c_nf, c_van = chamfers(mask)
            classes[ClassLabel(int(lab)).name.lower()] = ClassMetrics(
                math.fsum(err) / n if n else math.nan,
                math.fsum(err / gt_rays.gt_depth[ok]) / n * 100.0 if n else math.nan,
                c_nf,
                c_van,
                n,
            )
    return MetricReport(nf.l1_mean, nf.absrel_mean, cd_nf, cd_van, nf.n_eval, nf.n_excluded, classes)


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Ray-count-weighted mean over clips, in the given order."""
    reports = list(reports)
    if not reports:
        raise MetricError("nothing to aggregate")
    w = [r.n_rays_evaluated for r in reports]
    total = sum(w)

    def wmean(vals, weights):
        pairs = [(v, k) for v, k in zip(vals, weights) if v is not None and math.isfinite(v) and k > 0]
        tw = sum(k for _, k in pairs)
        return math.fsum(v * k for v, k in pairs) / tw if tw else math.nan

    per_class = None
    names = sorted({n for r in reports if r.per_class for n in r.per_class})
    if names:
        per_class = {}
        for name in names:
            ms = [r.per_class[name] for r in reports if r.per_class and name in r.per_class]
            ws = [m.n_eval for m in ms]
            per_class[name] = ClassMetrics(
                wmean([m.l1 for m in ms], ws),
                wmean([m.absrel for m in ms], ws),
                wmean([m.chamfer_nearfield for m in ms], ws),
                wmean([m.chamfer_vanilla for m in ms], ws),
                sum(ws),
            )
    return MetricReport(
        wmean([r.l1_mean for r in reports], w),
        wmean([r.absrel_mean for r in reports], w),
        wmean([r.chamfer_nearfield for r in reports], w),
        wmean([r.chamfer_vanilla for r in reports], w),
        total,
        sum(r.n_rays_excluded for r in reports),
        per_class,
    )

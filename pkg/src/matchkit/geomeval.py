"""Evaluation mathematics: correspondence precision/recall, RANSAC model
fitting (homography, affine, essential matrix), rotation errors, pose
accuracy/AUC, and the PCK registration metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import PairRecord, RelativePose
from .matching import MatchList


@dataclass
class EvalConfig:
    correct_px: float = 3.0
    incorrect_px: float = 5.0
    pose_thresholds_deg: tuple[float, ...] = (5.0, 10.0, 20.0)
    pck_taus: tuple[float, ...] = (0.01, 0.03, 0.05)
    ransac_iters: int = 1000
    inlier_px: float = 3.0           # homography / affine RANSAC
    essential_inlier: float = 1e-3   # Sampson error in normalized coords
    seed: int = 0

    def __post_init__(self):
        if not self.correct_px < self.incorrect_px:
            raise ValueError("correct_px must be below incorrect_px")
        if list(self.pose_thresholds_deg) != sorted(self.pose_thresholds_deg):
            raise ValueError("pose thresholds must be ascending")
        if list(self.pck_taus) != sorted(self.pck_taus):
            raise ValueError("pck taus must be ascending")


# ---------------------------------------------------------------------------
# basic geometry


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ np.asarray(h, dtype=np.float64).T
    return proj[:, :2] / proj[:, 2:3]


def apply_affine(a: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    a = np.asarray(a, dtype=np.float64).reshape(2, 3)
    return pts @ a[:, :2].T + a[:, 2]


def rotation_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0.0, -axis[2], axis[1]],
                   [axis[2], 0.0, -axis[0]],
                   [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle_rad) * kx + (1.0 - math.cos(angle_rad)) * (kx @ kx)


def rotation_error_deg(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Angle of the relative rotation, from the trace."""
    rel = np.asarray(r_est, dtype=np.float64) @ np.asarray(r_gt, dtype=np.float64).T
    cos = (np.trace(rel) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


# ---------------------------------------------------------------------------
# correspondence precision / recall


@dataclass
class PrResult:
    precision: Optional[float]  # None when no match could be classified
    recall: float
    n_correct: int
    n_incorrect: int
    n_band: int
    n_matchable: int


def _match_points(matches: MatchList, pair: PairRecord) -> tuple[np.ndarray, np.ndarray]:
    idx = matches.indices()
    loc_a = np.asarray(pair.set_a.locations, dtype=np.float64)
    loc_b = np.asarray(pair.set_b.locations, dtype=np.float64)
    return loc_a[idx[:, 0]], loc_b[idx[:, 1]]


def correspondence_pr(matches: MatchList, pair: PairRecord, cfg: EvalConfig) -> PrResult:
    """Precision over classified matches (<3px correct, >5px incorrect, the
    band in between ignored) and recall against keypoints of A that have a
    close-enough reprojected partner."""
    loc_a = np.asarray(pair.set_a.locations, dtype=np.float64)
    loc_b = np.asarray(pair.set_b.locations, dtype=np.float64)
    gt = pair.gt_transform
    if isinstance(gt, RelativePose):
        if pair.gt_matches is None:
            raise ValueError("pose ground truth needs explicit gt_matches")
        gt_set = set(map(tuple, pair.gt_matches))
        correct = sum((i, j) in gt_set for i, j, _ in matches.pairs)
        incorrect = len(matches.pairs) - correct
        band = 0
        matchable = len({i for i, _ in gt_set})
    else:
        proj = apply_homography(gt, loc_a) if gt.shape == (3, 3) else apply_affine(gt, loc_a)
        correct = incorrect = band = 0
        if len(matches.pairs):
            pa, pb = _match_points(matches, pair)
            proj_matched = apply_homography(gt, pa) if gt.shape == (3, 3) else apply_affine(gt, pa)
            err = np.linalg.norm(proj_matched - pb, axis=1)
            correct = int((err < cfg.correct_px).sum())
            incorrect = int((err > cfg.incorrect_px).sum())
            band = len(err) - correct - incorrect
        if loc_b.shape[0]:
            dists = np.linalg.norm(proj[:, None, :] - loc_b[None, :, :], axis=2)
            matchable = int((dists.min(axis=1) < cfg.correct_px).sum())
        else:
            matchable = 0
    classified = correct + incorrect
    precision = correct / classified if classified else None
    recall = correct / matchable if matchable else 0.0
    return PrResult(precision, recall, correct, incorrect, band, matchable)


# ---------------------------------------------------------------------------
# homography estimation


@dataclass
class HomographyEstimate:
    ok: bool
    h: Optional[np.ndarray]
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    mean = pts.mean(axis=0)
    scale = math.sqrt(2.0) / max(np.linalg.norm(pts - mean, axis=1).mean(), 1e-12)
    return np.array([[scale, 0.0, -scale * mean[0]],
                     [0.0, scale, -scale * mean[1]],
                     [0.0, 0.0, 1.0]])


def homography_dlt(pts_a: np.ndarray, pts_b: np.ndarray) -> Optional[np.ndarray]:
    """Normalized DLT from >= 4 correspondences; None when degenerate."""
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    n = pts_a.shape[0]
    if n < 4:
        return None
    ta = _hartley_normalization(pts_a)
    tb = _hartley_normalization(pts_b)
    a_n = apply_homography(ta, pts_a)
    b_n = apply_homography(tb, pts_b)
    rows = []
    for (x, y), (u, v) in zip(a_n, b_n):
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    mat = np.asarray(rows)
    _, s, vt = np.linalg.svd(mat)
    if s[-2] < 1e-10:  # rank-deficient constraint set: degenerate configuration
        return None
    h_n = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ h_n @ ta
    if abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def _collinear_triple_present(pts: np.ndarray, tol: float = 1e-8) -> bool:
    n = pts.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                area = abs(u[0] * v[1] - u[1] * v[0])
                if area < tol * max(1.0, np.abs(pts).max() ** 2):
                    return True
    return False


def estimate_homography(pts_a: np.ndarray, pts_b: np.ndarray,
                        cfg: EvalConfig) -> HomographyEstimate:
    """RANSAC with 4-point DLT samples and a full-inlier DLT refit."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = pts_a.shape[0]
    if n < 4:
        return HomographyEstimate(ok=False, h=None)
    rng = np.random.default_rng(cfg.seed)
    best_inliers: Optional[np.ndarray] = None
    best_count = 0
    for _ in range(cfg.ransac_iters):
        idx = rng.choice(n, size=4, replace=False)
        if _collinear_triple_present(pts_a[idx]) or _collinear_triple_present(pts_b[idx]):
            continue
        h = homography_dlt(pts_a[idx], pts_b[idx])
        if h is None:
            continue
        err = np.linalg.norm(apply_homography(h, pts_a) - pts_b, axis=1)
        inliers = err < cfg.inlier_px
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_count < 4:
        return HomographyEstimate(ok=False, h=None)
    h = homography_dlt(pts_a[best_inliers], pts_b[best_inliers])
    if h is None:
        return HomographyEstimate(ok=False, h=None)
    err = np.linalg.norm(apply_homography(h, pts_a) - pts_b, axis=1)
    return HomographyEstimate(ok=True, h=h, inliers=err < cfg.inlier_px)


# ---------------------------------------------------------------------------
# affine estimation and PCK


@dataclass
class AffineEstimate:
    ok: bool
    a: Optional[np.ndarray]
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def affine_lstsq(pts_a: np.ndarray, pts_b: np.ndarray) -> Optional[np.ndarray]:
    n = pts_a.shape[0]
    if n < 3:
        return None
    design = np.hstack([pts_a, np.ones((n, 1))])
    sol, _, rank, _ = np.linalg.lstsq(design, pts_b, rcond=None)
    if rank < 3:
        return None
    return sol.T  # 2x3


def estimate_affine(pts_a: np.ndarray, pts_b: np.ndarray, cfg: EvalConfig) -> AffineEstimate:
    """RANSAC with 3-point minimal samples and a least-squares refit."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = pts_a.shape[0]
    if n < 3:
        return AffineEstimate(ok=False, a=None)
    rng = np.random.default_rng(cfg.seed)
    best_inliers: Optional[np.ndarray] = None
    best_count = 0
    for _ in range(cfg.ransac_iters):
        idx = rng.choice(n, size=3, replace=False)
        a = affine_lstsq(pts_a[idx], pts_b[idx])
        if a is None:
            continue
        err = np.linalg.norm(apply_affine(a, pts_a) - pts_b, axis=1)
        inliers = err < cfg.inlier_px
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_count < 3:
        return AffineEstimate(ok=False, a=None)
    a = affine_lstsq(pts_a[best_inliers], pts_b[best_inliers])
    if a is None:
        return AffineEstimate(ok=False, a=None)
    err = np.linalg.norm(apply_affine(a, pts_a) - pts_b, axis=1)
    return AffineEstimate(ok=True, a=a, inliers=err < cfg.inlier_px)


def pck_test_grid(image_size: tuple[int, int]) -> np.ndarray:
    """The 20 fixed registration test keypoints: a 4x5 grid spanning
    [0.1, 0.9] x [0.1, 0.9] of the image."""
    h, w = image_size
    xs = np.linspace(0.1, 0.9, 5) * w
    ys = np.linspace(0.1, 0.9, 4) * h
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class PckResult:
    ok: bool
    pck: dict[float, float]


def estimate_affine_pck(pts_a: np.ndarray, pts_b: np.ndarray, gt_affine: np.ndarray,
                        image_size: tuple[int, int], cfg: EvalConfig) -> PckResult:
    est = estimate_affine(pts_a, pts_b, cfg)
    if not est.ok:
        return PckResult(ok=False, pck={tau: 0.0 for tau in cfg.pck_taus})
    grid = pck_test_grid(image_size)
    pred = apply_affine(est.a, grid)
    gt = apply_affine(gt_affine, grid)
    dist = np.linalg.norm(pred - gt, axis=1)
    limit = max(image_size)
    return PckResult(ok=True,
                     pck={tau: float((dist < tau * limit).mean()) for tau in cfg.pck_taus})


# ---------------------------------------------------------------------------
# essential matrix and relative pose


def essential_8point(x_a: np.ndarray, x_b: np.ndarray) -> Optional[np.ndarray]:
    """Linear 8-point solve in normalized camera coords with the (s, s, 0)
    singular-value projection; unit Frobenius scale up to sqrt(2)."""
    n = x_a.shape[0]
    if n < 8:
        return None
    a1, a2 = x_a[:, 0], x_a[:, 1]
    b1, b2 = x_b[:, 0], x_b[:, 1]
    mat = np.column_stack([
        b1 * a1, b1 * a2, b1,
        b2 * a1, b2 * a2, b2,
        a1, a2, np.ones(n),
    ])
    _, s, vt = np.linalg.svd(mat)
    if n > 8 and s[-2] < 1e-12:
        return None
    e = vt[-1].reshape(3, 3)
    u, sv, vt = np.linalg.svd(e)
    if sv[1] < 1e-12:
        return None
    mean = (sv[0] + sv[1]) / 2.0
    e = u @ np.diag([mean, mean, 0.0]) @ vt
    return e / np.linalg.norm(e) * math.sqrt(2.0)


def sampson_error(e: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    ha = np.hstack([x_a, np.ones((x_a.shape[0], 1))])
    hb = np.hstack([x_b, np.ones((x_b.shape[0], 1))])
    ex_a = ha @ e.T       # E x_a
    etx_b = hb @ e        # E^T x_b
    num = np.einsum("ij,ij->i", hb, ex_a)
    denom = ex_a[:, 0] ** 2 + ex_a[:, 1] ** 2 + etx_b[:, 0] ** 2 + etx_b[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(denom, 1e-15))


def algebraic_residual(e: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    ha = np.hstack([x_a, np.ones((x_a.shape[0], 1))])
    hb = np.hstack([x_b, np.ones((x_b.shape[0], 1))])
    return np.abs(np.einsum("ij,ij->i", hb, ha @ e.T))


def triangulate_point(x_a: np.ndarray, x_b: np.ndarray, r: np.ndarray,
                      t: np.ndarray) -> np.ndarray:
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, t.reshape(3, 1)])
    a = np.stack([
        x_a[0] * p1[2] - p1[0],
        x_a[1] * p1[2] - p1[1],
        x_b[0] * p2[2] - p2[0],
        x_b[1] * p2[2] - p2[1],
    ])
    _, _, vt = np.linalg.svd(a)
    x = vt[-1]
    return x[:3] / x[3]


def decompose_essential(e: np.ndarray, x_a: np.ndarray,
                        x_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pick the (R, t) candidate with the best cheirality vote."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    candidates = [(u @ w @ vt, t), (u @ w @ vt, -t), (u @ w.T @ vt, t), (u @ w.T @ vt, -t)]
    sample = np.arange(min(50, x_a.shape[0]))
    best = None
    best_votes = -1
    for r_cand, t_cand in candidates:
        votes = 0
        for i in sample:
            point = triangulate_point(x_a[i], x_b[i], r_cand, t_cand)
            z1 = point[2]
            z2 = (r_cand @ point + t_cand)[2]
            if z1 > 0 and z2 > 0:
                votes += 1
        if votes > best_votes:
            best_votes = votes
            best = (r_cand, t_cand)
    r, t = best
    return r, t / np.linalg.norm(t)


@dataclass
class PoseResult:
    ok: bool
    rotation: Optional[np.ndarray]
    translation: Optional[np.ndarray]
    num_inliers: int = 0
    rotation_error_deg: Optional[float] = None

    FAILURE_ERROR_DEG = 180.0  # aggregation convention for failed poses


def normalized_coords(pts: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    inv = np.linalg.inv(np.asarray(intrinsics, dtype=np.float64))
    homog = np.hstack([pts, np.ones((pts.shape[0], 1))]) @ inv.T
    return homog[:, :2] / homog[:, 2:3]


def estimate_pose(pts_a: np.ndarray, pts_b: np.ndarray, intrinsics_a: np.ndarray,
                  intrinsics_b: np.ndarray, cfg: EvalConfig,
                  gt_rotation: Optional[np.ndarray] = None) -> PoseResult:
    """Essential matrix by 8-point RANSAC over normalized coordinates,
    decomposed with a cheirality vote. Needs >= 8 matches."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = pts_a.shape[0]
    if n < 8:
        return PoseResult(ok=False, rotation=None, translation=None)
    x_a = normalized_coords(pts_a, intrinsics_a)
    x_b = normalized_coords(pts_b, intrinsics_b)
    rng = np.random.default_rng(cfg.seed)
    best_inliers: Optional[np.ndarray] = None
    best_count = 0
    for _ in range(cfg.ransac_iters):
        idx = rng.choice(n, size=8, replace=False)
        e = essential_8point(x_a[idx], x_b[idx])
        if e is None:
            continue
        inliers = sampson_error(e, x_a, x_b) < cfg.essential_inlier
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_count < 8:
        return PoseResult(ok=False, rotation=None, translation=None)
    e = essential_8point(x_a[best_inliers], x_b[best_inliers])
    if e is None:
        return PoseResult(ok=False, rotation=None, translation=None)
    inliers = sampson_error(e, x_a, x_b) < cfg.essential_inlier
    r, t = decompose_essential(e, x_a[inliers], x_b[inliers])
    result = PoseResult(ok=True, rotation=r, translation=t, num_inliers=int(inliers.sum()))
    if gt_rotation is not None:
        result.rotation_error_deg = rotation_error_deg(r, gt_rotation)
    return result


def pose_accuracy_and_auc(errors_deg: Sequence[float],
                          thresholds: Sequence[float]) -> tuple[dict, dict]:
    """acc@t = fraction of errors <= t; auc@t = normalized area under the
    trapezoidal cumulative error curve up to t."""
    errors = np.asarray(list(errors_deg), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no pose errors to aggregate")
    if errors.min() < 0.0 or errors.max() > 180.0:
        raise ValueError("pose errors must lie in [0, 180] degrees")
    acc = {float(t): float((errors <= t).mean()) for t in thresholds}
    order = np.sort(errors)
    recall = (np.arange(order.size) + 1.0) / order.size
    xs = np.concatenate([[0.0], order])
    ys = np.concatenate([[0.0], recall])
    auc = {}
    for t in thresholds:
        t = float(t)
        last = int(np.searchsorted(xs, t, side="right"))
        x_curve = np.concatenate([xs[:last], [t]])
        y_curve = np.concatenate([ys[:last], [ys[last - 1]]])
        auc[t] = float(np.trapezoid(y_curve, x_curve) / t)
    return acc, auc

"""Semantic (DSC, NSD) and instance (F1, DSC-TP) evaluation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

SCHEMA = "esica-report-v1"
METRICS = ("dsc", "nsd", "f1", "dsc_tp")


@dataclass
class BinaryMask:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels).astype(bool)
        if self.voxels.ndim != 3:
            raise ContractError(f"mask must be 3-D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")


def _as_mask(m) -> BinaryMask:
    return m if isinstance(m, BinaryMask) else BinaryMask(m)


def _check_pair(a: BinaryMask, b: BinaryMask, spacing: bool = False) -> None:
    if a.voxels.shape != b.voxels.shape:
        raise ContractError(f"mask shapes differ: {a.voxels.shape} vs {b.voxels.shape}")
    if spacing and a.spacing != b.spacing:
        raise ContractError(f"mask spacings differ: {a.spacing} vs {b.spacing}")


def dsc(pred, gt) -> float:
    p, g = _as_mask(pred), _as_mask(gt)
    _check_pair(p, g)
    sp, sg = int(p.voxels.sum()), int(g.voxels.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((p.voxels & g.voxels).sum()) / (sp + sg)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (or the volume)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1),
                                      border_value=0)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _distance_to(surf: np.ndarray, spacing) -> np.ndarray:
    # exact Euclidean distance (mm) from every voxel to the nearest voxel of ``surf``
    return ndimage.distance_transform_edt(~surf, sampling=spacing)


def nsd(pred, gt, tau_mm: float = 2.0, symmetric: bool = True) -> float:
    """Normalized surface Dice at tolerance ``tau_mm``.

    The one-sided variant counts only predicted surface voxels within ``tau_mm``
    of the reference surface.
    """
    p, g = _as_mask(pred), _as_mask(gt)
    _check_pair(p, g, spacing=True)
    ep, eg = not p.voxels.any(), not g.voxels.any()
    if ep and eg:
        return 1.0
    if ep or eg:
        return 0.0
    sp, sg = surface(p.voxels), surface(g.voxels)
    d_to_g = _distance_to(sg, p.spacing)
    hit_p = int((d_to_g[sp] <= tau_mm).sum())
    if not symmetric:
        return hit_p / int(sp.sum())
    d_to_p = _distance_to(sp, p.spacing)
    hit_g = int((d_to_p[sg] <= tau_mm).sum())
    return (hit_p + hit_g) / (int(sp.sum()) + int(sg.sum()))


def connected_components_3d(mask, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label components 1..n in order of each component's smallest linear index."""
    if connectivity not in (6, 26):
        raise ContractError(f"connectivity must be 6 or 26, got {connectivity}")
    vox = _as_mask(mask).voxels
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, n = ndimage.label(vox, structure=structure)
    # the raster scan already numbers by first-visited voxel; enforce it anyway
    if n > 1:
        flat = labels.ravel()
        nz = np.flatnonzero(flat)
        _, first = np.unique(flat[nz], return_index=True)
        order = np.argsort(nz[first])
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, n + 1)
        labels = remap[labels]
    return labels.astype(np.int64), int(n)


# Hungarian matching -------------------------------------------------------------

@dataclass
class InstanceMatch:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)

    def __post_init__(self):
        ps = [p for p, _, _ in self.pairs]
        gs = [g for _, g, _ in self.pairs]
        if len(set(ps)) != len(ps) or len(set(gs)) != len(gs):
            raise ContractError("instance pairs must be one-to-one")


def _min_cost_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Square min-cost assignment by shortest augmenting paths with potentials.

    Returns ``(col_of_row, u, v)`` where ``u``/``v`` are optimal duals.
    """
    n = cost.shape[0]
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)      # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j], way[j] = cur, j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col, u[1:], v[1:]


def _has_perfect_matching(allowed: np.ndarray) -> bool:
    n = allowed.shape[0]
    match_col = [-1] * n

    def augment(i, seen):
        for j in np.flatnonzero(allowed[i]):
            if not seen[j]:
                seen[j] = True
                if match_col[j] < 0 or augment(match_col[j], seen):
                    match_col[j] = i
                    return True
        return False

    return all(augment(i, [False] * n) for i in range(n))


def _lexicographic_optimum(cost: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Among all optimal assignments, the lexicographically smallest column vector."""
    col, u, v = _min_cost_assignment(cost)
    n = cost.shape[0]
    # an assignment is optimal iff it uses only tight edges of an optimal dual
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    result = np.full(n, -1)
    allowed = tight.copy()
    for i in range(n):
        for j in np.flatnonzero(allowed[i]):
            trial = allowed.copy()
            trial[i, :] = False
            trial[i, j] = True
            trial[:, j] = False
            trial[i, j] = True
            if _has_perfect_matching(trial):
                result[i] = j
                allowed = trial
                break
    if (result < 0).any():
        return col
    return result


def hungarian_match(iou_matrix, threshold: float = 0.5) -> InstanceMatch:
    """Maximum-total-IoU one-to-one matching; pairs below ``threshold`` are dropped
    after the assignment.  Ties resolve to the lexicographically smallest pairs."""
    iou = np.asarray(iou_matrix, dtype=np.float64)
    if iou.ndim != 2:
        raise ContractError(f"IoU matrix must be 2-D, got shape {iou.shape}")
    n_pred, n_gt = iou.shape
    if n_pred and n_gt and ((iou < 0).any() or (iou > 1).any() or not np.isfinite(iou).all()):
        raise ContractError("IoU entries must lie in [0, 1]")
    pairs = []
    if n_pred and n_gt:
        n = max(n_pred, n_gt)
        padded = np.zeros((n, n))
        padded[:n_pred, :n_gt] = iou
        col = _lexicographic_optimum(-padded)
        pairs = [(int(i), int(col[i]), float(iou[i, col[i]])) for i in range(n_pred)
                 if col[i] < n_gt and iou[i, col[i]] >= threshold]
    mp = {p for p, _, _ in pairs}
    mg = {g for _, g, _ in pairs}
    return InstanceMatch(pairs, [i for i in range(n_pred) if i not in mp],
                         [j for j in range(n_gt) if j not in mg])


def iou_matrix(pred_labels: np.ndarray, n_pred: int, gt_labels: np.ndarray, gt_ids) -> np.ndarray:
    out = np.zeros((n_pred, len(gt_ids)))
    if n_pred == 0 or not gt_ids:
        return out
    gt_index = {g: k for k, g in enumerate(gt_ids)}
    # contingency table over (pred, gt) label pairs
    inter: dict[tuple[int, int], int] = {}
    both = (pred_labels > 0) & (gt_labels > 0)
    pl, gl = pred_labels[both], gt_labels[both]
    keys, counts = np.unique(np.stack([pl, gl]), axis=1, return_counts=True)
    for (a, b), c in zip(keys.T, counts):
        inter[(int(a), int(b))] = int(c)
    p_sizes = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)
    for (a, b), c in inter.items():
        k = gt_index[b]
        g_size = int((gt_labels == b).sum())
        out[a - 1, k] = c / (p_sizes[a] + g_size - c)
    return out


@dataclass
class InstanceScores:
    f1: float
    dsc_tp: float
    match: InstanceMatch
    no_matches: bool


def instance_scores(pred, gt_labels: np.ndarray, threshold: float = 0.5,
                    connectivity: int = 26) -> InstanceScores:
    p = _as_mask(pred)
    gt_labels = np.asarray(gt_labels)
    if gt_labels.shape != p.voxels.shape:
        raise ContractError(f"gt labels {gt_labels.shape} do not match prediction {p.voxels.shape}")
    pred_labels, n_pred = connected_components_3d(p, connectivity)
    gt_ids = sorted(int(g) for g in np.unique(gt_labels) if g != 0)
    iou = iou_matrix(pred_labels, n_pred, gt_labels, gt_ids)
    match = hungarian_match(iou, threshold)
    tp, fp, fn = len(match.pairs), len(match.unmatched_pred), len(match.unmatched_gt)
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2 * tp / denom
    dices = [dsc(pred_labels == a + 1, gt_labels == gt_ids[b]) for a, b, _ in match.pairs]
    no_matches = not dices
    return InstanceScores(f1, float(np.mean(dices)) if dices else 0.0, match, no_matches)


# reports --------------------------------------------------------------------------

@dataclass
class CaseResult:
    case: str
    dsc: float | None = None
    nsd: float | None = None
    f1: float | None = None
    dsc_tp: float | None = None
    no_matches: bool = False
    pairs: list = field(default_factory=list)


@dataclass
class MetricReport:
    cases: list[CaseResult] = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {}
        for m in METRICS:
            vals = [getattr(c, m) for c in self.cases if getattr(c, m) is not None]
            out[m] = float(np.mean(vals)) if vals else None
        out["n_cases"] = len(self.cases)
        return out

    def to_json(self) -> dict:
        rows = []
        for c in self.cases:
            row = {"case": c.case, **{m: getattr(c, m) for m in METRICS if getattr(c, m) is not None}}
            if c.f1 is not None:
                row["no_matches"] = c.no_matches
                row["pairs"] = [list(p) for p in c.pairs]
            rows.append(row)
        return {"schema": SCHEMA, "cases": rows, "aggregate": self.aggregate()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "metric", "value"])
        for c in self.cases:
            for m in METRICS:
                v = getattr(c, m)
                if v is not None:
                    w.writerow([c.case, m, repr(float(v))])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate_case(name: str, pred, gt_labels: np.ndarray, spacing=(1.0, 1.0, 1.0), tau_mm: float = 2.0,
                  instances: bool = False, symmetric: bool = True) -> CaseResult:
    p = BinaryMask(pred, spacing)
    g = BinaryMask(np.asarray(gt_labels) > 0, spacing)
    res = CaseResult(name, dsc(p, g), nsd(p, g, tau_mm, symmetric))
    if instances:
        s = instance_scores(p, gt_labels)
        res.f1, res.dsc_tp, res.no_matches = s.f1, s.dsc_tp, s.no_matches
        res.pairs = s.match.pairs
    return res

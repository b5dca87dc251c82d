"""Automated click simulation and metrics.

The simulated user always clicks the most interior pixel of the largest
error region: positive on missed foreground, negative on false positive
area. NoC@tau is the first click at which the dice score reaches tau,
capped; unreached cases keep the cap and raise the failure flag instead of
skewing the mean.
"""

from __future__ import annotations

import json
import sys
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .engine import InteractiveSession, binarize
from .errors import (
    DatasetEmptyError,
    EmptyGtError,
    NoErrorRegionError,
    ShapeMismatchError,
)
from .prompts import Click, load_image

REPORT_CLICK_POINTS = (1, 2, 3, 5, 10)


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice score 2|A∩B| / (|A|+|B|); two empty masks count as a perfect 1."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"dsc shapes {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def connected_components(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    """4-connected components, largest first; ties break on the smallest
    (row, col) pixel a component contains."""
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    seen = np.zeros_like(m)
    comps = []
    for r in range(h):
        for c in range(w):
            if not m[r, c] or seen[r, c]:
                continue
            comp = set()
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                cr, cc = queue.popleft()
                comp.add((cr, cc))
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < h and 0 <= nc < w and m[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            comps.append(comp)
    comps.sort(key=lambda comp: (-len(comp), min(comp)))
    return comps


def interior_point(component, h: int, w: int) -> tuple[int, int, float]:
    """The component pixel farthest from its boundary (image border counts
    as boundary), with lexicographic tie-breaking. Returns (row, col, dist)."""
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    for r, c in component:
        padded[r + 1, c + 1] = True
    edt = distance_transform_edt(padded)[1:-1, 1:-1]
    edt[~padded[1:-1, 1:-1]] = -1.0
    flat = int(np.argmax(edt))  # first max in row-major order = smallest (row, col)
    r, c = divmod(flat, w)
    return r, c, float(edt[r, c])


def next_click(pred: np.ndarray, gt: np.ndarray) -> Click:
    """Simulate the next user click from the current error.

    Largest 4-connected component of pred XOR gt, clicked at its most
    interior pixel; polarity follows that pixel: positive where foreground
    was missed, negative where background was claimed.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"next_click shapes {pred.shape} vs {gt.shape}")
    error = pred ^ gt
    if not error.any():
        raise NoErrorRegionError("prediction equals ground truth")
    h, w = error.shape
    comp = connected_components(error)[0]
    r, c, _ = interior_point(comp, h, w)
    polarity = "positive" if gt[r, c] else "negative"
    return Click(x=c, y=r, polarity=polarity)


@dataclass
class SimulationResult:
    """Per-case record of one simulated click session."""

    dscs: list[float]  # dice after clicks 1..cap
    clicks: list[Click]
    rough_dsc: float | None = None  # cold first-pass mask, when exposed
    warm_dsc: float | None = None  # mask actually returned for click 1


def simulate_case(session_factory, image: np.ndarray, gt: np.ndarray, cap: int = 10) -> SimulationResult:
    """Drive one session with simulated clicks until cap or exact match."""
    gt = np.asarray(gt).astype(bool)
    if not gt.any():
        raise EmptyGtError("ground truth mask is empty")
    session = session_factory(image, gt)
    empty = np.zeros_like(gt)
    first = next_click(empty, gt)
    mask = session.add_click(first)
    clicks = [first]
    scores = [dsc(binarize(mask)[0], gt)]
    rough = getattr(session, "rough_mask", None)
    rough_dsc = dsc(binarize(rough)[0], gt) if rough is not None else None
    while len(scores) < cap:
        pred = binarize(mask)[0].astype(bool)
        if np.array_equal(pred, gt):
            scores.append(1.0)
            continue
        click = next_click(pred, gt)
        mask = session.add_click(click)
        clicks.append(click)
        scores.append(dsc(binarize(mask)[0], gt))
    return SimulationResult(dscs=scores, clicks=clicks, rough_dsc=rough_dsc, warm_dsc=scores[0])


def noc_from_curve(dscs, tau: float, cap: int) -> tuple[int, bool]:
    for i, v in enumerate(dscs[:cap], start=1):
        if v >= tau:
            return i, True
    return cap, False


def noc(session_factory, image, gt, tau: float, cap: int = 10) -> tuple[int, bool]:
    """Number of clicks to reach dice >= tau; (cap, False) when never reached."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0,1], got {tau}")
    result = simulate_case(session_factory, image, gt, cap=cap)
    return noc_from_curve(result.dscs, tau, cap)


def engine_session_factory(model):
    def factory(image, gt):
        return InteractiveSession(model, image, gt=gt)

    return factory


# -- dataset benchmark -----------------------------------------------------


@dataclass
class CaseRecord:
    case_id: str
    dscs: list[float]
    noc: dict[str, int]
    reached: dict[str, bool]
    rough_dsc: float | None
    warm_dsc: float | None

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "dsc_per_click": self.dscs,
            "noc": self.noc,
            "reached": self.reached,
            "rough_dsc": self.rough_dsc,
            "warm_dsc": self.warm_dsc,
        }


@dataclass
class BenchmarkReport:
    cases: list[CaseRecord]
    cap: int
    taus: list[float]
    skipped: list[str] = field(default_factory=list)

    def aggregate(self) -> dict:
        points = [p for p in REPORT_CLICK_POINTS if p <= self.cap]
        dsc_mean, dsc_std = {}, {}
        for p in points:
            vals = [c.dscs[p - 1] for c in self.cases]
            dsc_mean[str(p)] = float(np.mean(vals))
            dsc_std[str(p)] = float(np.std(vals))
        noc_mean, noc_std, failure_rate = {}, {}, {}
        for tau in self.taus:
            key = f"{tau:g}"
            counts = [c.noc[key] for c in self.cases]
            noc_mean[key] = float(np.mean(counts))
            noc_std[key] = float(np.std(counts))
            failure_rate[key] = float(np.mean([0.0 if c.reached[key] else 1.0 for c in self.cases]))
        return {
            "n_cases": len(self.cases),
            "cap": self.cap,
            "taus": [f"{t:g}" for t in self.taus],
            "dsc_mean": dsc_mean,
            "dsc_std": dsc_std,
            "noc_mean": noc_mean,
            "noc_std": noc_std,
            "failure_rate": failure_rate,
            "skipped": len(self.skipped),
        }

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w") as fh:
            for case in self.cases:
                fh.write(json.dumps(case.to_json()) + "\n")
        with open(out / "summary.json", "w") as fh:
            json.dump(self.aggregate(), fh, indent=2)


def discover_cases(dataset_dir) -> list[tuple[str, Path, Path]]:
    root = Path(dataset_dir)
    cases = []
    for img in sorted(root.glob("*.img.pgm")):
        case_id = img.name[: -len(".img.pgm")]
        gt = root / f"{case_id}.gt.pgm"
        if gt.exists():
            cases.append((case_id, img, gt))
    return cases


def run_benchmark(dataset_dir, model, cap: int = 10, taus=(0.85, 0.90), out_dir=None) -> BenchmarkReport:
    """Simulate every case in the dataset; optionally write report files."""
    cases = discover_cases(dataset_dir)
    if not cases:
        raise DatasetEmptyError(f"no <case>.img.pgm/<case>.gt.pgm pairs under {dataset_dir}")
    taus = list(taus)
    factory = engine_session_factory(model)
    report = BenchmarkReport(cases=[], cap=cap, taus=taus)
    expected = (1, model.config.input_size, model.config.input_size)
    for case_id, img_path, gt_path in cases:
        try:
            image = load_image(img_path.read_bytes(), "PGM")
            gt_img = load_image(gt_path.read_bytes(), "PGM")
            if image.shape != expected or gt_img.shape != expected:
                raise ShapeMismatchError(f"{case_id}: {image.shape} vs model {expected}")
            gt = gt_img.numpy()[0] >= 0.5
            result = simulate_case(factory, image.numpy(), gt, cap=cap)
        except Exception as e:  # skip the case, keep the run going
            print(f"warning: skipping case {case_id}: {e}", file=sys.stderr)
            report.skipped.append(case_id)
            continue
        noc_counts, reached = {}, {}
        for tau in taus:
            count, ok = noc_from_curve(result.dscs, tau, cap)
            noc_counts[f"{tau:g}"] = count
            reached[f"{tau:g}"] = ok
        report.cases.append(
            CaseRecord(
                case_id=case_id,
                dscs=result.dscs,
                noc=noc_counts,
                reached=reached,
                rough_dsc=result.rough_dsc,
                warm_dsc=result.warm_dsc,
            )
        )
    if not report.cases:
        raise DatasetEmptyError("every case failed to load")
    if out_dir is not None:
        report.write(out_dir)
    return report

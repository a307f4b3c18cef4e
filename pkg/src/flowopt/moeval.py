"""Multi-objective and distributional evaluation metrics.

All metrics here are pure functions of their inputs plus explicit seeds (the
random projection matrix and the bootstrap resampler). Hypervolume is exact
and restricted to 2 objectives; higher dimensions are deliberately
unsupported rather than approximated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import toyset
from .errors import (ContractViolation, DegenerateRangeError, NumericFailure,
                     UnsupportedDimensionError)
from .rng import Rng

MAXIMIZE, MINIMIZE = "max", "min"
DEFAULT_DIRECTIONS = (MAXIMIZE, MINIMIZE)  # (p1, p2)

EMBED_DIM = 32
DESCRIPTOR_NAMES = ("length", "branch_depth", "side_groups", "skeleton_length",
                    "popcount", "p1", "p2")


def _to_max(points: np.ndarray, directions) -> np.ndarray:
    """Flip minimized objectives so everything is maximization."""
    pts = np.array(points, dtype=np.float64)
    for j, d in enumerate(directions):
        if d == MINIMIZE:
            pts[:, j] = -pts[:, j]
        elif d != MAXIMIZE:
            raise ContractViolation(f"unknown direction {d!r}")
    return pts


def dominates(a, b, directions=DEFAULT_DIRECTIONS) -> bool:
    """Direction-aware Pareto dominance: a >= b everywhere, > somewhere."""
    a = _to_max(np.atleast_2d(a), directions)[0]
    b = _to_max(np.atleast_2d(b), directions)[0]
    return bool(np.all(a >= b) and np.any(a > b))


@dataclass
class ParetoFront:
    """Non-dominated points with back-references into the source array."""

    points: np.ndarray       # (m, n_obj), original direction convention
    indices: np.ndarray      # (m,) indices into the input point set
    directions: tuple = DEFAULT_DIRECTIONS


def pareto_front(points, directions=DEFAULT_DIRECTIONS) -> ParetoFront:
    """Exact non-dominated subset via a 2-pass lexicographic sweep.

    Equal points are deduplicated; output order is canonical (first
    objective best-first after transform, stable on ties).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        raise ContractViolation("pareto_front requires at least one point")
    t = _to_max(pts, directions)
    if t.shape[1] != 2:
        # General fallback: O(n^2) dominance filter.
        keep = []
        for i in range(len(t)):
            dominated = any(np.all(t[j] >= t[i]) and np.any(t[j] > t[i]) for j in range(len(t)))
            duplicate = any(np.array_equal(t[j], t[i]) for j in keep)
            if not dominated and not duplicate:
                keep.append(i)
        idx = np.array(keep, dtype=np.int64)
        return ParetoFront(points=pts[idx], indices=idx, directions=tuple(directions))
    order = np.lexsort((-t[:, 1], -t[:, 0]))  # x desc, then y desc
    keep, best_y, last = [], -np.inf, None
    for i in order:
        x, y = t[i]
        if y > best_y and (last is None or (x, y) != last):
            keep.append(i)
            best_y = y
            last = (x, y)
    idx = np.array(keep, dtype=np.int64)
    return ParetoFront(points=pts[idx], indices=idx, directions=tuple(directions))


def hypervolume_2d(points, ref, directions=DEFAULT_DIRECTIONS):
    """Exact dominated area for 2 objectives, bounded by ``ref``.

    Accepts any point set (the non-dominated subset is taken internally).
    Points that do not dominate the reference are excluded; the number
    excluded is returned alongside in ``hypervolume_2d_with_warnings``.
    """
    hv, _ = hypervolume_2d_with_warnings(points, ref, directions)
    return hv


def hypervolume_2d_with_warnings(points, ref, directions=DEFAULT_DIRECTIONS):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 2:
        raise UnsupportedDimensionError("hypervolume is implemented for exactly 2 objectives")
    t = _to_max(pts, directions)
    r = _to_max(np.atleast_2d(ref), directions)[0]
    inside = np.all(t > r, axis=1)
    warnings = int(len(t) - inside.sum())
    t = t[inside]
    if len(t) == 0:
        return 0.0, warnings
    front = pareto_front(t, (MAXIMIZE, MAXIMIZE)).points
    order = np.argsort(-front[:, 0])
    hv, prev_y = 0.0, r[1]
    for x, y in front[order]:
        hv += (x - r[0]) * (y - prev_y)
        prev_y = y
    return float(hv), warnings


def hvi(baseline, optimized, ref, directions=DEFAULT_DIRECTIONS) -> float:
    """Hypervolume gained by adding optimized points to the baseline front."""
    base = np.atleast_2d(np.asarray(baseline, dtype=np.float64))
    opt = np.atleast_2d(np.asarray(optimized, dtype=np.float64))
    hv_base = hypervolume_2d(base, ref, directions)
    hv_union = hypervolume_2d(np.vstack([base, opt]), ref, directions)
    return max(0.0, hv_union - hv_base)


def auto_reference(points, directions=DEFAULT_DIRECTIONS, margin: float = 0.1) -> np.ndarray:
    """Worst observed value per objective pushed ``margin``*range further."""
    if margin < 0:
        raise ContractViolation("margin must be >= 0")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        raise ContractViolation("auto_reference requires points")
    ref = np.empty(pts.shape[1])
    for j, d in enumerate(directions):
        lo, hi = pts[:, j].min(), pts[:, j].max()
        rng_j = hi - lo
        if rng_j == 0:
            raise DegenerateRangeError(f"objective {j} has zero range; supply an explicit reference")
        ref[j] = lo - margin * rng_j if d == MAXIMIZE else hi + margin * rng_j
    return ref


def bootstrap_ci(metric_fn, samples, resamples: int, level: float, rng: Rng) -> tuple:
    """Percentile bootstrap interval for ``metric_fn`` over ``samples``."""
    samples = list(samples)
    if len(samples) == 0:
        raise ContractViolation("bootstrap over an empty sample")
    if resamples < 1 or not (0.0 < level < 1.0):
        raise ContractViolation("resamples >= 1 and level in (0, 1) required")
    stats = np.empty(resamples)
    gen = rng.split("bootstrap").gen
    n = len(samples)
    for r in range(resamples):
        idx = gen.integers(0, n, n)
        stats[r] = metric_fn([samples[i] for i in idx])
    alpha = (1.0 - level) / 2.0
    return (float(np.quantile(stats, alpha)), float(np.quantile(stats, 1.0 - alpha)))


def set_metrics(generated, train_keys) -> dict:
    """Validity / uniqueness / novelty / skeleton diversity fractions.

    ``generated`` is a list of decoded Structures; validity is 1.0 by
    grammar construction whenever the list is nonempty.
    """
    n = len(generated)
    if n == 0:
        return {"validity": 0.0, "uniqueness": 0.0, "novelty": 0.0, "skeleton_diversity": 0.0}
    keys = [s.canonical_key for s in generated]
    skels = [s.skeleton_key for s in generated]
    unique = set(keys)
    train_keys = set(train_keys)
    novel = {k for k in unique if k not in train_keys}
    return {
        "validity": 1.0,
        "uniqueness": len(unique) / n,
        "novelty": len(novel) / len(unique),
        "skeleton_diversity": len(set(skels)) / n,
    }


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-fit Fréchet (FID-style) distance between embedding sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the matrix square
    root uses a symmetric eigendecomposition of S_a^{1/2} S_b S_a^{1/2}.
    Eigenvalues below -1e-8 raise; small negatives are clamped to zero.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ContractViolation("each embedding set needs at least 2 points")
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("embedding dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.cov(a, rowvar=False)
    sb = np.cov(b, rowvar=False)
    sa, sb = np.atleast_2d(sa), np.atleast_2d(sb)

    def _clamp(vals, what):
        if np.any(vals < -1e-8):
            raise NumericFailure(f"negative eigenvalue in {what}: {vals.min()}")
        return np.clip(vals, 0.0, None)

    wa, va = np.linalg.eigh(sa)
    wa = _clamp(wa, "covariance A")
    sa_half = (va * np.sqrt(wa)) @ va.T
    m = sa_half @ sb @ sa_half
    wm = _clamp(np.linalg.eigh(0.5 * (m + m.T))[0], "cross term")
    tr_sqrt = 2.0 * np.sqrt(wm).sum()
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(sa) + np.trace(sb) - tr_sqrt)
    return max(0.0, fd)


def embedding_projection(seed: int, in_dim: int = toyset.FEATURE_BITS,
                         out_dim: int = EMBED_DIM) -> np.ndarray:
    """Seeded random Gaussian projection matrix for fingerprint embeddings."""
    return Rng(seed).split("projection").normal((in_dim, out_dim)) / np.sqrt(out_dim)


def structure_embeddings(structures, projection: np.ndarray) -> np.ndarray:
    feats = np.stack([s.features.astype(np.float64) for s in structures])
    return feats @ projection


def descriptor_values(structures) -> dict:
    """Seven toy descriptors per structure, mirroring the report schema."""
    cols = {name: [] for name in DESCRIPTOR_NAMES}
    for s in structures:
        st = toyset.structure_stats(s)
        props = toyset.oracle_properties(s)
        cols["length"].append(st["length"])
        cols["branch_depth"].append(st["branch_depth"])
        cols["side_groups"].append(st["side_groups"])
        cols["skeleton_length"].append(st["skeleton_length"])
        cols["popcount"].append(int(s.features.sum()))
        cols["p1"].append(props.p1)
        cols["p2"].append(props.p2)
    return {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}


def histogram_kl(gen_vals: np.ndarray, ref_vals: np.ndarray, bins: int = 50,
                 eps: float = 1e-10) -> float:
    """KL(gen || ref) over shared bins from the reference range.

    Generated values outside the reference range are clamped into the edge
    bins. Both histograms get additive smoothing ``eps``.
    """
    lo, hi = float(ref_vals.min()), float(ref_vals.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    g = np.clip(gen_vals, lo, hi)
    r = np.clip(ref_vals, lo, hi)
    p = np.histogram(g, bins=edges)[0] / len(g) + eps
    q = np.histogram(r, bins=edges)[0] / len(r) + eps
    return float(np.sum(p * np.log(p / q)))


def descriptor_kl(generated, reference, bins: int = 50) -> dict:
    """Per-descriptor KL divergences plus their average."""
    if len(generated) == 0 or len(reference) == 0:
        raise ContractViolation("descriptor_kl requires nonempty sets")
    gen_d = descriptor_values(generated)
    ref_d = descriptor_values(reference)
    out = {name: histogram_kl(gen_d[name], ref_d[name], bins=bins)
           for name in DESCRIPTOR_NAMES}
    out["average"] = float(np.mean([out[n] for n in DESCRIPTOR_NAMES]))
    return out


@dataclass
class EvalReport:
    """Single-document evaluation summary; serialized as versioned JSON."""

    schema_version: int = 1
    seed: int = 0
    hv: float = 0.0
    hvi: float = 0.0
    hvi_pct: float = 0.0
    hv_ci: tuple = (0.0, 0.0)
    reference_point: tuple = (0.0, 0.0)
    excluded_points: int = 0
    validity: float = 0.0
    uniqueness: float = 0.0
    novelty: float = 0.0
    skeleton_diversity: float = 0.0
    frechet: float = 0.0
    descriptor_kl: dict = field(default_factory=dict)
    surrogate_mse: list = field(default_factory=list)
    surrogate_r2: list = field(default_factory=list)
    projection_seed: int = 0
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        doc["hv_ci"] = tuple(doc["hv_ci"])
        doc["reference_point"] = tuple(doc["reference_point"])
        return cls(**doc)


def front_csv(front: ParetoFront, keys) -> str:
    """CSV export of a 2-objective front: ``p1,p2,canonical_key``."""
    lines = ["p1,p2,canonical_key"]
    for (p1, p2), i in zip(front.points, front.indices):
        lines.append(f"{float(p1)!r},{float(p2)!r},{keys[int(i)]}")
    return "\n".join(lines) + "\n"

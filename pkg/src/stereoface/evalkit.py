"""Open-set verification metrics.

Every unordered pair of test samples is scored once by cosine similarity:
same-subject pairs are genuine, the rest impostors.  Pair counts grow
quadratically, so scoring runs in row shards.  The accumulator keeps all
genuine scores (needed for attribute breakdowns), the exact top tail of
impostor scores (enough for exact thresholds at the requested FPRs) and
fixed-edge histograms for the ROC sweep.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .recognet import similarity_matrix

DESK_FPRS = (1e-2, 1e-3, 1e-4)
PAPER_FPRS = (1e-5, 2e-6, 1e-6)
LIGHT_BINS = ("L", "C", "R")


@dataclass(frozen=True)
class PairScore:
    score: float
    genuine: bool
    attrs: tuple  # yaw_a, yaw_b, pitch_a, pitch_b, light_a, light_b


@dataclass
class PairShard:
    i: np.ndarray
    j: np.ndarray
    score: np.ndarray
    genuine: np.ndarray


def count_pairs(labels: Sequence[int]) -> tuple[int, int]:
    """Closed-form (genuine, impostor) pair counts."""
    _, sizes = np.unique(np.asarray(labels), return_counts=True)
    n = int(sizes.sum())
    genuine = int((sizes * (sizes - 1) // 2).sum())
    return genuine, n * (n - 1) // 2 - genuine


def enumerate_pairs(embeddings: np.ndarray, labels: Sequence[int], shard_rows: int = 512) -> Iterator[PairShard]:
    """Yield every unordered pair (i < j) once, grouped into shards of ``shard_rows`` anchor rows."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("pair enumeration needs at least 2 subjects")
    n = len(emb)
    for a in range(0, n, shard_rows):
        b = min(a + shard_rows, n)
        sims = similarity_matrix(emb[a:b], emb[a:])
        ii, jj = np.nonzero(np.triu(np.ones((b - a, n - a), dtype=bool), k=1))
        yield PairShard(ii + a, jj + a, sims[ii, jj], labels[ii + a] == labels[jj + a])


def pair_scores(embeddings, labels, attrs: Sequence[tuple] | None = None) -> list[PairScore]:
    """All pairs as `PairScore` records (small sets only)."""
    out = []
    for sh in enumerate_pairs(embeddings, labels):
        for i, j, s, g in zip(sh.i, sh.j, sh.score, sh.genuine):
            a = () if attrs is None else (attrs[i][0], attrs[j][0], attrs[i][1], attrs[j][1], attrs[i][2], attrs[j][2])
            out.append(PairScore(float(s), bool(g), a))
    return out


def allowed_false_accepts(n_impostor: int, target_fpr: float) -> int:
    """Largest k with k / n <= target."""
    k = int(math.floor(target_fpr * n_impostor))
    while (k + 1) / n_impostor <= target_fpr:
        k += 1
    while k > 0 and k / n_impostor > target_fpr:
        k -= 1
    return k


def _check_target(n_impostor: int, target_fpr: float) -> None:
    if n_impostor == 0:
        raise DataError("no impostor scores")
    if target_fpr < 1.0 / n_impostor:
        raise ConfigError(f"FPR {target_fpr:g} is unresolvable with {n_impostor} impostor pairs; "
                          f"minimum resolvable FPR is {1.0 / n_impostor:g}")


def threshold_from_tail(tail_desc: np.ndarray, n_impostor: int, min_score: float, target_fpr: float) -> float:
    _check_target(n_impostor, target_fpr)
    k = allowed_false_accepts(n_impostor, target_fpr)
    if k >= n_impostor:
        return float(min_score)
    if k >= len(tail_desc):
        raise ValueError("impostor tail too short for this FPR")
    return float(np.nextafter(tail_desc[k], np.inf))


def threshold_at_fpr(impostor_scores, target_fpr: float) -> float:
    """Smallest threshold t with fraction{impostor >= t} <= target (exact).

    Accepting means score >= t.  For target 1.0 this is the minimum
    impostor score; otherwise t sits one ulp above the (k+1)-th largest
    impostor score, k being the allowed number of false accepts.
    """
    s = np.asarray(impostor_scores, dtype=np.float64)
    _check_target(s.size, target_fpr)
    k = allowed_false_accepts(s.size, target_fpr)
    if k >= s.size:
        return float(s.min())
    kth = np.partition(s, s.size - 1 - k)[s.size - 1 - k]
    return float(np.nextafter(kth, np.inf))


def fnr_at_threshold(genuine_scores, t: float) -> float:
    g = np.asarray(genuine_scores, dtype=np.float64)
    return float(np.mean(g < t)) if g.size else float("nan")


def fpr_at_threshold(impostor_scores, t: float) -> float:
    s = np.asarray(impostor_scores, dtype=np.float64)
    return float(np.mean(s >= t)) if s.size else float("nan")


@dataclass
class RocReport:
    thresholds: np.ndarray
    fpr: np.ndarray
    fnr: np.ndarray
    fnr_at: dict[float, float] = field(default_factory=dict)
    threshold_at: dict[float, float] = field(default_factory=dict)

    def check_monotone(self) -> bool:
        """fpr non-increasing and fnr non-decreasing as the threshold rises."""
        order = np.argsort(self.thresholds, kind="stable")
        f, n = self.fpr[order], self.fnr[order]
        return bool(np.all(np.diff(f) <= 0) and np.all(np.diff(n) >= 0))


def roc_edges(n_edges: int = 2001) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n_edges)


class ScoreAccumulator:
    """Streaming reduction over pair shards.

    ``max_fpr`` bounds how much of the impostor tail must be kept:
    ``allowed_false_accepts(n_impostor, max_fpr) + 1`` scores.
    """

    def __init__(self, n_impostor_expected: int, max_fpr: float = 1e-2, edges: np.ndarray | None = None):
        self.keep = allowed_false_accepts(max(n_impostor_expected, 1), max_fpr) + 1
        self.edges = roc_edges() if edges is None else edges
        self.gen_hist = np.zeros(len(self.edges), dtype=np.int64)
        self.imp_hist = np.zeros(len(self.edges), dtype=np.int64)
        self.tail = np.zeros(0)
        self.n_impostor = 0
        self.min_impostor = math.inf
        self.genuine: list[np.ndarray] = []
        self.genuine_i: list[np.ndarray] = []
        self.genuine_j: list[np.ndarray] = []

    def _bin(self, s: np.ndarray) -> np.ndarray:
        # bin k counts scores in [edges[k], edges[k+1]); below edges[0] is clamped into bin 0
        return np.clip(np.searchsorted(self.edges, s, side="right") - 1, 0, len(self.edges) - 1)

    def add(self, sh: PairShard) -> None:
        g = sh.genuine
        gs, imp = sh.score[g], sh.score[~g]
        self.genuine.append(gs)
        self.genuine_i.append(sh.i[g])
        self.genuine_j.append(sh.j[g])
        np.add.at(self.gen_hist, self._bin(gs), 1)
        np.add.at(self.imp_hist, self._bin(imp), 1)
        self.n_impostor += imp.size
        if imp.size:
            self.min_impostor = min(self.min_impostor, float(imp.min()))
            merged = np.concatenate([self.tail, imp])
            if merged.size > self.keep:
                merged = np.partition(merged, merged.size - self.keep)[merged.size - self.keep:]
            self.tail = merged

    def genuine_scores(self) -> np.ndarray:
        return np.concatenate(self.genuine) if self.genuine else np.zeros(0)

    def genuine_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.genuine_i), np.concatenate(self.genuine_j)

    def threshold(self, target_fpr: float) -> float:
        return threshold_from_tail(np.sort(self.tail)[::-1], self.n_impostor, self.min_impostor, target_fpr)

    def report(self, targets: Sequence[float]) -> RocReport:
        n_gen = max(int(self.gen_hist.sum()), 1)
        n_imp = max(self.n_impostor, 1)
        # count(score >= edge_k) is exact from the bins: bins k.. hold exactly the scores >= edge_k
        imp_ge = np.cumsum(self.imp_hist[::-1])[::-1]
        gen_ge = np.cumsum(self.gen_hist[::-1])[::-1]
        rep = RocReport(self.edges.copy(), imp_ge / n_imp, (int(self.gen_hist.sum()) - gen_ge) / n_gen)
        gs = self.genuine_scores()
        for t in targets:
            thr = self.threshold(t)
            rep.threshold_at[t] = thr
            rep.fnr_at[t] = fnr_at_threshold(gs, thr)
        return rep


def roc_report(genuine, impostor, targets: Sequence[float] = DESK_FPRS, edges=None) -> RocReport:
    """Exact ROC from in-memory score arrays on the fixed threshold grid."""
    g = np.asarray(genuine, dtype=np.float64)
    s = np.asarray(impostor, dtype=np.float64)
    edges = roc_edges() if edges is None else np.asarray(edges)
    fpr = np.array([np.mean(s >= t) for t in edges])
    fnr = np.array([np.mean(g < t) for t in edges])
    rep = RocReport(edges, fpr, fnr)
    for t in targets:
        thr = threshold_at_fpr(s, t)
        rep.threshold_at[t] = thr
        rep.fnr_at[t] = fnr_at_threshold(g, thr)
    return rep


# ---------------------------------------------------------------- evaluation of a test set


@dataclass
class EvalResult:
    n_genuine: int
    n_impostor: int
    roc: RocReport
    genuine_scores: np.ndarray
    genuine_i: np.ndarray
    genuine_j: np.ndarray
    entries: list[dict]

    def attrs(self, axis: str) -> tuple[np.ndarray, np.ndarray]:
        if axis == "light":
            vals = np.array([e["light"]["direction"] for e in self.entries])
        elif axis in ("yaw", "pitch"):
            vals = np.array([e["pose"][axis] for e in self.entries], dtype=np.float64)
        else:
            raise ConfigError(f"unknown breakdown axis {axis!r}")
        return vals[self.genuine_i], vals[self.genuine_j]


def evaluate(embeddings: np.ndarray, entries: list[dict], targets: Sequence[float] = DESK_FPRS,
             shard_rows: int = 512) -> EvalResult:
    labels = [e["subject"] for e in entries]
    n_gen, n_imp = count_pairs(labels)
    targets = sorted(targets, reverse=True)
    for t in targets:
        _check_target(n_imp, t)
    acc = ScoreAccumulator(n_imp, max_fpr=max(targets) if targets else 1e-2)
    for sh in enumerate_pairs(embeddings, labels, shard_rows):
        acc.add(sh)
    if acc.n_impostor != n_imp or int(acc.gen_hist.sum()) != n_gen:
        raise AssertionError("pair enumeration disagrees with the closed-form counts")
    gi, gj = acc.genuine_pairs()
    return EvalResult(n_gen, n_imp, acc.report(targets), acc.genuine_scores(), gi, gj, entries)


@dataclass
class Breakdown:
    axis: str
    labels: list[str]
    fnr: np.ndarray      # nan marks empty cells
    count: np.ndarray
    centers: np.ndarray | None = None


def angle_bins(lo: float = -25.0, hi: float = 25.0, width: float = 5.0) -> np.ndarray:
    return np.arange(lo, hi + width / 2, width)


def breakdown_fnr(attr_a, attr_b, genuine_scores, axis: str, t: float, width: float = 5.0) -> Breakdown:
    """FNR of genuine pairs per (attribute of a, attribute of b) cell.

    Pairs are unordered, so each pair is counted in both (a, b) and (b, a);
    the matrix is symmetric.
    """
    g = np.asarray(genuine_scores, dtype=np.float64)
    miss = g < t
    if axis == "light":
        names = list(LIGHT_BINS)
        ia = np.array([names.index(v) for v in attr_a], dtype=np.int64)
        ib = np.array([names.index(v) for v in attr_b], dtype=np.int64)
        centers = None
    else:
        edges = angle_bins(width=width)
        names = [f"{edges[k]:g}..{edges[k + 1]:g}" for k in range(len(edges) - 1)]
        centers = (edges[:-1] + edges[1:]) / 2
        ia = np.clip(np.searchsorted(edges, np.asarray(attr_a, float), side="right") - 1, 0, len(names) - 1)
        ib = np.clip(np.searchsorted(edges, np.asarray(attr_b, float), side="right") - 1, 0, len(names) - 1)
    k = len(names)
    count = np.zeros((k, k), dtype=np.int64)
    misses = np.zeros((k, k), dtype=np.int64)
    np.add.at(count, (ia, ib), 1)
    np.add.at(misses, (ia, ib), miss)
    off = ia != ib
    np.add.at(count, (ib[off], ia[off]), 1)
    np.add.at(misses, (ib[off], ia[off]), miss[off])
    with np.errstate(invalid="ignore", divide="ignore"):
        fnr = np.where(count > 0, misses / np.maximum(count, 1), np.nan)
    return Breakdown(axis, names, fnr, count, centers)


def offdiagonal_gap(bd: Breakdown, far: float = 30.0, near: float = 5.0) -> float:
    """Mean FNR of cells more than ``far`` degrees apart minus that of cells within ``near`` degrees."""
    if bd.centers is None:
        raise ConfigError("gap statistic needs an angle breakdown")
    delta = np.abs(bd.centers[:, None] - bd.centers[None, :])
    ok = bd.count > 0
    far_cells = bd.fnr[(delta > far) & ok]
    near_cells = bd.fnr[(delta <= near) & ok]
    if far_cells.size == 0 or near_cells.size == 0:
        return float("nan")
    return float(far_cells.mean() - near_cells.mean())


# ---------------------------------------------------------------- CSV output


def write_roc_csv(path, rep: RocReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "fnr"])
        for t, f, n in zip(rep.thresholds, rep.fpr, rep.fnr):
            w.writerow([f"{t:.6f}", repr(float(f)), repr(float(n))])


def write_fnr_at_csv(path, res: EvalResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "threshold", "fnr", "n_genuine", "n_impostor"])
        for t in sorted(res.roc.fnr_at, reverse=True):
            w.writerow([f"{t:g}", repr(res.roc.threshold_at[t]), repr(res.roc.fnr_at[t]), res.n_genuine,
                        res.n_impostor])


def write_breakdown_csv(path, bd: Breakdown) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_a", "bin_b", "fnr", "count"])
        for a in range(len(bd.labels)):
            for b in range(len(bd.labels)):
                f = "" if bd.count[a, b] == 0 else repr(float(bd.fnr[a, b]))
                w.writerow([bd.labels[a], bd.labels[b], f, int(bd.count[a, b])])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_embeddings(out_prefix, embeddings: np.ndarray, entries: list[dict]) -> tuple[Path, Path, Path]:
    """CSV (subject, sample, values...) plus raw little-endian float32 with a JSON sidecar."""
    import json

    out_prefix = Path(out_prefix)
    csv_path = out_prefix.with_suffix(".csv")
    raw_path = out_prefix.with_suffix(".f32")
    side_path = out_prefix.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "sample"] + [f"e{k}" for k in range(embeddings.shape[1])])
        for e, row in zip(entries, embeddings):
            w.writerow([e["subject"], e["id"]] + [repr(float(v)) for v in row.astype(np.float32)])
    raw_path.write_bytes(np.ascontiguousarray(embeddings, dtype="<f4").tobytes())
    side_path.write_text(json.dumps({"dtype": "float32", "byteorder": "little", "shape": list(embeddings.shape),
                                     "samples": [{"subject": e["subject"], "sample": e["id"]} for e in entries]},
                                    indent=1) + "\n")
    return csv_path, raw_path, side_path


# ---------------------------------------------------------------- model-level evaluation and ablation


def evaluate_model(net, mode, dataset, spec, split: str = "test", targets: Sequence[float] = DESK_FPRS,
                   fusion: str = "mean", shard_rows: int = 512) -> tuple[EvalResult, np.ndarray]:
    """Embed every genuine sample of ``split`` and score all pairs."""
    from .trainkit import embed_entries

    entries = dataset.samples(split, attack=False)
    if not entries:
        raise DataError(f"no samples in split {split!r}")
    emb = embed_entries(net, mode, dataset, entries, spec, fusion)
    return evaluate(emb, entries, targets, shard_rows), emb


ABLATION_VARIANTS = ("NoCoords", "WithCoords", "AuxL1", "AuxFull")
# full-scale FNR at FPR 1e-6, for reference only
ABLATION_REFERENCE = {"NoCoords": 0.0628, "WithCoords": 0.0503, "AuxL1": 0.04719, "AuxFull": 0.0378}


def ablation_config(variant: str, base):
    """TrainConfig of one ablation variant derived from ``base``."""
    from dataclasses import replace

    from .pipeline import InputMode
    from .recognet import AuxConfig

    if variant == "NoCoords":
        return replace(base, mode=InputMode.STEREO_NOCOORDS, aux=None)
    if variant == "WithCoords":
        return replace(base, mode=InputMode.STEREO, aux=None)
    if variant == "AuxL1":
        return replace(base, mode=InputMode.STEREO, aux=AuxConfig(alpha=0.0, beta=1.0))
    if variant == "AuxFull":
        return replace(base, mode=InputMode.STEREO, aux=AuxConfig(alpha=50.0, beta=1.0))
    raise ConfigError(f"unknown ablation variant {variant!r}")


@dataclass
class AblationResult:
    targets: list[float]
    per_seed: dict[str, dict[int, list[float]]]  # variant -> seed -> FNR per target

    def median(self, variant: str) -> list[float]:
        rows = np.array(list(self.per_seed[variant].values()), dtype=np.float64)
        return [float(v) for v in np.median(rows, axis=0)]

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = [f"fnr@{t:g}" for t in self.targets]
        summary, seeds = out / "ablation.csv", out / "ablation_seeds.csv"
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", *cols, "fullscale_fnr@1e-06"])
            for v in self.per_seed:
                w.writerow([v, *map(repr, self.median(v)), ABLATION_REFERENCE.get(v, "")])
        with open(seeds, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", *cols])
            for v, by_seed in self.per_seed.items():
                for s, vals in sorted(by_seed.items()):
                    w.writerow([v, s, *map(repr, vals)])
        return summary, seeds


def ablation_run(dataset, base, seeds: Sequence[int] = (0, 1, 2), out_dir=None,
                 variants: Sequence[str] = ABLATION_VARIANTS, targets: Sequence[float] = DESK_FPRS,
                 mono_checkpoints: dict | None = None, on_model=None) -> AblationResult:
    """Train each variant for each seed and collect FNR at the target FPRs.

    AuxFull needs a stage-1 mono reference per seed; it is trained on demand
    unless supplied through ``mono_checkpoints`` (seed -> path or EmbeddingNet).
    ``on_model(variant, seed, model, result)`` is called after each evaluation.
    """
    from dataclasses import replace

    from .trainkit import load_mono_reference, pretrain_mono, train

    targets = sorted(targets, reverse=True)
    mono_checkpoints = dict(mono_checkpoints or {})
    per_seed: dict[str, dict[int, list[float]]] = {v: {} for v in variants}
    for seed in seeds:
        for v in variants:
            cfg = ablation_config(v, replace(base, seed=seed))
            run_dir = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            mono = None
            if cfg.aux is not None and cfg.aux.alpha > 0:
                ref = mono_checkpoints.get(seed)
                if ref is None:
                    mono_dir = None if out_dir is None else Path(out_dir) / f"mono_seed{seed}"
                    ref = pretrain_mono(replace(base, seed=seed), dataset, mono_dir)[0].net
                    ref.freeze()
                    mono_checkpoints[seed] = ref
                mono = load_mono_reference(ref) if isinstance(ref, (str, Path)) else ref
            model, _ = train(cfg, dataset, run_dir, mono_model=mono)
            res, _ = evaluate_model(model.net, cfg.mode, dataset, cfg.crop, targets=targets)
            per_seed[v][seed] = [res.roc.fnr_at[t] for t in targets]
            if on_model is not None:
                on_model(v, seed, model, res)
    result = AblationResult(list(targets), per_seed)
    if out_dir is not None:
        result.write(out_dir)
    return result


def ordering_verdict(nocoords: float, withcoords: float, auxfull: float, tol: float = 0.10) -> str:
    """'pass' if NoCoords >= WithCoords >= AuxFull; 'warn' if exactly one adjacent
    inequality fails by at most ``tol`` relative; otherwise 'fail'."""
    pairs = [(nocoords, withcoords), (withcoords, auxfull)]
    broken = [(a, b) for a, b in pairs if a < b]
    if not broken:
        return "pass"
    if len(broken) == 1:
        a, b = broken[0]
        if b - a <= tol * max(abs(b), 1e-12):
            return "warn"
    return "fail"

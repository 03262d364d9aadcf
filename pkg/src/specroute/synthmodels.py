"""Calibrated synthetic models: drafter, target, decoder, scorer, quality proxy.

The synthetic family replaces the neural components with deterministic
stand-ins whose *aggregate* behavior is calibrated against measured sweep
results:

* DraftQualityModel defines the distribution of a draft block's worst-frame
  reward via the measured accept-rate-vs-threshold curve, interpreted as a
  survival function P(q >= tau) and interpolated piecewise-linearly between
  knots with configurable tail slopes.
* QualityProxyModel maps a run's accepted-draft scores to a scalar quality
  proxy. It is a curve fit that reproduces the measured quality column of
  the reference sweep; it does not emulate the underlying video-quality
  metric and must not be read as such.
* The synthetic drafter embeds its sampled per-frame rewards into the
  latent payload; the synthetic decoder carries them into a reserved pixel
  of each frame; the synthetic scorer reads that pixel back. Quality flows
  through the data path exactly as it would with real models, so the
  routing engine is exercised end to end.

All models are immutable after fitting and safe to share across parallel
simulations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .caches import KVCache, SnapshotMismatchError
from .core import (
    BlockTrace,
    DecodedFrames,
    FrameScoreVector,
    GenerationConfig,
    LATENT_CHANNELS,
    LATENT_HEIGHT,
    LATENT_WIDTH,
    LatentBlock,
    Producer,
    PromptSpec,
    keyed_generator,
    pixel_frame_count,
)
from .costmodel import (
    DRAFT_ONLY,
    TARGET_ONLY,
    LatencyFitReport,
    LatencyParams,
    fit_latencies,
)
from .engine import DecoderInterface, GeneratorInterface, ScorerInterface

__all__ = [
    "CalibrationError",
    "DraftQualityModel",
    "fit_quantile",
    "fit_frame_gap",
    "QualityProxyModel",
    "QualityFitReport",
    "fit_quality_proxy",
    "TableRow",
    "ReferenceTable",
    "load_reference_table",
    "Calibration",
    "fit_calibration",
    "synthetic_table",
    "table_to_json_dict",
    "SynthDecodeState",
    "SyntheticDrafter",
    "SyntheticTarget",
    "SyntheticDecoder",
    "SyntheticScorer",
    "build_synthetic_stack",
]

DEFAULT_FRAME_GAP_MEAN = 0.34
DEFAULT_UPPER_TAIL_SLOPE = 0.18
DEFAULT_LOWER_TAIL_SLOPE = 0.10
QUALITY_FIT_TOLERANCE = 5e-4


class CalibrationError(RuntimeError):
    """A calibration fit is infeasible or its inputs are malformed."""


# ---------------------------------------------------------------------------
# Draft quality distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DraftQualityModel:
    """Distribution of a draft block's worst-frame reward.

    quantile_knots are (tau, accept_rate) pairs ordered by decreasing tau
    with accept_rate strictly increasing as tau decreases. The survival
    function P(q >= tau) interpolates the knots linearly and continues
    past them at the configured tail slopes until it saturates at 0 / 1,
    which makes the implied distribution proper and invertible.

    Per-frame scores are the sampled minimum plus non-negative offsets
    (one frame pinned at the minimum); frame_gap_mean sets the expected
    mean-minus-min gap, which is what separates mean-frame from min-frame
    routing behavior.
    """

    quantile_knots: tuple[tuple[float, float], ...]
    rng_seed: int = 42
    upper_tail_slope: float = DEFAULT_UPPER_TAIL_SLOPE
    lower_tail_slope: float = DEFAULT_LOWER_TAIL_SLOPE
    frame_gap_mean: float = DEFAULT_FRAME_GAP_MEAN
    # survival-function breakpoints, tau ascending (derived, cached)
    _taus_asc: tuple[float, ...] = field(init=False, repr=False, compare=False)
    _accept_desc: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        knots = tuple((float(t), float(a)) for t, a in self.quantile_knots)
        if len(knots) < 1:
            raise CalibrationError("need at least one quantile knot")
        taus = [t for t, _ in knots]
        rates = [a for _, a in knots]
        if any(t1 <= t2 for t1, t2 in zip(taus, taus[1:])):
            raise CalibrationError(f"knot thresholds must be strictly decreasing: {taus}")
        if any(a1 >= a2 for a1, a2 in zip(rates, rates[1:])):
            raise CalibrationError(
                f"accept rate must strictly increase as tau decreases: {rates}"
            )
        if not all(0.0 < a < 1.0 for a in rates):
            raise CalibrationError(f"knot accept rates must lie in (0, 1): {rates}")
        if self.upper_tail_slope <= 0 or self.lower_tail_slope <= 0:
            raise CalibrationError("tail slopes must be positive")
        if self.frame_gap_mean < 0:
            raise CalibrationError("frame_gap_mean must be non-negative")
        object.__setattr__(self, "quantile_knots", knots)

        # Breakpoints where the survival function saturates.
        tau_top = taus[0] + rates[0] / self.upper_tail_slope          # A -> 0
        tau_bottom = taus[-1] - (1.0 - rates[-1]) / self.lower_tail_slope  # A -> 1
        taus_asc = [tau_bottom] + list(reversed(taus)) + [tau_top]
        accept_desc = [1.0] + list(reversed(rates)) + [0.0]
        object.__setattr__(self, "_taus_asc", tuple(taus_asc))
        object.__setattr__(self, "_accept_desc", tuple(accept_desc))

    # -- distribution ------------------------------------------------------

    def accept_rate(self, tau: float) -> float:
        """P(q >= tau): the expected accept rate at an inclusive threshold."""
        return float(np.interp(tau, self._taus_asc, self._accept_desc))

    def min_score_from_uniform(self, u) -> np.ndarray | float:
        """Inverse-CDF transform: uniform draws to worst-frame scores."""
        xp = tuple(reversed(self._accept_desc))  # ascending 0 .. 1
        fp = tuple(reversed(self._taus_asc))     # descending taus
        return np.interp(u, xp, fp)

    # -- keyed sampling ------------------------------------------------------

    def sample_block_score(
        self, prompt_id: str, block_index: int, num_frames: int
    ) -> FrameScoreVector:
        """Per-frame scores for one block; deterministic per (seed, prompt, block).

        The vector minimum follows the calibrated distribution exactly: one
        frame sits at the sampled minimum and the rest add non-negative
        exponential offsets.
        """
        if num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        rng = keyed_generator("draft-scores", self.rng_seed, prompt_id, block_index)
        minimum = float(self.min_score_from_uniform(rng.random()))
        if num_frames == 1:
            return FrameScoreVector(block_index, (minimum,))
        pin = int(rng.integers(num_frames))
        scale = self.frame_gap_mean * num_frames / (num_frames - 1)
        offsets = rng.exponential(scale=scale, size=num_frames - 1) if scale > 0 else np.zeros(num_frames - 1)
        scores = np.empty(num_frames)
        scores[:pin] = minimum + offsets[:pin]
        scores[pin] = minimum
        scores[pin + 1 :] = minimum + offsets[pin:]
        return FrameScoreVector(block_index, tuple(float(s) for s in scores))

    # -- segment masses (used by the quality-proxy fit) ----------------------

    def mass_at_least(self, tau: float) -> float:
        return self.accept_rate(tau)

    def to_dict(self) -> dict:
        return {
            "quantile_knots": [[t, a] for t, a in self.quantile_knots],
            "rng_seed": self.rng_seed,
            "upper_tail_slope": self.upper_tail_slope,
            "lower_tail_slope": self.lower_tail_slope,
            "frame_gap_mean": self.frame_gap_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DraftQualityModel:
        return cls(
            quantile_knots=tuple((float(t), float(a)) for t, a in d["quantile_knots"]),
            rng_seed=int(d.get("rng_seed", 42)),
            upper_tail_slope=float(d.get("upper_tail_slope", DEFAULT_UPPER_TAIL_SLOPE)),
            lower_tail_slope=float(d.get("lower_tail_slope", DEFAULT_LOWER_TAIL_SLOPE)),
            frame_gap_mean=float(d.get("frame_gap_mean", DEFAULT_FRAME_GAP_MEAN)),
        )


def fit_quantile(
    knots: Sequence[tuple[float, float]],
    rng_seed: int = 42,
    upper_tail_slope: float = DEFAULT_UPPER_TAIL_SLOPE,
    lower_tail_slope: float = DEFAULT_LOWER_TAIL_SLOPE,
    frame_gap_mean: float = DEFAULT_FRAME_GAP_MEAN,
) -> DraftQualityModel:
    """Interpolating quantile model through measured (tau, accept_rate) knots."""
    ordered = tuple(sorted(((float(t), float(a)) for t, a in knots), key=lambda k: -k[0]))
    return DraftQualityModel(
        quantile_knots=ordered,
        rng_seed=rng_seed,
        upper_tail_slope=upper_tail_slope,
        lower_tail_slope=lower_tail_slope,
        frame_gap_mean=frame_gap_mean,
    )


def fit_frame_gap(
    quantile: DraftQualityModel, mean_rows: Sequence[tuple[float, float]]
) -> float:
    """Mean-minus-min gap that matches measured mean-frame accept rates.

    Mean-frame routing at tau accepts roughly when the minimum exceeds
    tau - gap, so each row inverts to gap = tau - A^-1(rate). Rows whose
    rate falls outside the knot range would lean on the extrapolated
    tails, so they are skipped.
    """
    rates = [a for _, a in quantile.quantile_knots]
    lo, hi = min(rates), max(rates)
    gaps = []
    for tau, rate in mean_rows:
        if not lo <= rate <= hi:
            continue
        tau_equiv = float(quantile.min_score_from_uniform(rate))
        gaps.append(tau - tau_equiv)
    if not gaps:
        return DEFAULT_FRAME_GAP_MEAN
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# Quality proxy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityProxyModel:
    """Additive-penalty quality proxy, anchored at the all-reject quality.

    A run's proxy is base_quality minus one penalty per accepted draft
    block, where the penalty depends on the block's worst-frame score
    through a non-increasing step function (edges: taus descending;
    penalties: one value per segment, ascending as scores fall). An
    all-reject run scores base_quality exactly.

    Calibration device only: reproduces the measured quality column of the
    reference sweep, and is not an emulation of the video-quality metric.
    """

    base_quality: float
    edges: tuple[float, ...]
    penalties: tuple[float, ...]

    def __post_init__(self) -> None:
        edges = tuple(float(e) for e in self.edges)
        pens = tuple(float(p) for p in self.penalties)
        if len(pens) != len(edges) + 1:
            raise CalibrationError("need exactly one penalty per score segment")
        if any(e1 <= e2 for e1, e2 in zip(edges, edges[1:])):
            raise CalibrationError("edges must be strictly decreasing")
        if any(p < 0 for p in pens):
            raise CalibrationError("penalties must be non-negative")
        if any(p1 > p2 for p1, p2 in zip(pens, pens[1:])):
            raise CalibrationError("penalties must be non-decreasing as scores fall")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "penalties", pens)

    def penalty(self, q: float) -> float:
        """Quality cost of accepting a draft block whose worst-frame score is q."""
        for k, edge in enumerate(self.edges):
            if q >= edge:
                return self.penalties[k]
        return self.penalties[-1]

    def run_quality(self, traces: Sequence[BlockTrace]) -> float:
        total = self.base_quality
        for t in traces:
            if not t.decision.accepted:
                continue
            if t.frame_scores is None:
                raise ValueError(
                    f"accepted block {t.block_index} has no frame scores to penalize"
                )
            total -= self.penalty(t.frame_scores.minimum())
        return total

    def expected_penalty_above(self, quantile: DraftQualityModel, tau: float) -> float:
        """E[penalty(q) * 1{q >= tau}] under the calibrated score distribution.

        Segment k spans scores in [edges[k], edges[k-1]) with an open top for
        k = 0 and the tail below edges[-1]; each contributes its penalty times
        the probability mass of its overlap with [tau, inf).
        """
        total = 0.0
        mass_above_upper = 0.0  # P(q >= upper bound of current segment)
        for k, edge in enumerate(self.edges):
            if edge <= tau:
                total += self.penalties[k] * max(
                    quantile.accept_rate(tau) - mass_above_upper, 0.0
                )
                return total
            seg = quantile.accept_rate(edge) - mass_above_upper
            total += self.penalties[k] * max(seg, 0.0)
            mass_above_upper = quantile.accept_rate(edge)
        # Tail segment, truncated at tau (accept_rate clamps to 1 at -inf).
        tail = quantile.accept_rate(tau) - mass_above_upper
        total += self.penalties[-1] * max(tail, 0.0)
        return total

    def to_dict(self) -> dict:
        return {
            "base_quality": self.base_quality,
            "edges": list(self.edges),
            "penalties": list(self.penalties),
        }

    @classmethod
    def from_dict(cls, d: dict) -> QualityProxyModel:
        return cls(
            base_quality=float(d["base_quality"]),
            edges=tuple(float(e) for e in d["edges"]),
            penalties=tuple(float(p) for p in d["penalties"]),
        )


@dataclass(frozen=True)
class QualityFitReport:
    """Expected-vs-measured quality per fitted row; non-fatal on breach."""

    rows: tuple[tuple[str, float, float, float], ...]  # (label, measured, expected, residual)
    tolerance: float

    @property
    def max_abs_residual(self) -> float:
        return max(abs(r[3]) for r in self.rows)

    @property
    def within_tolerance(self) -> bool:
        return self.max_abs_residual <= self.tolerance

    def lines(self) -> list[str]:
        out = []
        for label, measured, expected, residual in self.rows:
            out.append(
                f"{label:<22} measured {measured:.4f}  model {expected:.4f}  "
                f"residual {residual:+.5f}"
            )
        status = "OK" if self.within_tolerance else "EXCEEDS TOLERANCE"
        out.append(
            f"max |residual| = {self.max_abs_residual:.5f} "
            f"(tolerance {self.tolerance:g}) {status}"
        )
        return out


def fit_quality_proxy(
    rows: "ReferenceTable | Sequence[TableRow]",
    quantile: DraftQualityModel,
    num_blocks: int = 9,
    tolerance: float = QUALITY_FIT_TOLERANCE,
) -> tuple[QualityProxyModel, QualityFitReport]:
    """Fit segment penalties so expected run quality matches the table.

    Minimizes the worst absolute quality error across the threshold rows
    and the draft-only row (a small linear program), subject to the
    penalty function being non-negative and non-increasing in the score.
    The measured quality column need not be monotone, so a nonzero
    residual floor can be unavoidable; breaches of `tolerance` are
    reported, not raised.
    """
    main = rows.main if isinstance(rows, ReferenceTable) else list(rows)
    base_row = _single_row(main, TARGET_ONLY)
    draft_row = _single_row(main, DRAFT_ONLY)
    threshold_rows = [r for r in main if r.method == "threshold"]
    if len(threshold_rows) < 3:
        raise CalibrationError("need at least 3 threshold rows to fit the quality proxy")
    threshold_rows.sort(key=lambda r: -r.tau)
    if base_row.vr is None or draft_row.vr is None or any(r.vr is None for r in threshold_rows):
        raise CalibrationError("quality fit needs a quality value on every row")

    base = base_row.vr
    edges = [r.tau for r in threshold_rows]
    accept_at = [quantile.accept_rate(t) for t in edges]
    masses = [accept_at[0]]
    masses += [accept_at[k] - accept_at[k - 1] for k in range(1, len(edges))]
    masses.append(1.0 - accept_at[-1])
    n_seg = len(masses)
    eligible = num_blocks - 1  # block 0 is force-rejected in threshold runs

    # Variables: segment penalties p_0..p_{n-1}, then the Chebyshev bound t.
    c = np.zeros(n_seg + 1)
    c[-1] = 1.0
    a_ub: list[np.ndarray] = []
    b_ub: list[float] = []

    def add_abs_constraint(coeffs: np.ndarray, target: float) -> None:
        row = np.append(coeffs, -1.0)
        a_ub.append(row)
        b_ub.append(target)
        a_ub.append(np.append(-coeffs, -1.0))
        b_ub.append(-target)

    for j, row in enumerate(threshold_rows):
        coeffs = np.zeros(n_seg)
        coeffs[: j + 1] = eligible * np.asarray(masses[: j + 1])
        add_abs_constraint(coeffs, base - row.vr)
    add_abs_constraint(num_blocks * np.asarray(masses), base - draft_row.vr)
    for k in range(n_seg - 1):
        row = np.zeros(n_seg + 1)
        row[k], row[k + 1] = 1.0, -1.0
        a_ub.append(row)
        b_ub.append(0.0)

    result = linprog(
        c,
        A_ub=np.vstack(a_ub),
        b_ub=np.asarray(b_ub),
        bounds=[(0.0, None)] * (n_seg + 1),
        method="highs",
    )
    if not result.success:
        raise CalibrationError(f"quality-proxy fit failed: {result.message}")

    # The solver honors the ordering constraints only to its own tolerance;
    # clamp the epsilon-level violations before validation.
    penalties = np.maximum.accumulate(np.maximum(result.x[:n_seg], 0.0))
    model = QualityProxyModel(
        base_quality=base,
        edges=tuple(edges),
        penalties=tuple(float(p) for p in penalties),
    )

    report_rows = [(TARGET_ONLY, base, base, 0.0)]
    for row in threshold_rows:
        expected = base - eligible * model.expected_penalty_above(quantile, row.tau)
        report_rows.append((f"threshold(tau={row.tau:g})", row.vr, expected, expected - row.vr))
    expected_draft = base - num_blocks * model.expected_penalty_above(quantile, float("-inf"))
    report_rows.append((DRAFT_ONLY, draft_row.vr, expected_draft, expected_draft - draft_row.vr))
    return model, QualityFitReport(rows=tuple(report_rows), tolerance=tolerance)


# ---------------------------------------------------------------------------
# Reference table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    """One measured sweep row from the reference system."""

    method: str  # target_only | draft_only | threshold | avg_frame | random | force_reject_random
    vr: float | None = None
    time_s: float | None = None
    speedup: float | None = None
    accept_rate: float | None = None
    tau: float | None = None


@dataclass(frozen=True)
class ReferenceTable:
    main: tuple[TableRow, ...]
    ablation: tuple[TableRow, ...] = ()

    @property
    def threshold_rows(self) -> tuple[TableRow, ...]:
        return tuple(r for r in self.main if r.method == "threshold")


def _single_row(rows: Sequence[TableRow], method: str) -> TableRow:
    found = [r for r in rows if r.method == method]
    if len(found) != 1:
        raise CalibrationError(
            f"reference table needs exactly one {method!r} row, found {len(found)}"
        )
    return found[0]


def _parse_row(raw: dict) -> TableRow:
    try:
        method = raw["method"]
    except KeyError as exc:
        raise CalibrationError(f"table row missing 'method': {raw!r}") from exc

    def opt(key: str) -> float | None:
        return float(raw[key]) if raw.get(key) is not None else None

    return TableRow(
        method=method,
        vr=opt("vr"),
        time_s=opt("time_s"),
        speedup=opt("speedup"),
        accept_rate=opt("accept_rate"),
        tau=opt("tau"),
    )


def load_reference_table(path: str | Path | None = None) -> ReferenceTable:
    """Load the bundled (or an external) reference measurement table."""
    if path is None:
        text = resources.files("specroute.data").joinpath("reference_table.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"reference table is not valid JSON: {exc}") from exc
    if "main" not in doc:
        raise CalibrationError("reference table missing 'main' section")
    return ReferenceTable(
        main=tuple(_parse_row(r) for r in doc["main"]),
        ablation=tuple(_parse_row(r) for r in doc.get("ablation", ())),
    )


# ---------------------------------------------------------------------------
# Calibration bundle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    """Everything the simulator needs, as fitted from a reference table."""

    quantile: DraftQualityModel
    latency: LatencyParams
    proxy: QualityProxyModel

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "draft_quality": self.quantile.to_dict(),
            "latency": self.latency.to_dict(),
            "quality_proxy": self.proxy.to_dict(),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> Calibration:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"calibration file is not valid JSON: {exc}") from exc
        try:
            return cls(
                quantile=DraftQualityModel.from_dict(doc["draft_quality"]),
                latency=LatencyParams.from_dict(doc["latency"]),
                proxy=QualityProxyModel.from_dict(doc["quality_proxy"]),
            )
        except KeyError as exc:
            raise CalibrationError(f"calibration file missing section {exc.args[0]!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> Calibration:
        return cls.from_json(Path(path).read_text())

    def with_seed(self, seed: int) -> Calibration:
        """Same fitted curves, different sampling stream."""
        quantile = DraftQualityModel.from_dict({**self.quantile.to_dict(), "rng_seed": seed})
        return Calibration(quantile=quantile, latency=self.latency, proxy=self.proxy)


def synthetic_table(calibration: Calibration, num_blocks: int = 9) -> ReferenceTable:
    """Model-predicted table at the calibration's own knots.

    Refitting this table reproduces the calibration exactly (the rows are
    generated by the fitted models, so every fit is a zero-residual
    fixed point). Useful as a self-consistency oracle.
    """
    quantile, latency, proxy = calibration.quantile, calibration.latency, calibration.proxy
    b = num_blocks
    t_target = b * latency.c_target
    draft_path = b * latency.draft_path_cost

    def run_time(rate: float) -> float:
        rejected = 1.0 + (b - 1) * (1.0 - rate)
        return draft_path + rejected * latency.c_target

    main = [
        TableRow(method=TARGET_ONLY, vr=proxy.base_quality, time_s=t_target, speedup=1.0)
    ]
    for tau, rate in quantile.quantile_knots:
        vr = proxy.base_quality - (b - 1) * proxy.expected_penalty_above(quantile, tau)
        time_s = run_time(rate)
        main.append(
            TableRow(
                method="threshold",
                tau=tau,
                vr=vr,
                time_s=time_s,
                speedup=t_target / time_s,
                accept_rate=rate,
            )
        )
    vr_draft = proxy.base_quality - b * proxy.expected_penalty_above(quantile, float("-inf"))
    main.append(
        TableRow(
            method=DRAFT_ONLY, vr=vr_draft, time_s=draft_path, speedup=t_target / draft_path
        )
    )

    ablation = []
    for tau in (-0.2, -0.5, -0.7):
        shifted = tau - quantile.frame_gap_mean
        rate = quantile.accept_rate(shifted)
        vr = proxy.base_quality - (b - 1) * proxy.expected_penalty_above(quantile, shifted)
        time_s = run_time(rate)
        ablation.append(
            TableRow(
                method="avg_frame",
                tau=tau,
                vr=vr,
                time_s=time_s,
                speedup=t_target / time_s,
                accept_rate=rate,
            )
        )
    return ReferenceTable(main=tuple(main), ablation=tuple(ablation))


def table_to_json_dict(table: ReferenceTable) -> dict:
    def row(r: TableRow) -> dict:
        return {
            "method": r.method,
            "tau": r.tau,
            "vr": r.vr,
            "time_s": r.time_s,
            "speedup": r.speedup,
            "accept_rate": r.accept_rate,
        }

    return {
        "schema_version": 1,
        "main": [row(r) for r in table.main],
        "ablation": [row(r) for r in table.ablation],
    }


def fit_calibration(
    table: ReferenceTable,
    num_blocks: int = 9,
    rng_seed: int = 42,
) -> tuple[Calibration, LatencyFitReport, QualityFitReport]:
    """Fit all three models from a reference table in dependency order."""
    threshold_rows = table.threshold_rows
    if any(r.tau is None or r.accept_rate is None for r in threshold_rows):
        raise CalibrationError("threshold rows need both tau and accept_rate")
    knots = [(r.tau, r.accept_rate) for r in threshold_rows]
    mean_rows = [
        (r.tau, r.accept_rate)
        for r in table.ablation
        if r.method == "avg_frame" and r.tau is not None and r.accept_rate is not None
    ]
    quantile = fit_quantile(knots, rng_seed=rng_seed)
    if mean_rows:
        gap = fit_frame_gap(quantile, mean_rows)
        quantile = DraftQualityModel.from_dict({**quantile.to_dict(), "frame_gap_mean": gap})

    latency_rows: list[tuple[str | float, float]] = []
    for row in table.main:
        if row.time_s is None:
            raise CalibrationError(f"main-table row {row.method!r} is missing time_s")
        key: str | float = row.method if row.method in (TARGET_ONLY, DRAFT_ONLY) else row.accept_rate
        if key is None:
            raise CalibrationError(f"threshold row tau={row.tau} is missing accept_rate")
        latency_rows.append((key, row.time_s))
    latency, latency_report = fit_latencies(latency_rows, num_blocks=num_blocks)

    proxy, quality_report = fit_quality_proxy(table.main, quantile, num_blocks=num_blocks)
    return Calibration(quantile, latency, proxy), latency_report, quality_report


# ---------------------------------------------------------------------------
# Synthetic pipeline components
# ---------------------------------------------------------------------------

FRAME_SHAPE = (8, 8)
CARRY_LEN = LATENT_CHANNELS
TARGET_FRAME_SCORE = 3.0


@dataclass
class SynthDecodeState:
    """Temporal state of the synthetic causal decoder.

    carry is a running mix of decoded latent statistics; every decoded
    frame depends on it, which is what gives snapshot/restore its teeth.
    """

    carry: np.ndarray
    blocks_decoded: int
    geometry: tuple[int, ...]

    def clone(self) -> SynthDecodeState:
        return SynthDecodeState(self.carry.copy(), self.blocks_decoded, self.geometry)

    def digest(self) -> str:
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        h.update(str(self.geometry).encode())
        h.update(self.blocks_decoded.to_bytes(8, "big"))
        h.update(np.ascontiguousarray(self.carry).tobytes())
        return h.hexdigest()

    def load(self, other: SynthDecodeState) -> None:
        if not isinstance(other, SynthDecodeState):
            raise SnapshotMismatchError(f"cannot restore from {type(other).__name__}")
        if other.geometry != self.geometry or other.carry.shape != self.carry.shape:
            raise SnapshotMismatchError(
                f"snapshot geometry {other.geometry} does not match decoder {self.geometry}"
            )
        self.carry[...] = other.carry
        self.blocks_decoded = other.blocks_decoded


class SyntheticDecoder(DecoderInterface):
    """Deterministic stand-in for the causal pixel decoder.

    Frame j of a block exposes the latent's j-th reserved score slot at
    pixel [0, 0]; all remaining pixels are a keyed function of the latent
    payload and the decoder's temporal state.
    """

    def __init__(self, config: GenerationConfig, frame_shape: tuple[int, int] = FRAME_SHAPE):
        self.config = config
        self.frame_shape = frame_shape

    def fresh_state(self) -> SynthDecodeState:
        geometry = (
            self.config.pixel_frames_first_block,
            self.config.pixel_frames_later_block,
            *self.frame_shape,
        )
        return SynthDecodeState(
            carry=np.zeros(CARRY_LEN), blocks_decoded=0, geometry=geometry
        )

    def decode(self, latent: LatentBlock, state: SynthDecodeState) -> DecodedFrames:
        num = pixel_frame_count(self.config, latent.block_index)
        rng = keyed_generator(
            "decode",
            state.digest(),
            latent.data.tobytes(),
        )
        frames = rng.standard_normal((num, *self.frame_shape)) * 0.05
        slots = latent.data.reshape(-1)[:num]
        frames[:, 0, 0] = slots
        # Temporal update: later blocks condition on everything decoded so far.
        state.carry[...] = 0.5 * state.carry + 0.5 * latent.data.mean(axis=(0, 2, 3))
        state.blocks_decoded += 1
        return DecodedFrames(latent.block_index, tuple(frames))


class SyntheticScorer(ScorerInterface):
    """Reads back the reward the drafter embedded in each frame."""

    def score(self, frame, prompt: PromptSpec) -> float:
        return float(frame[0, 0])


class SyntheticDrafter(GeneratorInterface):
    """Fast generator whose block quality follows the calibrated distribution."""

    def __init__(self, quality: DraftQualityModel, config: GenerationConfig):
        self.quality = quality
        self.config = config

    @property
    def cost_class(self) -> Producer:
        return Producer.DRAFT

    def generate(
        self, noise_seed: int, kv: KVCache, block_index: int, prompt: PromptSpec
    ) -> LatentBlock:
        num = pixel_frame_count(self.config, block_index)
        scores = self.quality.sample_block_score(prompt.prompt_id, block_index, num)
        rng = keyed_generator("draft-noise", noise_seed, kv.tip_digest())
        data = rng.standard_normal(
            (self.config.latent_frames_per_block, LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH)
        )
        data.reshape(-1)[:num] = scores.scores
        return LatentBlock(block_index, data, Producer.DRAFT, noise_seed)


class SyntheticTarget(GeneratorInterface):
    """Slow, high-quality generator invoked on rejection."""

    def __init__(self, config: GenerationConfig, frame_score: float = TARGET_FRAME_SCORE):
        self.config = config
        self.frame_score = frame_score

    @property
    def cost_class(self) -> Producer:
        return Producer.TARGET

    def generate(
        self, noise_seed: int, kv: KVCache, block_index: int, prompt: PromptSpec
    ) -> LatentBlock:
        num = pixel_frame_count(self.config, block_index)
        rng = keyed_generator("target-noise", noise_seed, kv.tip_digest())
        data = rng.standard_normal(
            (self.config.latent_frames_per_block, LATENT_CHANNELS, LATENT_HEIGHT, LATENT_WIDTH)
        )
        data.reshape(-1)[:num] = self.frame_score
        return LatentBlock(block_index, data, Producer.TARGET, noise_seed)


@dataclass(frozen=True)
class SyntheticStack:
    drafter: SyntheticDrafter
    target: SyntheticTarget
    decoder: SyntheticDecoder
    scorer: SyntheticScorer


def build_synthetic_stack(calibration: Calibration, config: GenerationConfig) -> SyntheticStack:
    return SyntheticStack(
        drafter=SyntheticDrafter(calibration.quantile, config),
        target=SyntheticTarget(config),
        decoder=SyntheticDecoder(config),
        scorer=SyntheticScorer(),
    )

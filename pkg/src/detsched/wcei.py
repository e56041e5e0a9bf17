"""Instruction-budget functions: fit, evaluate, invert, validate, segment.

The central object is the line ``budget(t) = a*t - b`` mapping a duration of
``t`` cycles (t >= t_unit) to the number of instructions guaranteed to retire
within it from any starting point. ``a`` is the worst-case sustained rate
(instructions per cycle), ``b`` the startup deficit in instructions. Budgets
are floored and inverse times are ceiled so every rounding errs toward safety.

The guarantee quantifies over *every* integer duration, not only durations
that land on trace samples: with step-interpolated traces, a window that ends
just short of the next sample holds fewer instructions than the grid value,
and a budget sized from the grid alone could physically overrun its slot.
The fitting and validation below therefore charge each window pair with the
largest integer duration it covers.

All arithmetic is exact (integers and fractions); nothing here depends on
float rounding.
"""

import json
from dataclasses import dataclass, field
from fractions import Fraction
from statistics import median

import numpy as np

from .trace import ExecutionTrace, TraceSample

__all__ = [
    "WceiFunction",
    "Phase",
    "PhaseSegmentation",
    "LossReport",
    "SafetyViolation",
    "SafetyReport",
    "estimate_rate",
    "best_rate",
    "estimate_intercept",
    "evaluate",
    "invert",
    "fit_function",
    "worst_case_loss",
    "validate_safety",
    "segment_phases",
    "format_rational",
    "parse_rational",
    "wcei_document",
    "parse_wcei_document",
    "DEFAULT_T_UNIT",
]

# Default scheduling quantum: one millisecond on a 1 GHz part.
DEFAULT_T_UNIT = 1_000_000

_INT64_GUARD = 2**62


def parse_rational(value) -> Fraction:
    """Accept Fraction, int, decimal or num/den strings; floats via repr."""
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


def format_rational(value: Fraction) -> str:
    """Exact decimal string when one exists, else ``num/den``."""
    num, den = value.numerator, value.denominator
    if den == 1:
        return str(num)
    d, twos, fives = den, 0, 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{num}/{den}"
    k = max(twos, fives)
    scaled = abs(num) * 10**k // den
    digits = str(scaled).rjust(k + 1, "0")
    sign = "-" if num < 0 else ""
    return f"{sign}{digits[:-k]}.{digits[-k:]}"


@dataclass(frozen=True)
class WceiFunction:
    """The (a, b, t_unit) triple: rate, startup deficit, minimum quantum."""

    a: Fraction
    b: int
    t_unit: int

    def __post_init__(self):
        object.__setattr__(self, "a", parse_rational(self.a))
        object.__setattr__(self, "b", int(self.b))
        object.__setattr__(self, "t_unit", int(self.t_unit))
        if self.a <= 0:
            raise ValueError("rate a must be > 0")
        if self.b < 0:
            raise ValueError("intercept b must be >= 0")
        if self.t_unit < 1:
            raise ValueError("t_unit must be >= 1")
        if self.a * self.t_unit < self.b:
            raise ValueError(
                f"a*t_unit must cover b (a={self.a}, b={self.b}, t_unit={self.t_unit}); "
                "b is too large relative to t_unit"
            )


def evaluate(f: WceiFunction, t: int) -> int:
    """Instructions guaranteed within t cycles: floor(a*t - b). Requires t >= t_unit."""
    t = int(t)
    if t < f.t_unit:
        raise ValueError(f"duration {t} below t_unit {f.t_unit}")
    num, den = f.a.numerator, f.a.denominator
    return (num * t - f.b * den) // den


def invert(f: WceiFunction, i: int) -> int:
    """Cycles that retiring i instructions may take: ceil((i + b) / a)."""
    i = int(i)
    if i < 0:
        raise ValueError("instruction count must be >= 0")
    num, den = f.a.numerator, f.a.denominator
    return -(-(i + f.b) * den // num)


@dataclass(frozen=True)
class Phase:
    start_instruction: int
    end_instruction: int
    function: WceiFunction

    def __post_init__(self):
        if not (0 <= self.start_instruction < self.end_instruction):
            raise ValueError(
                f"phase range [{self.start_instruction}, {self.end_instruction}) is empty"
            )


@dataclass(frozen=True)
class PhaseSegmentation:
    """Contiguous instruction ranges, each with its own budget function."""

    phases: tuple[Phase, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ValueError("segmentation needs at least one phase")
        if self.phases[0].start_instruction != 0:
            raise ValueError("first phase must start at instruction 0")
        for prev, cur in zip(self.phases, self.phases[1:]):
            if cur.start_instruction != prev.end_instruction:
                raise ValueError(
                    f"phases not contiguous at instruction {prev.end_instruction}"
                )
        t_units = {p.function.t_unit for p in self.phases}
        if len(t_units) != 1:
            raise ValueError("all phase functions must share one t_unit")

    @property
    def total_instructions(self) -> int:
        return self.phases[-1].end_instruction

    @property
    def t_unit(self) -> int:
        return self.phases[0].function.t_unit

    def phase_at(self, instruction: int) -> tuple[int, Phase]:
        """Phase containing the given instruction offset."""
        if not (0 <= instruction < self.total_instructions):
            raise ValueError(
                f"instruction {instruction} outside [0, {self.total_instructions})"
            )
        starts = [p.start_instruction for p in self.phases]
        idx = int(np.searchsorted(starts, instruction, side="right")) - 1
        return idx, self.phases[idx]


@dataclass(frozen=True)
class LossReport:
    """Worst-case utilization loss of a fitted rate against the best observed rate."""

    wcei_rate: Fraction
    best_rate: Fraction
    worst_loss_percent: Fraction


@dataclass(frozen=True)
class SafetyViolation:
    start: int
    duration: int
    guaranteed: int
    observed: int


@dataclass
class SafetyReport:
    safe: bool
    violations: list[SafetyViolation] = field(default_factory=list)


# -- rate estimation ---------------------------------------------------------


def _window_counts(trace: ExecutionTrace, t_unit: int) -> np.ndarray:
    t_unit = int(t_unit)
    if t_unit < 1:
        raise ValueError("t_unit must be >= 1")
    cycles, retired = trace.cycles, trace.retired
    if trace.duration < t_unit:
        raise ValueError(
            f"trace duration {trace.duration} shorter than t_unit {t_unit}"
        )
    starts = cycles <= cycles[-1] - t_unit
    idx = np.searchsorted(cycles, cycles[starts] + t_unit, side="right") - 1
    return retired[idx] - retired[starts]


def estimate_rate(trace: ExecutionTrace, t_unit: int) -> Fraction:
    """Worst sustained rate: the minimum instruction count over any window of
    t_unit cycles anchored at a sample, divided by t_unit."""
    return Fraction(int(_window_counts(trace, t_unit).min()), int(t_unit))


def best_rate(trace: ExecutionTrace, t_unit: int) -> Fraction:
    """Best sustained rate: max counterpart of estimate_rate."""
    return Fraction(int(_window_counts(trace, t_unit).max()), int(t_unit))


# -- intercept fitting and safety validation ---------------------------------
#
# With a = num/den, start sample i and end sample j, the binding constraints
# on b over all integer durations t >= t_unit are:
#
#   (A) for j < last, t in [max(t_unit, c_j - c_i), c_{j+1} - c_i - 1]:
#       b > a*(c_{j+1} - 1 - c_i) - (r_j - r_i) - 1
#   (B) t = c_last - c_i exactly:
#       b > a*(c_last - c_i) - (r_last - r_i) - 1
#
# Both reduce to den*b > P - Q_i - den with P from the window end and
# Q_i = num*c_i - den*r_i, so a prefix minimum over Q and a suffix maximum
# over P evaluate every pair in O(n log n).


def _deficit_terms(trace: ExecutionTrace, a: Fraction, t_unit: int):
    num, den = a.numerator, a.denominator
    cycles, retired = trace.cycles, trace.retired
    c_last, r_last = int(cycles[-1]), int(retired[-1])
    bound = max(num * (c_last + 1), den * (r_last + 1)) * 2
    if bound < _INT64_GUARD:
        q = num * cycles - den * retired
        p_a = num * (cycles[1:] - 1) - den * retired[:-1]
    else:
        cl = [int(c) for c in cycles]
        rl = [int(r) for r in retired]
        q = np.asarray([num * c - den * r for c, r in zip(cl, rl)], dtype=object)
        p_a = np.asarray(
            [num * (cl[j + 1] - 1) - den * rl[j] for j in range(len(cl) - 1)],
            dtype=object,
        )
    p_b = num * c_last - den * r_last
    return q, p_a, p_b


def estimate_intercept(trace: ExecutionTrace, a, t_unit: int) -> int:
    """Smallest intercept b >= 0 such that floor(a*t - b) never exceeds the
    instructions observed in any window of any integer duration t >= t_unit."""
    a = parse_rational(a)
    if a <= 0:
        raise ValueError("rate a must be > 0")
    t_unit = int(t_unit)
    if trace.duration < t_unit:
        raise ValueError(
            f"trace duration {trace.duration} shorter than t_unit {t_unit}"
        )
    den = a.denominator
    cycles = trace.cycles
    q, p_a, p_b = _deficit_terms(trace, a, t_unit)
    prefmin_q = np.minimum.accumulate(q)

    best = None
    # (A) terms: ends at sample j+1, starts with c_i <= c_{j+1} - t_unit - 1.
    cut = np.searchsorted(cycles, cycles[1:] - t_unit - 1, side="right")
    valid = cut > 0
    if valid.any():
        terms = p_a[valid] - prefmin_q[cut[valid] - 1]
        best = int(terms.max())
    # (B) terms: full windows to the trace end, c_i <= c_last - t_unit.
    cut_b = int(np.searchsorted(cycles, cycles[-1] - t_unit, side="right"))
    if cut_b > 0:
        term_b = int(p_b - prefmin_q[cut_b - 1])
        best = term_b if best is None else max(best, term_b)
    if best is None:
        raise ValueError("no window of t_unit cycles fits inside the trace")
    # smallest integer b with den*b > best - den
    return max(0, -(-(best - den + 1) // den))


def fit_function(trace: ExecutionTrace, t_unit: int, rate_margin=0) -> WceiFunction:
    """Fit (a, b) on a trace; `rate_margin` derates a for headroom against
    timing perturbations (0.1 keeps 90% of the estimated worst rate)."""
    margin = parse_rational(rate_margin)
    if not (0 <= margin < 1):
        raise ValueError("rate_margin must be in [0, 1)")
    a = estimate_rate(trace, t_unit) * (1 - margin)
    if a <= 0:
        raise ValueError("trace contains an empty window; cannot fit a positive rate")
    b = estimate_intercept(trace, a, t_unit)
    return WceiFunction(a=a, b=b, t_unit=t_unit)


def validate_safety(f: WceiFunction, trace: ExecutionTrace) -> SafetyReport:
    """Check floor(a*t - b) <= observed instructions for every sampled start
    and every integer duration t in [t_unit, trace end - start].

    Violations are data, not errors; one violation is reported per offending
    start position, at the duration with the largest deficit.
    """
    t_unit = f.t_unit
    if trace.duration < t_unit:
        return SafetyReport(safe=True)
    den = f.a.denominator
    cycles, retired = trace.cycles, trace.retired
    n = len(cycles)
    q, p_a, p_b = _deficit_terms(trace, f.a, t_unit)

    # Suffix max (and a deterministic argmax) over the (A) window-end terms.
    if n > 1:
        rev = p_a[::-1]
        racc = np.maximum.accumulate(rev)
        at_max = np.asarray(rev == racc, dtype=bool)
        pos = np.where(at_max, np.arange(n - 1), -1)
        rev_arg = np.maximum.accumulate(pos)
        suffix_max = racc[::-1]
        suffix_arg = (n - 2) - rev_arg[::-1]

    threshold = den * (f.b + 1)
    c_last, r_last = int(cycles[-1]), int(retired[-1])
    violations: list[SafetyViolation] = []
    jmin = np.searchsorted(cycles, cycles + t_unit + 1, side="left") - 1
    b_ok_limit = c_last - t_unit
    for i in range(n):
        qi = q[i]
        best = None
        best_j = -1
        j0 = int(jmin[i])
        if n > 1 and j0 <= n - 2:
            j0 = max(j0, 0)
            best = suffix_max[j0] - qi
            best_j = int(suffix_arg[j0])
        if int(cycles[i]) <= b_ok_limit:
            term_b = p_b - qi
            if best is None or term_b > best:
                best = term_b
                best_j = -1
        if best is None or best < threshold:
            continue
        start = int(cycles[i])
        if best_j >= 0:
            duration = int(cycles[best_j + 1]) - 1 - start
            observed = int(retired[best_j]) - int(retired[i])
        else:
            duration = c_last - start
            observed = r_last - int(retired[i])
        violations.append(
            SafetyViolation(
                start=start,
                duration=duration,
                guaranteed=evaluate(f, duration),
                observed=observed,
            )
        )
    return SafetyReport(safe=not violations, violations=violations)


def worst_case_loss(wcei_rate, best_rate) -> LossReport:
    """Utilization loss of scheduling at the worst-case rate: 100*(best - wcei)/best."""
    wcei_rate = parse_rational(wcei_rate)
    best_rate = parse_rational(best_rate)
    if wcei_rate <= 0:
        raise ValueError("wcei_rate must be > 0")
    if wcei_rate > best_rate:
        raise ValueError(
            f"wcei_rate {wcei_rate} exceeds best_rate {best_rate}"
        )
    loss = 100 * (best_rate - wcei_rate) / best_rate
    return LossReport(wcei_rate=wcei_rate, best_rate=best_rate, worst_loss_percent=loss)


# -- phase segmentation -------------------------------------------------------


def _subtrace(trace: ExecutionTrace, c_lo: int, c_hi: int, label: str) -> ExecutionTrace:
    """Slice [c_lo, c_hi] out of a trace, rebased to (0, 0)."""
    r_lo = trace.retired_at(c_lo)
    lo = int(np.searchsorted(trace.cycles, c_lo, side="right"))
    hi = int(np.searchsorted(trace.cycles, c_hi, side="right"))
    samples = [TraceSample(0, 0)]
    samples.extend(
        TraceSample(int(c) - c_lo, int(r) - r_lo)
        for c, r in zip(trace.cycles[lo:hi], trace.retired[lo:hi])
    )
    return ExecutionTrace(samples, label=label)


def segment_phases(
    trace: ExecutionTrace, t_unit: int, split_threshold
) -> PhaseSegmentation:
    """Greedy rate-change segmentation of the retirement curve.

    Consecutive t_unit windows are scanned left to right; a new phase opens
    whenever a window's rate deviates from the running median of the current
    phase by more than `split_threshold` (relative). Each phase then gets its
    own fitted function. Degenerate phases (no retired instructions) merge
    into their predecessor, and the sub-t_unit tail joins the final phase.
    """
    threshold = parse_rational(split_threshold)
    if threshold <= 0:
        raise ValueError("split_threshold must be > 0")
    t_unit = int(t_unit)
    if trace.duration < 2 * t_unit:
        raise ValueError(
            f"trace duration {trace.duration} too short to segment at t_unit {t_unit}"
        )
    base = trace.start
    n_windows = trace.duration // t_unit
    rates = []
    for k in range(n_windows):
        lo = base + k * t_unit
        w = trace.retired_at(lo + t_unit) - trace.retired_at(lo)
        rates.append(Fraction(w, t_unit))

    # Greedy split on running-median deviation.
    breaks = [0]
    current: list[Fraction] = []
    for k, rate in enumerate(rates):
        if current:
            med = median(current)
            if abs(rate - med) > threshold * med:
                breaks.append(k)
                current = []
        current.append(rate)
    breaks.append(n_windows)

    # Window-index ranges to cycle ranges; the tail joins the last phase.
    bounds = []
    for s_idx, e_idx in zip(breaks, breaks[1:]):
        c_lo = base + s_idx * t_unit
        c_hi = base + e_idx * t_unit
        bounds.append([c_lo, c_hi])
    bounds[-1][1] = trace.end

    # Drop stretches that retire nothing: fold them into a neighbour so every
    # phase covers a non-empty instruction range.
    merged: list[list[int]] = []
    pending_lo: int | None = None
    for c_lo, c_hi in bounds:
        lo = c_lo if pending_lo is None else pending_lo
        if trace.retired_at(lo) == trace.retired_at(c_hi):
            if merged:
                merged[-1][1] = c_hi
                pending_lo = None
            else:
                pending_lo = lo
            continue
        merged.append([lo, c_hi])
        pending_lo = None
    if pending_lo is not None and merged:
        merged[-1][1] = trace.end
    if not merged:
        raise ValueError("trace retires no instructions; nothing to segment")

    phases = []
    for idx, (c_lo, c_hi) in enumerate(merged):
        sub = _subtrace(trace, c_lo, c_hi, label=f"{trace.label}/phase{idx}")
        f = fit_function(sub, t_unit)
        phases.append(
            Phase(
                start_instruction=trace.retired_at(c_lo),
                end_instruction=trace.retired_at(c_hi),
                function=f,
            )
        )
    return PhaseSegmentation(phases=tuple(phases))


# -- on-disk form -------------------------------------------------------------
#
# Budget functions travel as JSON so scheduler configs stay diffable:
# {"label": ..., "t_unit": N, "phases": [{"start_instruction": N,
#  "end_instruction": N, "a": "<exact decimal or num/den>", "b": N}, ...]}


def wcei_document(label: str, segmentation: PhaseSegmentation) -> dict:
    return {
        "label": label,
        "t_unit": segmentation.t_unit,
        "phases": [
            {
                "start_instruction": p.start_instruction,
                "end_instruction": p.end_instruction,
                "a": format_rational(p.function.a),
                "b": p.function.b,
            }
            for p in segmentation.phases
        ],
    }


def wcei_document_text(label: str, segmentation: PhaseSegmentation) -> str:
    return json.dumps(wcei_document(label, segmentation), indent=2, sort_keys=True) + "\n"


def parse_wcei_document(text: str) -> tuple[str, PhaseSegmentation]:
    doc = json.loads(text)
    t_unit = int(doc["t_unit"])
    phases = tuple(
        Phase(
            start_instruction=int(p["start_instruction"]),
            end_instruction=int(p["end_instruction"]),
            function=WceiFunction(
                a=parse_rational(p["a"]), b=int(p["b"]), t_unit=t_unit
            ),
        )
        for p in doc["phases"]
    )
    return str(doc.get("label", "")), PhaseSegmentation(phases=phases)


def single_phase(f: WceiFunction, total_instructions: int) -> PhaseSegmentation:
    """Wrap a single function as a one-phase segmentation over a whole job."""
    return PhaseSegmentation(
        phases=(Phase(0, int(total_instructions), f),)
    )

"""Execution traces: cumulative retired-instruction counts over processor cycles.

A trace is a monotone sequence of (cycle, retired) samples. It is the profiling
substrate for fitting instruction-budget functions and the physical execution
model for simulated tasks. Traces are immutable after construction and safe to
share across threads.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Union

import numpy as np

__all__ = [
    "TraceSample",
    "ExecutionTrace",
    "ProcessorModel",
    "TraceFormatError",
    "load_trace",
    "store_trace",
    "generate_trace",
    "instructions_in_window",
    "retirement_cycle",
]

# Jitter is drawn once per chunk of this many instructions, independent of the
# sample stride, so that fine-grained sampling does not change the noise model.
JITTER_CHUNK_INSTRUCTIONS = 64

# Jitter amplitudes are quantized to 1/1000 so all cycle arithmetic stays integral.
_JITTER_RESOLUTION = 1000


class TraceFormatError(ValueError):
    """Raised for malformed or invariant-violating trace input."""


class TraceSample(NamedTuple):
    cycle: int
    retired: int


def _as_fraction(value) -> Fraction:
    if isinstance(value, float):
        # Floats go through their shortest repr so 0.56 means 56/100, not the
        # nearest binary fraction.
        return Fraction(str(value))
    return Fraction(value)


class ExecutionTrace:
    """Immutable (cycle, retired) step curve.

    Retired counts between samples are interpolated conservatively: the value
    at a query cycle is the last sample at or before it, so window queries
    never over-count instructions.
    """

    __slots__ = ("label", "_cycles", "_retired")

    def __init__(self, samples: Iterable[TraceSample], label: str = ""):
        pairs = [(int(c), int(r)) for c, r in samples]
        if not pairs:
            raise TraceFormatError("trace must contain at least one sample")
        cycles = np.asarray([p[0] for p in pairs], dtype=np.int64)
        retired = np.asarray([p[1] for p in pairs], dtype=np.int64)
        if pairs[0][1] != 0:
            raise TraceFormatError(
                f"first sample must have retired = 0, got {pairs[0][1]}"
            )
        if cycles[0] < 0:
            raise TraceFormatError("cycle values must be non-negative")
        if len(cycles) > 1:
            dc = np.diff(cycles)
            if (dc <= 0).any():
                idx = int(np.argmax(dc <= 0)) + 1
                raise TraceFormatError(f"non-monotone cycle at sample {idx}")
            dr = np.diff(retired)
            if (dr < 0).any():
                idx = int(np.argmax(dr < 0)) + 1
                raise TraceFormatError(f"decreasing retired count at sample {idx}")
        self.label = label
        self._cycles = cycles
        self._retired = retired
        self._cycles.setflags(write=False)
        self._retired.setflags(write=False)

    # -- basic accessors ----------------------------------------------------

    def __len__(self) -> int:
        return len(self._cycles)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExecutionTrace):
            return NotImplemented
        return (
            np.array_equal(self._cycles, other._cycles)
            and np.array_equal(self._retired, other._retired)
        )

    def __repr__(self) -> str:
        return (
            f"ExecutionTrace(label={self.label!r}, samples={len(self)}, "
            f"end={self.end}, retired={self.final_retired})"
        )

    @property
    def samples(self) -> list[TraceSample]:
        return [TraceSample(int(c), int(r)) for c, r in zip(self._cycles, self._retired)]

    @property
    def cycles(self) -> np.ndarray:
        return self._cycles

    @property
    def retired(self) -> np.ndarray:
        return self._retired

    @property
    def start(self) -> int:
        return int(self._cycles[0])

    @property
    def end(self) -> int:
        return int(self._cycles[-1])

    @property
    def duration(self) -> int:
        return int(self._cycles[-1] - self._cycles[0])

    @property
    def final_retired(self) -> int:
        return int(self._retired[-1])

    def retired_at(self, cycle: int) -> int:
        """Retired count at `cycle`, step-interpolated (last sample <= cycle)."""
        cycle = int(cycle)
        if cycle < self.start or cycle > self.end:
            raise ValueError(
                f"cycle {cycle} outside trace bounds [{self.start}, {self.end}]"
            )
        idx = int(np.searchsorted(self._cycles, cycle, side="right")) - 1
        return int(self._retired[idx])


@dataclass(frozen=True)
class ProcessorModel:
    """Piecewise-throughput model of how a processor retires instructions.

    Throughput starts at `cold_ipc` until `warmup_instructions` have retired,
    then runs at `hot_ipc`. Periodic locality dips slow the last
    `locality_dip_span` instructions of every `locality_dip_period`-instruction
    stretch by a factor of (1 - locality_dip_depth). Seeded jitter adds a
    bounded per-chunk slowdown of at most `jitter_amplitude` (relative).
    Generated throughput never exceeds `hot_ipc` and never reaches zero, and
    the generated trace is a pure function of the model and instruction count.
    """

    hot_ipc: Fraction
    cold_ipc: Fraction
    warmup_instructions: int = 0
    locality_dip_period: int = 0
    locality_dip_span: int = 0
    locality_dip_depth: Fraction = Fraction(0)
    jitter_amplitude: Fraction = Fraction(0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hot_ipc", _as_fraction(self.hot_ipc))
        object.__setattr__(self, "cold_ipc", _as_fraction(self.cold_ipc))
        object.__setattr__(self, "locality_dip_depth", _as_fraction(self.locality_dip_depth))
        object.__setattr__(self, "jitter_amplitude", _as_fraction(self.jitter_amplitude))
        if self.hot_ipc <= 0:
            raise ValueError("hot_ipc must be > 0")
        if not (0 < self.cold_ipc <= self.hot_ipc):
            raise ValueError("cold_ipc must be in (0, hot_ipc]")
        if not (0 <= self.locality_dip_depth < 1):
            raise ValueError("locality_dip_depth must be in [0, 1)")
        if self.jitter_amplitude < 0:
            raise ValueError("jitter_amplitude must be >= 0")
        if self.locality_dip_period:
            if self.locality_dip_span <= 0 or self.locality_dip_span > self.locality_dip_period:
                raise ValueError("locality_dip_span must be in (0, locality_dip_period]")
        if self.warmup_instructions < 0 or self.seed < 0:
            raise ValueError("warmup_instructions and seed must be non-negative")


def _ceil_div(p: int, q: int) -> int:
    return -(-p // q)


def generate_trace(
    model: ProcessorModel,
    total_instructions: int,
    sample_stride: int = 64,
    label: str | None = None,
) -> ExecutionTrace:
    """Synthesize a trace of `total_instructions` retirements under `model`.

    One sample is emitted every `sample_stride` instructions plus a final
    sample at the total. Cycle costs are computed segment-by-segment with
    exact integer arithmetic (ceiling division), so identical arguments always
    produce identical traces.
    """
    total = int(total_instructions)
    if total <= 0:
        raise ValueError("total_instructions must be > 0")
    stride = int(sample_stride)
    if stride <= 0:
        raise ValueError("sample_stride must be > 0")

    rng = np.random.default_rng(model.seed)
    amp_permille = int(model.jitter_amplitude * _JITTER_RESOLUTION)

    hot_n, hot_d = model.hot_ipc.numerator, model.hot_ipc.denominator
    cold_n, cold_d = model.cold_ipc.numerator, model.cold_ipc.denominator
    dip_keep = 1 - model.locality_dip_depth  # throughput multiplier inside a dip
    keep_n, keep_d = dip_keep.numerator, dip_keep.denominator
    period = model.locality_dip_period
    span = model.locality_dip_span
    warm = model.warmup_instructions

    out_cycles = [0]
    out_retired = [0]
    cum_cycles = 0
    done = 0
    jitter_chunk = -1
    jitter_mult = _JITTER_RESOLUTION  # numerator of (1 + jitter) in 1/1000 units

    while done < total:
        boundaries = [total]
        if done < warm:
            boundaries.append(warm)
        if period:
            pos = done % period
            dip_start = period - span
            if pos < dip_start:
                boundaries.append(done + (dip_start - pos))
            else:
                boundaries.append(done + (period - pos))
        next_sample = (done // stride + 1) * stride
        boundaries.append(next_sample)
        if amp_permille:
            next_chunk = (done // JITTER_CHUNK_INSTRUCTIONS + 1) * JITTER_CHUNK_INSTRUCTIONS
            boundaries.append(next_chunk)
            chunk = done // JITTER_CHUNK_INSTRUCTIONS
            if chunk != jitter_chunk:
                jitter_chunk = chunk
                jitter_mult = _JITTER_RESOLUTION + int(rng.integers(0, amp_permille + 1))
        nxt = min(boundaries)
        count = nxt - done

        if done < warm:
            ipc_n, ipc_d = cold_n, cold_d
        else:
            ipc_n, ipc_d = hot_n, hot_d
        if period and (done % period) >= period - span:
            ipc_n, ipc_d = ipc_n * keep_n, ipc_d * keep_d
        # cycles = ceil(count / ipc * jitter_mult / 1000), all integer math
        cum_cycles += _ceil_div(count * ipc_d * jitter_mult, ipc_n * _JITTER_RESOLUTION)
        done = nxt
        if done % stride == 0 or done == total:
            out_cycles.append(cum_cycles)
            out_retired.append(done)

    if label is None:
        label = f"synthetic-seed{model.seed}"
    return ExecutionTrace(zip(out_cycles, out_retired), label=label)


def instructions_in_window(trace: ExecutionTrace, start: int, duration: int) -> int:
    """Instructions retired in [start, start + duration], step-interpolated.

    Conservative: retired counts at non-sample cycles are taken from the last
    sample at or before the query cycle, so the result never over-counts.
    """
    start = int(start)
    duration = int(duration)
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if start < trace.start or start + duration > trace.end:
        raise ValueError(
            f"window [{start}, {start + duration}] exceeds trace bounds "
            f"[{trace.start}, {trace.end}]"
        )
    return trace.retired_at(start + duration) - trace.retired_at(start)


def retirement_cycle(trace: ExecutionTrace, instruction_count: int) -> int:
    """Smallest sampled cycle at which `instruction_count` instructions have retired."""
    k = int(instruction_count)
    if k < 0:
        raise ValueError("instruction_count must be >= 0")
    if k > trace.final_retired:
        raise ValueError(
            f"instruction_count {k} beyond trace total {trace.final_retired}"
        )
    idx = int(np.searchsorted(trace.retired, k, side="left"))
    return int(trace.cycles[idx])


# -- CSV interchange --------------------------------------------------------

_HEADER = "cycle,retired"

_Source = Union[str, Path, IO]


def load_trace(source: _Source, label: str = "") -> ExecutionTrace:
    """Load a trace from CSV (`cycle,retired` header, one sample per row).

    Rejects malformed rows, non-monotone cycles and decreasing retired counts
    with a line-numbered diagnostic. The header line is optional on input so
    raw counter logs can be ingested directly.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        text = path.read_text()
        if not label:
            label = path.stem
    else:
        data = source.read()
        text = data.decode() if isinstance(data, bytes) else data

    pairs: list[tuple[int, int]] = []
    prev_cycle = -1
    prev_retired = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if lineno == 1 and line.lower() == _HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise TraceFormatError(f"malformed row at line {lineno}: {raw!r}")
        try:
            cycle, retired = int(parts[0]), int(parts[1])
        except ValueError:
            raise TraceFormatError(f"malformed row at line {lineno}: {raw!r}") from None
        if cycle < 0 or retired < 0:
            raise TraceFormatError(f"negative value at line {lineno}")
        if cycle <= prev_cycle:
            raise TraceFormatError(f"non-monotone cycle at line {lineno}")
        if retired < prev_retired:
            raise TraceFormatError(f"decreasing retired count at line {lineno}")
        if not pairs and retired != 0:
            raise TraceFormatError(
                f"first sample must have retired = 0 at line {lineno}"
            )
        pairs.append((cycle, retired))
        prev_cycle, prev_retired = cycle, retired
    if not pairs:
        raise TraceFormatError("empty trace file")
    return ExecutionTrace(pairs, label=label)


def store_trace(trace: ExecutionTrace, dest: _Source) -> None:
    """Write a trace as CSV with the `cycle,retired` header."""
    lines = [_HEADER]
    lines.extend(f"{int(c)},{int(r)}" for c, r in zip(trace.cycles, trace.retired))
    body = "\n".join(lines) + "\n"
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(body)
    else:
        dest.write(body)

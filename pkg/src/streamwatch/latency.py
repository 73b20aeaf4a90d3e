"""Decoder-induced ingestion backlog: closed forms and a discrete-event check.

The closed forms treat the stream as a fluid. The simulator instead pushes
individual segments through a single FIFO server with service time ``1/mu``
and pauses the server during decoding windows (interleaved mode only), so
the formulas can be checked against an independent mechanism.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidHorizon, InvalidRates

DIVERGENT = math.inf


class LatencyMode(enum.Enum):
    INTERLEAVED = "interleaved"
    DECOUPLED = "decoupled"

    @classmethod
    def coerce(cls, value: "LatencyMode | str") -> "LatencyMode":
        return value if isinstance(value, cls) else cls(str(value).lower())


@dataclass(frozen=True)
class RateConfig:
    """Stream rates. ``decode_period`` is the spacing of decode windows;
    ``overhead_s`` is residual downtime per window in decoupled mode."""

    lambda_: float
    mu: float
    t_dec: float
    c_tok: float = 0.0
    l_tokens: float = 0.0
    decode_period: float | None = None
    overhead_s: float = 0.0

    def __post_init__(self) -> None:
        if not (self.lambda_ > 0 and self.mu > 0):
            raise InvalidRates("arrival and processing rates must be positive")
        if self.t_dec < 0 or self.c_tok < 0 or self.l_tokens < 0 or self.overhead_s < 0:
            raise InvalidRates("durations and token counts must be non-negative")
        if self.decode_period is not None and self.decode_period <= self.t_dec:
            raise InvalidRates("decode_period must exceed t_dec")

    @property
    def rho(self) -> float:
        return self.lambda_ / self.mu


def backlog_closed_form(cfg: RateConfig) -> float:
    return cfg.lambda_ * cfg.t_dec


def _amplification(rho: float) -> float:
    return rho / (1.0 - rho) if rho < 1 else DIVERGENT


def catch_up_closed_form(cfg: RateConfig) -> float:
    """Seconds to drain the decode backlog; ``inf`` when rho >= 1."""
    amp = _amplification(cfg.rho)
    return amp * cfg.t_dec if math.isfinite(amp) else DIVERGENT


def quality_coupling(cfg: RateConfig) -> float:
    """Catch-up cost of decoding ``l_tokens`` tokens at ``c_tok`` s/token."""
    amp = _amplification(cfg.rho)
    return amp * cfg.c_tok * cfg.l_tokens if math.isfinite(amp) else DIVERGENT


@dataclass
class CycleStats:
    start_s: float
    end_s: float
    pre_backlog: int
    peak_backlog: int
    catch_up_s: float  # inf if the backlog never returned within the horizon


@dataclass
class BacklogTrace:
    mode: LatencyMode
    samples: list[tuple[float, int]]
    catch_up_s: float
    cycles: list[CycleStats] = field(default_factory=list)

    def backlog_at(self, t: float) -> int:
        times = [s[0] for s in self.samples]
        i = bisect.bisect_right(times, t) - 1
        return self.samples[max(i, 0)][1]


def default_period(cfg: RateConfig) -> float:
    catch = catch_up_closed_form(cfg)
    slack = 4.0 / cfg.lambda_ + 4.0 / cfg.mu
    if math.isfinite(catch):
        return 1.25 * (cfg.t_dec + catch) + slack
    return 2.0 * cfg.t_dec + slack


def required_horizon(cfg: RateConfig) -> float:
    """Shortest horizon that contains the first decode window and its catch-up."""
    period = cfg.decode_period or default_period(cfg)
    catch = catch_up_closed_form(cfg)
    first = 0.5 * period
    return first + cfg.t_dec + (catch if math.isfinite(catch) else 0.0) + 2.0 / cfg.mu


def _arrival_times(cfg: RateConfig, horizon: float, arrivals: str, seed: int) -> np.ndarray:
    if arrivals == "deterministic":
        n = int(math.floor(horizon * cfg.lambda_ - 0.5)) + 1
        return (np.arange(max(n, 0)) + 0.5) / cfg.lambda_
    if arrivals == "poisson":
        rng = np.random.default_rng(seed)
        out, t = [], 0.0
        while True:
            t += rng.exponential(1.0 / cfg.lambda_)
            if t > horizon:
                return np.asarray(out)
            out.append(t)
    raise InvalidRates(f"unknown arrival process {arrivals!r}")


def simulate(
    cfg: RateConfig,
    mode: LatencyMode | str,
    horizon_s: float,
    sample_dt: float,
    arrivals: str = "deterministic",
    seed: int = 0,
) -> BacklogTrace:
    """Run the single-server queue with periodic decode windows.

    Backlog counts segments that have arrived but are not fully processed.
    In interleaved mode the server is paused (preempt-resume) for ``t_dec``
    seconds per window; in decoupled mode only for ``overhead_s``.
    """
    mode = LatencyMode.coerce(mode)
    if not sample_dt > 0:
        raise InvalidHorizon("sample_dt must be positive")
    if horizon_s < required_horizon(cfg):
        raise InvalidHorizon(
            f"horizon {horizon_s} s is shorter than one decode/catch-up cycle ({required_horizon(cfg):.6g} s)"
        )
    period = cfg.decode_period or default_period(cfg)
    windows = []
    # deterministic arrivals sit at (k + 1/2)/lambda; start windows between them
    start = round(0.5 * period * cfg.lambda_) / cfg.lambda_
    while start < horizon_s:
        windows.append((start, start + cfg.t_dec))
        start += period
    pause = cfg.t_dec if mode is LatencyMode.INTERLEAVED else min(cfg.overhead_s, cfg.t_dec)

    arr = _arrival_times(cfg, horizon_s, arrivals, seed)
    service = 1.0 / cfg.mu

    # piecewise-constant backlog: value after each change point
    times: list[float] = [0.0]
    levels: list[int] = [0]

    t = 0.0
    n = 0
    remaining = 0.0  # work left on the job at the head of the queue
    ai = 0
    wi = 0
    paused_until = -1.0
    pause_start = math.inf if not windows else windows[0][0]

    def record(now: float, level: int) -> None:
        if times[-1] == now:
            levels[-1] = level
        else:
            times.append(now)
            levels.append(level)

    while True:
        serving = n > 0 and not (t < paused_until)
        next_completion = t + remaining if serving else math.inf
        next_arrival = arr[ai] if ai < len(arr) else math.inf
        next_pause = pause_start if pause > 0 else math.inf
        next_resume = paused_until if paused_until > t else math.inf
        t_next = min(next_completion, next_arrival, next_pause, next_resume)
        if t_next > horizon_s:
            break
        if serving:
            remaining -= t_next - t
        t = t_next
        if t == next_completion:
            n -= 1
            remaining = service if n > 0 else 0.0
            record(t, n)
        elif t == next_arrival:
            if n == 0:
                remaining = service
            n += 1
            ai += 1
            record(t, n)
        elif t == next_pause:
            paused_until = t + pause
            wi += 1
            pause_start = windows[wi][0] if wi < len(windows) else math.inf
        # resume needs no state change beyond the clock

    level_times = np.asarray(times)
    level_vals = np.asarray(levels)

    def level_at(x: float) -> int:
        return int(level_vals[np.searchsorted(level_times, x, side="right") - 1])

    cycles = []
    for ws, we in windows:
        if we > horizon_s:
            break
        pre = level_at(ws)
        i0 = np.searchsorted(level_times, ws, side="left")
        i1 = np.searchsorted(level_times, we, side="right")
        peak = int(level_vals[max(i0 - 1, 0) : i1].max())
        if level_at(we) <= pre:
            catch = 0.0
        else:
            later = np.flatnonzero((level_times > we) & (level_vals <= pre))
            catch = float(level_times[later[0]] - we) if later.size else math.inf
        cycles.append(CycleStats(ws, we, pre, peak, catch))

    grid = np.arange(0.0, horizon_s + 0.5 * sample_dt, sample_dt)
    grid = grid[grid <= horizon_s + 1e-12]
    idx = np.searchsorted(level_times, grid, side="right") - 1
    samples = [(float(g), int(level_vals[i])) for g, i in zip(grid, idx)]
    catch_up = cycles[0].catch_up_s if cycles else math.inf
    return BacklogTrace(mode, samples, catch_up, cycles)

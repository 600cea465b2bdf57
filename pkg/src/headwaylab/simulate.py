"""Discrete-event simulation of buses cycling through patches.

Each bus sojourns in its current patch for a phase-type time (Erlang or
hyper-Erlang) and then departs into the next patch, wrapping at the loop end.
Three control mechanisms can modify departures:

* implicit timetable: at the two terminus patches a bus leaves at its
  scheduled slot r*d_i + r*(i-1)/beta + c_j, where d_i counts completed
  loops and c_j is the cumulative-mean anchor of the patch.  The scheduled
  slot replaces the fitted terminus sojourn: the empirical dwell at a
  terminus is exactly the wait for the next scheduled departure, so drawing
  both would double-count it and make the schedule unkeepable (see README);
  a late bus departs immediately on arrival.
* bus holding: no departure from patch j until the time since the previous
  departure from j reaches theta_h.
* speed modification: when a bus leads its follower by more than a fraction
  theta_s of the route, its subsequently drawn phase rates are scaled by the
  slowdown factor (phase-level simulation).

All per-patch metrics are keyed on departures from the patch: c_j counts
departures from j, z_ij is the time since bus i last departed j, y_j the time
since the last departure from j by any bus, and H_j the number of buses that
departed j within the trailing hour.
"""

from __future__ import annotations

import heapq
import math
import time as _time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .fitting import Distribution, ErlangParams, HyperErlangParams, PatchModel

HOUR = 3600.0


class SimError(ValueError):
    pass


@dataclass
class SimConfig:
    n_buses: int
    timetable: bool = True
    route_duration: float | None = None  # r; defaults to the sum of patch means
    terminus_patches: tuple[int, int] | None = None  # 1-based patch indices
    holding_threshold: float | None = None  # theta_h seconds
    speedmod_threshold: float | None = None  # theta_s, fraction of the route
    slowdown: float = 0.9
    init: str = "uniform"  # or "terminus"
    seed: int = 0
    breakpoints: tuple[float, ...] | None = None  # patch spans; default equal
    mode: str = "auto"  # "aggregated" | "phased" | "auto"

    def __post_init__(self):
        if self.n_buses < 1:
            raise SimError("need at least one bus")
        if self.holding_threshold is not None and self.holding_threshold < 0:
            raise SimError("holding threshold must be >= 0")
        if not (0 < self.slowdown <= 1):
            raise SimError("slowdown factor must be in (0, 1]")
        if self.speedmod_threshold is not None and not (0 < self.speedmod_threshold < 1):
            raise SimError("speed threshold must be in (0, 1)")
        if self.init not in ("uniform", "terminus"):
            raise SimError("init must be 'uniform' or 'terminus'")
        if self.mode not in ("aggregated", "phased", "auto"):
            raise SimError("unknown simulation mode")


@dataclass
class SimModel:
    dists: list[Distribution]
    means: list[float]
    cfg: SimConfig
    r: float
    mu_tot: float
    anchors: list[float]  # c_j, 1-based at index j-1
    offsets: list[float]  # per-bus slot offsets r*(i-1)/beta
    termini: tuple[int, ...]
    spans: list[tuple[float, float]]  # route-fraction span per patch
    phased: bool

    @property
    def n(self) -> int:
        return len(self.dists)


def build_model(pm: PatchModel, cfg: SimConfig) -> SimModel:
    """Freeze timetable constants and initial-placement geometry into a model."""
    n = pm.n
    if cfg.breakpoints is not None:
        bp = list(cfg.breakpoints)
        if len(bp) != n + 1 or bp[0] != 0.0 or bp[-1] != 1.0:
            raise SimError("breakpoints must run from 0.0 to 1.0 with one span per patch")
        spans = list(zip(bp[:-1], bp[1:]))
    else:
        spans = [(j / n, (j + 1) / n) for j in range(n)]
    r = cfg.route_duration if cfg.route_duration is not None else pm.total()
    if r <= 0:
        raise SimError("route duration must be positive")
    beta = cfg.n_buses
    anchors = pm.cumulative_means()
    termini: tuple[int, ...] = ()
    if cfg.timetable:
        if cfg.terminus_patches is None:
            raise SimError("timetable requires terminus patch indices")
        termini = tuple(sorted(cfg.terminus_patches))
        if any(not (1 <= t <= n) for t in termini):
            raise SimError("terminus patch index out of range")
    phased = cfg.mode == "phased" or (cfg.mode == "auto" and cfg.speedmod_threshold is not None)
    offsets = [r * i / beta for i in range(beta)]
    return SimModel(list(pm.dists), list(pm.means), cfg, r, r / beta,
                    anchors, offsets, termini, spans, phased)


@dataclass
class Event:
    t: float
    kind: str  # "dep" or "expiry"
    bus: int  # 1-based; 0 for expiry events
    patch: int  # 1-based
    lap: int = 0


class Simulator:
    """Single-threaded simulator instance; replications with distinct
    (seed, replication) pairs use independent generator streams."""

    def __init__(self, model: SimModel, seed: int | None = None, replication: int = 0,
                 hour_ticks: bool = False, debug: bool = False):
        self.model = model
        cfg = model.cfg
        self.rng = np.random.default_rng([seed if seed is not None else cfg.seed, replication])
        self.n = model.n
        self.beta = cfg.n_buses
        self.t = 0.0
        self.events_processed = 0
        self.hour_ticks = hour_ticks
        self.debug = debug
        self.slow_draws = 0

        self.patch = [1] * self.beta
        self.lap = [0] * self.beta
        self.pending = [0.0] * self.beta
        self.phases_left = [0] * self.beta
        self.phase_rate = [0.0] * self.beta
        self.progress_base = [0.0] * self.beta  # completed fraction inside current patch
        self.progress_per_phase = [0.0] * self.beta

        self.dep_count = [0] * (self.n + 1)  # c_j, index by patch
        self.last_dep = [None] * (self.n + 1)  # y_j base
        self.last_dep_bus = [[None] * self.beta for _ in range(self.n + 1)]  # z_ij base
        self._expiries: list[tuple[float, int, int]] = []  # (t+3600, patch, bus)
        self._ring: list[list[tuple[float, int]]] = [[] for _ in range(self.n + 1)]  # debug cross-check

        self._init_buses()

    # -- initialisation ----------------------------------------------------

    def _lap_timeline(self) -> tuple[list[tuple[float, float]], float]:
        """Scheduled (entry, departure) per patch for one lap, bus-relative.

        With the timetable on, terminus departures sit at their anchors and the
        lap closes after exactly r; without it, patches follow their means."""
        m = self.model
        entries = []
        t = 0.0
        for j in range(1, self.n + 1):
            entry = t
            if m.cfg.timetable and j in m.termini:
                dep = m.anchors[j - 1] if j > 1 else 0.0
                dep = max(dep, entry)
            else:
                dep = entry + m.means[j - 1]
            entries.append((entry, dep))
            t = dep
        lap_len = m.r if m.cfg.timetable else t
        return entries, max(lap_len, t)

    def _init_buses(self):
        m = self.model
        cfg = m.cfg
        if cfg.init == "terminus":
            for i in range(self.beta):
                self.patch[i] = 1
                self.lap[i] = 0
                self._enter_patch(i, 1, 0.0)
            return
        # uniform init: bus i sits where a schedule-adherent bus departing
        # patch 1 at -offsets[i] would be at t = 0
        timeline, lap_len = self._lap_timeline()
        for i in range(self.beta):
            phi = (lap_len - m.offsets[i]) % lap_len if lap_len > 0 else 0.0
            placed = False
            for j in range(1, self.n + 1):
                entry, dep = timeline[j - 1]
                if entry <= phi < dep:
                    self.patch[i] = j
                    self.lap[i] = -1 if phi > 0 else 0
                    span = dep - entry
                    prog = 0.0 if span <= 0 else (phi - entry) / span
                    self._enter_patch(i, j, 0.0, progress=prog, init_slot_lap=self.lap[i])
                    placed = True
                    break
            if not placed:  # phi lands in the closing dwell of patch 1
                self.patch[i] = 1
                self.lap[i] = 0
                self._enter_patch(i, 1, 0.0, init_slot_lap=0)
        for i in range(self.beta):
            if self.patch[i] == 1 and self.lap[i] < 0:
                self.lap[i] = 0

    # -- sojourn draws -------------------------------------------------------

    def _route_progress(self, i: int) -> float:
        lo, hi = self.model.spans[self.patch[i] - 1]
        return lo + (hi - lo) * min(self.progress_base[i], 1.0)

    def _speed_factor(self, i: int) -> float:
        theta = self.model.cfg.speedmod_threshold
        if theta is None or self.beta < 2:
            return 1.0
        prog_i = self._route_progress(i)
        gap = None
        for b in range(self.beta):
            if b == i:
                continue
            g = (prog_i - self._route_progress(b)) % 1.0
            if gap is None or g < gap:
                gap = g
        if gap is not None and gap > theta:
            self.slow_draws += 1
            return self.model.cfg.slowdown
        return 1.0

    def _pick_branch(self, dist: Distribution) -> tuple[int, float]:
        if isinstance(dist, ErlangParams):
            return dist.k, dist.rate
        u = self.rng.random()
        acc = 0.0
        for k, r, a in zip(dist.shapes, dist.rates, dist.weights):
            acc += a
            if u <= acc:
                return k, r
        return dist.shapes[-1], dist.rates[-1]

    def _enter_patch(self, i: int, j: int, now: float,
                     progress: float = 0.0, init_slot_lap: int | None = None):
        m = self.model
        self.patch[i] = j
        self.progress_base[i] = progress
        if m.cfg.timetable and j in m.termini:
            lap = init_slot_lap if init_slot_lap is not None else self.lap[i]
            slot = m.r * lap + m.offsets[i] + m.anchors[j - 1]
            self.pending[i] = max(now, slot)
            self.phases_left[i] = 0
            self.progress_per_phase[i] = 0.0
            return
        k, rate = self._pick_branch(m.dists[j - 1])
        k_left = max(1, k - int(progress * k))
        if m.phased:
            self.phases_left[i] = k_left
            self.phase_rate[i] = rate
            self.progress_per_phase[i] = 1.0 / k
            factor = self._speed_factor(i)
            self.pending[i] = now + self.rng.exponential(1.0 / (rate * factor))
        else:
            self.phases_left[i] = 1
            self.progress_per_phase[i] = 1.0 - progress
            self.pending[i] = now + float(self.rng.gamma(k_left, 1.0 / rate))

    # -- metrics view ---------------------------------------------------------

    def rval(self, name: str, at: float | None = None) -> float:
        t = self.t if at is None else at
        if name == "time":
            return t
        if name == "mu_tot":
            return self.model.mu_tot
        try:
            if name.startswith("y_"):
                j = int(name[2:])
                base = self.last_dep[j]
                return math.inf if base is None else t - base
            if name.startswith("z_"):
                si, sj = name[2:].split("_")
                base = self.last_dep_bus[int(sj)][int(si) - 1]
                return math.inf if base is None else t - base
            if name.startswith("H_"):
                j = int(name[2:])
                return float(sum(1 for b in self.last_dep_bus[j]
                                 if b is not None and t - b < HOUR))
            if name.startswith("c_"):
                return float(self.dep_count[int(name[2:])])
        except (ValueError, IndexError):
            pass
        raise SimError(f"unknown state quantity {name!r}")

    # -- event loop -------------------------------------------------------------

    def _next_departure(self) -> tuple[float, int]:
        """Advance internal phase completions until some bus is ready to depart;
        returns (time, bus).  Holding gates are re-evaluated here."""
        m = self.model
        theta_h = m.cfg.holding_threshold
        while True:
            i = min(range(self.beta), key=lambda b: (self.pending[b], b))
            t = self.pending[i]
            if not math.isfinite(t):
                raise SimError("simulation stalled: no pending events")
            if self.phases_left[i] > 1:
                self.t = t
                self.phases_left[i] -= 1
                self.progress_base[i] += self.progress_per_phase[i]
                factor = self._speed_factor(i)
                self.pending[i] = t + self.rng.exponential(1.0 / (self.phase_rate[i] * factor))
                continue
            if theta_h is not None:
                j = self.patch[i]
                base = self.last_dep[j]
                if base is not None and t < base + theta_h:
                    self.pending[i] = base + theta_h
                    continue
            return t, i

    def _next_expiry(self) -> float:
        while self._expiries and self._expiries[0][0] <= self.t:
            heapq.heappop(self._expiries)
        return self._expiries[0][0] if self._expiries else math.inf

    def advance(self) -> Event:
        """Process and return the next state-changing event (a departure, or an
        hour-window expiry when hour ticks are enabled)."""
        dep_t, bus = self._next_departure()
        if self.hour_ticks:
            exp_t = self._next_expiry()
            if exp_t <= dep_t:
                t, j, _ = heapq.heappop(self._expiries)
                self.t = max(self.t, t)
                self.events_processed += 1
                return Event(t, "expiry", 0, j)
        j = self.patch[bus]
        self.t = dep_t
        ev = Event(dep_t, "dep", bus + 1, j, self.lap[bus])
        self._apply_departure(bus, j, dep_t)
        self.events_processed += 1
        if self.debug:
            self._check_hour_counts()
        return ev

    def _apply_departure(self, bus: int, j: int, t: float):
        self.dep_count[j] += 1
        self.last_dep[j] = t
        self.last_dep_bus[j][bus] = t
        if self.hour_ticks:
            heapq.heappush(self._expiries, (t + HOUR, j, bus))
        if self.debug:
            ring = self._ring[j]
            ring.append((t, bus))
            while ring and ring[0][0] <= t - HOUR:
                ring.pop(0)
        nxt = j + 1 if j < self.n else 1
        if nxt == 1:
            self.lap[bus] += 1
        self._enter_patch(bus, nxt, t)

    def _check_hour_counts(self):
        # a bus departing j twice within an hour counts once in H_j
        for j in range(1, self.n + 1):
            fast = sum(1 for b in self.last_dep_bus[j] if b is not None and self.t - b < HOUR)
            ring = len({b for (x, b) in self._ring[j] if x > self.t - HOUR})
            if fast != ring:
                raise AssertionError(f"H_{j} mismatch: indicator={fast} ring={ring}")

    def run(self, observer: Callable[[float, Event, "Simulator"], None] | None = None,
            until_time: float | None = None, max_events: int | None = None,
            wall_deadline: float | None = None) -> bool:
        """Drive events forward, invoking the observer with the pre-update state.

        Returns False when stopped by the wall-clock deadline (truncated), else
        True.  The observer is called as observer(t_prev, event, sim) before the
        event's state change is applied (the simulator applies it right after),
        so rval() at event time reflects the state x_{i-1}."""
        processed = 0
        while True:
            if until_time is not None and self._peek_time() > until_time:
                return True
            if max_events is not None and processed >= max_events:
                return True
            if wall_deadline is not None and _time.monotonic() > wall_deadline:
                return False
            t_prev = self.t
            dep_t, bus = self._next_departure()
            if self.hour_ticks:
                exp_t = self._next_expiry()
                if exp_t <= dep_t:
                    t, j, b = heapq.heappop(self._expiries)
                    ev = Event(t, "expiry", 0, j)
                    if observer is not None:
                        observer(t_prev, ev, self)
                    self.t = max(self.t, t)
                    self.events_processed += 1
                    processed += 1
                    continue
            j = self.patch[bus]
            ev = Event(dep_t, "dep", bus + 1, j, self.lap[bus])
            if observer is not None:
                observer(t_prev, ev, self)
            self.t = dep_t
            self._apply_departure(bus, j, dep_t)
            self.events_processed += 1
            processed += 1
            if self.debug:
                self._check_hour_counts()

    def _peek_time(self) -> float:
        nxt = min(self.pending)
        if self.hour_ticks and self._expiries:
            nxt = min(nxt, self._expiries[0][0])
        return nxt


def run_trajectory(model: SimModel, seed: int, stop: Callable[[Event, Simulator], bool],
                   max_events: int = 10_000_000) -> tuple[list[Event], bool]:
    """Chronological event stream until the stop predicate fires.  Returns
    (events, truncated) where truncated flags budget exhaustion."""
    sim = Simulator(model, seed=seed)
    events: list[Event] = []
    for _ in range(max_events):
        ev = sim.advance()
        events.append(ev)
        if stop(ev, sim):
            return events, False
    return events, True


def write_event_log(events: Iterable[Event], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("t\tbus\tkind\tpatch\tlap\n")
        for ev in events:
            fh.write(f"{ev.t:.3f}\t{ev.bus}\t{ev.kind}\t{ev.patch}\t{ev.lap}\n")

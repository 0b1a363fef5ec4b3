"""Deterministic discrete-time simulation of a linear pellet pipeline.

Time advances in 1 s ticks. Each tick the workload's whole-message
arrivals enter the first stage, every stage processes up to its capacity
(``cores * alpha / latency`` messages per tick, fractional capacity carried
as work credit) and forwards ``processed * selectivity`` messages to the
next stage within the same tick. The adaptation controller runs at the end
of every ``interval`` ticks and sets the core counts used from the next
tick on.
"""
from __future__ import annotations

import io
import logging
import os
import shlex
from dataclasses import dataclass, field

from . import kernels
from .adaptation import (
    DYNAMIC, HYBRID, STATIC, STRATEGIES, Controller, ControllerParams, PipelineProfile, StageHint,
)
from .kernels import SCALE

logger = logging.getLogger(__name__)

PROFILES = {"periodic": 0, "periodic_spiky": 1, "random_walk": 2}

TRACE_HEADER = "tick,pellet,rate_in,queue_len,cores,processed"
SUMMARY_HEADER = "strategy,violations,total_core_seconds,ratio_vs_dynamic"


class SimConfigError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _micro(x: float) -> int:
    return int(round(x * SCALE))


@dataclass(frozen=True)
class WorkloadSpec:
    profile: str = "periodic"
    base_rate: float = 4.0
    period: int = 300
    duration: int = 60
    spike_probability: float = 0.0
    spike_multiplier: float = 5.0
    walk_step: float = 1.0
    seed: int = 1
    horizon: int = 3600

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown workload profile {self.profile!r}")
        if self.base_rate < 0 or self.walk_step < 0:
            raise ValueError("rates must be >= 0")
        if self.period < 1 or not 0 < self.duration <= self.period:
            raise ValueError("need 0 < duration <= period")
        if not 0 <= self.spike_probability <= 1:
            raise ValueError("spike_probability must be in [0, 1]")
        if self.spike_multiplier < 1:
            raise ValueError("spike_multiplier must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def periodic(self) -> bool:
        return self.profile != "random_walk"


def workload_micro(w: WorkloadSpec) -> list[int]:
    """Rate series in micro-messages per tick."""
    threshold = int(w.spike_probability * (1 << 53))
    return kernels.workload_series(
        PROFILES[w.profile], _micro(w.base_rate), int(w.period), int(w.duration), threshold,
        _micro(w.spike_multiplier), _micro(w.walk_step), int(w.seed), int(w.horizon))


def generate_workload(w: WorkloadSpec) -> list[float]:
    return [r / SCALE for r in workload_micro(w)]


@dataclass(frozen=True)
class SimPipeline:
    stages: tuple[StageHint, ...]

    @classmethod
    def of(cls, *stages) -> "SimPipeline":
        return cls(tuple(s if isinstance(s, StageHint) else StageHint(*s) for s in stages))

    @classmethod
    def from_graph(cls, g, path) -> "SimPipeline":
        stages = []
        for pid in path:
            p = g.pellet(pid)
            if p.latency_hint is None:
                raise SimConfigError(f"pellet {pid} has no latency hint")
            sel = 1.0 if p.selectivity_hint is None else p.selectivity_hint
            stages.append(StageHint(pid, p.latency_hint, sel))
        for a, b in zip(path, path[1:]):
            if not g.out_edges(a) or b not in {e.dst[0] for e in g.out_edges(a)}:
                raise SimConfigError(f"path step {a} -> {b} is not an edge of the graph")
        return cls(tuple(stages))

    def pellets(self) -> list[str]:
        return [s.pellet for s in self.stages]


@dataclass
class SimSample:
    D: float
    L: float | None
    N: int
    cores: int
    queue_length: int


@dataclass
class SimTrace:
    strategy: str
    pellets: list[str]
    rates: list[float]
    rate_in: dict[str, list[int]]
    queue: dict[str, list[int]]
    cores: dict[str, list[int]]
    processed: dict[str, list[int]]
    observe: str
    drain_times: list[int | None] = field(default_factory=list)
    violations: int = 0
    core_seconds: dict[str, int] = field(default_factory=dict)
    decisions: list[str] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.rates)

    @property
    def total_core_seconds(self) -> int:
        return sum(self.core_seconds.values())

    def max_queue(self, pellet: str | None = None, start: int = 0, stop: int | None = None) -> int:
        q = self.queue[pellet or self.observe][start:stop]
        return max(q) if q else 0

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write(TRACE_HEADER + "\n")
        for t in range(self.horizon):
            for p in self.pellets:
                buf.write(f"{t},{p},{self.rate_in[p][t]},{self.queue[p][t]},"
                          f"{self.cores[p][t]},{self.processed[p][t]}\n")
        return buf.getvalue()


def _drain_times(trace: SimTrace, w: WorkloadSpec, tolerance: float) -> tuple[list, int]:
    """Per burst: seconds from burst start until the observed stage and
    everything upstream of it are empty at the end of a tick, counted from
    the end of the burst on. A burst that is not drained before the next
    one starts (or the run ends) gets None; both that and a drain time over
    ``duration + tolerance`` count as violations."""
    if not w.periodic:
        return [], 0
    upto = trace.pellets[: trace.pellets.index(trace.observe) + 1]
    times, violations = [], 0
    for start in range(0, trace.horizon, w.period):
        end = min(start + w.period, trace.horizon)
        if start + w.duration > trace.horizon:
            break
        done = None
        for t in range(start + w.duration - 1, end):
            if all(trace.queue[p][t] == 0 for p in upto):
                done = t + 1 - start
                break
        times.append(done)
        if done is None or done > w.duration + tolerance:
            violations += 1
    return times, violations


def simulate(pipeline: SimPipeline, w: WorkloadSpec, strategy: str,
             params: ControllerParams | None = None, profile: PipelineProfile | None = None,
             *, alpha: int = 4, observe: str | None = None, tolerance: float | None = None,
             initial_cores: int = 1) -> SimTrace:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    pellets = pipeline.pellets()
    observe = observe or pellets[0]
    if observe not in pellets:
        raise ValueError(f"observed pellet {observe!r} is not on the pipeline")
    n = len(pellets)
    controller = Controller(strategy, params, profile, pellets, alpha=alpha)
    interval = controller.params.interval
    if interval < 1 or float(interval) != int(interval):
        raise ValueError("controller interval must be a whole number of ticks")
    interval = int(interval)
    if tolerance is None:
        tolerance = profile.epsilon if profile is not None else 20.0

    micro = workload_micro(w)
    queues = [0] * n
    credits = [0] * n
    outcarry = [0] * n
    inst_rate = [SCALE * SCALE // _micro(s.latency) for s in pipeline.stages]
    select = [_micro(s.selectivity) for s in pipeline.stages]
    arrivals = [0] * n
    processed = [0] * n
    cores = []
    for p in pellets:
        c = controller.initial(p)
        cores.append(initial_cores if c is None else c)

    trace = SimTrace(strategy, pellets, [r / SCALE for r in micro],
                     {p: [] for p in pellets}, {p: [] for p in pellets},
                     {p: [] for p in pellets}, {p: [] for p in pellets}, observe)
    window = [[0] * interval for _ in range(n)]
    acc = 0
    core_seconds = [0] * n
    tick = kernels.pipeline_tick
    for t in range(w.horizon):
        acc += micro[t]
        inflow = acc // SCALE
        acc -= inflow * SCALE
        tick(queues, credits, outcarry, cores, inst_rate, select, alpha, inflow, arrivals, processed)
        for i, p in enumerate(pellets):
            trace.rate_in[p].append(arrivals[i])
            trace.queue[p].append(queues[i])
            trace.cores[p].append(cores[i])
            trace.processed[p].append(processed[i])
            core_seconds[i] += cores[i]
            window[i][t % interval] = arrivals[i]
        if (t + 1) % interval == 0:
            for i, p in enumerate(pellets):
                m = SimSample(D=sum(window[i]) / interval, L=pipeline.stages[i].latency,
                              N=cores[i] * alpha, cores=cores[i], queue_length=queues[i])
                controller.state.of(p).core_seconds = core_seconds[i]
                target = controller.decide(p, m, float(t))
                controller.record(float(t), p, m, target)
                cores[i] = target
    trace.core_seconds = dict(zip(pellets, core_seconds))
    trace.drain_times, trace.violations = _drain_times(trace, w, tolerance)
    trace.decisions = controller.log_rows()
    return trace


@dataclass
class ComparisonReport:
    traces: dict[str, SimTrace]
    observe: str

    def core_seconds(self, strategy: str) -> int:
        return self.traces[strategy].core_seconds[self.observe]

    def ratio(self, strategy: str) -> float:
        base = self.core_seconds(DYNAMIC)
        return self.core_seconds(strategy) / base if base else float("nan")

    def summary_rows(self) -> list[str]:
        rows = []
        for s in (STATIC, DYNAMIC, HYBRID):
            if s in self.traces:
                tr = self.traces[s]
                rows.append(f"{s},{tr.violations},{self.core_seconds(s)},{self.ratio(s):.4f}")
        return rows

    def summary_csv(self) -> str:
        return SUMMARY_HEADER + "\n" + "".join(r + "\n" for r in self.summary_rows())


def compare_strategies(pipeline: SimPipeline, w: WorkloadSpec, params: ControllerParams | None = None,
                       profile: PipelineProfile | None = None, *, alpha: int = 4,
                       observe: str | None = None, strategies=STRATEGIES) -> ComparisonReport:
    if DYNAMIC not in strategies:
        strategies = tuple(strategies) + (DYNAMIC,)
    traces = {s: simulate(pipeline, w, s, params, profile, alpha=alpha, observe=observe)
              for s in strategies}
    return ComparisonReport(traces, observe or pipeline.pellets()[0])


# -- config files -------------------------------------------------------------

@dataclass
class SimConfig:
    name: str
    workload: WorkloadSpec
    pipeline: SimPipeline
    strategies: tuple[str, ...] = STRATEGIES
    tolerance: float = 20.0
    hint_rate: float | str | None = None  # None -> base rate, "mean" -> realized mean
    hint_duration: int | None = None
    params: dict = field(default_factory=dict)
    observe: str | None = None
    alpha: int = 4

    def profile(self) -> PipelineProfile:
        w = self.workload
        if self.hint_rate == "mean":
            series = generate_workload(w)
            rate = sum(series) / len(series)
        elif self.hint_rate is None:
            rate = w.base_rate
        else:
            rate = float(self.hint_rate)
        t = self.hint_duration or (w.duration if w.periodic else w.horizon)
        return PipelineProfile.from_rate(self.pipeline.stages, rate, t, epsilon=self.tolerance,
                                         alpha=self.alpha, period=w.period if w.periodic else None)

    def controller_params(self) -> ControllerParams:
        prof = self.profile()
        observe = self.observe or self.pipeline.pellets()[0]
        return ControllerParams.for_rate(prof.expected_rate(observe), **self.params)

    def run(self) -> ComparisonReport:
        return compare_strategies(self.pipeline, self.workload, self.controller_params(), self.profile(),
                                  alpha=self.alpha, observe=self.observe, strategies=self.strategies)


_WORKLOAD_FIELDS = {
    "base_rate": float, "period": int, "duration": int, "spike_probability": float,
    "spike_multiplier": float, "walk_step": float, "seed": int, "horizon": int,
}
_CONTROLLER_FIELDS = {
    "interval": float, "max_cores": int, "tau1": float, "tau2": float, "rate_band": float,
    "stabilize_band": float, "queue_threshold": float, "guard": str,
}


def _fields(words, allowed, lineno):
    out = {}
    for word in words:
        key, eq, value = word.partition("=")
        if not eq:
            raise SimConfigError(f"expected key=value, got {word!r}", lineno)
        if key not in allowed:
            raise SimConfigError(f"unknown field {key!r}", lineno)
        try:
            out[key] = allowed[key](value)
        except ValueError:
            raise SimConfigError(f"bad value for {key}: {value!r}", lineno) from None
    return out


def parse_sim_config(text: str, base_dir: str = ".") -> SimConfig:
    """Parse the line-oriented simulation config::

        simulation <name>
        workload periodic|periodic_spiky|random_walk [base_rate=..] [period=..] ...
        pellet <id> latency=<sec> [selectivity=<r>]     (repeatable, in path order)
        graph <path.graph>  +  path <id> <id> ...        (instead of pellet lines)
        strategy static,dynamic,hybrid
        profile [tolerance=<sec>] [rate=<r>|mean] [duration=<sec>]
        controller [interval=..] [max_cores=..] [tau1=..] [guard=literal|core] ...
        observe <id>
        alpha <n>
    """
    name = None
    workload = None
    stages = []
    graph_path = None
    path = None
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = shlex.split(line)
        kw, args = words[0], words[1:]
        if kw == "simulation":
            if len(args) != 1:
                raise SimConfigError("simulation takes one name", lineno)
            name = args[0]
        elif kw == "workload":
            if not args or args[0] not in PROFILES:
                raise SimConfigError(f"workload needs a profile ({', '.join(PROFILES)})", lineno)
            try:
                workload = WorkloadSpec(args[0], **_fields(args[1:], _WORKLOAD_FIELDS, lineno))
            except ValueError as exc:
                if isinstance(exc, SimConfigError):
                    raise
                raise SimConfigError(str(exc), lineno) from None
        elif kw == "pellet":
            if not args:
                raise SimConfigError("pellet needs an id", lineno)
            f = _fields(args[1:], {"latency": float, "selectivity": float}, lineno)
            if "latency" not in f:
                raise SimConfigError("pellet needs latency=<sec>", lineno)
            try:
                stages.append(StageHint(args[0], f["latency"], f.get("selectivity", 1.0)))
            except ValueError as exc:
                raise SimConfigError(str(exc), lineno) from None
        elif kw == "graph":
            if len(args) != 1:
                raise SimConfigError("graph takes one path", lineno)
            graph_path = args[0]
        elif kw == "path":
            path = args
        elif kw == "strategy":
            chosen = tuple(s for a in args for s in a.split(",") if s)
            bad = [s for s in chosen if s not in STRATEGIES]
            if bad or not chosen:
                raise SimConfigError(f"unknown strategy {', '.join(bad) or '(none)'}", lineno)
            cfg["strategies"] = chosen
        elif kw == "profile":
            f = _fields(args, {"tolerance": float, "rate": str, "duration": int}, lineno)
            if "tolerance" in f:
                cfg["tolerance"] = f["tolerance"]
            if "rate" in f:
                if f["rate"] != "mean":
                    try:
                        float(f["rate"])
                    except ValueError:
                        raise SimConfigError(f"bad value for rate: {f['rate']!r}", lineno) from None
                cfg["hint_rate"] = f["rate"]
            if "duration" in f:
                cfg["hint_duration"] = f["duration"]
        elif kw == "controller":
            cfg["params"] = _fields(args, _CONTROLLER_FIELDS, lineno)
        elif kw == "observe":
            if len(args) != 1:
                raise SimConfigError("observe takes one pellet id", lineno)
            cfg["observe"] = args[0]
        elif kw == "alpha":
            try:
                cfg["alpha"] = int(args[0])
            except (IndexError, ValueError):
                raise SimConfigError("alpha takes a positive integer", lineno) from None
        else:
            raise SimConfigError(f"unknown keyword {kw!r}", lineno)
    if name is None:
        raise SimConfigError("missing 'simulation <name>' line")
    if workload is None:
        raise SimConfigError("missing 'workload' line")
    if graph_path is not None:
        from .graph import load_graph

        if stages:
            raise SimConfigError("use either pellet lines or graph + path, not both")
        if not path:
            raise SimConfigError("graph needs a 'path' line")
        gp = graph_path if os.path.isabs(graph_path) else os.path.join(base_dir, graph_path)
        pipeline = SimPipeline.from_graph(load_graph(gp), path)
    elif stages:
        pipeline = SimPipeline(tuple(stages))
    else:
        raise SimConfigError("no pipeline: add pellet lines or graph + path")
    if cfg.get("observe") and cfg["observe"] not in pipeline.pellets():
        raise SimConfigError(f"observed pellet {cfg['observe']!r} is not on the pipeline")
    out = SimConfig(name, workload, pipeline, **cfg)
    try:
        out.controller_params()
    except ValueError as exc:
        raise SimConfigError(str(exc)) from None
    return out


def load_sim_config(path) -> SimConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_sim_config(text, os.path.dirname(os.path.abspath(path)))


def write_outputs(report: ComparisonReport, out_dir) -> list[str]:
    """Write ``trace_<strategy>.csv`` per strategy and ``summary.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for s, tr in report.traces.items():
        p = os.path.join(out_dir, f"trace_{s}.csv")
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(tr.csv())
        written.append(p)
    p = os.path.join(out_dir, "summary.csv")
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.summary_csv())
    written.append(p)
    return written


__all__ = [
    "WorkloadSpec", "SimPipeline", "SimTrace", "SimSample", "SimConfig", "SimConfigError",
    "ComparisonReport", "generate_workload", "workload_micro", "simulate", "compare_strategies",
    "parse_sim_config", "load_sim_config", "write_outputs",
]

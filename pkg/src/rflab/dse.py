"""Loop-nest lowering and latency / resource / energy estimation.

A network lowers to one loop nest per layer: conv is (filters, rows, cols)
around a body of h*w*c_in MACs, dense is (units) around fan_in MACs, relu and
pool are element-count nests of single compares. A schedule runs each nest
either sequentially (trips * body depth) or pipelined (depth + (trips-1) * II,
innermost loop flattened), optionally with the body unrolled into parallel
MAC units. Cycle counts scale with one calibrated constant, cycles_per_mac;
elementwise ops are counted as MAC-equivalents. Layers run back to back with
no overlap (each writes its full output buffer before the next starts), so
total cycles are the plain sum over layers.

Resources: weight and activation buffers are counted in fixed-size BRAM
blocks using byte-aligned word widths, activations double-buffered; DSP units
equal the parallel MACs a schedule asks for; the LUT figure is an affine
function of parallel MACs, good for ordering comparisons only.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .fxp import Q2_14
from .nn import ModelSpec

DEFAULT_CLOCK_MHZ = 100.0


@dataclass(frozen=True)
class CostModelParams:
    cycles_per_mac: float = 2.54
    bram_bits_per_block: int = 18432
    macs_per_dsp: int = 1
    lut_base: int = 12000
    lut_per_parallel_mac: int = 350
    ports_per_buffer: int = 2
    dsp_budget: int = 900
    bram_budget: int = 1090

    def __post_init__(self):
        for name in ("cycles_per_mac", "bram_bits_per_block", "macs_per_dsp",
                     "lut_base", "lut_per_parallel_mac", "ports_per_buffer",
                     "dsp_budget", "bram_budget"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)


DEFAULT_PARAMS = CostModelParams()


@dataclass(frozen=True)
class Loop:
    name: str
    trips: int

    def __post_init__(self):
        if self.trips < 1:
            raise ValueError("loop %r needs trips >= 1" % (self.name,))


@dataclass(frozen=True)
class LoopNest:
    layer_index: int
    label: str
    loops: tuple
    body_macs: int
    body_elems: int
    body_loads: int
    body_stores: int
    body_depth: int

    def __post_init__(self):
        if self.body_depth < 1:
            raise ValueError("body_depth must be >= 1")

    @property
    def trips(self):
        t = 1
        for lp in self.loops:
            t *= lp.trips
        return t

    @property
    def macs(self):
        return self.trips * self.body_macs

    @property
    def elems(self):
        return self.trips * self.body_elems


@dataclass(frozen=True)
class Schedule:
    directive: str = "sequential"
    ii: int = 1
    unroll: int = 1

    def __post_init__(self):
        if self.directive not in ("sequential", "pipeline"):
            raise ValueError("directive must be sequential or pipeline")
        if self.ii < 1 or self.unroll < 1:
            raise ValueError("ii and unroll must be >= 1")

    def describe(self):
        s = self.directive
        if self.directive == "pipeline" and self.ii != 1:
            s += " ii%d" % self.ii
        if self.unroll != 1:
            s += " u%d" % self.unroll
        return s


@dataclass(frozen=True)
class DesignPoint:
    model: ModelSpec
    schedule: object = Schedule()
    fmt: object = Q2_14
    clock_mhz: float = DEFAULT_CLOCK_MHZ
    params: CostModelParams = DEFAULT_PARAMS
    power_w: float = None

    def __post_init__(self):
        if self.clock_mhz <= 0:
            raise ValueError("clock_mhz must be positive")

    def schedule_for(self, layer_index):
        if isinstance(self.schedule, Schedule):
            return self.schedule
        return self.schedule.get(layer_index, Schedule())


@dataclass
class LatencyReport:
    total_cycles: int
    per_layer: list
    clock_mhz: float
    notes: list

    @property
    def wall_ms(self):
        return self.total_cycles / (self.clock_mhz * 1e3)


@dataclass
class ResourceReport:
    bram_blocks: int
    dsp_units: int
    lut_estimate: int
    detail: list
    bram_budget: int
    dsp_budget: int

    @property
    def bram_pct(self):
        return 100.0 * self.bram_blocks / self.bram_budget

    @property
    def dsp_pct(self):
        return 100.0 * self.dsp_units / self.dsp_budget


def latency_sequential(depth, trips):
    """Cycles for a loop whose iterations run back to back."""
    if depth < 1 or trips < 1:
        raise ValueError("depth and trips must be >= 1")
    return depth * trips


def latency_pipelined(depth, trips, ii):
    """Cycles for a pipelined loop: fill once, then one start every II."""
    if depth < 1 or trips < 1 or ii < 1:
        raise ValueError("depth, trips, and ii must be >= 1")
    return depth + (trips - 1) * ii


def _body_depth(params, ops):
    return max(1, int(round(params.cycles_per_mac * ops)))


def lower(model, params=None):
    """Per-layer loop nests for a grammar-validated model.

    Flatten is pure buffer aliasing and lowers to nothing; relu and pool
    lower to elementwise nests.
    """
    if model.counts is None:
        raise ValueError("model did not pass architecture validation; "
                         "lower() needs a validated model")
    params = params or DEFAULT_PARAMS
    nests = []
    cur = model.input_shape
    shapes = model.shapes()
    for idx, l in enumerate(model.layers):
        out = shapes[idx]
        if l.kind == "conv":
            body = l.h * l.w * cur[0]
            nests.append(LoopNest(
                idx, l.describe(),
                (Loop("f", l.filters), Loop("i", out[1]), Loop("j", out[2])),
                body_macs=body, body_elems=0, body_loads=2 * body,
                body_stores=1, body_depth=_body_depth(params, body)))
        elif l.kind == "dense":
            fan = cur[0]
            nests.append(LoopNest(
                idx, l.describe(), (Loop("u", l.units),),
                body_macs=fan, body_elems=0, body_loads=2 * fan,
                body_stores=1, body_depth=_body_depth(params, fan)))
        elif l.kind == "relu":
            count = int(np.prod(cur))
            nests.append(LoopNest(
                idx, "relu", (Loop("e", count),),
                body_macs=0, body_elems=1, body_loads=1, body_stores=1,
                body_depth=_body_depth(params, 1)))
        elif l.kind == "pool":
            body = l.p * l.p
            nests.append(LoopNest(
                idx, l.describe(),
                (Loop("c", out[0]), Loop("i", out[1]), Loop("j", out[2])),
                body_macs=0, body_elems=body, body_loads=body,
                body_stores=1, body_depth=_body_depth(params, body)))
        cur = out
    return nests


def _nest_cycles(nest, sched, params, notes):
    ops = nest.body_macs + nest.body_elems
    if sched.unroll > 1 and ops % sched.unroll:
        padded = sched.unroll * math.ceil(ops / sched.unroll)
        notes.append("layer %d (%s): body of %d ops padded to %d for unroll %d"
                     % (nest.layer_index, nest.label, ops, padded, sched.unroll))
    eff = math.ceil(ops / sched.unroll)
    depth = _body_depth(params, eff)
    if sched.directive == "pipeline":
        return latency_pipelined(depth, nest.trips, sched.ii)
    return latency_sequential(depth, nest.trips)


def estimate_latency(dp):
    """Cycle and wall-time estimate for one design point."""
    notes = []
    per_layer = []
    total = 0
    for nest in lower(dp.model, dp.params):
        cycles = _nest_cycles(nest, dp.schedule_for(nest.layer_index),
                              dp.params, notes)
        per_layer.append((nest.layer_index, nest.label, cycles))
        total += cycles
    return LatencyReport(total, per_layer, dp.clock_mhz, notes)


def _blocks(bits, params):
    return math.ceil(bits / params.bram_bits_per_block)


def estimate_resources(dp):
    """BRAM blocks, DSP units, and an ordering-grade LUT figure.

    Weight stores are per MAC layer (filters plus biases); activations are
    the input frame and every conv/pool/dense output, double-buffered. Relu
    runs in place and flatten aliases its input, so neither adds a buffer.
    Unrolling beyond the per-buffer port count forces weight banking, which
    can only increase the block count.
    """
    params = dp.params
    word_bits = 8 * dp.fmt.word_bytes
    model = dp.model
    shapes = model.shapes()
    from .nn import weight_shapes
    wshapes = weight_shapes(model)
    detail = []
    bram = 0
    dsp = 0
    parallel_macs = 0
    for idx, l in enumerate(model.layers):
        if l.kind in ("conv", "dense"):
            sched = dp.schedule_for(idx)
            n_words = int(np.prod(wshapes[idx]["W"])) + int(np.prod(wshapes[idx]["b"]))
            banks = math.ceil(sched.unroll / params.ports_per_buffer)
            blocks = max(_blocks(n_words * word_bits, params), banks)
            detail.append(("weights", idx, l.describe(), blocks))
            bram += blocks
            units = math.ceil(sched.unroll / params.macs_per_dsp)
            dsp += units
            parallel_macs += sched.unroll
    act_shapes = [model.input_shape] + [shapes[i] for i, l in enumerate(model.layers)
                                        if l.kind in ("conv", "pool", "dense")]
    for i, shp in enumerate(act_shapes):
        blocks = 2 * _blocks(int(np.prod(shp)) * word_bits, params)
        detail.append(("activations", i, "x".join(str(v) for v in shp), blocks))
        bram += blocks
    lut = params.lut_base + params.lut_per_parallel_mac * parallel_macs
    return ResourceReport(bram, dsp, lut, detail, params.bram_budget,
                          params.dsp_budget)


def estimate_energy(latency_ms, power_w):
    """Millijoules from wall time and a measured power figure."""
    if latency_ms < 0 or power_w < 0:
        raise ValueError("latency and power must be nonnegative")
    return latency_ms * power_w


def calibrate(model, target_ms, clock_mhz=DEFAULT_CLOCK_MHZ, params=None,
              schedule=Schedule()):
    """Fit cycles_per_mac so the model's estimate hits target_ms.

    One-point calibration: fit on a single reference design, predict
    everything else without refitting.
    """
    params = params or DEFAULT_PARAMS
    target_cycles = target_ms * clock_mhz * 1e3
    nests = lower(model, params)
    raw_ops = sum(n.trips * (n.body_macs + n.body_elems) for n in nests)
    cpm = target_cycles / raw_ops
    for _ in range(12):
        trial = replace(params, cycles_per_mac=cpm)
        got = estimate_latency(DesignPoint(model, schedule, clock_mhz=clock_mhz,
                                           params=trial)).total_cycles
        if got == 0:
            break
        cpm *= target_cycles / got
    return replace(params, cycles_per_mac=cpm)


def pareto_front(rows, keys=("wall_ms", "dsp", "bram")):
    """Indices of non-dominated rows (minimize all keys), in input order."""
    vals = [tuple(r[k] for k in keys) for r in rows]
    front = []
    for i, a in enumerate(vals):
        dominated = False
        for j, b in enumerate(vals):
            if j != i and all(bv <= av for bv, av in zip(b, a)) and b != a:
                dominated = True
                break
        if not dominated:
            front.append(i)
    return front


def sweep(arch_points, schedules, fmt=Q2_14, clock_mhz=DEFAULT_CLOCK_MHZ,
          params=None, power_w=None):
    """Evaluate every (architecture, schedule) pair in grid order.

    arch_points: list of (name, ModelSpec); schedules: list of Schedule.
    Returns (rows, pareto_indices); each row is a dict with the report
    columns.
    """
    if not arch_points or not schedules:
        raise ValueError("empty sweep grid")
    params = params or DEFAULT_PARAMS
    rows = []
    for name, model in arch_points:
        for sched in schedules:
            dp = DesignPoint(model, sched, fmt, clock_mhz, params, power_w)
            lat = estimate_latency(dp)
            res = estimate_resources(dp)
            row = {"arch": name, "schedule": sched.describe(),
                   "cycles": lat.total_cycles, "wall_ms": lat.wall_ms,
                   "bram": res.bram_blocks, "dsp": res.dsp_units,
                   "lut": res.lut_estimate,
                   "energy_mj": (estimate_energy(lat.wall_ms, power_w)
                                 if power_w is not None else None)}
            rows.append(row)
    return rows, pareto_front(rows)


SWEEP_COLUMNS = ("arch", "schedule", "cycles", "wall_ms", "bram", "dsp",
                 "lut", "energy_mj")


def format_sweep(rows, pareto, machine=False):
    """Render sweep rows; pareto-front members get a trailing marker."""
    def fmt_val(k, v):
        if v is None:
            return ""
        if k == "wall_ms":
            return "%.4f" % v
        if k == "energy_mj":
            return "%.3f" % v
        return str(v)

    lines = []
    if machine:
        lines.append(",".join(SWEEP_COLUMNS + ("pareto",)))
        for i, r in enumerate(rows):
            lines.append(",".join([fmt_val(k, r[k]) for k in SWEEP_COLUMNS]
                                  + ["1" if i in pareto else "0"]))
        return "\n".join(lines)
    cells = [[fmt_val(k, r[k]) for k in SWEEP_COLUMNS]
             + ["*" if i in pareto else ""] for i, r in enumerate(rows)]
    headers = list(SWEEP_COLUMNS) + ["pareto"]
    widths = [max(len(h), *(len(row[c]) for row in cells))
              for c, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)

"""Line-oriented run records: per-tick CSV, per-cycle CSV, key=value summary.

The tick and cycle files are fully deterministic for a fixed scenario and seed
(schema v1); wall-clock solve durations live only in the summary's timing
block, which is excluded from any bit-identity comparison.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

SCHEMA = "hiermpc-runlog v1"

TICK_FIELDS = (
    ["tick", "t"]
    + [f"x{i}" for i in range(10)]
    + [f"u{i}" for i in range(4)]
    + [f"xr{i}" for i in range(10)]
    + ["region", "status", "iters", "kkt", "objective", "cand_viol",
       "tracking_err", "clearance", "slack_max", "fallback"]
)

CYCLE_FIELDS = [
    "cycle", "slot_tick", "valid_tick", "status", "iters", "objective",
    "cand_viol", "assume_ok", "assume_margin", "shift_viol",
    "region_safety_inflated", "region_safety_contour",
    "ref_zbar_viol", "ref_fbar_viol", "ref_defect",
]

REGION_FIELDS = ["cycle", "interval", "row", "kind", "nx", "ny", "offset", "offset_tight"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    if v is None:
        return "nan"
    return f"{float(v):.17g}"


@dataclass
class RunLog:
    scenario: str
    controller: str
    ticks: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    regions: list = field(default_factory=list)   # dict rows, REGION_FIELDS
    summary: dict = field(default_factory=dict)

    def add_tick(self, **kw):
        self.ticks.append(kw)

    def add_cycle(self, **kw):
        self.cycles.append(kw)

    def add_region_rows(self, cycle, regions, regions_tight):
        for reg, regt in zip(regions, regions_tight):
            for j in range(reg.L.shape[0]):
                self.regions.append({
                    "cycle": cycle, "interval": reg.interval, "row": j,
                    "kind": "tangent" if j < reg.n_tangent else "box",
                    "nx": reg.L[j, 0], "ny": reg.L[j, 1],
                    "offset": reg.l[j], "offset_tight": regt.l[j],
                })

    def save(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        self._write_csv(os.path.join(outdir, "ticks.csv"), TICK_FIELDS, self.ticks)
        self._write_csv(os.path.join(outdir, "cycles.csv"), CYCLE_FIELDS, self.cycles)
        self._write_csv(os.path.join(outdir, "regions.csv"), REGION_FIELDS, self.regions)
        with open(os.path.join(outdir, "summary.txt"), "w") as f:
            f.write(SCHEMA + " summary\n")
            f.write(f"scenario {self.scenario}\n")
            f.write(f"controller {self.controller}\n")
            for k in sorted(self.summary):
                f.write(f"{k} {_fmt(self.summary[k])}\n")

    @staticmethod
    def _write_csv(path, fields, rows):
        with open(path, "w") as f:
            f.write("# " + SCHEMA + "\n")
            f.write(",".join(fields) + "\n")
            for row in rows:
                f.write(",".join(_fmt(row.get(k)) for k in fields) + "\n")

    @staticmethod
    def load(outdir):
        log = RunLog(scenario="?", controller="?")
        log.ticks = _read_csv(os.path.join(outdir, "ticks.csv"), TICK_FIELDS)
        log.cycles = _read_csv(os.path.join(outdir, "cycles.csv"), CYCLE_FIELDS)
        log.regions = _read_csv(os.path.join(outdir, "regions.csv"), REGION_FIELDS)
        with open(os.path.join(outdir, "summary.txt")) as f:
            header = f.readline().strip()
            if not header.startswith(SCHEMA):
                raise ValueError(f"unsupported run log schema: {header}")
            log.scenario = f.readline().split(" ", 1)[1].strip()
            log.controller = f.readline().split(" ", 1)[1].strip()
            for ln in f:
                k, v = ln.rstrip("\n").split(" ", 1)
                log.summary[k] = _parse(v)
        return log


def _parse(v):
    try:
        f = float(v)
        return int(f) if f.is_integer() and "." not in v and "e" not in v else f
    except ValueError:
        return v


def _read_csv(path, fields, strict=True):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if strict and not header.startswith("# " + SCHEMA):
            raise ValueError(f"{path}: unsupported schema line {header!r}")
        cols = f.readline().strip().split(",")
        for ln in f:
            vals = ln.rstrip("\n").split(",")
            row = {}
            for c, v in zip(cols, vals):
                row[c] = _parse(v)
            rows.append(row)
    return rows

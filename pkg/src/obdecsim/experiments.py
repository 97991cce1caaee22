"""Batch runner, per-condition summaries and directional claim checks."""

from __future__ import annotations

import csv
import json
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy import stats

from .mission import MissionConfig, run_mission

CSV_HEADER = ("condition", "seed", "target", "found", "time_s", "coverage", "collisions")


@dataclass(frozen=True)
class Condition:
    name: str
    mission: Mapping[str, Any]

    @property
    def target(self) -> str:
        return _target_label(self.mission.get("target"))


def _target_label(t) -> str:
    return t if isinstance(t, str) else json.dumps(t)


@dataclass(frozen=True)
class BatchSpec:
    name: str
    conditions: tuple[Condition, ...]
    repeats: int = 40
    seed: int = 0
    base: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.conditions]
        if len(set(names)) != len(names):
            raise ValueError("condition names must be unique")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BatchSpec":
        d = dict(d)
        if d.pop("schema_version", 1) != 1:
            raise ValueError("unsupported batch schema_version")
        conds = tuple(Condition(c["name"], dict(c.get("mission", {})))
                      for c in d.pop("conditions"))
        return cls(d.pop("name", "batch"), conds, int(d.pop("repeats", 40)),
                   int(d.pop("seed", 0)), dict(d.pop("base", {})))

    @classmethod
    def load(cls, path: str | Path) -> "BatchSpec":
        return cls.from_dict(yaml.safe_load(_resolve(path).read_text()))

    def mission_config(self, cond: Condition, seed: int) -> MissionConfig:
        merged = _deep_merge(self.base, cond.mission)
        merged["seed"] = seed
        return MissionConfig.from_dict(merged)

    def target_of(self, cond: Condition) -> str:
        """Target label of a condition, falling back to the base config."""
        if "target" in cond.mission:
            return cond.target
        return _target_label(self.base.get("target", MissionConfig().target))


def _resolve(path: str | Path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    from importlib import resources
    name = p.name if p.suffix else f"{p.name}.yaml"
    shipped = resources.files("obdecsim") / "batches" / name
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(path)


def _deep_merge(a: Mapping, b: Mapping) -> dict:
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def derive_seed(master: int, condition: str, target: str, repeat: int) -> int:
    """Stable 63-bit seed for one run; independent of run order and of other conditions."""
    ss = np.random.SeedSequence(entropy=int(master),
                                spawn_key=(zlib.crc32(condition.encode()),
                                           zlib.crc32(target.encode()), int(repeat)))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class RunRow:
    condition: str
    seed: int
    target: str
    found: bool
    time_s: float
    coverage: float
    collisions: int

    def as_csv(self) -> list:
        return [self.condition, self.seed, self.target, int(self.found), repr(self.time_s),
                repr(self.coverage), self.collisions]


def read_results(path: str | Path) -> list[RunRow]:
    rows = []
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected results header {header}")
        for r in reader:
            if not r:
                continue
            rows.append(RunRow(r[0], int(r[1]), r[2], r[3] in ("1", "True", "true"),
                               float(r[4]), float(r[5]), int(r[6])))
    return rows


def run_batch(spec: BatchSpec, out_dir: str | Path, repeats: int | None = None,
              progress: Callable[[str], None] | None = None) -> list[RunRow]:
    """Run every (condition, repeat) pair not already in out_dir/results.csv.

    Rows are appended as runs finish, so an interrupted batch resumes where it
    stopped.  Writes summary.json when done.  Returns the rows of this spec at
    this repeat count, so a directory filled with more repeats can be reused.
    """
    # resolve every condition first so a bad one aborts before any run
    for cond in spec.conditions:
        try:
            spec.mission_config(cond, 0).world()
        except Exception as e:
            raise ValueError(f"condition {cond.name!r} is invalid: {e}") from e
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "results.csv"
    done = read_results(path) if path.exists() else []
    have = {(r.condition, r.seed) for r in done}
    n_rep = spec.repeats if repeats is None else repeats
    wanted: set[tuple[str, int]] = set()
    new_file = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fp:
        w = csv.writer(fp)
        if new_file:
            w.writerow(CSV_HEADER)
        for cond in spec.conditions:
            target = spec.target_of(cond)
            for k in range(n_rep):
                seed = derive_seed(spec.seed, cond.name, target, k)
                wanted.add((cond.name, seed))
                if (cond.name, seed) in have:
                    continue
                t0 = time.perf_counter()
                res = run_mission(spec.mission_config(cond, seed))
                row = RunRow(cond.name, seed, target, res.found, float(res.time_to_find),
                             float(res.coverage), int(res.collisions))
                w.writerow(row.as_csv())
                fp.flush()
                done.append(row)
                if progress:
                    progress(f"{cond.name} #{k} seed={seed} found={res.found} "
                             f"t={res.time_to_find:.0f}s ({time.perf_counter() - t0:.1f}s wall)")
    rows = [r for r in done if (r.condition, r.seed) in wanted]
    write_summary(summarize(rows), out / "summary.json")
    return rows


@dataclass(frozen=True)
class SummaryRow:
    condition: str
    target: str
    n: int
    success_rate: float
    median_time: float
    q1_time: float
    q3_time: float
    iqr_time: float
    mean_coverage: float
    collisions: int


def summarize(rows: Iterable[RunRow]) -> list[SummaryRow]:
    """Per-condition statistics; failed runs enter the time statistics at their t_max."""
    groups: dict[str, list[RunRow]] = {}
    for r in rows:
        groups.setdefault(r.condition, []).append(r)
    out = []
    for name, rs in groups.items():
        t = np.array([r.time_s for r in rs])
        q1, med, q3 = (float(v) for v in np.percentile(t, [25, 50, 75]))
        out.append(SummaryRow(name, rs[0].target, len(rs),
                              sum(r.found for r in rs) / len(rs), med, q1, q3, q3 - q1,
                              float(np.mean([r.coverage for r in rs])),
                              sum(r.collisions for r in rs)))
    return out


def write_summary(summary: Sequence[SummaryRow], path: str | Path) -> None:
    Path(path).write_text(json.dumps([asdict(s) for s in summary], indent=2) + "\n")


# -- claims ----------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str
    measured: dict

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _metric(summary: Mapping[str, SummaryRow], cond: str, metric: str) -> float:
    if cond not in summary:
        raise KeyError(f"no results for condition {cond!r}")
    return float(getattr(summary[cond], metric))


def evaluate_claim(claim: Mapping[str, Any], rows: Sequence[RunRow]) -> Verdict:
    """Check one claim against the results.

    Types: ``order`` (metric non-increasing, or strictly decreasing with
    strict: true, along ``conditions``), ``reduction`` (1 - better/worse >=
    min_fraction on a time metric), ``ranksum`` (one-sided Mann-Whitney U that
    ``better`` has smaller times than ``worse`` at level alpha), ``gap``
    (high - low >= min) and ``greater`` (high > low).
    """
    summary = {s.condition: s for s in summarize(rows)}
    kind = claim["type"]
    name = claim.get("name", kind)
    metric = claim.get("metric", "median_time")
    if kind == "order":
        conds = list(claim["conditions"])
        vals = [_metric(summary, c, metric) for c in conds]
        strict = bool(claim.get("strict", False))
        ok = all((a > b) if strict else (a >= b) for a, b in zip(vals, vals[1:]))
        rel = " > " if strict else " >= "
        return Verdict(name, ok, rel.join(f"{c}={v:.3f}" for c, v in zip(conds, vals)),
                       dict(zip(conds, vals)))
    if kind == "reduction":
        b = _metric(summary, claim["better"], metric)
        w = _metric(summary, claim["worse"], metric)
        frac = 1.0 - b / w if w > 0 else 0.0
        need = float(claim.get("min_fraction", 0.0))
        ok = frac >= need if need > 0 else frac > 0
        return Verdict(name, ok, f"{claim['better']}={b:.1f} vs {claim['worse']}={w:.1f}: "
                       f"reduction {frac:.1%} (need {'>=' if need > 0 else '>'} {need:.0%})",
                       {"better": b, "worse": w, "reduction": frac})
    if kind == "ranksum":
        tb = [r.time_s for r in rows if r.condition == claim["better"]]
        tw = [r.time_s for r in rows if r.condition == claim["worse"]]
        for cond, ts in ((claim["better"], tb), (claim["worse"], tw)):
            if not ts:
                raise KeyError(f"no results for condition {cond!r}")
        p = float(stats.mannwhitneyu(tb, tw, alternative="less").pvalue)
        alpha = float(claim.get("alpha", 0.05))
        b = float(np.median(tb))
        w = float(np.median(tw))
        ok = p < alpha and b < w
        return Verdict(name, ok, f"median {b:.1f} vs {w:.1f}, one-sided p={p:.4f} "
                       f"(alpha {alpha})", {"better": b, "worse": w, "p": p})
    if kind == "gap":
        hi = _metric(summary, claim["high"], metric)
        lo = _metric(summary, claim["low"], metric)
        need = float(claim["min"])
        return Verdict(name, hi - lo >= need - 1e-12,
                       f"{claim['high']}={hi:.3f} - {claim['low']}={lo:.3f} = {hi - lo:.3f} "
                       f"(need >= {need})", {"high": hi, "low": lo})
    if kind == "greater":
        hi = _metric(summary, claim["high"], metric)
        lo = _metric(summary, claim["low"], metric)
        return Verdict(name, hi > lo, f"{claim['high']}={hi:.3f} > {claim['low']}={lo:.3f}",
                       {"high": hi, "low": lo})
    raise ValueError(f"unknown claim type {kind!r}")


def load_claims(path: str | Path) -> list[dict]:
    data = yaml.safe_load(_resolve(path).read_text())
    claims = data["claims"] if isinstance(data, dict) else data
    return [dict(c) for c in claims]


def compare(rows: Sequence[RunRow], claims: Sequence[Mapping[str, Any]]) -> list[Verdict]:
    return [evaluate_claim(c, rows) for c in claims]


"""Command-line entry point: ``obdecsim <verb> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import experiments as ex
from .mission import MissionConfig, run_mission
from .world import ScenarioError, World, load_scenario, read_scenario_file


def _scenario_validate(args) -> int:
    try:
        world = load_scenario(read_scenario_file(args.file))
    except (ScenarioError, OSError) as e:
        print(f"invalid: {e}", file=sys.stderr)
        return 2
    x0, x1, y0, y1 = world.bounds
    print(f"ok {world.name}: {x1 - x0:g} x {y1 - y0:g} m, ceiling {world.ceiling_height:g} m, "
          f"{world.n_cols}x{world.n_rows} cells, {len(world.obstacles)} obstacles, "
          f"{len(world.takeoff)} take-off points, targets {sorted(world.named_targets)}")
    return 0


def _mission_run(args) -> int:
    cfg = MissionConfig.load(args.config) if args.config != "default" else MissionConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    cfg = cfg.replace(**changes)
    out = Path(args.out) if args.out else None
    trace = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        trace = open(out / "channel.jsonl", "w")
    try:
        res = run_mission(cfg, channel_trace=trace)
    finally:
        if trace:
            trace.close()
    summary = res.summary()
    if out:
        with open(out / "events.jsonl", "w") as fp:
            res.write_event_log(fp)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _batch_run(args) -> int:
    spec = ex.BatchSpec.load(args.spec)
    if args.seed is not None:
        spec = ex.BatchSpec(spec.name, spec.conditions, spec.repeats, args.seed, spec.base)
    out = args.out or f"results-{spec.name}"
    progress = None if args.quiet else (lambda s: print(s, file=sys.stderr, flush=True))
    rows = ex.run_batch(spec, out, repeats=args.repeats, progress=progress)
    _print_summary(ex.summarize(rows))
    print(f"wrote {Path(out) / 'results.csv'} and {Path(out) / 'summary.json'}")
    return 0


def _print_summary(summary: Sequence[ex.SummaryRow]) -> None:
    print(f"{'condition':<24} {'n':>4} {'success':>8} {'median':>8} {'IQR':>8} {'coverage':>9}")
    for s in summary:
        print(f"{s.condition:<24} {s.n:>4} {s.success_rate:>8.3f} {s.median_time:>8.1f} "
              f"{s.iqr_time:>8.1f} {s.mean_coverage:>9.3f}")


def _batch_compare(args) -> int:
    path = Path(args.results)
    if path.is_dir():
        path = path / "results.csv"
    rows = ex.read_results(path)
    try:
        verdicts = ex.compare(rows, ex.load_claims(args.claims))
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return 2
    _print_summary(ex.summarize(rows))
    for v in verdicts:
        print(v.line())
    if args.json:
        Path(args.json).write_text(json.dumps(
            [{"name": v.name, "passed": v.passed, "detail": v.detail, "measured": v.measured}
             for v in verdicts], indent=2) + "\n")
    return 0 if all(v.passed for v in verdicts) else 1


# -- replay ------------------------------------------------------------------

_GLYPHS = "0123456789abcdefghijklmnopqrstuvwxyz"


def read_event_log(path: str | Path) -> list[dict]:
    with open(path) as fp:
        return [json.loads(line) for line in fp if line.strip()]


def render_map(records: Sequence[dict], world: World | None = None, scale: float = 0.5) -> str:
    """ASCII top-down view; agent ids mark visited points, '#' obstacles, 'X' collisions, 'T' target."""
    xs = [r["pose"][0] for r in records]
    ys = [r["pose"][1] for r in records]
    if world is not None:
        x0, x1, y0, y1 = world.bounds
    else:
        x0, x1, y0, y1 = min(xs) - 1, max(xs) + 1, min(ys) - 1, max(ys) + 1
    nx = max(1, int(round((x1 - x0) / scale)))
    ny = max(1, int(round((y1 - y0) / scale)))
    grid = [["." for _ in range(nx)] for _ in range(ny)]

    def put(x, y, ch):
        i = int((x - x0) / scale)
        j = int((y - y0) / scale)
        if 0 <= i < nx and 0 <= j < ny:
            grid[ny - 1 - j][i] = ch

    if world is not None:
        for j in range(ny):
            for i in range(nx):
                x = x0 + (i + 0.5) * scale
                y = y0 + (j + 0.5) * scale
                if not world.is_free_ground(x, y):
                    grid[ny - 1 - j][i] = "#"
        put(world.target.position[0], world.target.position[1], "T")
    for r in records:
        ch = "X" if "collision" in r.get("events", []) else _GLYPHS[r["agent"] % len(_GLYPHS)]
        put(r["pose"][0], r["pose"][1], ch)
    return "\n".join("".join(row) for row in grid)


def _replay(args) -> int:
    records = read_event_log(args.eventlog)
    if not records:
        print("empty event log", file=sys.stderr)
        return 2
    world = load_scenario(args.scenario) if args.scenario else None
    if args.steps:
        for r in records:
            if r["step"] % args.every:
                continue
            x, y, z, psi = r["pose"]
            ev = ",".join(r.get("events", []))
            print(f"{r['step']:>4} t={r['t']:>6.1f} uav{r['agent']} {str(r['action']):<10} "
                  f"({x:6.2f},{y:6.2f},{z:5.2f},{psi:6.2f}) {ev}")
    print(render_map(records, world, args.scale))
    last = max(r["step"] for r in records)
    agents = sorted({r["agent"] for r in records})
    print(f"{len(agents)} agents, {last + 1} steps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obdecsim", description="Multi-UAV observation-sharing search simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    sc = sub.add_parser("scenario", help="scenario files").add_subparsers(dest="action", required=True)
    v = sc.add_parser("validate", help="check a scenario file")
    v.add_argument("file", help="YAML path or shipped scenario name")
    v.set_defaults(func=_scenario_validate)

    ms = sub.add_parser("mission", help="single missions").add_subparsers(dest="action", required=True)
    r = ms.add_parser("run", help="run one mission")
    r.add_argument("config", help="mission YAML, or 'default'")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out", help="directory for events.jsonl, channel.jsonl, summary.json")
    r.set_defaults(func=_mission_run)

    bt = sub.add_parser("batch", help="experiment batches").add_subparsers(dest="action", required=True)
    br = bt.add_parser("run", help="run (or resume) a batch")
    br.add_argument("spec", help="batch YAML, or a shipped batch name (exp-one, exp-two)")
    br.add_argument("--out")
    br.add_argument("--repeats", type=int)
    br.add_argument("--seed", type=int, help="override the master seed")
    br.add_argument("--quiet", action="store_true")
    br.set_defaults(func=_batch_run)
    bc = bt.add_parser("compare", help="check claims against batch results")
    bc.add_argument("results", help="results.csv or the batch output directory")
    bc.add_argument("claims", help="claims YAML, or a shipped claims name")
    bc.add_argument("--json", help="also write verdicts to this file")
    bc.set_defaults(func=_batch_compare)

    rp = sub.add_parser("replay", help="render an event log as text")
    rp.add_argument("eventlog")
    rp.add_argument("--scenario", help="draw obstacles and target of this scenario")
    rp.add_argument("--steps", action="store_true", help="also list the per-step records")
    rp.add_argument("--every", type=int, default=1)
    rp.add_argument("--scale", type=float, default=0.5, help="metres per character")
    rp.set_defaults(func=_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``sead validate|verify|run|export-dot``.

Exit codes: 0 ok, 1 findings, 2 usage or I/O problem, 3 a run did not
quiesce before ``t_max``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import mdl, simulation, verification
from .catalogue import builtin_registry, scenario_path
from .dot import to_dot
from .runtime import POLICIES

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_NON_QUIESCENT = 3

CONFIG_ENV = "SEAD_CONFIG"


class UsageError(Exception):
    pass


def _err(text: str) -> None:
    print(text, file=sys.stderr)


def _read_document(path: str) -> mdl.MdlDocument:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    return mdl.parse(data)


def _load_documents(paths: Sequence[str]) -> tuple[list[tuple[str, mdl.MdlDocument | None, list[mdl.Diagnostic]]], mdl.Registry]:
    """Parse each path; syntax and schema errors become diagnostics on that entry."""
    base = builtin_registry()
    loaded: list[tuple[str, mdl.MdlDocument | None, list[mdl.Diagnostic]]] = []
    for p in paths:
        if not Path(p).exists() and p in base:
            loaded.append((p, base[p], []))
            continue
        try:
            loaded.append((p, _read_document(p), []))
        except mdl.MdlSyntaxError as exc:
            loaded.append((p, None, [mdl.Diagnostic("error", "SYNTAX", f"line {exc.line}:{exc.column}", str(exc), p)]))
        except mdl.MdlSchemaError as exc:
            loaded.append((p, None, [mdl.Diagnostic("error", exc.rule, exc.path, str(exc), p)]))
    registry = base.with_documents(doc for _, doc, _ in loaded if doc is not None)
    return loaded, registry


def _report(results: list[dict[str, Any]], as_json: bool) -> None:
    if as_json:
        print(json.dumps(results, indent=2, sort_keys=True))
        return
    for entry in results:
        for d in entry["diagnostics"]:
            _err(f"{entry['path']}: {d['severity'].upper()} {d['rule']} at {d['path']}: {d['message']}")


def cmd_validate(args: argparse.Namespace) -> int:
    loaded, registry = _load_documents(args.paths)
    results = []
    failed = False
    for path, doc, diags in loaded:
        if doc is not None:
            diags = mdl.validate(doc, registry)
        failed |= bool(mdl.errors(diags))
        results.append({"path": path, "id": doc.id if doc else None, "valid": not mdl.errors(diags),
                        "diagnostics": [d.to_dict() for d in diags]})
    _report(results, args.json)
    return EXIT_FINDINGS if failed else EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    if args.paths:
        loaded, registry = _load_documents(args.paths)
    else:
        registry = builtin_registry()
        loaded = [(doc_id, registry[doc_id], []) for doc_id in registry]
    results = []
    failed = False
    for path, doc, diags in loaded:
        entry: dict[str, Any] = {"path": path, "id": doc.id if doc else None}
        if doc is not None:
            diags = mdl.validate(doc, registry)
            if not mdl.errors(diags):
                behaviour = mdl.compile(doc, registry)
                diags = [d for d in diags if d.severity == "error"] + verification.verify(behaviour, args.coverage)
                if args.enumerate:
                    try:
                        outcomes = verification.enumerate_outcomes(behaviour)
                        entry["outcomes"] = [o.to_dict() for o in sorted(outcomes, key=repr)]
                    except verification.StateExplosion:
                        entry["outcomes"] = None
        failed |= bool(mdl.errors(diags))
        entry["diagnostics"] = [d.to_dict() for d in diags]
        results.append(entry)
    if args.json:
        print(json.dumps(results, indent=2, sort_keys=True))
    else:
        _report(results, False)
        if args.enumerate:
            for entry in results:
                if entry.get("outcomes") is None:
                    continue
                print(f"{entry['id']}:")
                for o in entry["outcomes"]:
                    states = " ".join(f"{r}={s}" for r, s in sorted(o["states"].items()))
                    where = f" after {o['step']}" if o["step"] else ""
                    print(f"  {_fmt_result(o['result'])}{where}: {states}")
    return EXIT_FINDINGS if failed else EXIT_OK


def _fmt_result(result: Any) -> str:
    if result is None:
        return "-"
    if isinstance(result, list):
        return "(" + ", ".join(result) + ")"
    return str(result)


# ------------------------------------------------------------------ run

def _resolve_scenario(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    builtin = scenario_path(name.removesuffix(".json"))
    if builtin.exists():
        return builtin
    raise UsageError(f"no such scenario: {name}")


def _config_file(path: str | None) -> dict[str, Any]:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return data


def _run_one(job: dict[str, Any]) -> dict[str, Any]:
    """Runs in a worker process; returns plain data only."""
    data = job["scenario"]
    config = simulation.scenario_config(data, job["overrides"])
    world = simulation.World(data, config, job["seed"])
    result = world.run()
    return {
        "name": job["name"],
        "trace": result.trace.to_jsonl(),
        "quiescent": result.quiescent,
        "stable": simulation.all_stable(world),
        "consistency": world.consistency_errors(),
        "summary": result.summary(),
        "time": round(world.now, 9),
    }


def _output_path(option: str | None, name: str, suffix: str, many: bool) -> Path | None:
    if option is None:
        return None
    if many:
        return Path(option) / f"{name}{suffix}"
    return Path(option)


def _print_summary(name: str, out: dict[str, Any]) -> None:
    print(f"scenario {name}: t={out['time']:g}s quiescent={'yes' if out['quiescent'] else 'no'} "
          f"stable={'yes' if out['stable'] else 'no'}")
    header = f"  {'instance':<24} {'action':<14} {'leader':<8} {'result':<12} {'duration':>9} {'messages':>8}"
    print(header)
    for row in out["summary"]:
        duration = "-" if row["duration"] is None else f"{row['duration']:.1f}"
        print(f"  {row['id']:<24} {row['action']:<14} {row['leader']:<8} "
              f"{_fmt_result(row['result']):<12} {duration:>9} {row['messages']:>8}")
    for problem in out["consistency"]:
        print(f"  inconsistent: {problem}")


def cmd_run(args: argparse.Namespace) -> int:
    overrides = _config_file(args.config)
    for key in ("drop", "t_max", "latency", "policy"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    jobs = []
    for name in args.scenarios:
        path = _resolve_scenario(name)
        try:
            data = simulation.load_scenario(path)
            simulation.scenario_config(data, overrides)
        except (OSError, json.JSONDecodeError, simulation.ScenarioError, ValueError, TypeError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
        jobs.append({"name": data.get("name", path.stem), "scenario": data, "overrides": overrides, "seed": args.seed})

    many = len(jobs) > 1
    for option in (args.trace, args.dot):
        if many and option is not None:
            Path(option).mkdir(parents=True, exist_ok=True)

    if args.jobs > 1 and many:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]

    code = EXIT_OK
    registry = builtin_registry()
    for job, out in zip(jobs, outputs):
        trace_path = _output_path(args.trace, out["name"], ".jsonl", many)
        if trace_path is not None:
            trace_path.write_text(out["trace"])
        dot_path = _output_path(args.dot, out["name"], ".dot", many)
        if dot_path is not None:
            actions = dict.fromkeys(e["action"] for e in job["scenario"].get("script", []))
            graphs = [to_dot(mdl.compile(registry[a], registry)) for a in actions if a in registry]
            dot_path.write_text("".join(graphs))
        if args.json:
            print(json.dumps({k: v for k, v in out.items() if k != "trace"}, sort_keys=True))
        else:
            _print_summary(out["name"], out)
        if not out["quiescent"]:
            code = max(code, EXIT_NON_QUIESCENT)
        elif not out["stable"] or out["consistency"]:
            code = max(code, EXIT_FINDINGS)
    return code


def cmd_export_dot(args: argparse.Namespace) -> int:
    loaded, registry = _load_documents([args.behaviour])
    path, doc, diags = loaded[0]
    if doc is None:
        _report([{"path": path, "diagnostics": [d.to_dict() for d in diags]}], False)
        return EXIT_FINDINGS
    try:
        text = to_dot(mdl.compile(doc, registry))
    except mdl.MdlCompileError as exc:
        _report([{"path": path, "diagnostics": [d.to_dict() for d in exc.diagnostics]}], False)
        return EXIT_FINDINGS
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sead", description="Validate, verify, simulate and draw platoon manoeuvres.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check documents for structural problems")
    p.add_argument("paths", nargs="+", help="document files or catalogue ids")
    p.add_argument("--json", action="store_true", help="print diagnostics as JSON on stdout")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("verify", help="run stability and synchronisation checks")
    p.add_argument("paths", nargs="*", help="document files or catalogue ids (default: whole catalogue)")
    p.add_argument("--enumerate", action="store_true", help="print every reachable ending")
    p.add_argument("--coverage", action="store_true", help="also flag transitions that never fire")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="simulate one or more scenarios")
    p.add_argument("scenarios", nargs="+", help="scenario files or shipped scenario names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help=f"JSON file of simulation settings (default: ${CONFIG_ENV})")
    p.add_argument("--drop", type=float, help="message loss probability")
    p.add_argument("--latency", type=float)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--policy", choices=sorted(POLICIES))
    p.add_argument("--trace", help="JSONL trace output (a directory when running several scenarios)")
    p.add_argument("--dot", help="DOT graph of the scripted manoeuvres (a directory for several scenarios)")
    p.add_argument("--jobs", type=int, default=1, help="run scenarios in this many worker processes")
    p.add_argument("--json", action="store_true", help="print summaries as JSON lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export-dot", help="write a behaviour's graph in DOT")
    p.add_argument("behaviour", help="document file or catalogue id")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_export_dot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        _err("sead: --jobs must be at least 1")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(f"sead: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _err(f"sead: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``inductive-coding --config run.json <command>``.

Every command reads and writes artifacts in one run directory. A manifest
there records which stages are complete, under which configuration, and the
checksums of what they consumed and produced, so reruns are no-ops, stale
stages are refused without ``--force``, and interrupted stages resume.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .assignment import ThemeAssignment, assign_all, unresolved_rate
from .config import ConfigError, RunConfig, load_config
from .corpus import load_corpus, read_segments, segment_corpus, write_segments
from .errors import (
    ConfigurationError,
    CorpusError,
    EmptySegmentationError,
    GoldSchemaError,
    InductiveCodingError,
    LookupFailure,
)
from .gateway import Gateway, GatewayStats
from .hierarchy import HierarchyRun, render_trace, run_hierarchical_clustering, theme_distribution, trace_theme
from .incremental import run_incremental
from .labeling import SegmentAnnotation, generate_labels, label_pool
from .metrics import ThemeSet, evaluate, heatmap_csv, load_gold, similarity_matrix
from .runs import RunDirectory, RunLockedError, StageOrderError, StaleStageError
from .storage import atomic_write_text, read_json, read_jsonl, sha256_file, write_json, write_jsonl

log = logging.getLogger("inductive_coding")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_ORDER = 3
EXIT_NOTHING_TO_CLUSTER = 4
EXIT_LOCKED = 5
EXIT_INTERRUPTED = 130

SOURCES = ("hierarchy", "incremental")


class NothingToCluster(InductiveCodingError):
    pass


def _prefix(source: str) -> str:
    return "" if source == "hierarchy" else "incremental_"


def _stage_name(base: str, source: str) -> str:
    return base if source == "hierarchy" else f"{base}_incremental"


def _themes_file(source: str) -> str:
    return "themes.jsonl" if source == "hierarchy" else "incremental_themes.jsonl"


def _digest_path(path: str | Path) -> str:
    """Checksum of a file, or of every ``*.txt`` file in a directory."""
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.glob("*.txt")):
            h.update(f.name.encode("utf-8") + b"\0" + sha256_file(f).encode("ascii"))
        return h.hexdigest()
    if p.exists():
        return sha256_file(p)
    return "missing"


def _combine(*parts: str) -> str:
    return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()


def _tokens(records) -> dict:
    prompt = completion = 0
    for r in records:
        usage = r.get("usage") or {}
        prompt += int(usage.get("prompt_tokens", 0))
        completion += int(usage.get("completion_tokens", 0))
    return {"prompt_tokens": prompt, "completion_tokens": completion}


def _stats_tokens(stats: GatewayStats) -> dict:
    return {"prompt_tokens": stats.prompt_tokens, "completion_tokens": stats.completion_tokens}


@dataclass
class Context:
    cfg: RunConfig
    rd: RunDirectory
    force: bool
    fmt: str
    out: Callable[[str], None]

    def emit(self, payload: dict, text: str) -> None:
        if self.fmt == "json":
            self.out(json.dumps(payload, sort_keys=True))
        else:
            self.out(text)


def _run_stage(
    ctx: Context,
    name: str,
    needs: list[str],
    config_hash: str,
    inputs: list[str],
    artifacts: list[str],
    setup: Callable[[], object],
    body: Callable[[object], tuple[dict, dict, str]],
    partials: tuple[str, ...] = (),
) -> int:
    rd = ctx.rd
    rd.require(name, needs)
    plan = rd.plan(name, config_hash, inputs, ctx.force)
    if not plan.run:
        ctx.emit({"stage": name, "status": "up to date"}, f"{name}: up to date")
        return EXIT_OK
    # construct gateways and validate inputs before touching any state
    state = setup()
    prev = rd.stage(name)
    if prev and prev.get("complete"):
        dest = rd.archive(name, artifacts)
        if dest:
            log.warning("archived previous %s artifacts to %s", name, dest)
    elif prev and prev.get("config_hash") != config_hash:
        for p in partials:
            rd.path(p).unlink(missing_ok=True)
    log.info("%s: %s", name, plan.reason)
    rd.begin(name, config_hash, inputs)
    summary, extra, text = body(state)
    rd.finish(name, artifacts, extra)
    ctx.emit({"stage": name, "status": "complete", **summary}, text)
    return EXIT_OK


# -- commands -------------------------------------------------------------------


def cmd_ingest(ctx: Context, args) -> int:
    cfg = ctx.cfg
    h = _combine(cfg.section_hash("corpus", "segmentation"), _digest_path(cfg.corpus.path))

    def body(_):
        docs = load_corpus(cfg.corpus.path, cfg.corpus.format)
        segments = segment_corpus(docs, cfg.segmentation)
        write_segments(segments, ctx.rd.path("segments.jsonl"))
        summary = {"documents": len(docs), "segments": len(segments)}
        return summary, summary, f"ingest: {len(docs)} document(s) -> {len(segments)} segment(s)"

    return _run_stage(ctx, "ingest", [], h, [], ["segments.jsonl"], lambda: None, body)


def cmd_generate(ctx: Context, args) -> int:
    cfg = ctx.cfg
    partial = "annotations.partial.jsonl"

    def setup():
        return Gateway(cfg.generation)

    def body(gw: Gateway):
        segments = read_segments(ctx.rd.path("segments.jsonl"))
        anns = generate_labels(cfg.task, segments, gw, checkpoint=ctx.rd.path(partial))
        records = [a.to_record() for a in anns]
        write_jsonl(ctx.rd.path("annotations.jsonl"), records)
        ctx.rd.path(partial).unlink(missing_ok=True)
        irrelevant = sum(a.irrelevant for a in anns)
        failed = sum(a.failed for a in anns)
        summary = {
            "segments": len(anns),
            "irrelevant": irrelevant,
            "failed": failed,
            "pool_size": len(label_pool(anns)),
        }
        extra = {**summary, "tokens": _tokens(records), "gateway": gw.stats.as_dict()}
        text = (
            f"generate: {len(anns)} segment(s), {irrelevant} irrelevant, {failed} failed, "
            f"{summary['pool_size']} distinct label(s)"
        )
        return summary, extra, text

    return _run_stage(
        ctx, "generate", ["ingest"], cfg.section_hash("task", "generation"),
        ["segments.jsonl"], ["annotations.jsonl"], setup, body, partials=(partial,),
    )


def _annotations(rd: RunDirectory) -> list[SegmentAnnotation]:
    return [SegmentAnnotation.from_record(r) for r in read_jsonl(rd.path("annotations.jsonl"))]


def cmd_cluster(ctx: Context, args) -> int:
    cfg = ctx.cfg

    def setup():
        gw = Gateway(cfg.clustering)
        pool = label_pool(_annotations(ctx.rd))
        if not pool:
            raise NothingToCluster("nothing to cluster: every segment is irrelevant or failed")
        return gw, pool

    def body(state):
        gw, pool = state
        run = run_hierarchical_clustering(pool, cfg.task.coding_goal, cfg.cluster, gw)
        write_json(ctx.rd.path("hierarchy.json"), run.to_dict())
        write_jsonl(ctx.rd.path("themes.jsonl"), [t.to_record() for t in run.final_themes])
        trajectory = [len(level) for level in run.iterations]
        summary = {
            "pool_size": len(pool),
            "trajectory": trajectory,
            "stop_reason": run.stop_reason,
            "themes": len(run.final_themes),
        }
        extra = {**summary, "tokens": _stats_tokens(gw.stats), "gateway": gw.stats.as_dict()}
        text = (
            f"cluster: {len(pool)} label(s) -> {' -> '.join(map(str, trajectory))} theme(s) "
            f"(stop: {run.stop_reason})"
        )
        return summary, extra, text

    return _run_stage(
        ctx, "cluster", ["generate"], cfg.section_hash("task", "clustering", "cluster"),
        ["annotations.jsonl"], ["hierarchy.json", "themes.jsonl"], setup, body,
    )


def cmd_incremental(ctx: Context, args) -> int:
    cfg = ctx.cfg
    h = cfg.section_hash("task", "generation", "clustering", "incremental")
    if args.gold:
        h = _combine(h, _digest_path(args.gold))

    def setup():
        gen, merge = Gateway(cfg.generation), Gateway(cfg.clustering)
        coverage = load_gold(args.gold)[1] if args.gold else None
        return gen, merge, coverage

    def body(state):
        gen, merge, coverage = state
        segments = read_segments(ctx.rd.path("segments.jsonl"))
        run = run_incremental(cfg.task, segments, cfg.incremental, gen, coverage, merge_gateway=merge)
        write_json(ctx.rd.path("incremental_run.json"), run.to_dict())
        write_jsonl(ctx.rd.path("incremental_themes.jsonl"), run.theme_records())
        samples = [it["sample_size"] for it in run.iterations if it["phase"] == "full"]
        summary = {
            "iterations": len(run.iterations),
            "sample_sizes": samples,
            "codes": len(run.final_codebook),
            "dropped": len(run.dropped),
            "stop_reason": run.stop_reason,
        }
        tokens = {
            "prompt_tokens": gen.stats.prompt_tokens + merge.stats.prompt_tokens,
            "completion_tokens": gen.stats.completion_tokens + merge.stats.completion_tokens,
        }
        extra = {**summary, "tokens": tokens}
        text = (
            f"incremental: {len(run.iterations)} iteration(s), samples {samples}, "
            f"{len(run.final_codebook)} code(s), {len(run.dropped)} dropped (stop: {run.stop_reason})"
        )
        return summary, extra, text

    return _run_stage(
        ctx, "incremental", ["ingest"], h, ["segments.jsonl"],
        ["incremental_run.json", "incremental_themes.jsonl"], setup, body,
    )


def _theme_pairs(rd: RunDirectory, source: str) -> list[tuple[str, str]]:
    return [(r["theme_id"], r["phrase"]) for r in read_jsonl(rd.path(_themes_file(source)))]


def cmd_assign(ctx: Context, args) -> int:
    cfg = ctx.cfg
    source = args.source
    name = _stage_name("assign", source)
    out = f"{_prefix(source)}assignments.jsonl"
    partial = f"{_prefix(source)}assignments.partial.jsonl"
    upstream = "cluster" if source == "hierarchy" else "incremental"
    h = _combine(cfg.section_hash("task", "generation", "embedding"), repr(cfg.fuzzy_threshold))

    def setup():
        return Gateway(cfg.generation), Gateway(cfg.embedding)

    def body(state):
        gw, emb = state
        themes = _theme_pairs(ctx.rd, source)
        segments = read_segments(ctx.rd.path("segments.jsonl"))
        result = assign_all(
            cfg.task.coding_goal, themes, segments, gw, emb, cfg.fuzzy_threshold,
            checkpoint=ctx.rd.path(partial),
        )
        records = [a.to_record() for a in result]
        write_jsonl(ctx.rd.path(out), records)
        ctx.rd.path(partial).unlink(missing_ok=True)
        rate = unresolved_rate(result)
        counts = {k: sum(a.resolution == k for a in result) for k in ("exact", "fuzzy", "unresolved")}
        summary = {"source": source, "segments": len(result), "unresolved_rate": rate, **counts}
        extra = {**summary, "tokens": _tokens(records)}
        text = (
            f"assign ({source}): {len(result)} segment(s); exact {counts['exact']}, "
            f"fuzzy {counts['fuzzy']}, unresolved {counts['unresolved']} "
            f"(unresolved rate {rate:.3f})"
        )
        return summary, extra, text

    return _run_stage(
        ctx, name, [upstream], h, ["segments.jsonl", _themes_file(source)], [out], setup, body,
        partials=(partial,),
    )


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.3f}"


def cmd_evaluate(ctx: Context, args) -> int:
    cfg = ctx.cfg
    source = args.source
    name = _stage_name("evaluate", source)
    pre = _prefix(source)
    metrics_file, heatmap_file = f"{pre}metrics.json", f"{pre}heatmap.csv"
    h = _combine(cfg.section_hash("embedding", "k_grid"), _digest_path(args.gold))

    def setup():
        emb = Gateway(cfg.embedding)
        gold, gold_labels = load_gold(args.gold)
        return emb, gold, gold_labels

    def body(state):
        emb, gold, gold_labels = state
        pred = ThemeSet("predicted", tuple(_theme_pairs(ctx.rd, source)))
        assigned = [
            ThemeAssignment.from_record(r)
            for r in read_jsonl(ctx.rd.path(f"{pre}assignments.jsonl"))
        ]
        assignments = {a.segment_id: a.theme_id for a in assigned}
        unknown = sorted(set(gold_labels) - set(assignments))
        if unknown:
            log.warning("%d gold segment(s) have no assignment (e.g. %s)", len(unknown), unknown[0])
        matrix = similarity_matrix(gold, pred, emb)
        results = evaluate(matrix, gold, pred, assignments, gold_labels, cfg.k_grid)
        doc = {
            "source": source,
            "gold_themes": len(gold),
            "predicted_themes": len(pred),
            "segments_assigned": len(assignments),
            "unresolved_rate": unresolved_rate(assigned),
            "results": [r.to_dict() for r in results],
        }
        write_json(ctx.rd.path(metrics_file), doc)
        atomic_write_text(ctx.rd.path(heatmap_file), heatmap_csv(matrix, gold, pred))
        lines = [f"evaluate ({source}): {len(gold)} gold vs {len(pred)} predicted theme(s)"]
        lines.append(f"{'k':>5}  {'theme P':>8}  {'theme R':>8}  {'seg P':>9}  {'seg R':>9}")
        for r in results:
            lines.append(
                f"{r.k:>5.2f}  {float(r.theme_level.precision):>8.3f}  "
                f"{float(r.theme_level.recall):>8.3f}  "
                f"{_fmt(None if r.segment_precision.value is None else float(r.segment_precision.value)):>9}  "
                f"{_fmt(None if r.segment_recall.value is None else float(r.segment_recall.value)):>9}"
            )
        summary = {"results": doc["results"]}
        return summary, {"source": source}, "\n".join(lines)

    return _run_stage(
        ctx, name, [_stage_name("assign", source)], h,
        [_themes_file(source), f"{pre}assignments.jsonl"], [metrics_file, heatmap_file], setup, body,
    )


def cmd_trace(ctx: Context, args) -> int:
    ctx.rd.require("trace", ["cluster"])
    run = HierarchyRun.from_dict(read_json(ctx.rd.path("hierarchy.json")))
    depth = None if args.depth == "full" else int(args.depth)
    tree = trace_theme(run, args.theme_id, depth)
    if ctx.fmt == "json":
        ctx.out(json.dumps(tree, sort_keys=True, ensure_ascii=False))
    else:
        ctx.out(render_trace(tree))
    return EXIT_OK


def _report_hierarchy(rd: RunDirectory) -> dict:
    run = HierarchyRun.from_dict(read_json(rd.path("hierarchy.json")))
    rows = theme_distribution(run)
    return {
        "distribution": [
            {"theme_id": t.theme_id, "phrase": t.phrase, "label_count": n, "segment_support": s}
            for t, n, s in rows
        ],
        "pool_size": len(run.pool),
        "trajectory": [len(level) for level in run.iterations],
        "stop_reason": run.stop_reason,
    }


def _report_incremental(rd: RunDirectory) -> dict:
    run = read_json(rd.path("incremental_run.json"))
    rows = [
        {"theme_id": r["theme_id"], "phrase": r["phrase"], "label_count": 1,
         "segment_support": r["segment_support"]}
        for r in read_jsonl(rd.path("incremental_themes.jsonl"))
    ]
    rows.sort(key=lambda r: (-r["segment_support"], r["phrase"]))
    return {
        "distribution": rows,
        "pool_size": len(rows),
        "trajectory": [len(it["codebook"]) for it in run["iterations"]],
        "stop_reason": run["stop_reason"],
    }


def cmd_report(ctx: Context, args) -> int:
    cfg = ctx.cfg
    source = args.source
    name = _stage_name("report", source)
    pre = _prefix(source)
    upstream = "cluster" if source == "hierarchy" else "incremental"
    main_artifact = "hierarchy.json" if source == "hierarchy" else "incremental_run.json"
    inputs = ["annotations.jsonl", main_artifact, f"{pre}assignments.jsonl"]
    if source == "incremental":
        inputs = ["segments.jsonl", main_artifact, "incremental_themes.jsonl", f"{pre}assignments.jsonl"]
    out = f"{pre}report.json"

    def body(_):
        rd = ctx.rd
        doc = _report_hierarchy(rd) if source == "hierarchy" else _report_incremental(rd)
        tokens: dict[str, dict] = {}
        if source == "hierarchy":
            anns = list(read_jsonl(rd.path("annotations.jsonl")))
            total = len(anns)
            irrelevant = sum(bool(a["irrelevant"]) for a in anns)
            failed = sum(bool(a.get("failed")) for a in anns)
            tokens["generation"] = _tokens(anns)
            tokens["cluster"] = rd.stage("cluster").get("tokens", {})
            doc["irrelevance"] = {
                "segments": total,
                "irrelevant": irrelevant,
                "failed": failed,
                "rate": irrelevant / total if total else 0.0,
            }
        else:
            tokens["incremental"] = rd.stage("incremental").get("tokens", {})
        assigned_path = rd.path(f"{pre}assignments.jsonl")
        if rd.is_complete(_stage_name("assign", source)) and assigned_path.exists():
            assigned = list(read_jsonl(assigned_path))
            tokens["assign"] = _tokens(assigned)
            doc["unresolved_rate"] = (
                sum(a["resolution"] == "unresolved" for a in assigned) / len(assigned) if assigned else 0.0
            )
        tokens["total"] = {
            k: sum(t.get(k, 0) for t in tokens.values()) for k in ("prompt_tokens", "completion_tokens")
        }
        doc["tokens"] = tokens
        doc["source"] = source
        write_json(rd.path(out), doc)
        return {"report": doc}, {"source": source}, _render_report(doc)

    return _run_stage(
        ctx, name, [upstream], cfg.section_hash("task"), inputs, [out], lambda: None, body,
    )


def _render_report(doc: dict) -> str:
    lines = [f"report ({doc['source']}): stop reason {doc['stop_reason']}"]
    lines.append("trajectory: " + " -> ".join(map(str, doc["trajectory"])))
    if "irrelevance" in doc:
        irr = doc["irrelevance"]
        lines.append(
            f"irrelevant: {irr['irrelevant']}/{irr['segments']} ({irr['rate']:.3f}); failed: {irr['failed']}"
        )
    if "unresolved_rate" in doc:
        lines.append(f"unresolved assignment rate: {doc['unresolved_rate']:.3f}")
    width = max([len(r["phrase"]) for r in doc["distribution"]] + [5])
    lines.append(f"{'theme':<{width}}  {'labels':>6}  {'segments':>8}")
    for r in doc["distribution"]:
        lines.append(f"{r['phrase']:<{width}}  {r['label_count']:>6}  {r['segment_support']:>8}")
    lines.append(f"pool size: {doc['pool_size']}")
    total = doc["tokens"]["total"]
    lines.append(f"tokens: {total['prompt_tokens']} prompt, {total['completion_tokens']} completion")
    return "\n".join(lines)


COMMANDS = {
    "ingest": cmd_ingest,
    "generate": cmd_generate,
    "cluster": cmd_cluster,
    "incremental": cmd_incremental,
    "assign": cmd_assign,
    "evaluate": cmd_evaluate,
    "trace": cmd_trace,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inductive-coding", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--run-dir", help="override the run directory from the config")
    p.add_argument("--force", action="store_true", help="rerun a stale stage, archiving old artifacts")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("ingest", help="load and segment the corpus")
    sub.add_parser("generate", help="label every segment")
    sub.add_parser("cluster", help="cluster labels into themes")
    inc = sub.add_parser("incremental", help="run the incremental codebook baseline")
    inc.add_argument("--gold", help="gold file; full phase also waits for label coverage")
    for cmd in ("assign", "report"):
        sp = sub.add_parser(cmd, help=f"{cmd} using the chosen theme source")
        sp.add_argument("--source", choices=SOURCES, default="hierarchy")
    ev = sub.add_parser("evaluate", help="score themes and assignments against gold")
    ev.add_argument("--gold", required=True)
    ev.add_argument("--source", choices=SOURCES, default="hierarchy")
    tr = sub.add_parser("trace", help="show the lineage of a theme")
    tr.add_argument("theme_id")
    tr.add_argument("--depth", default="full", help="levels to expand, or 'full'")
    return p


def _print_errors(head: str, errors: list[str]) -> None:
    print(f"error: {head}", file=sys.stderr)
    for e in errors:
        print(f"  {e}", file=sys.stderr)


def main(argv: list[str] | None = None, out: Callable[[str], None] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "trace" and args.depth != "full":
        try:
            if int(args.depth) < 0:
                raise ValueError
        except ValueError:
            parser.error("--depth must be a non-negative integer or 'full'")
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = out or (lambda s: print(s, flush=True))

    try:
        cfg = load_config(args.config, args.run_dir)
        ctx = Context(cfg, RunDirectory(cfg.run_dir), args.force, args.format, out)
        if args.command == "trace":
            return cmd_trace(ctx, args)
        with ctx.rd.locked():
            return COMMANDS[args.command](ctx, args)
    except KeyboardInterrupt:
        print("interrupted; rerun the same command to resume", file=sys.stderr)
        return EXIT_INTERRUPTED
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusError as exc:
        _print_errors(f"{len(exc.errors)} corpus error(s)", exc.errors)
        return EXIT_USAGE
    except GoldSchemaError as exc:
        _print_errors(f"{len(exc.errors)} gold schema error(s)", exc.errors)
        return EXIT_USAGE
    except (StageOrderError, StaleStageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except NothingToCluster as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOTHING_TO_CLUSTER
    except RunLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (LookupFailure, EmptySegmentationError, InductiveCodingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

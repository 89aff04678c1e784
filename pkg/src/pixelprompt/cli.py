"""Command-line entry point: ``pixelprompt <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 domain failure
(render overflow, uncalibrated size, infeasible target), 3 endpoint failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import endpoint_from, load_config, profile_from, render_spec_from, sweep_config_from
from .corpus import NiahInstance, gen_niah, load_niah_jsonl, load_summarization_corpus, save_niah_jsonl
from .errors import ConfigError, EndpointError, PixelPromptError, RenderOverflow, UncalibratedSize
from .harness import (
    RunReport,
    emit_report,
    load_report,
    report_rows,
    reports_from_fixture,
    run_paired_eval,
    run_summarization,
    run_tolerance_sweep,
    summary_text,
)
from .metrics import accuracy, latency_summary
from .modelgw import RateLimiter, ResponseCache
from .render import render_adaptive
from .tokenomics import TokenBudget, estimate_visual_tokens, format_size, parse_size

log = logging.getLogger("pixelprompt")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_ENDPOINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit 2; this tool reserves 2 for domain failures."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    try:
        return parse_size(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- helpers -----------------------------------------------------------------------------

def _config(args: argparse.Namespace) -> dict[str, Any]:
    return load_config(args.config, args.set or ())


def _documents(paths: Sequence[Path]) -> list[tuple[str, str]]:
    """(name, text) pairs from plain-text files or JSONL batches."""
    docs = []
    for path in paths:
        if path.suffix != ".jsonl":
            docs.append((path.stem, path.read_text(encoding="utf-8")))
            continue
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "haystack" in record:
                inst = NiahInstance.from_dict(record)
                docs.append((inst.instance_id, inst.haystack))
                continue
            name = record.get("doc_id", record.get("id"))
            text = record.get("text", record.get("article"))
            if name is None or not isinstance(text, str):
                raise UsageError(f"{path}:{lineno}: expected an id and a text/article field")
            docs.append((str(name), text))
    return docs


def _print_rows(report: RunReport) -> None:
    rows = report_rows(report)
    if not rows:
        print(summary_text(report), end="")
        return
    print(f"{'model':<16} {'size':>9} {'k':>6} {'m*':>8} {'k/m*':>6} {'acc_img':>8} {'acc_text':>8}")
    for r in rows:
        print(f"{r['model']:<16} {r['width'] + 'x' + r['height']:>9} {r['k']:>6} {r['m_star'] or '-':>8} "
              f"{r['footprint'] or '-':>6} {r['acc_img'] or '-':>8} {r['acc_text'] or '-':>8}")


def _parallelism(args: argparse.Namespace, config: dict[str, Any]) -> int:
    if args.latency:
        return 1
    if args.workers:
        return args.workers
    if "parallelism" in config["sweep"]:
        return int(config["sweep"]["parallelism"])
    return 1 if args.mock else int(config["endpoint"].get("parallelism", 4))


# -- commands ---------------------------------------------------------------------------------

def cmd_render(args: argparse.Namespace) -> int:
    config = _config(args)
    spec = render_spec_from(config)
    if args.size:
        spec = spec.with_size(*args.size)
    docs = _documents(args.inputs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for name, text in docs:
        try:
            page = render_adaptive(text, spec)
        except RenderOverflow as exc:
            failed += 1
            print(f"{name}: overflow: {exc}", file=sys.stderr)
            continue
        path = out / f"{name}.png"
        page.save(path)
        print(f"{name}: {path.name} font={page.font_size_pt:g}pt fill={page.fill_ratio:.3f}")
    return EXIT_DOMAIN if failed else EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    profile = profile_from(_config(args), args.profile)
    try:
        k = estimate_visual_tokens(profile, args.width, args.height)
    except UncalibratedSize as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"profile={profile.name} size={args.width}x{args.height} k={k}")
    if args.context_tokens is not None:
        budget = TokenBudget(args.context_tokens, k, args.query_tokens)
        print(f"m={budget.m} q={budget.q_len} t_text={budget.t_text} t_img={budget.t_img} rho={budget.rho:.4f}")
    return EXIT_OK


def cmd_gen_niah(args: argparse.Namespace) -> int:
    profile = profile_from(_config(args), args.profile)
    instances = [gen_niah(args.m, profile, args.seed + i) for i in range(args.n)]
    path = Path(args.out_dir) / (args.output or f"niah_m{args.m}_s{args.seed}.jsonl")
    save_niah_jsonl(path, instances)
    for inst in instances:
        print(f"{inst.instance_id}: m={inst.actual_m} key={inst.needle_key}")
    print(f"wrote {len(instances)} instances to {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    profile = profile_from(config, args.profile)
    spec = render_spec_from(config)
    if args.size:
        spec = spec.with_size(*args.size)
    endpoint = endpoint_from(config, profile, mock=args.mock)
    instances = load_niah_jsonl(args.instances)
    out = Path(args.out_dir)
    pair = run_paired_eval(instances, endpoint, profile, spec, cache=ResponseCache(out / "cache"),
                           parallelism=_parallelism(args, config),
                           limiter=RateLimiter(config["endpoint"].get("rate_per_s")))
    for mode, records in (("text", pair.text), ("img", pair.img)):
        path = out / "records" / f"eval_{format_size(spec.size)}_{mode}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records), "utf-8")
    print(f"{len(pair.text)} paired instances, {len(pair.skipped)} skipped")
    for mode, records in (("text-only", pair.text), ("hybrid", pair.img)):
        print(f"{mode:<10} accuracy={accuracy(records):.1f}% latency={latency_summary(records).mean_s:.2f}s")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _config(args)
    cfg = sweep_config_from(config, profile_from(config, args.profile))
    cfg.parallelism = _parallelism(args, config)
    if args.dry_run:
        plan = cfg.plan()
        print(f"sizes: {' '.join(plan['image_sizes'])}")
        print(f"m grid: {' '.join(map(str, plan['m_grid']))}")
        print(f"instances per point: {plan['n_instances']}  seeds: {plan['seeds']}")
        print(f"{len(plan['image_sizes'])} sizes x {len(plan['m_grid'])} m x {plan['n_instances']} n "
              f"x {len(plan['seeds'])} seeds x 2 modes = {plan['calls']} calls")
        return EXIT_OK
    endpoint = endpoint_from(config, cfg.profile, mock=args.mock)
    progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    report = run_tolerance_sweep(cfg, endpoint, args.out_dir,
                                 limiter=RateLimiter(config["endpoint"].get("rate_per_s")), progress=progress)
    emit_report(report, args.out_dir)
    print(f"{report.stats['cached']} cached / {report.stats['total']} total")
    _print_rows(report)
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    config = _config(args)
    section = config["summarization"]
    corpus_path = args.corpus or section.get("corpus")
    if not corpus_path:
        raise UsageError("no corpus given (use --corpus or summarization.corpus)")
    profile = profile_from(config, args.profile)
    limit = args.limit or section.get("limit") or None
    size = args.size or (parse_size(section["image_size"]) if section.get("image_size") else None)
    corpus = load_summarization_corpus(corpus_path, limit)
    endpoint = endpoint_from(config, profile, mock=args.mock)
    out = Path(args.out_dir)
    result = run_summarization(corpus, endpoint, profile, render_spec_from(config), image_size=size,
                               cache=ResponseCache(out / "cache"), parallelism=_parallelism(args, config),
                               out_dir=out)
    report = RunReport(model=profile.name, summarization=result,
                       provenance={"config": config, "version": __version__, "skipped_docs": corpus.skipped})
    emit_report(report, out)
    print(summary_text(report), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if args.fixture:
        reports = list(reports_from_fixture().values())
    elif args.run_dir:
        reports = [load_report(args.run_dir)]
    else:
        raise UsageError("give a run directory or --fixture")
    out = Path(args.out_dir)
    for report in reports:
        target = out / report.model if len(reports) > 1 else out
        emit_report(report, target)
        _print_rows(report)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. sweep.n_instances=20 (repeatable)")
    common.add_argument("--out-dir", default="pixelprompt-out", help="directory for all outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log debug messages")

    evaluate = argparse.ArgumentParser(add_help=False)
    evaluate.add_argument("--mock", action="store_true", help="use the offline mock model")
    evaluate.add_argument("--workers", type=int, help="concurrent model calls")
    evaluate.add_argument("--latency", action="store_true",
                          help="latency benchmark: one call at a time, no batching")

    parser = _Parser(prog="pixelprompt", description="Render long contexts as page images and account for the tokens saved.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", parents=[common], help="render text files or JSONL batches to PNG pages")
    p.add_argument("inputs", nargs="+", type=Path, help="text files or .jsonl batches (id + text/article/haystack)")
    p.add_argument("--size", type=_size, help="page size WxH (default from config)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("estimate", parents=[common], help="visual-token count and token budget for a page size")
    p.add_argument("width", type=int)
    p.add_argument("height", type=int)
    p.add_argument("--profile", help="model profile (gpt, qwen or a configured name)")
    p.add_argument("--context-tokens", "-m", type=int, help="text tokens m replaced by the page")
    p.add_argument("--query-tokens", "-q", type=int, default=0, help="query tokens")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("gen-niah", parents=[common], help="generate needle-in-a-haystack instances")
    p.add_argument("--m", type=int, required=True, help="target haystack length in tokens")
    p.add_argument("--n", type=int, default=1, help="number of instances")
    p.add_argument("--seed", type=int, default=0, help="seed of the first instance")
    p.add_argument("--profile", help="model profile whose tokenizer measures m")
    p.add_argument("--output", help="file name under --out-dir")
    p.set_defaults(func=cmd_gen_niah)

    p = sub.add_parser("eval", parents=[common, evaluate], help="paired text/hybrid evaluation of an instance file")
    p.add_argument("instances", type=Path, help="JSONL file written by gen-niah")
    p.add_argument("--size", type=_size, help="page size WxH")
    p.add_argument("--profile")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, evaluate], help="tolerance sweep over image sizes and m")
    p.add_argument("--profile")
    p.add_argument("--dry-run", action="store_true", help="print the planned grid and call count only")
    p.add_argument("--quiet", action="store_true", help="no per-point progress")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("summarize", parents=[common, evaluate], help="summarization from text and from pages")
    p.add_argument("--corpus", help="JSONL with id, article, highlights")
    p.add_argument("--limit", type=int)
    p.add_argument("--size", type=_size, help="page size WxH (default: k closest to half the mean m)")
    p.add_argument("--profile")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("report", parents=[common], help="re-emit report artifacts")
    p.add_argument("run_dir", nargs="?", type=Path, help="run directory or report.json")
    p.add_argument("--fixture", action="store_true", help="build reports from the bundled tolerance curves")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except RenderOverflow as exc:
        print(f"overflow: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except PixelPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Experiment orchestration: paired evaluation, tolerance sweeps, summarization, reports.

A run directory holds everything needed to replay an experiment::

    config.json            config snapshot (written once; its timestamp is reused on resume)
    instances/             generated NIAH sets, one JSONL file per (seed, m)
    pages/<W>x<H>/         rendered page images
    records/<W>x<H>/       raw EvalRecords per (seed, m) and mode
    cache/                 content-addressed model responses
    report.json, report.csv, summary.txt, curve_<W>x<H>.svg
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import logging
import subprocess
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence

from . import __version__
from .corpus import NiahInstance, SummDoc, gen_niah, load_niah_jsonl, mean_token_length, save_niah_jsonl
from .errors import AllRenderFailed, ConfigError, PixelPromptError, RenderOverflow, UncalibratedSize
from .metrics import LatencyStats, accuracy, latency_summary
from .modelgw import (
    NIAH_INSTRUCTION,
    SUMM_INSTRUCTION,
    SUMM_QUERY,
    EvalRecord,
    ModelEndpoint,
    RateLimiter,
    ResponseCache,
    build_hybrid_prompt,
    build_text_prompt,
    complete,
)
from .render import RenderedPage, RenderSpec, render_adaptive
from .tokenomics import (
    NO_TOLERANCE,
    ModelProfile,
    ToleranceCurve,
    check_calibration,
    estimate_visual_tokens,
    format_reduction,
    format_size,
    parse_size,
    text_token_tolerance,
)

log = logging.getLogger(__name__)

DEFAULT_SIZES: tuple[tuple[int, int], ...] = ((600, 800), (600, 1000), (750, 1000))
DEFAULT_M_GRID: tuple[int, ...] = tuple(range(800, 3001, 200))
SUMMARY_SIZES: tuple[tuple[int, int], ...] = tuple((w, w * 4 // 3) for w in range(240, 781, 24))
ROUGE_KEYS = ("rouge1", "rouge2", "rougeL", "rougeLsum")


class SweepError(PixelPromptError):
    pass


@dataclass
class SweepConfig:
    profile: ModelProfile
    render: RenderSpec = field(default_factory=RenderSpec)
    image_sizes: list[tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_SIZES))
    m_grid: list[int] = field(default_factory=lambda: list(DEFAULT_M_GRID))
    n_instances: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    delta_pts: float = 3.0
    instruction: str = NIAH_INSTRUCTION
    parallelism: int = 1
    save_pages: bool = True
    timestamp: str | None = None

    def __post_init__(self) -> None:
        self.image_sizes = [parse_size(s) for s in self.image_sizes]
        self.m_grid = [int(m) for m in self.m_grid]
        if not self.image_sizes:
            raise ConfigError("sweep needs at least one image size")
        if not self.m_grid or any(m <= 0 for m in self.m_grid):
            raise ConfigError("m_grid must be non-empty and positive")
        if any(a >= b for a, b in zip(self.m_grid, self.m_grid[1:])):
            raise ConfigError("m_grid must be strictly ascending")
        if self.n_instances < 1:
            raise ConfigError("n_instances must be at least 1")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile.to_dict(),
            "render": self.render.to_dict(),
            "image_sizes": [format_size(s) for s in self.image_sizes],
            "m_grid": list(self.m_grid),
            "n_instances": self.n_instances,
            "seeds": list(self.seeds),
            "delta_pts": self.delta_pts,
            "instruction": self.instruction,
        }

    def plan(self) -> dict[str, Any]:
        points = len(self.image_sizes) * len(self.m_grid) * len(self.seeds)
        return {
            "image_sizes": [format_size(s) for s in self.image_sizes],
            "m_grid": list(self.m_grid),
            "n_instances": self.n_instances,
            "seeds": list(self.seeds),
            "points": points,
            "calls": points * self.n_instances * 2,
        }


def instance_seed(seed: int, m: int, index: int) -> int:
    return seed * 10**9 + m * 10**4 + index


# -- report types -----------------------------------------------------------------------

@dataclass
class SizeResult:
    size: tuple[int, int]
    k: int
    curve: ToleranceCurve | None
    seed_curves: dict[int, ToleranceCurve] = field(default_factory=dict)
    m_star_per_seed: dict[int, int | None] = field(default_factory=dict)
    m_star: float | None = None
    footprint: float | None = None
    acc_img: float | None = None
    acc_text: float | None = None
    latency_img: LatencyStats | None = None
    latency_text: LatencyStats | None = None
    gaps: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "size": format_size(self.size),
            "k": self.k,
            "curve": self.curve.to_dict() if self.curve else None,
            "seed_curves": {str(s): c.to_dict() for s, c in sorted(self.seed_curves.items())},
            "m_star_per_seed": {str(s): v for s, v in sorted(self.m_star_per_seed.items())},
            "m_star": self.m_star,
            "footprint": self.footprint,
            "acc_img": self.acc_img,
            "acc_text": self.acc_text,
            "latency_img": self.latency_img.to_dict() if self.latency_img else None,
            "latency_text": self.latency_text.to_dict() if self.latency_text else None,
            "gaps": self.gaps,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SizeResult:
        lat = lambda d: LatencyStats(**d) if d else None  # noqa: E731
        return cls(
            size=parse_size(data["size"]),
            k=data["k"],
            curve=ToleranceCurve.from_dict(data["curve"]) if data.get("curve") else None,
            seed_curves={int(s): ToleranceCurve.from_dict(c) for s, c in data.get("seed_curves", {}).items()},
            m_star_per_seed={int(s): v for s, v in data.get("m_star_per_seed", {}).items()},
            m_star=data.get("m_star"),
            footprint=data.get("footprint"),
            acc_img=data.get("acc_img"),
            acc_text=data.get("acc_text"),
            latency_img=lat(data.get("latency_img")),
            latency_text=lat(data.get("latency_text")),
            gaps=list(data.get("gaps", [])),
        )


@dataclass
class SummarizationResult:
    model: str
    n_docs: int
    m: float
    size: tuple[int, int]
    k: int
    methods: dict[str, dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model, "n_docs": self.n_docs, "m": self.m,
                "size": format_size(self.size), "k": self.k, "methods": self.methods}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SummarizationResult:
        return cls(data["model"], data["n_docs"], data["m"], parse_size(data["size"]),
                   data["k"], dict(data["methods"]))


@dataclass
class RunReport:
    model: str
    per_size: dict[tuple[int, int], SizeResult] = field(default_factory=dict)
    summarization: SummarizationResult | None = None
    provenance: dict[str, Any] = field(default_factory=dict)
    stats: dict[str, int] = field(default_factory=dict)  # run-local, never serialized

    @property
    def empty(self) -> bool:
        return not self.per_size and self.summarization is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "per_size": [r.to_dict() for _, r in sorted(self.per_size.items())],
            "summarization": self.summarization.to_dict() if self.summarization else None,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunReport:
        sizes = [SizeResult.from_dict(d) for d in data.get("per_size", [])]
        summ = data.get("summarization")
        return cls(
            model=data["model"],
            per_size={r.size: r for r in sizes},
            summarization=SummarizationResult.from_dict(summ) if summ else None,
            provenance=dict(data.get("provenance", {})),
        )


# -- persistence helpers ---------------------------------------------------------------------

def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data, encoding="utf-8")
    tmp.replace(path)


def _write_records(path: Path, records: Iterable[EvalRecord]) -> None:
    _atomic_write(path, "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))


def load_records(path: str | Path) -> list[EvalRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [EvalRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def _snapshot(out_dir: Path, config: Mapping[str, Any], timestamp: str | None) -> str:
    """Write config.json once and return the run's pinned timestamp."""
    path = out_dir / "config.json"
    if path.exists():
        try:
            previous = json.loads(path.read_text(encoding="utf-8"))
            if previous.get("config") == json.loads(json.dumps(config)):
                return timestamp or previous["created_at"]
        except (ValueError, KeyError):
            pass
    created = timestamp or _now()
    _atomic_write(path, json.dumps({"created_at": created, "config": config}, indent=2, sort_keys=True) + "\n")
    return created


# -- paired evaluation ------------------------------------------------------------------------

class PairedRecords(NamedTuple):
    text: list[EvalRecord]
    img: list[EvalRecord]
    skipped: list[tuple[str, str]]


def _task_parts(instance: NiahInstance | SummDoc, instruction: str | None) -> tuple[str, str, str, str]:
    if isinstance(instance, NiahInstance):
        return instance.haystack, instance.query, instruction or NIAH_INSTRUCTION, "first-line"
    return instance.source, SUMM_QUERY, instruction or SUMM_INSTRUCTION, "join-lines"


def _fan_out(fn: Callable[[Any], EvalRecord], jobs: Sequence[Any], parallelism: int) -> list[EvalRecord]:
    if parallelism <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, jobs))


def run_paired_eval(
    instances: Sequence[NiahInstance | SummDoc],
    endpoint: ModelEndpoint,
    profile: ModelProfile,
    render_spec: RenderSpec,
    *,
    instruction: str | None = None,
    cache: ResponseCache | None = None,
    parallelism: int = 1,
    limiter: RateLimiter | None = None,
    page_dir: Path | None = None,
) -> PairedRecords:
    """Evaluate every instance in both text-only and hybrid mode.

    Instances whose context cannot be rendered are dropped from both modes so
    the two record lists stay aligned by ``instance_id``.

    Raises:
        AllRenderFailed: no instance could be rendered.
    """
    if not instances:
        raise ValueError("no instances to evaluate")
    k = estimate_visual_tokens(profile, render_spec.width_px, render_spec.height_px)
    jobs = []
    skipped: list[tuple[str, str]] = []
    for inst in instances:
        context, query, instr, policy = _task_parts(inst, instruction)
        try:
            page: RenderedPage = render_adaptive(context, render_spec)
        except (RenderOverflow, ValueError) as exc:
            log.warning("%s: render failed, skipping in both modes (%s)", inst.instance_id, exc)
            skipped.append((inst.instance_id, str(exc)))
            continue
        if page_dir is not None:
            _atomic_write(page_dir / f"{inst.instance_id}.png", page.to_png())
        m = inst.actual_m if isinstance(inst, NiahInstance) else None
        jobs.append((inst, build_text_prompt(context, query, instr), m, policy))
        jobs.append((inst, build_hybrid_prompt(page, query, instr), m, policy))
    if not jobs:
        raise AllRenderFailed(f"none of {len(instances)} instances rendered at "
                              f"{render_spec.width_px}x{render_spec.height_px}")

    def call(job: tuple) -> EvalRecord:
        inst, prompt, m, policy = job
        return complete(endpoint, prompt, profile=profile, instance=inst, m=m, k=k,
                        cache=cache, answer_policy=policy, limiter=limiter)

    records = _fan_out(call, jobs, parallelism)
    return PairedRecords(records[0::2], records[1::2], skipped)


# -- tolerance sweep ----------------------------------------------------------------------------

def _pooled_curve(k: int, per_m: Mapping[int, list[EvalRecord]], text: Sequence[EvalRecord]) -> ToleranceCurve:
    points = tuple((m, accuracy(recs)) for m, recs in sorted(per_m.items()) if recs)
    return ToleranceCurve(k, points, accuracy(text))


def summarize_size(
    size: tuple[int, int],
    k: int,
    seed_curves: Mapping[int, ToleranceCurve],
    delta_pts: float,
    *,
    curve: ToleranceCurve | None = None,
    text_records: Sequence[EvalRecord] = (),
    img_records: Sequence[EvalRecord] = (),
    gaps: Sequence[dict[str, Any]] = (),
) -> SizeResult:
    """Derive m* (per seed and averaged), footprint and accuracy columns."""
    per_seed = {}
    for seed, c in sorted(seed_curves.items()):
        value = text_token_tolerance(c, delta_pts) if c.points else NO_TOLERANCE
        per_seed[seed] = None if value is NO_TOLERANCE else int(value)
    found = [v for v in per_seed.values() if v is not None]
    m_star = sum(found) / len(found) if found else None
    if curve is None and seed_curves:
        curve = next(iter(seed_curves.values())) if len(seed_curves) == 1 else _average_curves(k, seed_curves)
    acc_img = acc_text = None
    if curve is not None and curve.points:
        acc_text = curve.baseline_accuracy_pct
        if m_star is not None:
            below = [a for m, a in curve.points if m <= m_star]
            acc_img = below[-1] if below else None
    return SizeResult(
        size=size,
        k=k,
        curve=curve,
        seed_curves=dict(seed_curves),
        m_star_per_seed=per_seed,
        m_star=m_star,
        footprint=k / m_star if m_star else None,
        acc_img=acc_img,
        acc_text=acc_text,
        latency_img=latency_summary(img_records) if img_records else None,
        latency_text=latency_summary(text_records) if text_records else None,
        gaps=list(gaps),
    )


def _average_curves(k: int, curves: Mapping[int, ToleranceCurve]) -> ToleranceCurve:
    by_m: dict[int, list[float]] = {}
    for c in curves.values():
        for m, a in c.points:
            by_m.setdefault(m, []).append(a)
    baseline = sum(c.baseline_accuracy_pct for c in curves.values()) / len(curves)
    return ToleranceCurve(k, tuple((m, sum(v) / len(v)) for m, v in sorted(by_m.items())), baseline)


def _instances(run_dir: Path, cfg: SweepConfig, seed: int, m: int) -> list[NiahInstance]:
    path = run_dir / "instances" / f"s{seed}_m{m}.jsonl"
    if path.exists():
        stored = load_niah_jsonl(path)
        if len(stored) == cfg.n_instances:
            return stored
    generated = [gen_niah(m, cfg.profile, instance_seed(seed, m, i)) for i in range(cfg.n_instances)]
    save_niah_jsonl(path, generated)
    return generated


def run_tolerance_sweep(
    cfg: SweepConfig,
    endpoint: ModelEndpoint,
    out_dir: str | Path,
    *,
    use_cache: bool = True,
    limiter: RateLimiter | None = None,
    progress: Callable[[str], None] | None = None,
) -> RunReport:
    """Sweep context length m at each fixed image size and derive m* per size.

    Raw records are persisted per point before aggregation. A failing point
    becomes a gap in the report; a size with no surviving point raises
    :class:`SweepError`.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    missing = check_calibration((cfg.profile, s) for s in cfg.image_sizes)
    if missing:
        raise UncalibratedSize(f"missing visual-token calibration for: {', '.join(missing)}")
    config = {**cfg.to_dict(), "endpoint": endpoint.name}
    created = _snapshot(run_dir, config, cfg.timestamp)
    cache = ResponseCache(run_dir / "cache") if use_cache else None
    report = RunReport(model=cfg.profile.name, provenance={
        "config": config, "version": __version__, "git": _git_revision(), "created_at": created})

    cached = total = 0
    for size in cfg.image_sizes:
        tag = format_size(size)
        k = estimate_visual_tokens(cfg.profile, *size)
        spec = cfg.render.with_size(*size)
        seed_curves: dict[int, ToleranceCurve] = {}
        all_text: list[EvalRecord] = []
        all_img: list[EvalRecord] = []
        img_by_m: dict[int, list[EvalRecord]] = {}
        gaps: list[dict[str, Any]] = []
        for seed in cfg.seeds:
            points, seed_text = [], []
            for m in cfg.m_grid:
                try:
                    instances = _instances(run_dir, cfg, seed, m)
                    pair = run_paired_eval(
                        instances, endpoint, cfg.profile, spec, instruction=cfg.instruction,
                        cache=cache, parallelism=cfg.parallelism, limiter=limiter,
                        page_dir=run_dir / "pages" / tag if cfg.save_pages else None)
                except PixelPromptError as exc:
                    log.warning("%s m=%d seed=%d: point failed (%s)", tag, m, seed, exc)
                    gaps.append({"seed": seed, "m": m, "reason": f"{type(exc).__name__}: {exc}"})
                    continue
                _write_records(run_dir / "records" / tag / f"s{seed}_m{m}_text.jsonl", pair.text)
                _write_records(run_dir / "records" / tag / f"s{seed}_m{m}_img.jsonl", pair.img)
                for r in (*pair.text, *pair.img):
                    total += 1
                    cached += r.cached
                points.append((m, accuracy(pair.img)))
                seed_text += pair.text
                all_img += pair.img
                img_by_m.setdefault(m, []).extend(pair.img)
                if pair.skipped:
                    gaps.append({"seed": seed, "m": m, "reason": f"{len(pair.skipped)} render failures"})
                if progress:
                    progress(f"{tag} seed={seed} m={m}: hybrid {points[-1][1]:.1f}%")
            if points:
                seed_curves[seed] = ToleranceCurve(k, tuple(points), accuracy(seed_text))
            all_text += seed_text
        if not seed_curves:
            raise SweepError(f"{tag}: every sweep point failed ({len(gaps)} gaps)")
        curve = _pooled_curve(k, img_by_m, all_text)
        result = summarize_size(size, k, seed_curves, cfg.delta_pts, curve=curve,
                                text_records=all_text, img_records=all_img, gaps=gaps)
        last_acc = curve.points[-1][1]
        if curve.baseline_accuracy_pct < last_acc:
            warnings.warn(f"{tag}: text-only accuracy {curve.baseline_accuracy_pct:.1f}% is below "
                          f"hybrid accuracy {last_acc:.1f}% at the largest m", stacklevel=2)
        report.per_size[size] = result
    report.stats = {"cached": cached, "total": total}
    _atomic_write(run_dir / "report.json", report.to_json())
    return report


# -- summarization -----------------------------------------------------------------------------

def select_summary_size(profile: ModelProfile, mean_m: float,
                        candidates: Sequence[tuple[int, int]] | None = None) -> tuple[int, int]:
    """Smallest candidate size whose visual-token count is closest to half of ``mean_m``."""
    if candidates is None:
        candidates = profile.visual_token_rule.sizes() or SUMMARY_SIZES
    scored = []
    for w, h in candidates:
        try:
            k = estimate_visual_tokens(profile, w, h)
        except UncalibratedSize:
            continue
        scored.append((abs(k - mean_m / 2), w * h, (w, h)))
    if not scored:
        raise UncalibratedSize(f"profile {profile.name} cannot estimate any candidate size")
    return min(scored)[2]


def run_summarization(
    corpus: Iterable[SummDoc],
    endpoint: ModelEndpoint,
    profile: ModelProfile,
    render_spec: RenderSpec,
    *,
    limit: int | None = None,
    image_size: tuple[int, int] | None = None,
    candidate_sizes: Sequence[tuple[int, int]] | None = None,
    cache: ResponseCache | None = None,
    parallelism: int = 1,
    out_dir: str | Path | None = None,
) -> SummarizationResult:
    """Summarize each document from text and from its rendered page; score with ROUGE."""
    docs = list(corpus)[:limit] if limit is not None else list(corpus)
    if not docs:
        raise ValueError("empty corpus")
    mean_m = mean_token_length(docs, profile)
    size = parse_size(image_size) if image_size else select_summary_size(profile, mean_m, candidate_sizes)
    k = estimate_visual_tokens(profile, *size)
    pair = run_paired_eval(docs, endpoint, profile, render_spec.with_size(*size), cache=cache,
                           parallelism=parallelism)
    if out_dir is not None:
        _write_records(Path(out_dir) / "records" / "summarization_text.jsonl", pair.text)
        _write_records(Path(out_dir) / "records" / "summarization_img.jsonl", pair.img)

    def means(records: Sequence[EvalRecord]) -> dict[str, float]:
        return {key: 100 * sum(r.scores[key] for r in records) / len(records) for key in ROUGE_KEYS}

    methods = {
        "text-only": {"remaining": round(mean_m), "reduction": None, **means(pair.text)},
        "text-as-image": {"remaining": k, "reduction": format_reduction(mean_m, k), **means(pair.img)},
    }
    return SummarizationResult(profile.name, len(pair.text), mean_m, size, k, methods)


# -- fixture reports ---------------------------------------------------------------------------

def load_curve_fixture(name: str = "tolerance_curves.json") -> dict[str, Any]:
    return json.loads(resources.files("pixelprompt").joinpath(f"data/{name}").read_text("utf-8"))


def reports_from_fixture(fixture: Mapping[str, Any] | None = None, delta_pts: float = 3.0) -> dict[str, RunReport]:
    """Build one RunReport per model from stored per-seed tolerance curves."""
    fixture = fixture or load_curve_fixture()
    reports: dict[str, RunReport] = {}
    for row in fixture["rows"]:
        report = reports.setdefault(row["model"], RunReport(
            model=row["model"], provenance={"source": fixture.get("source", "fixture"),
                                            "created_at": fixture.get("created_at", "")}))
        size = parse_size(row["size"])
        curves = {int(s): ToleranceCurve.from_dict(c) for s, c in row["seed_curves"].items()}
        report.per_size[size] = summarize_size(size, int(row["k"]), curves, delta_pts)
    return reports


# -- emission ------------------------------------------------------------------------------------

CSV_COLUMNS = ("model", "width", "height", "k", "m_star", "m_star_per_seed", "footprint",
               "acc_img", "acc_text", "latency_img_s", "latency_text_s", "gaps")


def _fmt(value: float | None, digits: int) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def report_rows(report: RunReport) -> list[dict[str, str]]:
    rows = []
    for size, r in sorted(report.per_size.items()):
        per_seed = ";".join("" if v is None else str(v) for _, v in sorted(r.m_star_per_seed.items()))
        rows.append({
            "model": report.model,
            "width": str(size[0]),
            "height": str(size[1]),
            "k": str(r.k),
            "m_star": _fmt(r.m_star, 1),
            "m_star_per_seed": per_seed,
            "footprint": _fmt(r.footprint, 2),
            "acc_img": _fmt(r.acc_img, 1),
            "acc_text": _fmt(r.acc_text, 1),
            "latency_img_s": _fmt(r.latency_img.mean_s if r.latency_img else None, 2),
            "latency_text_s": _fmt(r.latency_text.mean_s if r.latency_text else None, 2),
            "gaps": str(len(r.gaps)),
        })
    return rows


def _csv(rows: Sequence[Mapping[str, str]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def summary_text(report: RunReport) -> str:
    if report.empty:
        return f"model: {report.model}\n0 runs: nothing to report\n"
    lines = [f"model: {report.model}", f"created: {report.provenance.get('created_at', '')}", ""]
    if report.per_size:
        lines.append(f"{'size':>10} {'k':>6} {'m*':>9} {'k/m*':>6} {'acc img':>8} {'acc text':>9}")
        for row in report_rows(report):
            lines.append(f"{row['width'] + 'x' + row['height']:>10} {row['k']:>6} {row['m_star'] or '-':>9} "
                         f"{row['footprint'] or '-':>6} {row['acc_img'] or '-':>8} {row['acc_text'] or '-':>9}")
    if report.summarization:
        s = report.summarization
        lines += ["", f"summarization: {s.n_docs} docs, mean m={s.m:.1f}, image {format_size(s.size)}, k={s.k}"]
        for method, v in s.methods.items():
            remaining = f"m={v['remaining']}" if v["reduction"] is None else f"{v['remaining']} ({v['reduction']})"
            scores = " ".join(f"{key}={v[key]:.2f}" for key in ROUGE_KEYS)
            lines.append(f"  {method:<14} {remaining:<14} {scores}")
    return "\n".join(lines) + "\n"


def plot_curve(result: SizeResult) -> str:
    """SVG of hybrid accuracy vs m, with a dashed marker at m = k and the tolerance region shaded."""
    import matplotlib
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure

    curve = result.curve
    with matplotlib.rc_context({"svg.hashsalt": "pixelprompt", "svg.fonttype": "none"}):
        fig = Figure(figsize=(5.0, 3.5))
        FigureCanvasSVG(fig)
        ax = fig.add_subplot()
        ms = [m for m, _ in curve.points]
        ax.plot(ms, [a for _, a in curve.points], marker="o", gid="series")
        ax.axvline(result.k, linestyle="--", color="grey", gid="marker-m-eq-k")
        ax.axhline(curve.baseline_accuracy_pct, linestyle=":", color="black", gid="baseline")
        if result.m_star is not None:
            ax.axvspan(min(ms[0], result.m_star), result.m_star, alpha=0.15, gid="tolerance-region")
        ax.set_xlabel("text tokens m")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 102)
        ax.set_title(f"{format_size(result.size)}  k={result.k}")
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def emit_report(report: RunReport, out_dir: str | Path,
                formats: Sequence[str] = ("json", "csv", "txt", "svg")) -> list[Path]:
    """Write the report's tables, summary and plots; returns the written paths.

    Raises:
        OSError: ``out_dir`` is not writable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def put(name: str, data: str) -> None:
        _atomic_write(out / name, data)
        written.append(out / name)

    if "json" in formats:
        put("report.json", report.to_json())
    if "csv" in formats:
        put("report.csv", _csv(report_rows(report), CSV_COLUMNS))
        if report.summarization:
            s = report.summarization
            rows = [{"model": s.model, "method": method, "remaining": str(v["remaining"]),
                     "reduction": v["reduction"] or "", **{key: f"{v[key]:.2f}" for key in ROUGE_KEYS}}
                    for method, v in s.methods.items()]
            put("summarization.csv", _csv(rows, ("model", "method", "remaining", "reduction", *ROUGE_KEYS)))
    if "txt" in formats:
        put("summary.txt", summary_text(report))
    if "svg" in formats:
        for size, result in sorted(report.per_size.items()):
            if result.curve is not None and result.curve.points:
                put(f"curve_{format_size(size)}.svg", plot_curve(result))
    return written


def load_report(path: str | Path) -> RunReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return RunReport.from_dict(json.loads(path.read_text(encoding="utf-8")))

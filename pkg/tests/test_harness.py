from __future__ import annotations

import json
import re
import warnings
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from pixelprompt.config import load_config, parse_override, sweep_config_from
from pixelprompt.corpus import SummDoc, gen_niah, load_summarization_corpus
from pixelprompt.errors import AllRenderFailed, ConfigError, UncalibratedSize
from pixelprompt.harness import (
    CSV_COLUMNS,
    RunReport,
    SweepConfig,
    SweepError,
    emit_report,
    load_records,
    load_report,
    report_rows,
    reports_from_fixture,
    run_paired_eval,
    run_summarization,
    run_tolerance_sweep,
    select_summary_size,
    summarize_size,
)
from pixelprompt.metrics import accuracy
from pixelprompt.modelgw import ChatResponse, MockConfig, MockEndpoint
from pixelprompt.render import RenderSpec
from pixelprompt.tokenomics import (
    ClosedForm,
    ModelProfile,
    ToleranceCurve,
    estimate_visual_tokens,
    format_reduction,
    reduction_pct,
)

SPEC = RenderSpec()
CLIFF = MockConfig(cliff={783: 1300}, p_floor=0.0)


def _sweep(gpt, **kw) -> SweepConfig:
    base = dict(profile=gpt, image_sizes=[(600, 800)], m_grid=[800, 1000, 1200, 1400, 1600],
                n_instances=3, timestamp="2025-01-01T00:00:00+00:00")
    base.update(kw)
    return SweepConfig(**base)


# -- config --------------------------------------------------------------------------------------

def test_sweep_config_validation(gpt):
    for bad in ({"m_grid": [1000, 800]}, {"m_grid": [800, 800]}, {"m_grid": []}, {"n_instances": 0},
                {"image_sizes": []}, {"seeds": []}, {"parallelism": 0}):
        with pytest.raises(ConfigError):
            _sweep(gpt, **bad)


def test_sweep_plan(gpt):
    plan = _sweep(gpt, seeds=[0, 1]).plan()
    assert plan["points"] == 10 and plan["calls"] == 60


def test_config_layer_precedence(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[sweep]\nn_instances = 20\nm_grid = [800, 1000]\n[model]\nprofile = "qwen"\n')
    cfg = load_config(path, ["sweep.n_instances=5"])
    assert cfg["sweep"]["n_instances"] == 5           # command line beats file
    assert cfg["sweep"]["m_grid"] == [800, 1000]      # file beats defaults
    assert cfg["sweep"]["delta_pts"] == 3.0           # defaults fill the rest
    assert cfg["model"]["profile"] == "qwen"
    sweep = sweep_config_from(cfg)
    assert sweep.profile.name == "qwen2.5-vl-72b" and sweep.n_instances == 5


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[sweep\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(None, ["nonsense.key=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["no-equals-sign"])
    with pytest.raises(ConfigError):
        sweep_config_from(load_config(None, ["sweep.colour=1"]))


def test_parse_override_types():
    assert parse_override("sweep.m_grid=[800,1000]") == (["sweep", "m_grid"], [800, 1000])
    assert parse_override("model.profile=qwen") == (["model", "profile"], "qwen")
    assert parse_override("render.dpi=144") == (["render", "dpi"], 144)


def test_custom_profile_from_config(tmp_path):
    path = tmp_path / "p.toml"
    path.write_text('[profiles.tiny]\ntokenizer_id = "cl100k_base"\ncalibration = {"600x800" = 500}\n'
                    '[model]\nprofile = "tiny"\n')
    assert sweep_config_from(load_config(path)).profile.name == "tiny"


# -- paired evaluation ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def paired_batch():
    from pixelprompt.tokenomics import get_profile

    gpt = get_profile("gpt")
    instances = [gen_niah(1000, gpt, s) for s in range(100)]
    endpoint = MockEndpoint(MockConfig(degradation=False), gpt)
    return instances, run_paired_eval(instances, endpoint, gpt, SPEC)


def test_paired_eval_cardinality_and_alignment(paired_batch):
    instances, pair = paired_batch
    assert len(pair.text) == len(pair.img) == 100
    assert [r.instance_id for r in pair.text] == [r.instance_id for r in pair.img] == \
        [i.instance_id for i in instances]
    assert accuracy(pair.text) == accuracy(pair.img) == 100.0


def test_paired_eval_budget_ratio(paired_batch):
    instances, pair = paired_batch
    mean_img = sum(r.budget.k for r in pair.img) / len(pair.img)
    mean_text = sum(r.budget.m for r in pair.text) / len(pair.text)
    assert mean_img / mean_text == pytest.approx(783 / 1000, rel=0.01)
    assert all(r.budget.k == 783 for r in pair.img)


class ListEndpoint:
    """Answers with a fixed value; used to test render-failure handling."""

    name = "fixed"
    max_retries = 0
    backoff_s = 0.0

    def chat(self, prompt, instance=None):
        return ChatResponse(getattr(instance, "reference", "0"))


def test_paired_eval_skips_unrenderable_in_both_modes():
    profile = ModelProfile("patch", "o200k_base", ClosedForm(14, 2))
    spec = RenderSpec(width_px=200, height_px=260, dpi=144, margin_px=6)
    fits = gen_niah(60, profile, 1)
    too_long = gen_niah(3000, profile, 2)
    pair = run_paired_eval([fits, too_long], ListEndpoint(), profile, spec)
    assert [r.instance_id for r in pair.text] == [r.instance_id for r in pair.img] == [fits.instance_id]
    assert pair.skipped[0][0] == too_long.instance_id
    with pytest.raises(AllRenderFailed):
        run_paired_eval([too_long], ListEndpoint(), profile, spec)
    with pytest.raises(ValueError):
        run_paired_eval([], ListEndpoint(), profile, spec)


# -- sweeps ----------------------------------------------------------------------------------------

def test_sweep_recovers_cliff(tmp_path, gpt):
    report = run_tolerance_sweep(_sweep(gpt), MockEndpoint(CLIFF, gpt), tmp_path)
    result = report.per_size[(600, 800)]
    assert result.k == estimate_visual_tokens(gpt, 600, 800)
    assert result.m_star == 1200
    assert result.footprint == pytest.approx(783 / 1200)
    assert result.acc_img == 100.0 and result.acc_text == 100.0
    assert [a for _, a in result.curve.points] == [100.0, 100.0, 100.0, 0.0, 0.0]
    assert result.latency_img.count == result.latency_text.count == 15
    for m in (800, 1600):
        recs = load_records(tmp_path / "records" / "600x800" / f"s0_m{m}_img.jsonl")
        assert len(recs) == 3
    assert (tmp_path / "instances" / "s0_m800.jsonl").exists()
    assert len(list((tmp_path / "pages" / "600x800").glob("*.png"))) == 15
    assert json.loads((tmp_path / "config.json").read_text())["created_at"] == "2025-01-01T00:00:00+00:00"


def test_sweep_single_point(tmp_path, gpt):
    cfg = _sweep(gpt, m_grid=[1000], n_instances=1, save_pages=False)
    report = run_tolerance_sweep(cfg, MockEndpoint(CLIFF, gpt), tmp_path)
    assert len(report.per_size[(600, 800)].curve.points) == 1
    assert report.stats == {"cached": 0, "total": 2}


def test_sweep_rejects_uncalibrated_size(tmp_path, gpt):
    with pytest.raises(UncalibratedSize):
        run_tolerance_sweep(_sweep(gpt, image_sizes=[(640, 480)]), MockEndpoint(CLIFF, gpt), tmp_path)


class FailingAbove:
    """Mock wrapper whose calls fail for contexts longer than ``limit`` tokens."""

    max_retries = 0
    backoff_s = 0.0

    def __init__(self, inner, limit):
        self.inner, self.limit, self.name = inner, limit, inner.name

    def chat(self, prompt, instance=None):
        from pixelprompt.errors import EndpointError

        if instance.actual_m > self.limit:
            raise EndpointError("gateway refused")
        return self.inner.chat(prompt, instance)


def test_sweep_failed_points_become_gaps(tmp_path, gpt):
    endpoint = FailingAbove(MockEndpoint(CLIFF, gpt), 1300)
    report = run_tolerance_sweep(_sweep(gpt, save_pages=False), endpoint, tmp_path)
    result = report.per_size[(600, 800)]
    assert [g["m"] for g in result.gaps] == [1400, 1600]
    assert [m for m, _ in result.curve.points] == [800, 1000, 1200]
    assert report_rows(report)[0]["gaps"] == "2"


def test_sweep_with_no_points_fails(tmp_path, gpt):
    endpoint = FailingAbove(MockEndpoint(CLIFF, gpt), 10)
    with pytest.raises(SweepError):
        run_tolerance_sweep(_sweep(gpt, save_pages=False), endpoint, tmp_path)


def test_sweep_baseline_sanity_warning(tmp_path, gpt):
    class WrongText:
        max_retries = 0
        backoff_s = 0.0
        name = "wrong-text"

        def chat(self, prompt, instance=None):
            value = instance.needle_value if prompt.mode.value == "hybrid" else "0"
            return ChatResponse(value)

    with pytest.warns(UserWarning, match="below"):
        run_tolerance_sweep(_sweep(gpt, m_grid=[800], n_instances=2, save_pages=False), WrongText(), tmp_path)


class Interrupting:
    """Delegates to a mock, then simulates a kill after ``budget`` fresh calls."""

    max_retries = 0
    backoff_s = 0.0

    def __init__(self, inner, budget):
        self.inner, self.budget, self.name = inner, budget, inner.name

    def chat(self, prompt, instance=None):
        if self.budget <= 0:
            raise KeyboardInterrupt
        self.budget -= 1
        return self.inner.chat(prompt, instance)


def test_sweep_resumes_to_identical_report(tmp_path, gpt):
    cfg = _sweep(gpt, save_pages=False)
    mock = MockEndpoint(CLIFF, gpt)
    with pytest.raises(KeyboardInterrupt):
        run_tolerance_sweep(cfg, Interrupting(mock, 13), tmp_path / "resumed")
    resumed = run_tolerance_sweep(cfg, mock, tmp_path / "resumed")
    assert resumed.stats["cached"] == 13 and resumed.stats["total"] == 30
    fresh = run_tolerance_sweep(cfg, mock, tmp_path / "fresh")
    assert fresh.stats["cached"] == 0
    assert (tmp_path / "resumed" / "report.json").read_bytes() == (tmp_path / "fresh" / "report.json").read_bytes()


def test_summarize_size_seed_average():
    curves = {
        0: ToleranceCurve(783, ((1000, 100), (1200, 100), (1400, 50)), 100),
        1: ToleranceCurve(783, ((1000, 100), (1200, 60), (1400, 50)), 100),
    }
    r = summarize_size((600, 800), 783, curves, 3.0)
    assert r.m_star_per_seed == {0: 1200, 1: 1000}
    assert r.m_star == 1100 and r.footprint == pytest.approx(783 / 1100)
    assert r.acc_img == 100.0  # averaged curve at 1000, the last grid point below 1100


# -- fixture reports -------------------------------------------------------------------------------

def test_fixture_footprints():
    reports = reports_from_fixture()
    got = [r.footprint for rep in reports.values() for _, r in sorted(rep.per_size.items())]
    for value, expected in zip(got, [0.61, 0.57, 0.53, 0.49, 0.44, 0.42]):
        assert value == pytest.approx(expected, abs=0.01)


def test_report_arithmetic_round_trip(tmp_path):
    for report in reports_from_fixture().values():
        for row, (size, result) in zip(report_rows(report), sorted(report.per_size.items())):
            assert row["footprint"] == f"{int(row['k']) / float(row['m_star']):.2f}"
            assert float(row["m_star"]) == pytest.approx(result.m_star, abs=0.05)


def test_reduction_column_arithmetic():
    for m, k in ((726, 279), (693, 225), (1000, 500), (463, 225)):
        assert format_reduction(m, k) == f"−{reduction_pct(m, k)}%"
        assert reduction_pct(m, k) == round(100 * (1 - k / m))


# -- emission ---------------------------------------------------------------------------------------

def test_emit_empty_report(tmp_path):
    written = emit_report(RunReport(model="gpt-4.1-mini"), tmp_path)
    assert "0 runs" in (tmp_path / "summary.txt").read_text()
    assert not list(tmp_path.glob("*.svg"))
    assert {p.name for p in written} == {"report.json", "report.csv", "summary.txt"}


def _svg_counts(path: Path) -> tuple[int, int]:
    root = ET.parse(path).getroot()
    ids = [el.get("id", "") for el in root.iter()]
    return sum(i == "series" for i in ids), sum(i == "marker-m-eq-k" for i in ids)


def test_emit_one_curve(tmp_path, gpt):
    report = run_tolerance_sweep(_sweep(gpt, save_pages=False), MockEndpoint(CLIFF, gpt), tmp_path / "run")
    emit_report(report, tmp_path / "out")
    svgs = list((tmp_path / "out").glob("*.svg"))
    assert [p.name for p in svgs] == ["curve_600x800.svg"]
    assert _svg_counts(svgs[0]) == (1, 1)
    header = (tmp_path / "out" / "report.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)
    assert load_report(tmp_path / "out").to_json() == report.to_json()


def test_emit_is_byte_identical(tmp_path):
    report = reports_from_fixture()["gpt-4.1-mini"]
    emit_report(report, tmp_path / "a")
    emit_report(load_report(tmp_path / "a"), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len([n for n in names if n.endswith(".svg")]) == 3
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_emit_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(RunReport(model="m"), blocker / "sub")


# -- summarization ---------------------------------------------------------------------------------

class EchoReference:
    name = "echo"
    max_retries = 0
    backoff_s = 0.0

    def chat(self, prompt, instance=None):
        return ChatResponse(instance.reference)


def test_self_summary_scores_one(news_corpus_path, gpt):
    docs = load_summarization_corpus(news_corpus_path, limit=5)
    result = run_summarization(docs, EchoReference(), gpt, SPEC, image_size=(600, 800))
    for method in ("text-only", "text-as-image"):
        for key in ("rouge1", "rouge2", "rougeL", "rougeLsum"):
            assert result.methods[method][key] == pytest.approx(100.0)


def test_mock_summary_rouge_ordering(tmp_path, news_corpus_path, gpt):
    docs = load_summarization_corpus(news_corpus_path)
    profile = ModelProfile("patch", "o200k_base", ClosedForm(32, 1, 1.62))
    result = run_summarization(docs, MockEndpoint(MockConfig(), profile), profile, SPEC, out_dir=tmp_path)
    assert result.n_docs == 50
    img = load_records(tmp_path / "records" / "summarization_img.jsonl")
    assert all(r.scores["rouge1"] > r.scores["rouge2"] for r in img)
    row = result.methods["text-as-image"]
    assert row["remaining"] == result.k
    assert row["reduction"] == format_reduction(result.m, result.k)
    assert result.methods["text-only"]["remaining"] == round(result.m)
    assert abs(result.k - result.m / 2) <= min(
        abs(estimate_visual_tokens(profile, w, w * 4 // 3) - result.m / 2) for w in range(240, 781, 24))


def test_select_summary_size(gpt):
    assert select_summary_size(gpt, 1566) == (600, 800)    # k=783 is exactly half
    assert select_summary_size(gpt, 2516) == (750, 1000)
    tie = ModelProfile("t", "o200k_base", ClosedForm(10))
    # 20x10 and 10x20 both give k=2: the smaller area wins, then the narrower width
    assert select_summary_size(tie, 4, [(20, 10), (10, 20), (40, 40)]) == (10, 20)
    with pytest.raises(UncalibratedSize):
        select_summary_size(gpt, 500, [(1, 1)])


def test_summary_text_lists_methods(news_corpus_path, gpt, tmp_path):
    docs = load_summarization_corpus(news_corpus_path, limit=3)
    report = RunReport(model=gpt.name, provenance={"created_at": "2025-01-01"})
    report.summarization = run_summarization(docs, EchoReference(), gpt, SPEC, image_size="600x800")
    emit_report(report, tmp_path)
    text = (tmp_path / "summary.txt").read_text()
    assert re.search(r"text-as-image\s+783 \(", text)
    assert (tmp_path / "summarization.csv").read_text().startswith("model,method,remaining,reduction")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert load_report(tmp_path / "report.json").summarization.k == 783

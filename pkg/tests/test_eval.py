import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from multiperso.backends import register_placeholders
from multiperso.errors import InvalidArgumentError
from multiperso.eval import (
    DEFAULT_SUITES,
    HistogramImageScorer,
    PromptSuite,
    ScoreReport,
    TaggedImage,
    TokenOverlapScorer,
    class_text,
    emit_grid,
    image_tokens,
    load_suites,
    make_scorers,
    sample_images,
    score,
)


@pytest.fixture
def personalized(toy_backend, registry):
    register_placeholders(toy_backend, registry)
    registry.subject(1).noun_phrase = "red circle"
    registry.subject(2).noun_phrase = "blue square"
    return toy_backend


def test_default_suites():
    suites = load_suites("all")
    assert [s.category for s in suites] == ["plain", "action", "interaction"]
    assert all(len(s.prompts) == 10 for s in suites)
    assert DEFAULT_SUITES["plain"].prompts[0] == "<asset0> in a nurse suit."
    prompts = [p for s in suites for p in s.prompts]
    assert len(prompts) == len(set(prompts))
    assert load_suites("action") == [DEFAULT_SUITES["action"]]
    with pytest.raises(InvalidArgumentError):
        load_suites("nope")


def test_suite_invariants(tmp_path):
    with pytest.raises(InvalidArgumentError):
        PromptSuite("interaction", ["<asset0> alone"])
    with pytest.raises(InvalidArgumentError):
        PromptSuite("plain", ["no placeholder"])
    with pytest.raises(InvalidArgumentError):
        PromptSuite("other", ["<asset0>"])
    path = tmp_path / "s.json"
    path.write_text('[{"category": "plain", "prompts": ["<a> x"]}, {"category": "action", "prompts": ["<a> x"]}]')
    with pytest.raises(InvalidArgumentError):
        load_suites(str(path))


def test_sample_images_counts_and_determinism(personalized):
    two = PromptSuite("plain", DEFAULT_SUITES["plain"].prompts[:2])
    assert sample_images(personalized, two, 0, seed=0) == []
    a = sample_images(personalized, two, 2, seed=0)
    b = sample_images(personalized, two, 2, seed=0)
    assert len(a) == 4
    assert [x.digest() for x in a] == [x.digest() for x in b]
    assert len({x.digest() for x in a}) == 4
    assert {x.category for x in a} == {"plain"} and a[0].prompt == two.prompts[0]
    c = sample_images(personalized, two, 2, seed=1)
    assert a[0].digest() != c[0].digest()


def test_sample_images_counting(personalized):
    suite = PromptSuite("plain", DEFAULT_SUITES["plain"].prompts)
    # 10 prompts x 4 samples; only count here (generation is the slow part)
    import multiperso.eval as ev

    calls = []
    orig = ev.generate
    ev.generate = lambda backend, texts, seed, g=1.0: calls.append(seed) or [np.zeros((64, 64, 3), np.float32)]
    try:
        images = sample_images(personalized, suite, 4, seed=0)
    finally:
        ev.generate = orig
    assert len(images) == 40 and len(set(calls)) == 40


def test_sample_images_unknown_placeholder(personalized):
    with pytest.raises(InvalidArgumentError):
        sample_images(personalized, PromptSuite("plain", ["<asset9> in a comic."]), 1)


def test_class_text(registry):
    registry.subject(1).noun_phrase = "red circle"
    assert class_text("<asset0> and <asset1>", registry) == "red circle and square"


def tagged(image, prompt="<asset0> in a comic.", category="plain"):
    return TaggedImage(image, prompt, category, 0, 0)


def test_histogram_self_similarity(registry):
    scorer = HistogramImageScorer()
    img = registry.reference_image
    assert scorer.similarity(img, img) == pytest.approx(1.0)
    assert scorer(tagged(img, "<asset0> and <asset1>.", "interaction"), registry) == pytest.approx(1.0)
    black = np.zeros_like(img)
    assert scorer(tagged(black), registry) == 0.0


@settings(max_examples=30, deadline=None)
@given(a=arrays(np.float32, (8, 8, 3), elements=st.floats(0, 1, width=32)),
       b=arrays(np.float32, (8, 8, 3), elements=st.floats(0, 1, width=32)))
def test_toy_scores_in_unit_interval(a, b):
    s = HistogramImageScorer(foreground_only=False).similarity(a, b)
    assert 0.0 <= s <= 1.0 + 1e-12
    toks = image_tokens(a)
    assert toks <= {"red", "green", "blue", "yellow", "magenta", "cyan"}


def test_token_overlap(registry):
    registry.subject(1).noun_phrase = "red circle"
    img = registry.reference_image  # red circle and blue square
    recall = TokenOverlapScorer("recall")
    jac = TokenOverlapScorer("jaccard", metric="ir")
    assert recall(tagged(img), registry) == 1.0
    assert jac(tagged(img), registry) == pytest.approx(0.5)
    assert recall(tagged(np.zeros_like(img)), registry) == 0.0
    with pytest.raises(InvalidArgumentError):
        TokenOverlapScorer("cosine")


def test_make_scorers():
    names = [s.metric for s in make_scorers("toy-clip-t,toy-clip-i,toy-ir")]
    assert names == ["clip_t", "clip_i", "ir"]
    with pytest.raises(InvalidArgumentError):
        make_scorers("toy-clip-t,toy-clip-t")
    with pytest.raises(InvalidArgumentError):
        make_scorers("bogus")


def test_score_report_aggregation_and_roundtrip(registry):
    registry.subject(1).noun_phrase = "red circle"
    suites = load_suites("all")
    img = registry.reference_image
    images = [
        tagged(img, suites[0].prompts[0], "plain"),
        tagged(np.zeros_like(img), suites[0].prompts[1], "plain"),
        tagged(img, suites[2].prompts[0], "interaction"),
    ]

    class Broken:
        name, metric = "broken", "ir"

        def __call__(self, item, reg):
            if item.category == "interaction":
                raise RuntimeError("scorer down")
            return 0.5

    report = score(images, suites, registry, [TokenOverlapScorer(), HistogramImageScorer(), Broken()])
    plain = report.summaries["plain"]
    assert plain["clip_t"].count == 2 and plain["clip_t"].mean == pytest.approx(0.5)
    assert plain["clip_t"].std == pytest.approx(0.5)
    assert plain["clip_t"].scorer == "toy-token-recall"
    inter = report.summaries["interaction"]
    assert inter["ir"].count == 0 and inter["ir"].errors == 1 and inter["ir"].mean is None
    assert report.summaries["action"]["clip_i"].count == 0
    assert ScoreReport.from_json(report.to_json()) == report
    assert ScoreReport.from_csv(report.to_csv()).summaries == report.summaries
    assert sum(1 for r in report.records if "error" in r) == 1


def test_score_empty_and_misrouted(registry):
    suites = load_suites("plain")
    report = score([], suites, registry, make_scorers("toy-clip-t"))
    assert report.summaries["plain"]["clip_t"].count == 0 and report.summaries["plain"]["clip_t"].mean is None
    with pytest.raises(InvalidArgumentError):
        score([tagged(registry.reference_image, "not in suite")], suites, registry, make_scorers("toy-clip-t"))


def test_emit_grid_geometry_and_bytes(tmp_path, registry, caplog):
    img = registry.reference_image
    one = emit_grid([tagged(img)], (1, 1), tmp_path / "one.png")
    w, h = Image.open(one).size
    assert w == 64 and h == 64 + 14
    six = [tagged(img, f"p{k // 3}") for k in range(6)]
    path = emit_grid(six, (2, 3), tmp_path / "six.png")
    assert Image.open(path).size == (3 * 64, 2 * (64 + 14))
    again = emit_grid(six, (2, 3), tmp_path / "again.png")
    assert path.read_bytes() == again.read_bytes()
    mixed = emit_grid([img, np.zeros((32, 32, 3))], (1, 2), tmp_path / "mixed.png")
    assert Image.open(mixed).size == (128, 78)
    assert "resizing" in caplog.text
    with pytest.raises(InvalidArgumentError):
        emit_grid([], (1, 1), tmp_path / "x.png")
    with pytest.raises(InvalidArgumentError):
        emit_grid(six, (1, 2), tmp_path / "x.png")

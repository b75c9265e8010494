from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from m3iqa.protocol import (LABEL_WORDS, Aspect, Conversation, LabelParseError, MosLabel, MosRecord,
                            mos_to_label, parse_label_word, read_conversations,
                            render_description_prompt, render_multiround, render_oneround,
                            write_conversations)

GOLDEN = Path(__file__).parent / "golden"
PROMPT = "a red bicycle leaning on a brick wall"
RESPONSE0 = "The bicycle is sharp and well lit, though the spokes blur slightly."
ASPECTS = [a.value for a in Aspect]


def full_record(prompt=PROMPT):
    return MosRecord("r1", prompt, {"quality": 3.5, "correspondence": 4.0, "authenticity": 2.25})


def test_aspect_parse():
    assert Aspect.parse("Quality") is Aspect.QUALITY
    with pytest.raises(ValueError, match="unknown aspect"):
        Aspect.parse("sharpness")


@pytest.mark.parametrize("y,idx", [(1.99, 1), (2.01, 2), (5.0, 4), (0.0, 0), (2.0, 2)])
def test_mos_to_label_examples(y, idx):
    lab = mos_to_label(y, (0, 5))
    assert lab.index == idx and lab.word == LABEL_WORDS[idx]


@pytest.mark.parametrize("edge", [1, 2, 3, 4])
def test_bucket_edges_left_closed(edge):
    assert mos_to_label(edge - 1e-9).index == edge - 1
    assert mos_to_label(edge).index == edge
    assert mos_to_label(edge + 1e-9).index == edge


def test_mos_to_label_out_of_range():
    with pytest.raises(ValueError):
        mos_to_label(5.0001)
    with pytest.raises(ValueError):
        mos_to_label(-0.1)


@given(st.floats(-100, 100), st.floats(0.1, 100))
@settings(max_examples=200, deadline=None)
def test_bucket_midpoints_roundtrip(lo, width):
    hi = lo + width
    for k in range(5):
        mid = lo + (k + 0.5) * (hi - lo) / 5
        assert mos_to_label(mid, (lo, hi)).index == k


def test_label_words_roundtrip():
    for i, w in enumerate(LABEL_WORDS):
        assert parse_label_word(w) == MosLabel(i, w)
    assert parse_label_word("Excellent").index == 4
    assert parse_label_word("fair ").index == 2
    with pytest.raises(LabelParseError) as exc:
        parse_label_word("okay")
    assert exc.value.text == "okay"


def test_mos_record_validation():
    with pytest.raises(ValueError, match="min"):
        MosRecord("x", "p", {"quality": 1.0}, (5, 0))
    with pytest.raises(ValueError, match="outside"):
        MosRecord("x", "p", {"quality": 6.0})


def test_description_golden():
    text = render_description_prompt(full_record())
    assert text == (GOLDEN / "description.txt").read_text(encoding="utf-8")
    assert "Analyze this image generated from the text prompt" in text
    assert "Scores are between 0 and 5" in text


def test_description_requires_all_aspects():
    with pytest.raises(ValueError, match="authenticity"):
        render_description_prompt(MosRecord("x", "p", {"quality": 1.0, "correspondence": 2.0}))


def test_description_empty_prompt():
    assert "text prompt: ''." in render_description_prompt(full_record(""))


def test_prompt_braces_are_not_reinterpreted():
    text = render_oneround("quality", "{mos_q} {max}")
    assert "'{mos_q} {max}'" in text


@pytest.mark.parametrize("aspect,anchor", [
    ("quality", "rate the image based on it's overall quality"),
    ("correspondence", "correspondence with the prompt"),
    ("authenticity", "rate the image based on its authenticity"),
])
def test_oneround_golden(aspect, anchor):
    text = render_oneround(aspect, PROMPT)
    assert text == (GOLDEN / f"oneround_{aspect}.txt").read_text(encoding="utf-8")
    assert anchor in text
    assert text.endswith("Please just output one word from the list.")


@pytest.mark.parametrize("aspect", ASPECTS)
def test_multiround_golden(aspect):
    conv = render_multiround(aspect, PROMPT, RESPONSE0, "good", sample_id=f"golden-{aspect}")
    assert conv.to_json() + "\n" == (GOLDEN / f"multiround_{aspect}.jsonl").read_text(encoding="utf-8")
    assert "Based on your analysis" in conv.turns[2][1]


def test_multiround_forms():
    c1 = render_multiround("quality", "a cat")
    assert len(c1.turns) == 1 and c1.turns[0][0] == "user"
    assert "provide a detailed analysis of its content and quality" in c1.turns[0][1]
    c3 = render_multiround("quality", "a cat", "analysis")
    assert [r for r, _ in c3.turns] == ["user", "assistant", "user"]
    assert "Choose one word from the following list" in c3.turns[-1][1]
    assert not c3.full_conv
    c4 = render_multiround("quality", "a cat", "analysis", "fair")
    assert len(c4.turns) == 4 and c4.turns[-1] == ("assistant", "fair") and c4.full_conv


def test_multiround_errors():
    with pytest.raises(LabelParseError):
        render_multiround("quality", "a cat", "analysis", "okay")
    with pytest.raises(ValueError):
        render_multiround("quality", "a cat", "", "fair")


def test_conversation_role_alternation():
    with pytest.raises(ValueError, match="turn 1"):
        Conversation([("user", "a"), ("user", "b")])


def test_conversation_jsonl_roundtrip(tmp_path):
    convs = [render_multiround(a, PROMPT, RESPONSE0, "poor", f"id{i}") for i, a in enumerate(ASPECTS)]
    path = tmp_path / "c.jsonl"
    write_conversations(path, convs)
    back = read_conversations(path)
    assert [c.to_json() for c in back] == [c.to_json() for c in convs]

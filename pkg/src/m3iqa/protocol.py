"""Prompt templates, the five-level MOS lexicon and conversation assembly."""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from importlib import resources

LABEL_WORDS = ("bad", "poor", "fair", "good", "excellent")
USER, ASSISTANT = "user", "assistant"


class Aspect(str, enum.Enum):
    QUALITY = "quality"
    CORRESPONDENCE = "correspondence"
    AUTHENTICITY = "authenticity"

    @classmethod
    def parse(cls, value) -> "Aspect":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown aspect {value!r}; expected one of "
                             f"{[a.value for a in cls]}") from None


class LabelParseError(ValueError):
    def __init__(self, text):
        super().__init__(f"not a quality label word: {text!r}")
        self.text = text


@dataclass(frozen=True)
class MosLabel:
    index: int
    word: str

    @classmethod
    def from_index(cls, index: int) -> "MosLabel":
        if not 0 <= index < len(LABEL_WORDS):
            raise ValueError(f"label index {index} outside 0..4")
        return cls(index, LABEL_WORDS[index])


@dataclass
class MosRecord:
    sample_id: str
    prompt: str
    mos: dict  # Aspect -> float
    mos_range: tuple = (0.0, 5.0)

    def __post_init__(self):
        lo, hi = self.mos_range
        if not lo < hi:
            raise ValueError(f"{self.sample_id}: MOS range min {lo} must be < max {hi}")
        self.mos = {Aspect.parse(k): float(v) for k, v in self.mos.items() if v is not None}
        for aspect, y in self.mos.items():
            if not lo <= y <= hi:
                raise ValueError(f"{self.sample_id}: {aspect.value} MOS {y} outside [{lo}, {hi}]")


def mos_to_label(y: float, mos_range=(0.0, 5.0)) -> MosLabel:
    """Five equal buckets, left-closed / right-open, with the top bucket closed."""
    lo, hi = mos_range
    if not lo <= y <= hi:
        raise ValueError(f"MOS {y} outside [{lo}, {hi}]")
    idx = min(int(math.floor(5.0 * (y - lo) / (hi - lo))), 4)
    return MosLabel.from_index(idx)


def parse_label_word(text: str) -> MosLabel:
    word = str(text).strip().lower()
    if word not in LABEL_WORDS:
        raise LabelParseError(text)
    return MosLabel.from_index(LABEL_WORDS.index(word))


# ---------------------------------------------------------------- templates

def load_template(name: str) -> str:
    return resources.files("m3iqa").joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")


_SLOT = re.compile(r"\{(prompt|mos_q|mos_a|mos_au|min|max)\}")


def _fill(template: str, values: dict) -> str:
    # only named slots are substituted; the JSON example keeps its braces
    return _SLOT.sub(lambda m: values[m.group(1)], template)


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def render_description_prompt(record: MosRecord) -> str:
    missing = [a.value for a in Aspect if a not in record.mos]
    if missing:
        raise ValueError(f"{record.sample_id}: description prompt needs MOS for {missing}")
    lo, hi = record.mos_range
    return _fill(load_template("description"), {
        "prompt": record.prompt,
        "mos_q": _num(record.mos[Aspect.QUALITY]),
        "mos_a": _num(record.mos[Aspect.CORRESPONDENCE]),
        "mos_au": _num(record.mos[Aspect.AUTHENTICITY]),
        "min": _num(lo), "max": _num(hi),
    })


def render_oneround(aspect, prompt: str) -> str:
    aspect = Aspect.parse(aspect)
    return _fill(load_template(f"oneround_{aspect.value}"), {"prompt": prompt})


@dataclass
class Conversation:
    turns: list  # [(role, text), ...]
    aspect: Aspect = Aspect.QUALITY
    sample_id: str = ""
    full_conv: bool = False

    def __post_init__(self):
        self.aspect = Aspect.parse(self.aspect)
        self.turns = [(r, t) for r, t in self.turns]
        for i, (role, _) in enumerate(self.turns):
            expected = USER if i % 2 == 0 else ASSISTANT
            if role != expected:
                raise ValueError(f"turn {i} has role {role!r}, expected {expected!r}")

    def to_json(self) -> str:
        return json.dumps({
            "id": self.sample_id, "aspect": self.aspect.value,
            "turns": [{"role": r, "text": t} for r, t in self.turns],
            "full_conv": self.full_conv,
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "Conversation":
        d = json.loads(line)
        return cls([(t["role"], t["text"]) for t in d["turns"]], d["aspect"], d["id"],
                   bool(d.get("full_conv", False)))


def render_multiround(aspect, prompt: str, response0: str = "", response1: str = "",
                      sample_id: str = "") -> Conversation:
    """Assemble the two-round conversation.

    Without ``response0`` only the analysis request is returned. With it, the
    result request follows (the "w/ ID" form). Supplying ``response1`` appends
    the final one-word answer and marks the conversation ``full_conv``.
    """
    aspect = Aspect.parse(aspect)
    turns = [(USER, _fill(load_template(f"multiround_{aspect.value}_analysis"), {"prompt": prompt}))]
    full = False
    if response1:
        if not response0:
            raise ValueError("response1 given without response0")
        response1 = parse_label_word(response1).word
    if response0:
        turns.append((ASSISTANT, response0))
        turns.append((USER, load_template(f"multiround_{aspect.value}_result")))
    if response1:
        turns.append((ASSISTANT, response1))
        full = True
    return Conversation(turns, aspect, sample_id, full)


def write_conversations(path, conversations) -> None:
    from ._io import atomic_write_text
    atomic_write_text(path, "".join(c.to_json() + "\n" for c in conversations))


def read_conversations(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [Conversation.from_json(line) for line in fh if line.strip()]

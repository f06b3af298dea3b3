"""Structured multi-view scene captions.

A caption decomposes an audio scene into up to six views, each introduced by
a dedicated special token: a mandatory global description plus optional
speaker style, transcript, sound effects, music, and acoustic environment
views.  This module parses, validates, serializes, classifies, and augments
such captions, and converts raw multi-expert annotation records into the
caption format.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable, Iterator, Optional


class CaptionError(ValueError):
    """Base class for caption parsing/validation failures."""


class MissingCaptionViewError(CaptionError):
    pass


class DuplicateViewError(CaptionError):
    def __init__(self, kind: "ViewKind"):
        super().__init__(f"duplicate view: {kind.name}")
        self.kind = kind


class EmptyViewTextError(CaptionError):
    def __init__(self, kind: "ViewKind"):
        super().__init__(f"empty text for view: {kind.name}")
        self.kind = kind


class UnknownTokenError(CaptionError):
    def __init__(self, literal: str):
        super().__init__(f"unknown view token: {literal!r}")
        self.literal = literal


class UnclassifiableError(CaptionError):
    pass


class ViewKind(Enum):
    """The six caption views; enum values are the literal special tokens.

    Declaration order is the canonical serialization order.
    """

    CAPTION = "<|caption|>"
    SPEECH = "<|speech|>"
    ASR = "<|asr|>"
    SFX = "<|sfx|>"
    MUSIC = "<|music|>"
    ENV = "<|env|>"

    @property
    def token(self) -> str:
        return self.value

    @property
    def record_key(self) -> str:
        # JSONL corpus key, e.g. "<|caption|>" -> "caption"
        return self.value[2:-2]


TOKEN_TO_KIND = {k.value: k for k in ViewKind}
CANONICAL_ORDER = tuple(ViewKind)
_CANONICAL_RANK = {k: i for i, k in enumerate(CANONICAL_ORDER)}

# Any <|...|> literal; used both to split captions and to reject stray tokens
# embedded in view texts.
_TOKEN_RE = re.compile(r"<\|[^|<>]*\|>")
_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Trim and collapse internal whitespace runs to single spaces."""
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class StructuredCaption:
    """An ordered sequence of (view kind, text) segments.

    Invariants, enforced at construction: exactly one CAPTION view, no
    duplicate kinds, every text non-empty after normalization, and no view
    token literal embedded in any text.
    """

    views: tuple[tuple[ViewKind, str], ...]

    def __post_init__(self):
        seen: set[ViewKind] = set()
        for kind, text in self.views:
            if kind in seen:
                raise DuplicateViewError(kind)
            seen.add(kind)
            if not text or not text.strip():
                raise EmptyViewTextError(kind)
            hit = _TOKEN_RE.search(text)
            if hit:
                raise UnknownTokenError(hit.group(0))
        if ViewKind.CAPTION not in seen:
            raise MissingCaptionViewError("caption view is required")

    @classmethod
    def from_views(cls, views: Iterable[tuple[ViewKind, str]]) -> "StructuredCaption":
        return cls(tuple((k, normalize_text(t)) for k, t in views))

    @property
    def kinds(self) -> set[ViewKind]:
        return {k for k, _ in self.views}

    def text(self, kind: ViewKind) -> Optional[str]:
        for k, t in self.views:
            if k is kind:
                return t
        return None

    @property
    def caption_text(self) -> str:
        text = self.text(ViewKind.CAPTION)
        assert text is not None
        return text

    def canonical(self) -> "StructuredCaption":
        """Same views reordered into canonical serialization order."""
        ordered = sorted(self.views, key=lambda kv: _CANONICAL_RANK[kv[0]])
        return StructuredCaption(tuple(ordered))

    def to_record(self) -> dict:
        """JSONL corpus record: {"caption": ..., "speech": ..., ...}."""
        return {kind.record_key: self.text(kind) for kind in ViewKind}

    @classmethod
    def from_record(cls, record: dict) -> "StructuredCaption":
        views = []
        for kind in ViewKind:
            value = record.get(kind.record_key)
            if value is None:
                continue
            if not isinstance(value, str):
                raise CaptionError(
                    f"field {kind.record_key!r} must be a string or null, got {type(value).__name__}"
                )
            views.append((kind, value))
        return cls.from_views(views)


class SceneCategory(str, Enum):
    """Scene composition code: presence of speech (S), music (M), sfx (A)."""

    SPEECH = "S00"
    MUSIC = "0M0"
    SFX = "00A"
    MUSIC_SFX = "0MA"
    SPEECH_SFX = "S0A"
    SPEECH_MUSIC = "SM0"
    SPEECH_MUSIC_SFX = "SMA"

    @property
    def code(self) -> str:
        return self.value


@dataclass(frozen=True)
class AugmentConfig:
    """View-dropout settings; the CAPTION view is never eligible."""

    drop_probability: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop_probability must be in [0,1], got {self.drop_probability}")


@dataclass(frozen=True)
class ExpertAnnotation:
    """Raw multi-expert annotation: six description perspectives plus a transcript."""

    long: Optional[str] = None
    short: Optional[str] = None
    speech: Optional[str] = None
    music: Optional[str] = None
    sound: Optional[str] = None
    environment: Optional[str] = None
    transcript: Optional[str] = None


def parse_caption(text: str) -> StructuredCaption:
    """Parse a serialized caption string into views, in textual order.

    Each segment's text is whitespace-normalized.  Unknown ``<|...|>``
    tokens are a hard error so corpus corruption surfaces immediately.
    """
    if not text or not text.strip():
        raise MissingCaptionViewError("empty caption text")
    matches = list(_TOKEN_RE.finditer(text))
    if not matches:
        raise MissingCaptionViewError("no view tokens found")
    if text[: matches[0].start()].strip():
        raise UnknownTokenError(text[: matches[0].start()].strip().split()[0])
    views = []
    for i, m in enumerate(matches):
        literal = m.group(0)
        kind = TOKEN_TO_KIND.get(literal)
        if kind is None:
            raise UnknownTokenError(literal)
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        segment = normalize_text(text[m.end() : end])
        if not segment:
            raise EmptyViewTextError(kind)
        views.append((kind, segment))
    return StructuredCaption(tuple(views))


def serialize_caption(caption: StructuredCaption) -> str:
    """Render ``<token> text`` segments joined by single spaces, canonical order."""
    parts = []
    for kind, text in caption.canonical().views:
        parts.append(kind.token)
        parts.append(text)
    return " ".join(parts)


def classify_category(caption: StructuredCaption) -> SceneCategory:
    """Derive the scene category from view presence.

    The S bit is set by either a SPEECH or an ASR view (a transcript implies
    spoken content even without a speaker-style description).  A caption with
    none of the speech/music/sfx views cannot be classified.
    """
    kinds = caption.kinds
    s = ViewKind.SPEECH in kinds or ViewKind.ASR in kinds
    m = ViewKind.MUSIC in kinds
    a = ViewKind.SFX in kinds
    if not (s or m or a):
        raise UnclassifiableError("no speech/music/sfx view present")
    code = ("S" if s else "0") + ("M" if m else "0") + ("A" if a else "0")
    return SceneCategory(code)


def unstructured_view(caption: StructuredCaption) -> str:
    """The global description text only, with all other views discarded."""
    return caption.caption_text


def augment_dropout(
    caption: StructuredCaption,
    cfg: AugmentConfig,
    rng=None,
) -> StructuredCaption:
    """Independently drop each non-CAPTION view with probability ``cfg.drop_probability``.

    Deterministic given the rng, which may be any source with a ``random()``
    method returning floats in [0,1) (stdlib Random or a numpy Generator);
    if none is supplied a ``random.Random`` is seeded from ``cfg.rng_seed``.
    """
    if rng is None:
        rng = random.Random(cfg.rng_seed)
    kept = []
    for kind, text in caption.views:
        if kind is ViewKind.CAPTION:
            kept.append((kind, text))
        elif rng.random() >= cfg.drop_probability:
            kept.append((kind, text))
    return StructuredCaption(tuple(kept))


_ANNOTATION_VIEW_MAP = (
    ("speech", ViewKind.SPEECH),
    ("transcript", ViewKind.ASR),
    ("sound", ViewKind.SFX),
    ("music", ViewKind.MUSIC),
    ("environment", ViewKind.ENV),
)


def from_annotation(annotation: ExpertAnnotation, prefer_long: bool = True) -> StructuredCaption:
    """Convert a multi-expert annotation record into a structured caption.

    The long/short scene descriptions become the CAPTION view (long wins when
    ``prefer_long`` and present); absent fields produce no view.
    """
    if prefer_long:
        caption_text = annotation.long or annotation.short
    else:
        caption_text = annotation.short or annotation.long
    if not caption_text:
        raise MissingCaptionViewError("annotation has neither long nor short description")
    views: list[tuple[ViewKind, str]] = [(ViewKind.CAPTION, caption_text)]
    for field, kind in _ANNOTATION_VIEW_MAP:
        value = getattr(annotation, field)
        if value:
            views.append((kind, value))
    return StructuredCaption.from_views(views).canonical()


def word_count(text: str) -> int:
    return len(text.split())


def word_count_stats(corpus: Iterable[StructuredCaption]) -> dict:
    """Average word counts per category plus an "overall" row.

    Structured counts concatenate every view text (special tokens excluded);
    unstructured counts use the CAPTION text only.  Captions without any
    speech/music/sfx view contribute to "overall" only.
    """
    sums: dict[str, list[float]] = {}
    empty = True
    for caption in corpus:
        empty = False
        structured = sum(word_count(t) for _, t in caption.views)
        unstructured = word_count(caption.caption_text)
        try:
            keys = [classify_category(caption).code, "overall"]
        except UnclassifiableError:
            keys = ["overall"]
        for key in keys:
            entry = sums.setdefault(key, [0.0, 0.0, 0.0])
            entry[0] += structured
            entry[1] += unstructured
            entry[2] += 1
    if empty:
        raise ValueError("corpus is empty")
    return {
        key: {
            "structured_avg_words": s / n,
            "unstructured_avg_words": u / n,
            "count": int(n),
        }
        for key, (s, u, n) in sorted(sums.items())
    }


def read_corpus(stream: IO[str]) -> Iterator[StructuredCaption]:
    """Read a JSONL caption corpus, validating any embedded category labels."""
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaptionError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            caption = StructuredCaption.from_record(record)
        except CaptionError as exc:
            raise CaptionError(f"line {lineno}: {exc}") from exc
        label = record.get("category")
        if label is not None:
            actual = classify_category(caption).code
            if label != actual:
                raise CaptionError(
                    f"line {lineno}: category label {label!r} disagrees with views ({actual})"
                )
        yield caption


def write_corpus(stream: IO[str], captions: Iterable[StructuredCaption], with_category: bool = False) -> int:
    n = 0
    for caption in captions:
        record = caption.to_record()
        if with_category:
            try:
                record["category"] = classify_category(caption).code
            except UnclassifiableError:
                record["category"] = None
        stream.write(json.dumps(record, ensure_ascii=False) + "\n")
        n += 1
    return n

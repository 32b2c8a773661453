"""Domain types for aspect-sentiment triplet extraction and the flat target codec.

Aspect positions are 1-based inclusive token indices into the instance text.
Generation targets are flat index sequences over a target space laid out as
[end-of-sequence, text positions 1..text_len, sentiment labels], so a text of
length L has a target space of size L + 4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum, unique


@unique
class Sentiment(IntEnum):
    """Polarity labels. Declaration order fixes their target-space slots."""

    POS = 0
    NEU = 1
    NEG = 2

    @classmethod
    def from_name(cls, name: str) -> "Sentiment":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown sentiment label {name!r}") from None


N_SENTIMENTS = len(Sentiment)

#: Target index reserved for the end-of-sequence symbol.
EOS_INDEX = 0

#: Hard cap on the number of aspect groups the count subtask distinguishes.
MAX_ASPECTS = 5

SPLIT_TAGS = ("train", "dev", "test")


@unique
class Task(Enum):
    """The three extraction tasks sharing one flat output formulation."""

    JMASA = "jmasa"  # joint span extraction + sentiment
    MASC = "masc"    # sentiment classification for given spans
    MATE = "mate"    # span extraction only

    @property
    def has_sentiment(self) -> bool:
        return self is not Task.MATE

    @property
    def group_size(self) -> int:
        """Number of flat target symbols per aspect item."""
        return 3 if self.has_sentiment else 2


class TargetParseError(ValueError):
    """A flat target sequence cannot be parsed; carries the offending position."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at sequence position {position})")
        self.position = position


@dataclass(frozen=True, order=True)
class AspectSpan:
    """1-based inclusive token span of one aspect term."""

    begin: int
    end: int

    def __post_init__(self) -> None:
        if self.begin < 1:
            raise ValueError(f"span begin must be >= 1, got {self.begin}")
        if self.end < self.begin:
            raise ValueError(f"span end {self.end} precedes begin {self.begin}")

    @property
    def width(self) -> int:
        return self.end - self.begin + 1

    def overlaps(self, other: "AspectSpan") -> bool:
        return self.begin <= other.end and other.begin <= self.end


@dataclass
class Instance:
    """One labeled text(/image) sample.

    ``image_feature`` is a raw feature vector (or None when the sample has no
    image); ``caption_tokens`` is the tokenized image description (or None).
    Both are optional because ablations and image-less data drop them.
    """

    id: str
    text_tokens: list[str]
    aspects: list[AspectSpan]
    sentiments: list[Sentiment]
    image_feature: list[float] | None = None
    caption_tokens: list[str] | None = None
    split_tag: str = "train"

    @property
    def text_len(self) -> int:
        return len(self.text_tokens)

    @property
    def n_aspects(self) -> int:
        return len(self.aspects)

    def aspect_terms(self) -> list[list[str]]:
        """Surface tokens of each aspect span."""
        return [self.text_tokens[s.begin - 1 : s.end] for s in self.aspects]

    def validate(self) -> "Instance":
        """Check all labeling invariants; raise ValueError naming this instance."""
        def fail(msg: str) -> None:
            raise ValueError(f"instance {self.id!r}: {msg}")

        if self.split_tag not in SPLIT_TAGS:
            fail(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        if not self.text_tokens:
            fail("text is empty")
        if not self.aspects:
            fail("labeled instance has no aspects")
        if len(self.aspects) != len(self.sentiments):
            fail(
                f"{len(self.aspects)} aspects but {len(self.sentiments)} sentiments"
            )
        prev: AspectSpan | None = None
        for span in self.aspects:
            if span.end > self.text_len:
                fail(f"span {span} exceeds text length {self.text_len}")
            if prev is not None:
                if span.begin < prev.begin:
                    fail(f"spans not sorted by begin index: {prev} before {span}")
                if span.overlaps(prev):
                    fail(f"spans overlap: {prev} and {span}")
            prev = span
        return self

    def triplets(self, task: Task) -> "TripletSequence":
        """Gold output items for the given task."""
        if task.has_sentiment:
            items = tuple(
                (s.begin, s.end, senti)
                for s, senti in zip(self.aspects, self.sentiments)
            )
        else:
            items = tuple((s.begin, s.end) for s in self.aspects)
        return TripletSequence(task=task, items=items)


@dataclass(frozen=True)
class TripletSequence:
    """Ordered aspect items plus the task that fixes their arity.

    Items are ``(begin, end, sentiment)`` tuples for sentiment-bearing tasks
    and ``(begin, end)`` for span-only extraction.
    """

    task: Task
    items: tuple[tuple, ...] = field(default=())

    def __post_init__(self) -> None:
        for item in self.items:
            if len(item) != self.task.group_size:
                raise ValueError(
                    f"{self.task.value} items need arity {self.task.group_size}, "
                    f"got {item!r}"
                )
            begin, end = item[0], item[1]
            AspectSpan(begin, end)  # validates ordering / positivity
            if self.task.has_sentiment and not isinstance(item[2], Sentiment):
                raise ValueError(f"item {item!r} carries no Sentiment label")

    def __len__(self) -> int:
        return len(self.items)

    def spans(self) -> list[AspectSpan]:
        return [AspectSpan(item[0], item[1]) for item in self.items]

    def sentiments(self) -> list[Sentiment]:
        if not self.task.has_sentiment:
            raise ValueError(f"{self.task.value} items carry no sentiment")
        return [item[2] for item in self.items]


# ---------------------------------------------------------------------------
# Target-space symbols and the flat codec
# ---------------------------------------------------------------------------


@unique
class SymbolKind(Enum):
    EOS = "eos"
    POINTER = "pointer"
    SENTIMENT = "sentiment"


@dataclass(frozen=True)
class TargetSymbol:
    """One slot of the generation target space for a text of a given length."""

    kind: SymbolKind
    pointer: int | None = None
    sentiment: Sentiment | None = None

    def __post_init__(self) -> None:
        if self.kind is SymbolKind.POINTER and (self.pointer is None or self.pointer < 1):
            raise ValueError(f"pointer symbol needs a position >= 1, got {self.pointer}")
        if self.kind is SymbolKind.SENTIMENT and self.sentiment is None:
            raise ValueError("sentiment symbol needs a label")

    def index(self, text_len: int) -> int:
        """Map this symbol into the target space of a text of length ``text_len``."""
        if self.kind is SymbolKind.EOS:
            return EOS_INDEX
        if self.kind is SymbolKind.POINTER:
            if self.pointer > text_len:
                raise ValueError(
                    f"pointer {self.pointer} out of range for text length {text_len}"
                )
            return self.pointer
        return text_len + 1 + int(self.sentiment)

    @classmethod
    def from_index(cls, index: int, text_len: int) -> "TargetSymbol":
        if index == EOS_INDEX:
            return cls(SymbolKind.EOS)
        if 1 <= index <= text_len:
            return cls(SymbolKind.POINTER, pointer=index)
        if text_len < index <= text_len + N_SENTIMENTS:
            return cls(SymbolKind.SENTIMENT, sentiment=Sentiment(index - text_len - 1))
        raise ValueError(
            f"index {index} outside target space of size {target_space_size(text_len)}"
        )


def target_space_size(text_len: int) -> int:
    """EOS slot + one pointer per text position + one slot per sentiment."""
    return text_len + 1 + N_SENTIMENTS


def sentiment_index(sentiment: Sentiment, text_len: int) -> int:
    return text_len + 1 + int(sentiment)


def encode_targets(triplets: TripletSequence, text_len: int) -> list[int]:
    """Flatten aspect items into target-space indices, terminated by EOS.

    Raises ValueError when a span does not fit into a text of ``text_len``
    tokens. An empty item list encodes to the bare EOS symbol.
    """
    out: list[int] = []
    for item in triplets.items:
        begin, end = item[0], item[1]
        if end > text_len:
            raise ValueError(
                f"span ({begin}, {end}) out of range for text length {text_len}"
            )
        out.append(begin)
        out.append(end)
        if triplets.task.has_sentiment:
            out.append(sentiment_index(item[2], text_len))
    out.append(EOS_INDEX)
    return out


def decode_targets(indices: list[int], text_len: int, task: Task) -> TripletSequence:
    """Exact inverse of :func:`encode_targets`.

    Raises :class:`TargetParseError` on wrong arity, a pointer/sentiment symbol
    in the wrong slot, an inverted span, a missing terminator, or trailing
    symbols after EOS.
    """
    size = target_space_size(text_len)

    def read_pointer(pos: int, role: str) -> int:
        if pos >= len(indices):
            raise TargetParseError("sequence ends before terminator", pos)
        idx = indices[pos]
        if idx == EOS_INDEX:
            raise TargetParseError(f"terminator in {role} slot of an open group", pos)
        if not 1 <= idx <= text_len:
            if idx >= size or idx < 0:
                raise TargetParseError(f"index {idx} outside target space", pos)
            raise TargetParseError(f"sentiment symbol {idx} in {role} slot", pos)
        return idx

    items: list[tuple] = []
    pos = 0
    while True:
        if pos >= len(indices):
            raise TargetParseError("sequence ends before terminator", pos)
        if indices[pos] == EOS_INDEX:
            pos += 1
            break
        begin = read_pointer(pos, "begin")
        end = read_pointer(pos + 1, "end")
        if begin > end:
            raise TargetParseError(f"begin {begin} exceeds end {end}", pos)
        pos += 2
        if task.has_sentiment:
            if pos >= len(indices):
                raise TargetParseError("sequence ends before terminator", pos)
            idx = indices[pos]
            if not text_len < idx <= text_len + N_SENTIMENTS:
                raise TargetParseError(
                    f"index {idx} is not a sentiment symbol", pos
                )
            items.append((begin, end, Sentiment(idx - text_len - 1)))
            pos += 1
        else:
            items.append((begin, end))
    if pos != len(indices):
        raise TargetParseError("trailing symbols after terminator", pos)
    return TripletSequence(task=task, items=tuple(items))

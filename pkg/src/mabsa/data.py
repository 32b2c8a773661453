"""Dataset I/O, sentiment-combination strata, seeded few-shot splits, and the
synthetic labeled corpus with pluggable image-feature and caption providers.

On-disk format is JSONL, one instance per line:

    {"id": "...", "tokens": [...],
     "aspects": [{"begin": 1, "end": 2, "sentiment": "POS"}, ...],
     "image_feature": [...],        # optional, d_v floats
     "caption_tokens": [...],       # optional
     "split": "train"}              # optional, defaults to "train"
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core_types import AspectSpan, Instance, Sentiment, TripletSequence, Task


class DataFormatError(ValueError):
    """A serialized line is not valid JSON or misses required fields."""


class DataValidationError(ValueError):
    """A deserialized instance violates a labeling invariant."""


class QuotaError(ValueError):
    """A stratum population is too small for its few-shot quota."""


class CorpusConfigError(ValueError):
    """A synthetic-corpus configuration is unsatisfiable."""


Signature = frozenset  # frozenset[Sentiment]

#: All 7 non-empty sentiment combinations, in the quota-table column order.
ALL_SIGNATURES: tuple[Signature, ...] = (
    frozenset({Sentiment.POS}),
    frozenset({Sentiment.NEU}),
    frozenset({Sentiment.NEG}),
    frozenset({Sentiment.POS, Sentiment.NEU}),
    frozenset({Sentiment.NEG, Sentiment.NEU}),
    frozenset({Sentiment.POS, Sentiment.NEG}),
    frozenset({Sentiment.POS, Sentiment.NEU, Sentiment.NEG}),
)


def signature_of(instance: Instance) -> Signature:
    """Set of distinct sentiment labels present in one instance."""
    if not instance.sentiments:
        raise ValueError(f"instance {instance.id!r} has no sentiments")
    return frozenset(instance.sentiments)


def signature_name(sig: Signature) -> str:
    """Stable display/config name, e.g. ``POS+NEU``."""
    return "+".join(s.name for s in sorted(sig))


def parse_signature(name: str) -> Signature:
    parts = [p for p in name.replace(",", "+").split("+") if p]
    if not parts:
        raise ValueError("empty stratum signature")
    return frozenset(Sentiment.from_name(p) for p in parts)


@dataclass(frozen=True)
class FewShotQuota:
    """Per-stratum draw counts plus the sampling seed."""

    counts: Mapping[Signature, int]
    seed: int = 42

    def __post_init__(self) -> None:
        for sig, k in self.counts.items():
            if sig not in ALL_SIGNATURES:
                raise ValueError(f"unknown stratum {sig!r}")
            if k < 0:
                raise ValueError(f"negative quota {k} for {signature_name(sig)}")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def with_seed(self, seed: int) -> "FewShotQuota":
        return FewShotQuota(counts=self.counts, seed=seed)


def twitter15_quota(seed: int = 42) -> FewShotQuota:
    """138-instance quota following the Twitter-15 few-shot distribution."""
    return FewShotQuota(counts=dict(zip(ALL_SIGNATURES, (32, 64, 16, 16, 8, 2, 0))), seed=seed)


def twitter17_quota(seed: int = 42) -> FewShotQuota:
    """132-instance quota following the Twitter-17 few-shot distribution."""
    return FewShotQuota(counts=dict(zip(ALL_SIGNATURES, (32, 32, 16, 32, 16, 2, 2))), seed=seed)


NAMED_QUOTAS = {"twitter15": twitter15_quota, "twitter17": twitter17_quota}


# ---------------------------------------------------------------------------
# JSONL loading / saving
# ---------------------------------------------------------------------------


def _instance_from_obj(obj: dict, line_no: int) -> Instance:
    try:
        aspects = [AspectSpan(a["begin"], a["end"]) for a in obj["aspects"]]
        sentiments = [Sentiment.from_name(a["sentiment"]) for a in obj["aspects"]]
        inst = Instance(
            id=str(obj["id"]),
            text_tokens=[str(t) for t in obj["tokens"]],
            aspects=aspects,
            sentiments=sentiments,
            image_feature=(
                [float(x) for x in obj["image_feature"]]
                if obj.get("image_feature") is not None
                else None
            ),
            caption_tokens=(
                [str(t) for t in obj["caption_tokens"]]
                if obj.get("caption_tokens") is not None
                else None
            ),
            split_tag=obj.get("split", "train"),
        )
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"line {line_no}: missing or malformed field ({exc})") from exc
    except ValueError as exc:
        raise DataValidationError(f"line {line_no}: {exc}") from exc
    try:
        inst.validate()
    except ValueError as exc:
        raise DataValidationError(str(exc)) from exc
    return inst


def load_jsonl(path: str | Path) -> list[Instance]:
    """Load and validate instances; errors name the offending line or instance."""
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            instances.append(_instance_from_obj(obj, line_no))
    return instances


def instance_to_obj(inst: Instance) -> dict:
    obj: dict = {
        "id": inst.id,
        "tokens": list(inst.text_tokens),
        "aspects": [
            {"begin": s.begin, "end": s.end, "sentiment": senti.name}
            for s, senti in zip(inst.aspects, inst.sentiments)
        ],
        "split": inst.split_tag,
    }
    if inst.image_feature is not None:
        obj["image_feature"] = list(inst.image_feature)
    if inst.caption_tokens is not None:
        obj["caption_tokens"] = list(inst.caption_tokens)
    return obj


def save_jsonl(path: str | Path, instances: Iterable[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_obj(inst)) + "\n")


# ---------------------------------------------------------------------------
# Stratified few-shot sampling
# ---------------------------------------------------------------------------


def stratum_histogram(instances: Sequence[Instance]) -> dict[Signature, int]:
    hist = {sig: 0 for sig in ALL_SIGNATURES}
    for inst in instances:
        hist[signature_of(inst)] += 1
    return hist


def sample_fewshot(
    instances: Sequence[Instance], quota: FewShotQuota
) -> tuple[list[Instance], list[Instance]]:
    """Draw exactly ``quota.counts[sig]`` instances per stratum, uniformly
    without replacement, deterministically for a given seed.

    Returns ``(selected, leftover)``; leftover keeps the input order so a
    second draw (e.g. the dev split) can be taken from it.
    """
    pools: dict[Signature, list[int]] = {sig: [] for sig in ALL_SIGNATURES}
    for i, inst in enumerate(instances):
        pools[signature_of(inst)].append(i)

    rng = random.Random(quota.seed)
    chosen: set[int] = set()
    ordered: list[int] = []
    for sig in ALL_SIGNATURES:
        want = quota.counts.get(sig, 0)
        pool = pools[sig]
        if want > len(pool):
            raise QuotaError(
                f"stratum {signature_name(sig)}: population {len(pool)} < quota {want}"
            )
        picked = rng.sample(pool, want)
        chosen.update(picked)
        ordered.extend(picked)

    selected = [instances[i] for i in ordered]
    leftover = [inst for i, inst in enumerate(instances) if i not in chosen]
    return selected, leftover


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _default_cue_lexicon() -> dict[Sentiment, tuple[str, ...]]:
    return {
        Sentiment.POS: tuple(f"good{i}" for i in range(8)),
        Sentiment.NEU: tuple(f"meh{i}" for i in range(8)),
        Sentiment.NEG: tuple(f"bad{i}" for i in range(8)),
    }


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    """Generator knobs for the desk-scale labeled corpus.

    Every instance embeds 1..max_aspects aspect terms, each a short run of
    dedicated aspect-pool tokens immediately followed by a sentiment-cue token
    from the matching lexicon. The image feature is a deterministic function
    of the instance's sentiment multiset plus seeded noise, and the caption
    names the aspect tokens, so image and caption carry usable signal.
    """

    n_instances: int = 500
    vocab_size: int = 120
    max_aspects: int = 3
    text_len_range: tuple[int, int] = (10, 24)
    d_v: int = 128
    cue_lexicon: Mapping[Sentiment, tuple[str, ...]] = field(
        default_factory=_default_cue_lexicon
    )
    seed: int = 0
    max_caption_len: int = 8
    # probability that all aspects of an instance share one sentiment
    uniform_sentiment_prob: float = 0.2
    feature_noise: float = 0.1

    def __post_init__(self) -> None:
        if self.n_instances < 1:
            raise CorpusConfigError("n_instances must be >= 1")
        if not 1 <= self.max_aspects <= 5:
            raise CorpusConfigError("max_aspects must be in [1, 5]")
        lo, hi = self.text_len_range
        if lo > hi or lo < 1:
            raise CorpusConfigError(f"bad text_len_range {self.text_len_range}")
        if lo <= 3 * self.max_aspects:
            raise CorpusConfigError(
                f"text_len_range minimum {lo} cannot fit {self.max_aspects} aspects"
            )
        seen: set[str] = set()
        for senti in Sentiment:
            cues = self.cue_lexicon.get(senti, ())
            if not cues:
                raise CorpusConfigError(f"empty cue lexicon for {senti.name}")
            for cue in cues:
                if cue in seen:
                    raise CorpusConfigError(f"cue token {cue!r} appears in two lexicons")
                seen.add(cue)
        if self.vocab_size < self.n_cue_tokens + 2 * self.max_aspects + 1:
            raise CorpusConfigError(
                f"vocab_size {self.vocab_size} too small for disjoint lexicons "
                f"plus aspect and filler pools"
            )

    @property
    def n_cue_tokens(self) -> int:
        return sum(len(v) for v in self.cue_lexicon.values())

    @property
    def aspect_pool(self) -> tuple[str, ...]:
        n = max(2 * self.max_aspects, (self.vocab_size - self.n_cue_tokens) // 3)
        return tuple(f"thing{i}" for i in range(n))

    @property
    def filler_pool(self) -> tuple[str, ...]:
        n = self.vocab_size - self.n_cue_tokens - len(self.aspect_pool)
        return tuple(f"w{i}" for i in range(n))

    def all_tokens(self) -> list[str]:
        tokens = list(self.aspect_pool) + list(self.filler_pool)
        for senti in Sentiment:
            tokens.extend(self.cue_lexicon[senti])
        return tokens


def _sentiment_directions(cfg: SyntheticCorpusConfig, rng: random.Random) -> dict:
    return {
        senti: [rng.choice((-1.0, 1.0)) for _ in range(cfg.d_v)] for senti in Sentiment
    }


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig) -> list[Instance]:
    """Deterministically generate a labeled corpus satisfying all invariants."""
    rng = random.Random(cfg.seed)
    directions = _sentiment_directions(cfg, rng)
    sentiments_all = list(Sentiment)
    instances: list[Instance] = []
    for i in range(cfg.n_instances):
        n_asp = rng.randint(1, cfg.max_aspects)
        if rng.random() < cfg.uniform_sentiment_prob:
            shared = rng.choice(sentiments_all)
            labels = [shared] * n_asp
        else:
            labels = [rng.choice(sentiments_all) for _ in range(n_asp)]

        widths = [rng.randint(1, 2) for _ in range(n_asp)]
        term_tokens = rng.sample(cfg.aspect_pool, sum(widths))
        terms: list[list[str]] = []
        cursor = 0
        for w in widths:
            terms.append(term_tokens[cursor : cursor + w])
            cursor += w

        length = rng.randint(*cfg.text_len_range)
        used = sum(widths) + n_asp
        n_fill = max(length - used, 1)
        units: list[tuple[int, list[str]]] = [
            (k, terms[k] + [rng.choice(cfg.cue_lexicon[labels[k]])])
            for k in range(n_asp)
        ]
        units += [(-1, [rng.choice(cfg.filler_pool)]) for _ in range(n_fill)]
        rng.shuffle(units)

        tokens: list[str] = []
        spans: list[tuple[AspectSpan, int]] = []
        for k, unit in units:
            start = len(tokens) + 1
            tokens.extend(unit)
            if k >= 0:
                spans.append((AspectSpan(start, start + len(unit) - 2), k))
        spans.sort(key=lambda pair: pair[0].begin)

        caption: list[str] = []
        for span, _ in spans:
            caption.extend(tokens[span.begin - 1 : span.end])
        caption = caption[: cfg.max_caption_len]

        feature = [
            sum(directions[s][j] for s in labels) + rng.gauss(0.0, cfg.feature_noise)
            for j in range(cfg.d_v)
        ]

        instances.append(
            Instance(
                id=f"syn-{cfg.seed}-{i:05d}",
                text_tokens=tokens,
                aspects=[span for span, _ in spans],
                sentiments=[labels[k] for _, k in spans],
                image_feature=feature,
                caption_tokens=caption,
                split_tag="train",
            ).validate()
        )
    return instances


@dataclass(frozen=True)
class CueOracle:
    """Rule-based solver for the synthetic task.

    Knows the generator's token pools, scans for maximal runs of aspect-pool
    tokens, and reads each aspect's sentiment from the cue token that follows
    the run. Bounds what a trained model can achieve on the synthetic corpus.
    """

    aspect_tokens: frozenset
    cue_to_sentiment: Mapping[str, Sentiment]

    @classmethod
    def for_config(cls, cfg: SyntheticCorpusConfig) -> "CueOracle":
        cue_map = {
            cue: senti for senti in Sentiment for cue in cfg.cue_lexicon[senti]
        }
        return cls(aspect_tokens=frozenset(cfg.aspect_pool), cue_to_sentiment=cue_map)

    def predict(self, instance: Instance, task: Task = Task.JMASA) -> TripletSequence:
        tokens = instance.text_tokens
        items: list[tuple] = []
        i = 0
        while i < len(tokens):
            if tokens[i] not in self.aspect_tokens:
                i += 1
                continue
            start = i
            while i < len(tokens) and tokens[i] in self.aspect_tokens:
                i += 1
            cue = tokens[i] if i < len(tokens) else None
            senti = self.cue_to_sentiment.get(cue) if cue is not None else None
            if senti is None:
                continue  # aspect-ish run without a readable cue: not an aspect
            if task.has_sentiment:
                items.append((start + 1, i, senti))
            else:
                items.append((start + 1, i))
        return TripletSequence(task=task, items=tuple(items))


class FeatureDimensionError(ValueError):
    """A stored image feature does not match the configured dimension."""


def provide_image_feature(instance: Instance, d_v: int) -> list[float]:
    """Stored feature when present (checked against d_v), else a zero vector."""
    if instance.image_feature is None:
        return [0.0] * d_v
    if len(instance.image_feature) != d_v:
        raise FeatureDimensionError(
            f"instance {instance.id!r}: stored feature has dimension "
            f"{len(instance.image_feature)}, expected {d_v}"
        )
    return list(instance.image_feature)

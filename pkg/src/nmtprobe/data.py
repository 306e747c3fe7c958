"""Corpus loading, vocabularies, tag schemas, and synthetic dataset generators.

File formats (documented bit-exactly, see README):
  * parallel corpus: two UTF-8 text files, one sentence per line,
    space-separated tokens, line-aligned
  * tagged corpus: UTF-8, one ``token<TAB>tag`` per line, a blank line
    between sentences
  * tag schema: JSON with "fine" (list), "coarse" (list) and "map"
    (fine -> coarse, total)
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ["<pad>", "<unk>", "<s>", "</s>"]


class CorpusError(ValueError):
    """Raised for malformed corpus or schema files."""


@dataclass
class ParallelCorpus:
    pairs: list  # (source tokens, target tokens) tuples
    split: str = "train"
    dropped: int = 0  # pairs removed by the length/emptiness filter

    def __post_init__(self):
        for src, tgt in self.pairs:
            if not src or not tgt:
                raise CorpusError("empty sentence in parallel corpus")

    def __len__(self):
        return len(self.pairs)


@dataclass
class TaggedCorpus:
    sentences: list  # (tokens, tags) tuples of equal length
    kind: str = "pos"  # pos | sem
    split: str = "train"

    def __post_init__(self):
        for tokens, tags in self.sentences:
            if len(tokens) != len(tags):
                raise CorpusError("token/tag length mismatch")
            if not tokens:
                raise CorpusError("empty tagged sentence")

    def __len__(self):
        return len(self.sentences)

    def token_count(self) -> int:
        return sum(len(tokens) for tokens, _ in self.sentences)


class Vocab:
    """Bidirectional token<->id map with reserved pad/unk/bos/eos ids."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens) -> list:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list:
        return [self.id_to_token[i] for i in ids]


@dataclass
class TagSchema:
    fine: list
    coarse: list
    fine_to_coarse: dict

    def __post_init__(self):
        missing = [t for t in self.fine if t not in self.fine_to_coarse]
        if missing:
            raise CorpusError(f"fine tags without a coarse mapping: {missing}")
        bad = sorted(set(self.fine_to_coarse.values()) - set(self.coarse))
        if bad:
            raise CorpusError(f"mapped coarse tags missing from inventory: {bad}")

    def collapse(self, fine_tag: str) -> str:
        try:
            return self.fine_to_coarse[fine_tag]
        except KeyError:
            raise CorpusError(f"tag {fine_tag!r} not in schema") from None

    @classmethod
    def load(cls, path) -> "TagSchema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(fine=list(raw["fine"]), coarse=list(raw["coarse"]),
                   fine_to_coarse=dict(raw["map"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"fine": self.fine, "coarse": self.coarse,
                       "map": self.fine_to_coarse}, fh, indent=1, sort_keys=True)


def identity_schema(tags) -> TagSchema:
    """Schema whose coarse level equals the fine level (used for POS-style tasks)."""
    tags = list(tags)
    return TagSchema(fine=tags, coarse=tags, fine_to_coarse={t: t for t in tags})


# --------------------------------------------------------------------------
# loaders
# --------------------------------------------------------------------------

def load_parallel(src_path, tgt_path, max_len: int = 50, split: str = "train") -> ParallelCorpus:
    """Load line-aligned source/target files, dropping over-long or empty pairs.

    The number of dropped pairs is reported on the corpus (``dropped``).
    Mismatched line counts are a hard error.
    """
    with open(src_path, encoding="utf-8") as fh:
        src_lines = fh.read().split("\n")
    with open(tgt_path, encoding="utf-8") as fh:
        tgt_lines = fh.read().split("\n")
    # a trailing newline produces one final empty entry on both sides
    if src_lines and src_lines[-1] == "":
        src_lines.pop()
    if tgt_lines and tgt_lines[-1] == "":
        tgt_lines.pop()
    if not src_lines or not tgt_lines:
        raise CorpusError(f"empty corpus file: {src_path if not src_lines else tgt_path}")
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line count mismatch: {src_path} has {len(src_lines)}, "
            f"{tgt_path} has {len(tgt_lines)}")
    pairs, dropped = [], 0
    for src_line, tgt_line in zip(src_lines, tgt_lines):
        src, tgt = src_line.split(), tgt_line.split()
        if not src or not tgt or len(src) > max_len or len(tgt) > max_len:
            dropped += 1
            continue
        pairs.append((src, tgt))
    return ParallelCorpus(pairs=pairs, split=split, dropped=dropped)


def load_tagged(path, schema: TagSchema, kind: str = "pos", split: str = "train") -> TaggedCorpus:
    """Load a token<TAB>tag file; unknown tags are a hard error with a line number."""
    known = set(schema.fine)
    sentences, tokens, tags = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if tokens:
                    sentences.append((tokens, tags))
                    tokens, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise CorpusError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            token, tag = parts
            if tag not in known:
                raise CorpusError(f"{path}:{lineno}: tag {tag!r} not in schema")
            tokens.append(token)
            tags.append(tag)
    if tokens:
        sentences.append((tokens, tags))
    if not sentences:
        raise CorpusError(f"no sentences in {path}")
    return TaggedCorpus(sentences=sentences, kind=kind, split=split)


def save_parallel(corpus: ParallelCorpus, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fh:
        fh.write("".join(" ".join(src) + "\n" for src, _ in corpus.pairs))
    with open(tgt_path, "w", encoding="utf-8") as fh:
        fh.write("".join(" ".join(tgt) + "\n" for _, tgt in corpus.pairs))


def save_tagged(corpus: TaggedCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, tags in corpus.sentences:
            for token, tag in zip(tokens, tags):
                fh.write(f"{token}\t{tag}\n")
            fh.write("\n")


def build_vocab(sentences, max_size: int = 50000, min_count: int = 1) -> Vocab:
    """Frequency-ranked vocabulary; ties break lexicographically.

    `sentences` is an iterable of token lists. `max_size` counts the four
    reserved ids; tokens seen fewer than `min_count` times are excluded.
    """
    if max_size < len(RESERVED):
        raise CorpusError(f"max_size must be at least {len(RESERVED)}")
    counts = Counter()
    for tokens in sentences:
        counts.update(tokens)
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_count][: max_size - len(RESERVED)]
    return Vocab(kept)


# --------------------------------------------------------------------------
# synthetic generators
# --------------------------------------------------------------------------
# All three generators share the same source distribution: sentences of
# uniform random tokens w00..w{V-1}, lengths uniform in [min_len, max_len].
# Every token belongs to a class (its index modulo `classes`). What varies
# is the target side:
#   copy        target = source (the autoencoder analogue)
#   reverse     target = source reversed
#   context-tag target token j = token (s[j-1] + s[j]) mod V, i.e. producing
#               it requires knowing the previous token, not just the current
#
# Tags are a function of the source only and are identical across generators:
#   pos  tag of token w  = "P<class(w)>"          (context-free)
#   sem  tag at position j = "S<cp>_<c>" where cp is the class of the
#        previous token ("B" at sentence start) and c the class of the
#        current token                              (needs one token of context)
# The sem fine tags collapse to coarse tags "K<cp>" by previous-token class.

GENERATORS = ("copy", "reverse", "context-tag")


@dataclass
class SyntheticSpec:
    generator: str = "context-tag"
    sentences: int = 2000
    vocab_size: int = 30
    classes: int = 5
    min_len: int = 6
    max_len: int = 12
    seed: int = 0
    dev_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise CorpusError(f"unknown generator {self.generator!r}; "
                              f"expected one of {GENERATORS}")
        if self.sentences < 10:
            raise CorpusError("need at least 10 sentences")
        if not 1 <= self.classes <= self.vocab_size:
            raise CorpusError("classes must be in [1, vocab_size]")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")


@dataclass
class SyntheticData:
    parallel: dict        # split -> ParallelCorpus
    tagged: dict          # (task, split) -> TaggedCorpus
    schemas: dict         # task -> TagSchema
    ceilings: dict        # task -> best context-free accuracy (analytic)


def _token(i: int) -> str:
    return f"w{i:02d}"


def sem_schema(classes: int) -> TagSchema:
    """Pair tags S<prev-class>_<class>, grouped coarse by previous-token class."""
    prev_classes = ["B"] + [str(c) for c in range(classes)]
    fine = [f"S{cp}_{c}" for cp in prev_classes for c in range(classes)]
    coarse = [f"K{cp}" for cp in prev_classes]
    mapping = {f"S{cp}_{c}": f"K{cp}" for cp in prev_classes for c in range(classes)}
    return TagSchema(fine=fine, coarse=coarse, fine_to_coarse=mapping)


def pos_schema(classes: int) -> TagSchema:
    return identity_schema([f"P{c}" for c in range(classes)])


def _sem_tags(sentence_ids, classes: int) -> list:
    tags = []
    prev = "B"
    for tok in sentence_ids:
        c = tok % classes
        tags.append(f"S{prev}_{c}")
        prev = str(c)
    return tags


def context_free_ceiling(spec: SyntheticSpec) -> float:
    """Best possible accuracy of any tagger that sees only the current token.

    Derived in closed form from the generator's joint distribution: a token
    occurrence sits at sentence start with probability 1/E[len] (prev class
    "B"), otherwise its predecessor is uniform over the vocabulary. The
    optimal context-free tagger picks, per token type, the most probable sem
    tag; because types of one class share their tag distribution, the ceiling
    is the per-class maximum summed over the prev-class distribution.
    """
    spec.validate()
    mean_len = (spec.min_len + spec.max_len) / 2.0
    p_start = 1.0 / mean_len
    class_sizes = np.bincount(np.arange(spec.vocab_size) % spec.classes,
                              minlength=spec.classes)
    p_class = class_sizes / spec.vocab_size
    # P(tag | token of class c): tag is determined by prev class, so the
    # distribution over tags is exactly the distribution over prev classes.
    p_prev = {"B": p_start}
    for cp in range(spec.classes):
        p_prev[str(cp)] = (1.0 - p_start) * p_class[cp]
    best = max(p_prev.values())
    return float(best)


def make_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Generate parallel + tagged corpora; reproducible for a fixed seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    V, C = spec.vocab_size, spec.classes

    n_dev = max(1, int(spec.sentences * spec.dev_fraction))
    n_test = max(1, int(spec.sentences * spec.test_fraction))
    n_train = spec.sentences - n_dev - n_test
    if n_train < 1:
        raise CorpusError("sentence budget too small for a train/dev/test split")

    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=spec.sentences)
    sources = [rng.integers(0, V, size=int(n)) for n in lengths]

    def transform(ids):
        if spec.generator == "copy":
            return list(ids)
        if spec.generator == "reverse":
            return list(ids[::-1])
        shifted = np.concatenate([[0], ids[:-1]])
        return list((shifted + ids) % V)

    splits = {"train": sources[:n_train],
              "dev": sources[n_train:n_train + n_dev],
              "test": sources[n_train + n_dev:]}

    parallel, tagged = {}, {}
    for split, sents in splits.items():
        pairs = [([_token(i) for i in ids], [_token(i) for i in transform(ids)])
                 for ids in sents]
        parallel[split] = ParallelCorpus(pairs=pairs, split=split)
        pos_sents = [([_token(i) for i in ids], [f"P{i % C}" for i in ids])
                     for ids in sents]
        sem_sents = [([_token(i) for i in ids], _sem_tags(ids, C)) for ids in sents]
        tagged[("pos", split)] = TaggedCorpus(pos_sents, kind="pos", split=split)
        tagged[("sem", split)] = TaggedCorpus(sem_sents, kind="sem", split=split)

    return SyntheticData(
        parallel=parallel,
        tagged=tagged,
        schemas={"pos": pos_schema(C), "sem": sem_schema(C)},
        ceilings={"pos": 1.0, "sem": context_free_ceiling(spec)},
    )

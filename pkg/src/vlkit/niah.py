"""Needle-in-a-haystack harness: text or frame-sequence haystacks, bucketed recall."""

import json
from dataclasses import dataclass, field

import numpy as np

from .vocab import encode

# full-scale and desk-scale length buckets, half-open on the left: (lo, hi]
PAPER_BUCKETS = [(0, 2048)] + [(2 ** i, 2 ** (i + 1)) for i in range(11, 17)]
DESK_BUCKETS = [(0, 128)] + [(2 ** i, 2 ** (i + 1)) for i in range(7, 12)]
PRESETS = {"desk": DESK_BUCKETS, "paper": PAPER_BUCKETS}

# filler and needle alphabets are disjoint so the needle is unambiguous
FILLER_CHARS = "ghijklmnopqrstuvwxyz"
KEY = "#"
VALUE_FIRST = "0123456789+-*/=%"
VALUE_SECOND = "ABCDEFGHIJKLMNOP"
N_VALUES = len(VALUE_FIRST) * len(VALUE_SECOND)  # 256
FRAME_BYTES = np.arange(128, 192)  # synthetic visual tokens
DEFAULT_FRAME = 16


def value_string(i):
    a, b = divmod(int(i), len(VALUE_SECOND))
    return VALUE_FIRST[a] + VALUE_SECOND[b]


@dataclass
class HaystackSpec:
    modality: str
    total_len: int
    needle: tuple  # (key, value)
    needle_pos: float
    frame_tokens: int = DEFAULT_FRAME

    def __post_init__(self):
        if self.modality not in ("text", "video"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if not 0.0 <= self.needle_pos <= 1.0:
            raise ValueError(f"needle_pos {self.needle_pos} outside [0, 1]")
        if self.total_len < 1:
            raise ValueError("total_len must be positive")

    @property
    def needle_ids(self):
        return encode(self.needle[0] + self.needle[1])

    def prompt_len(self):
        return self.total_len + len(encode(self.needle[0]))


@dataclass
class Haystack:
    tokens: np.ndarray  # haystack only
    prompt: np.ndarray  # haystack followed by the query key
    answer: np.ndarray
    offset: int


def needle_offset(total_len, needle_len, pos):
    if needle_len > total_len:
        raise ValueError(f"needle of {needle_len} tokens does not fit a {total_len}-token haystack")
    return int(round(pos * (total_len - needle_len)))


def filler_text(n, rng):
    """Distractor 'words' of lowercase letters separated by spaces."""
    out = np.frombuffer(FILLER_CHARS.encode(), dtype=np.uint8)[rng.integers(len(FILLER_CHARS), size=n)]
    out = out.astype(np.int64)
    out[rng.random(n) < 0.18] = ord(" ")
    return out


def build_haystack(spec, rng):
    needle = spec.needle_ids
    n = spec.total_len
    if spec.modality == "text":
        off = needle_offset(n, len(needle), spec.needle_pos)
        tokens = filler_text(n, rng)
    else:
        F = spec.frame_tokens
        if len(needle) > F:
            raise ValueError(f"needle of {len(needle)} tokens does not fit a {F}-token frame")
        if n % F:
            raise ValueError(f"video haystack length {n} is not a multiple of frame size {F}")
        n_frames = n // F
        tokens = FRAME_BYTES[rng.integers(len(FRAME_BYTES), size=n)].astype(np.int64)
        off = int(round(spec.needle_pos * (n_frames - 1))) * F
    tokens[off:off + len(needle)] = needle
    key = encode(spec.needle[0])
    return Haystack(tokens, np.concatenate([tokens, key]), encode(spec.needle[1]), off)


def random_spec(total_len, rng, modality="text", frame_tokens=DEFAULT_FRAME):
    if modality == "video":
        total_len = max(frame_tokens, total_len - total_len % frame_tokens)
    return HaystackSpec(modality, int(total_len), (KEY, value_string(rng.integers(N_VALUES))),
                        float(rng.random()), frame_tokens)


def random_specs(n, buckets, rng, modality="text"):
    """``n`` specs per bucket with lengths uniform inside the bucket."""
    specs = []
    for lo, hi in buckets:
        for _ in range(n):
            specs.append(random_spec(int(rng.integers(max(lo + 1, 4), hi + 1)), rng, modality))
    return specs


# ---------------------------------------------------------------- evaluation

@dataclass
class Bucket:
    lo: int
    hi: int
    n_trials: int = 0
    hits: int = 0

    @property
    def recall(self):
        return self.hits / self.n_trials if self.n_trials else 0.0


@dataclass
class BucketReport:
    buckets: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        prev = None
        for b in self.buckets:
            if b.lo >= b.hi or (prev is not None and b.lo < prev):
                raise ValueError("bucket ranges must be ascending and disjoint")
            prev = b.hi

    def recalls(self):
        return [b.recall for b in self.buckets]

    def to_jsonl(self):
        return "".join(json.dumps({"range": [b.lo, b.hi], "n_trials": b.n_trials, "recall": b.recall}) + "\n"
                       for b in self.buckets)

    def to_table(self):
        head = "| " + " | ".join(f"({b.lo}, {b.hi}]" for b in self.buckets) + " |"
        rule = "|" + "|".join("-" * (len(c) + 2) for c in head.strip("| ").split(" | ")) + "|"
        vals = "| " + " | ".join(f"{100 * b.recall:.1f}".center(len(f"({b.lo}, {b.hi}]")) for b in self.buckets) + " |"
        return "\n".join([head, rule, vals]) + "\n"

    def write(self, jsonl_path, table_path=None):
        with open(jsonl_path, "w") as fh:
            fh.write(self.to_jsonl())
        if table_path:
            with open(table_path, "w") as fh:
                fh.write(self.to_table())


def bucket_of(length, buckets):
    for i, (lo, hi) in enumerate(buckets):
        if lo < length <= hi:
            return i
    return None


def evaluate_recall(model, specs, buckets, seed=0, context=None):
    """Fraction of exact greedy-decoded needle values per length bucket.

    ``model(prompt_ids, n_new)`` returns generated ids. A trial whose prompt plus
    answer does not fit ``context`` is counted as a miss without running the model.
    """
    report = BucketReport([Bucket(lo, hi) for lo, hi in buckets])
    seqs = np.random.SeedSequence(seed).spawn(len(specs))
    for spec, ss in zip(specs, seqs):
        k = bucket_of(spec.total_len, buckets)
        if k is None:
            continue
        hay = build_haystack(spec, np.random.default_rng(ss))
        b = report.buckets[k]
        b.n_trials += 1
        if context is not None and len(hay.prompt) + len(hay.answer) > context:
            continue
        out = np.asarray(model(hay.prompt, len(hay.answer)), dtype=np.int64)
        b.hits += int(out.shape == hay.answer.shape and (out == hay.answer).all())
    return report


def oracle_retriever(prompt, n_new):
    """Finds the last earlier occurrence of the query key and copies what follows it."""
    prompt = np.asarray(prompt)
    key = encode(KEY)
    q = len(prompt) - len(key)
    for s in range(q - 1, -1, -1):
        if (prompt[s:s + len(key)] == key).all():
            return prompt[s + len(key):s + len(key) + n_new]
    return np.zeros(n_new, dtype=np.int64)


def random_guesser(rng):
    def model(prompt, n_new):
        return encode(value_string(rng.integers(N_VALUES)))[:n_new]
    return model

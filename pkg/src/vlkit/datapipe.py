"""Deterministic, resumable data streaming with on-the-fly mixing, chat
rendering, loss masking, packing and geometry-preserving augmentation.

The stream is a pure function of its :class:`StreamState`: every random draw
comes from generators whose full bit state is part of that state, so a resumed
stream continues exactly where an uninterrupted one would.
"""

import hashlib
import json
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kernels
from .packing import PackedBatch
from .vocab import (BOS, EOS, IM_END, IM_START, IMAGE, PAD, ROLE_ASSISTANT, ROLE_IDS, ROLE_PAD, ROLE_SPECIAL,
                    ROLE_SYSTEM, ROLE_USER, THINK_END, THINK_START, decode, encode, supervised)

__all__ = [
    "PAD", "BOS", "EOS", "IM_START", "IM_END", "IMAGE", "THINK_START", "THINK_END",
    "MixSpec", "StreamState", "Stream", "build_stream", "checkpoint_resume",
    "ChatExample", "render_chat", "detokenize_chat", "pack_examples", "unpack_examples",
    "augment_with_geometry", "LocalStore", "read_manifest",
]

STATE_VERSION = "vlkit-stream-1"
DEFAULT_BUFFER = 1024


# ---------------------------------------------------------------- chat rendering

@dataclass
class ChatExample:
    """``turns``: list of (role, content). Content is a string or a list of parts:
    strings, ``{"image": ref}`` or ``{"think": text}`` (reasoning span, assistant only)."""

    turns: list

    def __post_init__(self):
        for role, _ in self.turns:
            if role not in ("system", "user", "assistant"):
                raise ValueError(f"unknown chat role {role!r}")


def _parts(content):
    return [content] if isinstance(content, str) else list(content)


def render_chat(ex):
    """ChatML-style ids plus per-token role labels.

    Turn layout: ``<|im_start|>role\\n content <|im_end|>``. The header is
    prompt-side (labelled user, or system for system turns). Assistant content
    is labelled assistant; the assistant's closing marker and think markers are
    labelled special, so exactly those tokens are supervised.
    """
    if isinstance(ex, dict):
        ex = ChatExample(ex["turns"])
    ids, roles, images = [], [], []
    for role, content in ex.turns:
        if role not in ROLE_IDS or role == "special":
            raise ValueError(f"unknown chat role {role!r}")
        own = ROLE_IDS[role]
        head_role = ROLE_SYSTEM if role == "system" else ROLE_USER
        head = np.concatenate([[IM_START], encode(role + "\n")])
        ids.append(head)
        roles.append(np.full(len(head), head_role))
        for part in _parts(content):
            if isinstance(part, str):
                t = encode(part)
                ids.append(t)
                roles.append(np.full(len(t), own))
            elif "image" in part:
                ids.append(np.array([IMAGE]))
                roles.append(np.array([own if own != ROLE_ASSISTANT else ROLE_USER]))
                images.append(part["image"])
            elif "think" in part:
                if role != "assistant":
                    raise ValueError("think spans belong to assistant turns")
                t = encode(part["think"])
                ids.append(np.concatenate([[THINK_START], t, [THINK_END]]))
                roles.append(np.concatenate([[ROLE_SPECIAL], np.full(len(t), own), [ROLE_SPECIAL]]))
            else:
                raise ValueError(f"unsupported content part {part!r}")
        ids.append(np.array([IM_END]))
        roles.append(np.array([ROLE_SPECIAL if role == "assistant" else own]))
    out_ids = np.concatenate(ids).astype(np.int64)
    out_roles = np.concatenate(roles).astype(np.int64)
    return out_ids, out_roles, images


def detokenize_chat(ids):
    """Inverse of :func:`render_chat` for text: list of (role, text) with think spans inlined."""
    ids = np.asarray(ids, dtype=np.int64)
    turns = []
    starts = np.flatnonzero(ids == IM_START)
    for s in starts:
        end = s + 1 + int(np.argmax(ids[s + 1:] == IM_END))
        body = ids[s + 1:end]
        nl = int(np.argmax(body == ord("\n")))
        role = decode(body[:nl])
        turns.append((role, decode(body[nl + 1:], show_special=False)))
    return turns


# ---------------------------------------------------------------- streaming

@dataclass
class MixSpec:
    sources: list  # [(name, weight)]

    def __post_init__(self):
        if not self.sources:
            raise ValueError("MixSpec needs at least one source")
        w = np.array([float(x) for _, x in self.sources])
        if (w < 0).any():
            raise ValueError("mixing weights must be non-negative")
        if w.sum() <= 0:
            raise ValueError("mixing weights are all zero")
        self.weights = w / w.sum()

    @property
    def names(self):
        return [n for n, _ in self.sources]


@dataclass
class StreamState:
    seed: int
    step: int
    buffer_size: int
    mix_rng: dict
    sources: dict
    version: str = STATE_VERSION
    mix: list = field(default_factory=list)

    def digest(self):
        blob = json.dumps(self.sources, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json(self):
        d = dict(self.__dict__)
        d["digest"] = self.digest()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        digest = d.pop("digest", None)
        st = cls(**d)
        if digest is not None and digest != st.digest():
            raise ValueError("stream state digest mismatch (buffer contents corrupted)")
        return st

    def save(self, path):
        checkpoint.save(path, {"datapipe.state": np.frombuffer(self.to_json().encode(), dtype=np.uint8)})

    @classmethod
    def load(cls, path):
        return cls.from_json(checkpoint.load(path)["datapipe.state"].tobytes().decode())


def _gen(state_dict):
    g = np.random.Generator(np.random.PCG64())
    g.bit_generator.state = state_dict
    return g


class _SourceCursor:
    """Bounded shuffle buffer over one source (cycles through epochs)."""

    def __init__(self, n, state):
        self.n = n
        self.cursor = state["cursor"]
        self.epoch = state["epoch"]
        self.buffer = list(state["buffer"])
        self.rng = _gen(state["rng"])

    def _read(self):
        if self.cursor == self.n:
            self.cursor = 0
            self.epoch += 1
        i = self.cursor
        self.cursor += 1
        return i

    def next(self, capacity):
        while len(self.buffer) < capacity:
            self.buffer.append(self._read())
        j = int(self.rng.integers(len(self.buffer)))
        out = self.buffer[j]
        self.buffer[j] = self._read()
        return out

    def state(self):
        return {"cursor": self.cursor, "epoch": self.epoch, "buffer": list(self.buffer),
                "rng": self.rng.bit_generator.state}


class Stream:
    """Infinite iterator of ``(source_name, index, item)``; ``state()`` snapshots it."""

    def __init__(self, mix, catalog, state):
        if state.version != STATE_VERSION:
            raise ValueError(f"stream state version {state.version!r} != {STATE_VERSION!r}")
        if state.mix and [list(x) for x in state.mix] != [[n, float(w)] for n, w in mix.sources]:
            raise ValueError("stream state was produced under a different MixSpec")
        missing = [n for n in mix.names if n not in catalog]
        if missing:
            raise KeyError(f"catalog lacks sources {missing}")
        self.mix = mix
        self.catalog = catalog
        self.seed = state.seed
        self.step = state.step
        self.buffer_size = state.buffer_size
        self.cum = np.cumsum(mix.weights)
        self.mix_rng = _gen(state.mix_rng)
        self.cursors = {n: _SourceCursor(len(catalog[n]), state.sources[n]) for n in mix.names}

    def __iter__(self):
        return self

    def __next__(self):
        u = self.mix_rng.random()
        k = min(int(np.searchsorted(self.cum, u, side="right")), len(self.cum) - 1)
        while self.mix.weights[k] == 0:  # guard float edge at the top of the cdf
            k -= 1
        name = self.mix.names[k]
        src = self.cursors[name]
        idx = src.next(min(self.buffer_size, src.n))
        self.step += 1
        return name, idx, self.catalog[name][idx]

    def take(self, n):
        return [next(self) for _ in range(n)]

    def state(self):
        return StreamState(
            seed=self.seed, step=self.step, buffer_size=self.buffer_size,
            mix_rng=self.mix_rng.bit_generator.state,
            sources={n: c.state() for n, c in self.cursors.items()},
            mix=[[n, float(w)] for n, w in self.mix.sources],
        )


def initial_state(mix, catalog, seed, buffer_size=DEFAULT_BUFFER):
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(len(mix.names) + 1)
    sources = {}
    for child, name in zip(children[1:], mix.names):
        if len(catalog[name]) == 0:
            raise ValueError(f"source {name!r} is empty")
        sources[name] = {"cursor": 0, "epoch": 0, "buffer": [],
                         "rng": np.random.Generator(np.random.PCG64(child)).bit_generator.state}
    mix_rng = np.random.Generator(np.random.PCG64(children[0])).bit_generator.state
    return StreamState(seed=int(seed), step=0, buffer_size=int(buffer_size), mix_rng=mix_rng,
                       sources=sources, mix=[[n, float(w)] for n, w in mix.sources])


def build_stream(mix, seed, catalog, buffer_size=DEFAULT_BUFFER):
    """Seeded categorical interleaving of sources, each read through a bounded shuffle buffer."""
    return Stream(mix, catalog, initial_state(mix, catalog, seed, buffer_size))


def checkpoint_resume(state, mix, catalog):
    """Resume a stream from a snapshot; the continuation equals the uninterrupted stream."""
    if isinstance(state, (str, bytes, os.PathLike)) and os.path.exists(state):
        state = StreamState.load(state)
    return Stream(mix, catalog, StreamState.from_json(state.to_json()))


def ordered_parallel_map(fn, items, n_workers):
    """Worker w handles positions with index % n_workers == w; output keeps input order."""
    items = list(items)
    if n_workers <= 1:
        return [fn(x) for x in items]

    def run(w):
        return [(i, fn(items[i])) for i in range(w, len(items), n_workers)]

    out = [None] * len(items)
    with ThreadPoolExecutor(n_workers) as ex:
        for chunk in ex.map(run, range(n_workers)):
            for i, v in chunk:
                out[i] = v
    return out


# ---------------------------------------------------------------- storage

class LocalStore:
    """Local-directory object store with a small in-memory LRU cache."""

    def __init__(self, root, cache_size=256):
        self.root = root
        self.cache_size = cache_size
        self._cache = OrderedDict()

    def read_bytes(self, path):
        if path in self._cache:
            self._cache.move_to_end(path)
            return self._cache[path]
        with open(os.path.join(self.root, path), "rb") as fh:
            data = fh.read()
        self._cache[path] = data
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return data


MANIFEST_KEYS = ("id", "source", "path", "length", "modality")


def read_manifest(path):
    """One JSON object per line with keys id, source, path, length, modality."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            missing = [k for k in MANIFEST_KEYS if k not in row]
            if missing:
                raise ValueError(f"{path}:{lineno}: manifest row lacks {missing}")
            rows.append(row)
    return rows


def write_manifest(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in MANIFEST_KEYS}) + "\n")


def catalog_from_manifest(rows):
    out = {}
    for row in rows:
        out.setdefault(row["source"], []).append(row)
    return out


# ---------------------------------------------------------------- packing

def pack_examples(examples, seq_len, truncate=False, window=64):
    """First-fit pack ``(ids, loss_mask)`` examples into fixed-length sequences.

    Examples are taken ``window`` at a time; each window is first-fit packed and
    its bins are emitted in creation order. Remainders are PAD with loss masked.
    Yields PackedBatch with int token ids and ``meta["example_index"]``.
    """
    buf = []
    counter = 0
    for ex in examples:
        ids, mask = ex
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if len(ids) > seq_len:
            if not truncate:
                raise ValueError(f"example of length {len(ids)} exceeds seq_len {seq_len}")
            ids, mask = ids[:seq_len], mask[:seq_len]
        buf.append((counter, ids, mask))
        counter += 1
        if len(buf) == window:
            yield from _pack_window(buf, seq_len)
            buf = []
    if buf:
        yield from _pack_window(buf, seq_len)


def _pack_window(buf, seq_len):
    bins = kernels.first_fit(np.array([len(b[1]) for b in buf]), seq_len)
    for b in range(int(bins.max()) + 1):
        members = [buf[i] for i in np.flatnonzero(bins == b)]
        ids = np.concatenate([m[1] for m in members])
        mask = np.concatenate([m[2] for m in members])
        pad = seq_len - len(ids)
        bounds = np.concatenate([[0], np.cumsum([len(m[1]) for m in members])])
        ids = np.concatenate([ids, np.full(pad, PAD, dtype=np.int64)])
        mask = np.concatenate([mask, np.zeros(pad, dtype=bool)])
        batch = PackedBatch(ids, bounds, loss_mask=mask, pad=pad)
        batch.meta["example_index"] = [m[0] for m in members]
        yield batch


def unpack_examples(batch):
    b = batch.boundaries
    return [(batch.tokens[b[i]:b[i + 1]], batch.loss_mask[b[i]:b[i + 1]]) for i in range(len(b) - 1)]


def chat_to_example(ex):
    ids, roles, _ = render_chat(ex)
    return ids, supervised(roles)


# ---------------------------------------------------------------- augmentation

def _check_boxes(boxes, W, H):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0, y0, x1, y1 = boxes.T
    if (x0 < 0).any() or (y0 < 0).any() or (x1 > W).any() or (y1 > H).any() or (x0 > x1).any() or (y0 > y1).any():
        raise ValueError("box outside image bounds or inverted")
    return boxes


def augment_with_geometry(image, boxes, op):
    """Apply ``hflip`` or ``rotate90`` (counter-clockwise) to an [H, W, C] image and its boxes.

    Boxes are (x0, y0, x1, y1) in pixel-edge coordinates: x to the right, y down.
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    b = _check_boxes(boxes, W, H)
    x0, y0, x1, y1 = b.T
    if op == "hflip":
        return img[:, ::-1].copy(), np.stack([W - x1, y0, W - x0, y1], axis=1)
    if op == "rotate90":
        # np.rot90 maps pixel (r, c) to (W-1-c, r); edge point (x, y) goes to (y, W - x)
        return np.rot90(img).copy(), np.stack([y0, W - x1, y1, W - x0], axis=1)
    raise ValueError(f"unknown augmentation {op!r}")


def random_augment(image, boxes, rng, n_ops=2):
    for _ in range(n_ops):
        image, boxes = augment_with_geometry(image, boxes, ("hflip", "rotate90")[int(rng.integers(2))])
    return image, boxes


__all__ += ["ordered_parallel_map", "chat_to_example", "random_augment", "initial_state",
            "write_manifest", "catalog_from_manifest", "ROLE_PAD", "ROLE_USER", "BOS", "EOS"]

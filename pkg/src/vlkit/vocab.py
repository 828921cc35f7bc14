"""Byte-level vocabulary: ids 0-255 are raw bytes, followed by special tokens."""

import numpy as np

PAD = 256
BOS = 257
EOS = 258
IM_START = 259
IM_END = 260
IMAGE = 261
THINK_START = 262
THINK_END = 263
VOCAB_SIZE = 264

SPECIAL_NAMES = {
    PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", IM_START: "<|im_start|>", IM_END: "<|im_end|>",
    IMAGE: "<image>", THINK_START: "<think>", THINK_END: "</think>",
}


def encode(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode(ids, show_special=False):
    out = bytearray()
    parts = []
    for t in np.asarray(ids, dtype=np.int64).tolist():
        if t < 256:
            out.append(t)
        elif show_special:
            parts.append(out.decode("utf-8", errors="replace"))
            parts.append(SPECIAL_NAMES.get(t, f"<{t}>"))
            out = bytearray()
    parts.append(out.decode("utf-8", errors="replace"))
    return "".join(parts)


# per-token role labels used for loss masking
ROLE_SYSTEM = 0
ROLE_USER = 1
ROLE_ASSISTANT = 2
ROLE_SPECIAL = 3
ROLE_PAD = 4
ROLE_IDS = {"system": ROLE_SYSTEM, "user": ROLE_USER, "assistant": ROLE_ASSISTANT, "special": ROLE_SPECIAL}
SUPERVISED_ROLES = (ROLE_ASSISTANT, ROLE_SPECIAL)


def supervised(roles):
    roles = np.asarray(roles)
    return (roles == ROLE_ASSISTANT) | (roles == ROLE_SPECIAL)

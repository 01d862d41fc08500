"""Context text extraction and semantic vectors (hashed fallback or imported)."""

from __future__ import annotations

import bisect
import hashlib
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAX_CONTEXT = 1024
VECTOR_MAGIC = b"SSEMBVEC"
VECTOR_VERSION = 1

_TAG = re.compile(r"<[^>]*>")
_DELIMITER = re.compile(r"\$\$|\$|\\\(|\\\)|\\\[|\\\]")
_REMOVABLE = re.compile(f"(?P<tag>{_TAG.pattern})|(?P<delim>{_DELIMITER.pattern})")
_WORD_SPLIT = re.compile(r"[\W_]+")


@dataclass(frozen=True)
class ContextText:
    formula_id: str
    text: str
    anchor: int = 0  # position of the formula inside ``text``


def _clean(post: str) -> tuple[str, list[int]]:
    """Strip tags and math delimiters, collapse whitespace; keep an index map to ``post``."""
    out: list[str] = []
    origin: list[int] = []
    pending_space = False

    def feed(start, end):
        nonlocal pending_space
        for i in range(start, end):
            ch = post[i]
            if ch.isspace():
                pending_space = True
                continue
            if pending_space and out:
                out.append(" ")
                origin.append(i)
            pending_space = False
            out.append(ch)
            origin.append(i)

    pos = 0
    for m in _REMOVABLE.finditer(post):
        feed(pos, m.start())
        if m.lastgroup == "tag":
            pending_space = True
        pos = m.end()
    feed(pos, len(post))
    return "".join(out), origin


def extract_context(
    post: str,
    span: tuple[int, int] | None = None,
    formula_id: str = "",
    max_length: int = MAX_CONTEXT,
    unit: str = "chars",
) -> ContextText:
    """Cleaned post text, truncated to a window of ``max_length`` units.

    The window is centred on the middle of ``span`` (character offsets into
    ``post``). Without a span the window starts at the beginning of the post.
    ``unit`` is ``"chars"`` or ``"tokens"`` (whitespace tokens).
    """
    if unit not in ("chars", "tokens"):
        raise ValueError("unit must be 'chars' or 'tokens'")
    if span is not None:
        start, end = span
        if not (0 <= start <= end <= len(post)):
            raise ValueError(f"formula span {span} outside post of length {len(post)}")
    text, origin = _clean(post)
    if not text:
        return ContextText(formula_id, "", 0)
    anchor = 0
    if span is not None:
        anchor = min(bisect.bisect_left(origin, (span[0] + span[1]) // 2), len(text) - 1)

    if unit == "chars":
        if len(text) <= max_length:
            return ContextText(formula_id, text, anchor)
        lo = min(max(anchor - max_length // 2, 0), len(text) - max_length)
        return ContextText(formula_id, text[lo : lo + max_length], anchor - lo)

    starts = [m.start() for m in re.finditer(r"\S+", text)]
    if len(starts) <= max_length:
        return ContextText(formula_id, text, anchor)
    tok = max(bisect.bisect_right(starts, anchor) - 1, 0)
    lo = min(max(tok - max_length // 2, 0), len(starts) - max_length)
    begin = starts[lo]
    stop = starts[lo + max_length] - 1 if lo + max_length < len(starts) else len(text)
    return ContextText(formula_id, text[begin:stop], anchor - begin)


def tokenize(text: str) -> list[str]:
    return [t for t in _WORD_SPLIT.split(text.lower()) if t]


def hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def bucket(token: str, dim: int) -> tuple[int, float]:
    h = hash64(token)
    return h % dim, -1.0 if h >> 63 else 1.0


@dataclass(frozen=True)
class SemanticVector:
    formula_id: str
    v: np.ndarray
    provider: str = "fallback"
    normalized: bool = True


def embed_text_fallback(text: str, dim: int = 256, formula_id: str = "") -> SemanticVector:
    """Signed hashed bag of words with ``log(1 + count)`` weights, L2-normalised.

    Empty text yields the zero vector with ``normalized=False``.
    """
    v = np.zeros(dim)
    for tok, count in Counter(tokenize(text)).items():
        idx, sign = bucket(tok, dim)
        v[idx] += sign * math.log1p(count)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return SemanticVector(formula_id, v, "fallback", False)
    return SemanticVector(formula_id, v / norm, "fallback", True)


def embed_texts(texts: Iterable[str], dim: int = 256) -> np.ndarray:
    return np.array([embed_text_fallback(t, dim).v for t in texts]).reshape(-1, dim)


# ---------------------------------------------------------------------------
# vector files: magic, u32 version, u32 dim, u64 count, then per record
# u16 id length, id bytes, dim little-endian f32


def write_vectors(path_or_file, ids: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("need one row per id")
    parts = [VECTOR_MAGIC, struct.pack("<IIQ", VECTOR_VERSION, matrix.shape[1], len(ids))]
    for fid, row in zip(ids, matrix):
        raw = fid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long: {fid[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.ascontiguousarray(row, dtype="<f4").tobytes())
    data = b"".join(parts)
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def read_vectors(path_or_file) -> tuple[list[str], np.ndarray]:
    """Raw contents of a vector file as ``(ids, float32 matrix)``."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if data[:8] != VECTOR_MAGIC:
        raise ValueError("corrupt vector file: bad magic")
    try:
        version, dim, count = struct.unpack_from("<IIQ", data, 8)
    except struct.error as exc:
        raise ValueError("corrupt vector file: truncated header") from exc
    if version != VECTOR_VERSION:
        raise ValueError(f"corrupt vector file: unsupported version {version}")
    pos = 24
    ids: list[str] = []
    matrix = np.empty((count, dim), dtype=np.float32)
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            ids.append(data[pos : pos + n].decode("utf-8"))
            pos += n
            if pos + 4 * dim > len(data):
                raise ValueError("truncated record")
            matrix[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt vector file: {exc}") from exc
    if pos != len(data):
        raise ValueError("corrupt vector file: trailing bytes")
    return ids, matrix


def import_vectors(path_or_file, dim: int | None = None, provider: str = "imported") -> dict[str, SemanticVector]:
    """Load a vector file into ``formula_id -> SemanticVector``, re-normalising rows."""
    ids, matrix = read_vectors(path_or_file)
    if dim is not None and matrix.shape[1] != dim:
        raise ValueError(f"dimension mismatch: file has {matrix.shape[1]}, index expects {dim}")
    out: dict[str, SemanticVector] = {}
    for fid, row in zip(ids, matrix.astype(np.float64)):
        if fid in out:
            raise ValueError(f"duplicate id in vector file: {fid}")
        norm = float(np.linalg.norm(row))
        if norm > 0:
            out[fid] = SemanticVector(fid, row / norm, provider, True)
        else:
            out[fid] = SemanticVector(fid, row, provider, False)
    return out

"""Document samples, the synthetic form corpus and its on-disk format.

Corpus layout on disk::

    <root>/index.jsonl           one JSON object per document
    <root>/images/<doc_id>.bin   16-byte header + float32 raster

The JSON objects carry exactly ``doc_id``, ``tokens``, ``boxes`` and
``labels``.  Boxes are integer ``(x0, y0, x1, y1)`` in the [0, 1000]
normalized frame.  Labels use BIO ids: ``0`` is ``O``, entity class ``c``
maps to ``B = 1 + 2c`` and ``I = 2 + 2c``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = b"AETI"
_HEADER = struct.Struct("<4sIII")
COORD_MAX = 1000

# glyph stencil is a 3x7 bitmap, stretched to the word box
STENCIL_ROWS = 3
STENCIL_COLS = 7
_STENCIL_BITS = STENCIL_ROWS * STENCIL_COLS
_STENCIL_MUL = 0x9E3B5  # odd, so multiplication mod 2**21 is a bijection
_STENCIL_XOR = 0x15A5A5


class CorpusFormatError(ValueError):
    """Raised when a corpus file on disk violates the document schema."""

    def __init__(self, record: str, field_name: str, message: str):
        self.record = record
        self.field = field_name
        super().__init__(f"{record}: {field_name}: {message}")


def num_label_ids(num_labels: int) -> int:
    """Size of the BIO label vocabulary for ``num_labels`` entity classes."""
    return 2 * num_labels + 1


def label_names(num_labels: int) -> list[str]:
    names = ["O"]
    for c in range(num_labels):
        names += [f"B-{c}", f"I-{c}"]
    return names


@dataclass(frozen=True, eq=False)
class DocumentSample:
    doc_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    tokens: tuple[int, ...]
    boxes: tuple[tuple[int, int, int, int], ...]
    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, DocumentSample):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.tokens == other.tokens
            and self.boxes == other.boxes
            and self.labels == other.labels
            and self.image.shape == other.image.shape
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
        )

    __hash__ = None


@dataclass(frozen=True)
class CorpusConfig:
    num_docs: int = 200
    vocab_size: int = 50
    num_labels: int = 4
    image_size: int = 64
    max_tokens: int = 16
    seed: int = 0
    min_tokens: int | None = None
    slot_width: int = 16
    slot_height: int = 8
    # text ids drop the token's class group; only the rendered glyph keeps it
    text_ambiguous: bool = False
    # shift each span's class by its page quadrant, so layout matters too
    quadrant_shift: bool = True
    ink_noise: float = 0.02

    def __post_init__(self):
        for name in ("num_docs", "vocab_size", "num_labels", "image_size", "max_tokens",
                     "slot_width", "slot_height"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        lo = self.max_tokens if self.min_tokens is None else self.min_tokens
        if not 1 <= lo <= self.max_tokens:
            raise ValueError(f"min_tokens must lie in [1, max_tokens], got {self.min_tokens}")
        if self.image_size % self.slot_width or self.image_size % self.slot_height:
            raise ValueError("image_size must be divisible by slot_width and slot_height")
        if self.slot_width < 3 or self.slot_height < 3:
            raise ValueError("slots must be at least 3 px on each side")
        if self.vocab_size < 2 * self.num_groups:
            raise ValueError(
                f"vocab_size must be >= {2 * self.num_groups} so every class group "
                "has a begin and an inside token"
            )
        if self.max_tokens > self.capacity:
            raise ValueError(
                f"max_tokens={self.max_tokens} cannot fit without box overlap: "
                f"the {self.image_size}px page holds {self.capacity} word slots"
            )

    @property
    def num_groups(self) -> int:
        # one group per entity class plus one that lands on "O"
        return self.num_labels + 1

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.image_size // self.slot_height, self.image_size // self.slot_width

    @property
    def capacity(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols


def token_stencil(token_id: int) -> np.ndarray:
    """Binary 3x7 glyph for a token id; distinct ids give distinct glyphs."""
    if not 0 <= token_id < 2**_STENCIL_BITS:
        raise ValueError(f"token id {token_id} outside stencil range")
    code = ((token_id * _STENCIL_MUL) & (2**_STENCIL_BITS - 1)) ^ _STENCIL_XOR
    bits = [(code >> k) & 1 for k in range(_STENCIL_BITS)]
    return np.array(bits, dtype=bool).reshape(STENCIL_ROWS, STENCIL_COLS)


def render_stencil(token_id: int, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour stretch of the token's glyph onto a ``height x width`` box."""
    st = token_stencil(token_id)
    rows = (np.arange(height) * STENCIL_ROWS) // height
    cols = (np.arange(width) * STENCIL_COLS) // width
    return st[np.ix_(rows, cols)]


def _to_norm(px: int, size: int) -> int:
    return int(round(px * COORD_MAX / size))


def _split_runs(slots: list[int], rng: np.random.Generator) -> list[list[int]]:
    spans, i = [], 0
    while i < len(slots):
        n = int(rng.integers(1, 4))
        spans.append(slots[i:i + n])
        i += n
    return spans


def _pick_token(group: int, inside: bool, cfg: CorpusConfig, rng: np.random.Generator) -> int:
    G = cfg.num_groups
    # tok = group + G * r, with r even for begin tokens and odd for inside tokens
    rs = [r for r in range(int(inside), (cfg.vocab_size - group + G - 1) // G, 2)]
    return group + G * int(rng.choice(rs))


def _generate_doc(index: int, cfg: CorpusConfig) -> DocumentSample:
    rng = np.random.default_rng([cfg.seed, index])
    rows, cols = cfg.grid_shape
    lo = cfg.max_tokens if cfg.min_tokens is None else cfg.min_tokens
    n_tokens = int(rng.integers(lo, cfg.max_tokens + 1))
    chosen = sorted(int(s) for s in rng.choice(cfg.capacity, size=n_tokens, replace=False))

    # spans never cross a half-row, so every span sits inside one page quadrant
    half = max(cols // 2, 1)
    runs: dict[tuple[int, int], list[int]] = {}
    for s in chosen:
        r, c = divmod(s, cols)
        runs.setdefault((r, int(c >= half)), []).append(s)

    tokens, boxes, labels = [], [], []
    true_ids = []
    G = cfg.num_groups
    for (r, side), slots in sorted(runs.items()):
        region = 2 * int(r >= rows / 2) + side
        for span in _split_runs(slots, rng):
            group = int(rng.integers(0, G))
            cls = (group + region) % G if cfg.quadrant_shift else group
            for k, s in enumerate(span):
                tok = _pick_token(group, k > 0, cfg, rng)
                true_ids.append(tok)
                tokens.append(tok // G if cfg.text_ambiguous else tok)
                if cls == cfg.num_labels:
                    labels.append(0)
                else:
                    labels.append(1 + 2 * cls + int(k > 0))
                sr, sc = divmod(s, cols)
                x0 = sc * cfg.slot_width + 1
                y0 = sr * cfg.slot_height + 1
                x1 = (sc + 1) * cfg.slot_width - 1
                y1 = (sr + 1) * cfg.slot_height - 1
                boxes.append((x0, y0, x1, y1))

    size = cfg.image_size
    tint = rng.uniform(0.0, 0.05, size=3)
    image = np.ones((size, size, 3)) - tint
    ink = rng.uniform(0.0, 0.3, size=3)
    for tok, (x0, y0, x1, y1) in zip(true_ids, boxes):
        mask = render_stencil(tok, y1 - y0, x1 - x0)
        patch = image[y0:y1, x0:x1]
        patch[mask] = ink
    image += rng.normal(0.0, cfg.ink_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    image.setflags(write=False)

    norm_boxes = tuple(
        (_to_norm(x0, size), _to_norm(y0, size), _to_norm(x1, size), _to_norm(y1, size))
        for x0, y0, x1, y1 in boxes
    )
    return DocumentSample(
        doc_id=f"doc{cfg.seed:04d}-{index:05d}",
        image=image,
        tokens=tuple(tokens),
        boxes=norm_boxes,
        labels=tuple(labels),
    )


def generate_corpus(cfg: CorpusConfig) -> list[DocumentSample]:
    """Deterministic synthetic forms.

    Words sit on a grid of non-overlapping slots and are grouped into short
    spans within each half-row.  A span draws a class group ``g``; its label
    class is ``(g + quadrant) mod (num_labels + 1)``, or plain ``g`` when
    ``quadrant_shift`` is off, the last value meaning ``O``.  Token ids
    encode the group (``tok mod G``) and whether the word begins a span
    (parity of ``tok // G``), so the label of every word is a function of
    its id and its page quadrant.  Each word's true id is stamped into the
    image as a glyph.
    """
    return [_generate_doc(i, cfg) for i in range(cfg.num_docs)]


def validate_sample(
    s: DocumentSample,
    num_label_ids: int | None = None,
    vocab_size: int | None = None,
) -> list[str]:
    """All schema violations of ``s``; empty iff the sample is valid."""
    out = []
    if not (len(s.tokens) == len(s.boxes) == len(s.labels)):
        out.append(
            f"length mismatch: {len(s.tokens)} tokens, {len(s.boxes)} boxes, "
            f"{len(s.labels)} labels"
        )
    img = s.image
    if img.ndim != 3 or img.shape[2] != 3:
        out.append(f"image must be HxWx3, got shape {img.shape}")
    elif img.size and (not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1):
        out.append("image values outside [0, 1]")
    for i, box in enumerate(s.boxes):
        if len(box) != 4:
            out.append(f"box at index {i} has {len(box)} coordinates")
            continue
        x0, y0, x1, y1 = box
        if min(box) < 0 or max(box) > COORD_MAX:
            out.append(f"box at index {i} outside [0, {COORD_MAX}]")
        if x1 < x0:
            out.append(f"x1 < x0 at index {i}")
        if y1 < y0:
            out.append(f"y1 < y0 at index {i}")
        if x1 >= x0 and y1 >= y0 and (x1 == x0 or y1 == y0):
            out.append(f"zero-area box at index {i}")
    for i, lab in enumerate(s.labels):
        if lab < 0 or (num_label_ids is not None and lab >= num_label_ids):
            out.append(f"label id {lab} out of range at index {i}")
    for i, tok in enumerate(s.tokens):
        if tok < 0 or (vocab_size is not None and tok >= vocab_size):
            out.append(f"token id {tok} out of range at index {i}")
    return out


def _write_image(path: Path, image: np.ndarray) -> None:
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(IMAGE_MAGIC, h, w, c))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def _read_image(path: Path, doc_id: str) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorpusFormatError(doc_id, "image", f"missing file {path.name}") from None
    if len(raw) < _HEADER.size:
        raise CorpusFormatError(doc_id, "image", "truncated header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise CorpusFormatError(doc_id, "image", f"bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * h * w * c:
        raise CorpusFormatError(doc_id, "image", f"expected {h}x{w}x{c} float32 payload")
    image = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
    image.setflags(write=False)
    return image


def save_corpus(corpus: Sequence[DocumentSample], path: str | Path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "index.jsonl", "w", encoding="utf-8") as f:
        for s in corpus:
            rec = {
                "doc_id": s.doc_id,
                "tokens": list(s.tokens),
                "boxes": [list(b) for b in s.boxes],
                "labels": list(s.labels),
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
            _write_image(root / "images" / f"{s.doc_id}.bin", s.image)


def _int_list(rec: dict, key: str, record: str) -> list:
    if key not in rec:
        raise CorpusFormatError(record, key, "missing field")
    val = rec[key]
    if not isinstance(val, list):
        raise CorpusFormatError(record, key, "expected a list")
    return val


def _parse_record(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line {lineno}", "json", str(exc)) from None
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"line {lineno}", "json", "expected an object")
    doc_id = rec.get("doc_id")
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusFormatError(f"line {lineno}", "doc_id", "missing or not a string")
    tokens = _int_list(rec, "tokens", doc_id)
    boxes = _int_list(rec, "boxes", doc_id)
    labels = _int_list(rec, "labels", doc_id)
    for name, vals in (("tokens", tokens), ("labels", labels)):
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
            raise CorpusFormatError(doc_id, name, "expected integers")
    if len(boxes) != len(tokens):
        raise CorpusFormatError(doc_id, "boxes", f"{len(boxes)} boxes for {len(tokens)} tokens")
    if len(labels) != len(tokens):
        raise CorpusFormatError(doc_id, "labels", f"{len(labels)} labels for {len(tokens)} tokens")
    for i, b in enumerate(boxes):
        where = f"boxes[{i}]"
        if not (isinstance(b, list) and len(b) == 4 and all(isinstance(v, int) for v in b)):
            raise CorpusFormatError(doc_id, where, "expected four integers")
        x0, y0, x1, y1 = b
        if x1 < x0:
            raise CorpusFormatError(doc_id, where, "x1 < x0")
        if y1 < y0:
            raise CorpusFormatError(doc_id, where, "y1 < y0")
        if min(b) < 0 or max(b) > COORD_MAX:
            raise CorpusFormatError(doc_id, where, f"coordinate outside [0, {COORD_MAX}]")
        if x0 == x1 or y0 == y1:
            raise CorpusFormatError(doc_id, where, "zero-area box")
    return rec


def load_corpus(path: str | Path) -> list[DocumentSample]:
    root = Path(path)
    index = root / "index.jsonl"
    out, seen = [], set()
    with open(index, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = _parse_record(line, lineno)
            doc_id = rec["doc_id"]
            if doc_id in seen:
                raise CorpusFormatError(doc_id, "doc_id", "duplicate id")
            seen.add(doc_id)
            image = _read_image(root / "images" / f"{doc_id}.bin", doc_id)
            out.append(DocumentSample(
                doc_id=doc_id,
                image=image,
                tokens=tuple(rec["tokens"]),
                boxes=tuple(tuple(b) for b in rec["boxes"]),
                labels=tuple(rec["labels"]),
            ))
    return out


def corpus_stats(corpus: Sequence[DocumentSample]) -> dict:
    lengths = [len(s) for s in corpus]
    counts: dict[int, int] = {}
    for s in corpus:
        for lab in s.labels:
            counts[lab] = counts.get(lab, 0) + 1
    return {
        "num_docs": len(corpus),
        "tokens_total": int(sum(lengths)),
        "tokens_min": int(min(lengths)) if lengths else 0,
        "tokens_max": int(max(lengths)) if lengths else 0,
        "label_counts": {str(k): v for k, v in sorted(counts.items())},
    }

"""Byte-level corpora, fixed-length packing and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import stream

SEPARATOR = b"\x00"
VOCAB_SIZE = 256


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PackedDataset:
    tokens: np.ndarray  # flat, length n_sequences * seq_len
    seq_len: int
    n_sequences: int
    provenance: str = ""

    def __post_init__(self):
        if self.tokens.size != self.n_sequences * self.seq_len:
            raise DataError("token buffer length must equal n_sequences * seq_len")
        if self.tokens.size and int(self.tokens.max()) >= VOCAB_SIZE:
            raise DataError("token outside the byte vocabulary")

    def sequences(self) -> np.ndarray:
        return self.tokens.reshape(self.n_sequences, self.seq_len)

    def __len__(self) -> int:
        return self.n_sequences


def concat_documents(documents: Sequence[bytes]) -> bytes:
    return SEPARATOR.join(documents)


def pack_documents(documents: Sequence[bytes], seq_len: int, provenance: str = "") -> PackedDataset:
    """Join documents with 0x00 and cut into consecutive ``seq_len`` windows; the tail is dropped."""
    if seq_len < 2:
        raise DataError("seq_len must be at least 2")
    stream_bytes = concat_documents(documents)
    if not stream_bytes:
        raise DataError("empty corpus")
    n = len(stream_bytes) // seq_len
    if n == 0:
        raise DataError(f"corpus of {len(stream_bytes)} bytes is shorter than one window of {seq_len}")
    buf = np.frombuffer(stream_bytes, dtype=np.uint8)[: n * seq_len].astype(np.int64)
    return PackedDataset(tokens=buf, seq_len=seq_len, n_sequences=n, provenance=provenance)


def load_and_pack(paths: Sequence[str | Path], seq_len: int) -> PackedDataset:
    if not paths:
        raise DataError("no corpus files given")
    docs = []
    for p in paths:
        try:
            docs.append(Path(p).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from exc
    return pack_documents(docs, seq_len, provenance=",".join(str(p) for p in paths))


def batch_iter(dataset: PackedDataset, batch_sequences: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless ``(inputs, targets)`` batches of shape ``[batch, seq_len - 1]``.

    Sequence order is a fresh permutation each epoch, seeded by ``seed + epoch``;
    batches may straddle an epoch boundary.
    """
    if not 1 <= batch_sequences <= dataset.n_sequences:
        raise DataError(f"batch_sequences must be in [1, {dataset.n_sequences}]")
    seqs = dataset.sequences()
    epoch = 0
    pending = np.empty(0, dtype=np.int64)
    while True:
        while pending.size < batch_sequences:
            order = stream(seed + epoch, "data-order").permutation(dataset.n_sequences)
            pending = np.concatenate([pending, order])
            epoch += 1
        idx, pending = pending[:batch_sequences], pending[batch_sequences:]
        batch = seqs[idx]
        yield batch[:, :-1], batch[:, 1:]


# ---------------------------------------------------------------------------
# probe corpora


@dataclass(frozen=True)
class ProbeCorpora:
    text_corpus: list[bytes]
    arithmetic_corpus: list[bytes]
    mixed_corpus: list[bytes]


def bundled_text() -> list[bytes]:
    """The bundled natural-language documents, in file-name order."""
    root = resources.files("kept") / "corpus"
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".txt"))
    return [(root / n).read_bytes() for n in names]


def arithmetic_lines(rng: np.random.Generator, n_lines: int) -> list[str]:
    a = rng.integers(0, 100, n_lines)
    b = rng.integers(0, 100, n_lines)
    return [f"{x}+{y}={x + y}" for x, y in zip(a.tolist(), b.tolist())]


def make_probe_corpora(seed: int, n_arithmetic_docs: int = 60, lines_per_doc: int = 50) -> ProbeCorpora:
    """Bundled text, generated ``a+b=c`` arithmetic, and their concatenation."""
    rng = stream(seed, "arithmetic")
    arithmetic = [
        ("\n".join(arithmetic_lines(rng, lines_per_doc)) + "\n").encode("ascii") for _ in range(n_arithmetic_docs)
    ]
    text = bundled_text()
    return ProbeCorpora(text_corpus=text, arithmetic_corpus=arithmetic, mixed_corpus=text + arithmetic)


def split_documents(documents: Sequence[bytes], n_heldout: int) -> tuple[list[bytes], list[bytes]]:
    """Last ``n_heldout`` documents are held out."""
    if not 0 < n_heldout < len(documents):
        raise DataError("n_heldout must leave at least one document on each side")
    return list(documents[:-n_heldout]), list(documents[-n_heldout:])

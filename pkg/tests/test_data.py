import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kept.data import (
    DataError,
    PackedDataset,
    batch_iter,
    bundled_text,
    load_and_pack,
    make_probe_corpora,
    pack_documents,
    split_documents,
)


def test_pack_drops_tail():
    ds = pack_documents([b"abcdefghij"], 4)
    assert ds.n_sequences == 2
    assert ds.sequences().tolist() == [list(b"abcd"), list(b"efgh")]


def test_pack_joins_with_separator():
    ds = pack_documents([b"ab", b"cd"], 5)
    assert ds.sequences().tolist() == [[97, 98, 0, 99, 100]]


def test_pack_errors():
    with pytest.raises(DataError):
        pack_documents([], 4)
    with pytest.raises(DataError):
        pack_documents([b""], 4)
    with pytest.raises(DataError):
        pack_documents([b"abc"], 4)
    with pytest.raises(DataError):
        pack_documents([b"abcdef"], 1)


def test_packed_dataset_validates_buffer():
    with pytest.raises(DataError):
        PackedDataset(np.zeros(7, np.int64), 4, 2)


def test_load_and_pack(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_bytes(b"hello")
    b.write_bytes(b"world")
    ds = load_and_pack([a, b], 11)
    assert bytes(ds.tokens.astype(np.uint8)) == b"hello\x00world"
    with pytest.raises(DataError):
        load_and_pack([tmp_path / "missing.txt"], 4)
    with pytest.raises(DataError):
        load_and_pack([], 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.binary(min_size=0, max_size=60), min_size=1, max_size=6), st.integers(2, 17))
def test_pack_is_a_prefix_of_the_joined_stream(docs, seq_len):
    joined = b"\x00".join(docs)
    if len(joined) < seq_len:
        with pytest.raises(DataError):
            pack_documents(docs, seq_len)
        return
    ds = pack_documents(docs, seq_len)
    assert ds.n_sequences == len(joined) // seq_len
    assert bytes(ds.tokens.astype(np.uint8)) == joined[: ds.n_sequences * seq_len]


def _ds(n=10, L=5):
    return PackedDataset(np.arange(n * L, dtype=np.int64) % 256, L, n)


def test_batches_shift_by_one():
    inputs, targets = next(batch_iter(_ds(), 3, seed=0))
    assert inputs.shape == targets.shape == (3, 4)
    np.testing.assert_array_equal(inputs[:, 1:], targets[:, :-1])


def test_batches_deterministic_and_seed_dependent():
    take = lambda seed: [next(it)[0].tolist() for it in [batch_iter(_ds(), 3, seed)] for _ in range(8)]  # noqa: E731
    assert take(1) == take(1)
    assert take(1) != take(2)


def test_each_epoch_visits_every_sequence_once():
    it = batch_iter(_ds(n=6), 2, seed=3)
    first_epoch = np.concatenate([next(it)[0][:, 0] for _ in range(3)])
    assert sorted(first_epoch.tolist()) == [i * 5 for i in range(6)]


def test_batch_size_bounds():
    with pytest.raises(DataError):
        next(batch_iter(_ds(n=3), 4, 0))


def test_probe_corpora():
    corpora = make_probe_corpora(seed=0)
    assert corpora.text_corpus == bundled_text()
    assert corpora.mixed_corpus == corpora.text_corpus + corpora.arithmetic_corpus
    equation = re.compile(rb"^\d+\+\d+=\d+$", re.M)
    for doc in corpora.text_corpus:
        assert not equation.search(doc)
    n_lines = 0
    for doc in corpora.arithmetic_corpus:
        for line in doc.decode().splitlines():
            a, rest = line.split("+")
            b, c = rest.split("=")
            assert int(a) < 100 and int(b) < 100 and int(a) + int(b) == int(c)
            n_lines += 1
    assert n_lines == 60 * 50
    assert make_probe_corpora(seed=0) == corpora
    assert make_probe_corpora(seed=1).arithmetic_corpus != corpora.arithmetic_corpus


def test_bundled_text_is_plain_ascii_prose():
    docs = bundled_text()
    assert len(docs) >= 10
    for doc in docs:
        assert b"\x00" not in doc
        doc.decode("ascii")


def test_split_documents():
    train, held = split_documents([b"a", b"b", b"c"], 1)
    assert (train, held) == ([b"a", b"b"], [b"c"])
    with pytest.raises(DataError):
        split_documents([b"a"], 1)

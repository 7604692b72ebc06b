import numpy as np
import pytest
from hypothesis import given, strategies as st

from biseq import tensor as T
from biseq.combinators import ModelSpec
from biseq.embed import (
    PAD_ID,
    SEP_ID,
    UNK_ID,
    Vocabulary,
    build_vocab,
    load_pretrained,
    lookup,
    random_table,
    tokenize,
)
from biseq.errors import FormatError, InputError, ParseError
from biseq.train import SequencePair, TrainConfig, train_model


def test_tokenize_simple():
    assert tokenize("A soccer game") == ["a", "soccer", "game"]


def test_tokenize_punctuation():
    assert tokenize("guns, crime.") == ["guns", ",", "crime", "."]


def test_tokenize_empty():
    assert tokenize("") == []
    assert tokenize("   ") == []


def test_tokenize_keeps_inner_punctuation():
    assert tokenize('"don\'t!"') == ['"', "don't", "!", '"']


def test_build_vocab_order():
    v = build_vocab([tokenize("a a b")])
    assert v.itos == ["<pad>", "<unk>", "<sep>", "a", "b"]
    assert (v.id_of("<pad>"), v.id_of("<unk>"), v.id_of("<sep>")) == (PAD_ID, UNK_ID, SEP_ID)


def test_build_vocab_min_count():
    v = build_vocab([tokenize("a a b")], min_count=2)
    assert "b" not in v
    assert v.encode(["b", "a"]) == [UNK_ID, 3]


def test_build_vocab_ties_lexicographic():
    assert build_vocab([["c", "b", "a", "c"]]).words() == ["c", "a", "b"]


def test_build_vocab_empty():
    assert len(build_vocab([])) == 3


def test_build_vocab_bad_min_count():
    with pytest.raises(InputError):
        build_vocab([], min_count=0)


@given(st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), max_size=30))
def test_token_round_trip(words):
    v = build_vocab([words])
    for i in range(3, len(v)):
        assert v.id_of(v.token_of(i)) == i


def write(tmp_path, text, name="vec.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_pretrained_rows_copied(tmp_path):
    v = Vocabulary(["cat", "dog"])
    p = write(tmp_path, "2 3\ncat 0.5 -1 2\nbird 1 1 1\n")
    table, matched = load_pretrained(p, v, seed=3)
    assert matched == 1
    np.testing.assert_array_equal(table.matrix[v.id_of("cat")], [0.5, -1, 2])
    assert np.all(np.abs(table.matrix[v.id_of("dog")]) <= 0.25)
    assert not table.matrix[PAD_ID].any()


def test_pretrained_without_header(tmp_path):
    v = Vocabulary(["cat"])
    table, matched = load_pretrained(write(tmp_path, "cat 1 2\n"), v)
    assert table.dim == 2 and matched == 1


def test_pretrained_reproducible(tmp_path):
    v = Vocabulary(["cat", "dog", "emu"])
    p = write(tmp_path, "cat 1 2 3\n")
    a, _ = load_pretrained(p, v, seed=5)
    b, _ = load_pretrained(p, v, seed=5)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_pretrained_inconsistent_dims(tmp_path):
    with pytest.raises(FormatError):
        load_pretrained(write(tmp_path, "a 1 2\nb 1 2 3\n"), Vocabulary(["a"]))


def test_pretrained_malformed_line(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_pretrained(write(tmp_path, "a 1 2\nb 1 x\n"), Vocabulary(["a"]))


def test_lookup_pad_is_zero(rng):
    table = T.parameter(random_table(Vocabulary(["a", "b"]), 4, rng).matrix)
    np.testing.assert_array_equal(lookup(table, np.array([PAD_ID])).value, np.zeros((1, 4)))


def test_lookup_repeated_ids(rng):
    table = T.parameter(rng.normal(size=(6, 3)))
    out = lookup(table, np.array([3, 3])).value
    np.testing.assert_array_equal(out[0], out[1])


def test_lookup_gradient_rows(rng):
    table = T.parameter(rng.normal(size=(6, 3)))
    with T.GraphTape() as tape:
        loss = T.sum_all(lookup(table, np.array([3, 4])))
    T.backward(loss, tape)
    want = np.zeros((6, 3))
    want[3] = want[4] = 1
    np.testing.assert_array_equal(table.grad, want)
    err = T.finite_difference_check(lambda: T.sum_all(lookup(table, np.array([3, 4]))), [table])
    assert err < 1e-9


def test_lookup_out_of_range(rng):
    with pytest.raises(InputError):
        lookup(T.parameter(rng.normal(size=(4, 2))), np.array([4]))


def test_pad_row_stays_zero_after_training():
    data = [SequencePair("a b", "c d e", i % 2) for i in range(8)]
    res = train_model(ModelSpec(rnn_size=4, embed_dim=4), data, data,
                      TrainConfig(max_epochs=3, patience=3, batch_size=3))
    assert not res.model.embedding.value[PAD_ID].any()

import itertools

import pytest
import torch

from esica.errors import ConfigurationError, FormatError, InputError
from esica.pipeline.data import class_prompts
from esica.text import TableEmbedder, ToyEmbedder, dump_table, embed_toy, load_table, tokenize


def test_embed_toy_deterministic_and_unit_norm():
    a, b = embed_toy("left kidney"), embed_toy("left kidney")
    assert torch.equal(a.vector, b.vector)
    assert a.vector.norm().item() == pytest.approx(1.0)
    assert a.source == "toy" and a.d_text == 64


def test_bag_of_words():
    assert torch.equal(embed_toy("left kidney").vector, embed_toy("kidney left").vector)
    assert torch.equal(embed_toy("Left, KIDNEY").vector, embed_toy("left kidney").vector)


def test_dataset_prompts_are_separable():
    prompts = [p for ps in class_prompts().values() for p in ps]
    assert len(prompts) == 8
    vecs = [embed_toy(p).vector for p in prompts]
    worst = max(float(a @ b) for a, b in itertools.combinations(vecs, 2))
    assert worst < 0.9


def test_empty_prompt_rejected():
    with pytest.raises(InputError):
        embed_toy("  ,, ")
    assert tokenize("A-b c") == ["a", "b", "c"]


def test_table_round_trip(tmp_path):
    g = torch.Generator().manual_seed(0)
    entries = {"liver": torch.randn(64, generator=g, dtype=torch.float64),
               "left kidney": torch.randn(64, generator=g, dtype=torch.float64)}
    path = tmp_path / "emb.txt"
    dump_table(entries, path)
    table = load_table(path)
    assert len(table) == 2
    for k, v in entries.items():
        assert torch.equal(table[k].vector, v)
    raw = path.read_bytes()
    dump_table({k: e.vector for k, e in table.items()}, path)
    assert path.read_bytes() == raw


def test_table_duplicate_key(tmp_path):
    path = tmp_path / "dup.txt"
    path.write_text('ESICA-EMB v1 2\n"liver"\t1.0 2.0\n"liver"\t3.0 4.0\n')
    with pytest.raises(FormatError, match="duplicate prompt 'liver'"):
        load_table(path)


@pytest.mark.parametrize("body", [
    "WRONG v1 2\n",
    'ESICA-EMB v1 2\n"a"\t1.0\n',
    'ESICA-EMB v1 2\na\t1.0 2.0\n',
    'ESICA-EMB v1 2\n"a"\t1.0 nan\n',
    "",
])
def test_table_malformed(tmp_path, body):
    path = tmp_path / "bad.txt"
    path.write_text(body)
    with pytest.raises(FormatError):
        load_table(path)


def test_table_embedder_lookup_and_width(tmp_path):
    path = tmp_path / "t.txt"
    dump_table({"x": torch.ones(4)}, path)
    emb = TableEmbedder.from_file(path)
    assert emb.embed("x").source == "table"
    with pytest.raises(InputError):
        emb.embed("y")
    with pytest.raises(ConfigurationError):
        TableEmbedder.from_file(path, d_text=8)


def test_toy_embedder_width():
    assert ToyEmbedder(16).embed("liver").d_text == 16

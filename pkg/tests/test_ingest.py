import json

import pytest

import ingest
from aeg_graph import entity_id_for
from errors import BuildError, ExtractionError
from ingest import Chunk, CorpusDocument, ExtractionRecord


def test_chunk_windows_overlap():
    doc = CorpusDocument("d", " ".join(f"w{i}" for i in range(10)))
    pieces = ingest.chunk(doc, size_tokens=4, overlap_tokens=1)
    assert [(p.start_token, p.end_token) for p in pieces] == [(0, 4), (3, 7), (6, 10)]
    assert pieces[1].text == "w3 w4 w5 w6"
    assert doc.text[pieces[1].char_start:].startswith("w3 ")
    assert [p.index for p in pieces] == [0, 1, 2]


@pytest.mark.parametrize("tokens,size,overlap,expected", [
    (300, 256, 32, [(0, 256), (224, 300)]),
    (25, 10, 0, [(0, 10), (10, 20), (20, 25)]),
    (256, 256, 32, [(0, 256)]),
])
def test_chunk_window_boundaries(tokens, size, overlap, expected):
    doc = CorpusDocument("d", " ".join(f"t{i}" for i in range(tokens)))
    pieces = ingest.chunk(doc, size_tokens=size, overlap_tokens=overlap)
    assert [(p.start_token, p.end_token) for p in pieces] == expected
    assert [len(p.text.split()) for p in pieces] == [end - start for start, end in expected]


def test_chunk_keeps_original_spacing_and_short_documents_whole():
    doc = CorpusDocument("d", "  alpha   beta\ngamma  ")
    (piece,) = ingest.chunk(doc)
    assert piece.text == "alpha   beta\ngamma"
    assert piece.char_start == 2
    with pytest.raises(ValueError):
        ingest.chunk(doc, size_tokens=4, overlap_tokens=4)


def test_load_corpus(tmp_path, corpus):
    assert [d.doc_id for d in corpus] == ["doc_a", "doc_b", "doc_c"]
    assert corpus[0].metadata == {"title": "Metformin"}

    dup = tmp_path / "dup.jsonl"
    dup.write_text('{"doc_id": "x", "text": "a"}\n{"doc_id": "x", "text": "b"}\n')
    with pytest.raises(BuildError, match="duplicate"):
        ingest.load_corpus(str(dup))
    empty = tmp_path / "empty.jsonl"
    empty.write_text('{"doc_id": "x", "text": "   "}\n')
    with pytest.raises(BuildError):
        ingest.load_corpus(str(empty))
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"doc_id": "x"\n')
    with pytest.raises(BuildError, match="line 1"):
        ingest.load_corpus(str(broken))


def test_extract_adopts_entities_named_only_in_atoms(corpus, gateway):
    (piece,) = ingest.chunk(corpus[2])
    record = ingest.extract(piece, gateway)
    assert "long-acting insulin" in record.entities
    assert len(record.atoms) == 3
    assert record.atoms[1]["span"] == [74, 116]
    assert ("FDA", "approved", "insulin glargine") in record.triples


def test_extract_without_atomization_yields_one_atom_per_chunk(corpus, gateway):
    (piece,) = ingest.chunk(corpus[0])
    record = ingest.extract(piece, gateway, atomize=False)
    assert [a["text"] for a in record.atoms] == [corpus[0].text]
    assert set(record.atoms[0]["entities"]) == set(record.entities)


def test_extract_wraps_gateway_failures(make_gateway):
    gateway = make_gateway([{"template": "ner", "match": {}, "response": {"named_entities": ["A"]}}])
    with pytest.raises(ExtractionError) as err:
        ingest.extract(Chunk("d", 0, "A did things.", 0, 3), gateway)
    assert err.value.doc_id == "d"


def test_extraction_record_validation_and_fixture_replay(make_gateway):
    record = ExtractionRecord("d", 0, ["A"], [{"text": "A met B.", "entities": ["A", "B"], "span": None}], [])
    with pytest.raises(ValueError, match="'B'"):
        record.validate()

    good = ExtractionRecord("d", 0, ["A", "B"], [{"text": "A met B.", "entities": ["A", "B"], "span": [0, 8]}],
                            [("A", "met", "B")])
    replayed = ingest.extract(Chunk("d", 0, "A met B.", 0, 3), make_gateway(good.to_fixture_entries("A met B.")))
    assert replayed.to_dict() == good.to_dict()


def test_build_graph_on_fixture_corpus(corpus, gateway, encoder, config):
    graph, report = ingest.build_graph(corpus, gateway, encoder, config)
    assert graph.frozen
    assert (report.documents, report.chunks) == (3, 3)
    assert report.failed_chunks == []
    assert report.stats["entities"] == 10
    assert report.stats["atoms"] == 8
    assert report.stats["containment"] == 17
    assert report.stats["related"] == 8
    assert report.usage["by_stage"]["construction"]["calls"] == 6

    diabetes = graph.entities[entity_id_for("type 2 diabetes")]
    assert diabetes.canonical_name == "type 2 diabetes"
    assert diabetes.mention_count == 4

    atom = graph.atoms["doc_a:0:1"]
    assert atom.text == "Metformin lowers hepatic glucose production."
    start, end = atom.span_hint
    assert corpus[0].text[start:end] == atom.text
    assert graph.hyperparameters["encoder"] == "hashing"
    assert graph.hyperparameters["synonymy_edge_sim_threshold"] == 0.8
    json.dumps(report.to_dict())


def test_build_graph_skips_failed_chunks(corpus, gateway, encoder, config):
    extra = CorpusDocument("doc_z", "Nothing in the fixtures matches this passage.")
    graph, report = ingest.build_graph(corpus + [extra], gateway, encoder, config)
    assert report.failed_chunks == [{"doc_id": "doc_z", "chunk_index": 0, "error": report.failed_chunks[0]["error"]}]
    assert report.failed_documents == ["doc_z"]
    assert "no mock fixture for template 'ner'" in report.failed_chunks[0]["error"]
    assert len(graph.atoms) == 8


def test_build_graph_fails_when_nothing_is_extracted(gateway, encoder, config):
    with pytest.raises(BuildError):
        ingest.build_graph([CorpusDocument("doc_z", "Unknown passage.")], gateway, encoder, config)
    with pytest.raises(BuildError):
        ingest.build_graph([], gateway, encoder, config)

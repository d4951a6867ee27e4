import base64
import json

import numpy as np
import pytest

from ufo.corpus import (
    COLORS,
    CONTRADICT,
    ENTAIL,
    NEUTRAL,
    SHAPES,
    CorpusFormatError,
    IntegrityError,
    Scene,
    UnsupportedSourceError,
    caption_for,
    corpus_vocabulary,
    generate_corpus,
    load_corpus,
    make_task_sets,
    save_corpus,
    snli_label,
    split_of,
    verify,
)


@pytest.fixture(scope="module")
def big():
    return generate_corpus(1000, seed=0, multi_caption_prob=0.3, size=16)


@pytest.fixture(scope="module")
def tasks(big):
    return make_task_sets(big, seed=0)


def test_deterministic_under_seed(tmp_path):
    a, b = generate_corpus(20, seed=3, multi_caption_prob=0.5), generate_corpus(20, seed=3, multi_caption_prob=0.5)
    save_corpus(a, tmp_path / "a.jsonl")
    save_corpus(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_corpus(20, seed=4) != a


def test_single_caption_corpus_gives_permutation_delta():
    scenes = generate_corpus(30, seed=1, multi_caption_prob=0.0)
    owners = [s.id for s in scenes for _ in s.captions]
    delta = np.array([[o == s.id for o in owners] for s in scenes])
    assert (delta.sum(0) == 1).all() and (delta.sum(1) == 1).all()


def test_multi_caption_count(big):
    n2 = sum(len(s.captions) == 2 for s in big)
    assert 260 <= n2 <= 340
    assert all(len(s.captions) in (1, 2) for s in big)


def test_paraphrase_is_word_order_permutation(big):
    for s in big:
        if len(s.captions) == 2:
            a, b = s.captions
            assert a != b
            assert sorted(a.split(" and ")) == sorted(b.split(" and "))


def test_scene_invariants(big):
    for s in big[:200]:
        assert s.image.dtype == np.float32 and s.image.shape == (16, 16, 3)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.captions[0] == caption_for(s.objects)
        assert 2 <= len(s.objects) <= 3
        assert len({o.cell for o in s.objects}) == len(s.objects)


def test_captions_in_closed_vocabulary(big, vocab):
    for s in big:
        for c in s.captions:
            ids, words = vocab.encode(c)
            assert len(ids) == len(c.split())
            assert all(i in vocab.regular_ids for i in ids)
    for word in [*COLORS, *SHAPES]:
        assert len(vocab.encode(word)[0]) == 1


def test_generate_requires_positive_n():
    with pytest.raises(ValueError):
        generate_corpus(0)


def test_file_round_trip(tmp_path):
    scenes = generate_corpus(7, seed=2, multi_caption_prob=0.5)
    save_corpus(scenes, tmp_path / "c.jsonl")
    assert load_corpus(tmp_path / "c.jsonl") == scenes


def test_record_layout(tmp_path):
    scenes = generate_corpus(1, seed=0, size=8)
    save_corpus(scenes, tmp_path / "c.jsonl")
    rec = json.loads((tmp_path / "c.jsonl").read_text())
    assert {"id", "pixels", "h", "w", "captions"} <= set(rec)
    raw = np.frombuffer(base64.b64decode(rec["pixels"]), dtype="<f4")
    assert np.array_equal(raw.reshape(8, 8, 3), scenes[0].image)


def test_length_mismatch_names_id(tmp_path):
    rec = {"id": 42, "pixels": base64.b64encode(np.zeros(10, "<f4").tobytes()).decode(), "h": 2, "w": 2,
           "captions": ["a red square"]}
    (tmp_path / "bad.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(IntegrityError, match="42"):
        load_corpus(tmp_path / "bad.jsonl")


def test_malformed_line_number(tmp_path):
    good = generate_corpus(1, seed=0, size=4)
    save_corpus(good, tmp_path / "m.jsonl")
    with open(tmp_path / "m.jsonl", "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(tmp_path / "m.jsonl")


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_corpus(tmp_path / "e.jsonl") == []


def test_missing_metadata_rejected():
    s = generate_corpus(3, seed=0, size=4)
    stripped = [Scene(x.id, x.image, x.captions) for x in s]
    with pytest.raises(UnsupportedSourceError):
        make_task_sets(stripped)


def test_split_fractions_and_determinism(big):
    splits = [split_of(s.id) for s in big]
    assert splits == [split_of(s.id) for s in big]
    frac = {k: splits.count(k) / len(splits) for k in ("train", "val", "test")}
    assert abs(frac["train"] - 0.8) < 0.05 and abs(frac["val"] - 0.1) < 0.04


def test_task_sets_deterministic(big, tasks):
    again = make_task_sets(big, seed=0)
    for t in tasks:
        for split in tasks[t]:
            assert [(e.scene_ids, e.text, e.label) for e in tasks[t][split]] == \
                   [(e.scene_ids, e.text, e.label) for e in again[t][split]]


def test_verifier_agrees_everywhere(big, tasks):
    by_id = {s.id: s for s in big}
    for t, splits in tasks.items():
        for split, examples in splits.items():
            assert examples, (t, split)
            assert all(verify(t, e, by_id) for e in examples)
            assert all(split_of(e.scene_ids[0]) == split for e in examples)


def test_vqa_questions_are_answerable(big, tasks):
    by_id = {s.id: s for s in big}
    for e in tasks["vqa"]["train"]:
        scene = by_id[e.scene_ids[0]]
        if e.text.startswith("what color is the "):
            shape = e.text.split()[4]
            assert [o.color for o in scene.objects if o.shape == shape] == [e.label]


def test_nlvr2_balance(tasks):
    labels = [e.label for split in tasks["nlvr2"].values() for e in split]
    assert abs(np.mean(labels) - 0.5) <= 0.05


def test_snli_all_labels_present(tasks):
    labels = {e.label for e in tasks["snli"]["train"]}
    assert labels == {ENTAIL, NEUTRAL, CONTRADICT}


def test_snli_label_rules():
    from ufo.corpus import SceneObject
    s = Scene(0, np.zeros((4, 4, 3), np.float32), [""], [SceneObject("square", "red", 0)])
    assert snli_label(s, "there is a red square") == ENTAIL
    assert snli_label(s, "there is a blue square") == CONTRADICT
    assert snli_label(s, "there is a blue circle") == NEUTRAL


def test_vocabulary_covers_templates(tasks):
    v = corpus_vocabulary()
    for t in ("vqa", "nlvr2", "snli"):
        for e in tasks[t]["train"][:200]:
            assert v.unk_id not in v.encode(e.text)[0]

"""Synthetic paired corpus: determinism, class separability, keyword signal."""

import numpy as np
import pytest

from uvlp.corpus import (NOISE_STD, PROMPT_TEMPLATES, class_keyword,
                         class_prompts, generate_corpus, load_corpus,
                         save_corpus)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(100, 5, (1, 32, 32), seed=1)


def test_generation_is_byte_identical_across_runs(corpus):
    again = generate_corpus(100, 5, (1, 32, 32), seed=1)
    for a, b in zip(corpus, again):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.words == b.words
        assert a.class_id == b.class_id


def test_different_seed_changes_corpus(corpus):
    other = generate_corpus(100, 5, (1, 32, 32), seed=2)
    assert any(a.image.tobytes() != b.image.tobytes()
               for a, b in zip(corpus, other))


def test_images_live_in_unit_range(corpus):
    for p in corpus:
        assert p.image.min() >= 0.0 and p.image.max() <= 1.0
        assert p.image.shape == (1, 32, 32)


def test_class_ids_round_robin(corpus):
    assert [p.class_id for p in corpus[:10]] == [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]


def test_class_pixel_separation_exceeds_noise(corpus):
    mean0 = np.mean([p.image for p in corpus if p.class_id == 0], axis=0)
    mean1 = np.mean([p.image for p in corpus if p.class_id == 1], axis=0)
    assert np.abs(mean0 - mean1).mean() > NOISE_STD


def test_each_class_has_exclusive_shared_keyword(corpus):
    by_class = {}
    for p in corpus:
        by_class.setdefault(p.class_id, []).append(set(p.words))
    for cid, sets in by_class.items():
        shared = set.intersection(*sets)
        others = set().union(*(w for c2, ss in by_class.items() if c2 != cid
                               for w in ss))
        exclusive = shared - others
        assert exclusive, f"class {cid} lacks an exclusive keyword"
        assert class_keyword(cid) in exclusive


def test_keyword_classifier_recovers_labels_exactly(corpus):
    keywords = {cid: class_keyword(cid) for cid in range(5)}
    for p in corpus:
        hits = [cid for cid, kw in keywords.items() if kw in p.words]
        assert hits == [p.class_id]


def test_text_property_joins_words(corpus):
    p = corpus[0]
    assert p.text == " ".join(p.words)
    assert p.text.islower()


def test_class_prompts_mention_keyword():
    assert len(PROMPT_TEMPLATES) >= 2
    for cid in (0, 3, 12):
        prompts = class_prompts(cid)
        assert len(prompts) == len(PROMPT_TEMPLATES)
        for words in prompts:
            assert class_keyword(cid) in words


def test_keyword_extends_beyond_builtin_list():
    assert class_keyword(97) == "marker97"


def test_generate_corpus_validation():
    with pytest.raises(ValueError):
        generate_corpus(10, 1)
    with pytest.raises(ValueError):
        generate_corpus(10, 3, (1, 2, 32))
    with pytest.raises(ValueError):
        generate_corpus(10, 3, (0, 32, 32))


def test_save_load_roundtrip(tmp_path, corpus):
    save_corpus(tmp_path, corpus, seed=1, num_classes=5)
    loaded, meta = load_corpus(tmp_path)
    assert meta["num_pairs"] == len(corpus)
    assert meta["num_classes"] == 5
    assert len(loaded) == len(corpus)
    for a, b in zip(corpus, loaded):
        assert b.class_id == a.class_id
        assert b.words == a.words
        # storage is float32; tolerance reflects the rounding
        assert np.allclose(a.image, b.image, rtol=0, atol=1e-6)

import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rellax.data import InteractionSample, Item, User
from rellax.numerics import ContractError, Mlp2
from rellax.prompt import (
    TEMPLATES,
    PromptTemplate,
    Vocabulary,
    assemble_soft_prompt,
    detokenize,
    render_hard_prompt,
    render_item_description,
    render_mention,
    render_profile,
    spa_project,
    tokenize,
    tokenize_sample,
)
from rellax.subr import SemanticIndex

ML = TEMPLATES["movielens"]
USER = User(7, (("gender", "female"), ("age", "25-34"), ("occupation", "artist"), ("zip", "55455")))


def movie(i, title, *genres):
    return Item(i, title, (("genres", tuple(genres)),))


HISTORY = (
    (movie(1, "Toy Story (1995)", "Animation", "Comedy"), 1),
    (movie(2, "Heat (1995)", "Action"), 0),
    (movie(3, "Big Fish (2003)", "Drama"), 1),
    (movie(4, "Alien (1979)", "Horror", "Sci-Fi"), 0),
)
TARGET = movie(5, "Aliens (1986)", "Sci-Fi")


def sample(history=HISTORY, target=TARGET, label=1):
    return InteractionSample(USER, history, target, label, 100, "train")


def test_item_description_substitution():
    item = movie(1, "Toy Story (1995)", "Animation", "Comedy")
    want = "Here is a movie. Its title is Toy Story (1995). Its genres are Animation, Comedy."
    assert render_item_description(item, ML) == want
    assert render_item_description(item, ML) == render_item_description(item, ML)


def test_empty_genres_render_unknown():
    assert render_item_description(movie(9, "X", *()), ML).endswith("Its genres are unknown.")


def test_missing_placeholder_field():
    with pytest.raises(ContractError, match="author"):
        render_item_description(movie(1, "X", "Drama"), TEMPLATES["bookcrossing"])


def test_template_unknown_key():
    with pytest.raises(ContractError):
        PromptTemplate.from_dict({**ML.to_dict(), "colour": "x"})


def test_template_file_roundtrip(tmp_path):
    import yaml

    path = tmp_path / "t.yaml"
    path.write_text(yaml.safe_dump(ML.to_dict()))
    assert PromptTemplate.load(path) == ML


def test_rendered_length_equals_clause_lengths():
    s = sample()
    rp = render_hard_prompt(s, ML, "recent", 3)
    clauses = [render_profile(USER, ML), ML.history_header]
    for item, y in HISTORY[1:]:
        clauses.append(f"{render_mention(item, ML)}, {'liked' if y else 'disliked'};")
    clauses.append(f"The new movie is {render_mention(TARGET, ML)}.")
    clauses.append(ML.question)
    assert len(rp.text) == sum(map(len, clauses)) + len(clauses) - 1
    assert rp.text == " ".join(clauses)


def test_spans_cover_item_mentions_in_order():
    rp = render_hard_prompt(sample(), ML, "recent", 4)
    got = [rp.text[a:b] for a, b in rp.spans]
    assert got == [render_mention(it, ML) for it, _ in HISTORY] + [render_mention(TARGET, ML)]
    starts = [a for a, _ in rp.spans]
    assert starts == sorted(starts)
    assert all(b1 <= a2 for (_, b1), (a2, _) in zip(rp.spans, rp.spans[1:]))


def test_no_id_fields_rendered():
    text = render_hard_prompt(sample(), ML, "recent", 4).text
    assert "55455" not in text and " 7 " not in text


def test_recent_truncation_and_saturation():
    s = sample()
    rp = render_hard_prompt(s, ML, "recent", 2)
    assert [it.item_id for it in rp.items] == [3, 4, 5]
    # K larger than the history renders everything
    assert [it.item_id for it in render_hard_prompt(s, ML, "recent", 10).items] == [1, 2, 3, 4, 5]


def test_saturated_modes_coincide():
    index = SemanticIndex({i: np.eye(6)[i] for i in range(1, 6)})
    s = sample()
    a = render_hard_prompt(s, ML, "recent", 4)
    b = render_hard_prompt(s, ML, "retrieved", 4, index)
    assert a.text == b.text


def test_retrieved_k1_picks_duplicate_of_target():
    hist = HISTORY[:2] + ((TARGET, 1),) + HISTORY[2:]
    vecs = {1: [1.0, 0.0], 2: [0.0, 1.0], 3: [1.0, 1.0], 4: [-1.0, 0.2], 5: [0.3, -1.0]}
    index = SemanticIndex({k: np.array(v) for k, v in vecs.items()})
    rp = render_hard_prompt(sample(history=hist), ML, "retrieved", 1, index)
    assert [it.item_id for it in rp.items] == [5, 5]


def test_retrieved_mode_needs_index_and_k():
    with pytest.raises(ContractError):
        render_hard_prompt(sample(), ML, "retrieved", 2)
    with pytest.raises(ContractError):
        render_hard_prompt(sample(), ML, "recent", 0)
    with pytest.raises(ContractError):
        render_hard_prompt(sample(history=()), ML, "recent", 2)


def test_judgments_follow_history_labels():
    text = render_hard_prompt(sample(), ML, "recent", 4).text
    assert "Toy Story (1995) (Animation, Comedy), liked;" in text
    assert "Heat (1995) (Action), disliked;" in text


# -- tokenizer -----------------------------------------------------------------

VOCAB = Vocabulary.build(["Big Fish is here .", "Yes No"])


def test_yes_no_atomic():
    v = Vocabulary.build(["hello"])
    assert tokenize("Yes", v, add_bos=False).ids.tolist() == [v.yes_id]
    assert tokenize("No", v, add_bos=False).ids.tolist() == [v.no_id]
    assert len(v) >= 5 and v.yes_id != v.no_id


def test_two_word_title_span():
    tp = tokenize("Big Fish is here .", VOCAB, [(0, 8)])
    assert tp.spans == [(1, 3)]
    assert tp.last_positions == [2]


def test_unknown_word_maps_to_unk():
    assert tokenize("Jaws", VOCAB, add_bos=False).ids.tolist() == [VOCAB.unk_id]


def test_vocab_file_roundtrip(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == VOCAB
    with pytest.raises(ContractError):
        Vocabulary(["a", "b"])


words = st.text(alphabet="abcdefgh.,;:()", min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(st.lists(words, min_size=1, max_size=12))
def test_detokenize_roundtrip(parts):
    text = " ".join(parts)
    vocab = Vocabulary.build([text])
    back = detokenize(tokenize(text, vocab).ids, vocab)
    # normalized whitespace: tokens separated by exactly one space
    assert back.split() == re.findall(r"\w+|[^\w\s]", text)


def test_tokenized_sample_spans_and_answer(tiny):
    s = tiny.train[0]
    tp = tokenize_sample(s, tiny.template, tiny.lm.vocab, "recent", 3)
    assert len(tp.spans) == min(3, len(s.history)) + 1
    assert tp.items[-1] is s.target
    assert tp.answer_id == (tiny.lm.vocab.yes_id if s.label else tiny.lm.vocab.no_id)
    title_tokens = tiny.lm.vocab.tokens
    a, b = tp.spans[-1]
    assert " ".join(title_tokens[i] for i in tp.ids[a:b]).startswith(
        " ".join(re.findall(r"\w+|[^\w\s]", s.target.title))
    )


# -- soft prompts --------------------------------------------------------------


def test_zero_items_no_insertion(rng):
    tp = tokenize("Big Fish is here .", VOCAB)
    table = rng.normal(size=(len(VOCAB), 4))
    out = assemble_soft_prompt(tp, table, None)
    assert np.array_equal(out.embeds, table[tp.ids])


def test_single_item_index_arithmetic(rng):
    tp = tokenize("Big Fish is here . Big Fish is here .", VOCAB, add_bos=False)
    tp.spans = [(3, 5)]  # last token at index 4 of 10
    assert tp.length == 10
    table = rng.normal(size=(len(VOCAB), 4))
    soft = rng.normal(size=(1, 4))
    out = assemble_soft_prompt(tp, table, soft)
    assert out.embeds.shape == (11, 4)
    assert np.array_equal(out.embeds[5], soft[0])
    assert out.soft_positions == [5] and out.spans == [(3, 6)]


def test_splice_inverse(tiny, rng):
    tp = tokenize_sample(tiny.train[0], tiny.template, tiny.lm.vocab, "recent", 4)
    table = tiny.lm.params["tok_emb"]
    soft = rng.normal(size=(len(tp.spans), table.shape[1]))
    out = assemble_soft_prompt(tp, table, soft)
    assert len(out.embeds) == tp.length + len(tp.spans)
    assert np.array_equal(np.delete(out.embeds, out.soft_positions, axis=0), table[tp.ids])
    assert np.array_equal(out.embeds[out.soft_positions], soft)
    # each spliced span ends with its soft token
    assert [e - 1 for _, e in out.spans] == out.soft_positions


def test_soft_token_count_mismatch(rng):
    tp = tokenize("Big Fish is here .", VOCAB, [(0, 8)])
    with pytest.raises(ContractError):
        assemble_soft_prompt(tp, rng.normal(size=(len(VOCAB), 4)), rng.normal(size=(2, 4)))
    with pytest.raises(ContractError):
        assemble_soft_prompt(tp, rng.normal(size=(len(VOCAB), 4)), rng.normal(size=(1, 3)))


def test_spa_projection(rng):
    e = rng.normal(size=(3, 4))
    assert np.array_equal(spa_project(Mlp2.zeros(4, 5, 6), e), np.zeros((3, 6)))
    proj = Mlp2.init(rng, 4, 5, 6)
    e[2] = e[0]
    v = spa_project(proj, e)
    assert np.array_equal(v[0], v[2])
    with pytest.raises(ContractError):
        spa_project(proj, rng.normal(size=(2, 3)))

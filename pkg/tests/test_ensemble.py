from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from audiocap import captioner as cap
from audiocap.core.checkpoint import Checkpoint
from audiocap.core.optim import ContractError
from audiocap.decoding import GenerationConfig, generate_candidates, write_candidates
from audiocap.ensemble import CaptionEnsemble, ensemble_next_token, soup
from audiocap.text import Vocab


def ckpt(values, arch="toy"):
    return Checkpoint(OrderedDict((k, np.asarray(v, float)) for k, v in values.items()), arch,
                      {"config": {"d": 1}, "vocab": ["a"], "val": 3})


def test_soup_identities(tiny_models):
    m = tiny_models["ckpt"]
    for group in ([m], [m, m], [m, m, m]):
        out = soup(group)
        assert list(out.entries) == list(m.entries)
        assert all(np.array_equal(out.entries[k], m.entries[k]) for k in m.entries)
        assert out.arch == m.arch and out.meta["soup_sources"] == len(group)
        assert out.meta["config"] == m.meta["config"]
    souped = cap.from_checkpoint(soup([m, m]))
    e = tiny_models["test"][0]
    assert np.array_equal(cap.forward_loglik(souped, e.codes, e.seq_emb, e.tokens)[1],
                          cap.forward_loglik(tiny_models["captioner"], e.codes, e.seq_emb, e.tokens)[1])


def test_soup_scalar_mean():
    out = soup([ckpt({"w": 1.0}), ckpt({"w": 3.0})])
    assert out.entries["w"] == 2.0


def test_soup_errors():
    with pytest.raises(ContractError):
        soup([])
    with pytest.raises(ContractError):
        soup([ckpt({"w": 1.0}), ckpt({"w": 1.0}, arch="other")])
    with pytest.raises(ContractError):
        soup([ckpt({"w": 1.0}), ckpt({"v": 1.0})])
    with pytest.raises(ContractError):
        soup([ckpt({"w": [1.0, 2.0]}), ckpt({"w": [1.0, 2.0, 3.0]})])


@given(st.lists(arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_soup_is_permutation_invariant(arrs, rnd):
    cks = [ckpt({"w": a}) for a in arrs]
    shuffled = cks[:]
    rnd.shuffle(shuffled)
    a, b = soup(cks).entries["w"], soup(shuffled).entries["w"]
    assert np.array_equal(a, b)
    assert np.allclose(a, np.mean(arrs, axis=0), rtol=1e-12, atol=1e-9)


class FixedModel:
    """Stand-in member that always predicts the same next-token distribution."""

    def __init__(self, probs, vocab):
        self.row = np.log(np.asarray(probs, float))
        self.vocab = vocab
        self.config = None

    def encode(self, codes, seq_emb):
        return None

    def next_logprobs(self, memory, prefixes):
        return np.tile(self.row, (len(prefixes), 1))


def test_two_member_probability_average():
    vocab = Vocab(("<s>", "</s>", "<unk>"))
    ens = CaptionEnsemble([FixedModel([0.8, 0.1, 0.1], vocab), FixedModel([0.2, 0.7, 0.1], vocab)])
    row = ens.next_logprobs(ens.encode(None, None), np.array([[0], [0]]))
    assert np.allclose(np.exp(row), [[0.5, 0.4, 0.1]] * 2, atol=1e-12)

    two = Vocab(("<s>", "</s>", "<unk>", "x", "y"))
    # the hand example: [0.8, 0.2] and [0.2, 0.8] over two live tokens -> [0.5, 0.5]
    ens = CaptionEnsemble([FixedModel([1e-300, 1e-300, 1e-300, 0.8, 0.2], two),
                           FixedModel([1e-300, 1e-300, 1e-300, 0.2, 0.8], two)])
    p = np.exp(ens.next_logprobs(ens.encode(None, None), np.array([[0]]))[0])
    assert np.allclose(p[3:], [0.5, 0.5], atol=1e-12)


def test_ensemble_vocab_mismatch():
    with pytest.raises(ContractError):
        CaptionEnsemble([FixedModel([1.0], Vocab(("<s>", "</s>", "<unk>"))),
                         FixedModel([1.0], Vocab(("<s>", "</s>", "<unk>", "x")))])
    with pytest.raises(ContractError):
        CaptionEnsemble([])


def test_copies_of_one_model_match_that_model(tiny_models, tmp_path):
    model = tiny_models["captioner"]
    e = tiny_models["test"][2]
    start = [model.vocab.start_id]
    single = cap.next_token_logprobs(model, e.codes, e.seq_emb, start)
    assert np.array_equal(ensemble_next_token([model], e.codes, e.seq_emb, start), single)
    assert np.array_equal(ensemble_next_token([model] * 3, e.codes, e.seq_emb, start), single)
    with pytest.raises(ContractError):
        ensemble_next_token([model], e.codes, e.seq_emb, [model.vocab.end_id])

    gen = GenerationConfig(seed=5, num_candidates=8)
    write_candidates(tmp_path / "one.jsonl", [("c", generate_candidates(model, e.codes, e.seq_emb, gen))])
    write_candidates(tmp_path / "ens.jsonl",
                     [("c", generate_candidates(CaptionEnsemble([model, model]), e.codes, e.seq_emb, gen))])
    assert (tmp_path / "one.jsonl").read_bytes() == (tmp_path / "ens.jsonl").read_bytes()

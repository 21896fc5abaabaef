import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from duo import autodiff as ad
from duo.classifier import DuoClassifier
from duo.data import (ClassificationData, ParallelData, content_tokens, encode_pairs, gen_keyword_classification,
                      gen_synthetic_parallel, label_index, make_batches, read_classification_tsv, read_parallel,
                      split_validation)
from duo.embeddings import BOS, EOS, PAD, DuoEmbeddingPair, Vocabulary, align_table_to_vocab, build_vocab, tokenize
from duo.errors import ContractError, ParseError, TrainingDiverged
from duo.optim import Adam, lr_schedule
from duo.rng import SplitMix64
from duo.training import (HISTORY_HEADER, EpochRecord, TrainConfig, TrainHistory, early_stop_check, evaluate,
                          seed_streams, train_loop, train_steps)
from duo.transformer import DuoTransformer, TransformerConfig


@pytest.fixture(scope="module")
def lexsub():
    train, valid, mapping = gen_synthetic_parallel("lexsub", 40, (3, 8), 64, SplitMix64(3), valid_count=16)
    vocab = Vocabulary(content_tokens(40))
    return vocab, encode_pairs(train, vocab), encode_pairs(valid, vocab), mapping


def toy_translator(seed=0, dtype=np.float32, **kw):
    return DuoTransformer(TransformerConfig(vocab_size=40, **kw), SplitMix64(seed), dtype)


class TestBatching:
    def test_sizes(self):
        data = ClassificationData([[4], [5, 6], [7]], [0, 1, 0])
        assert [b.size for b in make_batches(data, 2, shuffle=False)] == [2, 1]

    def test_unshuffled_order(self):
        data = ClassificationData([[4], [5, 6], [7]], [0, 1, 0])
        batches = make_batches(data, 2, shuffle=False)
        assert batches[0].indices == [0, 1] and batches[1].indices == [2]
        assert batches[0].ids.tolist() == [[4, 0], [5, 6]]
        assert batches[0].mask.tolist() == [[True, False], [True, True]]

    def test_seeded_shuffle(self):
        data = ClassificationData([[i + 4] for i in range(20)], [0] * 20)
        a = [b.indices for b in make_batches(data, 6, SplitMix64(5))]
        b = [b.indices for b in make_batches(data, 6, SplitMix64(5))]
        assert a == b and sorted(sum(a, [])) == list(range(20))

    def test_seq2seq_framing(self):
        batch = make_batches(ParallelData([[4, 5]], [[6, 7, 8]]), 1, shuffle=False)[0]
        assert batch.tgt_in.tolist() == [[BOS, 6, 7, 8]]
        assert batch.tgt_out.tolist() == [[6, 7, 8, EOS]]

    def test_empty(self):
        with pytest.raises(ContractError):
            make_batches(ClassificationData([], []), 2)

    def test_split_fraction(self):
        data = ClassificationData([[i + 4] for i in range(50)], list(range(50)))
        train, val = split_validation(data, SplitMix64(0))
        assert len(val) == 5 and len(train) == 45
        assert sorted(train.labels + val.labels) == list(range(50))


class TestReaders:
    def test_tsv(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("pos\tGood film\nneg\tbad\n", encoding="utf-8")
        texts, labels = read_classification_tsv(p)
        assert labels == ["pos", "neg"] and texts[0] == "Good film"
        assert label_index(["b", "a", "b", "c"]) == ["b", "a", "c"]

    def test_tsv_errors(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("pos\tfine\nno tab here\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            read_classification_tsv(p)
        assert info.value.line == 2

    def test_parallel_length_mismatch(self, tmp_path):
        (tmp_path / "s").write_text("a\nb\n")
        (tmp_path / "t").write_text("x\n")
        with pytest.raises(ParseError):
            read_parallel(tmp_path / "s", tmp_path / "t")


class TestSynthetic:
    def test_copy_and_reverse(self):
        train, _, _ = gen_synthetic_parallel("copy", 10, (3, 3), 5, SplitMix64(0))
        assert all(s == t for s, t in train)
        train, _, _ = gen_synthetic_parallel("reverse", 10, (3, 3), 5, SplitMix64(0))
        assert all(s[::-1] == t for s, t in train)

    def test_lexsub_consistency(self):
        train, valid, mapping = gen_synthetic_parallel("lexsub", 12, (2, 6), 100, SplitMix64(1), valid_count=20)
        assert sorted(mapping.values()) == sorted(mapping)
        for s, t in train + valid:
            assert t == [mapping[w] for w in s]

    def test_disjoint_splits(self):
        train, valid, _ = gen_synthetic_parallel("copy", 8, (1, 3), 50, SplitMix64(2), valid_count=30)
        assert not {tuple(s) for s, _ in train} & {tuple(s) for s, _ in valid}

    def test_impossible(self):
        with pytest.raises(ContractError):
            gen_synthetic_parallel("copy", 6, (1, 1), 3, SplitMix64(0))

    def test_deterministic(self):
        a = gen_synthetic_parallel("lexsub", 20, (3, 5), 30, SplitMix64(9))
        b = gen_synthetic_parallel("lexsub", 20, (3, 5), 30, SplitMix64(9))
        assert a == b

    def test_keywords_balanced_enough(self):
        texts, labels = gen_keyword_classification(4, 400, SplitMix64(0))
        counts = [labels.count(f"c{c}") for c in range(4)]
        assert min(counts) > 70 and all(tokenize(t) for t in texts)


class TestEarlyStopping:
    def test_decreasing_continues(self):
        assert early_stop_check([20 - i for i in range(20)]) == (False, 20)

    def test_ten_flat_epochs_after_best(self):
        losses = [5.0, 4.0, 3.0] + [3.0 + 0.1 * k for k in range(10)]
        assert len(losses) == 13
        assert early_stop_check(losses[:12]) == (False, 3)
        assert early_stop_check(losses) == (True, 3)

    def test_counter_resets(self):
        losses = [5.0] + [5.0] * 9 + [4.0]
        assert early_stop_check(losses) == (False, 11)

    def test_ties_keep_earliest(self):
        assert early_stop_check([3.0, 2.0, 2.0, 2.0])[1] == 2

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.integers(1, 12))
    def test_stop_rule(self, losses, patience):
        stop, best = early_stop_check(losses, patience)
        if stop:
            assert len(losses) >= patience + 1
            assert len(losses) - best >= patience
        assert losses[best - 1] == min(losses)

    def test_empty(self):
        with pytest.raises(ContractError):
            early_stop_check([])


class TestHistory:
    def test_csv_format(self):
        h = TrainHistory()
        h.append(EpochRecord(1, 1.23456789, 2.0, 0.5, 3.3))
        text = h.to_csv()
        assert text.splitlines()[0] == ",".join(HISTORY_HEADER) == "epoch,train_loss,val_loss,val_metric,seconds"
        assert text.splitlines()[1] == "1,1.23457,2,0.5,3.3"
        assert "\r" not in text and text.endswith("\n")
        assert h.to_csv(timing=False).splitlines()[1].endswith(",0")

    def test_epochs_increase(self):
        h = TrainHistory()
        h.append(EpochRecord(1, 0, 0, 0, 0))
        with pytest.raises(ContractError):
            h.append(EpochRecord(1, 0, 0, 0, 0))


class PerfectLexsub:
    """Stub translator that always emits the mapped source."""

    def __init__(self, vocab, mapping):
        self.map = {vocab.lookup(a): vocab.lookup(b) for a, b in mapping.items()}

    def loss(self, batch):
        return ad.constant(0.0)

    def greedy_decode(self, sources):
        return [[self.map[i] for i in s] for s in sources]


class TestEvaluate:
    def test_chance_level_classifier(self):
        texts, labels = gen_keyword_classification(4, 400, SplitMix64(1))
        vocab = build_vocab([tokenize(t) for t in texts])
        names = label_index(labels)
        data = ClassificationData([vocab.numericalize(t) for t in texts], [names.index(l) for l in labels])
        rng = SplitMix64(2)
        pair = DuoEmbeddingPair(vocab, align_table_to_vocab(None, vocab, 16, rng),
                                align_table_to_vocab(None, vocab, 32, rng))
        acc = evaluate(DuoClassifier(pair, 48, 4, rng), data)["accuracy"]
        assert 0.15 <= acc <= 0.35

    def test_perfect_translator(self, lexsub):
        vocab, _, valid, mapping = lexsub
        metrics = evaluate(PerfectLexsub(vocab, mapping), valid)
        assert metrics["bleu"] == pytest.approx(100.0, abs=1e-9)
        assert metrics["token_accuracy"] == 1.0

    def test_uniform_model_perplexity(self, lexsub):
        _, _, valid, _ = lexsub
        model = toy_translator(dtype=np.float64)
        model.params["fuse.w"].data[:] = 0.0
        assert evaluate(model, valid, with_bleu=False)["perplexity"] == pytest.approx(40.0, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            evaluate(None, ClassificationData([], []))


class TestTrainLoop:
    def test_zero_epochs(self, lexsub):
        _, train, valid, _ = lexsub
        model = toy_translator()
        before = {n: p.data.copy() for n, p in model.params.items()}
        result = train_loop(model, train, valid, TrainConfig(max_epochs=0))
        assert result.history.records == []
        assert all(np.array_equal(before[n], p.data) for n, p in model.params.items())

    def test_single_batch_overfit(self, lexsub):
        _, train, _, _ = lexsub
        batch = make_batches(ParallelData(train.sources[:8], train.targets[:8]), 8, shuffle=False)[0]
        losses = train_steps(toy_translator(seed=1), batch, 300, TrainConfig(seed=1))
        assert min(losses) < 0.1

    def test_same_seed_same_history(self, lexsub):
        _, train, valid, _ = lexsub

        def run():
            result = train_loop(toy_translator(seed=4), train, valid, TrainConfig(max_epochs=2, seed=4))
            return result.history.to_csv(timing=False), result.best_state
        (csv_a, state_a), (csv_b, state_b) = run(), run()
        assert csv_a == csv_b
        assert all(state_a[n].tobytes() == state_b[n].tobytes() for n in state_a)

    def test_loss_decreases_over_first_steps(self, lexsub):
        _, train, _, _ = lexsub
        wins = 0
        for seed in range(5):
            model = toy_translator(seed=seed)
            streams = seed_streams(seed)
            opt = Adam(model.named_parameters(), frozen_rows=model.frozen_rows())
            losses = []
            step = 0
            while step < 50:
                for batch in make_batches(train, 8, streams.shuffle):
                    step += 1
                    opt.zero_grad()
                    loss = model.loss(batch, training=True, rng=streams.dropout, smoothing=0.1)
                    ad.backward(loss)
                    opt.step(lr_schedule(step, 32, 200))
                    losses.append(float(loss.data))
                    if step == 50:
                        break
            wins += losses[49] < losses[0]
        assert wins >= 4

    def test_best_epoch_restored(self, lexsub):
        _, train, valid, _ = lexsub
        model = toy_translator(seed=2)
        result = train_loop(model, train, valid, TrainConfig(max_epochs=3, seed=2, eval_bleu=False))
        best = result.history.records[result.history.best_epoch - 1]
        assert evaluate(model, valid, with_bleu=False)["loss"] == pytest.approx(best.val_loss, rel=1e-6)

    def test_divergence_reported(self, lexsub):
        _, train, valid, _ = lexsub
        model = toy_translator(seed=3)
        with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
            train_loop(model, train, valid, TrainConfig(max_epochs=2, lr_scale=1e30))

    def test_pad_row_stays_zero(self, lexsub):
        _, train, valid, _ = lexsub
        model = toy_translator(seed=5)
        train_loop(model, train, valid, TrainConfig(max_epochs=1, eval_bleu=False))
        for name in ("emb.s", "emb.p"):
            assert not model.params[name].data[PAD].any()

"""End-to-end checks on corpora with several mentions per document."""

import numpy as np

from cdrex.corpus import build_instances, build_vocab, parse_pubtator
from cdrex.model import forward, load_model
from cdrex.optim import (
    DataSplit,
    TrainConfig,
    dev_f1,
    predict_pairs,
    train,
    training_relations,
)
from cdrex.rng import Rng


def multi_mention_block(i: int, positive: bool) -> str:
    """Two chemical mentions and one disease mention across two sentences;
    only one of the chemical's instances sits in the causal sentence."""
    pmid = str(3000 + i)
    chem = f"drug{i % 4}"
    dis = f"ill{i % 3}"
    verb = "induced" if positive else "accompanied"
    title = f"Study of {chem} effects."
    abstract = f"Patients got {chem} daily. The {chem} {verb} {dis} quickly."
    text = title + " " + abstract
    lines = [f"{pmid}|t|{title}", f"{pmid}|a|{abstract}"]
    first = text.index(chem)
    second = text.index(chem, first + 1)
    third = text.index(chem, second + 1)
    d0 = text.index(dis)
    for start in (first, second, third):
        lines.append(f"{pmid}\t{start}\t{start + len(chem)}\t{chem}\tChemical\tC{i % 4}")
    lines.append(f"{pmid}\t{d0}\t{d0 + len(dis)}\t{dis}\tDisease\tD{i % 3}")
    if positive:
        lines.append(f"{pmid}\tCID\tC{i % 4}\tD{i % 3}")
    return "\n".join(lines)


def multi_mention_split(count: int, start: int = 0) -> DataSplit:
    text = "\n\n".join(multi_mention_block(start + i, (start + i) % 2 == 0)
                       for i in range(count))
    docs = parse_pubtator(text)
    instances = [inst for doc in docs for inst in build_instances(doc)]
    return DataSplit(docs, instances)


def test_multiple_instances_per_pair_aggregate_existentially():
    split = multi_mention_split(24)
    # 3 chemical mentions x 1 disease mention per document.
    per_doc = {}
    for inst in split.instances:
        per_doc[inst.pmid] = per_doc.get(inst.pmid, 0) + 1
    assert set(per_doc.values()) == {3}

    cfg = TrainConfig(variant="cnn", learning_rate=5e-4, filters=16, dropout=0.0,
                      l2=0.0, epochs=30, batch_size=8, seed=5, window=2,
                      word_dim=12, pos_dim=4)
    _, params = train(cfg, split, None)

    # The trained model separates the two verbs at mention level, and
    # document-level aggregation turns any positive instance into a pair.
    train_acc = np.mean([forward(i, params, Rng(0)).label == i.label
                         for i in split.instances])
    assert train_acc >= 0.99

    held_out = multi_mention_split(12, start=100)
    p, r, f1 = dev_f1(held_out, params, train_relations=set())
    assert f1 == 100.0


def test_rule_ii_recovers_pairs_the_model_misses():
    split = multi_mention_split(8)
    cfg = TrainConfig(variant="cnn", learning_rate=1e-12, filters=4, dropout=0.0,
                      epochs=1, batch_size=8, seed=5, window=2, word_dim=8, pos_dim=3)
    _, params = train(cfg, split, None)
    # An effectively untrained model predicting nothing still yields every
    # co-occurring training relation through rule (ii).
    predicted = predict_pairs(split, params, training_relations(split.documents))
    gold_positive = {doc.pmid: set(doc.gold_cid) for doc in split.documents
                     if doc.gold_cid}
    for pmid, pairs in gold_positive.items():
        assert pairs <= predicted[pmid]


def test_non_ascii_text_round_trips(tmp_path):
    title = "Effects of β-blockers."
    abstract = "Severe β-blocker toxicity caused müde bradycardia."
    text = title + " " + abstract
    c0 = text.index("β-blocker", len(title))
    d0 = text.index("bradycardia")
    block = "\n".join([
        f"42|t|{title}",
        f"42|a|{abstract}",
        f"42\t{c0}\t{c0 + len('β-blocker')}\tβ-blocker\tChemical\tC1",
        f"42\t{d0}\t{d0 + len('bradycardia')}\tbradycardia\tDisease\tD1",
        "42\tCID\tC1\tD1",
    ])
    docs = parse_pubtator(block)
    doc = docs[0]
    for m in doc.mentions:
        assert doc.text[m.start:m.end] == m.text
    instances = [i for d in docs for i in build_instances(d)]
    assert len(instances) == 1
    vocab = build_vocab(docs, instances)
    assert "β" in vocab.chars

    cfg = TrainConfig(variant="cnn+cnnchar", learning_rate=5e-4, filters=4,
                      dropout=0.0, epochs=1, batch_size=4, seed=5, window=2,
                      word_dim=8, pos_dim=3, char_dim=4, char_filters=3, char_window=2)
    report, params = train(cfg, DataSplit(docs, instances), None,
                           model_path=tmp_path / "b.model")
    assert report.status == "trained"
    loaded = load_model(tmp_path / "b.model")
    assert "β" in loaded.tables.char.index

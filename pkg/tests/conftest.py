"""Shared synthetic-corpus builders for the CLI and acceptance tests."""

from __future__ import annotations


def synthetic_block(i: int, positive: bool, chem_kinds: int = 3, dis_kinds: int = 4) -> str:
    """One PubTator block with a single chemical/disease mention pair.
    The linking verb encodes the label, so the corpus is separable."""
    pmid = str(1000 + i)
    chem = f"chem{i % chem_kinds}"
    dis = f"dis{i % dis_kinds}"
    verb = "induced" if positive else "accompanied"
    title = f"{chem} {verb} {dis} today."
    abstract = "Plain filler sentence here."
    text = title + " " + abstract
    lines = [f"{pmid}|t|{title}", f"{pmid}|a|{abstract}"]
    c0 = text.index(chem)
    d0 = text.index(dis)
    lines.append(f"{pmid}\t{c0}\t{c0 + len(chem)}\t{chem}\tChemical\tC{i % chem_kinds}")
    lines.append(f"{pmid}\t{d0}\t{d0 + len(dis)}\t{dis}\tDisease\tD{i % dis_kinds}")
    if positive:
        lines.append(f"{pmid}\tCID\tC{i % chem_kinds}\tD{i % dis_kinds}")
    return "\n".join(lines)


def synthetic_corpus_text(count: int, start: int = 0, all_negative: bool = False) -> str:
    blocks = []
    for i in range(count):
        positive = (start + i) % 2 == 0 and not all_negative
        blocks.append(synthetic_block(start + i, positive))
    return "\n\n".join(blocks) + "\n"

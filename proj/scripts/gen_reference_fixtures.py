#!/usr/bin/env python3
"""Builds the reference-implementation fixtures used by the oracle-parity
tests: a frozen tokenizer corpus with reference ids, and reference final-row
logits for a prompt set, both computed with the HuggingFace GPT-2 classes.

Usage:
    python3 scripts/gen_reference_fixtures.py --model-dir <dir with config.json,
        model.safetensors, vocab.json, merges.txt> --out-dir <fixtures dir>

Outputs:
    <repo>/tests/data/tokenizer_parity.json   (committed, frozen corpus)
    <out-dir>/forward_parity_prompts.json
    <out-dir>/forward_parity_logits.f32       (n_prompts x vocab float32 rows)
"""

import argparse
import json
import os
import random
import string


def build_corpus(rng):
    """1000 deterministic documents mixing prose, code, unicode and edge cases."""
    words = (
        "the quick brown fox jumps over lazy dog time year people way day man "
        "thing woman life child world school state family student group country "
        "problem hand part place case week company system program question work "
        "government number night point home water room mother area money story "
        "fact month lot right study book eye job word business issue side kind "
        "head house service friend father power hour game line end member law car "
        "city community name president team minute idea body information back "
        "parent face others level office door health person art war history party "
        "result change morning reason research girl guy moment air teacher force "
        "education foot boy age policy process music market sense nation plan "
        "college interest death experience effect use class control care field "
        "development role effort rate heart drug show leader light voice wife "
        "whole police mind finally pull return free military price report less "
        "according decide explain hope even develop view relationship carry town "
        "road drive arm true federal break better difference thank receive value "
        "international building action full model join season society because tax "
        "director early position player agree especially record pick wear paper "
        "special space ground form support event official whose matter everyone "
        "center couple site project hit base activity star table need court "
        "produce american teach oil half situation easy cost industry figure "
        "street image itself phone either data cover quite picture clear"
    ).split()
    starts = ["Today,", "In 2019,", "The", "A", "Once upon a time,", "Scientists say",
              "BREAKING:", "def main():", "import os", "SELECT * FROM", "# Title",
              "- item one", "He said:", '"Quote,"', "…and then", "  indented", "\t tabbed"]
    unicode_bits = ["naïve", "café", "Zürich", "résumé", "日本語", "русский", "emoji 🙂 test",
                    "math ∑∫≈", "αβγδ", "“curly quotes”", "dash—dash", "10€", "£5", "№42",
                    "中文测试", "한국어", "עברית", "ñ", "ü", "ß"]

    docs = []
    for i in range(1000):
        n = rng.randint(3, 60)
        parts = [rng.choice(starts)]
        for _ in range(n):
            r = rng.random()
            if r < 0.78:
                parts.append(rng.choice(words))
            elif r < 0.85:
                parts.append(str(rng.randint(0, 999999)))
            elif r < 0.90:
                parts.append(rng.choice(unicode_bits))
            elif r < 0.95:
                parts.append(rng.choice(["it's", "don't", "they're", "we've", "I'm",
                                         "he'll", "she'd", "can't", "y'all"]))
            else:
                parts.append("".join(rng.choice(string.punctuation) for _ in range(rng.randint(1, 4))))
        sep = rng.choice([" ", " ", " ", "  ", "\n", ", "])
        doc = sep.join(parts)
        if rng.random() < 0.2:
            doc = doc + rng.choice(["   ", "\n\n", "\t", " \t "])
        if rng.random() < 0.1:
            doc = rng.choice([" ", "\n", "\t\t"]) + doc
        docs.append(doc)
    return docs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model-dir", required=True)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--repo-data-dir", default=os.path.join(os.path.dirname(__file__), "..", "tests", "data"))
    ap.add_argument("--n-forward-prompts", type=int, default=200)
    args = ap.parse_args()

    from transformers import GPT2Tokenizer, GPT2LMHeadModel
    import torch
    import numpy as np

    tok = GPT2Tokenizer.from_pretrained(args.model_dir)
    if not tok.encode("sanity check"):
        # Older/newer transformers disagree on offline construction; fall back
        # to the tokenizers backend directly.
        from tokenizers import ByteLevelBPETokenizer

        class _Wrap:
            def __init__(self, inner):
                self._inner = inner
            def encode(self, text):
                return self._inner.encode(text).ids
            def decode(self, ids):
                return self._inner.decode(ids)

        tok = _Wrap(ByteLevelBPETokenizer(
            os.path.join(args.model_dir, "vocab.json"),
            os.path.join(args.model_dir, "merges.txt")))

    rng = random.Random(20240901)
    docs = build_corpus(rng)
    corpus = [{"text": d, "ids": tok.encode(d)} for d in docs]
    os.makedirs(args.repo_data_dir, exist_ok=True)
    corpus_path = os.path.join(args.repo_data_dir, "tokenizer_parity.json")
    with open(corpus_path, "w") as f:
        json.dump(corpus, f, ensure_ascii=True)
    print(f"wrote {corpus_path}: {len(corpus)} documents, "
          f"{sum(len(c['ids']) for c in corpus)} tokens")

    # Forward-parity prompts: short natural prompts in the style the toolkit
    # evaluates, plus random-token sequences.
    names = ["Mary", "John", "Tom", "James", "Sarah", "Anna", "Peter", "Alice"]
    objects = ["pencil", "notebook", "pen", "cup", "plate", "jug", "mug", "bowl",
               "apple", "pear", "banana", "orange"]
    prompts = []
    for i in range(args.n_forward_prompts):
        r = rng.random()
        if r < 0.4:
            a, b = rng.sample(names, 2)
            s = a if rng.random() < 0.5 else b
            prompts.append(f"Then, {a} and {b} went to the store. {s} gave a drink to")
        elif r < 0.7:
            objs = rng.sample(objects, 3)
            missing = rng.randrange(3)
            rest = [o for k, o in enumerate(objs) if k != missing]
            rng.shuffle(rest)
            prompts.append(
                " Today, I need to buy the " + ", the ".join(objs[:-1]) + " and the " + objs[-1]
                + ". First, I will buy the " + ", then the ".join(rest) + ", and finally the")
        else:
            n = rng.randint(5, 40)
            ids = [rng.randrange(50257) for _ in range(n)]
            prompts.append(tok.decode(ids))

    model = GPT2LMHeadModel.from_pretrained(args.model_dir, torch_dtype=torch.float32)
    model.eval()

    os.makedirs(args.out_dir, exist_ok=True)
    meta = []
    rows = []
    with torch.no_grad():
        for p in prompts:
            ids = tok.encode(p)
            if len(ids) == 0 or len(ids) > 512:
                ids = ids[:512] if ids else [50256]
            logits = model(torch.tensor([ids])).logits[0, -1, :].float().numpy()
            rows.append(logits)
            meta.append({"ids": ids, "top1": int(logits.argmax())})
    arr = np.stack(rows).astype(np.float32)
    with open(os.path.join(args.out_dir, "forward_parity_prompts.json"), "w") as f:
        json.dump(meta, f)
    arr.tofile(os.path.join(args.out_dir, "forward_parity_logits.f32"))
    print(f"wrote forward parity fixtures: {arr.shape[0]} prompts x {arr.shape[1]} logits")


if __name__ == "__main__":
    main()

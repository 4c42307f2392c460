"""Synthetic key-value reading task in SQuAD v1.1 format.

Passages look like ``"k3 is v17 . k8 is v2 . k0 is v9 ."`` and each question
asks ``"what is k8 ?"`` with the single value token as the answer.
"""
from __future__ import annotations

import numpy as np


def make_keyvalue_dataset(n_questions: int, seed: int = 0, n_keys: int = 24,
                          n_values: int = 24, min_pairs: int = 3, max_pairs: int = 8,
                          title: str = "keyvalue") -> dict:
    if not 1 <= min_pairs <= max_pairs <= n_keys:
        raise ValueError("need 1 <= min_pairs <= max_pairs <= n_keys")
    rng = np.random.default_rng(seed)
    paragraphs = []
    for q in range(n_questions):
        n_pairs = int(rng.integers(min_pairs, max_pairs + 1))
        keys = rng.choice(n_keys, size=n_pairs, replace=False)
        values = rng.integers(0, n_values, size=n_pairs)
        parts, offsets = [], []
        pos = 0
        for k, v in zip(keys, values):
            head = f"k{k} is "
            offsets.append(pos + len(head))
            chunk = f"{head}v{v} ."
            parts.append(chunk)
            pos += len(chunk) + 1
        context = " ".join(parts)
        target = int(rng.integers(n_pairs))
        answer = f"v{values[target]}"
        assert context[offsets[target]:offsets[target] + len(answer)] == answer
        paragraphs.append({
            "context": context,
            "qas": [{
                "id": f"{title}-{seed}-{q}",
                "question": f"what is k{keys[target]} ?",
                "answers": [{"text": answer, "answer_start": offsets[target]}],
            }],
        })
    return {"version": "1.1", "data": [{"title": title, "paragraphs": paragraphs}]}

"""Detection/attribution scores, ROUGE-2 / ROUGE-L, and confusion matrices.

ROUGE values are F-measures with beta = 1 over lowercase word tokens
(punctuation dropped). Unparseable answers are always scored as wrong and are
never removed from a denominator.
"""

from __future__ import annotations

import csv
import re
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .answers import ParsedAnswer, render_label
from .corpus import ALL_FAKES, FAMILIES, GeneratorId, write_pgm

_WORD = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*\*?")

BINARY_ROWS = ("real", "fake")
BINARY_COLS = ("real", "fake", "unparseable")
FAMILY_ROWS = FAMILIES
FAMILY_COLS = FAMILIES + ("none",)
MODEL_COLS = tuple(g.value for g in ALL_FAKES) + ("none",)


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge2_tokens(cand: Sequence[str], ref: Sequence[str]) -> float:
    if len(cand) < 2 or len(ref) < 2:
        if len(cand) < 2 and len(ref) < 2:
            return 1.0 if list(cand) == list(ref) else 0.0
        return 0.0
    cb = Counter(zip(cand, cand[1:]))
    rb = Counter(zip(ref, ref[1:]))
    overlap = sum((cb & rb).values())
    return _f1(overlap / (len(cand) - 1), overlap / (len(ref) - 1))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rougeL_tokens(cand: Sequence[str], ref: Sequence[str]) -> float:
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def rouge2(candidate: str, reference: str) -> float:
    """Bigram-overlap F-measure.

    >>> rouge2("a fake sample", "a fake sample"), rouge2("a b", "c d")
    (1.0, 0.0)
    >>> rouge2("the cat sat", "the cat ran")
    0.5
    """
    return rouge2_tokens(words(candidate), words(reference))


def rougeL(candidate: str, reference: str) -> float:
    """LCS-based F-measure.

    >>> rougeL("a b c d", "a c d") == 6 / 7
    True
    """
    return rougeL_tokens(words(candidate), words(reference))


# ------------------------------------------------------------------ detection


def detection_counts(parsed: Sequence[ParsedAnswer], truth: Sequence[GeneratorId]) -> dict[str, int]:
    """TP/FP/FN/TN with fake as the positive class.

    An unparseable verdict is treated as the opposite of the truth.
    """
    if len(parsed) != len(truth):
        raise ValueError(f"{len(parsed)} predictions for {len(truth)} truths")
    c = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for p, t in zip(parsed, truth):
        pred = (not t.is_fake) if p.is_fake is None else p.is_fake
        if t.is_fake:
            c["tp" if pred else "fn"] += 1
        else:
            c["fp" if pred else "tn"] += 1
    return c


def detection_metrics(parsed: Sequence[ParsedAnswer], truth: Sequence[GeneratorId]) -> dict:
    c = detection_counts(parsed, truth)
    n = len(truth)
    prec = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 0.0
    rec = c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else 0.0
    return {"acc": (c["tp"] + c["tn"]) / n if n else 0.0, "f1": _f1(prec, rec), **c}


# ---------------------------------------------------------------- attribution


def attribution_correct(p: ParsedAnswer, t: GeneratorId) -> bool:
    if t is GeneratorId.REAL:
        return p.is_fake is False
    return p.is_fake is True and p.model_name is t


def attribution_metrics(parsed: Sequence[ParsedAnswer], truth: Sequence[GeneratorId],
                        generated: Sequence[str], subset: GeneratorId) -> dict:
    """Scores over ``subset``'s fakes plus the real pool found in ``truth``."""
    if not subset.is_fake:
        raise ValueError("attribution subsets are keyed by a fake generator")
    if not len(parsed) == len(truth) == len(generated):
        raise ValueError("parsed, truth and generated differ in length")
    idx = [i for i, t in enumerate(truth) if t in (subset, GeneratorId.REAL)]
    if not idx:
        raise ValueError(f"subset {subset.value} has an empty population")
    correct = [attribution_correct(parsed[i], truth[i]) for i in idx]
    tp = sum(1 for i in idx if truth[i] is subset and attribution_correct(parsed[i], subset))
    pred_pos = sum(1 for i in idx if parsed[i].is_fake is True and parsed[i].model_name is subset)
    pos = sum(1 for i in idx if truth[i] is subset)
    prec = tp / pred_pos if pred_pos else 0.0
    rec = tp / pos if pos else 0.0
    r2 = [rouge2(generated[i], render_label(truth[i])) for i in idx]
    rl = [rougeL(generated[i], render_label(truth[i])) for i in idx]
    return {
        "acc": float(np.mean(correct)),
        "f1": _f1(prec, rec),
        "rouge2": float(np.mean(r2)),
        "rougeL": float(np.mean(rl)),
        "n": len(idx),
    }


# ------------------------------------------------------------------ confusion


def confusion_matrices(parsed: Sequence[ParsedAnswer], truth: Sequence[GeneratorId]) -> dict:
    """Binary real/fake, family (over fake true positives) and model-level matrices.

    Rows are truth, columns prediction; labels are listed alongside each matrix.
    """
    if len(parsed) != len(truth):
        raise ValueError("parsed and truth differ in length")
    binary = np.zeros((2, 3), dtype=int)
    family = np.zeros((2, 3), dtype=int)
    model_rows = [g for g in ALL_FAKES if g in set(truth)]
    model = np.zeros((len(model_rows), len(MODEL_COLS)), dtype=int)
    for p, t in zip(parsed, truth):
        col = 2 if p.is_fake is None else int(p.is_fake)
        binary[int(t.is_fake), col] += 1
        if not (t.is_fake and p.is_fake is True):
            continue
        fcol = FAMILY_COLS.index(p.model_category) if p.model_category else 2
        family[FAMILY_ROWS.index(t.family), fcol] += 1
        mcol = MODEL_COLS.index(p.model_name.value) if p.model_name else len(MODEL_COLS) - 1
        model[model_rows.index(t), mcol] += 1
    return {
        "binary": {"rows": list(BINARY_ROWS), "cols": list(BINARY_COLS), "matrix": binary.tolist()},
        "family": {"rows": list(FAMILY_ROWS), "cols": list(FAMILY_COLS), "matrix": family.tolist()},
        "model": {"rows": [g.value for g in model_rows], "cols": list(MODEL_COLS),
                  "matrix": model.tolist()},
    }


def write_matrix_csv(path: Path, m: dict, provenance: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred"] + m["cols"])
        for name, row in zip(m["rows"], m["matrix"]):
            w.writerow([name] + row)


def write_matrix_pgm(path: Path, m: dict, cell: int = 16, provenance: str | None = None) -> None:
    """Row-normalized heatmap, dark = high mass."""
    a = np.asarray(m["matrix"], dtype=float)
    if a.size == 0:
        a = np.zeros((1, 1))
    rows = a.sum(axis=1, keepdims=True)
    norm = np.divide(a, rows, out=np.zeros_like(a), where=rows > 0)
    img = np.kron(1.0 - norm, np.ones((cell, cell)))
    write_pgm(path, img, comment=provenance)


# ------------------------------------------------------------------ report


def subset_report(parsed, truth, generated, subsets: Sequence[GeneratorId]) -> dict:
    """Per-subset metrics, unweighted averages, and matrices for a prediction set."""
    detection, attribution, confusion = {}, {}, {}
    for g in subsets:
        idx = [i for i, t in enumerate(truth) if t in (g, GeneratorId.REAL)]
        p = [parsed[i] for i in idx]
        t = [truth[i] for i in idx]
        det = detection_metrics(p, t)
        detection[g.value] = {"acc": det["acc"], "f1": det["f1"], "n": len(idx)}
        attribution[g.value] = attribution_metrics(p, t, [generated[i] for i in idx], g)
        confusion[g.value] = confusion_matrices(p, t)
    keys = [g.value for g in subsets]

    def avg(table, field):
        return float(np.mean([table[k][field] for k in keys]))

    fake_idx = [i for i, t in enumerate(truth) if t in set(subsets)]
    overall = confusion_matrices([parsed[i] for i in fake_idx], [truth[i] for i in fake_idx])
    return {
        "subsets": keys,
        "detection": detection,
        "attribution": attribution,
        "average": {
            "detection": {"acc": avg(detection, "acc"), "f1": avg(detection, "f1")},
            "attribution": {f: avg(attribution, f) for f in ("acc", "f1", "rouge2", "rougeL")},
        },
        "confusion": {"per_subset": confusion, "model_overall": overall["model"]},
        "population": {
            "evaluated": len(truth),
            "unparseable": sum(1 for p in parsed if p.unparseable),
        },
    }

"""Report and label metrics: corpus BLEU-1..4, BLEU-mean, macro P/R/F1, Dice."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .synthvol import Report, extract_labels
from .vocab import BOS, EOS, PAD

# headline values reported for the full model on the chest CT benchmark; not reproduced here
FULL_SCALE_REFERENCE = {"F1": 0.414, "B-mean": 0.349}


def _words(seq) -> list[int]:
    toks = seq.tokens if isinstance(seq, Report) else seq
    return [int(t) for t in toks if int(t) not in (BOS, EOS, PAD)]


def _ngrams(words, n):
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def ngram_stats(hyps, refs, max_n: int = 4):
    """Clipped n-gram matches and hypothesis n-gram totals per order, plus lengths."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _words(h), _words(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += sum(hc.values())
    return matches, totals, hyp_len, ref_len


def bleu_from_stats(matches, totals, hyp_len, ref_len, n: int) -> float:
    if any(m == 0 for m in matches[:n]):
        return 0.0
    log_p = sum(math.log(matches[i] / totals[i]) for i in range(n)) / n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu(hyps, refs, n: int) -> float:
    """Corpus BLEU-n: geometric mean of clipped 1..n-gram precisions times brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    return bleu_from_stats(*ngram_stats(hyps, refs, n), n)


def bleu_scores(hyps, refs) -> list[float]:
    stats = ngram_stats(hyps, refs, 4)
    return [bleu_from_stats(*stats, n) for n in range(1, 5)]


def bleu_mean(hyps, refs) -> float:
    return float(np.mean(bleu_scores(hyps, refs)))


def macro_prf(preds, gts) -> tuple[float, float, float]:
    """Macro-averaged (F1, Precision, Recall); undefined per-class ratios count as 0."""
    preds, gts = np.asarray(preds, dtype=bool), np.asarray(gts, dtype=bool)
    if preds.shape != gts.shape:
        raise ValueError(f"prediction shape {preds.shape} does not match ground truth {gts.shape}")
    if preds.ndim == 1:
        preds, gts = preds[:, None], gts[:, None]
    tp = (preds & gts).sum(0).astype(float)
    fp = (preds & ~gts).sum(0).astype(float)
    fn = (~preds & gts).sum(0).astype(float)
    p = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    r = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    f1 = np.divide(2 * p * r, p + r, out=np.zeros_like(tp), where=(p + r) > 0)
    return float(f1.mean()), float(p.mean()), float(r.mean())


def dice_score(pred, gt, cls: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a, b = pred == cls, gt == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class ReportMetrics:
    run_name: str
    F1: float
    Precision: float
    Recall: float
    B1: float
    B2: float
    B3: float
    B4: float
    B_mean: float
    unparseable: int = 0

    CSV_HEADER = ("run_name", "F1", "Precision", "Recall", "B1", "B2", "B3", "B4", "B-mean")

    def csv_row(self) -> list:
        d = asdict(self)
        return [d["run_name"]] + [f"{d[k]:.6f}" for k in ("F1", "Precision", "Recall", "B1", "B2", "B3", "B4", "B_mean")]


def evaluate_reports(generated, refs, gt_labels, n_classes: int, run_name: str = "run") -> ReportMetrics:
    """Extract labels from generated reports and score them against the ground truth."""
    stats = Counter()
    preds = np.stack([extract_labels(g, n_classes, stats=stats) for g in generated]) if generated else np.zeros((0, n_classes))
    f1, p, r = macro_prf(preds, np.asarray(gt_labels))
    b = bleu_scores(generated, refs)
    return ReportMetrics(run_name, f1, p, r, *b, float(np.mean(b)), stats["unparseable"])

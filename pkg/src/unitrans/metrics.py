"""Corpus-level translation and recognition metrics on a 0-100 scale."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from . import __version__


class MetricError(ValueError):
    pass


_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(text):
    """mteval-v13a tokenisation: split off punctuation, keep ``.``/``,`` between digits."""
    line = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


def _check(hyps, refs):
    if len(hyps) != len(refs):
        raise MetricError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise MetricError("empty corpus")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuResult:
    score: float
    precisions: list          # individual modified n-gram precisions, percent
    cumulative: list          # B@1..B@max_order
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def bleu(hyps, refs, max_order=4, tokenization="pretokenized", smoothing="none"):
    """Corpus BLEU with clipped n-gram counts and a brevity penalty.

    ``cumulative[k-1]`` is B@k: the geometric mean of precisions 1..k times
    the brevity penalty. ``smoothing="exp"`` applies exponential smoothing to
    zero-match orders; with ``"none"`` any zero-match order gives 0.
    """
    _check(hyps, refs)
    tok = tokenize_13a if tokenization == "13a" else str.split
    if tokenization not in ("13a", "pretokenized"):
        raise MetricError(f"unknown tokenization {tokenization!r}")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = tok(h), tok(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(ht) - n + 1, 0)
    precisions = []
    mult = 1.0
    for m, t in zip(matches, totals):
        if m > 0:
            precisions.append(100.0 * m / t)
        elif smoothing == "exp" and t > 0:
            mult *= 2.0
            precisions.append(100.0 / (mult * t))
        else:
            precisions.append(0.0)
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    cumulative = []
    for k in range(1, max_order + 1):
        ps = precisions[:k]
        if min(ps) <= 0.0:
            cumulative.append(0.0)
        else:
            cumulative.append(bp * math.exp(sum(math.log(p / 100.0) for p in ps) / k) * 100.0)
    return BleuResult(cumulative[-1], precisions, cumulative, bp, hyp_len, ref_len)


def chrf(hyps, refs, char_order=6, beta=2.0, include_whitespace=False):
    """Corpus chrF as computed by SacreBLEU 2.x.

    Character n-gram counts are summed over the corpus, precision and recall
    are averaged over the orders where both sides have n-grams, and the
    F-beta of those two averages is returned.
    """
    _check(hyps, refs)
    stats = [[0, 0, 0] for _ in range(char_order)]
    for h, r in zip(hyps, refs):
        if not include_whitespace:
            h, r = "".join(h.split()), "".join(r.split())
        for n in range(1, char_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            s = stats[n - 1]
            # hypothesis n-grams only count where the reference has some of that order
            s[0] += sum(hc.values()) if rc else 0
            s[1] += sum(rc.values())
            s[2] += sum(min(c, rc[g]) for g, c in hc.items())
    avg_p = avg_r = 0.0
    effective = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp == 0 or n_ref == 0:
            continue
        effective += 1
        avg_p += n_match / n_hyp
        avg_r += n_match / n_ref
    if effective == 0:
        return 0.0
    avg_p, avg_r = avg_p / effective, avg_r / effective
    if avg_p + avg_r == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * avg_p * avg_r / (b2 * avg_p + avg_r)


def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyps, refs, beta=1.0):
    """Mean sentence-level ROUGE-L F-score (beta=1: plain F1), percent."""
    _check(hyps, refs)
    total = 0.0
    for h, r in zip(hyps, refs):
        ht, rt = h.split(), r.split()
        lcs = lcs_length(ht, rt)
        if lcs == 0:
            continue
        p, rec = lcs / len(ht), lcs / len(rt)
        total += (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
    return 100.0 * total / len(refs)


def edit_distance(a, b):
    """Word-level Levenshtein distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(hyps, refs):
    """Corpus word error rate: summed edit distance over summed reference length, percent."""
    if len(hyps) != len(refs):
        raise MetricError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    ref_words = sum(len(r.split()) for r in refs)
    if ref_words == 0:
        raise MetricError("WER needs a non-empty reference corpus")
    errors = sum(edit_distance(h.split(), r.split()) for h, r in zip(hyps, refs))
    return 100.0 * errors / ref_words


@dataclass
class EvalReport:
    scores: dict = field(default_factory=dict)
    precisions: list = field(default_factory=list)
    brevity_penalty: float | None = None
    signatures: list = field(default_factory=list)

    def lines(self):
        out = [f"{k}:{v:.2f}" for k, v in self.scores.items()]
        if self.precisions:
            out.append("ngram_precisions:" + "/".join(f"{p:.2f}" for p in self.precisions))
        if self.brevity_penalty is not None:
            out.append(f"brevity_penalty:{self.brevity_penalty:.4f}")
        out.extend(f"signature:{s}" for s in self.signatures)
        return out

    def render(self):
        return "\n".join(self.lines()) + "\n"


def evaluate(hyps, refs, mode="text", smoothing="none"):
    """Full report: B@1-4, sBLEU, chrF and ROUGE-L for text output, WER for gloss output."""
    _check(hyps, refs)
    report = EvalReport()
    if mode == "gloss":
        report.scores["WER"] = wer(hyps, refs)
        report.signatures.append(f"WER+c.mixed+#refs.1+tok.none+v.{__version__}")
        return report
    b = bleu(hyps, refs, 4, "pretokenized")
    for k, v in enumerate(b.cumulative, start=1):
        report.scores[f"B@{k}"] = v
    report.precisions = b.precisions
    report.brevity_penalty = b.brevity_penalty
    report.scores["sBLEU"] = bleu(hyps, refs, 4, "13a", smoothing).score
    report.scores["chrF"] = chrf(hyps, refs)
    report.scores["ROUGE"] = rouge_l(hyps, refs)
    s = "exp" if smoothing == "exp" else "none"
    report.signatures.append(f"BLEU+c.mixed+#refs.1+s.{s}+tok.13a+v.{__version__}")
    report.signatures.append(f"chrF2+c.mixed+#chars.6+#refs.1+space.False+v.{__version__}")
    return report

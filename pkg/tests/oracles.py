"""Brute-force reference computations used to check the metric implementations."""
import math


def all_ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def occurrences(seq_of_ngrams, g):
    return sum(1 for x in seq_of_ngrams if x == g)


def clipped_precision(hyp, refs, n):
    grams = all_ngrams(hyp, n)
    matched = 0
    for g in set(grams):
        best_ref = max(occurrences(all_ngrams(r, n), g) for r in refs)
        matched += min(occurrences(grams, g), best_ref)
    return matched, len(grams)


def bleu4(hyp, refs):
    if not hyp:
        return 0.0
    prod = 1.0
    for n in range(1, 5):
        m, t = clipped_precision(hyp, refs, n)
        if m == 0:
            return 0.0
        prod *= m / t
    c = len(hyp)
    r = sorted(refs, key=lambda x: (abs(len(x) - c), len(x)))[0]
    bp = 1.0 if c > len(r) else math.exp(1 - len(r) / c)
    return bp * prod ** 0.25


def corpus_bleu4(corpus):
    """corpus: list of (hyp, refs); sums clipped counts and lengths first."""
    c = sum(len(h) for h, _ in corpus)
    if c == 0:
        return 0.0
    prod = 1.0
    for n in range(1, 5):
        m = sum(clipped_precision(h, refs, n)[0] for h, refs in corpus)
        t = sum(clipped_precision(h, refs, n)[1] for h, refs in corpus)
        if m == 0:
            return 0.0
        prod *= m / t
    r = sum(len(sorted(refs, key=lambda x: (abs(len(x) - len(h)), len(x)))[0]) for h, refs in corpus)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * prod ** 0.25


def lcs(a, b):
    if not a or not b:
        return 0
    if a[-1] == b[-1]:
        return lcs(a[:-1], b[:-1]) + 1
    return max(lcs(a[:-1], b), lcs(a, b[:-1]))


def rouge_l(hyp, refs, beta=1.2):
    best = 0.0
    for ref in refs:
        l = lcs(tuple(hyp), tuple(ref))
        if l == 0:
            continue
        p, r = l / len(hyp), l / len(ref)
        best = max(best, (1 + beta * beta) * r * p / (r + beta * beta * p))
    return best


def edit_distance(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(edit_distance(a[1:], b) + 1, edit_distance(a, b[1:]) + 1,
               edit_distance(a[1:], b[1:]) + (a[0] != b[0]))


def cider(corpus):
    """corpus: list of (hyp, refs). Direct tf-idf cosine evaluation."""
    N = len(corpus)
    out = [0.0] * N
    for n in range(1, 5):
        def df(g):
            return sum(1 for _, refs in corpus if any(g in all_ngrams(r, n) for r in refs))

        def vec(tokens):
            grams = all_ngrams(tokens, n)
            v = {}
            for g in set(grams):
                d = max(1, df(g))
                v[g] = grams.count(g) / len(grams) * math.log(N / d)
            return v

        for i, (hyp, refs) in enumerate(corpus):
            hv = vec(hyp)
            sims = []
            for r in refs:
                rv = vec(r)
                keys = set(hv) | set(rv)
                dot = sum(hv.get(k, 0) * rv.get(k, 0) for k in keys)
                nh = math.sqrt(sum(x * x for x in hv.values()))
                nr = math.sqrt(sum(x * x for x in rv.values()))
                sims.append(dot / (nh * nr) if nh > 0 and nr > 0 else 0.0)
            out[i] += sum(sims) / len(sims)
    return [10 * s / 4 for s in out]

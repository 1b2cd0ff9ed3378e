"""Independent brute-force reference implementations used by the metric tests."""

from fractions import Fraction
from itertools import product

INF = float("inf")


def exact_sum(xs):
    return float(sum((Fraction(x) for x in xs), Fraction(0)))


def avg_loss(row):
    losses = [-x for x in row if x < 0]
    if not losses:
        return 0.0
    return exact_sum(losses) / len(losses)


def improved(row):
    n = 0
    for x in row:
        if x > 0:
            n += 1
    return n


def ratios(row):
    gains = [x for x in row if x > 0]
    losses = [x for x in row if x < 0]
    if not losses:
        return INF, INF
    if not gains:
        return 0.0, 0.0
    return exact_sum(gains) / abs(exact_sum(losses)), max(gains) / abs(min(losses))


def worst_stage(losses):
    top = max(losses)
    return [i for i, v in enumerate(losses) if v == top][0] + 1


def ordering(row):
    # selection sort: repeatedly take the largest change, smallest language id on ties
    remaining = dict(row)
    out = []
    while remaining:
        best = None
        for lang in sorted(remaining):
            if best is None or remaining[lang] > remaining[best]:
                best = lang
        out.append(best)
        del remaining[best]
    return out


def edit_distance(a, b):
    """Levenshtein by memoised recursion over suffixes."""
    memo = {}

    def go(i, j):
        if (i, j) in memo:
            return memo[i, j]
        if i == len(a):
            r = len(b) - j
        elif j == len(b):
            r = len(a) - i
        else:
            r = min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))
        memo[i, j] = r
        return r

    return go(0, 0)


def closest_check(languages, dist, matrix):
    hits = 0
    for i, row_lang in enumerate(languages):
        ranked = sorted((dist[i][j], languages[j], j) for j in range(len(languages)) if j != i)
        j1, j2 = ranked[0][2], ranked[1][2]
        hits += matrix[i][j1] >= matrix[i][j2]
    return hits / len(languages)

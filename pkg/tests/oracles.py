"""Brute-force reference implementations used as independent oracles."""

import math


def brute_errors(pred, gt):
    p, t = len(pred), len(pred[0])
    return [[1000.0 * math.sqrt(sum((pred[i][j][k] - gt[i][j][k]) ** 2 for k in range(3))) for j in range(t)]
            for i in range(p)]


def brute_median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def brute_mte(pred, gt):
    return brute_median([e for row in brute_errors(pred, gt) for e in row])


def brute_delta(pred, gt, thresholds=(10.0, 20.0, 40.0, 80.0, 160.0)):
    flat = [e for row in brute_errors(pred, gt) for e in row]
    fracs = [sum(1 for e in flat if e <= th) / len(flat) for th in thresholds]
    return fracs, sum(fracs) / len(fracs)


def brute_survival(pred, gt, threshold=50.0):
    errs = brute_errors(pred, gt)
    total = 0.0
    for row in errs:
        first = len(row)
        for j, e in enumerate(row):
            if e > threshold:
                first = j
                break
        total += first / len(row)
    return total / len(errs)

#!/bin/python

"""Statistics over repeated campaigns: runs, mean TTE, speedup, Vargha-Delaney
effect size and the Mann-Whitney U test.

Smaller TTE is better.  Campaigns that time out enter every statistic at the
timeout value.
"""

import bisect
import itertools
import math
from dataclasses import dataclass
from typing import List

import pandas as pd
import scipy.stats as ss

from gfuzz.errors import ValidationError

EXACT_LIMIT = 16
MAGNITUDE_LEVELS = [0.147, 0.33, 0.474]
MAGNITUDES = ["negligible", "small", "medium", "large"]
COLUMNS = ["Target", "Fuzzer", "runs", "μTTE", "Speedup", "Â12", "p-value"]
NA = "n/a"


@dataclass(frozen=True)
class TteSample:
    """TTEs of repeated campaigns, censored at the timeout

    :ivar hits: Number of campaigns that hit the target
    """
    values: List[float]
    timeout: float
    hits: int

    @classmethod
    def from_values(cls, values, timeout):
        """Sample where every value below the timeout is a hit"""
        values = [min(v, timeout) for v in values]
        return cls(values, timeout, sum(1 for v in values if v < timeout))

    @classmethod
    def from_results(cls, results, timeout):
        """Sample of CampaignResults; a hit exactly at the timeout counts"""
        values = [min(r.tte, timeout) for r in results]
        return cls(values, timeout, sum(1 for r in results if r.hit))


@dataclass(frozen=True)
class Summary:
    runs: int
    mu_tte: float


def summarize(a):
    """Number of hits and mean TTE of a sample

    >>> summarize(TteSample.from_values([1, 24], 24))
    Summary(runs=1, mu_tte=12.5)
    """
    if not a.values:
        raise ValidationError("Cannot summarize an empty sample")
    return Summary(runs=a.hits, mu_tte=sum(a.values) / len(a.values))


def speedup(baseline, ours):
    """Ratio of the baseline's mean TTE to ours"""
    mu = summarize(ours).mu_tte
    if mu == 0:
        raise ValidationError("Speedup is undefined for a mean TTE of 0")
    return summarize(baseline).mu_tte / mu


def a12(ours, baseline):
    """Probability that a draw of ours beats (is smaller than) a draw of the
    baseline, ties counting one half"""
    _check(ours, baseline)
    wins = sum(1 for x in ours for y in baseline if x < y)
    ties = sum(1 for x in ours for y in baseline if x == y)
    return (wins + 0.5 * ties) / (len(ours) * len(baseline))


def vd_magnitude(effect):
    """Magnitude label of an Â12 value"""
    scaled = abs(effect - 0.5) * 2
    return MAGNITUDES[bisect.bisect_left(MAGNITUDE_LEVELS, scaled)]


def mann_whitney_p(ours, baseline, method="auto", two_sided=False):
    """P-value of the Mann-Whitney U test that ours has smaller values

    The statistic is U = #{ours < baseline} + #{ties} / 2.  With
    ``method="auto"`` the exact permutation distribution is used when the
    samples have at most 16 values together, the normal approximation with
    tie and continuity corrections otherwise.

    :param method: ``auto``, ``exact`` or ``asymptotic``
    :param two_sided: Test for any difference instead of ours being smaller
    :rtype: float
    """
    _check(ours, baseline)
    m, n = len(ours), len(baseline)
    if method == "auto":
        method = "exact" if m + n <= EXACT_LIMIT else "asymptotic"
    if method == "exact":
        return _exact_p(list(ours), list(baseline), two_sided)
    if method != "asymptotic":
        raise ValidationError("Unknown method: {}".format(method))
    res = ss.mannwhitneyu(ours, baseline,
                          alternative="two-sided" if two_sided else "less",
                          use_continuity=True, method="asymptotic")
    return float(res.pvalue)


def compare(baseline, ours, method="auto", two_sided=False):
    """Row of statistics for ours against the baseline

    Effect size and p-value need at least two repetitions on each side.

    :type baseline: TteSample
    :type ours: TteSample
    :rtype: dict
    """
    s = summarize(ours)
    try:
        up = round(speedup(baseline, ours), 2)
    except ValidationError:
        up = NA
    row = {"runs": s.runs, "μTTE": round(s.mu_tte, 2), "Speedup": up,
           "Â12": NA, "p-value": NA}
    if len(ours.values) >= 2 and len(baseline.values) >= 2:
        row["Â12"] = round(a12(ours.values, baseline.values), 2)
        row["p-value"] = round(mann_whitney_p(ours.values, baseline.values,
                                              method, two_sided), 4)
    return row


def report_table(rows):
    """Collect rows into a table with the report columns

    :rtype: pandas.DataFrame
    """
    return pd.DataFrame(rows, columns=COLUMNS)


def render_text(df):
    return df.to_string(index=False)


def _check(ours, baseline):
    if not len(ours) or not len(baseline):
        raise ValidationError("Both samples must be nonempty")


def _exact_p(ours, baseline, two_sided):
    m, n = len(ours), len(baseline)
    # Doubled average ranks keep U an exact integer under ties
    doubled = [int(round(2 * r)) for r in ss.rankdata(ours + baseline)]
    mn2 = 2 * m * n + m * (m + 1)

    def u2(idx):
        return mn2 - sum(doubled[i] for i in idx)

    observed = u2(range(m))
    total = extreme = 0
    for idx in itertools.combinations(range(m + n), m):
        u = u2(idx)
        total += 1
        if two_sided:
            extreme += abs(u - m * n) >= abs(observed - m * n)
        else:
            extreme += u >= observed
    assert(total == math.comb(m + n, m))
    return extreme / total

"""Smoke test for the python module: a few frozen values per binding."""

import math
import sys

import dsm


def check(cond, what):
    if not cond:
        print("FAIL:", what)
        sys.exit(1)
    print("ok:", what)


def main():
    toks = dsm.normalize_text("Best Restaurants in Boston!")
    check(toks == ["best", "restaurants", "in", "boston"], "normalize_text")

    url = dsm.normalize_text("www.Example-Site.com/deals")
    check(url == ["www", "example", "site", "com", "deals"], "url splitting")

    a = dsm.auc([0.1, 0.4, 0.35, 0.8], [0.0, 0.0, 1.0, 1.0])
    check(abs(a - 0.75) < 1e-12, "auc frozen value")
    try:
        dsm.auc([0.1, 0.2], [1.0, 1.0])
        check(False, "auc single-class should raise")
    except ValueError:
        check(True, "auc single-class raises ValueError")

    w = dsm.wilcoxon_signed_rank(
        [float(i) for i in range(1, 11)],
        [2.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    )
    check(w["w"] == 3.0 and w["n"] == 10, "wilcoxon statistic")
    check(abs(w["p"] - 0.014432823938841799) < 1e-9, "wilcoxon p-value")

    sm = dsm.masked_softmax([1.0, 2.0, 3.0, 4.0], [True, False, True, False])
    check(sm[1] == 0.0 and sm[3] == 0.0, "masked entries exactly zero")
    check(abs(sum(sm) - 1.0) < 1e-12, "softmax sums to one")
    check(sm[2] > sm[0], "softmax orders scores")

    g = dsm.micro_gradcheck(seed=1)
    check(g["max_rel_err"] < 1e-4, "micro gradcheck under tolerance")
    check(g["coords_checked"] > 500, "gradcheck coverage")

    s = dsm.generate_corpus_summary(seed=1, n_searches=2000, n_queries=200)
    check(s["n_train"] + s["n_valid"] + s["n_test"] == 2000, "corpus split sizes")
    check(0.0 < s["mean_relevance"] < 1.0, "mean relevance in range")
    check(0.5 < s["bayes_auc_bound"] < 1.0, "bayes auc bound sane")
    check(math.isfinite(s["bias_true"]), "bias finite")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

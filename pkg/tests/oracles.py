"""Independent reference implementations shared by the unit and acceptance tests."""

import math


def naive_ssim(a, b, data_range=2.0):
    """Per-window double loop over every fully contained 11x11 Gaussian window."""
    g1 = [math.exp(-0.5 * ((k - 5) / 1.5) ** 2) for k in range(11)]
    tot = sum(g1)
    g = [[g1[i] * g1[j] / tot ** 2 for j in range(11)] for i in range(11)]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    H, W = a.shape
    vals = []
    for r in range(H - 10):
        for c in range(W - 10):
            ma = mb = 0.0
            for i in range(11):
                for j in range(11):
                    ma += g[i][j] * a[r + i, c + j]
                    mb += g[i][j] * b[r + i, c + j]
            va = vb = cov = 0.0
            for i in range(11):
                for j in range(11):
                    da, db = a[r + i, c + j] - ma, b[r + i, c + j] - mb
                    va += g[i][j] * da * da
                    vb += g[i][j] * db * db
                    cov += g[i][j] * da * db
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def closed_form(s_start, s_end, sd=0.5):
    """Exact probability-flow factor for the linear-oracle denoiser.

    dx/dsigma = x sigma / (sigma^2 + sd^2)  =>  x ~ sqrt(sigma^2 + sd^2)
    """
    return math.sqrt((s_end ** 2 + sd ** 2) / (s_start ** 2 + sd ** 2))

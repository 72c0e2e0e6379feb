"""High-precision reference for the step-exponent sweep tables.

Regenerate with `python3 sweep_oracle.py` from this directory (needs mpmath).
"""

import csv

from mpmath import mp, mpf, log, ceil

mp.dps = 60

HORIZON_FACTOR = mpf("15.16")
GAMMA = 0.1


def k_values():
    # same binary values as lo + i * step in double precision
    return [0.55 + i * 0.01 for i in range(45)]


def n0(m, eps, gamma, k):
    m, eps, gamma, k = mpf(m), mpf(eps), mpf(gamma), mpf(k)
    q = 2 * k - 1
    terms = [
        (m / eps) ** (1 / k),
        (m / (eps * q)) ** (1 / q),
        (m / (eps**2 * q)) ** (1 / q),
        (m / eps) ** (2 / k),
        (m * log(1 / gamma) / (eps**2 * q)) ** (1 / q),
        (2 * m * k / (eps * q)) ** (1 / q),
    ]
    return max([mpf(1)] + terms)


def n_prime0(n, k):
    r = 1 - mpf(k)
    return (n**r + HORIZON_FACTOR * r) ** (1 / r)


def main():
    for m, m_tag in ((1e-7, "1e-7"), (100.0, "100")):
        for eps, eps_tag in ((0.01, "0.01"), (0.001, "0.001")):
            name = f"sweep_M{m_tag}_eps{eps_tag}.csv"
            with open(name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["k", "n0", "N_prime0"])
                for k in k_values():
                    a = n0(m, eps, GAMMA, k)
                    b = n_prime0(a, k)
                    w.writerow([repr(k), mp.nstr(a, 20), mp.nstr(b, 20)])


if __name__ == "__main__":
    main()

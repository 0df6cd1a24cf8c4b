"""Independent reference values frozen into the C++ tests.

Run: python3 tests/oracle/oracle.py
"""
import math

import numpy as np
from scipy.stats import norm


def ring(L):
    t = np.zeros((L, L))
    for i in range(L):
        for j in (i - 1, i, i + 1):
            t[i, j % L] += 1.0 / 3.0
    return t


def main():
    # axpy by scalar loop
    x, y, a = [10.0, 20.0], [5.0, 5.0], -0.1
    print("axpy", [yi + a * xi for xi, yi in zip(x, y)])

    # 1-d quadratic, curvature 1, optimum 0, w0 = 1, alpha 0.1: ten SGD steps
    w = 1.0
    for _ in range(10):
        w -= 0.1 * (1.0 * (w - 0.0))
    print("quadratic_10_steps %.17g" % w)

    # W T for models 1..4 on the 4-ring, learner 0 (column 0)
    W = np.array([[1.0, 2.0, 3.0, 4.0]])
    print("ring4_learner0 %.17g" % (W @ ring(4))[0, 0])

    # row 0 of the 7-ring
    print("ring7_row0", ring(7)[0].tolist())

    # second eigenvalue of the 16-ring and steps until T^n is within 1e-3 of uniform
    T = ring(16)
    ev = sorted(np.abs(np.linalg.eigvals(T)), reverse=True)
    lam = (1 + 2 * math.cos(2 * math.pi / 16)) / 3
    print("lambda2_eig %.17g closed %.17g" % (ev[1], lam))
    U = np.full((16, 16), 1 / 16)
    P = np.eye(16)
    n = 0
    while np.linalg.norm(P - U, 2) >= 1e-3:
        P = P @ T
        n += 1
    print("ring16_steps_to_1e-3", n, "lambda2^n %.6g" % lam ** n)

    # schedules
    f = 1 / math.sqrt(2)
    base = [0.1 if e < 10 else 0.1 * f ** (e - 9) for e in range(16)]
    print("baseline_lr", ["%.17g" % v for v in base])
    warm = [0.1 + (1.0 - 0.1) * e / 9 if e < 10 else f ** (e - 9) for e in range(16)]
    print("warmup_lr", ["%.17g" % v for v in warm])
    print("anneal_applications", sum(1 for e in range(16) if e >= 10))

    # Bayes accuracy of two unit-variance Gaussians whose means are 4 apart
    print("bayes_accuracy_sep4 %.6f" % norm.cdf(4.0 / 2))

    # straggler epoch ratios the virtual-time run must reproduce
    for slow, hours in ((2, 1.67), (10, 6.24), (100, 57.73)):
        print("sync_straggler_ratio x%d %.6f" % (slow, hours / 1.09))
    print("ad_straggler_ratio x100 %.6f" % (0.92 / 0.87))

    # Amdahl examples
    for p in (0.0, 0.5, 0.96):
        print("amdahl p=%.2f %.17g" % (p, 1 / (1 - p)))

    # async PS round robin with equal speeds: learner l's gradient is applied after
    # the other L-1 learners' updates since its pull
    L = 16
    version, pulled, taus = 0, [0] * L, []
    for step in range(50 * L):
        l = step % L
        taus.append(version - pulled[l])
        version += 1
        pulled[l] = version
    print("round_robin_tau_steady", set(taus[L:]))


if __name__ == "__main__":
    main()

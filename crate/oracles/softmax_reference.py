"""High-precision reference for the softmax loss at t = 1e4.

Inputs are f64 values printed with repr, so the reference sees exactly the
numbers the Rust code sees. Everything downstream runs at 60 digits.
"""
import math
from mpmath import mp, mpf, exp, log

mp.dps = 60


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def rows():
    base = [0.6, 0.64, 0.48]
    img_offsets = [(0.0, 0.0, 0.0), (0.011, -0.004, 0.002), (-0.006, 0.009, -0.001), (0.003, 0.002, -0.012)]
    txt_offsets = [(0.001, 0.003, -0.002), (0.004, -0.010, 0.003), (-0.008, 0.006, 0.001), (0.009, 0.001, -0.007)]
    zimg = [unit([b + o for b, o in zip(base, off)]) for off in img_offsets]
    ztxt = [unit([b + o for b, o in zip(base, off)]) for off in txt_offsets]
    return zimg, ztxt


def reference(zimg, ztxt, t_prime):
    n = len(zimg)
    t = exp(mpf(t_prime))
    X = [[mpf(v) for v in r] for r in zimg]
    Y = [[mpf(v) for v in r] for r in ztxt]
    logits = [[t * sum(a * b for a, b in zip(X[i], Y[j])) for j in range(n)] for i in range(n)]
    lse_r = [log(sum(exp(l) for l in logits[i])) for i in range(n)]
    lse_c = [log(sum(exp(logits[i][j]) for i in range(n))) for j in range(n)]
    loss = sum((lse_r[i] - logits[i][i]) + (lse_c[i] - logits[i][i]) for i in range(n)) / (2 * n)
    P = [[exp(logits[i][j] - lse_r[i]) for j in range(n)] for i in range(n)]
    Q = [[exp(logits[i][j] - lse_c[j]) for j in range(n)] for i in range(n)]
    G = [[(P[i][j] + Q[i][j] - (2 if i == j else 0)) / (2 * n) for j in range(n)] for i in range(n)]
    d = len(X[0])
    dx = [[t * sum(G[i][j] * Y[j][k] for j in range(n)) for k in range(d)] for i in range(n)]
    dy = [[t * sum(G[i][j] * X[i][k] for i in range(n)) for k in range(d)] for j in range(n)]
    dtp = sum(G[i][j] * logits[i][j] for i in range(n) for j in range(n))
    return loss, dx, dy, dtp


if __name__ == "__main__":
    zimg, ztxt = rows()
    t_prime = math.log(1e4)
    print("t_prime", repr(t_prime))
    print("zimg", [[repr(v) for v in r] for r in zimg])
    print("ztxt", [[repr(v) for v in r] for r in ztxt])
    loss, dx, dy, dtp = reference(zimg, ztxt, t_prime)
    print("loss", mp.nstr(loss, 20))
    print("d_t_prime", mp.nstr(dtp, 20))
    print("d_zimg", [[mp.nstr(v, 20) for v in r] for r in dx])
    print("d_ztxt", [[mp.nstr(v, 20) for v in r] for r in dy])
    # All-equal rows: every logit ties.
    same = [unit([0.6, 0.64, 0.48])] * 5
    loss, dx, dy, dtp = reference(same, same, t_prime)
    print("all_equal loss", mp.nstr(loss, 20), "ln5", mp.nstr(log(5), 20), "max|dx|", mp.nstr(max(abs(v) for r in dx for v in r), 5))

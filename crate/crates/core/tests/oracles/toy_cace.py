"""Independent enumeration of the toy DGP's exact effects.

Rebuilds the toy features and rating model from scratch with mpmath and
prints E[f | do(target)] - E[f | do(source)] for the shipped pair.
"""
from itertools import product

import mpmath as mp

mp.mp.dps = 40

TASTE = [[-1, 0.5], [0, 1], [1, 0.5]]
PRICE = [[0, 1], [1, 0]]
P_TASTE = [mp.mpf("0.3"), mp.mpf("0.45"), mp.mpf("0.25")]
P_PRICE = [mp.mpf("0.6"), mp.mpf("0.4")]
V = [-1, 0, 1]
DIRECTION = [mp.mpf("0.5"), mp.mpf("0.1"), mp.mpf("0.6"), mp.mpf("-0.2"), mp.mpf("0.3")]
BIAS = [0, mp.mpf("0.3"), mp.mpf("0.5"), mp.mpf("0.3"), 0]


def predict(x):
    s = sum(d * xi for d, xi in zip(DIRECTION, x))
    scores = [(k - 2) * s + BIAS[k] for k in range(5)]
    z = sum(mp.e ** sc for sc in scores)
    return [mp.e ** sc / z for sc in scores]


def features(taste, price, v):
    return TASTE[taste] + PRICE[price] + [V[v]]


def cace(concept, source, target):
    total = [mp.mpf(0)] * 5
    for t, p, v in product(range(3), range(2), range(3)):
        w = P_TASTE[t] * P_PRICE[p] / 3
        if concept == "Taste":
            after, before = features(target, p, v), features(source, p, v)
        else:
            after, before = features(t, target, v), features(t, source, v)
        fa, fb = predict(after), predict(before)
        total = [acc + w * (a - b) for acc, a, b in zip(total, fa, fb)]
    return total


for name, args in [("taste bad->good", ("Taste", 0, 2)), ("price low->high", ("Price", 0, 1))]:
    vec = cace(*args)
    print(name, [mp.nstr(x, 17) for x in vec], "scalar", mp.nstr(sum(k * x for k, x in enumerate(vec)), 17))

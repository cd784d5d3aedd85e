"""Independent enumerator working directly on the JSON form of a DGP.

It shares no code with the package: tables are looked up by formatting
the current assignment into the same "name=bit,..." keys the JSON uses,
and the joint law is built by plain recursion over the temporal order.
"""
from __future__ import annotations

import itertools

import numpy as np


class Lookup:
    def __init__(self, table: dict):
        first = next(iter(table))
        self.names = [t.split("=")[0] for t in first.split(",") if t]
        self.table = table

    def __call__(self, assign: dict) -> float:
        key = ",".join(f"{n}={assign[n]}" for n in self.names)
        return self.table[key]


def _order(spec: dict):
    J, cols = spec["J"], spec["l_columns"]
    out = []
    for j in range(J):
        out.append(("u", j))
        out.extend((c, j) for c in cols)
        out.append(("z", j))
        out.append(("a", j))
    return out


def enumerate_paths(spec: dict, regime=None):
    """List of (probability, assignment) over every full history.

    With a regime, each A(j) is set to regime[j] with probability one.
    """
    J, cols = spec["J"], spec["l_columns"]
    pU = [Lookup(t) for t in spec["pU"]]
    pL = [{c: Lookup(spec["pL"][j][c]) for c in cols} for j in range(J)]
    pZ = [Lookup(t) for t in spec["pZ"]]
    b = [Lookup(t) for t in spec["b"]]
    eff = spec.get("delta_u") or spec["delta"]
    d = [Lookup(t) for t in eff]
    order = _order(spec)
    out = []

    def prob1(var, assign):
        name, j = var
        if name == "u":
            return pU[j](assign)
        if name == "z":
            return pZ[j](assign)
        if name == "a":
            return b[j](assign) + assign[f"z{j}"] * d[j](assign)
        return pL[j][name](assign)

    def rec(i, p, assign):
        if p == 0.0:
            return
        if i == len(order):
            out.append((p, dict(assign)))
            return
        name, j = order[i]
        key = f"{name}{j}"
        if name == "a" and regime is not None:
            assign[key] = int(regime[j])
            rec(i + 1, p, assign)
            return
        p1 = prob1((name, j), assign)
        for bit, q in ((0, 1.0 - p1), (1, p1)):
            assign[key] = bit
            rec(i + 1, p * q, assign)
        del assign[key]

    rec(0, 1.0, {})
    return out


def counterfactual_means(spec: dict) -> dict:
    """E[Y_a] for every regime a, by the latent g-formula."""
    muY = Lookup(spec["muY"])
    out = {}
    for a in itertools.product((0, 1), repeat=spec["J"]):
        out[a] = sum(p * muY(s) for p, s in enumerate_paths(spec, a))
    return out


def beta0(spec: dict, features) -> np.ndarray:
    """Least-squares MSM fit to the counterfactual means under a uniform f*.

    ``features(a) -> list`` maps a regime tuple to its design row.
    """
    cm = counterfactual_means(spec)
    X = np.array([features(a) for a in cm])
    y = np.array(list(cm.values()))
    return np.linalg.lstsq(X, y, rcond=None)[0]


def arm_contrasts(spec: dict) -> list[tuple[float, float]]:
    """(observed contrast, structural effect) for every reachable latent
    history at every time, the contrast computed from observable cells."""
    J, cols = spec["J"], spec["l_columns"]
    paths = enumerate_paths(spec)
    eff = [Lookup(t) for t in (spec.get("delta_u") or spec["delta"])]
    out = []
    for j in range(J):
        hist = [f"{c}{k}" for k in range(j + 1) for c in cols]
        hist += [f"{x}{k}" for k in range(j) for x in ("z", "a")]
        num, den = {}, {}
        for p, s in paths:
            key = (tuple(s[h] for h in hist), s[f"z{j}"])
            num[key] = num.get(key, 0.0) + p * s[f"a{j}"]
            den[key] = den.get(key, 0.0) + p
        for p, s in paths:
            h = tuple(s[x] for x in hist)
            if den.get((h, 1), 0) > 0 and den.get((h, 0), 0) > 0:
                c = num[h, 1] / den[h, 1] - num[h, 0] / den[h, 0]
                out.append((c, eff[j](s)))
    return out

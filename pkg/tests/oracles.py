"""Independent brute-force re-implementations used as test oracles."""

import math


class DictArchiveOracle:
    """Plain-dict mirror of the two-layer soft-threshold archive."""

    def __init__(self, lo, hi, cells, alpha, t0=0.0, qd_floor=0.0):
        self.lo, self.hi, self.cells = lo, hi, cells
        self.alpha, self.t0, self.qd_floor = alpha, t0, qd_floor
        self.thresholds = {}
        self.best = {}

    def cell(self, m):
        idx = []
        for j in range(len(self.cells)):
            x = math.floor((m[j] - self.lo[j]) / (self.hi[j] - self.lo[j]) * self.cells[j])
            idx.append(min(max(x, 0), self.cells[j] - 1))
        return tuple(idx)

    def insert(self, f, m):
        c = self.cell(m)
        t = self.thresholds.get(c, self.t0)
        accepted = f > t
        improvement = f - t if accepted else 0.0
        if accepted:
            self.thresholds[c] = (1.0 - self.alpha) * t + self.alpha * f
        newly = c not in self.best
        if newly or f > self.best[c]:
            self.best[c] = f
        else:
            newly = False
        return accepted, improvement, newly

    def metrics(self):
        n = len(self.best)
        total = math.prod(self.cells)
        if n == 0:
            return {"qd_score": 0.0, "coverage": 0.0, "occupied": 0}
        qd = sum(max(f - self.qd_floor, 0.0) for f in self.best.values())
        return {"qd_score": qd, "coverage": n / total, "occupied": n,
                "best": max(self.best.values()),
                "average": sum(self.best.values()) / n}

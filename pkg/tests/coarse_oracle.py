"""Brute-force definitional scans for the phase fields and contours.

Written independently of the package: plain loops, no prefix sums, no
morphology.
"""

import math
from collections import deque


def square_energy(theta, r, ell):
    x0, y0 = r
    e = 0.0
    for x in range(x0, x0 + ell):
        for y in range(y0, y0 + ell):
            if x + 1 < x0 + ell:
                e += 2 - 2 * math.cos(theta[x + 1][y] - theta[x][y])
            if y + 1 < y0 + ell:
                e += 2 - 2 * math.cos(theta[x][y + 1] - theta[x][y])
    return e


def square_mean_e1(theta, r, ell):
    x0, y0 = r
    return sum(math.cos(theta[x][y]) for x in range(x0, x0 + ell) for y in range(y0, y0 + ell)) / ell**2


def anchors(n, ell):
    return [(a, b) for a in range(0, n - ell + 1, ell // 2) for b in range(0, n - ell + 1, ell // 2)]


def near(z, r, R):
    return (z[0] - r[0]) ** 2 + (z[1] - r[1]) ** 2 <= R * R


def psi_fields(theta, ell, thr, xi):
    n = len(theta)
    A = anchors(n, ell)
    energy = {r: square_energy(theta, r, ell) for r in A}
    mean = {r: square_mean_e1(theta, r, ell) for r in A}
    p0 = [[0] * n for _ in range(n)]
    p1 = [[0] * n for _ in range(n)]
    for x in range(n):
        for y in range(n):
            rs = [r for r in A if near((x, y), r, 2 * ell)]
            p0[x][y] = int(all(energy[r] <= thr for r in rs))
            if all(mean[r] >= 1 - xi for r in rs):
                p1[x][y] = 1
            elif all(mean[r] <= -1 + xi for r in rs):
                p1[x][y] = -1
    psi = [[p0[x][y] * p1[x][y] for y in range(n)] for x in range(n)]
    return p0, p1, psi


def Psi_blocks(psi, L):
    n = len(psi)
    nb = n // L
    val = {}
    for i in range(nb):
        for j in range(nb):
            vs = {psi[x][y] for x in range(i * L, i * L + L) for y in range(j * L, j * L + L)}
            val[i, j] = vs.pop() if len(vs) == 1 else 0
    out = [[0] * nb for _ in range(nb)]
    for i in range(nb):
        for j in range(nb):
            nbrs = [val[a, b] for a in range(nb) for b in range(nb) if (a - i) ** 2 + (b - j) ** 2 <= 4]
            if all(v == 1 for v in nbrs):
                out[i][j] = 1
            elif all(v == -1 for v in nbrs):
                out[i][j] = -1
    return out


def contours(Psi_b, psi, L):
    """List of (sorted block anchors, sign) for the 8-connected zero components."""
    nb = len(Psi_b)
    n = nb * L
    seen = set()
    out = []
    for i in range(nb):
        for j in range(nb):
            if Psi_b[i][j] != 0 or (i, j) in seen:
                continue
            comp, q = [], deque([(i, j)])
            seen.add((i, j))
            while q:
                a, b = q.popleft()
                comp.append((a, b))
                for da in (-1, 0, 1):
                    for db in (-1, 0, 1):
                        c = (a + da, b + db)
                        if 0 <= c[0] < nb and 0 <= c[1] < nb and c not in seen and Psi_b[c[0]][c[1]] == 0:
                            seen.add(c)
                            q.append(c)
            blocks = set(comp)
            # exterior: 4-connected complement component reaching outside the frame
            lo, hi = -1, n
            inside = lambda x, y: (x // L, y // L) in blocks if 0 <= x < n and 0 <= y < n else False
            ext, q = {(lo, lo)}, deque([(lo, lo)])
            while q:
                x, y = q.popleft()
                for u, v in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                    if lo <= u <= hi and lo <= v <= hi and (u, v) not in ext and not inside(u, v):
                        ext.add((u, v))
                        q.append((u, v))
            delta = {(a + da, b + db) for a, b in blocks for da in (-1, 0, 1) for db in (-1, 0, 1)}
            vals = set()
            for a, b in delta:
                for x in range(a * L, a * L + L):
                    for y in range(b * L, b * L + L):
                        if 0 <= x < n and 0 <= y < n and (x, y) in ext:
                            vals.add(psi[x][y])
            sign = vals.pop() if len(vals) == 1 and vals <= {1, -1} else 0
            out.append((sorted((a * L, b * L) for a, b in blocks), sign))
    return sorted(out)

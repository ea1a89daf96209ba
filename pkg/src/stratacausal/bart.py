"""Bayesian additive regression trees.

A sum-of-trees model ``y = sum_j g(x; T_j, M_j) + e`` fit by Bayesian
backfitting. Each sweep updates every tree against the partial residual of the
others with one Metropolis-Hastings move (grow, prune or change), redraws its
leaf values from their conjugate normal posterior, and finally redraws the
error variance. Binary responses use a probit link with latent-variable data
augmentation.

Missing covariate values are handled by "missing incorporated in attributes":
every split rule ``x <= c`` carries a direction to which NA values are sent,
sampled together with the rule.

Notation follows Chipman, George and McCulloch (2010): ``alpha (1 + d)^-beta``
is the prior probability that a node at depth ``d`` splits, leaf values have
prior ``N(0, sigma_mu^2)`` and ``sigma^2 ~ nu lambda / chi2_nu``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri


class BartError(ValueError):
    pass


@dataclass(frozen=True)
class BartConfig:
    m: int = 200
    n_burn: int = 200
    n_keep: int = 200
    split_alpha: float = 0.95
    split_beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    mia_enabled: bool = True
    min_leaf: int = 1
    move_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)

    def __post_init__(self):
        if self.m < 1 or self.n_keep < 1 or self.n_burn < 0:
            raise BartError("need m >= 1, n_keep >= 1, n_burn >= 0")
        if not 0 < self.split_alpha < 1 or self.split_beta < 0:
            raise BartError("split_alpha must be in (0, 1) and split_beta >= 0")
        if self.k <= 0 or self.nu <= 0 or not 0 < self.q < 1:
            raise BartError("k and nu must be positive, q in (0, 1)")


DESK_CONFIG = BartConfig(m=50, n_burn=200, n_keep=200)


class _Tree:
    """Growable binary tree; node 0 is the root. ``var < 0`` marks a leaf."""

    __slots__ = ("var", "cut", "na_left", "left", "right", "parent", "depth", "value", "free")

    def __init__(self, capacity: int = 16):
        self.var = np.full(capacity, -1, dtype=np.int64)
        self.cut = np.zeros(capacity)
        self.na_left = np.zeros(capacity, dtype=bool)
        self.left = np.full(capacity, -1, dtype=np.int64)
        self.right = np.full(capacity, -1, dtype=np.int64)
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.depth = np.zeros(capacity, dtype=np.int64)
        self.value = np.zeros(capacity)
        self.free = list(range(capacity - 1, 0, -1))

    def _grow_capacity(self):
        old = len(self.var)
        new = old * 2
        for name, fill in (("var", -1), ("cut", 0.0), ("na_left", False), ("left", -1),
                           ("right", -1), ("parent", -1), ("depth", 0), ("value", 0.0)):
            arr = getattr(self, name)
            ext = np.full(new, fill, dtype=arr.dtype)
            ext[:old] = arr
            setattr(self, name, ext)
        self.free.extend(range(new - 1, old - 1, -1))

    def alloc(self) -> int:
        if not self.free:
            self._grow_capacity()
        return self.free.pop()

    def leaves(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            k = stack.pop()
            if self.var[k] < 0:
                out.append(k)
            else:
                stack.extend((self.left[k], self.right[k]))
        return out

    def internal(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            k = stack.pop()
            if self.var[k] >= 0:
                out.append(k)
                stack.extend((self.left[k], self.right[k]))
        return out

    def nog(self) -> list[int]:
        """Internal nodes whose children are both leaves."""
        return [k for k in self.internal()
                if self.var[self.left[k]] < 0 and self.var[self.right[k]] < 0]

    def snapshot(self):
        """Compact copy (var, cut, na_left, left, right, value) with reindexed nodes."""
        order, stack = [], [0]
        while stack:
            k = stack.pop()
            order.append(k)
            if self.var[k] >= 0:
                stack.extend((self.right[k], self.left[k]))
        remap = {old: new for new, old in enumerate(order)}
        idx = np.array(order)
        left = np.array([remap.get(int(self.left[k]), -1) if self.var[k] >= 0 else -1 for k in order])
        right = np.array([remap.get(int(self.right[k]), -1) if self.var[k] >= 0 else -1 for k in order])
        return (self.var[idx].copy(), self.cut[idx].copy(), self.na_left[idx].copy(),
                left.astype(np.int64), right.astype(np.int64), self.value[idx].copy())


def _route(snap, X: np.ndarray) -> np.ndarray:
    """Leaf value reached by each row of ``X`` in a snapshot tree."""
    var, cut, na_left, left, right, value = snap
    node = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    active = var[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        x = X[r, var[nd]]
        go_left = np.where(np.isnan(x), na_left[nd], x <= cut[nd])
        node[r] = np.where(go_left, left[nd], right[nd])
        active = var[node] >= 0
    return value[node]


@dataclass(frozen=True)
class BartPosterior:
    """Kept MCMC draws.

    ``trees[d][j]`` is the snapshot of tree ``j`` at kept draw ``d``; leaf
    values are on the internal (scaled) response scale and mapped back by
    ``offset + scale * sum``.
    """

    trees: tuple
    sigma: np.ndarray
    train_fit: np.ndarray
    offset: float
    scale: float
    probit: bool
    n_features: int
    config: BartConfig
    x_min: np.ndarray
    x_max: np.ndarray
    acceptance: float

    @property
    def n_draws(self) -> int:
        return len(self.trees)

    def latent(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise BartError(f"expected {self.n_features} columns, got {X.shape[1]}")
        if not self.config.mia_enabled and np.isnan(X).any():
            raise BartError("NA values in prediction rows but MIA is disabled")
        out = np.empty((self.n_draws, len(X)))
        for d, forest in enumerate(self.trees):
            acc = np.zeros(len(X))
            for snap in forest:
                acc += _route(snap, X)
            out[d] = self.offset + self.scale * acc
        return out


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _leaf_loglik(n, s, sigma2, tau2):
    """Log marginal likelihood of a leaf, up to terms that cancel in MH ratios."""
    v = sigma2 + n * tau2
    return 0.5 * np.log(sigma2 / v) + 0.5 * tau2 * s * s / (sigma2 * v)


class _Sampler:
    def __init__(self, X, config: BartConfig, rng: np.random.Generator):
        self.X = X
        self.nan = np.isnan(X)
        self.cfg = config
        self.rng = rng
        self.n, self.p = X.shape

    def _split_candidates(self, rows):
        """Variables with at least two distinct non-NA values among ``rows``."""
        out = []
        Xr = self.X[rows]
        for j in range(self.p):
            col = Xr[:, j]
            col = col[~np.isnan(col)]
            if col.size >= 2 and col.min() < col.max():
                out.append(j)
        return out

    def _draw_rule(self, rows, candidates):
        j = candidates[self.rng.integers(len(candidates))]
        col = self.X[rows, j]
        vals = np.unique(col[~np.isnan(col)])[:-1]
        cut = vals[self.rng.integers(len(vals))]
        na_left = bool(self.rng.integers(2))
        return j, cut, na_left

    def _go_left(self, rows, j, cut, na_left):
        x = self.X[rows, j]
        return np.where(np.isnan(x), na_left, x <= cut)

    def _log_split_prior(self, depth):
        a, b = self.cfg.split_alpha, self.cfg.split_beta
        return np.log(a) - b * np.log1p(depth)

    def _log_nosplit_prior(self, depth):
        a, b = self.cfg.split_alpha, self.cfg.split_beta
        return np.log1p(-a * (1.0 + depth) ** (-b))

    def _move_probs(self, n_leaves):
        pg, pp, pc = self.cfg.move_probs
        if n_leaves == 1:
            return 1.0, 0.0, 0.0
        tot = pg + pp + pc
        return pg / tot, pp / tot, pc / tot

    def update_tree(self, tree: _Tree, leaf_of: np.ndarray, resid, sigma2, tau2) -> bool:
        leaves = tree.leaves()
        b = len(leaves)
        pg, pp, pc = self._move_probs(b)
        u = self.rng.random()
        if u < pg:
            return self._grow(tree, leaf_of, resid, sigma2, tau2, leaves, pg)
        if u < pg + pp:
            return self._prune(tree, leaf_of, resid, sigma2, tau2, leaves, pp)
        return self._change(tree, leaf_of, resid, sigma2, tau2)

    def _grow(self, tree, leaf_of, resid, sigma2, tau2, leaves, pg):
        leaf = leaves[self.rng.integers(len(leaves))]
        rows = np.flatnonzero(leaf_of == leaf)
        if rows.size < 2:
            return False
        cand = self._split_candidates(rows)
        if not cand:
            return False
        j, cut, na_left = self._draw_rule(rows, cand)
        gl = self._go_left(rows, j, cut, na_left)
        nl, nr = int(gl.sum()), int((~gl).sum())
        if min(nl, nr) < max(self.cfg.min_leaf, 1):
            return False
        sl, sr = resid[rows[gl]].sum(), resid[rows[~gl]].sum()
        lik = (_leaf_loglik(nl, sl, sigma2, tau2) + _leaf_loglik(nr, sr, sigma2, tau2)
               - _leaf_loglik(nl + nr, sl + sr, sigma2, tau2))
        d = tree.depth[leaf]
        prior = (self._log_split_prior(d) + 2 * self._log_nosplit_prior(d + 1)
                 - self._log_nosplit_prior(d))
        # nodes with two leaf children after the grow
        nog_after = len(tree.nog()) + 1
        par = tree.parent[leaf]
        if par >= 0:
            sib = tree.right[par] if tree.left[par] == leaf else tree.left[par]
            if tree.var[sib] < 0:
                nog_after -= 1
        _, pp_after, _ = self._move_probs(len(leaves) + 1)
        trans = np.log(pp_after) - np.log(pg) + np.log(len(leaves)) - np.log(nog_after)
        if np.log(self.rng.random()) >= lik + prior + trans:
            return False
        L, R = tree.alloc(), tree.alloc()
        for c in (L, R):
            tree.var[c] = -1
            tree.parent[c] = leaf
            tree.depth[c] = d + 1
            tree.left[c] = tree.right[c] = -1
        tree.var[leaf], tree.cut[leaf], tree.na_left[leaf] = j, cut, na_left
        tree.left[leaf], tree.right[leaf] = L, R
        leaf_of[rows[gl]] = L
        leaf_of[rows[~gl]] = R
        return True

    def _prune(self, tree, leaf_of, resid, sigma2, tau2, leaves, pp):
        nog = tree.nog()
        k = nog[self.rng.integers(len(nog))]
        L, R = tree.left[k], tree.right[k]
        inl, inr = leaf_of == L, leaf_of == R
        nl, nr = int(inl.sum()), int(inr.sum())
        sl, sr = resid[inl].sum(), resid[inr].sum()
        lik = (_leaf_loglik(nl + nr, sl + sr, sigma2, tau2)
               - _leaf_loglik(nl, sl, sigma2, tau2) - _leaf_loglik(nr, sr, sigma2, tau2))
        d = tree.depth[k]
        prior = -(self._log_split_prior(d) + 2 * self._log_nosplit_prior(d + 1)
                  - self._log_nosplit_prior(d))
        b_after = len(leaves) - 1
        pg_after, _, _ = self._move_probs(b_after)
        trans = np.log(pg_after) - np.log(pp) + np.log(len(nog)) - np.log(b_after)
        if np.log(self.rng.random()) >= lik + prior + trans:
            return False
        leaf_of[inl | inr] = k
        tree.var[k] = -1
        tree.left[k] = tree.right[k] = -1
        for c in (L, R):
            tree.var[c] = -1
            tree.free.append(int(c))
        return True

    def _change(self, tree, leaf_of, resid, sigma2, tau2):
        nog = tree.nog()
        if not nog:
            return False
        k = nog[self.rng.integers(len(nog))]
        L, R = tree.left[k], tree.right[k]
        rows = np.flatnonzero((leaf_of == L) | (leaf_of == R))
        cand = self._split_candidates(rows)
        if not cand:
            return False
        j, cut, na_left = self._draw_rule(rows, cand)
        gl_new = self._go_left(rows, j, cut, na_left)
        if min(gl_new.sum(), (~gl_new).sum()) < max(self.cfg.min_leaf, 1):
            return False
        gl_old = leaf_of[rows] == L
        r = resid[rows]

        def lik(gl):
            return (_leaf_loglik(gl.sum(), r[gl].sum(), sigma2, tau2)
                    + _leaf_loglik((~gl).sum(), r[~gl].sum(), sigma2, tau2))

        if np.log(self.rng.random()) >= lik(gl_new) - lik(gl_old):
            return False
        tree.var[k], tree.cut[k], tree.na_left[k] = j, cut, na_left
        leaf_of[rows[gl_new]] = L
        leaf_of[rows[~gl_new]] = R
        return True

    def draw_leaves(self, tree: _Tree, leaf_of, resid, sigma2, tau2) -> np.ndarray:
        size = len(tree.var)
        cnt = np.bincount(leaf_of, minlength=size).astype(float)
        tot = np.bincount(leaf_of, weights=resid, minlength=size)
        leaves = np.array(tree.leaves())
        v = 1.0 / (cnt[leaves] / sigma2 + 1.0 / tau2)
        mean = v * tot[leaves] / sigma2
        tree.value[leaves] = mean + np.sqrt(v) * self.rng.standard_normal(len(leaves))
        return tree.value[leaf_of]


def _truncnorm_latent(f, y, rng):
    """Latent ``z ~ N(f, 1)`` truncated to ``z > 0`` where ``y = 1`` else ``z < 0``."""
    u = rng.random(len(f))
    # y=1: z = f - ndtri(u * Phi(f));  y=0: z = f + ndtri(u * Phi(-f))
    pos = y == 1
    z = np.empty_like(f)
    z[pos] = f[pos] - ndtri(np.maximum(u[pos] * ndtr(f[pos]), 1e-300))
    z[~pos] = f[~pos] + ndtri(np.maximum(u[~pos] * ndtr(-f[~pos]), 1e-300))
    return np.clip(z, -1e6, 1e6)


def _check_inputs(X, y, config):
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise BartError("X and y disagree in rows")
    if len(y) < 2:
        raise BartError("need at least two rows")
    if not np.all(np.isfinite(y)):
        raise BartError("response must be finite")
    if np.isinf(X).any():
        raise BartError("infinite covariate values")
    if np.isnan(X).any() and not config.mia_enabled:
        raise BartError("NA covariate values require mia_enabled")
    usable = [j for j in range(X.shape[1]) if np.unique(X[~np.isnan(X[:, j]), j]).size >= 2]
    return X, y, usable


def _run(X, target, config, rng, probit):
    n, p = X.shape
    m = config.m
    sampler = _Sampler(X, config, rng)
    trees = [_Tree() for _ in range(m)]
    leaf_of = np.zeros((m, n), dtype=np.int64)
    fits = np.zeros((m, n))
    total = np.zeros(n)

    if probit:
        offset = float(ndtri(np.clip(target.mean(), 1e-3, 1 - 1e-3)))
        scale = 1.0
        tau = 3.0 / (config.k * np.sqrt(m))
        ys = None
        sigma2 = 1.0
    else:
        lo, hi = float(target.min()), float(target.max())
        scale = hi - lo if hi > lo else 1.0
        offset = (lo + hi) / 2
        ys = (target - offset) / scale
        tau = 0.5 / (config.k * np.sqrt(m))
        sig_hat = _sigma_guess(X, ys)
        lam = sig_hat**2 * stats.chi2.ppf(1 - config.q, config.nu) / config.nu
        sigma2 = sig_hat**2
    tau2 = tau * tau

    kept_trees, kept_sigma, kept_fit = [], [], []
    accepted = 0
    n_iter = config.n_burn + config.n_keep
    for it in range(n_iter):
        if probit:
            z = _truncnorm_latent(offset + total, target, rng)
            ys = z - offset
        for j in range(m):
            resid = ys - total + fits[j]
            accepted += sampler.update_tree(trees[j], leaf_of[j], resid, sigma2, tau2)
            new = sampler.draw_leaves(trees[j], leaf_of[j], resid, sigma2, tau2)
            total += new - fits[j]
            fits[j] = new
        if not probit:
            rss = float(np.sum((ys - total) ** 2))
            sigma2 = (config.nu * lam + rss) / rng.chisquare(config.nu + n)
            sigma2 = max(sigma2, 1e-300)
        if it >= config.n_burn:
            kept_trees.append(tuple(t.snapshot() for t in trees))
            kept_sigma.append(np.sqrt(sigma2) * scale)
            kept_fit.append(offset + scale * total)
    return BartPosterior(
        trees=tuple(kept_trees),
        sigma=np.asarray(kept_sigma),
        train_fit=np.asarray(kept_fit),
        offset=offset,
        scale=scale,
        probit=probit,
        n_features=p,
        config=config,
        x_min=np.nanmin(X, axis=0) if n else np.zeros(p),
        x_max=np.nanmax(X, axis=0) if n else np.zeros(p),
        acceptance=accepted / (n_iter * m),
    )


def _sigma_guess(X, ys):
    """Residual sd of a linear fit on complete columns, else sd of the response."""
    n = len(ys)
    complete = ~np.isnan(X).any(axis=0)
    Xc = X[:, complete]
    sd = float(np.std(ys, ddof=1)) if n > 1 else 0.0
    if Xc.shape[1] and n > Xc.shape[1] + 2:
        A = np.column_stack([np.ones(n), Xc])
        coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
        r = ys - A @ coef
        sd = float(np.sqrt(np.sum(r * r) / (n - A.shape[1])))
    return max(sd, 1e-8)


def bart_fit(X, y, config: BartConfig = DESK_CONFIG, rng: np.random.Generator | None = None) -> BartPosterior:
    """Continuous-response BART."""
    X, y, usable = _check_inputs(X, y, config)
    if not usable and np.ptp(y) > 0:
        raise BartError("no covariate has two distinct values to split on")
    rng = np.random.default_rng() if rng is None else rng
    return _run(X, y, config, rng, probit=False)


def bart_fit_probit(X, y, config: BartConfig = DESK_CONFIG, rng: np.random.Generator | None = None) -> BartPosterior:
    """Binary-response BART with ``P(y = 1 | x) = Phi(sum of trees)``."""
    X, y, usable = _check_inputs(X, y, config)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise BartError("probit response must be 0/1")
    if y.min() == y.max():
        raise BartError("probit response has a single class")
    if not usable:
        raise BartError("no covariate has two distinct values to split on")
    rng = np.random.default_rng() if rng is None else rng
    return _run(X, y, config, rng, probit=True)


def bart_predict(post: BartPosterior, X) -> np.ndarray:
    """Per-draw predictions, shape ``(n_draws, n_rows)``.

    Continuous posteriors give the sum of trees on the response scale; probit
    posteriors give ``Phi`` of it.
    """
    f = post.latent(X)
    return ndtr(f) if post.probit else f


def bart_draw(post: BartPosterior, X, rng: np.random.Generator) -> np.ndarray:
    """One posterior-predictive draw per row from a randomly chosen kept draw."""
    d = int(rng.integers(post.n_draws))
    forest = post.trees[d]
    X = _as_matrix(X)
    acc = np.zeros(len(X))
    for snap in forest:
        acc += _route(snap, X)
    f = post.offset + post.scale * acc
    if post.probit:
        return (rng.random(len(X)) < ndtr(f)).astype(float)
    return f + post.sigma[d] * rng.standard_normal(len(X))

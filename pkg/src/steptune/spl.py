"""Self-refining preference learning for the dual-encoder reward model.

Preference pairs come from retrieval failures: for a ground-truth motion and
its condition, the reward model ranks a pool; when no motion carrying that
condition makes the top ``k``, the ground truth becomes the winner and the
top-ranked motion the loser. The encoders are then tuned so the two-way
softmax over (winner, loser) rewards matches a hard target.

Retrieval is judged by condition: every pool motion carrying the query's
condition counts as a ground-truth match.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import Adam, LRSchedule
from .toymotion import DivergenceError, contrastive_loss, noisy_batch

log = logging.getLogger(__name__)

POOL_POLICIES = ("batch", "full", "fixed")


@dataclass
class RetrievalPool:
    motions: np.ndarray
    conditions: np.ndarray
    policy: str = "batch"

    def __post_init__(self):
        self.motions = np.asarray(self.motions, dtype=np.float64)
        self.conditions = np.asarray(self.conditions, dtype=np.int64)
        if len(self.motions) == 0:
            raise ValueError("retrieval pool is empty")
        if len(self.motions) != len(self.conditions):
            raise ValueError("motions and conditions differ in length")
        if self.policy not in POOL_POLICIES:
            raise ValueError(f"pool policy must be one of {POOL_POLICIES}")

    def __len__(self):
        return len(self.conditions)


@dataclass(frozen=True)
class PreferencePair:
    winner: np.ndarray
    loser: np.ndarray
    condition: int
    identical: bool
    winner_index: int
    loser_index: int


@dataclass(frozen=True)
class PreferenceDistribution:
    p_w: float
    p_l: float

    def __post_init__(self):
        if not (0.0 <= self.p_w <= 1.0 and 0.0 <= self.p_l <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(self.p_w + self.p_l - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")

    def as_array(self):
        return np.array([self.p_w, self.p_l])


def _scores(scorer, X, conds, t=0):
    if hasattr(scorer, "score_matrix"):
        return scorer.score_matrix(X, conds, t)
    return np.asarray(scorer(X, conds), dtype=np.float64)


def rank_order(scores):
    """Indices sorted by descending score, ties broken by ascending index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def retrieve_topk(pool, c, model, k):
    """Indices of the ``k`` highest-reward pool motions for condition ``c``."""
    if not 1 <= k <= len(pool):
        raise ValueError(f"k must lie in 1..{len(pool)}, got {k}")
    scores = _scores(model, pool.motions, np.array([c]))[:, 0]
    return rank_order(scores)[:k]


def mine_pair(gt_index, c, pool, model, k):
    """Build the preference pair for the ground truth at ``pool[gt_index]``."""
    if not 0 <= gt_index < len(pool):
        raise ValueError("ground truth is not in the pool")
    top = retrieve_topk(pool, c, model, k)
    hit = np.any(pool.conditions[top] == c)
    gt = pool.motions[gt_index]
    if hit:
        return PreferencePair(gt, gt, int(c), True, int(gt_index), int(gt_index))
    lose = int(top[0])
    return PreferencePair(gt, pool.motions[lose], int(c), False, int(gt_index), lose)


def mine_pairs(pool, model, k, queries=None):
    """Mine pairs for many (gt_index, condition) queries with one score matrix."""
    if not 1 <= k <= len(pool):
        raise ValueError(f"k must lie in 1..{len(pool)}, got {k}")
    if queries is None:
        queries = np.arange(len(pool))
    queries = np.asarray(queries)
    conds = pool.conditions[queries]
    uniq = np.unique(conds)
    S = _scores(model, pool.motions, uniq)
    tops = {}
    for j, c in enumerate(uniq):
        tops[c] = rank_order(S[:, j])[:k]
    pairs = []
    for q, c in zip(queries, conds):
        top = tops[c]
        gt = pool.motions[q]
        if np.any(pool.conditions[top] == c):
            pairs.append(PreferencePair(gt, gt, int(c), True, int(q), int(q)))
        else:
            lose = int(top[0])
            pairs.append(PreferencePair(gt, pool.motions[lose], int(c), False, int(q), lose))
    return pairs


def preference_distribution(pair, model):
    """Softmax over (winner reward, loser reward) at t = 0; a (2,) Value."""
    X = np.stack([pair.winner, pair.loser])
    r = model(X, 0, np.array([pair.condition, pair.condition]))
    return ad.softmax(r)


def preference_distributions(pairs, model):
    """Batched version: (n, 2) Value, column 0 winner, column 1 loser."""
    n = len(pairs)
    X = np.concatenate([np.stack([p.winner for p in pairs]), np.stack([p.loser for p in pairs])])
    c = np.array([p.condition for p in pairs])
    r = model(X, 0, np.concatenate([c, c]))
    return ad.softmax(ad.transpose(ad.reshape(r, (2, n))), axis=1)


def target_distribution(pair):
    """(1, 0) for a genuine preference, (0.5, 0.5) when winner and loser coincide."""
    if pair.identical:
        return PreferenceDistribution(0.5, 0.5)
    return PreferenceDistribution(1.0, 0.0)


def spl_loss(Q, P):
    """KL(Q || P) for target ``Q`` and predicted ``P`` (Value of shape (2,) or (n, 2)).

    Batched inputs give the mean over rows. Zero-probability target entries
    contribute nothing.
    """
    Qa = np.asarray(Q.as_array() if isinstance(Q, PreferenceDistribution) else Q, dtype=np.float64)
    if Qa.shape != P.shape:
        Qa = np.broadcast_to(Qa, P.shape).copy()
    pos = Qa > 0
    entropy_term = float((Qa[pos] * np.log(Qa[pos])).sum())
    cross = ad.sum(ad.mul(ad.log(P), ad.Value(Qa)))
    rows = 1 if P.data.ndim == 1 else P.shape[0]
    return ad.scale(ad.sub(ad.Value(entropy_term), cross), 1.0 / rows)


# ---------------------------------------------------------------------------
# evaluation

def _first_hit(order, cand_conds, c):
    hits = np.nonzero(cand_conds[order] == c)[0]
    return int(hits[0]) if hits.size else len(order)


def retrieval_ranks(S, conds):
    """Rank (0-based) of the first correct match for every query in one batch.

    ``S[i, j]`` is the reward of motion ``i`` for the condition of pair ``j``.
    Returns (text->motion ranks, motion->text ranks).
    """
    n = len(conds)
    t2m = np.empty(n, dtype=np.int64)
    m2t = np.empty(n, dtype=np.int64)
    for j in range(n):
        t2m[j] = _first_hit(rank_order(S[:, j]), conds, conds[j])
    for i in range(n):
        m2t[i] = _first_hit(rank_order(S[i, :]), conds, conds[i])
    return t2m, m2t


def eval_retrieval(scorer, X, conds, batch_size=32, ks=(1, 2, 3), seed=0, repeats=1):
    """R@k in both directions, averaged over seeded random batches.

    The eval set is permuted and cut into ``floor(n / batch_size)`` batches
    (``repeats`` times); within a batch every pair is a query against the
    batch's motions (text->motion) or texts (motion->text).
    """
    X = np.asarray(X, dtype=np.float64)
    conds = np.asarray(conds)
    n = len(conds)
    if n == 0:
        raise ValueError("eval set is empty")
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds eval set size {n}")
    rng = np.random.default_rng(seed)
    t2m_ranks, m2t_ranks = [], []
    for _ in range(repeats):
        perm = rng.permutation(n)
        for b in range(n // batch_size):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            cb = conds[idx]
            S = _scores(scorer, X[idx], cb)
            r1, r2 = retrieval_ranks(S, cb)
            t2m_ranks.append(r1)
            m2t_ranks.append(r2)
    t2m_ranks = np.concatenate(t2m_ranks)
    m2t_ranks = np.concatenate(m2t_ranks)
    return {
        "t2m": {int(k): float(np.mean(t2m_ranks < k)) for k in ks},
        "m2t": {int(k): float(np.mean(m2t_ranks < k)) for k in ks},
    }


# ---------------------------------------------------------------------------
# training

def _pools(policy, n, batch_size, rng, fixed_subset):
    """Yield (pool indices, query indices) for one epoch."""
    perm = rng.permutation(n)
    if policy == "batch":
        for b in range(n // batch_size):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            yield idx, np.arange(len(idx))
    elif policy == "full":
        pool = np.arange(n)
        for b in range(n // batch_size):
            yield pool, perm[b * batch_size:(b + 1) * batch_size]
    else:
        pool = fixed_subset
        q = rng.permutation(len(pool))
        for b in range(len(pool) // batch_size):
            yield pool, q[b * batch_size:(b + 1) * batch_size]


def spl_train(model, dataset, pool_policy="batch", k=10, epochs=1, seed=0, lr=1e-4,
              batch_size=32, schedule=None, fixed_pool_size=100, eval_batch=32,
              max_pools=None):
    """Alternate preference steps on retrieval failures with fallback
    contrastive steps on retrieval successes.

    Each pool of ``batch_size`` training pairs is mined in one go; failed
    queries contribute one gradient step on the mean preference loss, and if
    any query succeeded the pool also takes one contrastive step (with noise
    augmentation when ``schedule`` is given, as in pretraining).

    Returns a list of per-epoch metric dicts.
    """
    if pool_policy not in POOL_POLICIES:
        raise ValueError(f"pool policy must be one of {POOL_POLICIES}")
    train = dataset.train
    n = len(train)
    if not 1 <= k <= (batch_size if pool_policy == "batch" else n):
        raise ValueError("k out of range for the pool")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), LRSchedule("constant", lr))
    tape = ad.get_tape()
    fixed = None
    if pool_policy == "fixed":
        fixed = np.sort(rng.choice(n, size=min(fixed_pool_size, n), replace=False))
    history = []
    for epoch in range(epochs):
        failures = 0
        queries = 0
        spl_losses = []
        for p_i, (pool_idx, q_idx) in enumerate(_pools(pool_policy, n, batch_size, rng, fixed)):
            if max_pools is not None and p_i >= max_pools:
                break
            pool = RetrievalPool(train.X[pool_idx], train.y[pool_idx], pool_policy)
            pairs = mine_pairs(pool, model, k, q_idx)
            failed = [p for p in pairs if not p.identical]
            queries += len(pairs)
            failures += len(failed)
            if failed:
                model.zero_grad()
                P = preference_distributions(failed, model)
                loss = spl_loss(np.array([1.0, 0.0]), P)
                ad.backward(loss)
                spl_losses.append(float(loss.data))
                ad.release_graph(tape)
                opt.step()
            if len(failed) < len(pairs):
                Xp, tp = noisy_batch(pool.motions[q_idx], schedule, rng)
                if len(q_idx) >= 2:
                    model.zero_grad()
                    loss = contrastive_loss(model, Xp, tp, pool.conditions[q_idx])
                    ad.backward(loss)
                    ad.release_graph(tape)
                    opt.step()
            log_tau = float(model.params["log_tau"].data)
            if abs(log_tau) > 10:
                raise DivergenceError(f"temperature diverged: log_tau = {log_tau:.3f}")
        rk = eval_retrieval(model, dataset.val.X, dataset.val.y, batch_size=eval_batch, seed=seed)
        rec = {
            "epoch": epoch,
            "failure_ratio": failures / max(queries, 1),
            "mean_spl_loss": float(np.mean(spl_losses)) if spl_losses else 0.0,
        }
        rec.update({f"R@{kk}": v for kk, v in rk["t2m"].items()})
        history.append(rec)
        log.info("spl epoch %d: %s", epoch, rec)
    return history

"""Retrieval evaluation: cosine ranking, top-k accuracy and relative median rank."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


@dataclass
class RetrievalSet:
    """Candidate latents; ``image_ids`` must be unique."""

    latents: np.ndarray
    image_ids: list
    category_ids: list | None = None

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        self.image_ids = [str(i) for i in self.image_ids]
        if self.latents.ndim != 2 or self.latents.shape[0] != len(self.image_ids):
            raise ValueError("latents must be (M, F) with one id per row")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("duplicate candidate id")
        norms = np.linalg.norm(self.latents, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero candidate latent")
        self._unit = self.latents / norms[:, None]
        self._pos = {k: i for i, k in enumerate(self.image_ids)}
        # rank of each id in lexicographic order, used to break exact ties
        order = np.argsort(np.array(self.image_ids, dtype=object), kind="stable")
        self._tie_key = np.empty(len(order), dtype=np.int64)
        self._tie_key[order] = np.arange(len(order))

    @classmethod
    def from_bank(cls, bank, image_ids=None, categories=None):
        ids = list(bank.ids) if image_ids is None else list(image_ids)
        return cls(bank.get(ids), ids, categories)

    def __len__(self):
        return len(self.image_ids)

    def augment(self, latents, image_ids, category_ids=None):
        """Return a larger set with extra distractor candidates appended."""
        cats = None
        if self.category_ids is not None and category_ids is not None:
            cats = list(self.category_ids) + list(category_ids)
        return RetrievalSet(
            np.concatenate([self.latents, np.asarray(latents, dtype=np.float64)]),
            self.image_ids + [str(i) for i in image_ids],
            cats,
        )

    def positions(self, image_ids):
        try:
            return np.array([self._pos[str(i)] for i in image_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"true image {exc.args[0]!r} absent from retrieval set") from None


@dataclass
class RetrievalReport:
    query_ids: list
    ranks: np.ndarray
    set_size: int
    ks: tuple = (5,)
    topk: dict = field(default_factory=dict)
    topk_sem: dict = field(default_factory=dict)
    median_relative_rank: float = float("nan")
    relative_rank_sem: float = float("nan")

    @property
    def relative_ranks(self):
        return self.ranks / self.set_size

    @property
    def top5(self):
        return self.topk[5]

    def rows(self):
        for qid, r in zip(self.query_ids, self.ranks):
            yield {"image_id": qid, "rank": int(r), "relative_rank": r / self.set_size,
                   **{f"top{k}": int(r <= k) for k in self.ks}}


def _sem(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(values.std(ddof=1) / np.sqrt(values.size))


def average_predictions(preds, image_ids):
    """Mean prediction per image; returns ``(unique_ids_sorted, means)``."""
    preds = np.asarray(preds, dtype=np.float64)
    image_ids = [str(i) for i in image_ids]
    if len(image_ids) != preds.shape[0]:
        raise ValueError("one image id per prediction required")
    if not image_ids:
        raise ValueError("no predictions to average")
    uniq, inv = np.unique(np.array(image_ids, dtype=object), return_inverse=True)
    sums = np.zeros((len(uniq), preds.shape[1]))
    np.add.at(sums, inv, preds)
    counts = np.bincount(inv, minlength=len(uniq))
    return [str(u) for u in uniq], sums / counts[:, None]


def cosine_scores(preds, rset: RetrievalSet):
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    norms = np.linalg.norm(preds, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero prediction vector")
    return (preds / norms) @ rset._unit.T


def rank_candidates(pred, true_id, rset: RetrievalSet):
    """Return ``(ranked_ids, rank_of_true)`` for one prediction (rank is 1-based)."""
    s = cosine_scores(pred, rset)[0]
    order = np.lexsort((rset._tie_key, -s))
    t = rset.positions([true_id])
    rank = int(_kernels.count_ranks(s[None, :], t, rset._tie_key)[0])
    return [rset.image_ids[i] for i in order], rank


def compute_ranks(preds, true_ids, rset: RetrievalSet):
    sims = np.ascontiguousarray(cosine_scores(preds, rset))
    return _kernels.count_ranks(sims, rset.positions(true_ids), rset._tie_key)


def evaluate(preds, true_ids, rset: RetrievalSet, ks=(5,)) -> RetrievalReport:
    """Rank every prediction against the whole set; aggregate top-k and relative median rank."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    ranks = compute_ranks(preds, true_ids, rset)
    M = len(rset)
    rel = ranks / M
    rep = RetrievalReport([str(i) for i in true_ids], ranks, M, ks)
    for k in ks:
        hit = (ranks <= k).astype(np.float64)
        rep.topk[k] = float(hit.mean())
        rep.topk_sem[k] = _sem(hit)
    rep.median_relative_rank = float(np.median(rel))
    rep.relative_rank_sem = _sem(rel)
    return rep


def evaluate_averaged(preds, query_ids, rset: RetrievalSet, ks=(5,)):
    """Average repeated predictions per image, then evaluate."""
    ids, means = average_predictions(preds, query_ids)
    return evaluate(means, ids, rset, ks)

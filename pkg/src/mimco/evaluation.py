"""Representation-quality evaluation: kNN accuracy, retrieval mAP, patch patterns, export."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .core import InvalidInputError
from .encoder import ViTEncoder, global_average_pool

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    ids: list
    features: np.ndarray  # N x C
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.ids), -1)
        if len(self.ids) != self.features.shape[0]:
            raise InvalidInputError("ids and feature rows differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.ids),):
                raise InvalidInputError("labels must have one entry per id")

    def __len__(self):
        return len(self.ids)

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.features, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(self.features)):
            raise InvalidInputError("embeddings must be finite and non-zero")
        return self.features / norms


@torch.no_grad()
def extract_embeddings(encoder: ViTEncoder, images: torch.Tensor, labels=None,
                       ids=None, batch_size: int = 256) -> EmbeddingSet:
    """GAP features of the unmasked forward pass, in eval mode."""
    was_training = encoder.training
    encoder.eval()
    feats = []
    for i in range(0, len(images), batch_size):
        feats.append(global_average_pool(encoder(images[i:i + batch_size])).double())
    encoder.train(was_training)
    ids = list(range(len(images))) if ids is None else list(ids)
    return EmbeddingSet(ids, torch.cat(feats).numpy(), labels)


@torch.no_grad()
def extract_patch_features(encoder: ViTEncoder, images: torch.Tensor,
                           batch_size: int = 256) -> np.ndarray:
    """Pre-GAP patch features as (N_images, H*W, C)."""
    was_training = encoder.training
    encoder.eval()
    out = []
    for i in range(0, len(images), batch_size):
        fmap = encoder(images[i:i + batch_size])
        out.append(fmap.flatten(2).transpose(1, 2).double())
    encoder.train(was_training)
    return torch.cat(out).numpy()


def knn_eval(train: EmbeddingSet, test: EmbeddingSet, k: int = 10) -> float:
    """Cosine kNN majority vote; ties go to the class of the nearest tied neighbour."""
    if len(train) == 0 or len(test) == 0:
        raise InvalidInputError("kNN needs non-empty train and test sets")
    if train.labels is None or test.labels is None:
        raise InvalidInputError("kNN needs labels on both sets")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    sim = test.normalized() @ train.normalized().T
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    pred = kernels.knn_predict(sim, train.labels, k, n_classes)
    return float(np.mean(pred == test.labels))


def retrieval_map(queries: EmbeddingSet, database: EmbeddingSet, relevance) -> float:
    """Mean average precision of the cosine ranking of `database` for each query.

    `relevance` maps a query id to the set of relevant database ids. Queries
    with no relevant item are skipped with a warning.
    """
    if len(queries) == 0 or len(database) == 0:
        raise InvalidInputError("retrieval needs non-empty query and database sets")
    id_pos = {d: j for j, d in enumerate(database.ids)}
    keep, rel = [], []
    for i, qid in enumerate(queries.ids):
        rel_ids = relevance.get(qid, ()) if hasattr(relevance, "get") else relevance[i]
        row = np.zeros(len(database), dtype=bool)
        for r in rel_ids:
            if r in id_pos:
                row[id_pos[r]] = True
        if not row.any():
            warnings.warn(f"query {qid!r} has no relevant items; excluded from mAP")
            continue
        keep.append(i)
        rel.append(row)
    if not keep:
        raise InvalidInputError("no query has a non-empty relevance set")
    scores = queries.normalized()[keep] @ database.normalized().T
    return float(kernels.average_precision(scores, np.stack(rel)).mean())


def label_relevance(queries: EmbeddingSet, database: EmbeddingSet) -> dict:
    """Relevance sets from shared class labels (desk-scale retrieval protocol)."""
    by_label: dict = {}
    for did, lab in zip(database.ids, database.labels):
        by_label.setdefault(int(lab), set()).add(did)
    return {qid: by_label.get(int(lab), set()) for qid, lab in zip(queries.ids, queries.labels)}


def patch_pattern_topk(query: np.ndarray, corpus: np.ndarray, k: int = 36,
                       query_image: int | None = None):
    """Most cosine-similar patches to `query` from other images.

    corpus: (N_images, N_positions, C). Returns a list of
    ``(image_index, position, similarity)`` in descending similarity.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 3 or corpus.shape[0] == 0 or corpus.shape[1] == 0:
        raise InvalidInputError("corpus must be a non-empty (images, positions, C) array")
    n_img, n_pos, c = corpus.shape
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != c:
        raise InvalidInputError("query and corpus channel counts differ")
    flat = corpus.reshape(-1, c)
    norms = np.linalg.norm(flat, axis=1)
    sim = (flat @ q) / np.maximum(norms * np.linalg.norm(q), 1e-12)
    owner = np.repeat(np.arange(n_img), n_pos)
    allowed = np.ones(len(sim), dtype=bool) if query_image is None else owner != query_image
    cand = np.flatnonzero(allowed)
    if k > len(cand):
        warnings.warn(f"k={k} exceeds the {len(cand)} eligible patches; returning all")
        k = len(cand)
    if k == 0:
        return []
    top = kernels.topk_indices(sim[cand][None], k)[0]
    return [(int(owner[cand[t]]), int(cand[t] % n_pos), float(sim[cand[t]])) for t in top]


def export_embeddings(emb: EmbeddingSet, path) -> None:
    """CSV: id, label, f0..f{C-1}. Empty label field when labels are absent."""
    c = emb.features.shape[1] if emb.features.ndim == 2 and len(emb) else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{i}" for i in range(c)])
        for i, rid in enumerate(emb.ids):
            lab = "" if emb.labels is None else int(emb.labels[i])
            w.writerow([rid, lab] + [repr(float(np.float32(v))) for v in emb.features[i]])


def load_embeddings(path) -> EmbeddingSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    c = len(header) - 2
    ids = [r[0] for r in body]
    labels = None
    if body and all(r[1] != "" for r in body):
        labels = np.array([int(r[1]) for r in body])
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(-1, c)
    return EmbeddingSet(ids, feats, labels)

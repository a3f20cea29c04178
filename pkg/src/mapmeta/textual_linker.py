"""Pairwise word-linkage classifier over textual features.

A shared encoder ``r -> W2 tanh(W1 r + b1) + b2`` maps each region's feature
vector into a small embedding space. The pair head sees
``[e_i, e_j, |e_i - e_j|]`` and emits a sigmoid probability. Training
minimises mean binary cross-entropy over pairs plus a weighted triplet hinge
on the embeddings. Gradients are derived by hand; the network is three
affine maps, so autograd would be overkill.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import EmbeddingTable, sheet_features
from .ingest import MapSheet

log = logging.getLogger(__name__)

EPS = 1e-7
PARAM_NAMES = ("W1", "b1", "W2", "b2", "w3", "b3")
CHECKPOINT_MAGIC = b"MAPLINK\x00"
CHECKPOINT_VERSION = 1


class UntrainableSheetError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LinkerConfig:
    hidden: int = 64
    embed_dim: int = 32
    margin: float = 0.2
    triplet_weight: float = 1.0
    lr: float = 0.01
    epochs: int = 60
    batch_size: int = 64
    negatives: int = 3
    rounds: int = 2
    seed: int = 0
    threshold: float = 0.5
    tune_embeddings: bool = False


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_loss(preds: Sequence[float] | np.ndarray, labels: Sequence[float] | np.ndarray) -> float:
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("bce_loss needs equal-length, non-empty inputs")
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def triplet_loss(anchors, positives, negatives, margin: float) -> float:
    a = np.atleast_2d(np.asarray(anchors, dtype=float))
    p = np.atleast_2d(np.asarray(positives, dtype=float))
    n = np.atleast_2d(np.asarray(negatives, dtype=float))
    if not (a.shape == p.shape == n.shape):
        raise ValueError(f"triplet shape mismatch: {a.shape} {p.shape} {n.shape}")
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an = np.sum((a - n) ** 2, axis=1)
    return float(np.sum(np.maximum(d_ap - d_an + margin, 0.0)))


@dataclass
class LinkerModel:
    params: dict[str, np.ndarray]
    config: LinkerConfig = field(default_factory=LinkerConfig)

    @classmethod
    def initialize(cls, input_dim: int, config: LinkerConfig | None = None) -> "LinkerModel":
        config = config or LinkerConfig()
        rng = np.random.default_rng([config.seed, 0])
        h, d = config.hidden, config.embed_dim

        def glorot(fan_in: int, fan_out: int) -> np.ndarray:
            return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

        params = {
            "W1": glorot(input_dim, h),
            "b1": np.zeros(h),
            "W2": glorot(h, d),
            "b2": np.zeros(d),
            "w3": glorot(3 * d, 1)[:, 0],
            "b3": np.zeros(1),
        }
        return cls(params, config)

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[0]

    def copy(self) -> "LinkerModel":
        return LinkerModel({k: v.copy() for k, v in self.params.items()}, self.config)

    # -- forward -------------------------------------------------------

    def _check_dim(self, R: np.ndarray) -> None:
        if R.shape[-1] != self.input_dim:
            raise ValueError(f"feature dimension {R.shape[-1]} != model input {self.input_dim}")

    def encode(self, R: np.ndarray) -> np.ndarray:
        R = np.atleast_2d(np.asarray(R, dtype=float))
        self._check_dim(R)
        P = self.params
        return np.tanh(R @ P["W1"] + P["b1"]) @ P["W2"] + P["b2"]

    def _logits(self, Ei: np.ndarray, Ej: np.ndarray) -> np.ndarray:
        Z = np.concatenate([Ei, Ej, np.abs(Ei - Ej)], axis=1)
        return Z @ self.params["w3"] + self.params["b3"][0]

    def pair_probs_from_embeddings(self, Ei: np.ndarray, Ej: np.ndarray) -> np.ndarray:
        return np.clip(_sigmoid(self._logits(Ei, Ej)), EPS, 1.0 - EPS)

    def forward_pair(self, r_i, r_j) -> float:
        r_i = np.asarray(r_i, dtype=float)
        r_j = np.asarray(r_j, dtype=float)
        if r_i.shape != r_j.shape:
            raise ValueError(f"pair dimension mismatch: {r_i.shape} vs {r_j.shape}")
        E = self.encode(np.stack([r_i, r_j]))
        return float(self.pair_probs_from_embeddings(E[:1], E[1:])[0])

    # -- loss and gradient ---------------------------------------------

    def loss_and_grad(
        self,
        R: np.ndarray,
        pair_i: np.ndarray,
        pair_j: np.ndarray,
        labels: np.ndarray,
        tri_a: np.ndarray,
        tri_p: np.ndarray,
        tri_n: np.ndarray,
        input_grad: bool = False,
    ) -> tuple[float, dict[str, np.ndarray], tuple[float, float]]:
        """Objective and gradient over rows of the feature matrix ``R``.

        Pair and triplet members are given as row indices into ``R``.
        Returns ``(loss, grads, (bce, triplet))``; with ``input_grad`` the
        gradient with respect to ``R`` itself is added under ``"R"``.
        """
        P = self.params
        cfg = self.config
        A1 = np.tanh(R @ P["W1"] + P["b1"])
        E = A1 @ P["W2"] + P["b2"]
        dE = np.zeros_like(E)
        grads = {k: np.zeros_like(v) for k, v in P.items()}

        l_ce = 0.0
        if len(pair_i):
            Ei, Ej = E[pair_i], E[pair_j]
            diff = Ei - Ej
            Z = np.concatenate([Ei, Ej, np.abs(diff)], axis=1)
            p = _sigmoid(Z @ P["w3"] + P["b3"][0])
            y = np.asarray(labels, dtype=float)
            l_ce = bce_loss(p, y)
            inside = (p >= EPS) & (p <= 1.0 - EPS)
            dlogit = np.where(inside, (p - y) / len(y), 0.0)
            grads["w3"] += Z.T @ dlogit
            grads["b3"][0] += dlogit.sum()
            dZ = np.outer(dlogit, P["w3"])
            d = cfg.embed_dim
            dabs = dZ[:, 2 * d:] * np.sign(diff)
            np.add.at(dE, pair_i, dZ[:, :d] + dabs)
            np.add.at(dE, pair_j, dZ[:, d:2 * d] - dabs)

        l_tri = 0.0
        if len(tri_a) and cfg.triplet_weight != 0.0:
            Ea, Ep, En = E[tri_a], E[tri_p], E[tri_n]
            l_tri = triplet_loss(Ea, Ep, En, cfg.margin)
            hinge = np.sum((Ea - Ep) ** 2, axis=1) - np.sum((Ea - En) ** 2, axis=1) + cfg.margin
            w = cfg.triplet_weight * (hinge > 0.0)[:, None]
            np.add.at(dE, tri_a, w * 2.0 * (En - Ep))
            np.add.at(dE, tri_p, w * -2.0 * (Ea - Ep))
            np.add.at(dE, tri_n, w * 2.0 * (Ea - En))

        grads["W2"] += A1.T @ dE
        grads["b2"] += dE.sum(axis=0)
        dH = (dE @ P["W2"].T) * (1.0 - A1 ** 2)
        grads["W1"] += R.T @ dH
        grads["b1"] += dH.sum(axis=0)
        if input_grad:
            grads["R"] = dH @ P["W1"].T
        loss = l_ce + cfg.triplet_weight * l_tri
        return loss, grads, (l_ce, l_tri)

    # -- serialization -------------------------------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def shapes(self) -> dict[str, list[int]]:
        return {k: list(self.params[k].shape) for k in PARAM_NAMES}

    def save(self, path: str | Path) -> None:
        meta = {"config": asdict(self.config), "shapes": self.shapes()}
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        flat = self.flat()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "LinkerModel":
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a linker checkpoint")
        version, n_meta = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(data[off:off + n_meta].decode("utf-8"))
        off += n_meta
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        if len(data) != off + 8 * n:
            raise CheckpointError(f"{path}: truncated parameter block")
        flat = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
        params = {}
        pos = 0
        for k in PARAM_NAMES:
            shape = tuple(meta["shapes"][k])
            size = int(np.prod(shape))
            params[k] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        if pos != n:
            raise CheckpointError(f"{path}: parameter count mismatch")
        return cls(params, LinkerConfig(**meta["config"]))


# -- sampling ------------------------------------------------------------

@dataclass(frozen=True)
class PairBatch:
    left: tuple[str, ...]
    right: tuple[str, ...]
    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TripletBatch:
    anchors: tuple[str, ...]
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.anchors)


def sample_batches(
    sheet: MapSheet,
    groups: Sequence[Sequence[str]] | None,
    rng: np.random.Generator,
    negatives: int = 3,
) -> tuple[PairBatch, TripletBatch]:
    """Draw training pairs and triplets from one annotated sheet.

    Every member of a multi-word group anchors one positive pair with a random
    co-member and ``negatives`` negative pairs. Negatives come from other
    groups (ungrouped regions count as singletons), drawn with probability
    proportional to ``1 / (1 + distance / median_height)``, and are stored in a
    random orientation so the classifier also sees them as queries.
    """
    if groups is None:
        groups = sheet.all_groups()
    else:
        grouped = {rid for g in groups for rid in g}
        groups = [tuple(g) for g in groups] + [(r.id,) for r in sheet.regions if r.id not in grouped]
    if not any(len(g) >= 2 for g in groups):
        raise UntrainableSheetError(f"sheet {sheet.sheet_id} has no multi-word group")

    ids = [r.id for r in sheet.regions]
    index = {rid: i for i, rid in enumerate(ids)}
    centers = np.array([sheet.region(rid).center for rid in ids])
    med_h = float(np.median([r.height for r in sheet.regions]))
    group_of = {rid: gi for gi, g in enumerate(groups) for rid in g}
    member_group = np.array([group_of[rid] for rid in ids])

    left: list[str] = []
    right: list[str] = []
    labels: list[int] = []
    ta: list[str] = []
    tp: list[str] = []
    tn: list[str] = []
    for gi, g in enumerate(groups):
        if len(g) < 2:
            continue
        for a in g:
            mates = [m for m in g if m != a]
            p = mates[int(rng.integers(len(mates)))]
            left.append(a)
            right.append(p)
            labels.append(1)
            pool = np.flatnonzero(member_group != gi)
            if pool.size == 0:
                raise UntrainableSheetError(f"sheet {sheet.sheet_id} has a single group; no negatives")
            dist = np.hypot(*(centers[pool] - centers[index[a]]).T)
            w = 1.0 / (1.0 + dist / med_h)
            draws = rng.choice(pool, size=negatives, p=w / w.sum())
            flips = rng.random(negatives) < 0.5
            for n_idx, flip in zip(draws, flips):
                n = ids[int(n_idx)]
                left.append(n if flip else a)
                right.append(a if flip else n)
                labels.append(0)
            ta.append(a)
            tp.append(p)
            tn.append(ids[int(draws[0])])
    return PairBatch(tuple(left), tuple(right), tuple(labels)), TripletBatch(tuple(ta), tuple(tp), tuple(tn))


# -- training ------------------------------------------------------------

def _build_dataset(sheets: Sequence[MapSheet], table: EmbeddingTable, cfg: LinkerConfig):
    rng = np.random.default_rng([cfg.seed, 1])
    feats = []
    texts: list[str] = []
    pi, pj, y, ta, tp, tn = [], [], [], [], [], []
    offset = 0
    trainable = 0
    for sheet in sheets:
        if not any(len(g) >= 2 for g in sheet.groups):
            log.info("skipping sheet %s: no multi-word group", sheet.sheet_id)
            continue
        F = sheet_features(sheet, table)
        index = {r.id: i + offset for i, r in enumerate(sheet.regions)}
        for _ in range(cfg.rounds):
            pairs, trips = sample_batches(sheet, None, rng, cfg.negatives)
            pi += [index[k] for k in pairs.left]
            pj += [index[k] for k in pairs.right]
            y += list(pairs.labels)
            ta += [index[k] for k in trips.anchors]
            tp += [index[k] for k in trips.positives]
            tn += [index[k] for k in trips.negatives]
        feats.append(F)
        texts += [r.text for r in sheet.regions]
        offset += F.shape[0]
        trainable += 1
    if not trainable:
        raise UntrainableSheetError("no trainable sheet (every sheet lacks a multi-word group)")
    arr = lambda v: np.asarray(v, dtype=np.intp)  # noqa: E731
    R = np.vstack(feats)
    return R, texts, arr(pi), arr(pj), np.asarray(y, dtype=float), arr(ta), arr(tp), arr(tn)


class _TunedVectors:
    """Trainable offsets for the in-vocabulary tokens of the training rows.

    A row's embedding is the mean of its tokens' vectors, so each row spreads
    its input gradient evenly over those tokens. Out-of-vocabulary tokens stay
    fixed.
    """

    def __init__(self, table: EmbeddingTable, texts: Sequence[str]):
        self.words: list[str] = []
        index: dict[str, int] = {}
        rows, cols, weights = [], [], []
        for r, text in enumerate(texts):
            tokens = [t.lower() for t in text.split()]
            for tok in tokens:
                if tok not in table.vectors:
                    continue
                if tok not in index:
                    index[tok] = len(self.words)
                    self.words.append(tok)
                rows.append(r)
                cols.append(index[tok])
                weights.append(1.0 / len(tokens))
        self.rows = np.asarray(rows, dtype=np.intp)
        self.cols = np.asarray(cols, dtype=np.intp)
        self.weights = np.asarray(weights)[:, None]
        self.delta = np.zeros((len(self.words), table.dim))
        self.dim = table.dim

    def apply(self, R0: np.ndarray) -> np.ndarray:
        R = R0.copy()
        np.add.at(R[:, :self.dim], self.rows, self.weights * self.delta[self.cols])
        return R

    def step(self, dR: np.ndarray, lr: float) -> None:
        g = np.zeros_like(self.delta)
        np.add.at(g, self.cols, self.weights * dR[self.rows, :self.dim])
        self.delta -= lr * g

    def table(self, base: EmbeddingTable) -> EmbeddingTable:
        vectors = dict(base.vectors)
        for k, word in enumerate(self.words):
            v = base.vectors[word] + self.delta[k]
            v.setflags(write=False)
            vectors[word] = v
        return EmbeddingTable(vectors, base.dim, base.oov)


def train(
    model: LinkerModel,
    sheets: Sequence[MapSheet],
    table: EmbeddingTable,
    config: LinkerConfig | None = None,
) -> tuple[LinkerModel, list[float]]:
    """Mini-batch gradient descent on ``bce + weight * triplet``.

    The sample set is drawn once from ``config.seed``; each epoch reshuffles
    it. ``loss_history[e]`` is the whole-set objective after epoch ``e``
    (triplet term scaled to a per-batch sum), so it is independent of batch
    partitioning. Word vectors stay frozen; see ``train_with_embeddings``.
    """
    cfg = config or model.config
    if cfg.tune_embeddings:
        raise ValueError("tune_embeddings is set; use train_with_embeddings to get the tuned table back")
    model, _, history = _fit(model, sheets, table, cfg)
    return model, history


def train_with_embeddings(
    model: LinkerModel,
    sheets: Sequence[MapSheet],
    table: EmbeddingTable,
    config: LinkerConfig | None = None,
) -> tuple[LinkerModel, EmbeddingTable, list[float]]:
    """``train``, also updating word vectors when ``config.tune_embeddings``.

    Only tokens seen in the training sheets move. The returned table must be
    used at inference time in place of ``table``.
    """
    return _fit(model, sheets, table, config or model.config)


def _fit(model, sheets, table, cfg):
    model = LinkerModel({k: v.copy() for k, v in model.params.items()}, cfg)
    R0, texts, pi, pj, y, ta, tp, tn = _build_dataset(sheets, table, cfg)
    model._check_dim(R0)
    tuned = _TunedVectors(table, texts) if cfg.tune_embeddings else None
    R = R0
    rng = np.random.default_rng([cfg.seed, 2])
    n_steps = max(1, math.ceil(len(y) / cfg.batch_size))
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        t_order = rng.permutation(len(ta))
        pair_chunks = np.array_split(order, n_steps)
        tri_chunks = np.array_split(t_order, n_steps)
        for pc, tc in zip(pair_chunks, tri_chunks):
            loss, grads, _ = model.loss_and_grad(R, pi[pc], pj[pc], y[pc], ta[tc], tp[tc], tn[tc],
                                                 input_grad=tuned is not None)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {loss}")
            if cfg.lr:
                for k in PARAM_NAMES:
                    model.params[k] -= cfg.lr * grads[k]
                if tuned is not None:
                    tuned.step(grads["R"], cfg.lr)
                    R = tuned.apply(R0)
        _, _, (l_ce, l_tri) = model.loss_and_grad(R, pi, pj, y, ta, tp, tn)
        epoch_loss = l_ce + cfg.triplet_weight * l_tri / n_steps
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        history.append(epoch_loss)
        log.debug("epoch %d loss %.6f (bce %.6f)", epoch, epoch_loss, l_ce)
    return model, (tuned.table(table) if tuned is not None else table), history


# -- retrieval -----------------------------------------------------------

def query_probabilities(model: LinkerModel, features: np.ndarray, query_index: int) -> np.ndarray:
    """Probability that each row of ``features`` links to the query row."""
    E = model.encode(features)
    Eq = np.repeat(E[query_index:query_index + 1], E.shape[0], axis=0)
    return model.pair_probs_from_embeddings(Eq, E)


def retrieve_candidates(
    model: LinkerModel,
    sheet: MapSheet,
    query_id: str,
    threshold: float | None = None,
    features: np.ndarray | None = None,
    table: EmbeddingTable | None = None,
) -> dict[str, float]:
    """Regions the textual model links to ``query_id``, with probabilities.

    Pass either precomputed ``features`` (rows in region order) or the
    embedding ``table`` to build them.
    """
    ids = [r.id for r in sheet.regions]
    if query_id not in ids:
        raise KeyError(f"unknown region id {query_id!r} on sheet {sheet.sheet_id}")
    if threshold is None:
        threshold = model.config.threshold
    if features is None:
        if table is None:
            raise ValueError("need features or an embedding table")
        features = sheet_features(sheet, table)
    qi = ids.index(query_id)
    probs = query_probabilities(model, features, qi)
    return {rid: float(p) for k, (rid, p) in enumerate(zip(ids, probs)) if k != qi and p > threshold}


def with_config(model: LinkerModel, **changes) -> LinkerModel:
    return LinkerModel(model.params, replace(model.config, **changes))

"""Generation and the diversity/fidelity trade-off machinery.

Ancestral sampling plus three aggregation strategies (KNN mean, code
averaging, sync-score rejection). Aggregation operates on the depth-summed
frame embedding; the aggregate is re-projected through the RVQ recursion so
the grid fed back to the temporal model always contains legal code indices.
Also implements distillation of aggregated sampling into a student model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .armodel import ARConfig, ARModel, adam_step, prepare_sequences
from .codec import rvq_quantize_frames
from .tensor import Tensor, cross_entropy

STRATEGIES = ("default", "knn", "average", "syncnet-rejection")


@dataclass
class SamplingConfig:
    strategy: str = "default"
    n: int = 1
    k: int = 3
    keep_fraction: float = 1.0
    depth_limit: int | None = None
    temperature: float = 1.0
    seed: int = 0
    keep_best_only: bool = False

    def validate(self, depth: int):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.strategy != "default" and self.k > self.n:
            raise ValueError("k must be <= n")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in (0, 1]")
        d = depth if self.depth_limit is None else self.depth_limit
        if not 1 <= d <= depth:
            raise ValueError(f"depth_limit must be in [1, {depth}]")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        return d


def average_aggregate(embs: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the candidate set (N, E)."""
    embs = np.asarray(embs, dtype=np.float64)
    if embs.shape[0] < 1:
        raise ValueError("candidate set must be nonempty")
    return embs.mean(axis=0)


def knn_aggregate(embs: np.ndarray, anchor: np.ndarray, k: int) -> np.ndarray:
    """Mean of all candidates within the k-th nearest-neighbor radius of the
    anchor (the anchor itself counts, at distance zero)."""
    embs = np.asarray(embs, dtype=np.float64)
    if not 1 <= k <= embs.shape[0]:
        raise ValueError("k must be in [1, N]")
    dist = np.sqrt(((embs - anchor) ** 2).sum(axis=1))
    radius = np.sort(dist)[k - 1]
    return embs[dist <= radius].mean(axis=0)


def syncnet_reject(embs: np.ndarray, scores: np.ndarray, keep_fraction: float,
                   keep_best_only: bool = False) -> np.ndarray:
    """Keep the top fraction of candidates by sync score (original order)."""
    embs = np.asarray(embs, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if keep_best_only:
        return embs[int(np.argmax(scores))][None, :]
    m = max(1, int(round(keep_fraction * embs.shape[0])))
    keep = np.argsort(-scores, kind="stable")[:m]
    return embs[np.sort(keep)]


def _sample_indices(logits: np.ndarray, temperature: float,
                    rng: np.random.Generator) -> np.ndarray:
    if temperature == 0.0:
        return np.argmin(-logits, axis=-1)  # argmax, lowest index on ties
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[:-1] + (1,))
    return (u > cdf).sum(axis=-1)


def generate_batch(model: ARModel, codec, y: np.ndarray, s: np.ndarray,
                   config: SamplingConfig, n_samples: int = 1,
                   sync_model=None, rng: np.random.Generator | None = None):
    """Draw ``n_samples`` motion sequences for one (driving signal, style).

    Returns (motions (S, T, 3V), grids (S, T, d*)).
    """
    d_star = config.validate(model.config.depth)
    if config.strategy == "syncnet-rejection" and sync_model is None:
        raise ValueError("syncnet-rejection requires a trained sync model")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    S, N = n_samples, config.n
    T = y.shape[0]
    NC = model.config.code_dim
    audio, style = model.context_features(y, s)
    committed = np.zeros((S, T, NC))
    grids = np.zeros((S, T, d_star), dtype=np.int64)
    zero_pad = np.zeros((S, 1, NC))
    R = model.audio_radius
    for t in range(T):
        embs_hist = np.concatenate([committed[:, :t], zero_pad], axis=1)
        se = None if model.config.style_mode == "depth" else Tensor(
            np.broadcast_to(style, (S, style.shape[0])))
        h = model.temporal_context(
            Tensor(np.broadcast_to(audio[:t + 1], (S, t + 1, audio.shape[1]))),
            embs_hist, se).data[:, t]  # (S, H)
        h_rows = np.repeat(h, N, axis=0)  # (S*N, H)
        rows = np.zeros((S * N, 0), dtype=np.int64)
        for d in range(d_star):
            logits = model.depth_step(h_rows, style, rows)
            idx = _sample_indices(logits, config.temperature, rng)
            rows = np.concatenate([rows, idx[:, None]], axis=1)
        cand_rows = rows.reshape(S, N, d_star)
        cand_embs = model.frame_embedding(cand_rows)  # (S, N, NC)
        if config.strategy == "default":
            grids[:, t] = cand_rows[:, 0]
            committed[:, t] = cand_embs[:, 0]
            continue
        agg = np.zeros((S, NC))
        for i in range(S):
            if config.strategy == "average":
                agg[i] = average_aggregate(cand_embs[i])
            elif config.strategy == "knn":
                agg[i] = knn_aggregate(cand_embs[i], cand_embs[i, 0], config.k)
            else:
                scores = _candidate_sync_scores(
                    model, codec, sync_model, y, grids[i], cand_rows[i],
                    t, d_star, R)
                survivors = syncnet_reject(cand_embs[i], scores,
                                           config.keep_fraction,
                                           config.keep_best_only)
                agg[i] = average_aggregate(survivors)
        res = rvq_quantize_frames(agg, codec.codebook.data, d_star)
        grids[:, t] = res.grid
        committed[:, t] = res.quantized
    motions = np.stack([codec.decode(grids[i]) for i in range(S)])
    return motions, grids


def _candidate_sync_scores(model, codec, sync_model, y, committed_grid,
                           cand_rows, t, d_star, radius):
    """Score each candidate row by decoding a local window ending at t."""
    lo = max(0, t - radius)
    history = committed_grid[lo:t]  # rows < t are committed, row t is not
    scores = np.zeros(cand_rows.shape[0])
    for j in range(cand_rows.shape[0]):
        window = np.concatenate([history, cand_rows[j][None]], axis=0)
        motion_win = codec.decode(window)
        scores[j] = sync_model.score(motion_win, y[lo:t + 1])
    return scores


def generate(model: ARModel, codec, y: np.ndarray, s: np.ndarray,
             config: SamplingConfig, sync_model=None):
    """Single-sample convenience wrapper; returns (motion, grid)."""
    motions, grids = generate_batch(model, codec, y, s, config, 1, sync_model)
    return motions[0], grids[0]


# -- knowledge distillation ---------------------------------------------------


def relabel_grids(teacher: ARModel, codec, prepared,
                  config: SamplingConfig, rng: np.random.Generator):
    """Build aggregated-and-reprojected target grids for each sequence.

    Temporal context is computed teacher-forced on the ground-truth grid;
    depth-model candidates are sampled without teacher forcing, aggregated,
    and reprojected to the codebook.
    """
    from .tensor import Tensor
    d_star = config.validate(teacher.config.depth)
    N = config.n
    NC = teacher.config.code_dim
    relabeled = []
    for p in prepared:
        T = p.grid.shape[0]
        audio, style = teacher.context_features(p.audio, p.style)
        frame_embs = teacher.frame_embedding(p.grid)
        se = None if teacher.config.style_mode == "depth" else Tensor(style[None])
        h_av = teacher.temporal_context(Tensor(audio[None]), frame_embs[None],
                                        se).data[0]  # (T, H)
        h_rows = np.repeat(h_av, N, axis=0)  # (T*N, H)
        rows = np.zeros((T * N, 0), dtype=np.int64)
        for d in range(d_star):
            logits = teacher.depth_step(h_rows, style, rows)
            idx = _sample_indices(logits, config.temperature, rng)
            rows = np.concatenate([rows, idx[:, None]], axis=1)
        cand_rows = rows.reshape(T, N, d_star)
        cand_embs = teacher.frame_embedding(cand_rows)
        agg = np.zeros((T, NC))
        for t in range(T):
            if config.strategy == "knn":
                agg[t] = knn_aggregate(cand_embs[t], cand_embs[t, 0], config.k)
            else:
                agg[t] = average_aggregate(cand_embs[t])
        res = rvq_quantize_frames(agg, codec.codebook.data, d_star)
        relabeled.append(res.grid)
    return relabeled


def distill(teacher: ARModel, codec, corpus, sampling_config: SamplingConfig,
            student_config: ARConfig | None = None, log=None,
            checkpoint_hook=None, codec_checksum: str = ""):
    """Train a student on relabeled depth targets; see ``relabel_grids``.

    The student keeps ground-truth grids as temporal-model input and uses the
    relabeled grids as both depth-model input and target, so its inference
    cost equals plain single-sample generation.
    """
    if not np.array_equal(teacher.codebook.data, codec.codebook.data):
        raise ValueError("teacher and codec disagree on the codebook")
    cfg = student_config if student_config is not None else replace(
        teacher.config)
    rng = np.random.default_rng(cfg.seed + 1)
    student = ARModel(cfg, codec.codebook.data.copy(), rng,
                      codec_checksum=codec_checksum)
    records = corpus.split("train")
    prepared = prepare_sequences(codec, corpus, records, rng)
    targets = relabel_grids(teacher, codec, prepared, sampling_config, rng)
    params = student.trainable_parameters()
    history = []
    C = cfg.codebook_size
    if checkpoint_hook is not None:
        checkpoint_hook(0, student)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        total, n_batches = 0.0, 0
        for start in range(0, len(prepared), cfg.batch):
            take = order[start:start + cfg.batch]
            y = np.stack([prepared[i].audio for i in take])
            s = np.stack([prepared[i].style for i in take])
            gt = np.stack([prepared[i].grid for i in take])
            tgt = np.stack([targets[i] for i in take])
            student.zero_grad()
            logits = student.forward_logits(y, s, tgt, temporal_grids=gt)
            loss = cross_entropy(logits.reshape(-1, C), tgt.reshape(-1))
            loss.backward()
            adam_step(params.values(), cfg.lr)
            total += float(loss.data)
            n_batches += 1
        row = {"epoch": epoch, "loss": total / n_batches}
        history.append(row)
        if log is not None:
            log(row)
        if checkpoint_hook is not None:
            checkpoint_hook(epoch + 1, student)
    return student, history

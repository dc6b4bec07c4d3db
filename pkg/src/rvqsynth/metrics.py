"""Evaluation suite: probabilistic lip errors, synchronization networks,
Fréchet distances over embeddings, and style recognition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .nn import Conv1d, Dense, Module, Parameter, adam_step
from .tensor import ShapeError, Tensor, concat, cross_entropy, log_softmax


# -- lip vertex errors ---------------------------------------------------------


def _lip_deltas(x: np.ndarray, xhat: np.ndarray, lip_indices) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"sequence shapes differ: {x.shape} vs {xhat.shape}")
    lip = np.asarray(lip_indices, dtype=np.int64)
    if lip.size == 0:
        raise ValueError("lip vertex set is empty")
    T = x.shape[0]
    diff = (x - xhat).reshape(T, -1, 3)
    return np.sqrt((diff[:, lip, :] ** 2).sum(axis=2))


def lip_vertex_error(x: np.ndarray, xhat: np.ndarray, lip_indices) -> float:
    """Max over frames and lip vertices of the Euclidean position error."""
    return float(_lip_deltas(x, xhat, lip_indices).max())


def coverage_error(x: np.ndarray, samples, lip_indices) -> float:
    """Smallest lip vertex error over a sample set."""
    samples = list(samples)
    if not samples:
        raise ValueError("sample set must be nonempty")
    return min(lip_vertex_error(x, s, lip_indices) for s in samples)


def mean_estimate_error(x: np.ndarray, samples, lip_indices) -> float:
    """Lip vertex error of the framewise mean of the sample set."""
    samples = list(samples)
    if not samples:
        raise ValueError("sample set must be nonempty")
    mean = np.mean(np.stack(samples), axis=0)
    return lip_vertex_error(x, mean, lip_indices)


# -- Fréchet distance ----------------------------------------------------------


def gaussian_stats(embeddings: np.ndarray):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValueError("need at least 2 embeddings for Gaussian statistics")
    mu = embeddings.mean(axis=0)
    sigma = np.cov(embeddings, rowvar=False)
    return mu, np.atleast_2d(sigma)


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2-Wasserstein distance between Gaussian fits of two embedding sets.

    The cross-covariance square root uses a symmetric eigendecomposition of
    the symmetrized product with negative eigenvalues clamped to zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, sig_a = gaussian_stats(a)
    mu_b, sig_b = gaussian_stats(b)
    prod = sig_a @ sig_b
    sym = 0.5 * (prod + prod.T)
    eigvals = np.linalg.eigvalsh(sym)
    sqrt_trace = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    d2 = ((mu_a - mu_b) ** 2).sum() + np.trace(sig_a) + np.trace(sig_b) \
        - 2.0 * sqrt_trace
    return float(d2)


# -- shared helpers ------------------------------------------------------------


def _normalize_rows(t: Tensor, eps: float = 1e-12) -> Tensor:
    sumsq = (t * t).sum(axis=-1, keepdims=True)
    return t * (sumsq + eps) ** -0.5


def _conv_stack(x: Tensor, convs, slope: float = 0.1) -> Tensor:
    h = x
    for i, conv in enumerate(convs):
        h = conv(h)
        if i < len(convs) - 1:
            h = h.leaky_relu(slope)
    return h


# -- synchronization networks ----------------------------------------------------


@dataclass
class SyncConfig:
    variant: int = 2
    motion_dim: int = 60
    audio_dim: int = 8
    width: int = 24
    emb_dim: int = 16
    temperature: float = 0.07
    lr: float = 3e-3
    epochs: int = 12
    batch: int = 64
    clips_per_batch: int = 16
    shifts: tuple = (0, 1, 2, 4)
    window: int = 20
    seed: int = 0

    def __post_init__(self):
        self.shifts = tuple(self.shifts)
        if self.clips_per_batch * len(self.shifts) != self.batch:
            raise ValueError("batch must equal clips_per_batch * len(shifts)")


class SyncNet(Module):
    """Scores audio-motion correspondence over a fixed temporal window.

    Both variants embed each modality with a small convolutional stack; the
    frame features of the window are then flattened through a linear layer so
    the embedding is sensitive to frame-level alignment. Variant 1 fuses
    per-frame motion and audio features along time and scores through a
    linear head; variant 2 scores by cosine similarity of the normalized
    window embeddings.
    """

    def __init__(self, config: SyncConfig, rng: np.random.Generator | None = None):
        if config.variant not in (1, 2):
            raise ValueError("variant must be 1 or 2")
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.mesh_convs = [
            Conv1d(c.motion_dim, c.width, 1, rng, mode="same"),
            Conv1d(c.width, c.width, 3, rng, mode="same"),
            Conv1d(c.width, c.emb_dim, 3, rng, mode="same"),
        ]
        self.audio_convs = [
            Conv1d(c.audio_dim, c.width, 3, rng, mode="same"),
            Conv1d(c.width, c.emb_dim, 3, rng, mode="same"),
        ]
        self.mesh_proj = Dense(c.window * c.emb_dim, c.emb_dim, rng)
        self.audio_proj = Dense(c.window * c.emb_dim, c.emb_dim, rng)
        if c.variant == 1:
            self.fuse_conv = Conv1d(2 * c.emb_dim, c.width, 3, rng, mode="same")
            self.score_head = Dense(c.width, 1, rng)

    def mesh_frames(self, x: Tensor) -> Tensor:
        return _conv_stack(x, self.mesh_convs)

    def audio_frames(self, y: Tensor) -> Tensor:
        return _conv_stack(y, self.audio_convs)

    def _window_embed(self, frames: Tensor, proj: Dense) -> Tensor:
        B, W, E = frames.shape
        if W != self.config.window:
            raise ShapeError(f"expected window {self.config.window}, got {W}")
        return proj(frames.reshape(B, W * E))

    def mesh_embedding(self, x: Tensor) -> Tensor:
        """Window embeddings (B, emb) from (B, W, 3V) motion windows."""
        return self._window_embed(self.mesh_frames(x), self.mesh_proj)

    def audio_embedding(self, y: Tensor) -> Tensor:
        return self._window_embed(self.audio_frames(y), self.audio_proj)

    def _fit_window(self, seq: np.ndarray) -> np.ndarray:
        """Crop to the last W frames or left-pad by repeating the first."""
        seq = np.asarray(seq, dtype=np.float64)
        W = self.config.window
        if seq.shape[0] >= W:
            return seq[-W:]
        pad = np.repeat(seq[:1], W - seq.shape[0], axis=0)
        return np.concatenate([pad, seq], axis=0)

    def embed_mesh(self, x: np.ndarray) -> np.ndarray:
        """Normalized window embedding of one (T, 3V) sequence."""
        emb = self.mesh_embedding(Tensor(self._fit_window(x)[None]))
        return _normalize_rows(emb).data[0]

    def score_pairs(self, mesh_f: Tensor, audio_f: Tensor) -> Tensor:
        """Aligned scores for (B, W, E) frame features, shape (B,)."""
        if self.config.variant == 1:
            fused = concat([mesh_f, audio_f], axis=2)
            h = self.fuse_conv(fused).leaky_relu(0.1).mean(axis=1)
            return self.score_head(h).reshape(mesh_f.shape[0])
        m = _normalize_rows(self._window_embed(mesh_f, self.mesh_proj))
        a = _normalize_rows(self._window_embed(audio_f, self.audio_proj))
        return (m * a).sum(axis=-1)

    def score_matrix(self, mesh_f: Tensor, audio_f: Tensor) -> Tensor:
        """All-pairs scores, shape (B, B)."""
        B, W, E = mesh_f.shape
        if self.config.variant == 2:
            m = _normalize_rows(self._window_embed(mesh_f, self.mesh_proj))
            a = _normalize_rows(self._window_embed(audio_f, self.audio_proj))
            return m @ a.swapaxes(0, 1)
        mrep = (mesh_f.reshape(B, 1, W, E)
                + Tensor(np.zeros((B, B, W, E)))).reshape(B * B, W, E)
        arep = (audio_f.reshape(1, B, W, E)
                + Tensor(np.zeros((B, B, W, E)))).reshape(B * B, W, E)
        return self.score_pairs(mrep, arep).reshape(B, B)

    def score(self, x: np.ndarray, y: np.ndarray) -> float:
        """Synchronization score of one (motion, audio) pair."""
        if x.shape[0] != y.shape[0]:
            raise ShapeError("motion and audio must be frame-aligned")
        mesh_f = self.mesh_frames(Tensor(self._fit_window(x)[None]))
        audio_f = self.audio_frames(Tensor(self._fit_window(y)[None]))
        return float(self.score_pairs(mesh_f, audio_f).data[0])

    def save(self, path, seed: int = 0):
        cfg = dict(vars(self.config))
        cfg["shifts"] = list(cfg["shifts"])
        checkpoint.save_container(path, {"model": "sync", "config": cfg},
                                  self.parameters(), seed)

    @classmethod
    def load(cls, path) -> "SyncNet":
        arch, arrays, steps, _, _ = checkpoint.load_container(path)
        if arch.get("model") != "sync":
            raise checkpoint.ContainerError(f"{path} is not a sync checkpoint")
        net = cls(SyncConfig(**arch["config"]))
        checkpoint.restore_params(net.parameters(), arrays, steps)
        return net


def infonce_batch(corpus, records, config: SyncConfig,
                  rng: np.random.Generator):
    """One contrastive batch: clips x temporal offsets, so negatives mix
    cross-clip (semantic) and same-clip shifted (temporal) misalignment."""
    T = records[0].motion.shape[0]
    W = config.window
    max_shift = max(config.shifts)
    if W + max_shift > T:
        raise ValueError("window plus max shift exceeds clip length")
    picks = rng.choice(len(records), size=config.clips_per_batch, replace=False)
    meshes, audios = [], []
    for i in picks:
        rec = records[i]
        t0 = int(rng.integers(0, T - W - max_shift + 1))
        for off in config.shifts:
            meshes.append(rec.motion[t0 + off: t0 + off + W])
            audios.append(rec.audio[t0 + off: t0 + off + W])
    return np.stack(meshes), np.stack(audios)


def infonce_loss(net: SyncNet, meshes: np.ndarray, audios: np.ndarray) -> Tensor:
    mesh_f = net.mesh_frames(Tensor(meshes))
    audio_f = net.audio_frames(Tensor(audios))
    scores = net.score_matrix(mesh_f, audio_f) * (1.0 / net.config.temperature)
    targets = np.arange(meshes.shape[0])
    return cross_entropy(scores, targets)


def train_sync_net(corpus, variant: int, config: SyncConfig | None = None,
                   log=None):
    """InfoNCE training of the selected variant on the corpus train split."""
    cfg = config if config is not None else SyncConfig()
    cfg.variant = variant
    records = corpus.split("train")
    if len(records) < cfg.clips_per_batch:
        raise ValueError("batch larger than corpus")
    rng = np.random.default_rng(cfg.seed)
    net = SyncNet(cfg, rng)
    params = net.parameters()
    steps_per_epoch = max(1, len(records) // cfg.clips_per_batch)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            meshes, audios = infonce_batch(corpus, records, cfg, rng)
            net.zero_grad()
            loss = infonce_loss(net, meshes, audios)
            loss.backward()
            adam_step(params.values(), cfg.lr)
            total += float(loss.data)
        row = {"epoch": epoch, "loss": total / steps_per_epoch}
        history.append(row)
        if log is not None:
            log(row)
    return net, history


def shift_detection_rate(net: SyncNet, records, shift: int = 1,
                         window: int | None = None) -> float:
    """Fraction of clips whose aligned score beats a ``shift``-frame offset."""
    wins = 0
    for rec in records:
        T = rec.motion.shape[0]
        W = window if window is not None else min(net.config.window, T - shift)
        aligned = net.score(rec.motion[:W], rec.audio[:W])
        shifted = net.score(rec.motion[:W], rec.audio[shift:W + shift])
        wins += aligned > shifted
    return wins / len(records)


# -- style recognition ------------------------------------------------------------


@dataclass
class StyleConfig:
    motion_dim: int = 60
    width: int = 48
    emb_dim: int = 24
    margin: float = 0.3
    scale: float = 16.0
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 32
    seed: int = 0
    num_classes: int = 0  # filled in by training


class StyleNet(Module):
    """Speaker-style recognizer trained with an angular-margin loss.

    Encoder mirrors the codec encoder with standard (centered) convolutions.
    """

    def __init__(self, config: StyleConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.convs = [
            Conv1d(c.motion_dim, c.width, 1, rng, mode="same"),
            Conv1d(c.width, c.width, 3, rng, mode="same"),
            Conv1d(c.width, c.emb_dim, 3, rng, mode="same"),
        ]
        n = max(1, c.num_classes)
        self.class_weights = Parameter(rng.normal(0.0, 0.1, (n, c.emb_dim)))

    def embed_tape(self, x: Tensor) -> Tensor:
        return _conv_stack(x, self.convs).mean(axis=1)

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Embedding of one (T, 3V) motion sequence."""
        return self.embed_tape(Tensor(np.asarray(x, dtype=np.float64)[None])).data[0]

    def margin_logits(self, emb: Tensor, labels: np.ndarray) -> Tensor:
        cfg = self.config
        e = _normalize_rows(emb)
        w = _normalize_rows(self.class_weights)
        cos = e @ w.swapaxes(0, 1)  # (B, n_classes)
        B = emb.shape[0]
        onehot = np.zeros(cos.shape)
        onehot[np.arange(B), labels] = 1.0
        cos_t = (cos * Tensor(onehot)).sum(axis=1)
        sin_t = (1.0 - cos_t * cos_t + 1e-12) ** 0.5
        phi = cos_t * np.cos(cfg.margin) - sin_t * np.sin(cfg.margin)
        adjust = (phi - cos_t).reshape(B, 1) * Tensor(onehot)
        return (cos + adjust) * cfg.scale

    def save(self, path, speaker_ids, seed: int = 0):
        checkpoint.save_container(
            path, {"model": "style", "config": dict(vars(self.config))},
            self.parameters(), seed, extra={"speaker_ids": list(map(int, speaker_ids))})

    @classmethod
    def load(cls, path):
        arch, arrays, steps, _, extra = checkpoint.load_container(path)
        if arch.get("model") != "style":
            raise checkpoint.ContainerError(f"{path} is not a style checkpoint")
        net = cls(StyleConfig(**arch["config"]))
        checkpoint.restore_params(net.parameters(), arrays, steps)
        return net, extra.get("speaker_ids", [])


def train_style_net(corpus, config: StyleConfig | None = None, log=None):
    """Angular-margin training over the train-split speakers."""
    cfg = config if config is not None else StyleConfig()
    records = corpus.split("train")
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < 2:
        raise ValueError("style training needs at least 2 speakers")
    cfg.num_classes = len(speakers)
    class_of = {sid: i for i, sid in enumerate(speakers)}
    rng = np.random.default_rng(cfg.seed)
    net = StyleNet(cfg, rng)
    params = net.parameters()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        total, n_batches = 0.0, 0
        for start in range(0, len(records), cfg.batch):
            batch = [records[i] for i in order[start:start + cfg.batch]]
            x = np.stack([r.motion for r in batch])
            labels = np.array([class_of[r.speaker_id] for r in batch])
            net.zero_grad()
            emb = net.embed_tape(Tensor(x))
            loss = cross_entropy(net.margin_logits(emb, labels), labels)
            loss.backward()
            adam_step(params.values(), cfg.lr)
            total += float(loss.data)
            n_batches += 1
        row = {"epoch": epoch, "loss": total / n_batches}
        history.append(row)
        if log is not None:
            log(row)
    return net, speakers, history


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt((a * a).sum()) + 1e-12
    nb = np.sqrt((b * b).sum()) + 1e-12
    return float((a * b).sum() / (na * nb))


def style_similarity(net: StyleNet, a_seq: np.ndarray, b_seq: np.ndarray) -> float:
    """Cosine similarity between the embeddings of two motion clips."""
    return cosine_similarity(net.embed(a_seq), net.embed(b_seq))


def speaker_centroids(net: StyleNet, records) -> dict:
    """Per-speaker mean embedding over a record list."""
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec.speaker_id, []).append(net.embed(rec.motion))
    return {sid: np.mean(np.stack(v), axis=0) for sid, v in sorted(groups.items())}


def style_rank(query_emb: np.ndarray, target_speaker: int,
               centroids: dict) -> int:
    """1-based rank of the target speaker among centroids by cosine."""
    if target_speaker not in centroids:
        raise KeyError(f"no centroid for speaker {target_speaker}")
    sims = {sid: cosine_similarity(query_emb, c) for sid, c in centroids.items()}
    target = sims[target_speaker]
    return 1 + sum(1 for sid, v in sims.items()
                   if sid != target_speaker and v > target)


def style_fd(net: StyleNet, real_seqs, generated_seqs) -> float:
    a = np.stack([net.embed(x) for x in real_seqs])
    b = np.stack([net.embed(x) for x in generated_seqs])
    return frechet_distance(a, b)

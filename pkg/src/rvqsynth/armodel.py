"""Two-stage autoregressive model over code grids.

Stage one (temporal model) produces a per-frame audio-visual context from the
driving-signal features and the depth-summed code embeddings of previous
frames. Stage two (depth model) is a masked self-attention stack over a
length D+1 token sequence whose first token is the style embedding, predicting
one code index per depth. Trained with teacher-forced cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint
from .nn import (Conv1d, Dense, Module, Parameter, TransformerBlock, adam_step)
from .tensor import ShapeError, Tensor, concat, cross_entropy, log_softmax


@dataclass
class ARConfig:
    code_dim: int = 16
    codebook_size: int = 32
    depth: int = 4
    width: int = 64
    audio_dim: int = 8
    motion_dim: int = 60
    max_frames: int = 256
    depth_layers: int = 2
    heads: int = 4
    temporal: str = "conv"          # "conv" or "transformer"
    temporal_dilations: tuple = (1, 2, 4, 8)
    temporal_layers: int = 2        # transformer temporal variant
    audio_layers: int = 2
    audio_kernel: int = 3
    style_mode: str = "depth"       # "depth" (ours) or "temporal" (ablation)
    lr: float = 1e-3
    epochs: int = 40
    batch: int = 16
    seed: int = 0
    stochastic_targets: bool = False
    stochastic_tau: float = 0.05
    soft_targets: bool = False
    soft_eps: float = 0.1
    soft_alpha: float = 0.1

    def __post_init__(self):
        self.temporal_dilations = tuple(self.temporal_dilations)


class ARModel(Module):
    def __init__(self, config: ARConfig, codebook: np.ndarray,
                 rng: np.random.Generator | None = None,
                 codec_checksum: str = ""):
        codebook = np.asarray(codebook, dtype=np.float64)
        if codebook.shape != (config.codebook_size, config.code_dim):
            raise ShapeError(
                f"codebook shape {codebook.shape} does not match config "
                f"({config.codebook_size}, {config.code_dim})")
        self.config = config
        self.codec_checksum = codec_checksum
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        H = c.width
        self.codebook = Parameter(codebook)  # frozen; excluded from updates
        # audio encoder: centered convolutions, window radius self.audio_radius
        dims = [c.audio_dim] + [H] * c.audio_layers
        self.audio_convs = [Conv1d(dims[i], dims[i + 1], c.audio_kernel, rng,
                                   mode="same") for i in range(c.audio_layers)]
        # style encoder: codec-encoder shape, non-causal convolutions
        self.style_convs = [
            Conv1d(c.motion_dim, H, 1, rng, mode="same"),
            Conv1d(H, H, 3, rng, mode="same"),
            Conv1d(H, H, 3, rng, mode="same"),
        ]
        self.style_proj = Dense(H, H, rng)
        # temporal model
        self.code_proj = Dense(c.code_dim, H, rng)
        self.start_token = Parameter(rng.normal(0.0, 0.05, H))
        if c.temporal == "conv":
            self.temporal_convs = [Conv1d(H, H, 2, rng, dilation=d, mode="causal")
                                   for d in c.temporal_dilations]
        elif c.temporal == "transformer":
            self.temporal_pos = Parameter(rng.normal(0.0, 0.05, (c.max_frames, H)))
            self.temporal_blocks = [TransformerBlock(H, c.heads, rng, causal=True)
                                    for _ in range(c.temporal_layers)]
        else:
            raise ValueError(f"unknown temporal model {c.temporal!r}")
        # depth model
        self.depth_pos = Parameter(rng.normal(0.0, 0.05, (c.depth + 1, H)))
        self.prefix_proj = Dense(c.code_dim, H, rng)
        self.depth_blocks = [TransformerBlock(H, c.heads, rng, causal=True)
                             for _ in range(c.depth_layers)]
        self.head = Dense(H, c.codebook_size, rng)
        self.style_const = Parameter(rng.normal(0.0, 0.05, H))
        self.depth_pass_count = 0

    # -- small helpers ----------------------------------------------------

    @property
    def audio_radius(self) -> int:
        """Frames of past/future driving signal visible at each frame."""
        return sum(conv.radius for conv in self.audio_convs)

    def temporal_receptive_field(self) -> int:
        """Total frames (current included) visible to the causal conv stack."""
        return 1 + sum(d * (conv.kernel - 1)
                       for conv, d in zip(self.temporal_convs,
                                          self.config.temporal_dilations))

    def frame_embedding(self, grid_rows: np.ndarray) -> np.ndarray:
        """Depth-summed code embedding e~(j_t) for rows of indices (..., D')."""
        return self.codebook.data[grid_rows].sum(axis=-2)

    def trainable_parameters(self) -> dict:
        return {k: v for k, v in self.parameters().items() if k != "codebook"}

    # -- forward passes -----------------------------------------------------

    def encode_audio(self, y: Tensor) -> Tensor:
        if y.shape[-1] != self.config.audio_dim:
            raise ShapeError(f"audio features must have dim "
                             f"{self.config.audio_dim}, got {y.shape}")
        h = y
        for i, conv in enumerate(self.audio_convs):
            h = conv(h)
            if i < len(self.audio_convs) - 1:
                h = h.leaky_relu(0.1)
        return h

    def encode_style(self, s: Tensor) -> Tensor:
        """Mean-pooled embedding of a (B, T_s, 3V) style reference."""
        if s.ndim != 3 or s.shape[1] < 1:
            raise ShapeError("style reference needs at least one frame")
        h = s
        for i, conv in enumerate(self.style_convs):
            h = conv(h)
            if i < len(self.style_convs) - 1:
                h = h.leaky_relu(0.1)
        return h.mean(axis=1)

    def temporal_context(self, audio_feats: Tensor, frame_embs: np.ndarray,
                         style_emb: Optional[Tensor] = None) -> Tensor:
        """h_av over all frames. ``frame_embs`` holds e~(j_t) per frame; the
        model reads it shifted by one so h_av[t] sees only rows < t."""
        B, T, H = audio_feats.shape
        code_in = self.code_proj(Tensor(frame_embs))
        start = self.start_token.reshape(1, 1, H) + Tensor(np.zeros((B, 1, H)))
        shifted = concat([start, code_in[:, :-1, :]], axis=1) if T > 1 else start
        h = audio_feats + shifted
        if self.config.style_mode == "temporal" and style_emb is not None:
            h = h + self.style_proj(style_emb).reshape(B, 1, H)
        if self.config.temporal == "conv":
            for conv in self.temporal_convs:
                h = h + conv(h).leaky_relu(0.1)
        else:
            h = h + self.temporal_pos[np.arange(T)]
            for block in self.temporal_blocks:
                h = block(h)
        return h

    def _depth_tokens(self, h_av_flat: Tensor, style_tok: Tensor,
                      prefix_embs: np.ndarray) -> Tensor:
        """Token sequence v for the depth transformer, (N, D+1, H)."""
        N, H = h_av_flat.shape
        D = self.config.depth
        parts = [style_tok.reshape(N, 1, H), h_av_flat.reshape(N, 1, H)]
        if D > 1:
            parts.append(self.prefix_proj(Tensor(prefix_embs)))
        v = concat(parts, axis=1)
        return v + self.depth_pos.reshape(1, D + 1, H)

    def depth_logits_full(self, h_av: Tensor, style_emb: Optional[Tensor],
                          grids: np.ndarray) -> Tensor:
        """Teacher-forced logits for every (t, d), shape (B, T, D, |C|)."""
        B, T, H = h_av.shape
        D, C = self.config.depth, self.config.codebook_size
        codes = self.codebook.data[grids]                    # (B, T, D, N_C)
        prefix = np.cumsum(codes, axis=2)[:, :, :D - 1, :] if D > 1 else None
        if self.config.style_mode == "depth" and style_emb is not None:
            style_tok = self.style_proj(style_emb)           # (B, H)
            style_flat = (style_tok.reshape(B, 1, H)
                          + Tensor(np.zeros((B, T, H)))).reshape(B * T, H)
        else:
            style_flat = (self.style_const.reshape(1, H)
                          + Tensor(np.zeros((B * T, H))))
        h_flat = h_av.reshape(B * T, H)
        pref_flat = prefix.reshape(B * T, D - 1, -1) if D > 1 else None
        v = self._depth_tokens(h_flat, style_flat, pref_flat)
        for block in self.depth_blocks:
            v = block(v)
        logits = self.head(v[:, 1:D + 1, :])
        return logits.reshape(B, T, D, C)

    def forward_logits(self, y: np.ndarray, s: np.ndarray, grids: np.ndarray,
                       temporal_grids: np.ndarray | None = None) -> Tensor:
        """End-to-end teacher-forced logits from raw inputs (batched).

        ``temporal_grids``, when given, feeds the temporal model while
        ``grids`` feeds the depth model (used by distillation relabeling).
        """
        audio = self.encode_audio(Tensor(y))
        style = self.encode_style(Tensor(s))
        tg = grids if temporal_grids is None else temporal_grids
        frame_embs = self.frame_embedding(tg)
        h_av = self.temporal_context(audio, frame_embs, style)
        return self.depth_logits_full(h_av, style, grids)

    # -- inference-side incremental API -------------------------------------

    def context_features(self, y: np.ndarray, s: np.ndarray):
        """Precompute (audio features (T, H), style embedding (H,))."""
        audio = self.encode_audio(Tensor(y[None])).data[0]
        style = self.encode_style(Tensor(s[None])).data[0]
        return audio, style

    def h_av_at(self, audio_feats: np.ndarray, committed_embs: np.ndarray,
                t: int, style_emb: np.ndarray | None = None) -> np.ndarray:
        """Audio-visual context for frame ``t`` given committed frame
        embeddings for frames < t."""
        embs = np.zeros((t + 1, committed_embs.shape[-1] if committed_embs.size
                         else self.config.code_dim))
        if t > 0:
            embs[:t] = committed_embs[:t]
        se = Tensor(style_emb[None]) if style_emb is not None else None
        h = self.temporal_context(Tensor(audio_feats[None, :t + 1]), embs[None], se)
        return h.data[0, t]

    def depth_step(self, h_av_t: np.ndarray, style_emb: np.ndarray,
                   partial_rows: np.ndarray) -> np.ndarray:
        """Logits for the next depth of N candidate rows; counts one depth
        pass per candidate. ``partial_rows`` is (N, d) indices, d may be 0;
        ``h_av_t`` is one context vector (H,) or one per row (N, H)."""
        N = partial_rows.shape[0]
        d = partial_rows.shape[1]
        D, H = self.config.depth, self.config.width
        self.depth_pass_count += N
        if self.config.style_mode == "depth":
            style_tok = self.style_proj(Tensor(style_emb[None])).data[0]
        else:
            style_tok = self.style_const.data
        h_av_t = np.asarray(h_av_t)
        if h_av_t.ndim == 1:
            h_av_t = np.broadcast_to(h_av_t, (N, h_av_t.shape[0]))
        L = d + 2
        v = np.zeros((N, L, H))
        v[:, 0] = style_tok
        v[:, 1] = h_av_t
        if d > 0:
            codes = self.codebook.data[partial_rows]      # (N, d, N_C)
            prefix = np.cumsum(codes, axis=1)
            v[:, 2:] = self.prefix_proj(Tensor(prefix)).data
        v = Tensor(v + self.depth_pos.data[:L])
        for block in self.depth_blocks:
            v = block(v)
        return self.head(v[:, L - 1:L, :]).data[:, 0, :]

    # -- scoring -----------------------------------------------------------

    def sequence_log_prob(self, grid: np.ndarray, y: np.ndarray,
                          s: np.ndarray) -> float:
        return float(self.sequence_log_probs(grid[None], y, s)[0])

    def sequence_log_probs(self, grids: np.ndarray, y: np.ndarray,
                           s: np.ndarray) -> np.ndarray:
        """Teacher-forced log-probabilities of many grids for one (y, s)."""
        G = grids.shape[0]
        yb = np.broadcast_to(y, (G,) + y.shape)
        sb = np.broadcast_to(s, (G,) + s.shape)
        logits = self.forward_logits(yb, sb, grids)
        logp = log_softmax(logits, axis=-1).data
        picked = np.take_along_axis(logp, grids[..., None], axis=-1)[..., 0]
        return picked.sum(axis=(1, 2))

    # -- persistence --------------------------------------------------------

    def save(self, path, seed: int = 0):
        cfg = dict(vars(self.config))
        cfg["temporal_dilations"] = list(cfg["temporal_dilations"])
        checkpoint.save_container(
            path, {"model": "ar", "config": cfg}, self.parameters(), seed,
            extra={"codec_checksum": self.codec_checksum})

    @classmethod
    def load(cls, path) -> "ARModel":
        arch, arrays, steps, seed, extra = checkpoint.load_container(path)
        if arch.get("model") != "ar":
            raise checkpoint.ContainerError(f"{path} is not an AR checkpoint")
        cfg = ARConfig(**arch["config"])
        model = cls(cfg, arrays["codebook"],
                    codec_checksum=extra.get("codec_checksum", ""))
        checkpoint.restore_params(model.parameters(), arrays, steps)
        return model


# -- target construction ----------------------------------------------------


def stochastic_grid(z: np.ndarray, codebook: np.ndarray, depth: int,
                    tau: float, rng: np.random.Generator) -> np.ndarray:
    """Boltzmann-sample quantizer indices instead of the argmin at each depth."""
    T = z.shape[0]
    residual = z.copy()
    grid = np.zeros((T, depth), dtype=np.int64)
    for d in range(depth):
        d2 = ((residual[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
        logits = -d2 / max(tau, 1e-9)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        cdf = np.cumsum(p, axis=1)
        u = rng.random((T, 1))
        idx = (u > cdf).sum(axis=1)
        grid[:, d] = idx
        residual = residual - codebook[idx]
    return grid


def soft_target_distributions(z: np.ndarray, grid: np.ndarray,
                              codebook: np.ndarray, eps: float,
                              alpha: float) -> np.ndarray:
    """Label smoothing toward codes nearly as close as the selected one."""
    T, D = grid.shape
    C = codebook.shape[0]
    out = np.zeros((T, D, C))
    residual = z.copy()
    for d in range(D):
        dist = np.sqrt(((residual[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2))
        sel = grid[:, d]
        dmin = dist[np.arange(T), sel]
        near = dist <= (1.0 + eps) * dmin[:, None]
        near[np.arange(T), sel] = False
        counts = near.sum(axis=1)
        tgt = np.zeros((T, C))
        tgt[np.arange(T), sel] = np.where(counts > 0, 1.0 - alpha, 1.0)
        spread = np.where(counts > 0, alpha / np.maximum(counts, 1), 0.0)
        tgt += near * spread[:, None]
        out[:, d] = tgt
        residual = residual - codebook[sel]
    return out


@dataclass
class PreparedSequence:
    audio: np.ndarray
    style: np.ndarray
    latents: np.ndarray
    grid: np.ndarray


def prepare_sequences(codec, corpus, records, rng: np.random.Generator) -> list:
    """Freeze latents/grids and pick a same-speaker style clip per record."""
    from .data import style_reference
    out = []
    for rec in records:
        z = codec.encode(rec.motion)
        grid = codec.quantize(z).grid
        style = style_reference(corpus, rec, rng)
        out.append(PreparedSequence(rec.audio, style, z, grid))
    return out


def train_ar(codec, corpus, config: ARConfig, log=None,
             codec_checksum: str = "", val_records=None):
    """Teacher-forced training against grids from a frozen codec."""
    if (codec.config.code_dim != config.code_dim
            or codec.config.codebook_size != config.codebook_size
            or codec.config.depth != config.depth):
        raise ValueError("codec and AR config disagree on codebook geometry")
    rng = np.random.default_rng(config.seed)
    model = ARModel(config, codec.codebook.data.copy(), rng,
                    codec_checksum=codec_checksum)
    records = corpus.split("train")
    if not records:
        raise ValueError("corpus has no training sequences")
    prepared = prepare_sequences(codec, corpus, records, rng)
    params = model.trainable_parameters()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(prepared))
        total, n_batches = 0.0, 0
        for start in range(0, len(prepared), config.batch):
            batch = [prepared[i] for i in order[start:start + config.batch]]
            if config.stochastic_targets:
                grids = np.stack([stochastic_grid(p.latents, model.codebook.data,
                                                  config.depth,
                                                  config.stochastic_tau, rng)
                                  for p in batch])
            else:
                grids = np.stack([p.grid for p in batch])
            y = np.stack([p.audio for p in batch])
            s = np.stack([p.style for p in batch])
            model.zero_grad()
            logits = model.forward_logits(y, s, grids)
            C = config.codebook_size
            if config.soft_targets:
                tgt = np.stack([soft_target_distributions(
                    p.latents, g, model.codebook.data,
                    config.soft_eps, config.soft_alpha)
                    for p, g in zip(batch, grids)])
                loss = cross_entropy(logits.reshape(-1, C),
                                     tgt.reshape(-1, C))
            else:
                loss = cross_entropy(logits.reshape(-1, C), grids.reshape(-1))
            loss.backward()
            adam_step(params.values(), config.lr)
            total += float(loss.data)
            n_batches += 1
        row = {"epoch": epoch, "loss": total / n_batches}
        history.append(row)
        if log is not None:
            log(row)
    return model, history


def held_out_cross_entropy(model: ARModel, codec, corpus, records,
                           seed: int = 0) -> float:
    """Mean per-position cross-entropy on a record list (teacher forced)."""
    rng = np.random.default_rng(seed)
    prepared = prepare_sequences(codec, corpus, records, rng)
    total, count = 0.0, 0
    for p in prepared:
        lp = model.sequence_log_prob(p.grid, p.audio, p.style)
        total -= lp
        count += p.grid.size
    return total / count

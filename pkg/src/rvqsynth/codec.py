"""Residual vector-quantized autoencoder over motion sequences.

A causal convolutional encoder maps (T, 3V) deformations to per-frame
latents, each frame is quantized by recursive nearest-code projection against
a single codebook shared across depths, and a causal decoder maps the summed
codes back to motion space. Training uses a straight-through estimator with
commitment and codebook losses at every depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .nn import Conv1d, DivergenceError, Module, Parameter, adam_step
from .tensor import ShapeError, Tensor, straight_through

GRID_MAGIC = b"RVQJ"


@dataclass
class QuantizationResult:
    grid: np.ndarray            # (T, D) codebook indices
    quantized: np.ndarray       # (T, N_C), exactly the sum of selected codes
    residual_norms: np.ndarray  # (T, D) residual norm after each depth


@dataclass
class CodecConfig:
    input_dim: int = 60         # 3V
    depth: int = 4
    codebook_size: int = 32
    code_dim: int = 16
    hidden: int | None = None   # defaults to 4 * code_dim
    beta: float = 0.25
    lr: float = 2e-3
    epochs: int = 60
    batch: int = 16
    recon_all_depths: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = 4 * self.code_dim


def rvq_quantize_frames(z: np.ndarray, codebook: np.ndarray,
                        depth_limit: int) -> QuantizationResult:
    """Quantize a (T, N_C) batch of latent frames to ``depth_limit`` codes.

    At each depth the nearest code by Euclidean distance is selected (ties
    break to the lowest index) and subtracted from the residual.
    """
    if not 1 <= depth_limit:
        raise ValueError("depth_limit must be >= 1")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    T = z.shape[0]
    indices = np.zeros((T, depth_limit), dtype=np.int64)
    norms = np.zeros((T, depth_limit))
    residual = z.copy()
    quantized = np.zeros_like(z)
    for d in range(depth_limit):
        d2 = ((residual[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        indices[:, d] = idx
        residual = residual - codebook[idx]
        quantized = quantized + codebook[idx]
        norms[:, d] = np.sqrt((residual ** 2).sum(axis=1))
    return QuantizationResult(indices, quantized, norms)


def rvq_quantize(z: np.ndarray, codebook: np.ndarray, depth_limit: int):
    """Single-vector form: returns (indices, quantized vector, residual norms)."""
    res = rvq_quantize_frames(np.asarray(z)[None, :], codebook, depth_limit)
    return res.grid[0], res.quantized[0], res.residual_norms[0]


class Codec(Module):
    def __init__(self, config: CodecConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.enc_layers = [
            Conv1d(c.input_dim, c.hidden, 1, rng, mode="same"),
            Conv1d(c.hidden, c.hidden, 3, rng, mode="causal"),
            Conv1d(c.hidden, c.code_dim, 3, rng, mode="causal"),
        ]
        self.dec_layers = [
            Conv1d(c.code_dim, c.hidden, 3, rng, mode="causal"),
            Conv1d(c.hidden, c.hidden, 3, rng, mode="causal"),
            Conv1d(c.hidden, c.input_dim, 1, rng, mode="same"),
        ]
        self.codebook = Parameter(rng.normal(0.0, 0.1, (c.codebook_size, c.code_dim)))

    # -- forward ----------------------------------------------------------

    def encode_tape(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.enc_layers):
            h = layer(h)
            if i < len(self.enc_layers) - 1:
                h = h.leaky_relu(0.1)
        return h

    def decode_tape(self, zq: Tensor) -> Tensor:
        h = zq
        for i, layer in enumerate(self.dec_layers):
            h = layer(h)
            if i < len(self.dec_layers) - 1:
                h = h.leaky_relu(0.1)
        return h

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Map one (T, 3V) sequence to (T, N_C) latents."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"expected (T, {self.config.input_dim}) motion, got {x.shape}")
        return self.encode_tape(Tensor(x[None])).data[0]

    def quantize(self, z: np.ndarray, depth_limit: int | None = None) -> QuantizationResult:
        d = self.config.depth if depth_limit is None else depth_limit
        if not 1 <= d <= self.config.depth:
            raise ValueError(f"depth_limit must be in [1, {self.config.depth}]")
        return rvq_quantize_frames(z, self.codebook.data, d)

    def decode(self, grid, depth_limit: int | None = None) -> np.ndarray:
        """Decode a CodeGrid (or QuantizationResult) to motion space."""
        if isinstance(grid, QuantizationResult):
            grid = grid.grid
        grid = np.asarray(grid)
        d = grid.shape[1] if depth_limit is None else depth_limit
        if not 1 <= d <= grid.shape[1]:
            raise ValueError(f"depth_limit must be in [1, {grid.shape[1]}]")
        if grid.min() < 0 or grid.max() >= self.config.codebook_size:
            raise ValueError("code index out of range")
        zq = self.codebook.data[grid[:, :d]].sum(axis=1)
        return self.decode_tape(Tensor(zq[None])).data[0]

    def encode_decode(self, x: np.ndarray, depth_limit: int | None = None) -> np.ndarray:
        return self.decode(self.quantize(self.encode(x)).grid, depth_limit)

    # -- persistence --------------------------------------------------------

    def save(self, path, seed: int = 0):
        cfg = dict(vars(self.config))
        checkpoint.save_container(path, {"model": "codec", "config": cfg},
                                  self.parameters(), seed)

    @classmethod
    def load(cls, path) -> "Codec":
        arch, arrays, steps, seed, _ = checkpoint.load_container(path)
        if arch.get("model") != "codec":
            raise checkpoint.ContainerError(f"{path} is not a codec checkpoint")
        codec = cls(CodecConfig(**arch["config"]))
        checkpoint.restore_params(codec.parameters(), arrays, steps)
        return codec


def init_codebook(codec: Codec, records, rng: np.random.Generator):
    """Seed codes from encoder outputs of a warmup pass."""
    latents = []
    for rec in records[: max(4, codec.config.codebook_size)]:
        latents.append(codec.encode(rec.motion))
    pool = np.concatenate(latents, axis=0)
    n = codec.config.codebook_size
    pick = rng.choice(pool.shape[0], size=min(n, pool.shape[0]), replace=False)
    codes = pool[pick]
    if codes.shape[0] < n:
        extra = rng.normal(0.0, 0.1, (n - codes.shape[0], codec.config.code_dim))
        codes = np.concatenate([codes, extra], axis=0)
    codes = codes + rng.normal(0.0, 1e-3, codes.shape)
    codec.codebook.data = codes


def train_codec(corpus, config: CodecConfig, log=None):
    """Train on the corpus train split; returns (codec, per-epoch history)."""
    records = corpus.split("train")
    if not records:
        raise ValueError("corpus has no training sequences")
    rng = np.random.default_rng(config.seed)
    codec = Codec(config, rng)
    init_codebook(codec, records, rng)
    params = codec.parameters()
    history = []
    snapshot = {k: p.data.copy() for k, p in params.items()}
    D = config.depth
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        usage = np.zeros(config.codebook_size, dtype=np.int64)
        totals = {"loss": 0.0, "recon": 0.0, "commit": 0.0, "codebook": 0.0}
        n_batches = 0
        for start in range(0, len(records), config.batch):
            batch = [records[i] for i in order[start:start + config.batch]]
            x = Tensor(np.stack([r.motion for r in batch]))
            codec.zero_grad()
            z = codec.encode_tape(x)
            B, T, NC = z.shape
            flat = z.data.reshape(B * T, NC)
            res = rvq_quantize_frames(flat, codec.codebook.data, D)
            np.add.at(usage, res.grid.reshape(-1), 1)
            partials = np.cumsum(codec.codebook.data[res.grid], axis=1)  # (BT, D, NC)

            def recon_at(d):
                zq = partials[:, d - 1].reshape(B, T, NC)
                xhat = codec.decode_tape(straight_through(Tensor(zq), z))
                return ((xhat - x) ** 2.0).mean()

            recon = recon_at(D)
            if config.recon_all_depths and D > 1:
                d_rand = int(rng.integers(1, D))
                recon = recon * 0.5 + recon_at(d_rand) * 0.5

            commit = None
            cbloss = None
            zflat = z.reshape(B * T, NC)
            residual = flat.copy()
            for d in range(D):
                gathered = codec.codebook[res.grid[:, d]]
                term_cb = ((gathered - Tensor(residual)) ** 2.0).mean()
                cbloss = term_cb if cbloss is None else cbloss + term_cb
                residual = residual - codec.codebook.data[res.grid[:, d]]
                term_c = ((zflat - Tensor(partials[:, d])) ** 2.0).mean()
                commit = term_c if commit is None else commit + term_c
            commit = commit * (1.0 / D)
            cbloss = cbloss * (1.0 / D)
            loss = recon + config.beta * commit + cbloss
            if not np.isfinite(loss.data):
                for k, p in params.items():
                    p.data = snapshot[k]
                raise DivergenceError(
                    f"non-finite codec loss at epoch {epoch}; rolled back")
            loss.backward()
            adam_step(params.values(), config.lr)
            totals["loss"] += float(loss.data)
            totals["recon"] += float(recon.data)
            totals["commit"] += float(commit.data)
            totals["codebook"] += float(cbloss.data)
            n_batches += 1
        # reseed codes unused for the whole epoch
        dead = np.flatnonzero(usage == 0)
        if dead.size:
            seed_rec = records[int(rng.integers(len(records)))]
            lat = codec.encode(seed_rec.motion)
            pick = rng.integers(lat.shape[0], size=dead.size)
            codec.codebook.data[dead] = lat[pick] + rng.normal(0.0, 1e-3,
                                                               (dead.size, NC))
        snapshot = {k: p.data.copy() for k, p in params.items()}
        row = {"epoch": epoch, **{k: v / n_batches for k, v in totals.items()}}
        history.append(row)
        if log is not None:
            log(row)
    return codec, history


def reconstruction_mse(codec: Codec, records, depth_limit: int | None = None) -> np.ndarray:
    """Per-sequence mean squared reconstruction error."""
    out = []
    for rec in records:
        xhat = codec.encode_decode(rec.motion, depth_limit)
        out.append(float(((xhat - rec.motion) ** 2).mean()))
    return np.array(out)


def quantize_corpus(codec: Codec, records) -> list:
    """Pre-quantize motion sequences to CodeGrids (and cache latents)."""
    grids = []
    for rec in records:
        z = codec.encode(rec.motion)
        grids.append((codec.quantize(z).grid, z))
    return grids


# -- CodeGrid file format -------------------------------------------------------


def write_grid(grid: np.ndarray, codebook_size: int, path):
    grid = np.asarray(grid)
    T, D = grid.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<III", T, D, codebook_size))
        f.write(np.ascontiguousarray(grid, dtype="<u2").tobytes())


def read_grid(path):
    from .data import BadMagicError, TruncatedPayloadError
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != GRID_MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    T, D, csize = struct.unpack("<III", raw[4:16])
    end = 16 + 2 * T * D
    if len(raw) < end:
        raise TruncatedPayloadError(f"truncated payload in {path}")
    grid = np.frombuffer(raw[16:end], dtype="<u2").astype(np.int64).reshape(T, D)
    return grid, csize

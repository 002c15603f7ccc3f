"""Text-prompt encoder: frozen embedding -> 2-hidden-layer MLP -> VQ bottleneck.

Everything is plain numpy with hand-written analytic gradients so the
finite-difference harness can check each piece.  The quantizer trains
with the usual two auxiliary terms (codebook pull and commitment) and a
straight-through gradient for the downstream task loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import TrainingDiverged


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU: x * Phi(x)."""
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx gelu = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return ndtr(x) + x * phi


@dataclass
class MlpParams:
    """Weights for D_in -> H -> H -> D with GELU hidden activations."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        h1, d_in = self.w1.shape
        h2a, h1b = self.w2.shape
        d_out, h2b = self.w3.shape
        ok = (self.b1.shape == (h1,) and self.b2.shape == (h2a,)
              and self.b3.shape == (d_out,) and h1 == h1b and h2a == h2b)
        if not ok:
            raise ValueError("inconsistent MLP parameter shapes")
        for a in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite MLP parameter")

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w3.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in
                           (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)))

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


def init_mlp(rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> MlpParams:
    def lin(n_out, n_in):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))

    return MlpParams(
        w1=lin(hidden, d_in), b1=np.zeros(hidden),
        w2=lin(hidden, hidden), b2=np.zeros(hidden),
        w3=lin(d_out, hidden), b3=np.zeros(d_out),
    )


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass; returns (z_e, cache) with pre-activations for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ValueError(f"input shape {x.shape} != ({params.d_in},)")
    a1 = params.w1 @ x + params.b1
    h1 = gelu(a1)
    a2 = params.w2 @ h1 + params.b2
    h2 = gelu(a2)
    z_e = params.w3 @ h2 + params.b3
    return z_e, {"x": x, "a1": a1, "h1": h1, "a2": a2, "h2": h2}


def mlp_backward(params: MlpParams, cache: dict, grad_out: np.ndarray):
    """Analytic gradients of the forward map.

    Returns (grad_params: MlpParams-shaped, grad_x).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (params.d_out,):
        raise ValueError("grad_out shape mismatch with cached forward")
    x, a1, h1, a2, h2 = cache["x"], cache["a1"], cache["h1"], cache["a2"], cache["h2"]
    g_w3 = np.outer(grad_out, h2)
    g_b3 = grad_out
    g_h2 = params.w3.T @ grad_out
    g_a2 = g_h2 * gelu_grad(a2)
    g_w2 = np.outer(g_a2, h1)
    g_b2 = g_a2
    g_h1 = params.w2.T @ g_a2
    g_a1 = g_h1 * gelu_grad(a1)
    g_w1 = np.outer(g_a1, x)
    g_b1 = g_a1
    g_x = params.w1.T @ g_a1
    grads = MlpParams(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2, w3=g_w3, b3=g_b3)
    return grads, g_x


# ---------------------------------------------------------------------------
# Vector quantization
# ---------------------------------------------------------------------------


@dataclass
class Codebook:
    """K x D embedding table with usage statistics and commitment weight."""

    entries: np.ndarray
    usage_counts: np.ndarray
    beta: float = 0.25

    def __post_init__(self):
        if self.entries.ndim != 2 or len(self.entries) < 1:
            raise ValueError("codebook must be a K x D matrix with K >= 1")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("non-finite codebook entry")
        if self.usage_counts.shape != (len(self.entries),):
            raise ValueError("usage_counts length mismatch")

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, d: int, scale: float = 0.5,
             beta: float = 0.25) -> "Codebook":
        return cls(entries=rng.normal(0.0, scale, size=(k, d)),
                   usage_counts=np.zeros(k, dtype=np.int64), beta=beta)

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0


def quantize(cb: Codebook, z_e: np.ndarray, count_usage: bool = True):
    """Nearest codebook entry by L2; ties break toward the lowest index.

    Returns (index, entry copy); increments the entry's usage count.
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.shape != (cb.entries.shape[1],):
        raise ValueError(f"z_e dim {z_e.shape} != codebook dim {cb.entries.shape[1]}")
    d2 = np.sum((cb.entries - z_e[None, :]) ** 2, axis=1)
    idx = int(np.argmin(d2))
    if count_usage:
        cb.usage_counts[idx] += 1
    return idx, cb.entries[idx].copy()


def vq_loss(z_e: np.ndarray, e: np.ndarray, beta: float):
    """Codebook term ||sg(z_e) - e||^2 plus commitment beta * ||z_e - sg(e)||^2.

    Returns (total, codebook_term, commitment_term).
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if z_e.shape != e.shape:
        raise ValueError("z_e and e dims differ")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    sq = float(np.sum((z_e - e) ** 2))
    codebook_term = sq
    commitment_term = beta * sq
    return codebook_term + commitment_term, codebook_term, commitment_term


def straight_through(z_e: np.ndarray, e: np.ndarray,
                     grad_wrt_token: np.ndarray) -> np.ndarray:
    """Straight-through estimator: token = z_e + sg(e - z_e), so the token
    gradient is copied to z_e unchanged."""
    z_e = np.asarray(z_e)
    e = np.asarray(e)
    if z_e.shape != e.shape or z_e.shape != np.asarray(grad_wrt_token).shape:
        raise ValueError("dimension mismatch")
    return np.array(grad_wrt_token, dtype=np.float64, copy=True)


# ---------------------------------------------------------------------------
# Frozen embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrozenEmbedding:
    """Precomputed text embedding; the encoder that made it is out of scope."""

    vector: np.ndarray
    source_text: str


def write_embeddings(path, vectors: np.ndarray, texts) -> Path:
    """Write the sidecar format: one JSON header line + raw float32 block."""
    path = Path(path)
    vectors = np.asarray(vectors, dtype="<f4")
    texts = list(texts)
    if vectors.ndim != 2 or len(vectors) != len(texts):
        raise ValueError("vectors must be (N, D) aligned with texts")
    header = {"dim": int(vectors.shape[1]), "count": int(vectors.shape[0]),
              "texts": texts}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
                .encode("utf-8"))
        f.write(vectors.tobytes())
    return path


def load_embeddings(path) -> list:
    """Read the sidecar format back into FrozenEmbedding records."""
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    dim, count = int(header["dim"]), int(header["count"])
    raw = blob[nl + 1:]
    if len(raw) != 4 * dim * count:
        raise ValueError(f"embedding block size mismatch in {path}")
    mat = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float64)
    texts = header["texts"]
    return [FrozenEmbedding(vector=mat[i], source_text=texts[i]) for i in range(count)]


def make_toy_embeddings(n_per_cluster: int = 24, d: int = 32, seed: int = 7,
                        separation: float = 4.0):
    """Two well-separated embedding clusters with per-cluster target tokens.

    Returns (samples, cluster_ids) where samples are
    (FrozenEmbedding, target token) pairs for train_toy_encoder.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    c0 = rng.normal(0.0, 1.0, size=d)
    c0 /= np.linalg.norm(c0)
    c1 = -c0
    samples = []
    cluster_ids = []
    d_token = 8
    t0 = rng.normal(0.0, 1.0, size=d_token)
    t1 = rng.normal(0.0, 1.0, size=d_token)
    for i in range(2 * n_per_cluster):
        cluster = i % 2
        center = c1 if cluster else c0
        vec = separation * center + rng.normal(0.0, 0.3, size=d)
        text = f"cluster {cluster} prompt {i // 2}"
        samples.append((FrozenEmbedding(vector=vec, source_text=text),
                        (t1 if cluster else t0).copy()))
        cluster_ids.append(cluster)
    return samples, cluster_ids


# ---------------------------------------------------------------------------
# Toy training
# ---------------------------------------------------------------------------


@dataclass
class ToyTrainConfig:
    lr: float = 0.05
    epochs: int = 60
    hidden: int = 16
    k: int = 2
    beta: float = 0.25
    seed: int = 0
    dead_code_patience: int = 1000


def train_toy_encoder(samples, config: ToyTrainConfig):
    """SGD on downstream MSE plus VQ losses over (embedding, target) pairs.

    Returns (params, codebook, per-epoch mean loss trace).  Raises
    TrainingDiverged with the failing iteration on non-finite loss.
    """
    if config.lr < 0:
        raise ValueError("learning rate must be >= 0")
    targets = {tuple(np.round(t, 9)) for _, t in samples}
    if len(targets) < 2:
        raise ValueError("need at least 2 distinct target tokens")
    d_in = len(samples[0][0].vector)
    d_token = len(samples[0][1])
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = init_mlp(rng, d_in, config.hidden, d_token)
    codebook = Codebook.init(rng, config.k, d_token, beta=config.beta)
    last_used = np.zeros(config.k, dtype=np.int64)
    recent = []
    trace = []
    step = 0
    for _ in range(config.epochs):
        epoch_losses = []
        for emb, target in samples:
            # divergence is detected explicitly; IEEE overflow noise on the
            # way to a non-finite loss is expected and silenced
            with np.errstate(over="ignore", invalid="ignore"):
                z_e, cache = mlp_forward(params, emb.vector)
                idx, e = quantize(codebook, z_e)
                token = e  # forward value; gradient flows straight through
                task_loss = float(np.mean((token - target) ** 2))
                total_vq, _, _ = vq_loss(z_e, e, config.beta)
                loss = task_loss + total_vq
            if not np.isfinite(loss):
                raise TrainingDiverged(step)
            epoch_losses.append(loss)

            g_token = 2.0 * (token - target) / d_token
            g_ze = straight_through(z_e, e, g_token) + 2.0 * config.beta * (z_e - e)
            grads, _ = mlp_backward(params, cache, g_ze)
            for p, g in zip(params.arrays(), grads.arrays()):
                p -= config.lr * g
            codebook.entries[idx] -= config.lr * 2.0 * (e - z_e)

            last_used += 1
            last_used[idx] = 0
            recent.append(z_e.copy())
            if len(recent) > 64:
                recent.pop(0)
            stale = np.nonzero(last_used >= config.dead_code_patience)[0]
            for s in stale:
                pick = int(rng.integers(0, len(recent)))
                codebook.entries[s] = recent[pick].copy()
                last_used[s] = 0
            step += 1
        trace.append(float(np.mean(epoch_losses)))
    return params, codebook, trace


def assignment_purity(codebook: Codebook, params: MlpParams, samples,
                      cluster_ids) -> float:
    """Fraction of samples whose codebook index is its index's majority cluster."""
    by_index = {}
    for (emb, _), cid in zip(samples, cluster_ids):
        z_e, _ = mlp_forward(params, emb.vector)
        idx, _ = quantize(codebook, z_e, count_usage=False)
        by_index.setdefault(idx, []).append(cid)
    pure = 0
    for members in by_index.values():
        counts = np.bincount(members)
        pure += int(counts.max())
    return pure / len(samples)

"""Model parameters and pair scoring.

A user u and item i are looked up in raw embedding tables, passed through
small two-layer perceptrons, and turned into:

* a general preference distribution over item-embedding space — mean from an
  affine head, covariance factor columns from per-column affine heads;
* a specific preference distribution over attribute space — the linear image
  of the general one under the attribute projector ``attr_w``;
* a fused score: log of ``lam * p_general + (1 - lam) * p_specific``,
  evaluated in log-space.

Three covariance variants exist: ``full`` (low-rank factor), ``diag``
(per-coordinate scales from the first covariance head), and ``iden``
(identity covariance, which reduces scoring to negative squared Euclidean
distance up to constants).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gaussian
from .errors import CheckpointError
from .gaussian import LowRankGaussian

VARIANTS = ("full", "diag", "iden")

# Serialization order for checkpoints and gradient dicts.
TENSOR_NAMES = (
    "user_raw", "item_raw",
    "user_w1", "user_b1", "user_w2", "user_b2",
    "item_w1", "item_b1", "item_w2", "item_b2",
    "mean_w", "mean_b", "cov_w", "cov_b", "attr_w",
)

CHECKPOINT_FORMAT = "prefdist-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """All trainable tensors plus the scoring hyperparameters."""

    user_raw: np.ndarray   # (n_users, d_raw)
    item_raw: np.ndarray   # (n_items, d_raw)
    user_w1: np.ndarray    # (d_hidden, d_raw)
    user_b1: np.ndarray    # (d_hidden,)
    user_w2: np.ndarray    # (d, d_hidden)
    user_b2: np.ndarray    # (d,)
    item_w1: np.ndarray
    item_b1: np.ndarray
    item_w2: np.ndarray
    item_b2: np.ndarray
    mean_w: np.ndarray     # (d, d)
    mean_b: np.ndarray     # (d,)
    cov_w: np.ndarray      # (d_prime, d, d)
    cov_b: np.ndarray      # (d_prime, d)
    attr_w: np.ndarray     # (n_attrs, d)
    jitter: float = 1e-3
    lam: float = 0.5
    variant: str = "full"
    activation: str = "relu"   # "linear" exists for tests

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"activation must be relu|linear, got {self.activation!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.jitter <= 0.0:
            raise ValueError(f"jitter must be positive, got {self.jitter}")
        if self.d_prime >= self.d:
            raise ValueError(f"d_prime ({self.d_prime}) must be smaller than d ({self.d})")

    # -- dimensions ---------------------------------------------------------
    @property
    def n_users(self) -> int:
        return self.user_raw.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_raw.shape[0]

    @property
    def n_attrs(self) -> int:
        return self.attr_w.shape[0]

    @property
    def d(self) -> int:
        return self.mean_w.shape[0]

    @property
    def d_prime(self) -> int:
        return self.cov_w.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self) -> "ModelParams":
        return replace(self, **{n: getattr(self, n).copy() for n in TENSOR_NAMES})


@dataclass(frozen=True)
class Score:
    """Log-densities of one (user, item) pair and their fused combination."""

    log_general: float
    log_specific: float
    log_fused: float


def init_params(n_users: int, n_items: int, n_attrs: int, d: int = 64,
                d_prime: int = 8, d_raw: int | None = None, variant: str = "full",
                lam: float = 0.5, jitter: float = 1e-3, seed: int = 0,
                activation: str = "relu") -> ModelParams:
    """Random-normal initialization: std 0.1 for tables and affine heads,
    zero biases, std 1/sqrt(d) for the attribute projector."""
    d_raw = d if d_raw is None else d_raw
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    std = 0.1

    def normal(*shape, scale=std):
        return scale * rng.standard_normal(shape)

    return ModelParams(
        user_raw=normal(n_users, d_raw),
        item_raw=normal(n_items, d_raw),
        user_w1=normal(d, d_raw), user_b1=np.zeros(d),
        user_w2=normal(d, d), user_b2=np.zeros(d),
        item_w1=normal(d, d_raw), item_b1=np.zeros(d),
        item_w2=normal(d, d), item_b2=np.zeros(d),
        mean_w=normal(d, d), mean_b=np.zeros(d),
        cov_w=normal(d_prime, d, d), cov_b=np.zeros((d_prime, d)),
        attr_w=normal(n_attrs, d, scale=1.0 / np.sqrt(d)),
        jitter=jitter, lam=lam, variant=variant, activation=activation,
    )


def zero_grads(p: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(p, name)) for name in TENSOR_NAMES}


# ---------------------------------------------------------------------------
# embeddings and distributions
# ---------------------------------------------------------------------------

def _mlp(x: np.ndarray, w1, b1, w2, b2, activation: str) -> np.ndarray:
    h = x @ w1.T + b1
    if activation == "relu":
        h = np.maximum(h, 0.0)
    return h @ w2.T + b2


def embed_user(p: ModelParams, u) -> np.ndarray:
    """User embedding f_u; accepts one index or an index array."""
    x = p.user_raw[u]
    return _mlp(x, p.user_w1, p.user_b1, p.user_w2, p.user_b2, p.activation)


def embed_item(p: ModelParams, i) -> np.ndarray:
    x = p.item_raw[i]
    return _mlp(x, p.item_w1, p.item_b1, p.item_w2, p.item_b2, p.activation)


def general_distribution(p: ModelParams, u: int) -> LowRankGaussian:
    """General preference distribution of user u over item-embedding space."""
    fu = embed_user(p, u)
    mu = p.mean_w @ fu + p.mean_b
    if p.variant == "iden":
        return gaussian.make(mu, np.zeros((p.d, 0)), 1.0)
    if p.variant == "diag":
        s = p.cov_w[0] @ fu + p.cov_b[0]
        return gaussian.make(mu, np.diag(s), p.jitter)
    factor = np.stack([p.cov_w[k] @ fu + p.cov_b[k] for k in range(p.d_prime)], axis=1)
    return gaussian.make(mu, factor, p.jitter)


def predict_attribute_embedding(p: ModelParams, i) -> np.ndarray:
    """Predicted attribute embedding of item i: attr_w @ f_i."""
    return embed_item(p, i) @ p.attr_w.T


def specific_distribution(p: ModelParams, u: int) -> LowRankGaussian:
    """Specific preference distribution of user u over attribute space.

    For ``full`` this is exactly the push-forward of the general distribution
    through the attribute projector. ``diag`` keeps only the analytic diagonal
    of the projected covariance so both spaces stay diagonal; ``iden`` is the
    identity covariance around the projected mean.
    """
    g = general_distribution(p, u)
    if p.variant == "full":
        return gaussian.push_forward(g, p.attr_w)
    if p.variant == "diag":
        s = np.diag(g.factor)
        var = (p.attr_w ** 2) @ (s ** 2)
        return gaussian.make(p.attr_w @ g.mu, np.diag(np.sqrt(var)), p.jitter)
    return gaussian.make(p.attr_w @ g.mu, np.zeros((p.n_attrs, 0)), 1.0)


def fuse_log_scores(log_general, log_specific, lam: float):
    """log(lam * exp(log_general) + (1 - lam) * exp(log_specific)), stably."""
    if lam >= 1.0:
        return log_general
    if lam <= 0.0:
        return log_specific
    return np.logaddexp(np.log(lam) + np.asarray(log_general),
                        np.log1p(-lam) + np.asarray(log_specific))


def score(p: ModelParams, u: int, i: int) -> Score:
    """Score one (user, item) pair through both distributions."""
    log_g = float(gaussian.log_density(general_distribution(p, u), embed_item(p, i)))
    log_s = float(gaussian.log_density(specific_distribution(p, u),
                                       predict_attribute_embedding(p, i)))
    fused = float(fuse_log_scores(log_g, log_s, p.lam))
    for name, value in (("general", log_g), ("specific", log_s), ("fused", fused)):
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite {name} score for user {u}, item {i}: {value}")
    return Score(log_general=log_g, log_specific=log_s, log_fused=fused)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def vocabulary_hash(vocabulary: list[str]) -> str:
    digest = hashlib.sha256("\n".join(vocabulary).encode("utf-8"))
    return digest.hexdigest()


def save_checkpoint(p: ModelParams, directory, seed: int | None = None,
                    vocab_sha256: str | None = None, extra: dict | None = None) -> None:
    """Write manifest.json + params.bin (little-endian float64, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = p.tensors()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "dims": {
            "n_users": p.n_users, "n_items": p.n_items, "n_attrs": p.n_attrs,
            "d_raw": p.user_raw.shape[1], "d_hidden": p.user_w1.shape[0],
            "d": p.d, "d_prime": p.d_prime,
        },
        "variant": p.variant,
        "lambda": p.lam,
        "jitter": p.jitter,
        "activation": p.activation,
        "seed": seed,
        "vocab_sha256": vocab_sha256,
        "tensors": [[name, list(tensors[name].shape)] for name in TENSOR_NAMES],
    }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / "params.bin", "wb") as fh:
        for name in TENSOR_NAMES:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(directory, expect_vocab_sha256: str | None = None) -> tuple[ModelParams, dict]:
    """Load and validate a checkpoint; returns (params, manifest)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    params_path = directory / "params.bin"
    if not manifest_path.is_file() or not params_path.is_file():
        raise CheckpointError(f"checkpoint at {directory} is missing manifest.json or params.bin")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest.json: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"bad checkpoint format tag: {manifest.get('format')!r}")
    listed = manifest.get("tensors", [])
    if [n for n, _ in listed] != list(TENSOR_NAMES):
        raise CheckpointError("manifest tensor list does not match the expected order")
    if expect_vocab_sha256 is not None and manifest.get("vocab_sha256") not in (None, expect_vocab_sha256):
        raise CheckpointError(
            "vocabulary hash mismatch: checkpoint was trained against a different bundle")

    blob = params_path.read_bytes()
    expected = sum(int(np.prod(shape)) for _, shape in listed) * 8
    if len(blob) != expected:
        raise CheckpointError(
            f"params.bin has {len(blob)} bytes, manifest implies {expected}")
    arrays = {}
    offset = 0
    for name, shape in listed:
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        arrays[name] = arr.astype(np.float64)  # own, writable copy
        offset += size * 8
    p = ModelParams(
        **arrays,
        jitter=float(manifest["jitter"]),
        lam=float(manifest["lambda"]),
        variant=manifest["variant"],
        activation=manifest.get("activation", "relu"),
    )
    return p, manifest

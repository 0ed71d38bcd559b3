"""Multi-head cross-attention from part tokens onto image-patch features,
in its standard form and in the transport-plan-gated form.

Gating scales each part's view of the key/value memory row-wise by
psi(w) = eps_g + (1 - eps_g) * w^lambda, where w is that part's
max-normalized plan weight for the patch. With lambda = 0 the gate is
identically 1 and the gated path reproduces standard attention exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError
from .numerics import Rng, as_matrix, softmax_rows
from .ot import GateWeights


@dataclass
class PartTokenSet:
    """N contiguous blocks of K tokens (width D) plus per-part identity vectors."""

    blocks: list[np.ndarray]
    identities: np.ndarray

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise ValidationError("PartTokenSet: needs at least one part block")
        self.blocks = [as_matrix(b, f"part block {i}") for i, b in enumerate(self.blocks)]
        k, d = self.blocks[0].shape
        for i, b in enumerate(self.blocks):
            if b.shape != (k, d):
                raise DimensionError(f"part block {i} has shape {b.shape}, expected {(k, d)}")
        self.identities = as_matrix(self.identities, "identities")
        if self.identities.shape != (len(self.blocks), d):
            raise DimensionError(
                f"identities shape {self.identities.shape} != ({len(self.blocks)}, {d})"
            )

    @property
    def num_parts(self) -> int:
        return len(self.blocks)

    @property
    def tokens_per_part(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def width(self) -> int:
        return self.blocks[0].shape[1]

    def block_rows(self, i: int) -> slice:
        k = self.tokens_per_part
        return slice(i * k, (i + 1) * k)

    @classmethod
    def seeded(cls, rng: Rng, num_parts: int, tokens_per_part: int, width: int, scale: float = 1.0):
        blocks = [scale * rng.normals(tokens_per_part, width) for _ in range(num_parts)]
        identities = scale * rng.normals(num_parts, width)
        return cls(blocks, identities)

    @classmethod
    def from_flat(cls, flat: np.ndarray, num_parts: int, identities: np.ndarray):
        flat = as_matrix(flat, "token matrix")
        if flat.shape[0] % num_parts != 0:
            raise DimensionError(
                f"token rows {flat.shape[0]} not divisible by num_parts {num_parts}"
            )
        k = flat.shape[0] // num_parts
        return cls([flat[i * k : (i + 1) * k].copy() for i in range(num_parts)], identities)


@dataclass
class ProjectionSet:
    """Q/K/V/output projection weights and the head split."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int

    def __post_init__(self):
        self.w_q = as_matrix(self.w_q, "w_q")
        self.w_k = as_matrix(self.w_k, "w_k")
        self.w_v = as_matrix(self.w_v, "w_v")
        self.w_o = as_matrix(self.w_o, "w_o")
        d = self.w_q.shape[1]
        if self.w_k.shape[1] != d or self.w_v.shape[1] != d:
            raise DimensionError("w_q, w_k, w_v must share their output width")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise DimensionError("w_k and w_v must share their input width")
        if self.w_o.shape[0] != d:
            raise DimensionError(f"w_o input width {self.w_o.shape[0]} != projection width {d}")
        if self.heads < 1 or d % self.heads != 0:
            raise ParameterError(f"projection width {d} not divisible by heads {self.heads}")

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_width(self) -> int:
        return self.model_dim // self.heads

    @classmethod
    def seeded(cls, rng: Rng, token_width: int, image_width: int, model_dim: int, heads: int):
        """Standard-normal init scaled by 1/sqrt(fan_in)."""

        def init(rows, cols):
            return rng.normals(rows, cols) / np.sqrt(rows)

        return cls(
            w_q=init(token_width, model_dim),
            w_k=init(image_width, model_dim),
            w_v=init(image_width, model_dim),
            w_o=init(model_dim, token_width),
            heads=heads,
        )


@dataclass
class GateConfig:
    """Guidance strength and floor of the gating function."""

    lambda_t: float = 2.5
    epsilon_g: float = 0.02

    def __post_init__(self):
        if self.lambda_t < 0:
            raise ParameterError(f"lambda_t must be >= 0, got {self.lambda_t}")
        if not (0 <= self.epsilon_g < 1):
            raise ParameterError(f"epsilon_g must be in [0, 1), got {self.epsilon_g}")


def add_part_identity(tokens: PartTokenSet) -> np.ndarray:
    """Broadcast each part's identity vector onto its tokens; concatenate blocks."""
    return np.vstack([b + e[None, :] for b, e in zip(tokens.blocks, tokens.identities)])


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    rows, d = m.shape
    return m.reshape(rows, heads, d // heads)


def standard_cross_attention(
    z: np.ndarray,
    image_feats: np.ndarray,
    proj: ProjectionSet,
    return_maps: bool = False,
):
    """Multi-head cross-attention of token rows z over image features.

    Per head: softmax(Q_h K_h^T / sqrt(d_h)) V_h; head outputs are
    concatenated and sent through the output projection.
    """
    z = as_matrix(z, "tokens")
    feats = as_matrix(image_feats, "image features")
    if z.shape[1] != proj.w_q.shape[0]:
        raise DimensionError(f"token width {z.shape[1]} != w_q rows {proj.w_q.shape[0]}")
    if feats.shape[1] != proj.w_k.shape[0]:
        raise DimensionError(f"feature width {feats.shape[1]} != w_k rows {proj.w_k.shape[0]}")
    q = _split_heads(z @ proj.w_q, proj.heads)
    k = _split_heads(feats @ proj.w_k, proj.heads)
    v = _split_heads(feats @ proj.w_v, proj.heads)
    scale = np.sqrt(proj.head_width)
    heads_out = []
    maps = []
    for h in range(proj.heads):
        m = softmax_rows(q[:, h, :] @ k[:, h, :].T, scale)
        maps.append(m)
        heads_out.append(m @ v[:, h, :])
    out = np.hstack(heads_out) @ proj.w_o
    if return_maps:
        return out, maps
    return out


def gate_function(w, cfg: GateConfig):
    """psi(w) = eps_g + (1 - eps_g) w^lambda on [0, 1]; psi == 1 when lambda = 0."""
    arr = np.asarray(w, dtype=np.float64)
    if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
        raise ValidationError("gate_function: weights must lie in [0, 1]")
    arr = np.clip(arr, 0.0, 1.0)
    out = cfg.epsilon_g + (1.0 - cfg.epsilon_g) * arr**cfg.lambda_t
    if np.isscalar(w) or np.ndim(w) == 0:
        return float(out)
    return out


def gate_kv(k_h: np.ndarray, v_h: np.ndarray, omega_scaled_row, cfg: GateConfig):
    """Scale key and value rows by the gate of the part's patch weights."""
    k_h = as_matrix(k_h, "keys")
    v_h = as_matrix(v_h, "values")
    w = np.asarray(omega_scaled_row, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != k_h.shape[0] or k_h.shape[0] != v_h.shape[0]:
        raise DimensionError("gate weights must match the number of key/value rows")
    gates = gate_function(w, cfg)
    return gates[:, None] * k_h, gates[:, None] * v_h


def ot_gated_cross_attention(
    tokens: PartTokenSet,
    image_feats: np.ndarray,
    proj: ProjectionSet,
    gates: GateWeights,
    cfg: GateConfig,
    return_maps: bool = False,
):
    """Per-part attention over that part's gated key/value memory.

    Each part's query block attends over keys/values scaled by its own gate
    row; per-part outputs are stitched back into the full token sequence.
    With return_maps the per-part, per-head attention maps come back too
    (maps[i] has shape (heads, K, L)).
    """
    feats = as_matrix(image_feats, "image features")
    if gates.omega_scaled.shape[0] != tokens.num_parts:
        raise DimensionError(
            f"gate rows {gates.omega_scaled.shape[0]} != parts {tokens.num_parts}"
        )
    if gates.omega_scaled.shape[1] != feats.shape[0]:
        raise DimensionError(
            f"gate cols {gates.omega_scaled.shape[1]} != patches {feats.shape[0]}"
        )
    z = add_part_identity(tokens)
    q = _split_heads(z @ proj.w_q, proj.heads)
    k = _split_heads(feats @ proj.w_k, proj.heads)
    v = _split_heads(feats @ proj.w_v, proj.heads)
    scale = np.sqrt(proj.head_width)
    out = np.empty((z.shape[0], proj.w_o.shape[1]))
    all_maps = []
    for i in range(tokens.num_parts):
        rows = tokens.block_rows(i)
        part_heads = []
        part_maps = []
        for h in range(proj.heads):
            k_g, v_g = gate_kv(k[:, h, :], v[:, h, :], gates.omega_scaled[i], cfg)
            m = softmax_rows(q[rows, h, :] @ k_g.T, scale)
            part_maps.append(m)
            part_heads.append(m @ v_g)
        out[rows] = np.hstack(part_heads) @ proj.w_o
        all_maps.append(np.stack(part_maps))
    if return_maps:
        return out, all_maps
    return out

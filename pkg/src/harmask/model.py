"""Small decision-transformer policy over a flat float64 parameter vector.

Forward and backward passes are written out by hand in numpy so the
gradient is exact with respect to every coordinate of the flat vector.
Token stream per step is (rtg, state, action); the action is predicted
from the state token through a tanh-squashed linear head.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EmptyBatchError, NumericError
from .params import LayerLayout
from .tokens import Steps, TokenBatch, assemble

LN_EPS = 1e-5
NEG_INF = -np.inf


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 32
    context_K: int = 20
    prompt_Kstar: int = 5
    state_dim: int = 4
    action_dim: int = 2
    max_timestep: int = 64
    dropout: float = 0.1
    action_scale: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if self.context_K < 1 or self.prompt_Kstar < 0:
            raise ConfigError("context_K must be >= 1 and prompt_Kstar >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if min(self.n_layers, self.n_heads, self.state_dim, self.action_dim,
               self.max_timestep) < 1:
            raise ConfigError("model sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=32)
def build_layout(cfg: ModelConfig) -> LayerLayout:
    d = cfg.embed_dim
    entries = [
        ("emb.rtg.w", (1, d), "matrix"), ("emb.rtg.b", (d,), "bias"),
        ("emb.state.w", (cfg.state_dim, d), "matrix"), ("emb.state.b", (d,), "bias"),
        ("emb.action.w", (cfg.action_dim, d), "matrix"), ("emb.action.b", (d,), "bias"),
        ("emb.time", (cfg.max_timestep, d), "embedding"),
        ("ln_emb.g", (d,), "bias"), ("ln_emb.b", (d,), "bias"),
    ]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        entries += [
            (p + "ln1.g", (d,), "bias"), (p + "ln1.b", (d,), "bias"),
            (p + "attn.qkv.w", (d, 3 * d), "matrix"), (p + "attn.qkv.b", (3 * d,), "bias"),
            (p + "attn.proj.w", (d, d), "matrix"), (p + "attn.proj.b", (d,), "bias"),
            (p + "ln2.g", (d,), "bias"), (p + "ln2.b", (d,), "bias"),
            (p + "mlp.fc.w", (d, 4 * d), "matrix"), (p + "mlp.fc.b", (4 * d,), "bias"),
            (p + "mlp.proj.w", (4 * d, d), "matrix"), (p + "mlp.proj.b", (d,), "bias"),
        ]
    entries += [
        ("ln_f.g", (d,), "bias"), ("ln_f.b", (d,), "bias"),
        ("head.w", (d, cfg.action_dim), "matrix"), ("head.b", (cfg.action_dim,), "bias"),
    ]
    return LayerLayout.build(entries)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    """Truncated normal (std 0.02, cut at 2 std) for matrices and embeddings,
    zeros for biases, ones for layer-norm gains."""
    layout = build_layout(cfg)
    theta = np.zeros(layout.total)
    for seg in layout.segments:
        v = theta[seg.offset:seg.stop]
        if seg.kind in ("matrix", "embedding"):
            draw = rng.standard_normal(seg.size)
            bad = np.abs(draw) > 2.0
            while bad.any():
                draw[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(draw) > 2.0
            v[:] = 0.02 * draw
        elif seg.name.endswith(".g"):
            v[:] = 1.0
    return theta


def _check_theta(theta: np.ndarray, layout: LayerLayout):
    if theta.ndim != 1 or theta.shape[0] != layout.total:
        raise DimensionError(f"theta has length {theta.shape}, model expects {layout.total}")


def _check_batch(cfg: ModelConfig, batch: TokenBatch):
    b, n = batch.rtg.shape[:2]
    if batch.states.shape != (b, n, cfg.state_dim) or batch.actions.shape != (b, n, cfg.action_dim):
        raise DimensionError("batch state/action dims do not match the model config")
    if batch.target_actions.shape != (b, batch.k, cfg.action_dim):
        raise DimensionError("target_actions must be [B, K, action_dim]")
    if batch.k < 1:
        raise DimensionError("batch has no history positions")


def _ln_fwd(x, g, b):
    inv_d = 1.0 / x.shape[-1]
    xc = x - np.add.reduce(x, -1, keepdims=True) * inv_d
    rstd = 1.0 / np.sqrt(np.add.reduce(xc * xc, -1, keepdims=True) * inv_d + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    d = dy.shape[-1]
    dy2 = dy.reshape(-1, d)
    dg = np.add.reduce(dy2 * xhat.reshape(-1, d), 0)
    db = np.add.reduce(dy2, 0)
    dxhat = dy * g
    dx = (dxhat - np.add.reduce(dxhat, -1, keepdims=True) * (1.0 / d)
          - xhat * (np.add.reduce(dxhat * xhat, -1, keepdims=True) * (1.0 / d))) * rstd
    return dx, dg, db


def _outer(a, b):
    """Sum over all leading axes of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _dropout(x, p, rng):
    if rng is None or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def _finite(x, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activations in {where}")


class _Pass:
    """One forward evaluation with everything the backward pass needs."""

    def __init__(self, theta: np.ndarray, cfg: ModelConfig, batch: TokenBatch,
                 rng: Optional[np.random.Generator]):
        self.cfg = cfg
        self.layout = build_layout(cfg)
        _check_theta(theta, self.layout)
        _check_batch(cfg, batch)
        self.p = self.layout.views(theta)
        self.batch = batch
        self.rng = rng if cfg.dropout > 0 else None
        self.pred = self._forward()

    def _forward(self):
        cfg, p, batch = self.cfg, self.p, self.batch
        B, N = batch.rtg.shape[:2]
        D, H = cfg.embed_dim, cfg.n_heads
        L = 3 * N
        self.B, self.N, self.L = B, N, L
        ts = np.clip(batch.timesteps, 0, cfg.max_timestep - 1)
        self.ts = ts
        te = p["emb.time"][ts]
        h = np.empty((B, L, D))
        h[:, 0::3] = batch.rtg @ p["emb.rtg.w"] + p["emb.rtg.b"] + te
        h[:, 1::3] = batch.states @ p["emb.state.w"] + p["emb.state.b"] + te
        h[:, 2::3] = batch.actions @ p["emb.action.w"] + p["emb.action.b"] + te
        x, self.ln_emb = _ln_fwd(h, p["ln_emb.g"], p["ln_emb.b"])
        x, self.drop_emb = _dropout(x, cfg.dropout, self.rng)
        _finite(x, "embedding")

        tok_valid = np.repeat(batch.valid > 0, 3, axis=1)
        causal = np.tril(np.ones((L, L), dtype=bool))
        allowed = causal[None] & (tok_valid[:, None, :] | np.eye(L, dtype=bool)[None])
        self.att_bias = np.where(allowed, 0.0, NEG_INF)[:, None]  # [B,1,L,L]

        self.blocks = []
        for i in range(cfg.n_layers):
            x, cache = self._block_fwd(x, i, H)
            self.blocks.append(cache)
            _finite(x, f"block {i}")

        xf, self.ln_f = _ln_fwd(x, p["ln_f.g"], p["ln_f.b"])
        self.state_idx = 3 * (batch.kstar + np.arange(batch.k)) + 1
        self.xs = xf[:, self.state_idx]
        u = self.xs @ p["head.w"] + p["head.b"]
        self.tanh_u = np.tanh(u)
        pred = cfg.action_scale * self.tanh_u
        _finite(pred, "action head")
        return pred

    def _block_fwd(self, x, i, H):
        p, cfg = self.p, self.cfg
        pre = f"blocks.{i}."
        B, L, D = x.shape
        hd = D // H
        c = {}
        a, c["ln1"] = _ln_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        c["a"] = a
        qkv = a @ p[pre + "attn.qkv.w"] + p[pre + "attn.qkv.b"]
        q, k, v = (qkv[..., j * D:(j + 1) * D].reshape(B, L, H, hd).transpose(0, 2, 1, 3)
                   for j in range(3))
        scale = 1.0 / math.sqrt(hd)
        s = (q * scale) @ k.transpose(0, 1, 3, 2) + self.att_bias
        e = np.exp(s - np.maximum.reduce(s, -1, keepdims=True))
        att = e * (1.0 / np.add.reduce(e, -1, keepdims=True))
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        c.update(q=q, k=k, v=v, att=att, y=y, scale=scale)
        o = y @ p[pre + "attn.proj.w"] + p[pre + "attn.proj.b"]
        o, c["drop1"] = _dropout(o, cfg.dropout, self.rng)
        x = x + o
        m, c["ln2"] = _ln_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z = m @ p[pre + "mlp.fc.w"] + p[pre + "mlp.fc.b"]
        f = np.maximum(z, 0.0)
        c.update(m=m, z=z, f=f)
        o2 = f @ p[pre + "mlp.proj.w"] + p[pre + "mlp.proj.b"]
        o2, c["drop2"] = _dropout(o2, cfg.dropout, self.rng)
        return x + o2, c

    def loss(self) -> float:
        diff, w, denom = self._residual()
        return float(np.sum(w[..., None] * diff * diff) / denom)

    def _residual(self):
        batch = self.batch
        w = batch.valid[:, batch.kstar:]
        n_valid = float(w.sum())
        if n_valid == 0:
            raise EmptyBatchError("batch has no valid history positions")
        return self.pred - batch.target_actions, w, n_valid * self.cfg.action_dim

    def backward(self) -> np.ndarray:
        cfg, p = self.cfg, self.p
        grad = np.zeros(self.layout.total)
        gv = self.layout.views(grad)
        B, L, D = self.B, self.L, cfg.embed_dim

        diff, w, denom = self._residual()
        dpred = 2.0 * diff * w[..., None] / denom
        du = dpred * cfg.action_scale * (1.0 - self.tanh_u ** 2)
        gv["head.w"][:] = _outer(self.xs, du)
        gv["head.b"][:] = du.sum((0, 1))
        dxf = np.zeros((B, L, D))
        dxf[:, self.state_idx] = du @ p["head.w"].T
        dx, gv["ln_f.g"][:], gv["ln_f.b"][:] = _ln_bwd(dxf, self.ln_f)

        for i in reversed(range(cfg.n_layers)):
            dx = self._block_bwd(dx, i, gv)

        if self.drop_emb is not None:
            dx = dx * self.drop_emb
        dh, gv["ln_emb.g"][:], gv["ln_emb.b"][:] = _ln_bwd(dx, self.ln_emb)
        batch = self.batch
        dr, ds, da = dh[:, 0::3], dh[:, 1::3], dh[:, 2::3]
        gv["emb.rtg.w"][:] = _outer(batch.rtg, dr)
        gv["emb.rtg.b"][:] = dr.sum((0, 1))
        gv["emb.state.w"][:] = _outer(batch.states, ds)
        gv["emb.state.b"][:] = ds.sum((0, 1))
        gv["emb.action.w"][:] = _outer(batch.actions, da)
        gv["emb.action.b"][:] = da.sum((0, 1))
        np.add.at(gv["emb.time"], self.ts, dr + ds + da)
        return grad

    def _block_bwd(self, dx, i, gv):
        p, cfg = self.p, self.cfg
        pre = f"blocks.{i}."
        c = self.blocks[i]
        B, L, D = dx.shape
        H = cfg.n_heads
        hd = D // H

        # mlp branch
        do2 = dx if c["drop2"] is None else dx * c["drop2"]
        gv[pre + "mlp.proj.w"][:] = _outer(c["f"], do2)
        gv[pre + "mlp.proj.b"][:] = np.add.reduce(do2.reshape(-1, D), 0)
        df = do2 @ p[pre + "mlp.proj.w"].T
        dz = df * (c["z"] > 0)
        gv[pre + "mlp.fc.w"][:] = _outer(c["m"], dz)
        gv[pre + "mlp.fc.b"][:] = np.add.reduce(dz.reshape(-1, 4 * D), 0)
        dm = dz @ p[pre + "mlp.fc.w"].T
        dln2, gv[pre + "ln2.g"][:], gv[pre + "ln2.b"][:] = _ln_bwd(dm, c["ln2"])
        dx = dx + dln2

        # attention branch
        do = dx if c["drop1"] is None else dx * c["drop1"]
        gv[pre + "attn.proj.w"][:] = _outer(c["y"], do)
        gv[pre + "attn.proj.b"][:] = np.add.reduce(do.reshape(-1, D), 0)
        dy = (do @ p[pre + "attn.proj.w"].T).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        att, q, k, v, scale = c["att"], c["q"], c["k"], c["v"], c["scale"]
        datt = dy @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dy
        ds = att * (datt - np.add.reduce(datt * att, -1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(B, L, D) for t in (dq, dk, dv)], axis=-1)
        gv[pre + "attn.qkv.w"][:] = _outer(c["a"], dqkv)
        gv[pre + "attn.qkv.b"][:] = np.add.reduce(dqkv.reshape(-1, 3 * D), 0)
        da = dqkv @ p[pre + "attn.qkv.w"].T
        dln1, gv[pre + "ln1.g"][:], gv[pre + "ln1.b"][:] = _ln_bwd(da, c["ln1"])
        return dx + dln1


def forward(theta: np.ndarray, cfg: ModelConfig, batch: TokenBatch, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Predicted actions at every history state token, shape [B, K, action_dim]."""
    return _Pass(theta, cfg, batch, rng if train_mode else None).pred


def loss(theta: np.ndarray, cfg: ModelConfig, batch: TokenBatch) -> float:
    return _Pass(theta, cfg, batch, None).loss()


def loss_and_grad(theta: np.ndarray, cfg: ModelConfig, batch: TokenBatch,
                  rng: Optional[np.random.Generator] = None) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient. Dropout is active only when ``rng`` is given."""
    run = _Pass(theta, cfg, batch, rng)
    return run.loss(), run.backward()


def predict_next_actions(theta: np.ndarray, cfg: ModelConfig, prompts: Sequence[Steps],
                         histories: Sequence[Steps]) -> np.ndarray:
    """Batched action prediction at the last history state token, [B, action_dim]."""
    if any(len(h) == 0 for h in histories):
        raise ValueError("history must contain at least the current step")
    batch = assemble(prompts, histories, cfg.context_K, cfg.prompt_Kstar,
                     cfg.state_dim, cfg.action_dim)
    return forward(theta, cfg, batch)[:, -1]


def predict_next_action(theta: np.ndarray, cfg: ModelConfig, prompt: Steps,
                        history: Steps) -> np.ndarray:
    return predict_next_actions(theta, cfg, [prompt], [history])[0]

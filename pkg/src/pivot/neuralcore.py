"""Trainable model: transformer encoder layer(s), pooling, MLP heads, joint
loss, hand-derived gradients, and Adam updates. Everything is plain numpy
(float64) so the analytic gradients can be checked against central finite
differences.

Layer arrangement is pre-norm: x + MHA(LN(x)), then x + FF(LN(x)). Padded key
positions are masked out of attention, padded positions contribute nothing to
losses or pooling. Pooling is either a masked mean over positions or a second
encoder layer whose first position output is the video embedding.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5
MASK_BIAS = -1e30

CKPT_MAGIC = b"PIVT"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    ff_dim: int = 256
    pool: str = "mean"  # mean | tfenc
    num_steps: int = 1
    level_sizes: tuple[int, ...] = ()
    max_seq_len: int = 128
    dropout: float = 0.0

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pool not in ("mean", "tfenc"):
            raise ModelError(f"unknown pooling mode {self.pool!r}")
        if any(s <= 0 for s in self.level_sizes) or self.num_steps <= 0:
            raise ModelError("head sizes must be positive")
        if self.max_seq_len < 2:
            raise ModelError("max_seq_len must be >= 2")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim, "heads": self.heads, "ff_dim": self.ff_dim,
            "pool": self.pool, "num_steps": self.num_steps,
            "level_sizes": list(self.level_sizes),
            "max_seq_len": self.max_seq_len, "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            dim=int(d["dim"]), heads=int(d["heads"]), ff_dim=int(d["ff_dim"]),
            pool=d["pool"], num_steps=int(d["num_steps"]),
            level_sizes=tuple(int(s) for s in d["level_sizes"]),
            max_seq_len=int(d["max_seq_len"]), dropout=float(d["dropout"]),
        )


@dataclass
class Batch:
    x: np.ndarray              # (B, N, d) padded clip embeddings
    valid: np.ndarray          # (B, N) bool
    step_targets: np.ndarray | None = None  # (B, N, |S|) multi-hot
    path_targets: np.ndarray | None = None  # (B, L) per-level class index
    gold_top1: np.ndarray | None = None     # (B, N) top-1 step id, -1 where invalid

    def validate(self, config: ModelConfig) -> None:
        B, N, d = self.x.shape
        if d != config.dim:
            raise ModelError(f"batch dim {d} != model dim {config.dim}")
        if N > config.max_seq_len:
            raise ModelError(
                f"sequence length {N} exceeds max_seq_len {config.max_seq_len}; "
                f"truncate upstream"
            )
        if not self.valid.any(axis=1).all():
            raise ModelError("every batch element needs at least one valid clip")


# ---------------------------------------------------------------------------
# parameter initialization

def _layer_param_shapes(config: ModelConfig, prefix: str) -> dict[str, tuple]:
    d, f = config.dim, config.ff_dim
    return {
        f"{prefix}Wq": (d, d), f"{prefix}bq": (d,),
        f"{prefix}Wk": (d, d), f"{prefix}bk": (d,),
        f"{prefix}Wv": (d, d), f"{prefix}bv": (d,),
        f"{prefix}Wo": (d, d), f"{prefix}bo": (d,),
        f"{prefix}ln1_g": (d,), f"{prefix}ln1_b": (d,),
        f"{prefix}ln2_g": (d,), f"{prefix}ln2_b": (d,),
        f"{prefix}W1": (d, f), f"{prefix}b1": (f,),
        f"{prefix}W2": (f, d), f"{prefix}b2": (d,),
    }


def _head_param_shapes(config: ModelConfig, prefix: str, out_dim: int) -> dict[str, tuple]:
    d = config.dim
    return {
        f"{prefix}W1": (d, d), f"{prefix}b1": (d,),
        f"{prefix}W2": (d, out_dim), f"{prefix}b2": (out_dim,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = dict(_layer_param_shapes(config, "enc1."))
    if config.pool == "tfenc":
        shapes.update(_layer_param_shapes(config, "enc2."))
    shapes.update(_head_param_shapes(config, "step.", config.num_steps))
    for l, size in enumerate(config.level_sizes, start=1):
        shapes.update(_head_param_shapes(config, f"path{l}.", size))
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    config.validate()
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            params[name] = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return params


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table (n, d)."""
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d - d // 2])
    return pe


# ---------------------------------------------------------------------------
# primitive forward/backward pairs

def _layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _dropout_forward(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(float) / (1.0 - rate)
    return x * keep, keep


def _dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


def _split_heads(x, h):
    B, N, d = x.shape
    return x.reshape(B, N, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dh)


def encoder_layer_forward(params, prefix, config, x, valid, drop_rng=None):
    """Pre-norm encoder layer on (B, N, d) with key padding mask."""
    p = lambda n: params[prefix + n]
    h = config.heads
    dh = config.dim // h
    xn, ln1c = _layer_norm_forward(x, p("ln1_g"), p("ln1_b"))
    q = _split_heads(xn @ p("Wq") + p("bq"), h)
    k = _split_heads(xn @ p("Wk") + p("bk"), h)
    v = _split_heads(xn @ p("Wv") + p("bv"), h)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    bias = np.where(valid[:, None, None, :], 0.0, MASK_BIAS)
    scores = scores + bias
    scores = scores - scores.max(axis=-1, keepdims=True)
    ex = np.exp(scores)
    attn = ex / ex.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(attn @ v)
    proj = ctx @ p("Wo") + p("bo")
    proj_d, drop1 = _dropout_forward(proj, config.dropout, drop_rng)
    x1 = x + proj_d
    x1n, ln2c = _layer_norm_forward(x1, p("ln2_g"), p("ln2_b"))
    pre = x1n @ p("W1") + p("b1")
    act = np.maximum(pre, 0.0)
    ff = act @ p("W2") + p("b2")
    ff_d, drop2 = _dropout_forward(ff, config.dropout, drop_rng)
    out = x1 + ff_d
    cache = {
        "x": x, "xn": xn, "ln1c": ln1c, "q": q, "k": k, "v": v, "attn": attn,
        "ctx": ctx, "drop1": drop1, "x1": x1, "x1n": x1n, "ln2c": ln2c,
        "pre": pre, "act": act, "drop2": drop2,
    }
    return out, cache


def encoder_layer_backward(params, prefix, config, dout, cache, grads):
    p = lambda n: params[prefix + n]
    g = lambda n: grads.setdefault(prefix + n, np.zeros_like(params[prefix + n]))
    h = config.heads
    dh = config.dim // h
    c = cache
    red = (0, 1)  # sum over batch and positions for bias grads

    # feed-forward branch
    dff = _dropout_backward(dout, c["drop2"])
    grads[prefix + "W2"] = g("W2") + np.tensordot(c["act"], dff, axes=([0, 1], [0, 1]))
    grads[prefix + "b2"] = g("b2") + dff.sum(axis=red)
    dact = dff @ p("W2").T
    dpre = dact * (c["pre"] > 0.0)
    grads[prefix + "W1"] = g("W1") + np.tensordot(c["x1n"], dpre, axes=([0, 1], [0, 1]))
    grads[prefix + "b1"] = g("b1") + dpre.sum(axis=red)
    dx1n = dpre @ p("W1").T
    dx1_ln, dg2, db2 = _layer_norm_backward(dx1n, c["ln2c"])
    grads[prefix + "ln2_g"] = g("ln2_g") + dg2
    grads[prefix + "ln2_b"] = g("ln2_b") + db2
    dx1 = dout + dx1_ln

    # attention branch
    dproj = _dropout_backward(dx1, c["drop1"])
    grads[prefix + "Wo"] = g("Wo") + np.tensordot(c["ctx"], dproj, axes=([0, 1], [0, 1]))
    grads[prefix + "bo"] = g("bo") + dproj.sum(axis=red)
    dctx = _split_heads(dproj @ p("Wo").T, h)
    dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
    dv = c["attn"].transpose(0, 1, 3, 2) @ dctx
    dscores = c["attn"] * (dattn - (dattn * c["attn"]).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dq = dscores @ c["k"]
    dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dxn = dq @ p("Wq").T + dk @ p("Wk").T + dv @ p("Wv").T
    grads[prefix + "Wq"] = g("Wq") + np.tensordot(c["xn"], dq, axes=([0, 1], [0, 1]))
    grads[prefix + "bq"] = g("bq") + dq.sum(axis=red)
    grads[prefix + "Wk"] = g("Wk") + np.tensordot(c["xn"], dk, axes=([0, 1], [0, 1]))
    grads[prefix + "bk"] = g("bk") + dk.sum(axis=red)
    grads[prefix + "Wv"] = g("Wv") + np.tensordot(c["xn"], dv, axes=([0, 1], [0, 1]))
    grads[prefix + "bv"] = g("bv") + dv.sum(axis=red)
    dx_ln, dg1, db1 = _layer_norm_backward(dxn, c["ln1c"])
    grads[prefix + "ln1_g"] = g("ln1_g") + dg1
    grads[prefix + "ln1_b"] = g("ln1_b") + db1
    return dx1 + dx_ln


def head_forward(params, prefix, x):
    """Two affine maps with ReLU between; x is (..., d)."""
    p = lambda n: params[prefix + n]
    pre = x @ p("W1") + p("b1")
    act = np.maximum(pre, 0.0)
    logits = act @ p("W2") + p("b2")
    return logits, {"x": x, "pre": pre, "act": act}


def head_backward(params, prefix, dlogits, cache, grads):
    p = lambda n: params[prefix + n]
    c = cache
    flat_axes = tuple(range(dlogits.ndim - 1))
    grads[prefix + "W2"] = grads.get(prefix + "W2", 0) + np.tensordot(
        c["act"], dlogits, axes=(flat_axes, flat_axes)
    )
    grads[prefix + "b2"] = grads.get(prefix + "b2", 0) + dlogits.sum(axis=flat_axes)
    dact = dlogits @ p("W2").T
    dpre = dact * (c["pre"] > 0.0)
    grads[prefix + "W1"] = grads.get(prefix + "W1", 0) + np.tensordot(
        c["x"], dpre, axes=(flat_axes, flat_axes)
    )
    grads[prefix + "b1"] = grads.get(prefix + "b1", 0) + dpre.sum(axis=flat_axes)
    return dpre @ p("W1").T


# ---------------------------------------------------------------------------
# encoder + pooling

def encoder_forward(params, config, x, valid, drop_rng=None):
    """Layer-1 outputs and pooled video embedding.

    Returns (h1 (B,N,d), v (B,d), cache).
    """
    config.validate()
    B, N, d = x.shape
    if N > config.max_seq_len:
        raise ModelError(
            f"sequence length {N} exceeds max_seq_len {config.max_seq_len}; "
            f"truncate upstream"
        )
    pe = positional_encoding(N, d)
    xin = x + pe[None, :, :]
    h1, c1 = encoder_layer_forward(params, "enc1.", config, xin, valid, drop_rng)
    cache = {"c1": c1, "valid": valid}
    if config.pool == "mean":
        counts = valid.sum(axis=1, keepdims=True).astype(float)
        v = (h1 * valid[:, :, None]).sum(axis=1) / counts
        cache["counts"] = counts
    else:
        h2, c2 = encoder_layer_forward(params, "enc2.", config, h1, valid, drop_rng)
        v = h2[:, 0, :]
        cache["c2"] = c2
    return h1, v, cache


def encoder_backward(params, config, dh1, dv, cache, grads):
    """Backprop encoder given gradients w.r.t. h1 and v; returns dX."""
    valid = cache["valid"]
    dh1 = np.zeros_like(cache["c1"]["x"]) if dh1 is None else dh1.copy()
    if dv is not None:
        if config.pool == "mean":
            dh1 += (dv[:, None, :] / cache["counts"][:, :, None]) * valid[:, :, None]
        else:
            dh2 = np.zeros_like(dh1)
            dh2[:, 0, :] = dv
            dh1 += encoder_layer_backward(params, "enc2.", config, dh2, cache["c2"], grads)
    return encoder_layer_backward(params, "enc1.", config, dh1, cache["c1"], grads)


# ---------------------------------------------------------------------------
# losses

def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward_losses(params, config, batch: Batch, drop_rng=None):
    """Joint loss: per-clip multi-label BCE plus per-level path CE.

    Per-video losses are summed (clips within a video, levels within a path);
    the reported values are the batch mean of those sums.
    """
    batch.validate(config)
    B = batch.x.shape[0]
    h1, v, enc_cache = encoder_forward(params, config, batch.x, batch.valid, drop_rng)
    cache = {"enc": enc_cache, "h1": h1, "v": v, "B": B}

    loss_step = 0.0
    step_logits = None
    if batch.step_targets is not None:
        step_logits, cache["step_head"] = head_forward(params, "step.", h1)
        y = batch.step_targets
        if y.shape[-1] != config.num_steps:
            raise ModelError("step target width does not match the step head")
        bce = _softplus(step_logits) - step_logits * y
        loss_step = float((bce * batch.valid[:, :, None]).sum() / B)
        cache["step_y"] = y
        cache["step_logits"] = step_logits

    loss_path = 0.0
    path_logits = []
    if batch.path_targets is not None:
        if batch.path_targets.shape[1] != len(config.level_sizes):
            raise ModelError("path target levels do not match configured heads")
        cache["path_heads"] = []
        for l, size in enumerate(config.level_sizes, start=1):
            logits, hc = head_forward(params, f"path{l}.", v)
            t = batch.path_targets[:, l - 1]
            if (t < 0).any() or (t >= size).any():
                raise ModelError(f"path target out of range for level {l} head ({size})")
            zmax = logits.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
            loss_path += float((lse - logits[np.arange(B), t]).sum() / B)
            path_logits.append(logits)
            cache["path_heads"].append((hc, logits, t))

    loss_joint = loss_step + loss_path
    logits = {"step": step_logits, "path": path_logits}
    return loss_step, loss_path, loss_joint, logits, cache


def backward(params, config, batch: Batch, cache):
    """Analytic gradients of the joint loss w.r.t. every parameter.

    Returns (grads, dX) where dX is the gradient w.r.t. the input clips.
    """
    B = cache["B"]
    grads: dict[str, np.ndarray] = {}
    dh1 = None
    dv = None

    if "step_head" in cache:
        dlogits = (_sigmoid(cache["step_logits"]) - cache["step_y"])
        dlogits *= batch.valid[:, :, None] / B
        dh1 = head_backward(params, "step.", dlogits, cache["step_head"], grads)

    if "path_heads" in cache:
        dv = np.zeros_like(cache["v"])
        for l, (hc, logits, t) in enumerate(cache["path_heads"], start=1):
            zmax = logits.max(axis=1, keepdims=True)
            ez = np.exp(logits - zmax)
            soft = ez / ez.sum(axis=1, keepdims=True)
            soft[np.arange(B), t] -= 1.0
            dv += head_backward(params, f"path{l}.", soft / B, hc, grads)

    dx = encoder_backward(params, config, dh1, dv, cache["enc"], grads)
    for name in params:
        grads.setdefault(name, np.zeros_like(params[name]))
    return grads, dx


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state: AdamState, lr, weight_decay=0.0,
              betas=(0.9, 0.999), eps=1e-8, decoupled=False):
    """In-place Adam update with bias correction.

    Weight decay is added to gradients by default (coupled L2); the decoupled
    variant subtracts it from parameters directly.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise ModelError(f"non-finite gradient in parameter block {name!r}")
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
        if weight_decay and decoupled:
            p -= lr * weight_decay * p
    return params, state


# ---------------------------------------------------------------------------
# gradient checking

def _flatten(params, names):
    return np.concatenate([params[n].ravel() for n in names])


def _unflatten(vec, params, names):
    out = {}
    ofs = 0
    for n in names:
        size = params[n].size
        out[n] = vec[ofs: ofs + size].reshape(params[n].shape)
        ofs += size
    return out


def make_tiny_batch(config: ModelConfig, rng: np.random.Generator, B=2, N=3) -> Batch:
    x = rng.standard_normal((B, N, config.dim))
    valid = np.ones((B, N), dtype=bool)
    valid[-1, -1] = False  # exercise padding
    y = (rng.random((B, N, config.num_steps)) < 0.3).astype(float)
    y[..., 0] = 1.0  # at least one positive label
    paths = np.stack(
        [rng.integers(0, s, size=B) for s in config.level_sizes], axis=1
    ) if config.level_sizes else None
    return Batch(x=x, valid=valid, step_targets=y, path_targets=paths)


def _kink_margin(cache) -> float:
    """Distance of the closest ReLU pre-activation to its kink."""
    pres = [cache["enc"]["c1"]["pre"]]
    if "c2" in cache["enc"]:
        pres.append(cache["enc"]["c2"]["pre"])
    if "step_head" in cache:
        pres.append(cache["step_head"]["pre"])
    for hc, _, _ in cache.get("path_heads", []):
        pres.append(hc["pre"])
    return min(float(np.abs(p).min()) for p in pres)


def grad_check(config: ModelConfig, seed: int, eps: float = 1e-3,
               batch: Batch | None = None) -> float:
    """Relative error of analytic vs central-finite-difference gradients.

    Central differences are only valid at differentiable points, so draws
    whose ReLU pre-activations sit within the finite-difference step of the
    kink are rejected and re-sampled. The error is reported relative to the
    overall gradient magnitude; per-coordinate ratios would be dominated by
    the O(eps^2) truncation error on near-zero components.
    """
    fixed_batch = batch
    for attempt in range(200):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, attempt])
        params = init_params(config, rng)
        batch = fixed_batch if fixed_batch is not None else make_tiny_batch(config, rng)
        _, _, _, _, cache = forward_losses(params, config, batch)
        if _kink_margin(cache) > 10 * eps:
            break
    else:
        raise ModelError("could not find a kink-free evaluation point")
    names = sorted(params)

    def loss_at(vec):
        p = _unflatten(vec, params, names)
        _, _, lj, _, _ = forward_losses(p, config, batch)
        return lj

    grads, _ = backward(params, config, batch, cache)
    analytic = _flatten(grads, names)

    theta = _flatten(params, names)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy(); up[i] += eps
        dn = theta.copy(); dn[i] -= eps
        numeric[i] = (loss_at(up) - loss_at(dn)) / (2 * eps)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray],
                    adam: AdamState | None = None) -> None:
    cfg_bytes = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    names = sorted(params)
    payload = bytearray()
    payload += struct.pack("<I", len(cfg_bytes))
    payload += cfg_bytes
    payload += struct.pack("<I", len(names))
    for n in names:
        nb = n.encode("utf-8")
        payload += struct.pack("<H", len(nb)) + nb
        payload += params[n].astype("<f4").tobytes(order="C")
    if adam is None:
        payload += struct.pack("<B", 0)
    else:
        payload += struct.pack("<Bq", 1, adam.t)
        for n in names:
            payload += adam.m[n].astype("<f4").tobytes(order="C")
            payload += adam.v[n].astype("<f4").tobytes(order="C")
    checksum = hashlib.blake2b(bytes(payload), digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(payload)
        fh.write(checksum)


def load_checkpoint(path):
    """Returns (config, params, adam_state_or_none)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    payload, checksum = blob[8:-8], blob[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != checksum:
        raise ModelError(f"{path}: checksum mismatch, file is corrupt")
    ofs = 0
    (cfg_len,) = struct.unpack_from("<I", payload, ofs); ofs += 4
    config = ModelConfig.from_dict(json.loads(payload[ofs: ofs + cfg_len])); ofs += cfg_len
    shapes = param_shapes(config)
    (n_params,) = struct.unpack_from("<I", payload, ofs); ofs += 4
    params = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", payload, ofs); ofs += 2
        name = payload[ofs: ofs + nlen].decode("utf-8"); ofs += nlen
        if name not in shapes:
            raise ModelError(f"{path}: unexpected parameter block {name!r}")
        shape = shapes[name]
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=ofs)
        params[name] = arr.reshape(shape).astype(float)
        ofs += count * 4
    missing = set(shapes) - set(params)
    if missing:
        raise ModelError(f"{path}: missing parameter blocks {sorted(missing)}")
    (has_adam,) = struct.unpack_from("<B", payload, ofs); ofs += 1
    adam = None
    if has_adam:
        (t,) = struct.unpack_from("<q", payload, ofs); ofs += 8
        m, v = {}, {}
        for name in sorted(params):
            count = params[name].size
            m[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=ofs
                                    ).reshape(params[name].shape).astype(float)
            ofs += count * 4
            v[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=ofs
                                    ).reshape(params[name].shape).astype(float)
            ofs += count * 4
        adam = AdamState(m=m, v=v, t=t)
    return config, params, adam

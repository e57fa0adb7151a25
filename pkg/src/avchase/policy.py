"""Audio-visual actor-critic: CNN encoders, fusion, GRU state, linear heads.

All forward functions accept a leading batch axis; 1-D feature vectors are
treated as a batch of one and squeezed on the way out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .config import PolicyConfig
from .diffcore import GRU_NAMES, ParamStore, Tensor
from .gridworld import Observation

NUM_ACTIONS = 4


class PolicyDivergence(FloatingPointError):
    """Raised when a forward pass produces non-finite activations."""


def conv_output_shape(in_hw: Tuple[int, int], layers) -> Tuple[int, int, int]:
    h, w = in_hw
    c = 0
    for kh, kw, s, ch in layers:
        if kh > h or kw > w:
            raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        h, w, c = (h - kh) // s + 1, (w - kw) // s + 1, ch
    return c, h, w


def fused_dim(cfg: PolicyConfig) -> int:
    return 2 * cfg.feature_dim if cfg.fusion in ("concat", "fsa") else cfg.feature_dim


def init_params(cfg: PolicyConfig, depth_hw: Tuple[int, int], audio_bins: int,
                seed: int = 0) -> ParamStore:
    """Kaiming-uniform conv/linear weights, orthogonal recurrent matrices, zero biases."""
    rng = np.random.default_rng(seed)
    ps = ParamStore()

    def kaiming(shape, fan_in, gain=1.0):
        bound = gain * math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def orthogonal(n):
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        return q * np.sign(np.diag(r))

    for branch, layers, in_c, in_hw in (("visual", cfg.visual_conv, 1, tuple(depth_hw)),
                                        ("audio", cfg.audio_conv, 2, (1, audio_bins))):
        c = in_c
        for i, (kh, kw, _, out_c) in enumerate(layers):
            ps[f"{branch}.conv{i}.w"] = kaiming((out_c, c, kh, kw), c * kh * kw)
            ps[f"{branch}.conv{i}.b"] = np.zeros(out_c)
            c = out_c
        flat = int(np.prod(conv_output_shape(in_hw, layers)))
        ps[f"{branch}.fc.w"] = kaiming((flat, cfg.feature_dim), flat)
        ps[f"{branch}.fc.b"] = np.zeros(cfg.feature_dim)

    if cfg.fusion == "fsa":
        d = cfg.fsa.d
        ps["fsa.W1"] = kaiming((d, d), d, gain=1.0 / math.sqrt(2.0))
        ps["fsa.W2"] = kaiming((d, d), d, gain=1.0 / math.sqrt(2.0))

    d_in, d_h = fused_dim(cfg), cfg.hidden_size
    for gate in ("z", "r", "h"):
        ps[f"gru.W_{gate}"] = kaiming((d_in, d_h), d_in, gain=1.0 / math.sqrt(2.0))
        ps[f"gru.U_{gate}"] = orthogonal(d_h)
        ps[f"gru.b_{gate}"] = np.zeros(d_h)
    ps["actor.w"] = kaiming((d_h, NUM_ACTIONS), d_h, gain=0.01)
    ps["actor.b"] = np.zeros(NUM_ACTIONS)
    ps["critic.w"] = kaiming((d_h, 1), d_h)
    ps["critic.b"] = np.zeros(1)
    return ps


# ---------------------------------------------------------------- encoders

def _encode(x: Tensor, params, branch: str, layers, capture: Optional[dict]) -> Tensor:
    for i, (_, _, stride, out_c) in enumerate(layers):
        x = dc.conv2d(x, params[f"{branch}.conv{i}.w"], stride)
        x = dc.relu(dc.add(x, dc.reshape(params[f"{branch}.conv{i}.b"], (out_c, 1, 1))))
        if capture is not None:
            capture[f"{branch}.conv{i}"] = x.data
    x = dc.reshape(x, (x.shape[0], -1))
    feat = dc.add(dc.matmul(x, params[f"{branch}.fc.w"]), params[f"{branch}.fc.b"])
    if capture is not None:
        capture[f"{branch}.feature"] = feat.data
    return feat


def encode_visual(image, params, cfg: PolicyConfig, capture: Optional[dict] = None) -> Tensor:
    """Depth (B x H x W, or H x W) to a B x D feature."""
    x = dc.as_tensor(image)
    single = x.data.ndim == 2
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    if x.data.ndim != 3:
        raise ValueError(f"visual input must be [B,] H x W, got {x.shape}")
    fw = params["visual.conv0.w"]
    if fw.shape[1] != 1:
        raise ValueError("visual encoder expects a single depth channel")
    x = dc.reshape(x, (x.shape[0], 1) + x.shape[1:])
    out = _encode(x, params, "visual", cfg.visual_conv, capture)
    return dc.reshape(out, (-1,)) if single else out


def encode_audio(spectrum, params, cfg: PolicyConfig, capture: Optional[dict] = None) -> Tensor:
    """Binaural spectrum (B x 2 x F, or 2 x F) to a B x D feature."""
    x = dc.as_tensor(spectrum)
    single = x.data.ndim == 2
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    if x.data.ndim != 3 or x.shape[1] != 2:
        raise ValueError(f"audio input must be [B,] 2 x F, got {x.shape}")
    x = dc.reshape(x, (x.shape[0], 2, 1, x.shape[2]))
    out = _encode(x, params, "audio", cfg.audio_conv, capture)
    return dc.reshape(out, (-1,)) if single else out


# ---------------------------------------------------------------- fusion

def simple_fuse(v, a, kind: str) -> Tensor:
    v, a = dc.as_tensor(v), dc.as_tensor(a)
    if kind == "concat":
        return dc.concat([v, a], axis=-1)
    if v.shape != a.shape:
        raise ValueError(f"{kind} fusion needs equal feature dims, got {v.shape} and {a.shape}")
    if kind == "emul":
        return dc.mul(v, a)
    if kind == "em":
        return dc.mul(dc.add(v, a), 0.5)
    raise ValueError(f"unknown fusion kind {kind!r}")


def fsa_fuse(e_in, w1, w2, d: int, capture: Optional[dict] = None) -> Tensor:
    """Token self-attention over the concatenated embedding with a residual.

    ``e_in`` (B x 2D or 2D) is cut into t = 2D/d tokens of width d, visual
    tokens first. Scores are sigmoid(X W1^T) sigmoid(X W2^T)^T / sqrt(d).
    """
    e = dc.as_tensor(e_in)
    single = e.data.ndim == 1
    if single:
        e = dc.reshape(e, (1, -1))
    b, width = e.shape
    if width % d:
        raise ValueError(f"token dim {d} does not divide embedding width {width}")
    t = width // d
    x = dc.reshape(e, (b, t, d))
    q = dc.sigmoid(dc.matmul(x, dc.transpose(w1)))
    k = dc.sigmoid(dc.matmul(x, dc.transpose(w2)))
    scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    attn = dc.softmax(scores, axis=-1)
    if capture is not None:
        capture["attention"] = attn.data
    out = dc.reshape(dc.add(dc.matmul(attn, x), x), (b, width))
    return dc.reshape(out, (-1,)) if single else out


def fuse(v: Tensor, a: Tensor, params, cfg: PolicyConfig, capture: Optional[dict] = None) -> Tensor:
    if cfg.fusion == "fsa":
        e_i = dc.concat([v, a], axis=-1)
        if capture is not None:
            capture["e_i"] = e_i.data
        return fsa_fuse(e_i, params["fsa.W1"], params["fsa.W2"], cfg.fsa.d, capture)
    return simple_fuse(v, a, cfg.fusion)


# ---------------------------------------------------------------- recurrence and heads

def recurrent_step(e_fused, h_prev, params) -> Tuple[Tensor, Tensor]:
    """One GRU application; the new hidden state doubles as the state vector."""
    gp = {k: params[f"gru.{k}"] for k in GRU_NAMES}
    h = dc.gru_cell(e_fused, h_prev, gp)
    return h, h


def actor_critic_eval(s, params) -> Tuple[Tensor, Tensor]:
    s = dc.as_tensor(s)
    single = s.data.ndim == 1
    if single:
        s = dc.reshape(s, (1, -1))
    logits = dc.add(dc.matmul(s, params["actor.w"]), params["actor.b"])
    value = dc.reshape(dc.add(dc.matmul(s, params["critic.w"]), params["critic.b"]), (-1,))
    if single:
        return dc.reshape(logits, (-1,)), dc.reshape(value, ())
    return logits, value


@dataclass
class Forward:
    logits: Tensor
    value: Tensor
    hidden: Tensor


def forward(params, cfg: PolicyConfig, depth, audio, h_prev,
            capture: Optional[dict] = None) -> Forward:
    """Batched encode -> fuse -> GRU -> heads."""
    v = encode_visual(depth, params, cfg, capture)
    a = encode_audio(audio, params, cfg, capture)
    e_o = fuse(v, a, params, cfg, capture)
    s, h = recurrent_step(e_o, h_prev, params)
    logits, value = actor_critic_eval(s, params)
    if capture is not None:
        capture["e_o"] = e_o.data
        capture["s_t"] = s.data
        capture["logits"] = logits.data
        capture["value"] = value.data
    return Forward(logits, value, h)


def probs_from_logits(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_probs_from_logits(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; one uniform per row keeps streams aligned."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class Policy:
    """Config plus parameters, with the batched acting entry point."""

    def __init__(self, cfg: PolicyConfig, depth_hw, audio_bins: int,
                 params: Optional[ParamStore] = None, seed: int = 0):
        self.cfg = cfg
        self.depth_hw = tuple(depth_hw)
        self.audio_bins = audio_bins
        self.params = params if params is not None else init_params(cfg, depth_hw, audio_bins, seed)

    @property
    def hidden_size(self) -> int:
        return self.cfg.hidden_size

    def zero_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.cfg.hidden_size))

    def forward(self, depth, audio, h_prev, capture=None) -> Forward:
        return forward(self.params, self.cfg, depth, audio, h_prev, capture)

    def act_batch(self, depth, audio, h_prev, mode: str = "sample",
                  rng: Optional[np.random.Generator] = None):
        out = self.forward(depth, audio, h_prev)
        logits = out.logits.data
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(out.hidden.data))):
            raise PolicyDivergence("non-finite activations in policy forward")
        logp = log_probs_from_logits(logits)
        if mode == "argmax":
            actions = np.argmax(logits, axis=-1)
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            actions = sample_actions(np.exp(logp), rng)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        chosen = logp[np.arange(len(actions)), actions]
        return actions, chosen, out.value.data.copy(), out.hidden.data.copy()


def act(obs: Observation, h_prev: np.ndarray, policy: Policy, mode: str = "sample",
        rng: Optional[np.random.Generator] = None):
    """Single-observation action: returns (action, log_prob, value, h_new)."""
    a, lp, v, h = policy.act_batch(obs.depth[None], obs.audio[None], np.asarray(h_prev)[None],
                                   mode, rng)
    return int(a[0]), float(lp[0]), float(v[0]), h[0]

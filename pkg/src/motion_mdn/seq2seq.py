"""Encoder-decoder assembly for the three model variants.

``fp-mdn``
    encode the past, decode the future through a mixture-density head.
``fp-nomdn``
    same, with a linear head trained on half sum-of-squares.
``nofp-mdn``
    encode the past and reconstruct it (forward time order) through the MDN head.

Parameters live in one flat ``{name: ndarray}`` map so the optimizer and the
checkpoint format can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import lstm, mdn
from .data import WindowPair
from .errors import ConfigError, ContractError, NumericError, ShapeError

VARIANTS = ("fp-mdn", "fp-nomdn", "nofp-mdn")
BRIDGES = ("zero", "repeat")


@dataclass(frozen=True)
class ModelConfig:
    n_x: int = 14
    n_h: int = 64
    n_c: int = 16
    T_p: int = 50
    T_f: int = 50
    variant: str = "fp-mdn"
    seed: int = 0
    decoder_bridge: str = "zero"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.decoder_bridge not in BRIDGES:
            raise ConfigError(f"unknown decoder_bridge {self.decoder_bridge!r}")
        if min(self.n_x, self.n_h, self.T_p, self.T_f) < 1:
            raise ConfigError("n_x, n_h, T_p, T_f must be >= 1")
        if self.uses_mdn and self.n_c < 1:
            raise ConfigError("n_c must be >= 1 for MDN variants")

    @property
    def uses_mdn(self) -> bool:
        return self.variant != "fp-nomdn"

    @property
    def predicts_future(self) -> bool:
        return self.variant != "nofp-mdn"

    @property
    def horizon(self) -> int:
        return self.T_f if self.predicts_future else self.T_p

    @property
    def decoder_input_dim(self) -> int:
        return self.n_h if self.decoder_bridge == "repeat" else self.n_x

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Encoding:
    e: np.ndarray
    span: tuple = ("s0", "t0", 0, 0)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def encoder(self) -> lstm.LstmParams:
        return self._lstm("encoder")

    @property
    def decoder(self) -> lstm.LstmParams:
        return self._lstm("decoder")

    def _lstm(self, prefix):
        p = self.params
        return lstm.LstmParams(p[f"{prefix}.Wh"], p[f"{prefix}.Wx"], p[f"{prefix}.b"])

    @property
    def head(self):
        p = self.params
        if self.config.uses_mdn:
            return mdn.MdnParams(p["head.W_pi"], p["head.b_pi"], p["head.W_mu"],
                                 p["head.b_mu"], p["head.W_v"], p["head.b_v"])
        return mdn.MseParams(p["head.W"], p["head.b"])

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def same_as(self, other: "Model") -> bool:
        return (self.config == other.config and self.params.keys() == other.params.keys()
                and all(np.array_equal(v, other.params[k]) for k, v in self.params.items()))


def _flatten(prefix, obj) -> dict:
    return {f"{prefix}.{k}": np.asarray(v, dtype=np.float64) for k, v in vars(obj).items()}


def model_init(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    params.update(_flatten("encoder", lstm.lstm_init(cfg.n_h, cfg.n_x, rng)))
    params.update(_flatten("decoder", lstm.lstm_init(cfg.n_h, cfg.decoder_input_dim, rng)))
    if cfg.uses_mdn:
        head = mdn.MdnParams.zeros(cfg.n_c, cfg.n_h, cfg.n_x)
        head.b_mu = rng.uniform(-0.1, 0.1, (cfg.n_c, cfg.n_x))
    else:
        head = mdn.MseParams.zeros(cfg.n_h, cfg.n_x)
    params.update(_flatten("head", head))
    return Model(cfg, params)


def expected_param_count(cfg: ModelConfig) -> int:
    n = lstm.n_params(cfg.n_h, cfg.n_x) + lstm.n_params(cfg.n_h, cfg.decoder_input_dim)
    if cfg.uses_mdn:
        return n + cfg.n_c * (cfg.n_h + 1) + 2 * cfg.n_c * cfg.n_x * (cfg.n_h + 1)
    return n + cfg.n_x * (cfg.n_h + 1)


# ------------------------------------------------------------------ forward

def _time_major(windows, T, n_x, what):
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != (T, n_x):
        raise ShapeError(f"{what} windows have shape {arr.shape[1:]}, expected {(T, n_x)}")
    return np.ascontiguousarray(arr.transpose(1, 0, 2))


def encode_batch(m: Model, pasts) -> np.ndarray:
    """Encodings ``(B, n_h)`` for pasts ``(B, T_p, n_x)``."""
    cfg = m.config
    xs = _time_major(pasts, cfg.T_p, cfg.n_x, "past")
    hs, _, _, _ = lstm.forward_batch(m.encoder, xs)
    return hs[-1].copy()


def encode(m: Model, X_p, span=("s0", "t0", 0)) -> Encoding:
    X_p = np.asarray(X_p, dtype=np.float64)
    if X_p.ndim != 2 or X_p.shape[0] != m.config.T_p:
        raise ShapeError(f"encode expects {m.config.T_p} frames, got shape {X_p.shape}")
    return Encoding(encode_batch(m, X_p[None])[0], tuple(span) + (m.config.T_p,))


def _decoder_inputs(cfg: ModelConfig, e):
    if cfg.decoder_bridge == "repeat":
        return np.ascontiguousarray(np.broadcast_to(e, (cfg.horizon,) + e.shape))
    return np.zeros((cfg.horizon, e.shape[0], cfg.n_x))


def decode_hidden(m: Model, E):
    """Decoder hidden states ``(horizon, B, n_h)`` started from ``h0 = e, c0 = 0``."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    if E.shape[1] != m.config.n_h:
        raise ShapeError(f"encoding has dimension {E.shape[1]}, model uses n_h={m.config.n_h}")
    hs, _, _, _ = lstm.forward_batch(m.decoder, _decoder_inputs(m.config, E), h0=E)
    return hs[1:]


def decode(m: Model, e):
    """Per-step head outputs for one encoding.

    MDN variants return a list of :class:`~motion_mdn.mdn.MixtureParams`, one
    per decoded step; the MSE variant returns point predictions ``(T_f, n_x)``.
    """
    e = e.e if isinstance(e, Encoding) else np.asarray(e, dtype=np.float64)
    hs = decode_hidden(m, e[None])[:, 0]
    if m.config.uses_mdn:
        return [mdn.mdn_forward(m.head, h) for h in hs]
    return mdn.mse_forward(m.head, hs)


# ------------------------------------------------------------ loss / grads

def _stack_batch(batch):
    if isinstance(batch, WindowPair):
        batch = [batch]
    if isinstance(batch, tuple) and isinstance(batch[0], np.ndarray):
        past, future, *rest = batch
        return np.asarray(past), np.asarray(future), rest[0] if rest else None
    batch = list(batch)
    if not batch:
        raise ContractError("empty batch")
    past = np.stack([w.past for w in batch])
    future = np.stack([w.future for w in batch])
    return past, future, [w.source for w in batch]


def window_losses(m: Model, batch) -> np.ndarray:
    """Per-window loss (summed over decoded steps) without gradients."""
    cfg = m.config
    past, future, _ = _stack_batch(batch)
    P = _time_major(past, cfg.T_p, cfg.n_x, "past")
    X = P if not cfg.predicts_future else _time_major(future, cfg.T_f, cfg.n_x, "future")
    hs, _, _, _ = lstm.forward_batch(m.encoder, P)
    Hd = decode_hidden(m, hs[-1])
    rows = Hd.reshape(-1, cfg.n_h)
    targets = X.reshape(-1, cfg.n_x)
    if cfg.uses_mdn:
        per_row = mdn.mixture_nll(mdn.mdn_forward(m.head, rows), targets)
    else:
        per_row = mdn.mse_rows(m.head, rows, targets)
    return per_row.reshape(cfg.horizon, -1).sum(axis=0)


def _where(sources, k):
    return sources[k] if sources else f"batch index {k}"


def _check_finite(P, X, sources):
    ok = np.isfinite(P).all(axis=(0, 2)) & np.isfinite(X).all(axis=(0, 2))
    if not ok.all():
        raise NumericError(f"non-finite input in window {_where(sources, int(np.argmin(ok)))}")


def loss_and_grads(m: Model, batch):
    """Mean per-window loss over the batch and its gradient for every parameter.

    ``batch`` is a sequence of :class:`WindowPair` or a ``(past, future)`` array
    pair of shapes ``(B, T_p, n_x)`` and ``(B, T_f, n_x)``, optionally followed by
    a list of window sources used in error messages.
    """
    cfg = m.config
    past, future, sources = _stack_batch(batch)
    P = _time_major(past, cfg.T_p, cfg.n_x, "past")
    X = _time_major(future, cfg.T_f, cfg.n_x, "future") if cfg.predicts_future else P
    B = P.shape[1]
    _check_finite(P, X, sources)
    enc, dec, head = m.encoder, m.decoder, m.head

    enc_cache = lstm.forward_batch(enc, P)
    E = enc_cache[0][-1]
    dec_in = _decoder_inputs(cfg, E)
    dec_cache = lstm.forward_batch(dec, dec_in, h0=E)
    rows = dec_cache[0][1:].reshape(-1, cfg.n_h)
    targets = X.reshape(-1, cfg.n_x)
    w = 1.0 / B

    if cfg.uses_mdn:
        mix, cache = mdn.mdn_forward(head, rows, return_cache=True)
        per_row = mdn.mixture_nll(mix, targets)
    else:
        per_row = mdn.mse_rows(head, rows, targets)
    per_window = per_row.reshape(cfg.horizon, B).sum(axis=0)
    bad = np.flatnonzero(~np.isfinite(per_window))
    if bad.size:
        raise NumericError(f"non-finite loss for window {_where(sources, bad[0])}")
    loss = float(per_window.mean())

    if cfg.uses_mdn:
        g_head, dH = mdn.mdn_backward(head, rows, targets, cache, weight=w)
    else:
        _, g_head, dH = mdn.mse_loss(head, rows, targets, weight=w)
    g_dec, dxs_dec, de, _ = lstm.backward_batch(dec, dec_in, dec_cache,
                                                dhs=dH.reshape(cfg.horizon, B, cfg.n_h))
    if cfg.decoder_bridge == "repeat":
        de = de + dxs_dec.sum(axis=0)
    g_enc, _, _, _ = lstm.backward_batch(enc, P, enc_cache, dh_T=de)

    grads = {}
    grads.update(_flatten("encoder", g_enc))
    grads.update(_flatten("decoder", g_dec))
    grads.update(_flatten("head", g_head))
    return loss, grads


# ----------------------------------------------------------------- sampling

def predict_futures(m: Model, X_p, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` sampled continuations ``(k, horizon, n_x)`` of one past.

    Each step is sampled independently from its mixture. The MSE variant has a
    single deterministic prediction and only accepts ``k == 1``.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    e = encode(m, X_p)
    if not m.config.uses_mdn:
        if k > 1:
            raise ContractError("the sum-of-squares variant yields one point prediction; k must be 1")
        return decode(m, e)[None]
    hs = decode_hidden(m, e.e[None])[:, 0]
    mix = mdn.mdn_forward(m.head, hs)
    T = hs.shape[0]
    tiled = mdn.MixtureParams(np.tile(mix.pi, (k, 1)), np.tile(mix.mu, (k, 1, 1)),
                              np.tile(mix.v, (k, 1, 1)))
    return mdn.mdn_sample(tiled, rng).reshape(k, T, -1)

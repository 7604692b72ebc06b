"""Sequence encoders: bag-of-words average, GRU/LSTM final state, and CNN with max-pooling.

All encoders take an embedded batch ``[B, T, d]`` plus a boolean mask
``[B, T]`` whose true entries form a prefix of each row (right padding),
and return a ``[B, d_enc]`` node.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Node

CELLS = ("gru", "lstm")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class RnnParams:
    """Stacked gate weights of one recurrent cell.

    GRU: ``w`` [d_in, 3S], ``u`` [S, 2S], ``uh`` [S, S], ``b`` [3S].
    LSTM: ``w`` [d_in, 4S], ``u`` [S, 4S], ``b`` [4S]; ``uh`` is None.
    """

    cell: str
    w: Node
    u: Node
    b: Node
    uh: Node | None = None

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_s(self) -> int:
        return self.u.shape[0]

    @property
    def gates(self) -> int:
        return 3 if self.cell == "gru" else 4

    def nodes(self) -> dict[str, Node]:
        out = {"w": self.w, "u": self.u, "b": self.b}
        if self.uh is not None:
            out["uh"] = self.uh
        return out


def init_rnn(cell: str, d_in: int, d_s: int, rng: np.random.Generator) -> RnnParams:
    if cell not in CELLS:
        raise ConfigurationError(f"unknown cell {cell!r}; expected one of {CELLS}")
    G = 3 if cell == "gru" else 4
    w = np.concatenate([glorot(rng, d_in, d_s) for _ in range(G)], axis=1)
    if cell == "gru":
        u = np.concatenate([glorot(rng, d_s, d_s) for _ in range(2)], axis=1)
        uh = T.parameter(glorot(rng, d_s, d_s))
    else:
        u = np.concatenate([glorot(rng, d_s, d_s) for _ in range(4)], axis=1)
        uh = None
    return RnnParams(cell, T.parameter(w), T.parameter(u), T.parameter(np.zeros(G * d_s)), uh)


@dataclass
class CnnParams:
    """One filter bank per window size: ``filters[h]`` is ``[h*d_x, F]``."""

    windows: tuple[int, ...]
    filters: dict[int, Node]
    biases: dict[int, Node] = field(default_factory=dict)

    @property
    def num_filters(self) -> int:
        return next(iter(self.filters.values())).shape[1]

    @property
    def out_dim(self) -> int:
        return self.num_filters * len(self.windows)

    def nodes(self) -> dict[str, Node]:
        out = {}
        for h in self.windows:
            out[f"w{h}"] = self.filters[h]
            out[f"b{h}"] = self.biases[h]
        return out


def init_cnn(windows, num_filters: int, d_x: int, rng: np.random.Generator) -> CnnParams:
    windows = tuple(sorted(set(int(h) for h in windows)))
    if not windows or windows[0] < 1 or num_filters < 1:
        raise ConfigurationError(f"bad CNN configuration windows={windows} filters={num_filters}")
    filters = {h: T.parameter(glorot(rng, h * d_x, num_filters)) for h in windows}
    biases = {h: T.parameter(np.zeros(num_filters)) for h in windows}
    return CnnParams(windows, filters, biases)


def _check_mask(embedded: Node, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if embedded.ndim != 3 or m.shape != embedded.shape[:2]:
        raise DimensionError(f"mask {m.shape} does not match embedded batch {embedded.shape}")
    lengths = m.sum(axis=1)
    if (lengths == 0).any():
        raise InputError("sequence with no real tokens (all padding)")
    return m


def encode_cbow(embedded: Node, mask) -> Node:
    """Average of the unmasked word vectors."""
    _check_mask(embedded, mask)
    return T.masked_mean(embedded, mask)


def step_gru(x: Node, s_prev: Node, params: RnnParams) -> Node:
    if params.cell != "gru":
        raise ConfigurationError("step_gru needs GRU parameters")
    if x.shape[-1] != params.d_in or s_prev.shape[-1] != params.d_s:
        raise DimensionError(
            f"step_gru: input {x.shape} / state {s_prev.shape} vs cell d_in={params.d_in} d_s={params.d_s}"
        )
    return T.gru_cell(x, s_prev, params.w, params.u, params.uh, params.b)


def step_lstm(x: Node, s_prev: Node, c_prev: Node, params: RnnParams) -> tuple[Node, Node]:
    if params.cell != "lstm":
        raise ConfigurationError("step_lstm needs LSTM parameters")
    if x.shape[-1] != params.d_in or s_prev.shape[-1] != params.d_s or c_prev.shape != s_prev.shape:
        raise DimensionError(
            f"step_lstm: input {x.shape} / state {s_prev.shape} / cell {c_prev.shape} "
            f"vs d_in={params.d_in} d_s={params.d_s}"
        )
    return T.lstm_cell(x, s_prev, c_prev, params.w, params.u, params.b)


def encode_rnn(
    embedded: Node,
    mask,
    params: RnnParams,
    init_state: Node | None = None,
    aux_input: Node | None = None,
) -> Node:
    """Final hidden state after running the cell over the real tokens.

    ``init_state`` ([B, S]) replaces the zero initial hidden state (the LSTM
    memory cell still starts at zero). ``aux_input`` ([B, d_aux]) is
    concatenated to every step's input.
    """
    m = _check_mask(embedded, mask)
    B, steps, d_x = embedded.shape
    d_aux = 0 if aux_input is None else aux_input.shape[-1]
    if d_x + d_aux != params.d_in:
        raise DimensionError(f"encode_rnn: input dim {d_x}+{d_aux} != cell input dim {params.d_in}")
    if init_state is None:
        s = T.constant(np.zeros((B, params.d_s)))
    elif init_state.shape != (B, params.d_s):
        raise DimensionError(f"encode_rnn: init_state {init_state.shape} != {(B, params.d_s)}")
    else:
        s = init_state
    c = T.constant(np.zeros((B, params.d_s)))
    last = int(m.sum(axis=1).max())
    for t in range(last):
        x = T.select(embedded, t, axis=1)
        if aux_input is not None:
            x = T.concat(x, aux_input, axis=1)
        if params.cell == "gru":
            s_new = step_gru(x, s, params)
        else:
            s_new, c_new = step_lstm(x, s, c, params)
        live = m[:, t]
        if live.all():
            s = s_new
            if params.cell == "lstm":
                c = c_new
        else:
            s = T.where_rows(live, s_new, s)
            if params.cell == "lstm":
                c = T.where_rows(live, c_new, c)
    return s


def encode_cnn(embedded: Node, mask, params: CnnParams) -> Node:
    """Relu convolutions over word windows, max-pooled per filter, concatenated over window sizes.

    A row shorter than a window is zero-padded to that window's width, so
    each row contributes ``max(L - h + 1, 1)`` windows.
    """
    m = _check_mask(embedded, mask)
    lengths = m.sum(axis=1).astype(np.int64)
    x = T.mul(embedded, T.constant(m[:, :, None].astype(np.float64)))
    x = T.pad_time(x, max(params.windows))
    pooled = []
    for h in params.windows:
        windows = T.unfold(x, h)
        feats = T.apply_activation(
            "relu", T.add(T.matmul(windows, params.filters[h]), params.biases[h])
        )
        pooled.append(T.max_over_time(feats, np.maximum(lengths - h + 1, 1)))
    return T.concat_many(pooled, axis=1)

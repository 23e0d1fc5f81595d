"""Recurrent trajectory model with exact backpropagation through time.

Cell conventions (single layer, no peepholes)::

    GRU   z = sig(W_z x + U_z h + b_z)
          r = sig(W_r x + U_r h + b_r)
          n = tanh(W_n x + U_n (r*h) + b_n)
          h' = (1 - z) * h + z * n

    LSTM  i, f, o = sig(W_* x + U_* h + b_*),  g = tanh(W_g x + U_g h + b_g)
          c' = f * c + i * g,  h' = o * tanh(c')

With the update gate z closed (z = 0) the GRU state is frozen.

Decoders map each hidden state to seven class probabilities (softmax) or
to six threshold probabilities ``q_k = sig(a.h + b - c_k)`` with strictly
increasing cutpoints ``c_1 = c1, c_k = c1 + sum_{j<k} softplus(delta_j)``.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._numeric import sigmoid, softplus
from .embedder import dropout_mask, embed_sequence, embed_sequence_backward
from .errors import ParseError
from .metrics import expected_index, threshold_to_class_probs

N_CLASSES = 7
N_THRESHOLDS = 6
MODEL_FORMAT = "tokentraj-model-v1"
PROB_FLOOR = 1e-12

CELL_PARAMS = {
    "gru": [f"{m}_{g}" for g in "zrn" for m in ("W", "U", "b")],
    "lstm": [f"{m}_{g}" for g in "ifgo" for m in ("W", "U", "b")],
}
DECODER_PARAMS = {
    "multinomial": ["V_out", "c_out"],
    "ordinal": ["a", "b", "c1", "delta"],
}


def param_names(cell: str, decoder: str) -> list[str]:
    return ["E", "r_raw"] + CELL_PARAMS[cell] + DECODER_PARAMS[decoder]


@dataclass
class TrajectoryModel:
    cell: str
    decoder: str
    d: int
    h: int
    vocab_size: int
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cell not in CELL_PARAMS:
            raise ValueError(f"cell must be one of {list(CELL_PARAMS)}")
        if self.decoder not in DECODER_PARAMS:
            raise ValueError(f"decoder must be one of {list(DECODER_PARAMS)}")
        missing = set(param_names(self.cell, self.decoder)) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters {sorted(missing)}")

    @property
    def names(self) -> list[str]:
        return param_names(self.cell, self.decoder)

    def copy(self) -> "TrajectoryModel":
        return TrajectoryModel(self.cell, self.decoder, self.d, self.h, self.vocab_size,
                               {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def cutpoints(self) -> np.ndarray:
        return ordinal_cutpoints(self.params)

    # serialization
    def to_dict(self) -> dict:
        arrays = []
        for name in self.names:
            a = np.ascontiguousarray(self.params[name], dtype="<f8")
            arrays.append({
                "name": name,
                "shape": list(a.shape),
                "data": base64.b64encode(a.tobytes(order="C")).decode("ascii"),
            })
        return {
            "format": MODEL_FORMAT,
            "cell": self.cell,
            "decoder": self.decoder,
            "d": self.d,
            "h": self.h,
            "vocab_size": self.vocab_size,
            "meta": self.meta,
            "order": self.names,
            "params": arrays,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryModel":
        if d.get("format") != MODEL_FORMAT:
            raise ParseError(f"not a {MODEL_FORMAT} file (format={d.get('format')!r})")
        params = {}
        for entry in d["params"]:
            raw = base64.b64decode(entry["data"])
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        return cls(d["cell"], d["decoder"], int(d["d"]), int(d["h"]), int(d["vocab_size"]), params,
                   dict(d.get("meta", {})))

    @classmethod
    def load(cls, path) -> "TrajectoryModel":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
        return cls.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def init_model(vocab_size: int, d: int = 128, h: int = 128, cell: str = "gru",
               decoder: str = "multinomial", seed=0, meta: dict | None = None) -> TrajectoryModel:
    """Uniform initialisation: token vectors in ``±1/sqrt(d)``, the rest in ``±1/sqrt(h)``."""
    from .embedder import init_embedding

    if cell not in CELL_PARAMS:
        raise ValueError(f"cell must be one of {list(CELL_PARAMS)}")
    if decoder not in DECODER_PARAMS:
        raise ValueError(f"decoder must be one of {list(DECODER_PARAMS)}")
    rng = np.random.default_rng(seed)
    emb = init_embedding(vocab_size, d, rng)
    params = {"E": emb.E, "r_raw": emb.r_raw}
    bound = 1.0 / np.sqrt(h)
    for name in CELL_PARAMS[cell]:
        kind = name[0]
        shape = {"W": (h, d), "U": (h, h), "b": (h,)}[kind]
        params[name] = rng.uniform(-bound, bound, size=shape)
    if decoder == "multinomial":
        params["V_out"] = rng.uniform(-bound, bound, size=(N_CLASSES, h))
        params["c_out"] = np.zeros(N_CLASSES)
    else:
        params["a"] = rng.uniform(-bound, bound, size=h)
        params["b"] = np.zeros(1)
        params["c1"] = np.array([-2.5])
        params["delta"] = np.full(N_THRESHOLDS - 1, np.log(np.e - 1.0))
    return TrajectoryModel(cell, decoder, d, h, vocab_size, params, dict(meta or {}))


# ---------------------------------------------------------------------------
# single steps


def gru_step(x, h, params) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    Wz = params["W_z"]
    if Wz.shape[1] != x.shape[-1] or params["U_z"].shape[1] != h.shape[-1]:
        raise ValueError(f"shape mismatch: x {x.shape}, h {h.shape}, W_z {Wz.shape}")
    z = sigmoid(Wz @ x + params["U_z"] @ h + params["b_z"])
    r = sigmoid(params["W_r"] @ x + params["U_r"] @ h + params["b_r"])
    n = np.tanh(params["W_n"] @ x + params["U_n"] @ (r * h) + params["b_n"])
    return h + z * (n - h)


def lstm_step(x, h, c, params):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if params["W_i"].shape[1] != x.shape[-1] or params["U_i"].shape[1] != h.shape[-1]:
        raise ValueError(f"shape mismatch: x {x.shape}, h {h.shape}, W_i {params['W_i'].shape}")

    def pre(g):
        return params[f"W_{g}"] @ x + params[f"U_{g}"] @ h + params[f"b_{g}"]

    i, f, o = sigmoid(pre("i")), sigmoid(pre("f")), sigmoid(pre("o"))
    g = np.tanh(pre("g"))
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


# ---------------------------------------------------------------------------
# decoders


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_multinomial(h, params) -> np.ndarray:
    return softmax(np.asarray(h) @ params["V_out"].T + params["c_out"])


def ordinal_cutpoints(params) -> np.ndarray:
    return params["c1"][0] + np.concatenate(([0.0], np.cumsum(softplus(params["delta"]))))


def decode_ordinal(h, params) -> np.ndarray:
    """Threshold probabilities ``q_1..q_6`` (last axis) for hidden state(s) ``h``."""
    s = np.asarray(h) @ params["a"] + params["b"][0]
    return sigmoid(np.asarray(s)[..., None] - ordinal_cutpoints(params))


def cumulative_from_class(p) -> np.ndarray:
    """``q_k = sum_{i>=k} p_i`` for ``k = 1..6``."""
    p = np.asarray(p, dtype=np.float64)
    return np.cumsum(p[..., ::-1], axis=-1)[..., ::-1][..., 1:]


# ---------------------------------------------------------------------------
# sequence forward / backward


@dataclass
class TrajectoryOutput:
    q: np.ndarray
    p: np.ndarray
    expected: np.ndarray

    def __len__(self):
        return len(self.expected)


def _cell_forward(model, X):
    p = model.params
    T = X.shape[0]
    H = np.zeros((T + 1, model.h))
    if model.cell == "gru":
        Az = X @ p["W_z"].T + p["b_z"]
        Ar = X @ p["W_r"].T + p["b_r"]
        An = X @ p["W_n"].T + p["b_n"]
        Uz, Ur, Un = p["U_z"], p["U_r"], p["U_n"]
        Z = np.empty((T, model.h))
        R = np.empty((T, model.h))
        N = np.empty((T, model.h))
        h = H[0]
        for t in range(T):
            z = sigmoid(Az[t] + Uz @ h)
            r = sigmoid(Ar[t] + Ur @ h)
            n = np.tanh(An[t] + Un @ (r * h))
            h = h + z * (n - h)
            Z[t], R[t], N[t], H[t + 1] = z, r, n, h
        return H, (Z, R, N)
    A = {g: X @ p[f"W_{g}"].T + p[f"b_{g}"] for g in "ifgo"}
    U = {g: p[f"U_{g}"] for g in "ifgo"}
    G = {g: np.empty((T, model.h)) for g in "ifgo"}
    C = np.zeros((T + 1, model.h))
    TC = np.empty((T, model.h))
    h, c = H[0], C[0]
    for t in range(T):
        i = sigmoid(A["i"][t] + U["i"] @ h)
        f = sigmoid(A["f"][t] + U["f"] @ h)
        g = np.tanh(A["g"][t] + U["g"] @ h)
        o = sigmoid(A["o"][t] + U["o"] @ h)
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        G["i"][t], G["f"][t], G["g"][t], G["o"][t] = i, f, g, o
        C[t + 1], TC[t], H[t + 1] = c, tc, h
    return H, (G, C, TC)


def _cell_backward(model, X, H, cache, dH, grads):
    """Accumulate cell parameter gradients; return ``dL/dX``."""
    p = model.params
    T = X.shape[0]
    Hprev = H[:-1]
    if model.cell == "gru":
        Z, R, N = cache
        Uz, Ur, Un = p["U_z"], p["U_r"], p["U_n"]
        DAz = np.empty((T, model.h))
        DAr = np.empty((T, model.h))
        DAn = np.empty((T, model.h))
        RH = R * Hprev
        dh_next = np.zeros(model.h)
        for t in range(T - 1, -1, -1):
            dh = dH[t] + dh_next
            z, r, n, hp = Z[t], R[t], N[t], Hprev[t]
            dan = dh * z * (1.0 - n * n)
            daz = dh * (n - hp) * z * (1.0 - z)
            drh = Un.T @ dan
            dar = drh * hp * r * (1.0 - r)
            dh_next = dh * (1.0 - z) + drh * r + Uz.T @ daz + Ur.T @ dar
            DAz[t], DAr[t], DAn[t] = daz, dar, dan
        grads["W_z"] = DAz.T @ X
        grads["W_r"] = DAr.T @ X
        grads["W_n"] = DAn.T @ X
        grads["U_z"] = DAz.T @ Hprev
        grads["U_r"] = DAr.T @ Hprev
        grads["U_n"] = DAn.T @ RH
        grads["b_z"] = DAz.sum(0)
        grads["b_r"] = DAr.sum(0)
        grads["b_n"] = DAn.sum(0)
        return DAz @ p["W_z"] + DAr @ p["W_r"] + DAn @ p["W_n"]
    G, C, TC = cache
    U = {g: p[f"U_{g}"] for g in "ifgo"}
    DA = {g: np.empty((T, model.h)) for g in "ifgo"}
    dh_next = np.zeros(model.h)
    dc_next = np.zeros(model.h)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        i, f, g, o, tc = G["i"][t], G["f"][t], G["g"][t], G["o"][t], TC[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        DA["o"][t] = dh * tc * o * (1.0 - o)
        DA["i"][t] = dc * g * i * (1.0 - i)
        DA["f"][t] = dc * C[t] * f * (1.0 - f)
        DA["g"][t] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = sum(U[k].T @ DA[k][t] for k in "ifgo")
    dX = np.zeros_like(X)
    for k in "ifgo":
        grads[f"W_{k}"] = DA[k].T @ X
        grads[f"U_{k}"] = DA[k].T @ Hprev
        grads[f"b_{k}"] = DA[k].sum(0)
        dX += DA[k] @ p[f"W_{k}"]
    return dX


def _decode(model, Hs):
    """Return ``(q, p)`` for hidden states ``Hs`` (T x h)."""
    if model.decoder == "multinomial":
        p = decode_multinomial(Hs, model.params)
        return cumulative_from_class(p), p
    q = decode_ordinal(Hs, model.params)
    return q, threshold_to_class_probs(q)


def _check_stay(token_sets):
    if len(token_sets) == 0:
        raise ValueError("empty stay")


def forward_trajectory(token_sets: Sequence[np.ndarray], model: TrajectoryModel) -> TrajectoryOutput:
    """Per-window threshold and class probabilities for one stay (inference)."""
    _check_stay(token_sets)
    X, _ = embed_sequence(token_sets, model.params["E"], model.params["r_raw"])
    H, _ = _cell_forward(model, X)
    q, p = _decode(model, H[1:])
    return TrajectoryOutput(q=q, p=p, expected=expected_index(p))


def loss_and_grads(model: TrajectoryModel, token_sets: Sequence[np.ndarray], label: int,
                   dropout_p: float = 0.0, rng: np.random.Generator | None = None):
    """Window-mean class NLL of one stay and its exact gradients.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``model.params``.
    """
    _check_stay(token_sets)
    prm = model.params
    X0, ecache = embed_sequence(token_sets, prm["E"], prm["r_raw"])
    if dropout_p > 0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        mask = dropout_mask(X0.shape, dropout_p, rng)
        X = X0 * mask
    else:
        mask = None
        X = X0
    H, cache = _cell_forward(model, X)
    Hs = H[1:]
    T = Hs.shape[0]
    grads: dict[str, np.ndarray] = {}

    if model.decoder == "multinomial":
        P = decode_multinomial(Hs, prm)
        py = P[:, label]
        floored = py < PROB_FLOOR
        loss = float(-np.log(np.maximum(py, PROB_FLOOR)).mean())
        dlogits = P.copy()
        dlogits[:, label] -= 1.0
        dlogits[floored] = 0.0
        dlogits /= T
        grads["V_out"] = dlogits.T @ Hs
        grads["c_out"] = dlogits.sum(0)
        dH = dlogits @ prm["V_out"]
    else:
        cut = ordinal_cutpoints(prm)
        s = Hs @ prm["a"] + prm["b"][0]
        Q = sigmoid(s[:, None] - cut)
        qpad = np.hstack([np.ones((T, 1)), Q, np.zeros((T, 1))])
        py = qpad[:, label] - qpad[:, label + 1]
        floored = py < PROB_FLOOR
        loss = float(-np.log(np.maximum(py, PROB_FLOOR)).mean())
        dpy = np.where(floored, 0.0, -1.0 / np.maximum(py, PROB_FLOOR) / T)
        dqpad = np.zeros((T, N_THRESHOLDS + 2))
        dqpad[:, label] += dpy
        dqpad[:, label + 1] -= dpy
        dQ = dqpad[:, 1:-1]
        dpre = dQ * Q * (1.0 - Q)
        ds = dpre.sum(1)
        dcut = -dpre.sum(0)
        grads["a"] = Hs.T @ ds
        grads["b"] = np.array([ds.sum()])
        grads["c1"] = np.array([dcut.sum()])
        # c_k depends on delta_j for j < k
        tail = np.cumsum(dcut[::-1])[::-1][1:]
        grads["delta"] = tail * sigmoid(prm["delta"])
        dH = np.outer(ds, prm["a"])

    dX = _cell_backward(model, X, H, cache, dH, grads)
    if mask is not None:
        dX = dX * mask
    grads["E"], grads["r_raw"] = embed_sequence_backward(ecache, dX, prm["E"], prm["r_raw"])
    return loss, grads

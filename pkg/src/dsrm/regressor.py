"""The 3-layer local-count regressor: two stacked LSTM layers and a dense head.

Layer 1 maps a length-3 feature sequence (D per step) through 100 hidden
units, layer 2 through another 100, and the head is an affine readout of
layer 2's hidden state at the readout timestep (last by default, center
optionally). Forward and backward passes are batched over sequences; the
backward pass is exact backpropagation through the 3-step unroll.

Gate weights per layer are stored fused: W (input_size, 4H), U (H, 4H),
b (4H,), with gate blocks ordered (input, forget, output, candidate).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DivergenceError
from .numerics import sigmoid

HIDDEN_SIZE = 100
SEQ_LEN = 3

READOUT_LAST = "last"
READOUT_CENTER = "center"


@dataclass
class LstmLayerParams:
    input_size: int
    hidden_size: int
    w: np.ndarray  # (input_size, 4H)
    u: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)


@dataclass
class RegressorParams:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    head_w: np.ndarray  # (H2, 1)
    head_b: np.ndarray  # (1,)
    readout: str = READOUT_LAST

    @property
    def input_dim(self):
        return self.layer1.input_size

    def tensors(self):
        return {
            "lstm1.w": self.layer1.w, "lstm1.u": self.layer1.u, "lstm1.b": self.layer1.b,
            "lstm2.w": self.layer2.w, "lstm2.u": self.layer2.u, "lstm2.b": self.layer2.b,
            "head.w": self.head_w, "head.b": self.head_b,
        }

    def copy(self):
        l1 = LstmLayerParams(self.layer1.input_size, self.layer1.hidden_size,
                             self.layer1.w.copy(), self.layer1.u.copy(), self.layer1.b.copy())
        l2 = LstmLayerParams(self.layer2.input_size, self.layer2.hidden_size,
                             self.layer2.w.copy(), self.layer2.u.copy(), self.layer2.b.copy())
        return RegressorParams(l1, l2, self.head_w.copy(), self.head_b.copy(), self.readout)


def _orthogonal(rng, size):
    a = rng.standard_normal((size, size))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def _init_layer(rng, input_size, hidden_size):
    limit = np.sqrt(6.0 / (input_size + hidden_size))
    w = rng.uniform(-limit, limit, size=(input_size, 4 * hidden_size))
    u = np.concatenate([_orthogonal(rng, hidden_size) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0  # forget gate opens by default
    return LstmLayerParams(input_size, hidden_size, w, u, b)


def init_regressor(input_dim, hidden=(HIDDEN_SIZE, HIDDEN_SIZE), seed=0,
                   readout=READOUT_LAST):
    if readout not in (READOUT_LAST, READOUT_CENTER):
        raise ContractViolation(f"unknown readout {readout!r}")
    rng = np.random.default_rng(seed)
    layer1 = _init_layer(rng, input_dim, hidden[0])
    layer2 = _init_layer(rng, hidden[0], hidden[1])
    limit = np.sqrt(6.0 / (hidden[1] + 1))
    head_w = rng.uniform(-limit, limit, size=(hidden[1], 1))
    return RegressorParams(layer1, layer2, head_w, np.zeros(1), readout)


def _readout_step(readout):
    return SEQ_LEN - 1 if readout == READOUT_LAST else SEQ_LEN // 2


def _lstm_layer_forward(layer, xs):
    """Run one LSTM layer over xs (T, B, input_size). Returns (hs, cache)."""
    h = layer.hidden_size
    bsz = xs.shape[1]
    h_prev = np.zeros((bsz, h))
    c_prev = np.zeros((bsz, h))
    hs = np.empty((SEQ_LEN, bsz, h))
    steps = []
    for t in range(SEQ_LEN):
        z = xs[t] @ layer.w + h_prev @ layer.u + layer.b
        i = sigmoid(z[:, :h])
        f = sigmoid(z[:, h:2 * h])
        o = sigmoid(z[:, 2 * h:3 * h])
        g = np.tanh(z[:, 3 * h:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        hs[t] = o * tc
        steps.append({"x": xs[t], "h_prev": h_prev, "c_prev": c_prev,
                      "i": i, "f": f, "o": o, "g": g, "tc": tc})
        h_prev = hs[t]
        c_prev = c
    return hs, steps


def _lstm_layer_backward(layer, steps, dhs):
    """Backprop one layer given dhs (T, B, H) from above. Returns (dxs, grads)."""
    h = layer.hidden_size
    bsz = dhs.shape[1]
    dw = np.zeros_like(layer.w)
    du = np.zeros_like(layer.u)
    db = np.zeros_like(layer.b)
    dxs = np.empty((SEQ_LEN, bsz, layer.input_size))
    dh_next = np.zeros((bsz, h))
    dc_next = np.zeros((bsz, h))
    for t in range(SEQ_LEN - 1, -1, -1):
        s = steps[t]
        dh = dhs[t] + dh_next
        do = dh * s["tc"]
        dc = dh * s["o"] * (1.0 - s["tc"] ** 2) + dc_next
        di = dc * s["g"]
        dg = dc * s["i"]
        df = dc * s["c_prev"]
        dc_next = dc * s["f"]
        dz = np.concatenate([
            di * s["i"] * (1.0 - s["i"]),
            df * s["f"] * (1.0 - s["f"]),
            do * s["o"] * (1.0 - s["o"]),
            dg * (1.0 - s["g"] ** 2),
        ], axis=1)
        dw += s["x"].T @ dz
        du += s["h_prev"].T @ dz
        db += dz.sum(axis=0)
        dxs[t] = dz @ layer.w.T
        dh_next = dz @ layer.u.T
    return dxs, {"w": dw, "u": du, "b": db}


def forward_batch(seqs, params, want_cache=False):
    """Predictions for seqs (B, 3, D). Returns (preds (B,), cache | None)."""
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim != 3 or seqs.shape[1] != SEQ_LEN:
        raise ContractViolation(f"expected (B, {SEQ_LEN}, D) sequences, got {seqs.shape}")
    if seqs.shape[2] != params.input_dim:
        raise ContractViolation(
            f"sequence dim {seqs.shape[2]} != layer-1 input size {params.input_dim}")
    xs = seqs.transpose(1, 0, 2)
    hs1, steps1 = _lstm_layer_forward(params.layer1, xs)
    hs2, steps2 = _lstm_layer_forward(params.layer2, hs1)
    t_out = _readout_step(params.readout)
    preds = (hs2[t_out] @ params.head_w + params.head_b)[:, 0]
    if not want_cache:
        return preds, None
    return preds, {"steps1": steps1, "steps2": steps2, "hs2_out": hs2[t_out],
                   "t_out": t_out, "bsz": seqs.shape[0]}


def lstm_forward(seq, params):
    """Single-sequence forward: (hidden trajectory of layer 2, prediction)."""
    steps = np.asarray(seq.steps if hasattr(seq, "steps") else seq, dtype=np.float64)
    xs = steps[None, :, :]
    preds, _ = forward_batch(xs, params)
    hs1, _ = _lstm_layer_forward(params.layer1, steps[:, None, :])
    hs2, _ = _lstm_layer_forward(params.layer2, hs1)
    return hs2[:, 0, :], float(preds[0])


def loss(batch, params):
    """Mean squared difference between predictions and local-count targets."""
    if len(batch) == 0:
        raise ContractViolation("loss over an empty batch")
    seqs = np.stack([np.asarray(s.steps if hasattr(s, "steps") else s) for s, _ in batch])
    targets = np.array([t for _, t in batch], dtype=np.float64)
    preds, _ = forward_batch(seqs, params)
    return float(np.mean((preds - targets) ** 2))


def backward_batch(seqs, targets, params):
    """Loss, parameter gradients and input gradients for one mini-batch.

    Returns (loss_value, grads keyed like params.tensors(), dseqs (B, 3, D)).
    """
    preds, cache = forward_batch(seqs, params, want_cache=True)
    targets = np.asarray(targets, dtype=np.float64)
    bsz = cache["bsz"]
    residual = preds - targets
    loss_value = float(np.mean(residual ** 2))
    if not np.isfinite(loss_value):
        raise DivergenceError("non-finite loss")
    dpred = (2.0 / bsz) * residual

    grads = {
        "head.w": cache["hs2_out"].T @ dpred[:, None],
        "head.b": np.array([dpred.sum()]),
    }
    h2 = params.layer2.hidden_size
    dhs2 = np.zeros((SEQ_LEN, bsz, h2))
    dhs2[cache["t_out"]] = dpred[:, None] * params.head_w[:, 0]
    dhs1, g2 = _lstm_layer_backward(params.layer2, cache["steps2"], dhs2)
    dxs, g1 = _lstm_layer_backward(params.layer1, cache["steps1"], dhs1)
    grads.update({"lstm2.w": g2["w"], "lstm2.u": g2["u"], "lstm2.b": g2["b"],
                  "lstm1.w": g1["w"], "lstm1.u": g1["u"], "lstm1.b": g1["b"]})
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in block {name}")
    return loss_value, grads, dxs.transpose(1, 0, 2)


def backward(batch, params):
    """Spec-shaped wrapper over backward_batch for (sequence, target) pairs."""
    if len(batch) == 0:
        raise ContractViolation("backward over an empty batch")
    seqs = np.stack([np.asarray(s.steps if hasattr(s, "steps") else s) for s, _ in batch])
    targets = np.array([t for _, t in batch], dtype=np.float64)
    _, grads, _ = backward_batch(seqs, targets, params)
    return grads

"""From-scratch learnable components with hand-derived gradients.

Contains a gated recurrent (LSTM) stack with an output projection, the
inverted-dropout operator, a stacked auto-encoder with greedy layer-wise
pretraining, a softmax classification head, and an RMSProp optimizer.
Everything runs in float64; analytic gradients are validated against
central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, NumericalDivergence


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# LSTM stack
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LstmLayer:
    """One gated recurrent layer; gate rows of W/b are ordered [i, f, o, g]."""

    W: np.ndarray  # (4*hidden, input + hidden)
    b: np.ndarray  # (4*hidden,)
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] % 4:
            raise InvalidParameter("LSTM weight matrix must be (4*hidden, input+hidden)")
        if self.b.shape != (self.W.shape[0],):
            raise InvalidParameter("LSTM bias length must match the gate rows")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise InvalidParameter("dropout_rate must lie in [0, 1)")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise InvalidParameter("LSTM weights must be finite")

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden_dim


@dataclass(eq=False)
class LstmStack:
    """Stacked recurrent layers plus the class-score projection."""

    layers: list
    w_hy: np.ndarray  # (classes, top hidden)

    def __post_init__(self):
        if not self.layers:
            raise InvalidParameter("stack needs at least one layer")
        for lo, hi in zip(self.layers, self.layers[1:]):
            if hi.input_dim != lo.hidden_dim:
                raise InvalidParameter("adjacent layer dimensions are incompatible")
        if self.w_hy.shape[1] != self.layers[-1].hidden_dim:
            raise InvalidParameter("output projection width must match top hidden size")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].hidden_dim

    @property
    def output_dim(self) -> int:
        return self.w_hy.shape[0]

    def parameters(self) -> list:
        params = []
        for layer in self.layers:
            params.extend([layer.W, layer.b])
        params.append(self.w_hy)
        return params


def init_lstm_layer(input_dim: int, hidden_dim: int, rng: np.random.Generator,
                    dropout_rate: float = 0.0, forget_bias: float = 1.0) -> LstmLayer:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except the forget gate."""
    fan_in = input_dim + hidden_dim
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(4 * hidden_dim, fan_in))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = forget_bias
    return LstmLayer(W=W, b=b, dropout_rate=dropout_rate)


def init_lstm_stack(input_dim: int, hidden_dim: int = 128, depth: int = 4,
                    classes: int = 2, dropout: float = 0.5,
                    rng: np.random.Generator | None = None) -> LstmStack:
    """Default stack: dropout on every non-first-layer input."""
    rng = rng or np.random.default_rng(0)
    layers = []
    for k in range(depth):
        d_in = input_dim if k == 0 else hidden_dim
        rate = 0.0 if k == 0 else dropout
        layers.append(init_lstm_layer(d_in, hidden_dim, rng, dropout_rate=rate))
    bound = 1.0 / np.sqrt(hidden_dim)
    w_hy = rng.uniform(-bound, bound, size=(classes, hidden_dim))
    return LstmStack(layers=layers, w_hy=w_hy)


def _step_batch(layer: LstmLayer, x: np.ndarray, h_prev: np.ndarray,
                c_prev: np.ndarray, mask: np.ndarray | None):
    """Batched gate evaluation; rows of x are samples. Returns (h, c, cache)."""
    if mask is not None and layer.dropout_rate > 0:
        xd = x * mask / (1.0 - layer.dropout_rate)
    else:
        xd = x
    hd = layer.hidden_dim
    z = np.concatenate([xd, h_prev], axis=1) @ layer.W.T + layer.b
    i = sigmoid(z[:, :hd])
    f = sigmoid(z[:, hd:2 * hd])
    o = sigmoid(z[:, 2 * hd:3 * hd])
    g = np.tanh(z[:, 3 * hd:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (xd, h_prev, c_prev, i, f, o, g, tc)
    return h, c, cache


def _step_backward(layer: LstmLayer, cache, dh: np.ndarray, dc: np.ndarray,
                   mask: np.ndarray | None):
    """VJP of one step. Returns (dW, db, dx, dh_prev, dc_prev)."""
    xd, h_prev, c_prev, i, f, o, g, tc = cache
    hd = layer.hidden_dim
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dc_prev = dc_total * f
    dz = np.concatenate([di * i * (1.0 - i),
                         df * f * (1.0 - f),
                         do * o * (1.0 - o),
                         dg * (1.0 - g * g)], axis=1)
    cat = np.concatenate([xd, h_prev], axis=1)
    dW = dz.T @ cat
    db = dz.sum(axis=0)
    dcat = dz @ layer.W
    dxd = dcat[:, :layer.input_dim]
    dh_prev = dcat[:, layer.input_dim:]
    if mask is not None and layer.dropout_rate > 0:
        dx = dxd * mask / (1.0 - layer.dropout_rate)
    else:
        dx = dxd
    return dW, db, dx, dh_prev, dc_prev


def lstm_step(layer: LstmLayer, x_t: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray, dropout_mask: np.ndarray | None = None):
    """Single-sample gate update. ``dropout_mask=None`` means inference mode,
    where the dropout operator is the identity regardless of the rate."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x_t.shape != (layer.input_dim,):
        raise InvalidParameter(f"expected input of length {layer.input_dim}")
    if h_prev.shape != (layer.hidden_dim,) or c_prev.shape != (layer.hidden_dim,):
        raise InvalidParameter(f"expected state of length {layer.hidden_dim}")
    mask = None if dropout_mask is None else np.asarray(dropout_mask, dtype=np.float64)[None, :]
    h, c, _ = _step_batch(layer, x_t[None, :], h_prev[None, :], c_prev[None, :], mask)
    return h[0], c[0]


def lstm_step_grads(layer: LstmLayer, x_t, h_prev, c_prev, dh, dc,
                    dropout_mask=None):
    """Analytic gradients of one step against upstream (dh, dc)."""
    mask = None if dropout_mask is None else np.asarray(dropout_mask, dtype=np.float64)[None, :]
    _, _, cache = _step_batch(layer, np.asarray(x_t, float)[None, :],
                              np.asarray(h_prev, float)[None, :],
                              np.asarray(c_prev, float)[None, :], mask)
    dW, db, dx, dhp, dcp = _step_backward(layer, cache,
                                          np.asarray(dh, float)[None, :],
                                          np.asarray(dc, float)[None, :], mask)
    return dW, db, dx[0], dhp[0], dcp[0]


def _forward_batch(stack: LstmStack, X: np.ndarray, masks=None):
    """Run the whole stack over (B, T, D) inputs.

    ``masks``: per-layer list, each None or a (T, B, D_layer) binary array.
    Returns (top hidden states (T, B, H), caches[l][t]).
    """
    B, T, _ = X.shape
    caches = []
    inputs = np.moveaxis(X, 0, 1)  # (T, B, D)
    for li, layer in enumerate(stack.layers):
        h = np.zeros((B, layer.hidden_dim))
        c = np.zeros((B, layer.hidden_dim))
        layer_cache = []
        hs = np.empty((T, B, layer.hidden_dim))
        for t in range(T):
            mask = None if masks is None or masks[li] is None else masks[li][t]
            h, c, cache = _step_batch(layer, inputs[t], h, c, mask)
            layer_cache.append(cache)
            hs[t] = h
        caches.append(layer_cache)
        inputs = hs
    return inputs, caches


def _backward_batch(stack: LstmStack, caches, d_top: np.ndarray, masks=None):
    """Backpropagate (T, B, H) upstream gradients on the top hidden states."""
    grads_W = [np.zeros_like(l.W) for l in stack.layers]
    grads_b = [np.zeros_like(l.b) for l in stack.layers]
    T = d_top.shape[0]
    incoming = d_top
    for li in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[li]
        B = incoming.shape[1]
        dh_rec = np.zeros((B, layer.hidden_dim))
        dc_rec = np.zeros((B, layer.hidden_dim))
        dx_all = np.empty((T, B, layer.input_dim))
        for t in range(T - 1, -1, -1):
            mask = None if masks is None or masks[li] is None else masks[li][t]
            dW, db, dx, dh_rec, dc_rec = _step_backward(
                layer, caches[li][t], incoming[t] + dh_rec, dc_rec, mask)
            grads_W[li] += dW
            grads_b[li] += db
            dx_all[t] = dx
        incoming = dx_all
    grads = []
    for gW, gb in zip(grads_W, grads_b):
        grads.extend([gW, gb])
    return grads


@dataclass(frozen=True, eq=False)
class LstmForwardResult:
    p_seq: np.ndarray    # (T, classes) per-step class distributions
    labels: np.ndarray   # (T,) argmax labels
    h_final: np.ndarray  # (hidden,) top-layer state at the last step


def lstm_forward(stack: LstmStack, x_seq) -> LstmForwardResult:
    """Inference pass over one sequence of input vectors."""
    X = np.asarray(x_seq, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidParameter("sequence must be a non-empty (T, D) array")
    if X.shape[1] != stack.input_dim:
        raise InvalidParameter(f"expected input dimension {stack.input_dim}")
    top, _ = _forward_batch(stack, X[None, :, :])
    logits = top[:, 0, :] @ stack.w_hy.T
    p_seq = softmax(logits)
    return LstmForwardResult(p_seq=p_seq, labels=np.argmax(p_seq, axis=1),
                             h_final=top[-1, 0, :].copy())


def lstm_hidden_batch(stack: LstmStack, X: np.ndarray) -> np.ndarray:
    """Final top-layer hidden state for a (N, T, D) batch (inference mode)."""
    top, _ = _forward_batch(stack, np.asarray(X, dtype=np.float64))
    return top[-1].copy()


def _draw_masks(stack: LstmStack, T: int, B: int, rng: np.random.Generator):
    masks = []
    for layer in stack.layers:
        if layer.dropout_rate > 0:
            keep = rng.random((T, B, layer.input_dim)) >= layer.dropout_rate
            masks.append(keep.astype(np.float64))
        else:
            masks.append(None)
    return masks


def lstm_train(stack: LstmStack, sequences, labels, opt: "RmsPropState",
               epochs: int, seed: int, batch_size: int = 32):
    """Backprop-through-time training; cross-entropy on the final step.

    Mutates ``stack`` in place and returns (stack, per-epoch mean losses).
    """
    X = np.asarray(sequences, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 3 or len(X) == 0 or len(X) != len(y):
        raise InvalidParameter("need a non-empty (N, T, D) batch with matching labels")
    rng = np.random.default_rng(seed)
    n = len(X)
    losses = []
    params = stack.parameters()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb, yb = X[idx], y[idx]
            B, T, _ = xb.shape
            masks = _draw_masks(stack, T, B, rng)
            top, caches = _forward_batch(stack, xb, masks)
            logits = top[-1] @ stack.w_hy.T
            p = softmax(logits)
            loss = -np.mean(np.log(p[np.arange(B), yb] + 1e-300))
            total += loss * B
            dlogits = p.copy()
            dlogits[np.arange(B), yb] -= 1.0
            dlogits /= B
            d_why = dlogits.T @ top[-1]
            d_top = np.zeros_like(top)
            d_top[-1] = dlogits @ stack.w_hy
            grads = _backward_batch(stack, caches, d_top, masks)
            grads.append(d_why)
            rmsprop_update(opt, params, grads)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise NumericalDivergence(f"training loss diverged at epoch {epoch}")
        losses.append(mean_loss)
    return stack, np.asarray(losses)


# ---------------------------------------------------------------------------
# RMSProp
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RmsPropState:
    """Mean-square accumulators plus hyper-parameters; allocated lazily."""

    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon_opt: float = 1e-8
    acc: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidParameter("learning rate must be positive")
        if not (0.0 < self.rho < 1.0):
            raise InvalidParameter("rho must lie in (0, 1)")
        if self.epsilon_opt <= 0:
            raise InvalidParameter("epsilon_opt must be positive")

    def spawn(self) -> "RmsPropState":
        """Same hyper-parameters, fresh accumulators."""
        return RmsPropState(self.learning_rate, self.rho, self.epsilon_opt)


def rmsprop_update(state: RmsPropState, params: list, grads: list) -> list:
    """acc <- rho*acc + (1-rho)*g^2; p <- p - lr*g/(sqrt(acc)+eps). In place."""
    if len(params) != len(grads):
        raise InvalidParameter("params and grads must align")
    if state.acc is None:
        state.acc = [np.zeros_like(p) for p in params]
    if len(state.acc) != len(params):
        raise InvalidParameter("optimizer state does not match the parameter list")
    for p, g, a in zip(params, grads, state.acc):
        if p.shape != g.shape or p.shape != a.shape:
            raise InvalidParameter("parameter/gradient shape mismatch")
        a *= state.rho
        a += (1.0 - state.rho) * g * g
        p -= state.learning_rate * g / (np.sqrt(a) + state.epsilon_opt)
    return params


# ---------------------------------------------------------------------------
# stacked auto-encoder + softmax head
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Autoencoder:
    """Stacked auto-encoder: tanh encoders, free (untied) linear decoders."""

    enc_w: list
    enc_b: list
    dec_w: list
    dec_b: list

    def __post_init__(self):
        if not (len(self.enc_w) == len(self.enc_b) == len(self.dec_w) == len(self.dec_b)):
            raise InvalidParameter("encoder/decoder stacks must mirror")
        for We, Wd in zip(self.enc_w, self.dec_w):
            if We.shape != Wd.shape[::-1]:
                raise InvalidParameter("decoder dims must mirror the encoder")

    @property
    def layer_dims(self) -> tuple:
        return (self.enc_w[0].shape[1],) + tuple(W.shape[0] for W in self.enc_w)

    @property
    def depth(self) -> int:
        return len(self.enc_w)

    def parameters(self) -> list:
        params = []
        for We, be, Wd, bd in zip(self.enc_w, self.enc_b, self.dec_w, self.dec_b):
            params.extend([We, be, Wd, bd])
        return params


def init_autoencoder(layer_dims, rng: np.random.Generator | None = None) -> Autoencoder:
    """layer_dims = (input, code1, code2, ...); three codes by default use."""
    rng = rng or np.random.default_rng(0)
    if len(layer_dims) < 2:
        raise InvalidParameter("need at least one encoding layer")
    enc_w, enc_b, dec_w, dec_b = [], [], [], []
    for d_in, d_out in zip(layer_dims, layer_dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        enc_w.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        enc_b.append(np.zeros(d_out))
        bound = 1.0 / np.sqrt(d_out)
        dec_w.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        dec_b.append(np.zeros(d_in))
    return Autoencoder(enc_w, enc_b, dec_w, dec_b)


def encode(ae: Autoencoder, X: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Codes after the first ``upto`` encoder layers (all by default)."""
    H = np.asarray(X, dtype=np.float64)
    depth = ae.depth if upto is None else upto
    for k in range(depth):
        H = np.tanh(H @ ae.enc_w[k].T + ae.enc_b[k])
    return H


@dataclass(eq=False)
class SoftmaxHead:
    W: np.ndarray  # (classes, feature_dim)
    b: np.ndarray  # (classes,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise InvalidParameter("head bias must match the class count")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise InvalidParameter("head weights must be finite")


def init_softmax_head(feature_dim: int, classes: int = 2,
                      rng: np.random.Generator | None = None) -> SoftmaxHead:
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / np.sqrt(feature_dim)
    return SoftmaxHead(W=rng.uniform(-bound, bound, size=(classes, feature_dim)),
                       b=np.zeros(classes))


def sae_pretrain(ae: Autoencoder, X: np.ndarray, opt: RmsPropState, epochs: int,
                 seed: int, batch_size: int = 128):
    """Greedy layer-wise reconstruction training under mean-squared error.

    Layer k reconstructs the codes of layer k-1; earlier layers are frozen
    while deeper ones train. Returns (ae, per-layer loss traces).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != ae.layer_dims[0]:
        raise InvalidParameter(f"features must be (N, {ae.layer_dims[0]})")
    rng = np.random.default_rng(seed)
    traces = []
    for k in range(ae.depth):
        codes = encode(ae, X, upto=k)
        stage_opt = opt.spawn()
        params = [ae.enc_w[k], ae.enc_b[k], ae.dec_w[k], ae.dec_b[k]]
        losses = []
        n = len(codes)
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, batch_size):
                xb = codes[order[lo:lo + batch_size]]
                H = np.tanh(xb @ ae.enc_w[k].T + ae.enc_b[k])
                R = H @ ae.dec_w[k].T + ae.dec_b[k]
                diff = R - xb
                loss = float(np.mean(diff * diff))
                total += loss * len(xb)
                dR = 2.0 * diff / diff.size
                dWd = dR.T @ H
                dbd = dR.sum(axis=0)
                dH = dR @ ae.dec_w[k]
                dZ = dH * (1.0 - H * H)
                dWe = dZ.T @ xb
                dbe = dZ.sum(axis=0)
                rmsprop_update(stage_opt, params, [dWe, dbe, dWd, dbd])
            mean_loss = total / n
            if not np.isfinite(mean_loss):
                raise NumericalDivergence(f"stage {k} diverged at epoch {epoch}")
            losses.append(mean_loss)
        traces.append(np.asarray(losses))
    return ae, traces


def classify(ae: Autoencoder, head: SoftmaxHead, feature: np.ndarray):
    """Encode a feature vector and classify it. Returns (distribution, label)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (ae.layer_dims[0],):
        raise InvalidParameter(f"expected a feature of length {ae.layer_dims[0]}")
    code = encode(ae, feature[None, :])
    p = softmax(code @ head.W.T + head.b)[0]
    return p, int(np.argmax(p))


def classify_batch(ae: Autoencoder, head: SoftmaxHead, X: np.ndarray) -> np.ndarray:
    """Class-1 scores for (N, F) features."""
    code = encode(ae, X)
    return softmax(code @ head.W.T + head.b)[:, 1]


def fine_tune(ae: Autoencoder, head: SoftmaxHead, X: np.ndarray, y, opt: RmsPropState,
              epochs: int, seed: int, batch_size: int = 128):
    """End-to-end cross-entropy descent through encoders and head.

    Mutates both models in place; returns (ae, head, per-epoch losses).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise InvalidParameter("need non-empty aligned features and labels")
    if not np.isin(y, np.arange(head.W.shape[0])).all():
        raise InvalidParameter("labels must index the head classes")
    rng = np.random.default_rng(seed)
    params = []
    for We, be in zip(ae.enc_w, ae.enc_b):
        params.extend([We, be])
    params.extend([head.W, head.b])
    tuner = opt.spawn()
    losses = []
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb, yb = X[idx], y[idx]
            B = len(xb)
            codes = [xb]
            for k in range(ae.depth):
                codes.append(np.tanh(codes[-1] @ ae.enc_w[k].T + ae.enc_b[k]))
            p = softmax(codes[-1] @ head.W.T + head.b)
            loss = -np.mean(np.log(p[np.arange(B), yb] + 1e-300))
            total += loss * B
            dlogits = p.copy()
            dlogits[np.arange(B), yb] -= 1.0
            dlogits /= B
            grads_head = [dlogits.T @ codes[-1], dlogits.sum(axis=0)]
            dcode = dlogits @ head.W
            grads_enc = []
            for k in range(ae.depth - 1, -1, -1):
                dZ = dcode * (1.0 - codes[k + 1] ** 2)
                grads_enc[:0] = [dZ.T @ codes[k], dZ.sum(axis=0)]
                dcode = dZ @ ae.enc_w[k]
            rmsprop_update(tuner, params, grads_enc + grads_head)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise NumericalDivergence(f"fine-tuning diverged at epoch {epoch}")
        losses.append(mean_loss)
    return ae, head, np.asarray(losses)

"""Layer families with forward and backward-through-time passes.

Everything runs in float64 on arrays shaped (N, L, dim): N independent
sequences, L timesteps.  Recurrent layers start every sequence from zero
state.  Each layer's forward returns (output, tape); backward consumes the
tape plus the upstream gradient and returns (input gradient, dict of
parameter gradients keyed like the parameter fields).

Frequency-patch layers (conv, CLSTM) see their input as positions x channels
and apply one shared filter (or one shared LSTM) to every patch of adjacent
positions; pooling takes per-unit maxima over groups of adjacent patches.
"""

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

INIT_RANGE = 0.05
FORGET_BIAS_INIT = 1.0


def sigmoid(x):
    # exp overflow-safe on both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LstmParams:
    """Weights of one LSTM memory block (peepholes stored as vectors)."""

    W_xi: np.ndarray
    W_xf: np.ndarray
    W_xc: np.ndarray
    W_xo: np.ndarray
    W_hi: np.ndarray
    W_hf: np.ndarray
    W_hc: np.ndarray
    W_ho: np.ndarray
    W_ci: np.ndarray
    W_cf: np.ndarray
    W_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    W_proj: Optional[np.ndarray] = None

    @property
    def num_cells(self):
        return self.W_xi.shape[0]

    @property
    def input_dim(self):
        return self.W_xi.shape[1]

    @property
    def recurrent_dim(self):
        # equals the projection dim when a projection is present
        return self.W_hi.shape[1]

    @property
    def output_dim(self):
        return self.W_proj.shape[0] if self.W_proj is not None else self.num_cells

    def field_items(self):
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                out.append((f.name, value))
        return out


def init_lstm_params(rng, input_dim, num_cells, proj_dim=None):
    """Uniform [-INIT_RANGE, INIT_RANGE] weights, forget bias 1, other biases 0."""
    n, d = num_cells, input_dim
    r = proj_dim if proj_dim is not None else n

    def u(*shape):
        return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)

    return LstmParams(
        W_xi=u(n, d), W_xf=u(n, d), W_xc=u(n, d), W_xo=u(n, d),
        W_hi=u(n, r), W_hf=u(n, r), W_hc=u(n, r), W_ho=u(n, r),
        W_ci=u(n), W_cf=u(n), W_co=u(n),
        b_i=np.zeros(n), b_f=np.full(n, FORGET_BIAS_INIT), b_c=np.zeros(n),
        b_o=np.zeros(n),
        W_proj=u(proj_dim, n) if proj_dim is not None else None,
    )


@dataclass
class PatchLayout:
    """How a banded input is cut into overlapping frequency patches.

    `num_positions` positions along frequency, each carrying
    `channels_per_position` values.  Patch j covers positions
    [j*stride, j*stride + patch_size).  `channel_major` is True when the
    flat input stores all positions of channel 0 first (the raw feature
    layout); False when each position's channels are contiguous (the layout
    of patch-layer and pooling outputs).
    """

    num_positions: int
    channels_per_position: int
    patch_size: int
    stride: int
    channel_major: bool = False

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if self.num_positions < self.patch_size:
            raise ValueError(
                "patch size %d exceeds %d input positions"
                % (self.patch_size, self.num_positions)
            )

    @property
    def num_patches(self):
        return (self.num_positions - self.patch_size) // self.stride + 1

    @property
    def patch_dim(self):
        return self.patch_size * self.channels_per_position

    @property
    def input_dim(self):
        return self.num_positions * self.channels_per_position

    def patch_columns(self):
        """(J, patch_dim) column indices into the flat input, one row per patch.

        The order inside each patch follows the input's own flattening, so a
        single full-width patch is exactly the identity.
        """
        p, k = self.num_positions, self.channels_per_position
        idx = np.empty((self.num_patches, self.patch_dim), dtype=np.intp)
        for j in range(self.num_patches):
            pos = np.arange(j * self.stride, j * self.stride + self.patch_size)
            if self.channel_major:
                cols = (np.arange(k)[:, None] * p + pos[None, :]).ravel()
            else:
                cols = (pos[:, None] * k + np.arange(k)[None, :]).ravel()
            idx[j] = cols
        return idx


# ---------------------------------------------------------------------------
# step functions


def rnn_step(W_xh, W_hh, b_h, x_t, h_prev):
    """h_t = tanh(W_xh x_t + W_hh h_{t-1} + b_h); batched over leading dims."""
    return np.tanh(x_t @ W_xh.T + h_prev @ W_hh.T + b_h)

def lstm_step(params, x_t, h_prev, c_prev):
    """One LSTM step with peepholes.

    The input and forget gates peek at c_{t-1}; the output gate peeks at the
    freshly updated c_t.  With a projection the returned output (and the
    value to feed back as h_prev) is r_t = W_proj h_t.

    Returns (out_t, c_t, cache) where cache = (i, f, a, o, tanh_c, h).
    """
    i = sigmoid(x_t @ params.W_xi.T + h_prev @ params.W_hi.T
                + params.W_ci * c_prev + params.b_i)
    f = sigmoid(x_t @ params.W_xf.T + h_prev @ params.W_hf.T
                + params.W_cf * c_prev + params.b_f)
    a = np.tanh(x_t @ params.W_xc.T + h_prev @ params.W_hc.T + params.b_c)
    c = f * c_prev + i * a
    o = sigmoid(x_t @ params.W_xo.T + h_prev @ params.W_ho.T
                + params.W_co * c + params.b_o)
    tanh_c = np.tanh(c)
    h = o * tanh_c
    out = h @ params.W_proj.T if params.W_proj is not None else h
    return out, c, (i, f, a, o, tanh_c, h)


# ---------------------------------------------------------------------------
# layers


class RnnLayer:
    """Vanilla tanh recurrence."""

    kind = "rnn"

    def __init__(self, name, W_xh, W_hh, b_h):
        self.name = name
        self.W_xh = W_xh
        self.W_hh = W_hh
        self.b_h = b_h

    @property
    def output_dim(self):
        return self.W_xh.shape[0]

    def param_items(self):
        return [("W_xh", self.W_xh), ("W_hh", self.W_hh), ("b_h", self.b_h)]

    def forward(self, x):
        n_seq, length, _ = x.shape
        n = self.output_dim
        hs = np.zeros((length, n_seq, n))
        h = np.zeros((n_seq, n))
        for t in range(length):
            h = rnn_step(self.W_xh, self.W_hh, self.b_h, x[:, t], h)
            hs[t] = h
        return hs.transpose(1, 0, 2), (x, hs)

    def backward(self, tape, dout):
        x, hs = tape
        n_seq, length, _ = x.shape
        dW_xh = np.zeros_like(self.W_xh)
        dW_hh = np.zeros_like(self.W_hh)
        db = np.zeros_like(self.b_h)
        dx = np.zeros_like(x)
        dh_next = np.zeros((n_seq, self.output_dim))
        for t in reversed(range(length)):
            dh = dout[:, t] + dh_next
            dpre = dh * (1.0 - hs[t] ** 2)
            h_prev = hs[t - 1] if t > 0 else np.zeros_like(hs[0])
            dW_xh += dpre.T @ x[:, t]
            dW_hh += dpre.T @ h_prev
            db += dpre.sum(axis=0)
            dx[:, t] = dpre @ self.W_xh
            dh_next = dpre @ self.W_hh
        return dx, {"W_xh": dW_xh, "W_hh": dW_hh, "b_h": db}


class LstmLayer:
    """LSTM memory block, optionally with a linear projection (LSTMP)."""

    kind = "lstm"

    def __init__(self, name, params):
        self.name = name
        self.params = params

    @property
    def output_dim(self):
        return self.params.output_dim

    def param_items(self):
        return self.params.field_items()

    def forward(self, x):
        p = self.params
        n_seq, length, _ = x.shape
        n = p.num_cells
        shape = (length, n_seq, n)
        i_s = np.zeros(shape); f_s = np.zeros(shape); a_s = np.zeros(shape)
        o_s = np.zeros(shape); c_s = np.zeros(shape); tc_s = np.zeros(shape)
        h_s = np.zeros(shape)
        r_s = np.zeros((length, n_seq, p.recurrent_dim))
        out = np.zeros((n_seq, length, p.output_dim))
        rec = np.zeros((n_seq, p.recurrent_dim))
        c = np.zeros((n_seq, n))
        for t in range(length):
            y, c, (i, f, a, o, tanh_c, h) = lstm_step(p, x[:, t], rec, c)
            i_s[t], f_s[t], a_s[t], o_s[t] = i, f, a, o
            c_s[t], tc_s[t], h_s[t] = c, tanh_c, h
            rec = y if p.W_proj is not None else h
            r_s[t] = rec
            out[:, t] = y
        return out, (x, i_s, f_s, a_s, o_s, c_s, tc_s, h_s, r_s)

    def backward(self, tape, dout):
        p = self.params
        x, i_s, f_s, a_s, o_s, c_s, tc_s, h_s, r_s = tape
        n_seq, length, _ = x.shape
        n = p.num_cells
        grads = {name: np.zeros_like(arr) for name, arr in p.field_items()}
        dx = np.zeros_like(x)
        drec = np.zeros((n_seq, p.recurrent_dim))  # grad into r_t (or h_t)
        dc_next = np.zeros((n_seq, n))             # dL/dc_t carried from t+1
        for t in reversed(range(length)):
            c_prev = c_s[t - 1] if t > 0 else np.zeros((n_seq, n))
            r_prev = r_s[t - 1] if t > 0 else np.zeros((n_seq, p.recurrent_dim))
            if p.W_proj is not None:
                dr = dout[:, t] + drec
                grads["W_proj"] += dr.T @ h_s[t]
                dh = dr @ p.W_proj
            else:
                dh = dout[:, t] + drec
            do = dh * tc_s[t]
            dpre_o = do * o_s[t] * (1.0 - o_s[t])
            dc = dh * o_s[t] * (1.0 - tc_s[t] ** 2) + dc_next + dpre_o * p.W_co
            di = dc * a_s[t]
            df = dc * c_prev
            da = dc * i_s[t]
            dpre_i = di * i_s[t] * (1.0 - i_s[t])
            dpre_f = df * f_s[t] * (1.0 - f_s[t])
            dpre_a = da * (1.0 - a_s[t] ** 2)

            x_t = x[:, t]
            grads["W_xi"] += dpre_i.T @ x_t
            grads["W_xf"] += dpre_f.T @ x_t
            grads["W_xc"] += dpre_a.T @ x_t
            grads["W_xo"] += dpre_o.T @ x_t
            grads["W_hi"] += dpre_i.T @ r_prev
            grads["W_hf"] += dpre_f.T @ r_prev
            grads["W_hc"] += dpre_a.T @ r_prev
            grads["W_ho"] += dpre_o.T @ r_prev
            grads["W_ci"] += (dpre_i * c_prev).sum(axis=0)
            grads["W_cf"] += (dpre_f * c_prev).sum(axis=0)
            grads["W_co"] += (dpre_o * c_s[t]).sum(axis=0)
            grads["b_i"] += dpre_i.sum(axis=0)
            grads["b_f"] += dpre_f.sum(axis=0)
            grads["b_c"] += dpre_a.sum(axis=0)
            grads["b_o"] += dpre_o.sum(axis=0)

            dx[:, t] = (dpre_i @ p.W_xi + dpre_f @ p.W_xf
                        + dpre_a @ p.W_xc + dpre_o @ p.W_xo)
            drec = (dpre_i @ p.W_hi + dpre_f @ p.W_hf
                    + dpre_a @ p.W_hc + dpre_o @ p.W_ho)
            # c_{t-1} feeds f*c_prev and the input/forget peepholes
            dc_next = dc * f_s[t] + dpre_i * p.W_ci + dpre_f * p.W_cf
        return dx, grads


class ClstmLayer:
    """One shared LSTM run independently over every frequency patch.

    The J patches of each input sequence are folded into the batch axis, so
    patch weight sharing and per-patch state come for free and parameter
    gradients sum over all patches.  Output per frame is the position-major
    concatenation of the J patch outputs.
    """

    kind = "clstm"

    def __init__(self, name, params, layout):
        if params.input_dim != layout.patch_dim:
            raise ValueError("LSTM input dim %d != patch dim %d"
                             % (params.input_dim, layout.patch_dim))
        self.name = name
        self.params = params
        self.layout = layout
        self._columns = layout.patch_columns()
        # a single full-width patch is exactly a plain LSTM; skipping the
        # gather keeps that equivalence bitwise (a gather copy can change the
        # buffer alignment and with it the BLAS summation order)
        self._identity = (layout.num_patches == 1
                          and np.array_equal(self._columns[0],
                                             np.arange(layout.input_dim)))
        self._lstm = LstmLayer(name + ".shared", params)

    @property
    def num_patches(self):
        return self.layout.num_patches

    @property
    def unit_dim(self):
        return self.params.output_dim

    @property
    def output_dim(self):
        return self.num_patches * self.unit_dim

    def param_items(self):
        return self.params.field_items()

    def forward(self, x):
        if self._identity:
            out, lstm_tape = self._lstm.forward(x)
            return out, (lstm_tape, x.shape)
        n_seq, length, _ = x.shape
        j, pd = self.num_patches, self.layout.patch_dim
        patches = x[:, :, self._columns]                # (N, L, J, pd)
        folded = patches.transpose(0, 2, 1, 3).reshape(n_seq * j, length, pd)
        y, lstm_tape = self._lstm.forward(folded)
        out = (y.reshape(n_seq, j, length, self.unit_dim)
                .transpose(0, 2, 1, 3)
                .reshape(n_seq, length, self.output_dim))
        return out, (lstm_tape, x.shape)

    def backward(self, tape, dout):
        lstm_tape, x_shape = tape
        if self._identity:
            return self._lstm.backward(lstm_tape, dout)
        n_seq, length, _ = x_shape
        j, u = self.num_patches, self.unit_dim
        dy = (dout.reshape(n_seq, length, j, u)
                  .transpose(0, 2, 1, 3)
                  .reshape(n_seq * j, length, u))
        dfolded, grads = self._lstm.backward(lstm_tape, dy)
        dpatches = (dfolded.reshape(n_seq, j, length, self.layout.patch_dim)
                          .transpose(0, 2, 1, 3))
        dx = np.zeros(x_shape)
        # columns are unique within one patch; overlap is handled by the loop
        for pj in range(j):
            dx[:, :, self._columns[pj]] += dpatches[:, :, pj]
        return dx, grads


class ConvLayer:
    """Shared linear filter + ReLU over frequency patches (one frame at a time)."""

    kind = "conv"

    def __init__(self, name, W, b, layout):
        if W.shape[1] != layout.patch_dim:
            raise ValueError("filter dim %d != patch dim %d"
                             % (W.shape[1], layout.patch_dim))
        self.name = name
        self.W = W
        self.b = b
        self.layout = layout
        self._columns = layout.patch_columns()

    @property
    def num_patches(self):
        return self.layout.num_patches

    @property
    def unit_dim(self):
        return self.W.shape[0]

    @property
    def output_dim(self):
        return self.num_patches * self.unit_dim

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x):
        patches = x[:, :, self._columns]                    # (N, L, J, pd)
        pre = patches @ self.W.T + self.b                   # (N, L, J, K)
        out = np.maximum(pre, 0.0)
        n_seq, length = x.shape[:2]
        return out.reshape(n_seq, length, self.output_dim), (x, pre > 0)

    def backward(self, tape, dout):
        x, active = tape
        n_seq, length, _ = x.shape
        j, k = self.num_patches, self.unit_dim
        dpre = dout.reshape(n_seq, length, j, k) * active
        patches = x[:, :, self._columns]
        dW = np.einsum("nljk,nljd->kd", dpre, patches)
        db = dpre.sum(axis=(0, 1, 2))
        dpatches = dpre @ self.W                            # (N, L, J, pd)
        dx = np.zeros_like(x)
        for pj in range(j):
            dx[:, :, self._columns[pj]] += dpatches[:, :, pj]
        return dx, {"W": dW, "b": db}


class PoolLayer:
    """Parameter-free per-unit max over groups of adjacent patches."""

    kind = "pool"

    def __init__(self, name, num_patches, unit_dim, pool_size):
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        self.name = name
        self.num_patches = num_patches
        self.unit_dim = unit_dim
        self.pool_size = pool_size

    @property
    def num_groups(self):
        return -(-self.num_patches // self.pool_size)

    @property
    def output_dim(self):
        return self.num_groups * self.unit_dim

    def param_items(self):
        return []

    def group_bounds(self):
        return [
            (g * self.pool_size, min((g + 1) * self.pool_size, self.num_patches))
            for g in range(self.num_groups)
        ]

    def forward(self, x):
        n_seq, length, _ = x.shape
        banded = x.reshape(n_seq, length, self.num_patches, self.unit_dim)
        out = np.empty((n_seq, length, self.num_groups, self.unit_dim))
        argmax = np.empty((n_seq, length, self.num_groups, self.unit_dim),
                          dtype=np.intp)
        for g, (lo, hi) in enumerate(self.group_bounds()):
            seg = banded[:, :, lo:hi]
            idx = seg.argmax(axis=2)
            out[:, :, g] = np.take_along_axis(seg, idx[:, :, None], axis=2)[:, :, 0]
            argmax[:, :, g] = idx + lo
        return out.reshape(n_seq, length, self.output_dim), (x.shape, argmax)

    def backward(self, tape, dout):
        x_shape, argmax = tape
        n_seq, length, _ = x_shape
        dbanded = np.zeros((n_seq, length, self.num_patches, self.unit_dim))
        dg = dout.reshape(n_seq, length, self.num_groups, self.unit_dim)
        # groups are disjoint, so each target slot is written at most once
        np.put_along_axis(dbanded, argmax, dg, axis=2)
        return dbanded.reshape(x_shape), {}


class ReluLayer:
    """Fully connected rectified-linear layer, applied frame-wise."""

    kind = "relu"

    def __init__(self, name, W, b):
        self.name = name
        self.W = W
        self.b = b

    @property
    def output_dim(self):
        return self.W.shape[0]

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x):
        pre = x @ self.W.T + self.b
        return np.maximum(pre, 0.0), (x, pre > 0)

    def backward(self, tape, dout):
        x, active = tape
        dpre = dout * active
        flat_d = dpre.reshape(-1, dpre.shape[-1])
        flat_x = x.reshape(-1, x.shape[-1])
        return dpre @ self.W, {"W": flat_d.T @ flat_x, "b": flat_d.sum(axis=0)}


class MaxoutLayer:
    """Fully connected maxout: per output unit, max over group_size linear units."""

    kind = "maxout"

    def __init__(self, name, W, b, group_size):
        if W.shape[0] % group_size:
            raise ValueError("pre-activation dim must be a multiple of group_size")
        self.name = name
        self.W = W
        self.b = b
        self.group_size = group_size

    @property
    def output_dim(self):
        return self.W.shape[0] // self.group_size

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x):
        pre = x @ self.W.T + self.b
        grouped = pre.reshape(pre.shape[:-1] + (self.output_dim, self.group_size))
        idx = grouped.argmax(axis=-1)
        out = np.take_along_axis(grouped, idx[..., None], axis=-1)[..., 0]
        return out, (x, idx)

    def backward(self, tape, dout):
        x, idx = tape
        dgrouped = np.zeros(dout.shape + (self.group_size,))
        np.put_along_axis(dgrouped, idx[..., None], dout[..., None], axis=-1)
        dpre = dgrouped.reshape(dout.shape[:-1] + (self.W.shape[0],))
        flat_d = dpre.reshape(-1, dpre.shape[-1])
        flat_x = x.reshape(-1, x.shape[-1])
        return dpre @ self.W, {"W": flat_d.T @ flat_x, "b": flat_d.sum(axis=0)}


class OutputLayer:
    """Linear layer + numerically stable softmax over classes.

    backward() expects the gradient with respect to the pre-softmax logits
    (the cross-entropy loss supplies `posterior - onehot` directly), which
    keeps the softmax/loss pair exact.
    """

    kind = "output"

    def __init__(self, name, W, b):
        self.name = name
        self.W = W
        self.b = b

    @property
    def output_dim(self):
        return self.W.shape[0]

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x):
        logits = x @ self.W.T + self.b
        logits -= logits.max(axis=-1, keepdims=True)
        expl = np.exp(logits)
        post = expl / expl.sum(axis=-1, keepdims=True)
        return post, (x,)

    def backward(self, tape, dlogits):
        (x,) = tape
        flat_d = dlogits.reshape(-1, dlogits.shape[-1])
        flat_x = x.reshape(-1, x.shape[-1])
        return dlogits @ self.W, {"W": flat_d.T @ flat_x, "b": flat_d.sum(axis=0)}


def softmax_output(x, W, b):
    """Class posteriors for a single vector or batch of vectors."""
    layer = OutputLayer("softmax", W, b)
    post, _ = layer.forward(np.asarray(x, dtype=np.float64))
    return post


def conv_forward(frame_bands, W, b, layout):
    """Eq.-style single-frame convolution: returns the J x K patch outputs."""
    x = np.asarray(frame_bands, dtype=np.float64).reshape(1, 1, -1)
    layer = ConvLayer("conv", W, b, layout)
    out, _ = layer.forward(x)
    return out.reshape(layout.num_patches, W.shape[0])


def clstm_step(params, layout, frame_t, h_prev, c_prev):
    """One CLSTM timestep: the shared LSTM applied to each patch independently.

    frame_t is one flat banded frame; h_prev has shape (J, output_dim) and
    c_prev (J, num_cells).  Returns (h_t, c_t) with the same shapes.
    """
    cols = layout.patch_columns()
    x = np.asarray(frame_t, dtype=np.float64)[cols]     # (J, patch_dim)
    out, c, _ = lstm_step(params, x, h_prev, c_prev)
    return out, c


def max_pool(patch_outputs, pool_size):
    """Frequency max pooling of a J x K matrix; returns (G x K, argmax)."""
    patch_outputs = np.asarray(patch_outputs, dtype=np.float64)
    j, k = patch_outputs.shape
    layer = PoolLayer("pool", j, k, pool_size)
    out, (_, argmax) = layer.forward(patch_outputs.reshape(1, 1, j * k))
    return out.reshape(layer.num_groups, k), argmax.reshape(layer.num_groups, k)


def relu_fc(x, W, b):
    return np.maximum(np.asarray(x, dtype=np.float64) @ W.T + b, 0.0)


def maxout_fc(x, W, b, group_size):
    layer = MaxoutLayer("maxout", W, b, group_size)
    out, _ = layer.forward(np.asarray(x, dtype=np.float64))
    return out

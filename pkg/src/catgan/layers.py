"""Structured layer operations and declarative network assembly.

Images are laid out NHWC and filters [kH, kW, inC, outC].  Transposed
convolution is defined as the adjoint of convolution with the same filter,
stride and padding, i.e. `conv2d_transpose` applied to `y` computes the
gradient of `conv2d` with respect to its input when `y` stands in for the
output gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, get_default_dtype

SAME = "SAME"
VALID = "VALID"

PAPER_LRELU = (0.54, 0.4)      # a*x + b*|x| as printed
STANDARD_LRELU = (0.6, 0.4)    # equivalent to slope-0.2 leaky ReLU

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.99


# ---------------------------------------------------------------------------
# convolution arithmetic
# ---------------------------------------------------------------------------

def conv_output_extent(extent: int, k: int, stride: int, padding: str) -> int:
    """Spatial output extent of a strided convolution."""
    if padding == SAME:
        return -(-extent // stride)  # ceil division
    if padding == VALID:
        if k > extent:
            raise ValueError(
                f"VALID convolution needs kernel {k} <= input extent {extent}"
            )
        return (extent - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def conv_transpose_output_extent(extent: int, k: int, stride: int, padding: str) -> int:
    """Spatial output extent of a strided transposed convolution."""
    if padding == SAME:
        return extent * stride
    if padding == VALID:
        return (extent - 1) * stride + k
    raise ValueError(f"unknown padding {padding!r}")


def _pad_amounts(extent: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    """(before, after) zero padding; the extra element goes after (bottom/right)."""
    if padding == VALID:
        return 0, 0
    out = conv_output_extent(extent, k, stride, padding)
    total = max((out - 1) * stride + k - extent, 0)
    before = total // 2
    return before, total - before


def _normalize_stride(stride) -> tuple[int, int]:
    """Accept [1, sH, sW, 1], (sH, sW) or a bare int."""
    if np.isscalar(stride):
        return int(stride), int(stride)
    stride = tuple(int(s) for s in stride)
    if len(stride) == 4:
        if stride[0] != 1 or stride[3] != 1:
            raise ValueError(f"stride must be [1, sH, sW, 1], got {stride}")
        return stride[1], stride[2]
    if len(stride) == 2:
        return stride
    raise ValueError(f"cannot interpret stride {stride}")


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, padding: str):
    """Patch matrix [B*OH*OW, kH*kW*C] plus the output spatial extents."""
    b, h, w, c = x.shape
    pt, pb = _pad_amounts(h, kh, sh, padding)
    pl, pr = _pad_amounts(w, kw, sw, padding)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    oh, ow = windows.shape[1], windows.shape[2]
    # [B, OH, OW, C, kH, kW] -> [B, OH, OW, kH, kW, C], flat rows per patch
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * oh * ow, kh * kw * c), (oh, ow)


def _conv_forward(x: np.ndarray, f: np.ndarray, sh: int, sw: int,
                  padding: str, cols=None):
    b, h, w, cin = x.shape
    kh, kw, fin, fout = f.shape
    if fin != cin:
        raise ValueError(
            f"filter expects {fin} input channels, image has {cin}"
        )
    if cols is None:
        cols, _ = _im2col(x, kh, kw, sh, sw, padding)
    oh = conv_output_extent(h, kh, sh, padding)
    ow = conv_output_extent(w, kw, sw, padding)
    out = cols @ f.reshape(-1, fout)
    return out.reshape(b, oh, ow, fout)


def _conv_input_grad(dout: np.ndarray, f: np.ndarray, sh: int, sw: int,
                     padding: str, x_shape: tuple) -> np.ndarray:
    """Gradient of `_conv_forward` w.r.t. its input (also the transposed-conv map)."""
    b, h, w, cin = x_shape
    kh, kw, _, fout = f.shape
    pt, pb = _pad_amounts(h, kh, sh, padding)
    pl, pr = _pad_amounts(w, kw, sw, padding)
    oh, ow = dout.shape[1], dout.shape[2]
    dcols = dout.reshape(-1, fout) @ f.reshape(-1, fout).T
    dcols = dcols.reshape(b, oh, ow, kh, kw, cin)
    dxp = np.zeros((b, h + pt + pb, w + pl + pr, cin), dtype=dout.dtype)
    h_span = (oh - 1) * sh + 1
    w_span = (ow - 1) * sw + 1
    for p in range(kh):
        for q in range(kw):
            dxp[:, p:p + h_span:sh, q:q + w_span:sw, :] += dcols[:, :, :, p, q, :]
    return np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w, :])


def _conv_filter_grad(x: np.ndarray, dout: np.ndarray, sh: int, sw: int,
                      padding: str, f_shape: tuple, cols=None) -> np.ndarray:
    kh, kw, cin, fout = f_shape
    if cols is None:
        cols, _ = _im2col(x, kh, kw, sh, sw, padding)
    df = cols.T @ dout.reshape(-1, fout)
    return df.reshape(kh, kw, cin, fout)


def conv2d(x: Tensor, f: Tensor, stride, padding: str) -> Tensor:
    """Strided 2-D convolution of NHWC images with a [kH,kW,inC,outC] filter."""
    sh, sw = _normalize_stride(stride)
    x, f = Tensor._lift(x), Tensor._lift(f)
    kh, kw = f.shape[0], f.shape[1]
    if f.shape[2] != x.shape[3]:
        raise ValueError(
            f"filter expects {f.shape[2]} input channels, image has {x.shape[3]}"
        )
    cols, _ = _im2col(x.data, kh, kw, sh, sw, padding)
    out_data = _conv_forward(x.data, f.data, sh, sw, padding, cols=cols)
    # the patch matrix is reused for the filter gradient when needed
    keep_cols = cols if f.requires_grad else None

    def backward(grad):
        dx = _conv_input_grad(grad, f.data, sh, sw, padding, x.shape) \
            if x.requires_grad else None
        df = _conv_filter_grad(x.data, grad, sh, sw, padding, f.shape,
                               cols=keep_cols) \
            if f.requires_grad else None
        return dx, df

    return Tensor._make(out_data, (x, f), backward, "conv2d")


def conv2d_transpose(x: Tensor, f: Tensor, stride, padding: str) -> Tensor:
    """Adjoint of :func:`conv2d`: maps F-channel maps back to C-channel maps.

    The filter keeps the convolution layout [kH, kW, C, F]; the input of this
    operation has F channels and the output has C channels.  With VALID
    padding the output extent is (in-1)*stride + k.
    """
    sh, sw = _normalize_stride(stride)
    x, f = Tensor._lift(x), Tensor._lift(f)
    kh, kw, cout, fin = f.shape
    b, h, w, cin = x.shape
    if fin != cin:
        raise ValueError(
            f"transposed filter expects {fin} input channels, image has {cin}"
        )
    oh = conv_transpose_output_extent(h, kh, sh, padding)
    ow = conv_transpose_output_extent(w, kw, sw, padding)
    out_shape = (b, oh, ow, cout)
    out_data = _conv_input_grad(x.data, f.data, sh, sw, padding, out_shape)

    def backward(grad):
        # both terms run a forward-style contraction over the incoming grad
        cols = None
        if x.requires_grad or f.requires_grad:
            cols, _ = _im2col(grad, kh, kw, sh, sw, padding)
        dx = _conv_forward(grad, f.data, sh, sw, padding, cols=cols) \
            if x.requires_grad else None
        df = _conv_filter_grad(grad, x.data, sh, sw, padding, f.shape,
                               cols=cols) \
            if f.requires_grad else None
        return dx, df

    return Tensor._make(out_data, (x, f), backward, "conv2d_transpose")


# ---------------------------------------------------------------------------
# normalisation, dropout, pooling
# ---------------------------------------------------------------------------

def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor,
                     eps: float = BATCHNORM_EPS):
    """Normalise per channel with batch statistics.

    Returns (out, batch_mean, batch_var) where the statistics are plain
    arrays for updating running estimates.  Requires a batch of at least two.
    """
    x, gamma, beta = Tensor._lift(x), Tensor._lift(gamma), Tensor._lift(beta)
    if x.shape[0] < 2:
        raise ValueError(
            f"batch norm in training mode needs batch size >= 2, got {x.shape[0]}"
        )
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[ax] for ax in axes]))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(grad):
        dgamma = (grad * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = grad.sum(axis=axes) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = grad * gamma.data
            dx = (inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=axes)
                - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            dx = None
        return dx, dgamma, dbeta

    out = Tensor._make(out_data, (x, gamma, beta), backward, "batch_norm")
    return out, mean, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                    running_mean: np.ndarray, running_var: np.ndarray,
                    eps: float = BATCHNORM_EPS) -> Tensor:
    """Normalise with stored running statistics (inference mode)."""
    x, gamma, beta = Tensor._lift(x), Tensor._lift(gamma), Tensor._lift(beta)
    running_mean = np.asarray(running_mean, dtype=x.dtype)
    running_var = np.asarray(running_var, dtype=x.dtype)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv_std

    def backward(grad):
        axes = tuple(range(x.ndim - 1))
        dgamma = (grad * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = grad.sum(axis=axes) if beta.requires_grad else None
        dx = grad * gamma.data * inv_std if x.requires_grad else None
        return dx, dgamma, dbeta

    return Tensor._make(gamma.data * xhat + beta.data,
                        (x, gamma, beta), backward, "batch_norm_eval")


def dropout(x: Tensor, keep_prob: float, training: bool,
            rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability 1-keep_prob, scale survivors."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = Tensor._lift(x)
    if not training or keep_prob == 1.0:
        return x
    draws = rng.random(x.shape, dtype=x.dtype.type)
    mask = (draws < keep_prob).astype(x.dtype)
    mask /= keep_prob
    return Tensor._make(x.data * mask, (x,), lambda grad: (grad * mask,), "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NHWC tensor: [B,H,W,C] -> [B,C]."""
    x = Tensor._lift(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NHWC input, got {x.shape}")
    b, h, w, c = x.shape
    out_data = x.data.mean(axis=(1, 2))

    def backward(grad):
        g = grad[:, None, None, :] / (h * w)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(out_data, (x,), backward, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for a [B,I] batch, [I,O] weight and [O] bias."""
    x, w, b = Tensor._lift(x), Tensor._lift(w), Tensor._lift(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(
            f"affine shape mismatch: input {x.shape} vs weight {w.shape}"
        )
    return x @ w + b


def apply_activation(x: Tensor, kind: str, lrelu_coefs=PAPER_LRELU) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "lrelu":
        return x.lrelu(*lrelu_coefs)
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "tanh":
        return x.tanh()
    if kind == "softmax":
        return x.softmax()
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# initialisation and gradient clipping
# ---------------------------------------------------------------------------

def xavier_std(in_dim: int) -> float:
    """Standard deviation 1/sqrt(in_dim/2) used for all weight tensors."""
    if in_dim < 1:
        raise ValueError(f"in_dim must be >= 1, got {in_dim}")
    return 1.0 / np.sqrt(in_dim / 2.0)


def xavier_init(shape, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Normal samples with mean 0 and std 1/sqrt(in_dim/2)."""
    return rng.normal(0.0, xavier_std(in_dim), size=shape).astype(get_default_dtype())


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_gradients(grads: dict, max_norm: float = 20.0) -> dict:
    """Scale all gradients so the global L2 norm does not exceed max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


# ---------------------------------------------------------------------------
# declarative network description
# ---------------------------------------------------------------------------

VALID_KINDS = {
    "affine", "conv", "deconv", "batchnorm", "dropout",
    "activation", "global_avg_pool", "flatten",
}
VALID_ACTIVATIONS = {"relu", "lrelu", "sigmoid", "tanh", "softmax", "none"}


@dataclass
class LayerSpec:
    """One row of a network table.

    filter_shape is [kH, kW, inC, outC] for conv/deconv (matching the
    architecture tables) and [in, out] for affine layers.
    """

    kind: str
    filter_shape: tuple = ()
    stride: tuple = (1, 1, 1, 1)
    padding: str = SAME
    activation: str = "none"
    keep_prob: float = 1.0

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in VALID_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.filter_shape = tuple(int(v) for v in self.filter_shape)
        if any(v <= 0 for v in self.filter_shape):
            raise ValueError(f"filter extents must be positive: {self.filter_shape}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1]: {self.keep_prob}")
        if self.kind in ("conv", "deconv") and len(self.filter_shape) != 4:
            raise ValueError(
                f"{self.kind} filter_shape needs 4 extents, got {self.filter_shape}"
            )
        if self.kind == "affine" and len(self.filter_shape) != 2:
            raise ValueError(
                f"affine filter_shape needs 2 extents, got {self.filter_shape}"
            )


class Network:
    """A parameterised stack of layers built from a list of LayerSpec rows.

    The network owns no parameter values; it derives parameter names and
    shapes from the specs so that a plain dict of arrays can be threaded
    through :meth:`forward`.  Batch-norm running statistics are kept as
    buffers on the network and updated in place during training forwards.
    """

    def __init__(self, name: str, specs: list[LayerSpec], input_shape: tuple,
                 lrelu_coefs=PAPER_LRELU):
        self.name = name
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.lrelu_coefs = tuple(lrelu_coefs)
        self.param_shapes: dict[str, tuple] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.layer_shapes: list = []
        self._infer_shapes()

    # shape inference doubles as the declared-spec validity check
    def _infer_shapes(self):
        shape = self.input_shape  # without the batch axis
        for idx, spec in enumerate(self.specs):
            prefix = f"{self.name}.{idx:02d}_{spec.kind}"
            if spec.kind == "affine":
                fan_in, fan_out = spec.filter_shape
                if len(shape) != 1 or shape[0] != fan_in:
                    raise ValueError(
                        f"{prefix}: expects {fan_in} features, got {shape}"
                    )
                self.param_shapes[prefix + ".w"] = (fan_in, fan_out)
                self.param_shapes[prefix + ".b"] = (fan_out,)
                shape = (fan_out,)
            elif spec.kind == "conv":
                kh, kw, cin, cout = spec.filter_shape
                h, w, c = shape
                if c != cin:
                    raise ValueError(f"{prefix}: expects {cin} channels, got {c}")
                sh, sw = _normalize_stride(spec.stride)
                shape = (conv_output_extent(h, kh, sh, spec.padding),
                         conv_output_extent(w, kw, sw, spec.padding), cout)
                self.param_shapes[prefix + ".f"] = (kh, kw, cin, cout)
                self.param_shapes[prefix + ".b"] = (cout,)
            elif spec.kind == "deconv":
                kh, kw, cin, cout = spec.filter_shape
                h, w, c = shape
                if c != cin:
                    raise ValueError(f"{prefix}: expects {cin} channels, got {c}")
                sh, sw = _normalize_stride(spec.stride)
                shape = (conv_transpose_output_extent(h, kh, sh, spec.padding),
                         conv_transpose_output_extent(w, kw, sw, spec.padding),
                         cout)
                # stored in the op layout [kH, kW, outC, inC]
                self.param_shapes[prefix + ".f"] = (kh, kw, cout, cin)
                self.param_shapes[prefix + ".b"] = (cout,)
            elif spec.kind == "batchnorm":
                c = shape[-1]
                self.param_shapes[prefix + ".gamma"] = (c,)
                self.param_shapes[prefix + ".beta"] = (c,)
                self.buffers[prefix + ".running_mean"] = np.zeros(c, dtype=np.float64)
                self.buffers[prefix + ".running_var"] = np.ones(c, dtype=np.float64)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "global_avg_pool":
                if len(shape) != 3:
                    raise ValueError(f"{prefix}: needs spatial input, got {shape}")
                shape = (shape[-1],)
            self.layer_shapes.append(shape)
        self.output_shape = shape

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Xavier-normal weights, zero biases, unit gammas."""
        dt = get_default_dtype()
        params = {}
        for name, shape in self.param_shapes.items():
            if name.endswith(".w"):
                params[name] = xavier_init(shape, shape[0], rng)
            elif name.endswith(".f"):
                kh, kw, a, b = shape
                cin = b if "_deconv" in name else a  # deconv stores [kH,kW,outC,inC]
                params[name] = xavier_init(shape, kh * kw * cin, rng)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape, dtype=dt)
            else:
                params[name] = np.zeros(shape, dtype=dt)
        return params

    def reset_buffers(self):
        for name in self.buffers:
            if name.endswith(".running_mean"):
                self.buffers[name] = np.zeros_like(self.buffers[name])
            else:
                self.buffers[name] = np.ones_like(self.buffers[name])

    def forward(self, x, params: dict, training: bool,
                rng: np.random.Generator | None = None) -> Tensor:
        """Run the stack; `params` maps parameter names to Tensors or arrays."""
        out = Tensor._lift(x)
        tensors = {k: Tensor._lift(v) for k, v in params.items()}
        for idx, spec in enumerate(self.specs):
            prefix = f"{self.name}.{idx:02d}_{spec.kind}"
            if spec.kind == "affine":
                out = affine(out, tensors[prefix + ".w"], tensors[prefix + ".b"])
            elif spec.kind == "conv":
                out = conv2d(out, tensors[prefix + ".f"], spec.stride, spec.padding)
                out = out + tensors[prefix + ".b"]
            elif spec.kind == "deconv":
                out = conv2d_transpose(out, tensors[prefix + ".f"],
                                       spec.stride, spec.padding)
                out = out + tensors[prefix + ".b"]
            elif spec.kind == "batchnorm":
                gamma = tensors[prefix + ".gamma"]
                beta = tensors[prefix + ".beta"]
                if training:
                    out, mean, var = batch_norm_train(out, gamma, beta)
                    mom = BATCHNORM_MOMENTUM
                    rm = self.buffers[prefix + ".running_mean"]
                    rv = self.buffers[prefix + ".running_var"]
                    rm *= mom
                    rm += (1 - mom) * mean
                    rv *= mom
                    rv += (1 - mom) * var
                else:
                    out = batch_norm_eval(
                        out, gamma, beta,
                        self.buffers[prefix + ".running_mean"],
                        self.buffers[prefix + ".running_var"])
            elif spec.kind == "dropout":
                if training and rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                out = dropout(out, spec.keep_prob, training, rng)
            elif spec.kind == "activation":
                out = apply_activation(out, spec.activation, self.lrelu_coefs)
            elif spec.kind == "flatten":
                out = flatten(out)
            elif spec.kind == "global_avg_pool":
                out = global_avg_pool(out)
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes.values())

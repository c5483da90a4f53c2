"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the layer vocabulary the assimilation network needs
(strided/same convolutions, layer norm over channels, SiLU, pixel
shuffle, bilinear resize) plus the elementwise/reduction plumbing used
by the losses and the differentiable forecast step. Tensors are
channels-first (C, H, W) or flat; float64 by default, float32 if the
input data is float32.
"""

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if a.dtype not in _FLOAT_TYPES:
        return a.astype(np.float64)
    return a


class Tensor:
    """Node in the computation graph. `data` is a numpy array."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Parameter gradients accumulate across calls until reset;
        intermediate nodes get fresh gradients each call.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            if node is not self and not isinstance(node, Parameter):
                node.grad = None
        self._accum(np.ones((), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # elementwise arithmetic; the non-Tensor operand is treated as a
    # constant (numpy broadcasting allowed, no gradient)
    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other)
            out = Tensor(self.data + other.data, (self, other))

            def bw(g):
                self._accum(g)
                other._accum(g)
        else:
            c = other
            out = Tensor(self.data + c, (self,))

            def bw(g):
                self._accum(_unbroadcast(g, self.data.shape))
        out._backward = bw
        return out

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        out = Tensor(-self.data, (self,))

        def bw(g):
            self._accum(-g)

        out._backward = bw
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other)
            out = Tensor(self.data - other.data, (self, other))

            def bw(g):
                self._accum(g)
                other._accum(-g)
        else:
            out = Tensor(self.data - other, (self,))

            def bw(g):
                self._accum(_unbroadcast(g, self.data.shape))
        out._backward = bw
        return out

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other)
            out = Tensor(self.data * other.data, (self, other))

            def bw(g):
                self._accum(g * other.data)
                other._accum(g * self.data)
        else:
            c = other
            out = Tensor(self.data * c, (self,))

            def bw(g):
                self._accum(_unbroadcast(g * c, self.data.shape))
        out._backward = bw
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only by constants")
        return self.__mul__(1.0 / other)

    def __getitem__(self, key):
        src_shape = self.data.shape
        out = Tensor(self.data[key].copy(), (self,))

        def bw(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            full[key] = g
            self._accum(full)

        out._backward = bw
        return out

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor; gradient persists and accumulates across backward calls."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True, dtype=None):
        super().__init__(data, ())
        if dtype is not None:
            self.data = self.data.astype(dtype, copy=False)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def _check_same_shape(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def _unbroadcast(g, shape):
    # reduce a gradient of broadcast result back to `shape`
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise functions

def tanh(x):
    out = Tensor(np.tanh(x.data), (x,))

    def bw(g):
        x._accum(g * (1.0 - out.data * out.data))

    out._backward = bw
    return out


def silu(x):
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s, (x,))

    def bw(g):
        x._accum(g * (s * (1.0 + x.data * (1.0 - s))))

    out._backward = bw
    return out


def absval(x):
    out = Tensor(np.abs(x.data), (x,))

    def bw(g):
        x._accum(g * np.sign(x.data))

    out._backward = bw
    return out


def clip(x, lo, hi):
    out = Tensor(np.clip(x.data, lo, hi), (x,))
    passthru = (x.data > lo) & (x.data < hi)

    def bw(g):
        x._accum(g * passthru)

    out._backward = bw
    return out


def stop_gradient(x):
    return Tensor(x.data.copy(), ())


# ---------------------------------------------------------------------------
# reductions

def tsum(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))

    def bw(g):
        x._accum(np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    out._backward = bw
    return out


def tmean(x):
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,))

    def bw(g):
        x._accum(np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=False))

    out._backward = bw
    return out


def wsum(x, w):
    """Sum of w * x for a constant weight array w (broadcastable)."""
    w = np.asarray(w, dtype=x.data.dtype)
    out = Tensor(np.asarray((x.data * w).sum(), dtype=x.data.dtype), (x,))

    def bw(g):
        x._accum(np.broadcast_to(g * w, x.data.shape).astype(x.data.dtype, copy=False))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# structural ops

def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    out._backward = bw
    return out


def crop2d(x, r0, c0, h, w):
    """Spatial window [r0:r0+h, c0:c0+w] of a (C, H, W) tensor."""
    C, H, W = x.data.shape
    if r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
        raise ValueError(f"crop [{r0}:{r0 + h}, {c0}:{c0 + w}] outside grid {H}x{W}")
    return x[:, r0:r0 + h, c0:c0 + w]


def embed2d(x, hw, r0, c0):
    """Place a (C, h, w) tensor into a zero (C, H, W) field at (r0, c0)."""
    C, h, w = x.data.shape
    H, W = hw
    if r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
        raise ValueError(f"embed window outside target grid {H}x{W}")
    field = np.zeros((C, H, W), dtype=x.data.dtype)
    field[:, r0:r0 + h, c0:c0 + w] = x.data
    out = Tensor(field, (x,))

    def bw(g):
        x._accum(g[:, r0:r0 + h, c0:c0 + w])

    out._backward = bw
    return out


def roll_channels(x, shifts, axis=-1):
    """Circular shift of each channel by its own integer offset."""
    shifts = [int(s) for s in np.atleast_1d(shifts)]
    if len(shifts) == 1:
        shifts = shifts * x.data.shape[0]
    if len(shifts) != x.data.shape[0]:
        raise ValueError("one shift per channel required")
    out_data = np.empty_like(x.data)
    for c, s in enumerate(shifts):
        out_data[c] = np.roll(x.data[c], s, axis=axis - 1 if axis > 0 else axis)
    out = Tensor(out_data, (x,))

    def bw(g):
        gx = np.empty_like(g)
        for c, s in enumerate(shifts):
            gx[c] = np.roll(g[c], -s, axis=axis - 1 if axis > 0 else axis)
        x._accum(gx)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# network layers

def _im2col(x, k, stride):
    C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    s0, s1, s2 = x.strides
    v = np.lib.stride_tricks.as_strided(
        x, (C, k, k, Ho, Wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return np.ascontiguousarray(v).reshape(C * k * k, Ho * Wo), Ho, Wo


def _col2im(cols, shape, k, stride, Ho, Wo):
    C, H, W = shape
    x = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(C, k, k, Ho, Wo)
    for ki in range(k):
        for kj in range(k):
            x[:, ki:ki + Ho * stride:stride, kj:kj + Wo * stride:stride] += cols[:, ki, kj]
    return x


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2D convolution on a (C, H, W) tensor.

    stride 1 uses odd kernels (1 or 3) with zero-filled same padding;
    stride 2 uses 2x2 kernels on even extents (exact halving).
    """
    Co, Ci, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    k = kh
    C, H, W = x.data.shape
    if C != Ci:
        raise ValueError(f"input has {C} channels, kernel expects {Ci}")
    if stride == 1:
        if k % 2 != 1:
            raise ValueError(f"stride 1 requires an odd kernel, got {k}")
        if padding != "same":
            raise ValueError("stride 1 convolutions use same padding")
        pad = (k - 1) // 2
    elif stride == 2:
        if k != 2:
            raise ValueError(f"stride 2 requires a 2x2 kernel, got {k}")
        if padding != "valid":
            raise ValueError("stride 2 convolutions use valid padding")
        if H % 2 or W % 2:
            raise ValueError(f"stride 2 requires even extents, got {H}x{W}")
        pad = 0
    else:
        raise ValueError(f"unsupported stride {stride}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, Ho, Wo = _im2col(xp, k, stride)
    wm = weight.data.reshape(Co, Ci * k * k)
    y = wm @ cols
    if bias is not None:
        y = y + bias.data[:, None]
    out_parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(y.reshape(Co, Ho, Wo), out_parents)

    def bw(g):
        gy = g.reshape(Co, Ho * Wo)
        weight._accum((gy @ cols.T).reshape(weight.data.shape))
        if bias is not None:
            bias._accum(gy.sum(axis=1))
        gcols = wm.T @ gy
        gxp = _col2im(gcols, xp.shape, k, stride, Ho, Wo)
        x._accum(gxp[:, pad:pad + H, pad:pad + W] if pad else gxp)

    out._backward = bw
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the channel axis at each spatial position."""
    C = x.data.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    g_ = gain.data.reshape((C,) + (1,) * (x.data.ndim - 1))
    b_ = bias.data.reshape((C,) + (1,) * (x.data.ndim - 1))
    out = Tensor(g_ * xhat + b_, (x, gain, bias))

    def bw(g):
        axes = tuple(range(1, x.data.ndim))
        gain._accum((g * xhat).sum(axis=axes))
        bias._accum(g.sum(axis=axes))
        gxhat = g * g_
        # standard layer-norm backward over axis 0 with population variance
        gvar = (gxhat * xc).sum(axis=0) * (-0.5) * ivar ** 3
        gmu = -(gxhat.sum(axis=0)) * ivar + gvar * (-2.0 / C) * xc.sum(axis=0)
        gx = gxhat * ivar + gvar * (2.0 / C) * xc + gmu / C
        x._accum(gx)

    out._backward = bw
    return out


def pixel_shuffle(x, r):
    """(C*r^2, H, W) -> (C, r*H, r*W); bijective value rearrangement."""
    Cr2, H, W = x.data.shape
    if Cr2 % (r * r):
        raise ValueError(f"{Cr2} channels not divisible by r^2={r * r}")
    C = Cr2 // (r * r)
    y = x.data.reshape(C, r, r, H, W).transpose(0, 3, 1, 4, 2).reshape(C, H * r, W * r)
    out = Tensor(np.ascontiguousarray(y), (x,))

    def bw(g):
        gx = g.reshape(C, H, r, W, r).transpose(0, 2, 4, 1, 3).reshape(Cr2, H, W)
        x._accum(np.ascontiguousarray(gx))

    out._backward = bw
    return out


def _resize_axis_indices(n_in, n_out):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.floor(pos).astype(int)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    return i0, i1, f


def bilinear_resize(x, target):
    """Resize (C, H, W) -> (C, H', W'); endpoints align, constants exact."""
    Ht, Wt = target
    if Ht < 1 or Wt < 1:
        raise ValueError("target extents must be >= 1")
    C, H, W = x.data.shape
    if (Ht, Wt) == (H, W):
        out = Tensor(x.data.copy(), (x,))

        def bw_id(g):
            x._accum(g)

        out._backward = bw_id
        return out

    i0, i1, fy = _resize_axis_indices(H, Ht)
    j0, j1, fx = _resize_axis_indices(W, Wt)
    fy_ = fy[None, :, None]
    fx_ = fx[None, None, :]
    # lerp form keeps constant fields bit-exact
    rows = x.data[:, i0, :] + fy_ * (x.data[:, i1, :] - x.data[:, i0, :])
    y = rows[:, :, j0] + fx_ * (rows[:, :, j1] - rows[:, :, j0])
    out = Tensor(y.astype(x.data.dtype, copy=False), (x,))

    def bw(g):
        grows = np.zeros((C, Ht, W), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), j0), g * (1.0 - fx_))
        np.add.at(grows, (slice(None), slice(None), j1), g * fx_)
        gx = np.zeros((C, H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), i0, slice(None)), grows * (1.0 - fy_))
        np.add.at(gx, (slice(None), i1, slice(None)), grows * fy_)
        x._accum(gx)

    out._backward = bw
    return out


def init_conv(rng, c_out, c_in, k, dtype=np.float64):
    """Fan-in-scaled uniform kernel and zero bias."""
    fan_in = c_in * k * k
    bound = 1.0 / np.sqrt(fan_in)
    w = Parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype))
    b = Parameter(np.zeros(c_out, dtype=dtype))
    return w, b

"""Network builders: skip encoder-decoder, small conv stack, and FICNN/PICNN.

A :class:`NetworkSpec` is an immutable architecture description; the
weights live separately in a :class:`ParamSet` so that one spec can be
shared across jobs.

Skip block layout (``C`` channels, input at resolution ``H x W``)::

    x -> conv(s=1) -> norm -> relu = a            (C, H, W)
    a -> conv(s=2) -> norm -> relu                (C, H/2, W/2)
      -> conv      -> norm -> relu
      -> conv      -> norm -> relu -> upsample x2 = u   (C, H, W)
    out = concat(a, u)                            (2C, H, W)

The last block is followed by an optional ``sr_factor`` upsample and a 1x1
projection to the output channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    channels: int
    kernel: int = 3
    strides: tuple[int, ...] = (1, 2, 1, 1)
    activation: str = "relu"
    norm: bool = True
    skip: bool = True

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.skip else self.channels


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    in_channels: int
    out_channels: int
    blocks: tuple[BlockSpec, ...] = ()
    sr_factor: int | None = None
    upsample_mode: str = "bilinear"
    hidden: tuple[int, ...] = ()
    partial: bool = False
    residual: bool = False

    def to_text(self) -> str:
        """Human-readable ``key = value`` rendering."""
        lines = [f"kind = {self.kind}",
                 f"in_channels = {self.in_channels}",
                 f"out_channels = {self.out_channels}"]
        if self.kind == "skip":
            lines.append(f"sr_factor = {self.sr_factor}")
            lines.append(f"upsample_mode = {self.upsample_mode}")
            lines.append(f"residual = {self.residual}")
        if self.kind == "ficnn":
            lines.append(f"hidden = {','.join(map(str, self.hidden))}")
            lines.append(f"partial = {self.partial}")
        for i, b in enumerate(self.blocks):
            lines.append(
                f"block{i} = in:{b.in_channels} ch:{b.channels} k:{b.kernel} "
                f"strides:{'/'.join(map(str, b.strides))} act:{b.activation} "
                f"norm:{b.norm} skip:{b.skip}")
        return "\n".join(lines) + "\n"


@dataclass
class ParamSet:
    """Named parameter tensors plus named groups of entry names."""

    entries: dict[str, Tensor]
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for g, names in self.groups.items():
            missing = [n for n in names if n not in self.entries]
            if missing:
                raise KeyError(f"group {g!r} references unknown entries {missing}")

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def group(self, name: str) -> tuple[str, ...]:
        if name not in self.groups:
            raise KeyError(f"unknown parameter group {name!r}; have {sorted(self.groups)}")
        return self.groups[name]

    def copy(self) -> ParamSet:
        return ParamSet({k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.entries.items()},
                        dict(self.groups))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.entries.items()}

    def track(self, names=None) -> None:
        """Enable gradient tracking on ``names`` (all entries by default) and clear grads."""
        names = self.names() if names is None else set(names)
        for k, v in self.entries.items():
            v.requires_grad = k in names
            v.grad = None

    def num_params(self) -> int:
        return sum(v.size for v in self.entries.values())


def is_bias(name: str) -> bool:
    return name.endswith(".b")


# ---------------------------------------------------------------- builders

def build_skip_net(n_blocks: int = 2, channels: int = 32, in_ch: int = 3, out_ch: int = 3,
                   sr_factor: int | None = None, norm: bool = True, skip: bool = True,
                   kernel: int = 3, upsample_mode: str = "bilinear",
                   image_size: tuple[int, int] | None = None,
                   residual: bool = False) -> NetworkSpec:
    """Skip encoder-decoder whose blocks each downsample once and restore resolution.

    ``residual=True`` adds the input to the output (``f(x) = x + g(x)``) and
    zero-initializes the projection, so the untrained network is the identity.

    ``image_size`` is optional; when given it is validated against the
    normalization requirement (at least two pixels per channel at the
    downsampled resolution).
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if channels < 4:
        raise ValueError("channels must be >= 4")
    if sr_factor is not None and sr_factor < 2:
        raise ValueError("sr_factor must be >= 2 when given")
    if residual and (sr_factor or in_ch != out_ch):
        raise ValueError("a residual net must preserve shape (in_ch == out_ch, no sr_factor)")
    if image_size is not None:
        h, w = image_size
        if h % 2 or w % 2:
            raise ShapeError(f"skip net needs even image dims, got {h}x{w}")
        if norm and (h // 2) * (w // 2) < 2:
            raise ShapeError(f"image {h}x{w} too small for normalization after downsampling")
    blocks = []
    c_in = in_ch
    for _ in range(n_blocks):
        b = BlockSpec(in_channels=c_in, channels=channels, kernel=kernel, norm=norm, skip=skip)
        blocks.append(b)
        c_in = b.out_channels
    return NetworkSpec("skip", in_ch, out_ch, tuple(blocks), sr_factor=sr_factor,
                       upsample_mode=upsample_mode, residual=residual)


def build_small_net(n_conv: int = 3, channels: int = 16, in_ch: int = 3,
                    out_ch: int | None = None, kernel: int = 3) -> NetworkSpec:
    """Plain stride-1 conv/relu stack; the last conv is linear."""
    if n_conv < 1:
        raise ValueError("n_conv must be >= 1")
    out_ch = in_ch if out_ch is None else out_ch
    blocks = []
    for i in range(n_conv):
        c_in = in_ch if i == 0 else channels
        c_out = out_ch if i == n_conv - 1 else channels
        act = "linear" if i == n_conv - 1 else "relu"
        blocks.append(BlockSpec(c_in, c_out, kernel=kernel, strides=(1,), activation=act,
                                norm=False, skip=False))
    return NetworkSpec("small", in_ch, out_ch, tuple(blocks))


def build_ficnn(in_dim: int = 2, hidden=(200, 200), partial: bool = False,
                label_dim: int = 1) -> NetworkSpec:
    """Input-convex scorer of a (data, label proposal) pair.

    Hidden layer ``l`` computes ``relu(Wz_l z_{l-1} + Wy_l y + b_l)`` with
    ``z_0`` the data.  ``partial=True`` adds an unconstrained data-only
    path feeding every hidden layer, so convexity holds in ``y`` only.
    """
    hidden = tuple(int(h) for h in hidden)
    if not hidden:
        raise ValueError("hidden must be non-empty")
    return NetworkSpec("ficnn", in_dim, label_dim, hidden=hidden, partial=partial)


def _skip_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, b in enumerate(spec.blocks):
        c_in = b.in_channels
        for j in range(len(b.strides)):
            shapes[f"b{i}.conv{j}.w"] = (b.channels, c_in, b.kernel, b.kernel)
            shapes[f"b{i}.conv{j}.b"] = (b.channels,)
            c_in = b.channels
    last = spec.blocks[-1].out_channels
    shapes["proj.w"] = (spec.out_channels, last, 1, 1)
    shapes["proj.b"] = (spec.out_channels,)
    return shapes


def _small_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, b in enumerate(spec.blocks):
        shapes[f"conv{i}.w"] = (b.channels, b.in_channels, b.kernel, b.kernel)
        shapes[f"conv{i}.b"] = (b.channels,)
    return shapes


def _ficnn_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = spec.in_channels
    ydim = spec.out_channels
    for l, h in enumerate(spec.hidden):
        shapes[f"z{l}.w"] = (h, prev)
        shapes[f"y{l}.w"] = (h, ydim)
        shapes[f"z{l}.b"] = (h,)
        if spec.partial and l > 0:
            shapes[f"u{l}.w"] = (spec.hidden[l - 1], spec.in_channels if l == 1 else spec.hidden[l - 2])
            shapes[f"u{l}.b"] = (spec.hidden[l - 1],)
            shapes[f"zu{l}.w"] = (h, spec.hidden[l - 1])
        prev = h
    shapes["out.wz"] = (1, prev)
    shapes["out.wy"] = (1, ydim)
    shapes["out.b"] = (1,)
    return shapes


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "skip":
        return _skip_shapes(spec)
    if spec.kind == "small":
        return _small_shapes(spec)
    if spec.kind == "ficnn":
        return _ficnn_shapes(spec)
    raise ValueError(f"unknown network kind {spec.kind!r}")


def default_groups(spec: NetworkSpec, names) -> dict[str, tuple[str, ...]]:
    """Named subsets of entries used for partial regularization and phase-2 updates.

    ``upper`` is the default regularized set: every block after the first
    (and the projection); ``last`` is the final block plus projection;
    for FICNN ``convex`` holds the weights that must stay nonnegative.
    """
    names = list(names)
    groups: dict[str, tuple[str, ...]] = {"all": tuple(names)}
    if spec.kind == "skip":
        for i in range(len(spec.blocks)):
            groups[f"block{i}"] = tuple(n for n in names if n.startswith(f"b{i}."))
        groups["proj"] = ("proj.w", "proj.b")
        groups["upper"] = tuple(n for n in names if not n.startswith("b0."))
        last = len(spec.blocks) - 1
        groups["last"] = groups[f"block{last}"] + groups["proj"]
    elif spec.kind == "small":
        for i in range(len(spec.blocks)):
            groups[f"conv{i}"] = (f"conv{i}.w", f"conv{i}.b")
        groups["upper"] = tuple(n for n in names if not n.startswith("conv0."))
        last = len(spec.blocks) - 1
        groups["last"] = groups[f"conv{last}"]
    else:
        convex = [n for n in names
                  if (n.startswith("z") and not n.startswith("z0.") and n.endswith(".w")
                      and not n.startswith("zu")) or n == "out.wz"]
        groups["convex"] = tuple(convex)
    return groups


def init_params(spec: NetworkSpec, seed: int = 0, scheme: str = "he") -> ParamSet:
    """He-normal weights (fan-in scaled), zero biases.

    ``scheme="identity"`` sets every conv to pass its first channels
    through its centre tap, which makes a relu stack act as the identity
    on nonnegative images.
    """
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in param_shapes(spec).items():
        if is_bias(name):
            entries[name] = Tensor(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:]))
        if scheme == "identity" and len(shape) == 4:
            w = np.zeros(shape)
            c = shape[2] // 2
            for k in range(min(shape[0], shape[1])):
                w[k, k, c, c] = 1.0
        elif scheme == "he":
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        entries[name] = Tensor(w)
    if spec.residual:
        entries["proj.w"].data[...] = 0.0
    return ParamSet(entries, default_groups(spec, entries))


def project_nonnegative(params: ParamSet, group: str) -> ParamSet:
    """Copy of ``params`` with the group's entries clamped to ``max(., 0)``."""
    names = params.group(group)
    out = params.copy()
    for n in names:
        np.maximum(out.entries[n].data, 0.0, out=out.entries[n].data)
    return out


# ---------------------------------------------------------------- forward

def _act(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ad.relu(x)
    if kind == "leaky_relu":
        return ad.leaky_relu(x, 0.2)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _forward_skip(spec, p, x, trace):
    inp = x
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"skip net needs even spatial dims, got {h}x{w}")
    for i, b in enumerate(spec.blocks):
        feats = x
        first = None
        for j, s in enumerate(b.strides):
            feats = ad.conv2d(feats, p[f"b{i}.conv{j}.w"], p[f"b{i}.conv{j}.b"], stride=s)
            if b.norm:
                feats = ad.instance_norm(feats)
            feats = _act(feats, b.activation)
            if trace is not None:
                trace.append(feats.data)
            if j == 0:
                first = feats
        if any(s == 2 for s in b.strides):
            feats = ad.upsample(feats, 2, spec.upsample_mode)
        x = ad.concat([first, feats], axis=-3) if b.skip else feats
    if spec.sr_factor:
        x = ad.upsample(x, spec.sr_factor, spec.upsample_mode)
    out = ad.conv2d(x, p["proj.w"], p["proj.b"], stride=1)
    if spec.residual:
        out = ad.add(out, inp)
    if trace is not None:
        trace.append(out.data)
    return out


def _forward_small(spec, p, x, trace):
    for i, b in enumerate(spec.blocks):
        x = _act(ad.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"]), b.activation)
        if trace is not None:
            trace.append(x.data)
    return x


def _forward_ficnn(spec, p, inputs, trace):
    data, y = inputs
    data, y = ad.as_tensor(data), ad.as_tensor(y)
    if data.ndim == 1:
        data = ad.reshape(data, (1, -1))
    if y.ndim == 1:
        y = ad.reshape(y, (-1, 1)) if spec.out_channels == 1 else ad.reshape(y, (1, -1))
    if data.shape[-1] != spec.in_channels or y.shape[-1] != spec.out_channels:
        raise ShapeError(f"ficnn expects data (N,{spec.in_channels}) and proposal (N,{spec.out_channels})")

    def lin(v, name):
        return ad.matmul(v, _t(p[name]))

    z = data
    u = data
    for l in range(len(spec.hidden)):
        pre = ad.add(ad.add(lin(z, f"z{l}.w"), lin(y, f"y{l}.w")), p[f"z{l}.b"])
        if spec.partial and l > 0:
            u = ad.relu(ad.add(lin(u, f"u{l}.w"), p[f"u{l}.b"]))
            pre = ad.add(pre, lin(u, f"zu{l}.w"))
        z = ad.relu(pre)
        if trace is not None:
            trace.append(z.data)
    out = ad.add(ad.add(lin(z, "out.wz"), lin(y, "out.wy")), p["out.b"])
    return ad.reshape(out, (-1,))


def _t(w: Tensor) -> Tensor:
    """Differentiable transpose of a 2-D weight."""
    return ad._make("transpose", w.data.T, (w,), lambda g: (g.T,))


def forward(spec: NetworkSpec, params: ParamSet, x, trace: list | None = None) -> Tensor:
    """Evaluate the network; recorded on the active tape if one is open.

    For ``ficnn`` specs ``x`` is a ``(data, proposal)`` pair and the result
    is one score per row.  ``trace``, when given, collects every layer's
    output array.
    """
    if spec.kind == "ficnn":
        return _forward_ficnn(spec, params, x, trace)
    x = ad.as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-3] != spec.in_channels:
        raise ShapeError(f"{spec.kind} net expects ({spec.in_channels},H,W) input, got {x.shape}")
    if spec.kind == "skip":
        return _forward_skip(spec, params, x, trace)
    if spec.kind == "small":
        return _forward_small(spec, params, x, trace)
    raise ValueError(f"unknown network kind {spec.kind!r}")


def output_shape(spec: NetworkSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape implied by the spec alone."""
    *lead, c, h, w = in_shape
    s = spec.sr_factor or 1
    return tuple(lead) + (spec.out_channels, h * s, w * s)


def with_activation(spec: NetworkSpec, activation: str) -> NetworkSpec:
    """Same architecture with every hidden activation replaced."""
    return replace(spec, blocks=tuple(
        b if b.activation == "linear" else replace(b, activation=activation) for b in spec.blocks))

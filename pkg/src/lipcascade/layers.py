"""Neural building blocks: GRU cells and stacks, additive attention,
frame feature extraction, and the multi-context output head.

The GRU step is a single fused graph node with an analytic backward pass
(the per-gate composition would cost ~20 graph nodes per timestep, which
dominates runtime at desk scale). Its gradients are covered by the
finite-difference checker.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

from . import numerics as nm
from .errors import ConfigError, LengthError, ShapeError
from .numerics import Tensor, _sigmoid

if TYPE_CHECKING:
    from .synthdata import VideoFrames

FRAME_WINDOW = 5
FRAME_STRIDE = 2


def init_matrix(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(1, rows))
    return nm.tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_vector(dim: int) -> Tensor:
    return nm.tensor(np.zeros(dim), requires_grad=True)


@dataclass
class GRUCellParams:
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_n: Tensor
    U_n: Tensor
    b_n: Tensor

    @classmethod
    def create(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "GRUCellParams":
        return cls(
            W_r=init_matrix(rng, d_in, d_h), U_r=init_matrix(rng, d_h, d_h), b_r=init_vector(d_h),
            W_z=init_matrix(rng, d_in, d_h), U_z=init_matrix(rng, d_h, d_h), b_z=init_vector(d_h),
            W_n=init_matrix(rng, d_in, d_h), U_n=init_matrix(rng, d_h, d_h), b_n=init_vector(d_h),
        )

    @property
    def d_in(self) -> int:
        return self.W_r.shape[0]

    @property
    def d_h(self) -> int:
        return self.U_r.shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for field in ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_n", "U_n", "b_n"):
            yield f"{prefix}.{field}", getattr(self, field)


def gru_cell_step(p: GRUCellParams, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update. Reset gate multiplies the recurrent candidate term:

        r = sigmoid(x W_r + h U_r + b_r)
        z = sigmoid(x W_z + h U_z + b_z)
        n = tanh(x W_n + r * (h U_n) + b_n)
        h' = (1 - z) * n + z * h
    """
    xd, hd = x.data, h.data
    if xd.ndim != 1 or hd.ndim != 1:
        raise ShapeError(f"gru_cell_step needs vectors, got {xd.shape} and {hd.shape}")
    if xd.shape[0] != p.d_in or hd.shape[0] != p.d_h:
        raise ShapeError(
            f"gru_cell_step shapes: input {xd.shape} vs expected ({p.d_in},), "
            f"state {hd.shape} vs expected ({p.d_h},)"
        )
    Wr, Ur, br = p.W_r.data, p.U_r.data, p.b_r.data
    Wz, Uz, bz = p.W_z.data, p.U_z.data, p.b_z.data
    Wn, Un, bn = p.W_n.data, p.U_n.data, p.b_n.data
    r = _sigmoid(xd @ Wr + hd @ Ur + br)
    z = _sigmoid(xd @ Wz + hd @ Uz + bz)
    u = hd @ Un
    n = np.tanh(xd @ Wn + r * u + bn)
    out = (1.0 - z) * n + z * hd

    def vjp(g):
        dn = g * (1.0 - z)
        dz = g * (hd - n)
        da_n = dn * (1.0 - n * n)
        du = da_n * r
        dr = da_n * u
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        gx = Wr @ da_r + Wz @ da_z + Wn @ da_n if x.requires_grad else None
        gh = (
            g * z + Ur @ da_r + Uz @ da_z + Un @ du if h.requires_grad else None
        )
        return (
            gx, gh,
            np.outer(xd, da_r), np.outer(hd, da_r), da_r,
            np.outer(xd, da_z), np.outer(hd, da_z), da_z,
            np.outer(xd, da_n), np.outer(hd, du), da_n,
        )

    parents = (x, h, p.W_r, p.U_r, p.b_r, p.W_z, p.U_z, p.b_z, p.W_n, p.U_n, p.b_n)
    return nm.from_op(out, parents, vjp)


@dataclass
class EncoderStates:
    states: Tensor  # [T x d_e]
    final_state: Tensor  # [d_e]

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass
class BiGRUEncoderParams:
    layers: list[tuple[GRUCellParams, GRUCellParams]]  # (forward, backward) per layer

    @classmethod
    def create(
        cls, d_in: int, cell: int, n_layers: int, rng: np.random.Generator
    ) -> "BiGRUEncoderParams":
        layers = []
        dim = d_in
        for _ in range(n_layers):
            layers.append(
                (GRUCellParams.create(dim, cell, rng), GRUCellParams.create(dim, cell, rng))
            )
            dim = 2 * cell
        return cls(layers)

    @property
    def output_dim(self) -> int:
        return 2 * self.layers[0][0].d_h

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (fwd, bwd) in enumerate(self.layers):
            yield from fwd.named(f"{prefix}.l{i}.fwd")
            yield from bwd.named(f"{prefix}.l{i}.bwd")


def _rows(matrix: Tensor) -> list[Tensor]:
    d = matrix.shape[1]
    return [
        nm.reshape(nm.gather_rows(matrix, [t]), (d,)) for t in range(matrix.shape[0])
    ]


def encoder_forward(params: BiGRUEncoderParams, inputs: Tensor) -> EncoderStates:
    """Bidirectional multi-layer GRU over [T x d_in] inputs.

    Per-timestep output concatenates the forward and backward states;
    the final state concatenates each direction's last state (so it
    summarizes the whole sequence from both ends).
    """
    if inputs.shape[0] < 1:
        raise LengthError("encoder needs at least one input timestep")
    xs = _rows(inputs)
    final_f = final_b = None
    for fwd, bwd in params.layers:
        cell = fwd.d_h
        h = nm.tensor(np.zeros(cell))
        forward_states = []
        for x in xs:
            h = gru_cell_step(fwd, x, h)
            forward_states.append(h)
        h = nm.tensor(np.zeros(cell))
        backward_states = []
        for x in reversed(xs):
            h = gru_cell_step(bwd, x, h)
            backward_states.append(h)
        backward_states.reverse()  # align index t with input t
        xs = [nm.concat([f, b]) for f, b in zip(forward_states, backward_states)]
        final_f, final_b = forward_states[-1], backward_states[0]
    return EncoderStates(
        states=nm.stack_rows(xs), final_state=nm.concat([final_f, final_b])
    )


@dataclass
class DecoderState:
    layers: list[Tensor]

    @property
    def top(self) -> Tensor:
        return self.layers[-1]


@dataclass
class GRUDecoderParams:
    cells: list[GRUCellParams]
    bridges: list[tuple[Tensor, Tensor]]  # per-layer (W, b) from encoder final state

    @classmethod
    def create(
        cls, d_in: int, cell: int, n_layers: int, d_bridge_src: int,
        rng: np.random.Generator,
    ) -> "GRUDecoderParams":
        cells, bridges = [], []
        dim = d_in
        for _ in range(n_layers):
            cells.append(GRUCellParams.create(dim, cell, rng))
            bridges.append((init_matrix(rng, d_bridge_src, cell), init_vector(cell)))
            dim = cell
        return cls(cells, bridges)

    @property
    def d_h(self) -> int:
        return self.cells[0].d_h

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, cell in enumerate(self.cells):
            yield from cell.named(f"{prefix}.l{i}")
        for i, (w, b) in enumerate(self.bridges):
            yield f"{prefix}.bridge{i}.W", w
            yield f"{prefix}.bridge{i}.b", b


def decoder_init_state(params: GRUDecoderParams, enc_final: Tensor) -> DecoderState:
    """Learned linear bridge from the encoder's final state, one per layer."""
    return DecoderState(
        [nm.add(nm.matmul(enc_final, w), b) for w, b in params.bridges]
    )


def decoder_step(params: GRUDecoderParams, state: DecoderState, x: Tensor) -> DecoderState:
    new_layers = []
    inp = x
    for cell, h in zip(params.cells, state.layers):
        inp = gru_cell_step(cell, inp, h)
        new_layers.append(inp)
    return DecoderState(new_layers)


@dataclass
class ContextVector:
    values: Tensor  # [d_e]
    weights: Tensor  # [T]


@dataclass
class AttentionParams:
    W_dec: Tensor
    W_enc: Tensor
    v: Tensor

    @classmethod
    def create(cls, d_dec: int, d_enc: int, d_attn: int, rng) -> "AttentionParams":
        return cls(
            W_dec=init_matrix(rng, d_dec, d_attn),
            W_enc=init_matrix(rng, d_enc, d_attn),
            v=nm.tensor(
                rng.uniform(-1.0 / np.sqrt(d_attn), 1.0 / np.sqrt(d_attn), size=d_attn),
                requires_grad=True,
            ),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.W_dec", self.W_dec
        yield f"{prefix}.W_enc", self.W_enc
        yield f"{prefix}.v", self.v


def attend(p: AttentionParams, dec_top: Tensor, enc: EncoderStates) -> ContextVector:
    """Additive attention: score_j = v . tanh(W_dec s + W_enc h_j)."""
    if enc.length == 0:
        raise LengthError("attention over an empty encoder sequence")
    proj = nm.add(nm.matmul(enc.states, p.W_enc), nm.matmul(dec_top, p.W_dec))
    weights = nm.softmax(nm.matmul(nm.tanh(proj), p.v))
    values = nm.matmul(weights, enc.states)
    return ContextVector(values=values, weights=weights)


@dataclass
class OutputHeadParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    n_contexts: int

    @classmethod
    def create(
        cls, d_dec: int, ctx_dims: Sequence[int], d_out: int, vocab_size: int, rng
    ) -> "OutputHeadParams":
        d_cat = d_dec + sum(ctx_dims)
        return cls(
            W1=init_matrix(rng, d_cat, d_out),
            b1=init_vector(d_out),
            W2=init_matrix(rng, d_out, vocab_size),
            b2=init_vector(vocab_size),
            n_contexts=len(ctx_dims),
        )

    @property
    def vocab_size(self) -> int:
        return self.W2.shape[1]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for field in ("W1", "b1", "W2", "b2"):
            yield f"{prefix}.{field}", getattr(self, field)


def output_head(
    p: OutputHeadParams, dec: DecoderState, contexts: Sequence[ContextVector]
) -> tuple[Tensor, Tensor]:
    """Fuse decoder top state with 1..3 contexts; return (hidden, log-probs).

    The pre-softmax hidden vector is exposed because the joint cascade
    feeds it into the next stage's encoder.
    """
    if len(contexts) != p.n_contexts:
        raise ConfigError(
            f"head configured for {p.n_contexts} contexts, got {len(contexts)}"
        )
    cat = nm.concat([dec.top] + [c.values for c in contexts])
    hidden = nm.tanh(nm.add(nm.matmul(cat, p.W1), p.b1))
    log_probs = nm.log_softmax(nm.add(nm.matmul(hidden, p.W2), p.b2))
    return hidden, log_probs


@dataclass
class FrameFeatureParams:
    """Window of 5 frames, stride 2, to one feature vector per window.

    Vector inputs go through a single linear map of the flattened window.
    Image inputs go through two conv layers (the 5 frames act as input
    channels) followed by global average pooling.
    """

    kind: str  # "vector" | "image"
    W: Tensor | None = None
    b: Tensor | None = None
    k1: Tensor | None = None
    b1: Tensor | None = None
    k2: Tensor | None = None
    b2: Tensor | None = None

    @classmethod
    def create_vector(cls, frame_dim: int, d_v: int, rng) -> "FrameFeatureParams":
        return cls(
            kind="vector",
            W=init_matrix(rng, FRAME_WINDOW * frame_dim, d_v),
            b=init_vector(d_v),
        )

    @staticmethod
    def _conv(rng, cout: int, cin: int, k: int = 3) -> Tensor:
        bound = 1.0 / np.sqrt(cin * k * k)
        return nm.tensor(
            rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True
        )

    @property
    def output_dim(self) -> int:
        if self.kind == "vector":
            return self.W.shape[1]
        return self.k2.shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        fields = ("W", "b") if self.kind == "vector" else ("k1", "b1", "k2", "b2")
        for field in fields:
            yield f"{prefix}.{field}", getattr(self, field)


def make_frame_feature_params(
    frame_dim: int, d_v: int, rng, image_shape: tuple[int, int] | None = None,
    mid_channels: int = 8,
) -> FrameFeatureParams:
    if image_shape is None:
        return FrameFeatureParams.create_vector(frame_dim, d_v, rng)
    return FrameFeatureParams(
        kind="image",
        k1=FrameFeatureParams._conv(rng, mid_channels, FRAME_WINDOW),
        b1=init_vector(mid_channels),
        k2=FrameFeatureParams._conv(rng, d_v, mid_channels),
        b2=init_vector(d_v),
    )


def frame_window_count(n_frames: int) -> int:
    return (n_frames - FRAME_WINDOW) // FRAME_STRIDE + 1


def frame_features(params: FrameFeatureParams, frames: "VideoFrames") -> Tensor:
    """Extract one feature vector per 5-frame window (stride 2).

    Frames beyond the last full window are dropped. The frame tensor is a
    constant; gradients flow only into the extractor parameters.
    """
    n = frames.data.shape[0]
    if n < FRAME_WINDOW:
        raise LengthError(f"need at least {FRAME_WINDOW} frames, got {n}")
    count = frame_window_count(n)
    if params.kind == "vector":
        flat = np.stack(
            [
                frames.data[t * FRAME_STRIDE : t * FRAME_STRIDE + FRAME_WINDOW].reshape(-1)
                for t in range(count)
            ]
        )
        return nm.add(nm.matmul(nm.tensor(flat), params.W), params.b)
    h, w = frames.image_shape
    rows = []
    for t in range(count):
        window = frames.data[t * FRAME_STRIDE : t * FRAME_STRIDE + FRAME_WINDOW]
        x = nm.tensor(window.reshape(FRAME_WINDOW, h, w))
        hid = nm.tanh(nm.conv2d(x, params.k1, params.b1))
        hid = nm.tanh(nm.conv2d(hid, params.k2, params.b2))
        rows.append(nm.mean_spatial(hid))
    return nm.stack_rows(rows)

"""Recurrent building blocks: LSTM cell, bidirectional encoder, autoregressive
decoder and the dense inverse head.

Parameters are plain frozen dataclasses of tensors so that the same bundle can
be evaluated, differentiated and serialized without an ``nn.Module`` wrapper.
All ops accept an optional leading batch dimension.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

CANDIDATE_ACTIVATIONS = ("tanh", "sigmoid")
HEAD_ACTIVATIONS = ("relu", "tanh", "identity")


class ContractError(ValueError):
    """Raised when shapes or arguments violate an op's preconditions."""


@dataclass(frozen=True)
class DenseParams:
    weight: torch.Tensor  # (out_dim, in_dim)
    bias: torch.Tensor  # (out_dim,)

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ContractError(
                f"dense weight {tuple(self.weight.shape)} incompatible with bias {tuple(self.bias.shape)}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"dense layer expects last dim {self.in_dim}, got {x.shape[-1]}")
        return x @ self.weight.T + self.bias


@dataclass(frozen=True)
class LSTMCellParams:
    """Gate weights act on the concatenation ``[input; h_prev]``."""

    w_i: torch.Tensor
    w_f: torch.Tensor
    w_g: torch.Tensor
    w_o: torch.Tensor
    b_i: torch.Tensor
    b_f: torch.Tensor
    b_g: torch.Tensor
    b_o: torch.Tensor

    def __post_init__(self):
        shape = self.w_i.shape
        if len(shape) != 2 or shape[1] < shape[0]:
            raise ContractError(f"gate weight must be H x (D_in + H), got {tuple(shape)}")
        for name in ("w_f", "w_g", "w_o"):
            if getattr(self, name).shape != shape:
                raise ContractError(f"{name} shape {tuple(getattr(self, name).shape)} != {tuple(shape)}")
        for name in ("b_i", "b_f", "b_g", "b_o"):
            if getattr(self, name).shape != (shape[0],):
                raise ContractError(f"{name} must have shape ({shape[0]},)")

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[1] - self.w_i.shape[0]

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return ``(w_ih, w_hh, bias)`` in i, f, g, o order (torch's gate layout)."""
        d = self.input_dim
        w = torch.cat([self.w_i, self.w_f, self.w_g, self.w_o], dim=0)
        b = torch.cat([self.b_i, self.b_f, self.b_g, self.b_o], dim=0)
        return w[:, :d], w[:, d:], b


@dataclass(frozen=True)
class LSTMState:
    h: torch.Tensor
    c: torch.Tensor


@dataclass(frozen=True)
class EncoderParams:
    forward_cell: LSTMCellParams
    backward_cell: LSTMCellParams

    def __post_init__(self):
        f, b = self.forward_cell, self.backward_cell
        if (f.hidden_size, f.input_dim) != (b.hidden_size, b.input_dim):
            raise ContractError("forward and backward cells must share hidden size and input dim")


@dataclass(frozen=True)
class DecoderParams:
    cell: LSTMCellParams
    projection: DenseParams  # H -> D_x + 1
    start_token: torch.Tensor  # (D_x + 1,)

    def __post_init__(self):
        if self.projection.in_dim != self.cell.hidden_size:
            raise ContractError("decoder projection input must equal the cell hidden size")
        if self.projection.out_dim != self.cell.input_dim or self.start_token.shape != (self.cell.input_dim,):
            raise ContractError("decoder emits rows of the cell's input width")


@dataclass(frozen=True)
class InverseHeadParams:
    hidden: DenseParams
    output: DenseParams
    activation: str = "relu"

    def __post_init__(self):
        if self.output.in_dim != self.hidden.out_dim:
            raise ContractError("inverse head layers do not compose")
        if self.activation not in HEAD_ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelParams:
    encoder: EncoderParams
    decoder: DecoderParams
    inverse_head: InverseHeadParams

    @property
    def hidden_size(self) -> int:
        return self.encoder.forward_cell.hidden_size

    @property
    def sequence_width(self) -> int:
        return self.encoder.forward_cell.input_dim

    @property
    def characteristic_dim(self) -> int:
        return self.inverse_head.output.out_dim


# ----------------------------------------------------------------------------
# Parameter trees


def named_tensors(params, prefix: str = "") -> dict[str, torch.Tensor]:
    """Flatten a parameter dataclass into ``{"encoder.forward_cell.w_i": tensor, ...}``."""
    out: dict[str, torch.Tensor] = {}
    for field in dataclasses.fields(params):
        value = getattr(params, field.name)
        name = f"{prefix}{field.name}"
        if isinstance(value, torch.Tensor):
            out[name] = value
        elif dataclasses.is_dataclass(value):
            out.update(named_tensors(value, prefix=name + "."))
    return out


def replace_tensors(params, tensors: Mapping[str, torch.Tensor], prefix: str = ""):
    """Rebuild ``params`` with tensors taken from ``tensors`` (same naming as :func:`named_tensors`)."""
    changes = {}
    for field in dataclasses.fields(params):
        value = getattr(params, field.name)
        name = f"{prefix}{field.name}"
        if isinstance(value, torch.Tensor):
            new = tensors[name]
            if new.shape != value.shape:
                raise ContractError(f"{name}: shape {tuple(new.shape)} != {tuple(value.shape)}")
            changes[field.name] = new
        elif dataclasses.is_dataclass(value):
            changes[field.name] = replace_tensors(value, tensors, prefix=name + ".")
    return dataclasses.replace(params, **changes)


def map_tensors(params, fn: Callable[[torch.Tensor], torch.Tensor]):
    return replace_tensors(params, {k: fn(v) for k, v in named_tensors(params).items()})


# ----------------------------------------------------------------------------
# Initialization


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_cell(rng: np.random.Generator, input_dim: int, hidden: int, dtype=torch.float32) -> LSTMCellParams:
    fan_in = input_dim + hidden
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return LSTMCellParams(
        w_i=t(_uniform(rng, (hidden, fan_in), fan_in)),
        w_f=t(_uniform(rng, (hidden, fan_in), fan_in)),
        w_g=t(_uniform(rng, (hidden, fan_in), fan_in)),
        w_o=t(_uniform(rng, (hidden, fan_in), fan_in)),
        b_i=t(_uniform(rng, hidden, fan_in)),
        b_f=t(np.ones(hidden)),
        b_g=t(_uniform(rng, hidden, fan_in)),
        b_o=t(_uniform(rng, hidden, fan_in)),
    )


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int, dtype=torch.float32) -> DenseParams:
    return DenseParams(
        weight=torch.as_tensor(_uniform(rng, (out_dim, in_dim), in_dim), dtype=dtype),
        bias=torch.as_tensor(_uniform(rng, out_dim, in_dim), dtype=dtype),
    )


def init_model(
    seed: int,
    sequence_width: int,
    hidden_size: int,
    characteristic_dim: int,
    inverse_hidden: int | None = None,
    activation: str = "relu",
    dtype=torch.float32,
) -> ModelParams:
    """Draw a fresh parameter bundle; identical arguments give identical tensors."""
    rng = np.random.default_rng(seed)
    inverse_hidden = inverse_hidden or hidden_size
    encoder = EncoderParams(
        forward_cell=init_cell(rng, sequence_width, hidden_size, dtype),
        backward_cell=init_cell(rng, sequence_width, hidden_size, dtype),
    )
    decoder = DecoderParams(
        cell=init_cell(rng, sequence_width, hidden_size, dtype),
        projection=init_dense(rng, hidden_size, sequence_width, dtype),
        start_token=torch.zeros(sequence_width, dtype=dtype),
    )
    head = InverseHeadParams(
        hidden=init_dense(rng, hidden_size, inverse_hidden, dtype),
        output=init_dense(rng, inverse_hidden, characteristic_dim, dtype),
        activation=activation,
    )
    return ModelParams(encoder, decoder, head)


# ----------------------------------------------------------------------------
# Ops


def lstm_cell_step(
    params: LSTMCellParams,
    x: torch.Tensor,
    state: LSTMState,
    candidate: str = "tanh",
) -> LSTMState:
    """One LSTM update. ``candidate`` selects the nonlinearity of the g gate."""
    if x.shape[-1] != params.input_dim:
        raise ContractError(f"input width {x.shape[-1]} != cell input dim {params.input_dim}")
    if state.h.shape[-1] != params.hidden_size or state.c.shape[-1] != params.hidden_size:
        raise ContractError(f"state width must be {params.hidden_size}")
    if candidate not in CANDIDATE_ACTIVATIONS:
        raise ContractError(f"unknown candidate activation {candidate!r}")
    xh = torch.cat([x, state.h], dim=-1)
    i = torch.sigmoid(xh @ params.w_i.T + params.b_i)
    f = torch.sigmoid(xh @ params.w_f.T + params.b_f)
    g_pre = xh @ params.w_g.T + params.b_g
    g = torch.tanh(g_pre) if candidate == "tanh" else torch.sigmoid(g_pre)
    o = torch.sigmoid(xh @ params.w_o.T + params.b_o)
    c = f * state.c + i * g
    h = o * torch.tanh(c)
    return LSTMState(h, c)


def _fused_weights(cell: LSTMCellParams) -> list[torch.Tensor]:
    w_ih, w_hh, b = cell.stacked()
    return [w_ih, w_hh, b, torch.zeros_like(b)]


def _fused_run(x, h0, c0, weights, bidirectional: bool):
    # torch.lstm(input, hx, flat_weights, has_biases, num_layers, dropout, train, bidirectional, batch_first)
    return torch.lstm(x, (h0, c0), weights, True, 1, 0.0, False, bidirectional, True)


def _as_batch(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == ndim:
        return x.unsqueeze(0), True
    if x.dim() == ndim + 1:
        return x, False
    raise ContractError(f"expected {ndim}-d input (optionally batched), got shape {tuple(x.shape)}")


def _run_cell(cell: LSTMCellParams, seq: torch.Tensor, state: LSTMState, candidate: str) -> LSTMState:
    for t in range(seq.shape[1]):
        state = lstm_cell_step(cell, seq[:, t], state, candidate)
    return state


def encode(
    params: EncoderParams,
    sequence: torch.Tensor,
    candidate: str = "tanh",
    fused: bool = True,
) -> torch.Tensor:
    """Embed ``sequence`` (W x D or B x W x D) as the sum of forward and backward final hidden states."""
    seq, squeeze = _as_batch(sequence, 2)
    if seq.shape[1] < 1:
        raise ContractError("cannot encode an empty sequence")
    fc, bc = params.forward_cell, params.backward_cell
    if seq.shape[2] != fc.input_dim:
        raise ContractError(f"row width {seq.shape[2]} != encoder input dim {fc.input_dim}")
    if fused and candidate == "tanh":
        zeros = seq.new_zeros(2, seq.shape[0], fc.hidden_size)
        _, h_n, _ = _fused_run(seq, zeros, zeros, _fused_weights(fc) + _fused_weights(bc), bidirectional=True)
        h = h_n[0] + h_n[1]
    else:
        zeros = seq.new_zeros(seq.shape[0], fc.hidden_size)
        h_f = _run_cell(fc, seq, LSTMState(zeros, zeros), candidate).h
        h_b = _run_cell(bc, seq.flip(1), LSTMState(zeros, zeros), candidate).h
        h = h_f + h_b
    return h[0] if squeeze else h


def decode(
    params: DecoderParams,
    embedding: torch.Tensor,
    length: int,
    candidate: str = "tanh",
    fused: bool = True,
) -> torch.Tensor:
    """Generate ``length`` rows from ``embedding`` feeding each emitted row back as the next input.

    The embedding seeds the hidden state, the cell state starts at zero and
    the first input is the learned start token.
    """
    if length < 1:
        raise ContractError("decode length must be >= 1")
    emb, squeeze = _as_batch(embedding, 1)
    cell = params.cell
    if emb.shape[1] != cell.hidden_size:
        raise ContractError(f"embedding dim {emb.shape[1]} != decoder hidden size {cell.hidden_size}")
    batch = emb.shape[0]
    start = params.start_token.expand(batch, -1)
    state = lstm_cell_step(cell, start, LSTMState(emb, torch.zeros_like(emb)), candidate)
    if fused and candidate == "tanh" and length > 1:
        # next input = P h + b_p, so the gates see (W_h + W_x P) h + (b + W_x b_p)
        w_ih, w_hh, b = cell.stacked()
        proj = params.projection
        weights = [w_ih.new_zeros(w_ih.shape[0], 1), w_hh + w_ih @ proj.weight, b + w_ih @ proj.bias, torch.zeros_like(b)]
        inputs = emb.new_zeros(batch, length - 1, 1)
        hs, _, _ = _fused_run(inputs, state.h[None], state.c[None], weights, bidirectional=False)
        hidden = torch.cat([state.h[:, None], hs], dim=1)
        out = proj(hidden)
    else:
        rows = [params.projection(state.h)]
        for _ in range(length - 1):
            state = lstm_cell_step(cell, rows[-1], state, candidate)
            rows.append(params.projection(state.h))
        out = torch.stack(rows, dim=1)
    return out[0] if squeeze else out


def _activate(x: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "relu":
        return torch.relu(x)
    if activation == "tanh":
        return torch.tanh(x)
    return x


def inverse_head(params: InverseHeadParams, embedding: torch.Tensor) -> torch.Tensor:
    """Map embeddings to characteristic estimates through one hidden layer."""
    if embedding.shape[-1] != params.hidden.in_dim:
        raise ContractError(f"embedding dim {embedding.shape[-1]} != head input dim {params.hidden.in_dim}")
    return params.output(_activate(params.hidden(embedding), params.activation))


def gradients(loss_fn: Callable[[object], torch.Tensor], params) -> dict[str, torch.Tensor]:
    """Reverse-mode derivatives of a scalar ``loss_fn(params)`` w.r.t. every tensor in ``params``.

    Parameters the loss does not reach get zero gradients.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in named_tensors(params).items()}
    loss = loss_fn(replace_tensors(params, leaves))
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractError("loss must be a scalar tensor")
    names = list(leaves)
    if not loss.requires_grad:
        return {k: torch.zeros_like(v) for k, v in leaves.items()}
    grads = torch.autograd.grad(loss.reshape(()), [leaves[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(leaves[k]) if g is None else g) for k, g in zip(names, grads)}


# ----------------------------------------------------------------------------
# Binary container
#
# Layout: b"KGSSLBIN" | u32 format version | u64 header length | JSON header | array bytes.
# The header lists every array as {name, dtype, shape, offset, nbytes}; offsets are
# relative to the first byte after the header. Arrays are stored little-endian, C order.

MAGIC = b"KGSSLBIN"
FORMAT_VERSION = 1


def write_container(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": dict(meta or {}), "arrays": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ContractError(f"{path}: not a KGSSL container")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version > FORMAT_VERSION:
        raise ContractError(f"{path}: container version {version} is newer than supported {FORMAT_VERSION}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen])
    body = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = body + e["offset"]
        arrays[e["name"]] = np.frombuffer(data[lo : lo + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def params_to_arrays(params, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in named_tensors(params).items()}


def params_from_arrays(template, arrays: Mapping[str, np.ndarray], prefix: str = "", dtype=None):
    names = named_tensors(template)
    tensors = {}
    for k, v in names.items():
        a = arrays[prefix + k]
        tensors[k] = torch.as_tensor(a, dtype=dtype or v.dtype)
    return replace_tensors(template, tensors)

"""Decoder-only transformer whose forward pass accepts subnetwork masks.

GPT-2 style wiring: learned absolute positions, pre-LayerNorm residual
blocks, causal attention, tied input/output embeddings, no biases on
the projections. Head and MLP-column subsets are realized by gathering
parameter slices, so a sampled step genuinely does less compute; the
full-mask path and the no-mask path run the identical operation
sequence and agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Tensor, add, constant, cross_entropy, embedding_lookup, gelu, layer_norm, matmul, parameter, scale, softmax_rows, take_columns, transpose
from .errors import ConfigError, InvalidMaskError
from .sampler import SubnetworkMask, round_to_count

ATTENTION_MASK_VALUE = -1e9  # large finite negative keeps softmax inputs finite


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture hyperparameters."""

    n_layers: int
    n_heads: int
    head_dim: int
    hidden: int
    mlp_inner: int
    vocab: int
    seq_len: int

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "hidden", "mlp_inner", "vocab", "seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {v!r}")
        if self.seq_len < 2:
            raise ConfigError(f"model.seq_len must be >= 2 for next-token targets, got {self.seq_len}")


class Model:
    """Parameters plus the masked forward computation.

    Per-head projections are stored as separate tensors so a head subset
    is gathered by picking list elements; W1/W2 are stored [hidden, mlp_inner]
    so a column subset is a single axis-1 gather.
    """

    def __init__(self, config: ModelConfig, init_rng: np.random.Generator | None = None):
        self.config = config
        self.dtype = core.default_dtype()
        c = config
        if init_rng is None:
            init_rng = np.random.Generator(np.random.Philox(key=np.array([0, 0], dtype=np.uint64)))

        def normal(*shape, std=0.02):
            return parameter(init_rng.normal(0.0, std, size=shape), dtype=self.dtype)

        # Residual-facing projections are damped so the stream's variance
        # stays bounded as depth grows.
        res_std = 0.02 / math.sqrt(2 * c.n_layers)

        self.wte = normal(c.vocab, c.hidden)
        self.wpe = normal(c.seq_len, c.hidden)
        self.blocks = []
        for _ in range(c.n_layers):
            blk = {
                "ln1_g": parameter(np.ones(c.hidden), dtype=self.dtype),
                "ln1_b": parameter(np.zeros(c.hidden), dtype=self.dtype),
                "w_q": [normal(c.hidden, c.head_dim) for _ in range(c.n_heads)],
                "w_k": [normal(c.hidden, c.head_dim) for _ in range(c.n_heads)],
                "w_v": [normal(c.hidden, c.head_dim) for _ in range(c.n_heads)],
                "w_o": [normal(c.head_dim, c.hidden, std=res_std) for _ in range(c.n_heads)],
                "ln2_g": parameter(np.ones(c.hidden), dtype=self.dtype),
                "ln2_b": parameter(np.zeros(c.hidden), dtype=self.dtype),
                "w1": normal(c.hidden, c.mlp_inner),
                "w2": normal(c.hidden, c.mlp_inner, std=res_std),
            }
            self.blocks.append(blk)
        self.lnf_g = parameter(np.ones(c.hidden), dtype=self.dtype)
        self.lnf_b = parameter(np.zeros(c.hidden), dtype=self.dtype)

        causal = np.zeros((c.seq_len, c.seq_len), dtype=self.dtype)
        causal[np.triu_indices(c.seq_len, k=1)] = ATTENTION_MASK_VALUE
        self._causal = causal
        self._attn_scale = 1.0 / math.sqrt(c.head_dim)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        """(name, tensor) pairs in fixed declaration order."""
        yield "wte", self.wte
        yield "wpe", self.wpe
        for l, blk in enumerate(self.blocks):
            yield f"blocks.{l}.ln1_g", blk["ln1_g"]
            yield f"blocks.{l}.ln1_b", blk["ln1_b"]
            for i in range(self.config.n_heads):
                yield f"blocks.{l}.w_q.{i}", blk["w_q"][i]
                yield f"blocks.{l}.w_k.{i}", blk["w_k"][i]
                yield f"blocks.{l}.w_v.{i}", blk["w_v"][i]
                yield f"blocks.{l}.w_o.{i}", blk["w_o"][i]
            yield f"blocks.{l}.ln2_g", blk["ln2_g"]
            yield f"blocks.{l}.ln2_b", blk["ln2_b"]
            yield f"blocks.{l}.w1", blk["w1"]
            yield f"blocks.{l}.w2", blk["w2"]
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def n_parameters(self):
        return sum(t.data.size for t in self.parameters())

    def get_flat(self) -> np.ndarray:
        """All parameters concatenated in declaration order."""
        return np.concatenate([t.data.reshape(-1) for t in self.parameters()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=self.dtype)
        if flat.size != self.n_parameters():
            raise ConfigError(f"parameter payload has {flat.size} floats, model needs {self.n_parameters()}")
        off = 0
        for t in self.parameters():
            n = t.data.size
            t.data[...] = flat[off:off + n].reshape(t.data.shape)
            off += n

    def zero_grads(self):
        core.zero_grads(self.parameters())

    # -- forward --------------------------------------------------------------

    def _check_heads(self, heads, p_heads):
        n = self.config.n_heads
        if len(heads) == 0:
            raise InvalidMaskError("head set is empty")
        if list(heads) != sorted(set(heads)) or heads[0] < 0 or heads[-1] >= n:
            raise InvalidMaskError(f"head set {heads} invalid for {n} heads")
        if len(heads) != round_to_count(p_heads, n):
            raise InvalidMaskError(
                f"head set size {len(heads)} inconsistent with rate {p_heads} over {n} heads"
            )

    def _check_cols(self, cols, p_mlp):
        n = self.config.mlp_inner
        if len(cols) == 0:
            raise InvalidMaskError("mlp column set is empty")
        if list(cols) != sorted(set(cols)) or cols[0] < 0 or cols[-1] >= n:
            raise InvalidMaskError(f"mlp column set invalid for {n} columns")
        if len(cols) != round_to_count(p_mlp, n):
            raise InvalidMaskError(
                f"mlp column set size {len(cols)} inconsistent with rate {p_mlp} over {n} columns"
            )

    def mha_forward(self, x: Tensor, layer: int, heads=None, p_heads: float = 1.0) -> Tensor:
        """Causal multi-head attention over the given head subset.

        The head sum is divided by the realized fraction |heads|/n_heads so
        its expectation over uniform subsets equals the full-head output.
        """
        blk = self.blocks[layer]
        n_heads = self.config.n_heads
        if heads is None:
            heads = range(n_heads)
        else:
            self._check_heads(heads, p_heads)
        n = x.data.shape[-2]
        mask = constant(self._causal[:n, :n], dtype=self.dtype)
        acc = None
        for i in heads:
            q = matmul(x, blk["w_q"][i])
            k = matmul(x, blk["w_k"][i])
            v = matmul(x, blk["w_v"][i])
            s = add(scale(matmul(q, transpose(k)), self._attn_scale), mask)
            h = matmul(softmax_rows(s), v)
            o = matmul(h, blk["w_o"][i])
            acc = o if acc is None else add(acc, o)
        factor = n_heads / len(heads)
        if factor != 1.0:
            acc = scale(acc, factor)
        return acc

    def mlp_forward(self, x: Tensor, layer: int, cols=None, p_mlp: float = 1.0) -> Tensor:
        """Two-matmul MLP over the given intermediate-column subset."""
        blk = self.blocks[layer]
        n_mlp = self.config.mlp_inner
        if cols is None:
            w1, w2 = blk["w1"], blk["w2"]
            k = n_mlp
        else:
            self._check_cols(cols, p_mlp)
            idx = np.asarray(cols, dtype=np.int64)
            w1 = take_columns(blk["w1"], idx)
            w2 = take_columns(blk["w2"], idx)
            k = len(cols)
        out = matmul(gelu(matmul(x, w1)), transpose(w2))
        factor = n_mlp / k
        if factor != 1.0:
            out = scale(out, factor)
        return out

    def layer_forward(self, x: Tensor, layer: int, mask: SubnetworkMask | None = None) -> Tensor:
        """One residual block; a layer outside the mask is the identity."""
        if not 0 <= layer < self.config.n_layers:
            raise ConfigError(f"layer {layer} outside [0, {self.config.n_layers})")
        if mask is None:
            heads = cols = None
            p_h = p_m = 1.0
        else:
            if layer not in mask.layer_set:
                return x  # skipped layers pass activations through untouched
            heads = mask.head_sets[layer]
            cols = mask.mlp_sets[layer]
            p_h, p_m = mask.rates[0], mask.rates[1]
        blk = self.blocks[layer]
        a = self.mha_forward(layer_norm(x, blk["ln1_g"], blk["ln1_b"]), layer, heads, p_h)
        x = add(x, a)
        m = self.mlp_forward(layer_norm(x, blk["ln2_g"], blk["ln2_b"]), layer, cols, p_m)
        return add(x, m)

    def forward(self, tokens, mask: SubnetworkMask | None = None) -> Tensor:
        """Logits for a [N] sequence or a [B, N] batch of sequences."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim not in (1, 2):
            raise ConfigError(f"tokens must be a sequence or batch of sequences, got shape {tokens.shape}")
        n = tokens.shape[-1]
        if n > self.config.seq_len:
            raise ConfigError(f"sequence length {n} exceeds configured maximum {self.config.seq_len}")
        if mask is not None:
            mask.validate()
            if mask.dims != (self.config.n_layers, self.config.n_heads, self.config.mlp_inner):
                raise InvalidMaskError(f"mask dims {mask.dims} do not match this model")
        x = add(embedding_lookup(self.wte, tokens), embedding_lookup(self.wpe, np.arange(n)))
        for layer in range(self.config.n_layers):
            x = self.layer_forward(x, layer, mask)
        x = layer_norm(x, self.lnf_g, self.lnf_b)
        return matmul(x, transpose(self.wte))

    def loss(self, tokens, targets, mask: SubnetworkMask | None = None) -> Tensor:
        """Mean next-token cross entropy in nats."""
        return cross_entropy(self.forward(tokens, mask), targets)

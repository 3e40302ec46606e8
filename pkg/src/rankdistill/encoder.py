"""Miniature trainable transformer encoder with exposed attention maps.

One :class:`EncoderModel` instance serves as the shared query/passage
encoder for the metric- and late-interaction heads; a second instance,
built with a scoring head, consumes joint query+passage sequences and
emits a scalar relevance from its [CLS] state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    SequenceLengthError,
)
from .rng import RngState
from .tensor import (
    Tensor,
    add,
    concat,
    div,
    dot,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
    scale,
    softmax,
    sum_along,
    transpose,
)

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
N_SPECIAL_TOKENS = 3

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 1024
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size <= N_SPECIAL_TOKENS:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no content tokens")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TokenSequence:
    """Token ids with explicit real length; index 0 is [CLS], segments end in [SEP].

    ``token_ids`` may carry trailing padding beyond ``length``; encoders
    operate on the unpadded prefix only, so padding can never leak
    attention mass into real positions.
    """

    token_ids: list[int]
    length: int
    kind: str  # query | passage | joint
    segment_lengths: tuple[int, int] | None = None  # joint only: content (l, k)

    def __post_init__(self):
        if self.kind not in ("query", "passage", "joint"):
            raise ContractError(f"unknown sequence kind {self.kind!r}")
        if self.length < 3 or self.length > len(self.token_ids):
            raise ContractError(
                f"length {self.length} inconsistent with {len(self.token_ids)} token ids"
            )
        if self.token_ids[0] != CLS_ID:
            raise ContractError("sequence must start with the [CLS] id")
        if self.token_ids[self.length - 1] != SEP_ID:
            raise ContractError("sequence must end with a [SEP] id")
        if self.kind == "joint" and self.segment_lengths is None:
            raise ContractError("joint sequences need segment_lengths")

    @classmethod
    def for_query(cls, tokens: list[int]) -> "TokenSequence":
        return cls([CLS_ID, *tokens, SEP_ID], len(tokens) + 2, "query")

    @classmethod
    def for_passage(cls, tokens: list[int]) -> "TokenSequence":
        return cls([CLS_ID, *tokens, SEP_ID], len(tokens) + 2, "passage")

    @classmethod
    def joint(cls, query: "TokenSequence", passage: "TokenSequence") -> "TokenSequence":
        """[CLS] q_1..q_l [SEP] p_1..p_k [SEP] from two single-segment sequences."""
        q_tokens = query.content_ids()
        p_tokens = passage.content_ids()
        ids = [CLS_ID, *q_tokens, SEP_ID, *p_tokens, SEP_ID]
        return cls(ids, len(ids), "joint", segment_lengths=(len(q_tokens), len(p_tokens)))

    def content_ids(self) -> list[int]:
        if self.kind == "joint":
            raise ContractError("content_ids is only defined for single-segment sequences")
        return self.token_ids[1 : self.length - 1]

    def content_range(self) -> tuple[int, int]:
        """Row range [start, stop) of content tokens within the encoded output."""
        return (1, self.length - 1)


@dataclass
class EncodedSequence:
    """Per-token representations plus the [CLS] vector and final attention maps."""

    token_reps: Tensor  # (length, d_model)
    cls_rep: Tensor  # (d_model,)
    attn_maps: list[Tensor]  # n_heads tensors of shape (length, length), post-softmax
    content_range: tuple[int, int]

    def content_reps(self) -> Tensor:
        start, stop = self.content_range
        return narrow(self.token_reps, 0, start, stop - start)

    @property
    def n_content(self) -> int:
        start, stop = self.content_range
        return stop - start

    def attn_array(self) -> np.ndarray:
        """Stacked (n_heads, length, length) view of the attention maps."""
        return np.stack([m.data for m in self.attn_maps])


@dataclass
class CrossOutput:
    """Scalar relevance plus the joint-sequence attention maps."""

    score: Tensor  # scalar
    attn_maps: list[Tensor]
    query_len: int  # l, content tokens
    passage_len: int  # k, content tokens
    encoded: EncodedSequence


def _parameter_shapes(config: EncoderConfig, scoring_head: bool) -> dict[str, tuple[int, ...]]:
    d, dff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for i in range(config.n_layers):
        prefix = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[prefix + name] = (d, d)
        # no key bias: it shifts every attention row uniformly, which the
        # row softmax cancels, so it would be an inert parameter
        for name in ("bq", "bv", "bo"):
            shapes[prefix + name] = (d,)
        shapes[prefix + "ln1_g"] = (d,)
        shapes[prefix + "ln1_b"] = (d,)
        shapes[prefix + "w1"] = (d, dff)
        shapes[prefix + "b1"] = (dff,)
        shapes[prefix + "w2"] = (dff, d)
        shapes[prefix + "b2"] = (d,)
        shapes[prefix + "ln2_g"] = (d,)
        shapes[prefix + "ln2_b"] = (d,)
    if scoring_head:
        shapes["score_w"] = (d,)
        shapes["score_b"] = ()
    return shapes


class EncoderModel:
    """Transformer encoder parameters plus the forward passes that use them."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor], scoring_head: bool):
        expected = _parameter_shapes(config, scoring_head)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if params[name].data.shape != shape:
                raise ContractError(
                    f"parameter {name} has shape {params[name].data.shape}, expected {shape}"
                )
        self.config = config
        self.params = params
        self.scoring_head = scoring_head

    @classmethod
    def initialize(
        cls,
        config: EncoderConfig,
        rng: RngState,
        scoring_head: bool = False,
        init_scale: float = 0.02,
    ) -> "EncoderModel":
        """Gaussian init for weights, ones/zeros for the norms and biases."""
        params: dict[str, Tensor] = {}
        for name, shape in _parameter_shapes(config, scoring_head).items():
            leaf = name.split(".")[-1]
            if leaf.endswith("ln1_g") or leaf.endswith("ln2_g") or leaf == "emb_ln_g":
                data = np.ones(shape)
            elif leaf.startswith("b") or leaf.endswith("_b"):
                data = np.zeros(shape)
            else:
                n = int(np.prod(shape)) if shape else 1
                data = rng.normal(n).reshape(shape) * init_scale
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params, scoring_head)

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def fingerprint(self) -> str:
        """Hash of config plus parameter values; identifies a trained state."""
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        h.update(str(self.scoring_head).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- forward passes ----------------------------------------------------

    def encode(
        self,
        seq: TokenSequence,
        rng: RngState | None = None,
        train_mode: bool = False,
    ) -> EncodedSequence:
        """Run the encoder over the unpadded prefix of ``seq``.

        Deterministic given (parameters, sequence, rng, train_mode); with
        train_mode off dropout is disabled and ``rng`` may be None.
        """
        cfg = self.config
        if seq.length > cfg.max_len:
            raise SequenceLengthError(
                f"sequence length {seq.length} exceeds max_len {cfg.max_len}"
            )
        use_dropout = train_mode and cfg.dropout_p > 0.0
        if use_dropout and rng is None:
            raise ContractError("training-mode encode needs an rng for dropout")

        ids = seq.token_ids[: seq.length]
        x = embedding(self.params["tok_emb"], ids)
        x = add(x, narrow(self.params["pos_emb"], 0, 0, seq.length))
        x = layer_norm(x, self.params["emb_ln_g"], self.params["emb_ln_b"])
        if use_dropout:
            x = dropout(x, cfg.dropout_p, rng)

        maps: list[Tensor] = []
        for i in range(cfg.n_layers):
            x, maps = self._layer(i, x, rng if use_dropout else None)

        cls_rep = reshape(narrow(x, 0, 0, 1), (cfg.d_model,))
        return EncodedSequence(
            token_reps=x,
            cls_rep=cls_rep,
            attn_maps=maps,
            content_range=seq.content_range(),
        )

    def _layer(self, i: int, x: Tensor, rng: RngState | None) -> tuple[Tensor, list[Tensor]]:
        cfg = self.config
        pm = self.params
        prefix = f"layer{i}."
        inv_sqrt_dh = 1.0 / math.sqrt(cfg.d_head)

        q = add(matmul(x, pm[prefix + "wq"]), pm[prefix + "bq"])
        k = matmul(x, pm[prefix + "wk"])
        v = add(matmul(x, pm[prefix + "wv"]), pm[prefix + "bv"])

        contexts: list[Tensor] = []
        maps: list[Tensor] = []
        for h in range(cfg.n_heads):
            start = h * cfg.d_head
            qh = narrow(q, 1, start, cfg.d_head)
            kh = narrow(k, 1, start, cfg.d_head)
            vh = narrow(v, 1, start, cfg.d_head)
            attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), axis=1)
            maps.append(attn)
            if rng is not None:
                attn = dropout(attn, cfg.dropout_p, rng)
            contexts.append(matmul(attn, vh))

        out = add(matmul(concat(contexts, axis=1), pm[prefix + "wo"]), pm[prefix + "bo"])
        if rng is not None:
            out = dropout(out, cfg.dropout_p, rng)
        x = layer_norm(add(x, out), pm[prefix + "ln1_g"], pm[prefix + "ln1_b"])

        ff = gelu(add(matmul(x, pm[prefix + "w1"]), pm[prefix + "b1"]))
        ff = add(matmul(ff, pm[prefix + "w2"]), pm[prefix + "b2"])
        if rng is not None:
            ff = dropout(ff, cfg.dropout_p, rng)
        x = layer_norm(add(x, ff), pm[prefix + "ln2_g"], pm[prefix + "ln2_b"])
        return x, maps

    def cross_encode(
        self,
        query: TokenSequence,
        passage: TokenSequence,
        rng: RngState | None = None,
        train_mode: bool = False,
    ) -> CrossOutput:
        """Encode [CLS] q [SEP] p [SEP] jointly and project [CLS] to a score."""
        if not self.scoring_head:
            raise ContractError("cross_encode needs a model built with a scoring head")
        joint = TokenSequence.joint(query, passage)
        if joint.length > self.config.max_len:
            raise SequenceLengthError(
                f"joint sequence length {joint.length} exceeds max_len {self.config.max_len}"
            )
        enc = self.encode(joint, rng, train_mode)
        score = add(dot(self.params["score_w"], enc.cls_rep), self.params["score_b"])
        l, k = joint.segment_lengths
        return CrossOutput(
            score=score, attn_maps=enc.attn_maps, query_len=l, passage_len=k, encoded=enc
        )

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "encoder",
            "scoring_head": self.scoring_head,
            "config": asdict(self.config),
        }
        arrays = {f"param:{name}": t.data for name, t in self.params.items()}
        np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with np.load(path) as archive:
            meta = json.loads(str(archive["__meta__"]))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ContractError(
                    f"unsupported checkpoint format version {meta.get('format_version')}"
                )
            config = EncoderConfig(**meta["config"])
            scoring_head = bool(meta["scoring_head"])
            params = {
                key[len("param:") :]: Tensor(archive[key], requires_grad=True)
                for key in archive.files
                if key.startswith("param:")
            }
        return cls(config, params, scoring_head)


def extract_cross_attention(attn_maps: list[Tensor], l: int, k: int) -> list[Tensor]:
    """Per-head query-to-passage attention blocks, renormalized per row.

    Rows 1..l are the query-token positions and columns l+2..l+k+1 the
    passage-token positions of the joint layout. Renormalizing the sliced
    post-softmax rows equals softmaxing the corresponding pre-softmax
    scores, so each output row is the attention distribution conditioned
    on landing inside the passage. Outputs stay in the autodiff graph;
    consumers decide whether to detach them as teacher targets.
    """
    expected = l + k + 3
    out: list[Tensor] = []
    for m in attn_maps:
        if not isinstance(m, Tensor):
            m = Tensor(np.asarray(m, dtype=np.float64))
        if m.data.shape != (expected, expected):
            raise ContractError(
                f"attention map shape {m.data.shape} inconsistent with l={l}, k={k}"
            )
        block = narrow(narrow(m, 0, 1, l), 1, l + 2, k)
        sums = sum_along(block, axis=1)
        if np.any(sums.data <= 0.0):
            raise ContractError("attention rows assign zero mass to passage tokens")
        out.append(div(block, reshape(sums, (l, 1))))
    return out

"""The fast-slow transducer with a streaming deliberation branch.

Two cascaded chunked encoders run at different granularities: the fast
encoder emits embeddings chunk by chunk, the slow encoder consumes the
accumulated fast output of several chunks at once and therefore sees a much
wider acoustic window at the cost of coarser update points. A shared
predictor and joiner score both branches, so hypotheses decoded against the
fast branch can be rescored against the slow branch directly.

The deliberation branch conditions the slow branch on decoded text: the
current best partial hypothesis is embedded with the shared token matrix,
run through a small text encoder, and fused into the slow acoustic
embeddings by merge blocks (attention with acoustic queries over text
keys/values, then a feed-forward, both as plain residual adds). The merge
output projections start at zero, so a freshly extended model behaves
exactly like the plain fast-slow model until trained.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import BLANK_ID, BOS_ID, truncate_hypothesis
from .errors import ContractError, DataError, DimensionError
from .layers import (
    ChunkedEncoder,
    ChunkedEncoderConfig,
    ConformerLiteBlock,
    EncoderState,
    FeedForward,
    Linear,
    LSTM,
    LstmState,
    MultiHeadAttention,
    sinusoidal_positions,
)
from .tensor import Tensor, add, concat, gather, log_softmax, matmul, parameter, relu, reshape

__all__ = ["ModelConfig", "FastSlowTransducer"]


@dataclass
class ModelConfig:
    vocab_size: int = 0          # 0 = fill from corpus
    feature_dim: int = 0         # 0 = fill from corpus
    model_dim: int = 32
    embed_dim: int = 0           # 0 = model_dim
    fast_layers: int = 1
    slow_layers: int = 1
    encoder_heads: int = 2
    fast_chunk_frames: int = 4
    slow_chunk_factor: int = 5   # fast chunks per slow segment
    lookahead_frames: int = 1
    fast_left_cache: int = 8
    slow_left_cache: int = 20
    predictor_layers: int = 3
    joiner_hidden: int = 0       # 0 = model_dim
    text_encoder: str = "lstm"   # "lstm" or "conformer"
    text_layers: int = 1
    merge_blocks: int = 1
    merge_heads: int = 1
    merge_hidden: int = 0        # 0 = model_dim
    max_hypo_len: int = 20
    share_token_embeddings: bool = True

    def resolved(self) -> "ModelConfig":
        cfg = ModelConfig(**asdict(self))
        cfg.embed_dim = cfg.embed_dim or cfg.model_dim
        cfg.joiner_hidden = cfg.joiner_hidden or cfg.model_dim
        cfg.merge_hidden = cfg.merge_hidden or cfg.model_dim
        return cfg

    def validate(self) -> None:
        if self.vocab_size < 3:
            raise ContractError("vocab_size must cover blank, BOS, and at least one symbol")
        if self.feature_dim < 1:
            raise ContractError("feature_dim must be set")
        if self.slow_chunk_factor < 1:
            raise ContractError("slow_chunk_factor must be >= 1")
        if self.text_encoder not in ("lstm", "conformer"):
            raise ContractError(f"unknown text encoder variant {self.text_encoder!r}")
        if self.max_hypo_len < 1:
            raise ContractError("max_hypo_len must be >= 1")

    @property
    def slow_chunk_frames(self) -> int:
        return self.fast_chunk_frames * self.slow_chunk_factor

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "ModelConfig":
        return cls(**json.loads(payload))


class _TextEncoder:
    """Shared-embedding text encoder for partial hypotheses."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.variant = cfg.text_encoder
        self.in_proj = Linear(cfg.embed_dim, cfg.model_dim, rng)
        if self.variant == "lstm":
            self.lstm = LSTM(cfg.model_dim, cfg.model_dim, cfg.text_layers, rng)
            self.blocks = []
        else:
            self.lstm = None
            self.blocks = [
                ConformerLiteBlock(cfg.model_dim, rng, n_heads=1, max_len=cfg.max_hypo_len)
                for _ in range(cfg.text_layers)
            ]

    def __call__(self, embedded: Tensor) -> Tensor:
        h = self.in_proj(embedded)
        if self.lstm is not None:
            h, _ = self.lstm(h)
            return h
        for block in self.blocks:
            h = block(h)
        return h

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.in_proj.params(f"{prefix}.in_proj")
        if self.lstm is not None:
            out.update(self.lstm.params(f"{prefix}.lstm"))
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{prefix}.block{i}"))
        return out


class _MergeBlock:
    """Attention (acoustic query, text key/value) + feed-forward, residual adds.

    No layer norm here: with the zero-initialized output projections the
    block must be an exact identity, which is the continuity guarantee for
    extending a trained fast-slow model with deliberation.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.merge_heads, rng, zero_output=True)
        self.ff = FeedForward(cfg.model_dim, cfg.merge_hidden, rng, zero_output=True)

    def __call__(self, e_acoustic: Tensor, e_text: Tensor) -> Tensor:
        x = add(e_acoustic, self.attn(e_acoustic, e_text, e_text))
        return add(x, self.ff(x))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.params(f"{prefix}.attn")
        out.update(self.ff.params(f"{prefix}.ff"))
        return out


class FastSlowTransducer:
    """Fast/slow chunked encoders + shared predictor/joiner + deliberation."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg = cfg.resolved()
        cfg.validate()
        self.cfg = cfg
        self.embed = parameter(0.1 * rng.normal(size=(cfg.vocab_size, cfg.embed_dim)))
        if cfg.share_token_embeddings:
            self.text_embed = self.embed
        else:
            self.text_embed = parameter(0.1 * rng.normal(size=(cfg.vocab_size, cfg.embed_dim)))
        self.input_proj = Linear(cfg.feature_dim, cfg.model_dim, rng)
        self.fast_encoder = ChunkedEncoder(
            ChunkedEncoderConfig(
                num_layers=cfg.fast_layers,
                model_dim=cfg.model_dim,
                num_heads=cfg.encoder_heads,
                chunk_frames=cfg.fast_chunk_frames,
                lookahead_frames=cfg.lookahead_frames,
                left_cache_frames=cfg.fast_left_cache,
            ),
            rng,
        )
        # The slow encoder consumes accumulated fast output exactly at segment
        # boundaries, so no future frames exist for it to look at; its latency
        # budget is carried by the fast encoder's lookahead.
        self.slow_encoder = ChunkedEncoder(
            ChunkedEncoderConfig(
                num_layers=cfg.slow_layers,
                model_dim=cfg.model_dim,
                num_heads=cfg.encoder_heads,
                chunk_frames=cfg.slow_chunk_frames,
                lookahead_frames=0,
                left_cache_frames=cfg.slow_left_cache,
            ),
            rng,
        )
        self.predictor = LSTM(cfg.embed_dim, cfg.model_dim, cfg.predictor_layers, rng)
        self.joiner_enc = Linear(cfg.model_dim, cfg.joiner_hidden, rng)
        self.joiner_pred = Linear(cfg.model_dim, cfg.joiner_hidden, rng, bias=False)
        self.joiner_out = Linear(cfg.joiner_hidden, cfg.vocab_size, rng)
        self.text_encoder = _TextEncoder(cfg, rng)
        self.merge_blocks = [_MergeBlock(cfg, rng) for _ in range(cfg.merge_blocks)]

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed.weight": self.embed}
        if self.text_embed is not self.embed:
            out["text_embed.weight"] = self.text_embed
        out.update(self.input_proj.params("input_proj"))
        out.update(self.fast_encoder.params("fast_encoder"))
        out.update(self.slow_encoder.params("slow_encoder"))
        out.update(self.predictor.params("predictor"))
        out.update(self.joiner_enc.params("joiner.enc"))
        out.update(self.joiner_pred.params("joiner.pred"))
        out.update(self.joiner_out.params("joiner.out"))
        out.update(self.text_encoder.params("text_encoder"))
        for i, block in enumerate(self.merge_blocks):
            out.update(block.params(f"merge.b{i}"))
        return out

    def deliberation_param_names(self) -> list[str]:
        names = [n for n in self.params() if n.startswith(("text_encoder", "merge.", "text_embed"))]
        return names

    def base_param_names(self) -> list[str]:
        delib = set(self.deliberation_param_names())
        return [n for n in self.params() if n not in delib]

    # -- encoders -----------------------------------------------------------

    def initial_states(self) -> tuple[EncoderState, EncoderState]:
        return self.fast_encoder.initial_state(), self.slow_encoder.initial_state()

    def encode_fast_chunk(self, feat_rows: Tensor, state: EncoderState, chunk_len: int,
                          start_frame: int = 0) -> tuple[Tensor, EncoderState]:
        """Project raw feature rows (chunk plus lookahead) and run one fast chunk.

        ``start_frame`` is the absolute index of the first row; the projected
        input carries fixed sinusoidal position codes so streamed and
        full-utterance processing see identical inputs.
        """
        x = self.input_proj(feat_rows)
        pos = sinusoidal_positions(start_frame, feat_rows.shape[0], self.cfg.model_dim)
        return self.fast_encoder.forward_chunk(add(x, Tensor(pos)), state, chunk_len)

    def encode_slow_segment(self, fast_rows: Tensor, state: EncoderState) -> tuple[Tensor, EncoderState]:
        """Run one accumulated segment of fast embeddings through the slow encoder."""
        n = fast_rows.shape[0]
        if n > self.cfg.slow_chunk_frames:
            raise DimensionError(
                f"slow segment of {n} frames exceeds configured {self.cfg.slow_chunk_frames}"
            )
        return self.slow_encoder.forward_chunk(fast_rows, state, chunk_len=n)

    def segment_bounds(self, n_frames: int) -> list[tuple[int, int]]:
        """Slow-segment frame ranges for an utterance of ``n_frames``."""
        seg = self.cfg.slow_chunk_frames
        return [(s, min(s + seg, n_frames)) for s in range(0, n_frames, seg)]

    def fast_slow_forward(self, features: Tensor) -> tuple[Tensor, Tensor, list[tuple[int, int]]]:
        """Full-utterance fast and slow embeddings, frame-aligned, plus segment bounds.

        Uses the same chunk schedule as streaming decode, so chunked and
        full-utterance processing agree exactly.
        """
        if features.ndim != 2 or features.shape[1] != self.cfg.feature_dim:
            raise DimensionError(f"features must be [T, {self.cfg.feature_dim}], got {features.shape}")
        T = features.shape[0]
        chunk = self.cfg.fast_chunk_frames
        look = self.cfg.lookahead_frames
        fast_state, slow_state = self.initial_states()
        fast_parts: list[Tensor] = []
        slow_parts: list[Tensor] = []
        pending: list[Tensor] = []
        start = 0
        chunk_index = 0
        n_chunks = (T + chunk - 1) // chunk
        while start < T:
            end = min(start + chunk, T)
            stop = min(end + look, T)
            e_f, fast_state = self.encode_fast_chunk(
                features[start:stop, :], fast_state, end - start, start_frame=start
            )
            fast_parts.append(e_f)
            pending.append(e_f)
            chunk_index += 1
            if chunk_index % self.cfg.slow_chunk_factor == 0 or chunk_index == n_chunks:
                segment = pending[0] if len(pending) == 1 else concat(pending, axis=0)
                e_s, slow_state = self.encode_slow_segment(segment, slow_state)
                slow_parts.append(e_s)
                pending = []
            start = end
        e_fast = fast_parts[0] if len(fast_parts) == 1 else concat(fast_parts, axis=0)
        e_slow = slow_parts[0] if len(slow_parts) == 1 else concat(slow_parts, axis=0)
        return e_fast, e_slow, self.segment_bounds(T)

    # -- predictor / joiner ---------------------------------------------------

    def _check_tokens(self, tokens: Sequence[int], allow_blank: bool) -> None:
        for tok in tokens:
            if not 0 <= tok < self.cfg.vocab_size:
                raise DataError(f"token id {tok} outside vocabulary of size {self.cfg.vocab_size}")
            if not allow_blank and tok == BLANK_ID:
                raise ContractError("predictor input must not contain the blank token")

    def predictor_init(self) -> tuple[Tensor, LstmState]:
        """BOS step: predictor output and state before any real token."""
        bos = gather(self.embed, [BOS_ID])
        return self.predictor.step(bos, self.predictor.initial_state())

    def predictor_step(self, token: int, state: LstmState) -> tuple[Tensor, LstmState]:
        self._check_tokens([token], allow_blank=False)
        row = gather(self.embed, [token])
        return self.predictor.step(row, state)

    def predictor_forward(self, tokens: Sequence[int],
                          state: LstmState | None = None) -> tuple[Tensor, LstmState]:
        """Outputs for BOS plus each token prefix: [len(tokens)+1, D]."""
        self._check_tokens(tokens, allow_blank=False)
        if state is None:
            rows = gather(self.embed, [BOS_ID, *tokens])
            return self.predictor(rows)
        if not tokens:
            raise ContractError("incremental predictor call needs at least one token")
        rows = gather(self.embed, list(tokens))
        return self.predictor(rows, state)

    def joiner_forward(self, e_enc: Tensor, e_pred: Tensor) -> Tensor:
        """Vocabulary logits from an encoder embedding and a predictor embedding.

        Accepts broadcastable leading shapes, e.g. [T, 1, D] against [1, U+1, D].
        """
        combined = add(self.joiner_enc(e_enc), self.joiner_pred(e_pred))
        return self.joiner_out(relu(combined))

    def lattice_log_probs(self, e_enc: Tensor, pred_out: Tensor) -> Tensor:
        """[T, U+1, V] normalized log distributions for the loss lattice."""
        T, D = e_enc.shape
        U1 = pred_out.shape[0]
        enc = reshape(self.joiner_enc(e_enc), (T, 1, self.cfg.joiner_hidden))
        pred = reshape(self.joiner_pred(pred_out), (1, U1, self.cfg.joiner_hidden))
        logits = self.joiner_out(relu(add(enc, pred)))
        return log_softmax(logits, axis=-1)

    # -- deliberation ---------------------------------------------------------

    def encode_deliberation_text(self, partial: Sequence[int]) -> Tensor:
        """Encode a partial hypothesis; an empty one becomes the BOS sentinel row.

        Keeps the most recent ``max_hypo_len`` tokens. Blank ids are allowed
        here because training masks tokens with the blank.
        """
        tokens = truncate_hypothesis(list(partial), self.cfg.max_hypo_len)
        if not tokens:
            tokens = [BOS_ID]
        self._check_tokens(tokens, allow_blank=True)
        rows = gather(self.text_embed, tokens)
        return self.text_encoder(rows)

    def merge_forward(self, e_slow: Tensor, e_text: Tensor) -> Tensor:
        """Fuse text embeddings into slow acoustic embeddings; shape-preserving."""
        if e_text.shape[0] < 1:
            raise ContractError("merge needs at least one text row; encode the sentinel first")
        out = e_slow
        for block in self.merge_blocks:
            out = block(out, e_text)
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path, texts: dict[str, str] | None = None) -> None:
        meta = {"config": self.cfg.to_json()}
        if texts:
            meta.update(texts)
        save_checkpoint(path, self.params(), meta)

    @classmethod
    def load(cls, path) -> tuple["FastSlowTransducer", dict[str, str]]:
        tensors, texts = load_checkpoint(path)
        if "config" not in texts:
            raise DataError(f"checkpoint {path} has no config record")
        cfg = ModelConfig.from_json(texts["config"])
        model = cls(cfg, np.random.default_rng(0))
        params = model.params()
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        if missing or unexpected:
            raise DataError(
                f"checkpoint {path} does not match the model: missing {missing}, unexpected {unexpected}"
            )
        for name, tensor in params.items():
            stored = tensors[name]
            if stored.shape != tensor.data.shape:
                raise DataError(
                    f"checkpoint value {name} has shape {stored.shape}, expected {tensor.data.shape}"
                )
            tensor.data = stored.copy()
            tensor.grad = None
        return model, texts

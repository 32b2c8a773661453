"""Neural substrate: shared embeddings, pre-norm transformer encoder/decoder
stacks, MLP heads, losses, deterministic initialization, a finite-difference
gradient checker, and the named-tensor checkpoint format.

Everything runs in float64 so training, evaluation, and gradient checks are
reproducible to the bit on one machine.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core_types import MAX_ASPECTS, N_SENTIMENTS

DTYPE = torch.float64


class CapacityError(ValueError):
    """An input sequence exceeds a stack's configured maximum length."""


class VocabError(ValueError):
    """A token or token id is not covered by the model vocabulary."""


class DimensionError(ValueError):
    """A tensor does not have the configured width."""


PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
IMG_OPEN, IMG_CLOSE, IMG_SEP = "<img>", "</img>", "<is>"
CAP_OPEN, CAP_CLOSE = "<cap>", "</cap>"
PROM_OPEN, PROM_CLOSE, SENTI = "<prom>", "</prom>", "<senti>"
ASPECT_SLOT, SENTI_SLOT = "<aspect-slot>", "<senti-slot>"

SPECIAL_TOKENS = (
    PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, IMG_SEP, CAP_OPEN, CAP_CLOSE,
    PROM_OPEN, PROM_CLOSE, SENTI, ASPECT_SLOT, SENTI_SLOT,
)


def build_vocab(token_sources: Iterable[Iterable[str]]) -> dict[str, int]:
    """Special tokens at fixed ids, then the sorted union of corpus tokens."""
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    seen: set[str] = set()
    for tokens in token_sources:
        seen.update(tokens)
    for tok in sorted(seen - set(SPECIAL_TOKENS)):
        vocab[tok] = len(vocab)
    return vocab


@dataclass
class ModelConfig:
    """Architecture and optimization knobs; defaults are the desk-scale run."""

    vocab: dict[str, int]
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 0          # 0 -> 4 * d
    head_hidden: int = 0   # 0 -> d
    d_v: int = 128
    l_i: int = 4
    max_l_t: int = 32
    max_l_cap: int = 8
    multitask_weight: float = 0.1
    lr: float = 6.5e-4
    epochs: int = 70
    batch_size: int = 4
    share_sentiment_branch: bool = False

    def validate(self) -> "ModelConfig":
        if self.d <= 0 or self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} must be positive and divisible by n_heads={self.n_heads}")
        if self.d % 2 != 0:
            raise ValueError(f"d={self.d} must be even for sinusoidal positions")
        if self.l_i < 0:
            raise ValueError(f"l_i must be >= 0, got {self.l_i}")
        if self.multitask_weight < 0:
            raise ValueError(f"multitask weight must be >= 0, got {self.multitask_weight}")
        for tok in SPECIAL_TOKENS:
            if tok not in self.vocab:
                raise ValueError(f"vocab misses special token {tok!r}")
        return self

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff > 0 else 4 * self.d

    @property
    def head_hidden_dim(self) -> int:
        return self.head_hidden if self.head_hidden > 0 else self.d

    @property
    def max_source_len(self) -> int:
        # longest prompted sequence: image + caption + prompt groups + text + specials
        return self.l_i + self.max_l_cap + 4 * MAX_ASPECTS + self.max_l_t + 9

    @property
    def max_target_len(self) -> int:
        return 3 * MAX_ASPECTS + 1


def sinusoidal_positions(positions: Sequence[int] | Tensor, d: int) -> Tensor:
    """Classic sin/cos position rows for the given position indices."""
    pos = torch.as_tensor(positions, dtype=DTYPE)
    half = torch.arange(d // 2, dtype=DTYPE)
    freq = torch.pow(torch.tensor(10000.0, dtype=DTYPE), -2.0 * half / d)
    angles = pos[:, None] * freq[None, :]
    out = torch.empty(len(pos), d, dtype=DTYPE)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.query_proj = nn.Linear(d, d)
        self.key_proj = nn.Linear(d, d)
        self.value_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(
        self,
        query_input: Tensor,
        kv_input: Tensor,
        attn_mask: Tensor | None = None,
        key_mask: Tensor | None = None,
    ) -> Tensor:
        """attn_mask: bool (Lq, Lk), True = may attend. key_mask: bool (B, Lk)."""
        bsz, lq, d = query_input.shape
        lk = kv_input.shape[1]
        if lk == 0:
            # attention over an empty key set contributes nothing
            return torch.zeros_like(query_input)
        q = self.query_proj(query_input).view(bsz, lq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.key_proj(kv_input).view(bsz, lk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.value_proj(kv_input).view(bsz, lk, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask, float("-inf"))
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        ctx = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(bsz, lq, d)
        return self.out_proj(ctx)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int) -> None:
        super().__init__()
        self.up = nn.Linear(d, d_ff)
        self.down = nn.Linear(d_ff, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(F.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = FeedForward(d, d_ff)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        h = self.attn_norm(x)
        x = x + self.attn(h, h, key_mask=key_mask)
        return x + self.ffn(self.ffn_norm(x))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads)
        self.cross_norm = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = FeedForward(d, d_ff)

    def forward(
        self,
        x: Tensor,
        memory: Tensor,
        causal_mask: Tensor,
        memory_mask: Tensor | None = None,
    ) -> Tensor:
        h = self.self_norm(x)
        x = x + self.self_attn(h, h, attn_mask=causal_mask)
        x = x + self.cross_attn(self.cross_norm(x), memory, key_mask=memory_mask)
        return x + self.ffn(self.ffn_norm(x))


def _with_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 2:
        return x[None], True
    if x.dim() == 3:
        return x, False
    raise DimensionError(f"expected a (len, d) or (batch, len, d) tensor, got shape {tuple(x.shape)}")


class TransformerEncoder(nn.Module):
    """Pre-norm self-attention stack with a final layer norm."""

    def __init__(self, d: int, n_heads: int, n_layers: int, d_ff: int, max_len: int) -> None:
        super().__init__()
        self.d = d
        self.max_len = max_len
        self.layers = nn.ModuleList(EncoderLayer(d, n_heads, d_ff) for _ in range(n_layers))
        self.final_norm = nn.LayerNorm(d)

    def forward(
        self,
        x: Tensor,
        positions: Sequence[int] | None = None,
        add_positions: bool = True,
        pad_mask: Tensor | None = None,
    ) -> Tensor:
        x, squeeze = _with_batch(x)
        length = x.shape[1]
        if length > self.max_len:
            raise CapacityError(f"sequence length {length} exceeds capacity {self.max_len}")
        if pad_mask is not None and pad_mask.dim() == 1:
            pad_mask = pad_mask[None]
        if add_positions and length > 0:
            pos = range(length) if positions is None else positions
            x = x + sinusoidal_positions(pos, self.d)[None]
        for layer in self.layers:
            x = layer(x, key_mask=pad_mask)
        x = self.final_norm(x)
        return x[0] if squeeze else x


class TransformerDecoder(nn.Module):
    """Causal self-attention over the prefix plus cross-attention over memory.

    Row t of the output depends only on prefix rows <= t; memory may be empty,
    in which case cross-attention contributes zeros.
    """

    def __init__(self, d: int, n_heads: int, n_layers: int, d_ff: int, max_len: int) -> None:
        super().__init__()
        self.d = d
        self.max_len = max_len
        self.layers = nn.ModuleList(DecoderLayer(d, n_heads, d_ff) for _ in range(n_layers))
        self.final_norm = nn.LayerNorm(d)

    def forward(self, memory: Tensor, prefix: Tensor, memory_mask: Tensor | None = None) -> Tensor:
        prefix, squeeze = _with_batch(prefix)
        memory, _ = _with_batch(memory)
        if memory.shape[0] == 1 and prefix.shape[0] > 1:
            memory = memory.expand(prefix.shape[0], -1, -1)
        lp = prefix.shape[1]
        if lp > self.max_len:
            raise CapacityError(f"prefix length {lp} exceeds capacity {self.max_len}")
        if memory_mask is not None and memory_mask.dim() == 1:
            memory_mask = memory_mask[None]
        x = prefix + sinusoidal_positions(range(lp), self.d)[None]
        causal = torch.ones(lp, lp, dtype=torch.bool).tril_()
        for layer in self.layers:
            x = layer(x, memory, causal, memory_mask=memory_mask)
        x = self.final_norm(x)
        return x[0] if squeeze else x


class MlpHead(nn.Module):
    """affine -> GELU -> affine."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int) -> None:
        super().__init__()
        self.up = nn.Linear(d_in, d_hidden)
        self.down = nn.Linear(d_hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(F.gelu(self.up(x)))


def cross_entropy(logits: Tensor, gold) -> Tensor:
    """-log softmax(logits)[gold]; mean over items when logits is batched."""
    if logits.dim() == 1:
        gold = int(gold)
        if not 0 <= gold < logits.shape[0]:
            raise ValueError(f"gold index {gold} out of range for {logits.shape[0]} classes")
        return -F.log_softmax(logits, dim=-1)[gold]
    gold_t = torch.as_tensor(gold, dtype=torch.long)
    if gold_t.numel() and (int(gold_t.min()) < 0 or int(gold_t.max()) >= logits.shape[-1]):
        raise ValueError(
            f"gold indices outside [0, {logits.shape[-1]}): {gold_t.tolist()}"
        )
    return F.nll_loss(F.log_softmax(logits, dim=-1), gold_t)


class MabsaModel(nn.Module):
    """Named parameter store for the whole pipeline.

    One token-embedding table is shared by every stack; the aspect-branch
    encoder doubles as the task encoder unless ``share_sentiment_branch`` is
    set, in which case the sentiment branch shares instead.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d
        self.token_embedding = nn.Embedding(len(cfg.vocab), d)
        self.sentiment_embedding = nn.Embedding(N_SENTIMENTS, d)
        self.image_projection = nn.Linear(cfg.d_v, cfg.l_i * d) if cfg.l_i > 0 else None

        def encoder() -> TransformerEncoder:
            return TransformerEncoder(d, cfg.n_heads, cfg.n_layers, cfg.ffn_dim, cfg.max_source_len)

        def decoder() -> TransformerDecoder:
            return TransformerDecoder(d, cfg.n_heads, cfg.n_layers, cfg.ffn_dim,
                                      max(cfg.max_target_len, 8))

        self.encoders = nn.ModuleDict({"aspect": encoder(), "sentiment": encoder()})
        self.decoders = nn.ModuleDict(
            {
                "count": decoder(),
                "aspect_prompt": decoder(),
                "sentiment_prompt": decoder(),
                "target": decoder(),
            }
        )
        self.count_head = MlpHead(d, cfg.head_hidden_dim, MAX_ASPECTS)
        self.aspect_heads = nn.ModuleList(
            MlpHead(2 * d, 2 * cfg.head_hidden_dim, 2 * d) for _ in range(MAX_ASPECTS)
        )
        self.double()

    @property
    def task_encoder(self) -> TransformerEncoder:
        branch = "sentiment" if self.cfg.share_sentiment_branch else "aspect"
        return self.encoders[branch]

    def token_id(self, token: str) -> int:
        try:
            return self.cfg.vocab[token]
        except KeyError:
            raise VocabError(f"token {token!r} not in vocabulary") from None

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_id(t) for t in tokens]

    def embed(self, token_ids: Sequence[int] | Tensor) -> Tensor:
        """Embedding rows for a list of token ids; (len, d)."""
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.numel() == 0:
            return torch.zeros(0, self.cfg.d, dtype=DTYPE)
        if int(ids.min()) < 0 or int(ids.max()) >= len(self.cfg.vocab):
            raise VocabError(
                f"token id outside vocabulary of size {len(self.cfg.vocab)}"
            )
        return self.token_embedding(ids)

    def embed_text(self, tokens: Sequence[str]) -> Tensor:
        return self.embed(self.encode_tokens(tokens))

    def special_row(self, token: str) -> Tensor:
        """(1, d) embedding row of one special token."""
        return self.token_embedding.weight[self.token_id(token)][None, :]


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization: N(0, 0.02) matrices, zero biases,
    identity layer norms. Bit-identical for a fixed seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, mod in sorted(model.named_modules(), key=lambda kv: kv[0]):
            if isinstance(mod, (nn.Linear, nn.Embedding)):
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen, dtype=DTYPE) * 0.02)
                if getattr(mod, "bias", None) is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    rel_floor: float = 1e-3,
) -> float:
    """Compare reverse-mode gradients of ``loss_fn()`` against central finite
    differences, entry by entry, over every given parameter.

    Each comparison is normalized by max(|analytic|, |numeric|, rel_floor), so
    entries whose true gradient is below the floor are effectively compared in
    absolute terms (finite differences cannot resolve relative error there).
    Returns the worst error observed.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(f"param_{i}", p) for i, p in enumerate(params)]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for (_, param), grad in zip(named, grads):
            flat = param.view(-1)
            grad_flat = (
                torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            )
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                analytic = float(grad_flat[i])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), rel_floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: npz archive of named float64 tensors plus a JSON config header
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: MabsaModel) -> None:
    arrays = {name: t.detach().numpy() for name, t in model.state_dict().items()}
    arrays["__config__"] = np.array(json.dumps(asdict(model.cfg)))
    np.savez(path, **arrays)


def load_checkpoint(path) -> MabsaModel:
    with np.load(path, allow_pickle=False) as archive:
        cfg = ModelConfig(**json.loads(str(archive["__config__"])))
        model = MabsaModel(cfg)
        state = {
            name: torch.from_numpy(archive[name])
            for name in archive.files
            if name != "__config__"
        }
    model.load_state_dict(state)
    return model

"""Autoregressive region-description decoder.

Flattened region features and the running token sequence are concatenated
into one transformer input under a seq2seq mask: region tokens attend only
among themselves, text tokens attend to the region tokens and to earlier
text.  The first text token is a task-specific begin token that selects the
output style.  Generation is greedy, optionally branched into the top-k
first tokens ("branch-first" beam) with each branch continued greedily.

A finished description is scored by the mean softmax probability of its
emitted tokens; the detection confidence multiplies the square roots of
that score and the extractor's objectness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .extractor import Box
from .layers import Embedding, LayerNorm, Linear, Module, TransformerBlock, gather_rows
from .tensor import Tensor
from .tokenizer import Vocabulary

MASK_OFF = -1e30


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 6
    dim: int = 64
    heads: int = 4
    max_tokens: int = 20
    crop_side: int = 5

    def __post_init__(self):
        if self.max_tokens < 2:
            raise ConfigError(f"max_tokens must be >= 2, got {self.max_tokens}")
        if self.crop_side < 1:
            raise ConfigError(f"crop_side must be >= 1, got {self.crop_side}")
        if self.layers < 1:
            raise ConfigError("decoder needs at least one layer")


def build_seq2seq_mask(m: int, n: int) -> np.ndarray:
    """Boolean (m+n)x(m+n) attention mask.

    Rows/columns 0..m-1 are region-feature tokens, the rest text.  Region
    rows may attend to all region columns and nothing else; text row i may
    attend to every region column and to text columns <= i.
    """
    if m < 1 or n < 0:
        raise ContractError(f"build_seq2seq_mask: need m >= 1, n >= 0; got m={m}, n={n}")
    size = m + n
    mask = np.zeros((size, size), dtype=bool)
    mask[:m, :m] = True
    for i in range(n):
        mask[m + i, : m + i + 1] = True
    return mask


def mask_to_bias(mask: np.ndarray) -> Tensor:
    """Additive attention bias: 0 where allowed, a large negative otherwise."""
    return Tensor(np.where(mask, 0.0, MASK_OFF)[None, None, :, :])


@dataclass
class DescriptionCandidate:
    """One generated description with its per-step token probabilities.

    `token_ids` excludes the begin token and the end token; `token_scores`
    has one entry per emitted token including the end token, so the
    description score is their arithmetic mean.
    """

    token_ids: list[int]
    token_scores: list[float]
    truncated: bool = False

    def __post_init__(self):
        if not self.token_scores:
            raise ContractError("candidate must have at least one scored step")
        for s in self.token_scores:
            if not 0.0 < s <= 1.0:
                raise ContractError(f"token score {s} outside (0, 1]")

    @property
    def desc_score(self) -> float:
        return sum(self.token_scores) / len(self.token_scores)


def score_object(objectness: float, desc_score: float) -> float:
    """Composite confidence: sqrt(objectness) * sqrt(description score)."""
    if not (0.0 <= objectness <= 1.0 and 0.0 <= desc_score <= 1.0):
        raise ContractError(
            f"score_object: inputs must be in [0, 1], got {objectness}, {desc_score}"
        )
    return math.sqrt(objectness) * math.sqrt(desc_score)


@dataclass
class DetectedObject:
    """Final per-region prediction: box, objectness, scored descriptions."""

    box: Box
    objectness: float
    stage_scores: tuple[float, ...]
    candidates: list[DescriptionCandidate]
    task_id: int
    final_scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates:
            raise ContractError("detected object needs at least one candidate")
        if not self.final_scores:
            self.final_scores = [
                score_object(self.objectness, c.desc_score) for c in self.candidates
            ]


class TextDecoder(Module):
    """Transformer decoder over [region features; text tokens]."""

    def __init__(self, cfg: DecoderConfig, vocab: Vocabulary, feat_channels: int, rng):
        self.cfg = cfg
        self.vocab = vocab
        self.obj_proj = Linear(rng, feat_channels, cfg.dim)
        self.obj_ln = LayerNorm(cfg.dim)
        self.token_emb = Embedding(rng, len(vocab), cfg.dim)
        self.pos_emb = T.parameter(np.zeros((cfg.max_tokens, cfg.dim)))
        self.blocks = [TransformerBlock(rng, cfg.dim, cfg.heads) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.dim)
        self.out_proj = Linear(rng, cfg.dim, len(vocab))

    # -- core forward --------------------------------------------------------

    def project_regions(self, crops: Tensor) -> Tensor:
        """[R, C, s, s] crops to [R, s*s, dim] region tokens."""
        r, c, s1, s2 = crops.shape
        tokens = T.reshape(T.transpose(crops, (0, 2, 3, 1)), (r, s1 * s2, c))
        return self.obj_ln(self.obj_proj(tokens))

    def forward_logits(self, region_tokens: Tensor, text_ids: np.ndarray) -> Tensor:
        """Token logits [R, n, V] for a batch of equal-length prefixes."""
        r, m, d = region_tokens.shape
        text_ids = np.asarray(text_ids)
        n = text_ids.shape[1]
        if n > self.cfg.max_tokens:
            raise ContractError(
                f"prefix length {n} exceeds max_tokens {self.cfg.max_tokens}"
            )
        emb = self.token_emb(text_ids)  # [R, n, dim]
        pos = T.narrow(self.pos_emb, 0, 0, n)
        emb = T.add(emb, pos)
        x = T.concat([region_tokens, emb], axis=1)
        bias = mask_to_bias(build_seq2seq_mask(m, n))
        for block in self.blocks:
            x = block(x, bias)
        x = self.final_ln(x)
        text_out = T.narrow(x, 1, m, n)
        return self.out_proj(text_out)

    # -- training loss ---------------------------------------------------------

    def sequence_loss(
        self,
        region_tokens: Tensor,
        target_ids: list[list[int]],
        task_ids: list[int],
        epsilon: float = 0.1,
    ) -> Tensor:
        """Mean over regions of the per-region mean step loss.

        Each region contributes the average label-smoothed cross-entropy of
        its N content tokens plus the end token (N + 1 prediction steps),
        teacher-forced from its task begin token.
        """
        r = region_tokens.shape[0]
        if r != len(target_ids) or r != len(task_ids):
            raise ContractError("sequence_loss: region/target/task counts differ")
        specials = {self.vocab.pad_id, self.vocab.unk_id, self.vocab.eos_id, *self.vocab.task_ids}
        for ids in target_ids:
            if not ids:
                raise ContractError("sequence_loss: empty target description")
            if any(t in specials for t in ids):
                raise ContractError("sequence_loss: target contains special tokens")
        lengths = [len(ids) + 1 for ids in target_ids]  # content + [EOS]
        n = max(lengths)
        inputs = np.full((r, n), self.vocab.pad_id, dtype=np.intp)
        targets = np.full((r, n), self.vocab.pad_id, dtype=np.intp)
        weights = np.zeros((r, n))
        for i, (ids, task) in enumerate(zip(target_ids, task_ids)):
            inputs[i, 0] = self.vocab.task_token_id(task)
            inputs[i, 1:len(ids) + 1] = ids
            targets[i, :len(ids)] = ids
            targets[i, len(ids)] = self.vocab.eos_id
            weights[i, :len(ids) + 1] = 1.0 / (lengths[i] * r)
        logits = self.forward_logits(region_tokens, inputs)
        step_losses = T.sequence_cross_entropy(logits, targets, epsilon)
        return T.tsum(T.mul(step_losses, Tensor(weights)))

    def lm_loss(
        self, region_tokens: Tensor, target_ids: list[int], task_id: int, epsilon: float = 0.1
    ) -> Tensor:
        """Single-region language-modeling loss (see `sequence_loss`)."""
        if region_tokens.data.ndim == 2:
            region_tokens = T.reshape(region_tokens, (1,) + region_tokens.shape)
        return self.sequence_loss(region_tokens, [list(target_ids)], [task_id], epsilon)

    # -- generation --------------------------------------------------------

    def decode_step(self, region_tokens: Tensor, prefix: list[int]) -> np.ndarray:
        """Next-token probability vector [V] given a single region's prefix."""
        if not prefix or prefix[0] not in self.vocab.task_ids:
            raise ContractError("decode_step: prefix must start with a task begin token")
        if region_tokens.data.ndim == 2:
            region_tokens = T.reshape(region_tokens, (1,) + region_tokens.shape)
        with T.no_grad():
            logits = self.forward_logits(region_tokens, np.asarray([prefix], dtype=np.intp))
            probs = T.softmax(T.narrow(logits, 1, len(prefix) - 1, 1))
        return probs.data[0, 0]

    def _greedy_rollout(
        self, region_tokens: Tensor, prefixes: list[list[int]], first_scores: list[float]
    ) -> list[DescriptionCandidate]:
        """Continue every prefix greedily until [EOS] or the length cap."""
        r = region_tokens.shape[0]
        seqs = [list(p) for p in prefixes]
        scores: list[list[float]] = [[s] for s in first_scores]
        emitted: list[list[int]] = [list(p[1:]) for p in prefixes]
        done = [bool(e) and e[-1] == self.vocab.eos_id for e in emitted]
        truncated = [False] * r
        for i in range(r):
            if done[i]:
                emitted[i] = emitted[i][:-1]
        with T.no_grad():
            while not all(done) and len(seqs[0]) < self.cfg.max_tokens:
                ids = np.asarray(seqs, dtype=np.intp)
                logits = self.forward_logits(region_tokens, ids)
                last = logits.data[:, -1, :]
                zmax = last.max(axis=1, keepdims=True)
                e = np.exp(last - zmax)
                probs = e / e.sum(axis=1, keepdims=True)
                for i in range(r):
                    if done[i]:
                        seqs[i].append(self.vocab.pad_id)
                        continue
                    tok = int(np.argmax(probs[i]))
                    scores[i].append(float(probs[i, tok]))
                    seqs[i].append(tok)
                    if tok == self.vocab.eos_id:
                        done[i] = True
                    else:
                        emitted[i].append(tok)
            for i in range(r):
                if not done[i]:
                    truncated[i] = True
        return [
            DescriptionCandidate(token_ids=emitted[i], token_scores=scores[i], truncated=truncated[i])
            for i in range(r)
        ]

    def generate(
        self, region_tokens: Tensor, task_ids: list[int], beam: int = 1
    ) -> list[list[DescriptionCandidate]]:
        """Branch-first beam decode for a batch of regions.

        Takes the top `beam` first tokens per region, then continues each
        branch greedily; candidates come back ordered by first-token
        probability.  `beam` = 1 is exactly greedy decoding.
        """
        if beam < 1:
            raise ConfigError(f"beam size must be >= 1, got {beam}")
        r = region_tokens.shape[0]
        begin = [[self.vocab.task_token_id(t)] for t in task_ids]
        with T.no_grad():
            logits = self.forward_logits(region_tokens, np.asarray(begin, dtype=np.intp))
            last = logits.data[:, -1, :]
            zmax = last.max(axis=1, keepdims=True)
            e = np.exp(last - zmax)
            probs = e / e.sum(axis=1, keepdims=True)
            k = min(beam, probs.shape[1])
            prefixes: list[list[int]] = []
            firsts: list[float] = []
            for i in range(r):
                top = np.argsort(-probs[i], kind="stable")[:k]
                for tok in top:
                    prefixes.append(begin[i] + [int(tok)])
                    firsts.append(float(probs[i, tok]))
            expanded = gather_rows(region_tokens, np.repeat(np.arange(r), k))
            flat = self._greedy_rollout(expanded, prefixes, firsts)
        return [flat[i * k:(i + 1) * k] for i in range(r)]

    def generate_greedy(self, region_tokens: Tensor, task_id: int) -> DescriptionCandidate:
        """Greedy decode of a single region ([m, C] or [1, m, C] tokens)."""
        if region_tokens.data.ndim == 2:
            region_tokens = T.reshape(region_tokens, (1,) + region_tokens.shape)
        return self.generate(region_tokens, [task_id], beam=1)[0][0]

    def generate_branch_first(
        self, region_tokens: Tensor, task_id: int, beam: int
    ) -> list[DescriptionCandidate]:
        if region_tokens.data.ndim == 2:
            region_tokens = T.reshape(region_tokens, (1,) + region_tokens.shape)
        return self.generate(region_tokens, [task_id], beam=beam)[0]

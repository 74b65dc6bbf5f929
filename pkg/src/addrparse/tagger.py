"""Length-constrained Seq2Seq tagger: LSTM encoder, context-initialised LSTM decoder, linear + softmax.

The decoder runs exactly as many steps as the input has tokens. Its first
input is the BOS embedding; afterwards it reads either the gold previous tag
(teacher forcing) or its own previous argmax.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .domain import BOS_ID, NUM_TAGS, PAD_ID, TAG_NAMES, TAGS, Tag, tokenize
from .embedding import Embedder, FixedNgramTable, SubwordComposer, embed_sequence
from .errors import CorruptFile, LengthMismatch, SchemaError, VersionError
from .nn import LstmCellParams, Tensor
from .subword import BpeVocab, NgramSpec

MODEL_MAGIC = b"ADDRPARSE-MODEL\n"
MODEL_FORMAT_VERSION = 1
VARIANTS = ("fixed", "composed")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "composed"
    hidden_dim: int = 128
    word_dim: int = 64
    subword_dim: int = 32
    ngram_n: int = 2
    hash_buckets: int = 2**14
    ngram_seed: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("hidden_dim", "word_dim", "subword_dim", "ngram_n", "hash_buckets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def ngram_spec(self) -> NgramSpec:
        return NgramSpec(self.ngram_n, self.hash_buckets, self.ngram_seed)


class ParserModel:
    def __init__(self, config: ModelConfig, embedder: Embedder, encoder: LstmCellParams,
                 decoder: LstmCellParams, tag_embedding: Tensor, proj_w: Tensor, proj_b: Tensor):
        H = config.hidden_dim
        if encoder.hidden_dim != H or decoder.hidden_dim != H:
            raise nn.DimensionMismatch("encoder and decoder hidden sizes must equal hidden_dim")
        if encoder.input_dim != embedder.d_word:
            raise nn.DimensionMismatch("encoder input must match the word embedding width")
        if tag_embedding.shape != (NUM_TAGS + 1, decoder.input_dim):
            raise nn.DimensionMismatch("tag embedding must have 8 tags + BOS rows")
        if proj_w.shape != (NUM_TAGS, H) or proj_b.shape != (NUM_TAGS,):
            raise nn.DimensionMismatch("projection must map hidden_dim -> 8 tags")
        self.config = config
        self.embedder = embedder
        self.encoder = encoder
        self.decoder = decoder
        self.tag_embedding = tag_embedding
        self.proj_w = proj_w
        self.proj_b = proj_b

    @classmethod
    def build(cls, config: ModelConfig, vocab: BpeVocab | None = None) -> "ParserModel":
        rng = np.random.default_rng(config.seed)
        if config.variant == "composed":
            if vocab is None:
                raise ValueError("the composed variant needs a BPE vocabulary")
            embedder: Embedder = SubwordComposer.init(vocab, config.subword_dim, config.word_dim, rng)
        else:
            embedder = FixedNgramTable.create(config.ngram_spec, config.word_dim)
        H, d = config.hidden_dim, config.word_dim
        k = 1.0 / np.sqrt(H)
        return cls(
            config,
            embedder,
            LstmCellParams.init(rng, d, H, "encoder"),
            LstmCellParams.init(rng, d, H, "decoder"),
            nn.parameter(rng.uniform(-0.1, 0.1, (NUM_TAGS + 1, d)), "tag_embedding"),
            nn.parameter(rng.uniform(-k, k, (NUM_TAGS, H)), "projection.w"),
            nn.parameter(np.zeros(NUM_TAGS), "projection.b"),
        )

    @property
    def vocab(self) -> BpeVocab | None:
        return self.embedder.vocab if isinstance(self.embedder, SubwordComposer) else None

    def parameters(self) -> list[Tensor]:
        """Trainable parameters in serialization order."""
        return [*self.embedder.parameters(), *self.encoder.parameters(), *self.decoder.parameters(),
                self.tag_embedding, self.proj_w, self.proj_b]

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array, frozen ones included, in file order."""
        out = []
        if isinstance(self.embedder, FixedNgramTable):
            out.append(("ngram_table", self.embedder.vectors))
        out.extend((p.name, p.data) for p in self.parameters())
        return out

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        for p, arr in zip(self.parameters(), state, strict=True):
            p.data[...] = arr

    def predict(self, token_lists: Sequence[Sequence[str]], batch_size: int = 512) -> list[list[int]]:
        """Greedy tag ids for each token list."""
        out: list[list[int]] = []
        for start in range(0, len(token_lists), batch_size):
            chunk = token_lists[start : start + batch_size]
            with nn.no_grad():
                logits, _ = forward_batch(self, chunk)
            preds = logits.data.argmax(axis=-1)
            out.extend(preds[: len(toks), i].tolist() for i, toks in enumerate(chunk))
        return out


@dataclass(frozen=True)
class ParseResult:
    tokens: tuple[str, ...]
    tags: tuple[Tag, ...]
    probabilities: np.ndarray

    def lines(self) -> list[str]:
        return [f"{tok}\t{tag.value}" for tok, tag in zip(self.tokens, self.tags)]


# -- encoder / decoder ----------------------------------------------------

def _decoder_sequence(context: Tensor, length: int, model: ParserModel,
                      teacher: np.ndarray | None = None, lengths=None) -> Tensor:
    """Decoder logits ``(T, B, 8)`` from a ``(B, 2H)`` packed [h, c] context.

    Step 1 reads the BOS embedding; step t > 1 reads the tag of step t-1,
    gold under teacher forcing, otherwise the argmax of the previous logits.
    Row ``b`` stops at ``lengths[b]``; its later logits are zero.
    Manual backpropagation through time; argmax feedback carries no gradient.
    """
    p = model.decoder
    H = p.hidden_dim
    emb, pw, pb = model.tag_embedding, model.proj_w, model.proj_b
    B = context.shape[0]
    lengths = np.full(B, length) if lengths is None else np.asarray(lengths)
    perm, counts = nn._active_counts(lengths, length)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(B)
    if teacher is not None:
        teacher = np.where(teacher == PAD_ID, 0, teacher)[perm]
    w_hh, w_ih = p.w_hh.data, p.w_ih.data
    sw_ih, sw_hh, sb = nn.gate_prescale(w_ih, w_hh, p.b.data, H)
    zx_table = emb.data @ sw_ih.T + sb
    h = context.data[perm, :H]
    c = context.data[perm, H:]
    prev = np.full(B, BOS_ID, dtype=np.intp)
    logits = np.zeros((length, B, NUM_TAGS))
    tape = []
    for t in range(length):
        n = counts[t]
        h, c, prev = h[:n], c[:n], prev[:n]
        a, c_new, tc, h_new = nn.cell_forward(zx_table[prev], h, c, sw_hh, H)
        tape.append((n, prev, a, h, c, tc, h_new))
        h, c = h_new, c_new
        logits[t, :n] = h @ pw.data.T + pb.data
        prev = teacher[:n, t] if teacher is not None else logits[t, :n].argmax(axis=-1)

    def bw(node):
        g = node.grad[:, perm]
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        dzs, hs_prev, hs_out, gs, inputs = [], [], [], [], []
        for t in range(length - 1, -1, -1):
            n, prev_t, a, h_prev, c_prev, tc, h_out = tape[t]
            g_t = g[t, :n]
            dh = dh[:n] + g_t @ pw.data
            dz, dc = nn.cell_backward(dh, dc[:n], a, c_prev, tc, H)
            dh = dz @ w_hh
            dzs.append(dz)
            hs_prev.append(h_prev)
            hs_out.append(h_out)
            gs.append(g_t)
            inputs.append(prev_t)
            if t and counts[t - 1] > n:
                grow = counts[t - 1]
                dh = np.concatenate([dh, np.zeros((grow - n, H))])
                dc = np.concatenate([dc, np.zeros((grow - n, H))])
        g2 = np.concatenate(gs)
        nn._accum(pw, g2.T @ np.concatenate(hs_out))
        nn._accum(pb, g2.sum(axis=0))
        dz2 = np.concatenate(dzs)
        flat_inputs = np.concatenate(inputs)
        d_context = np.zeros((B, 2 * H))
        d_context[: len(dh), :H] = dh
        d_context[: len(dc), H:] = dc
        nn._accum(context, d_context[inverse])
        if emb.requires_grad:
            g_emb = np.zeros_like(emb.data)
            np.add.at(g_emb, flat_inputs, dz2 @ w_ih)
            nn._accum(emb, g_emb)
        nn._accum(p.w_ih, dz2.T @ emb.data[flat_inputs])
        nn._accum(p.w_hh, dz2.T @ np.concatenate(hs_prev))
        nn._accum(p.b, dz2.sum(axis=0))

    return nn._node(logits[:, inverse], (context, emb, p.w_ih, p.w_hh, p.b, pw, pb), bw)


def encode(embedded: Tensor, model: ParserModel):
    """Encode one ``T x d_word`` sequence; returns (hidden states ``T x H``, (h_T, c_T))."""
    T = embedded.shape[0]
    if T < 1:
        raise ValueError("cannot encode an empty sequence")
    H = model.config.hidden_dim
    out = nn.lstm_sequence(nn.reshape(embedded, (T, 1, embedded.shape[1])), model.encoder)
    states = nn.getitem(out, (slice(None), 0, slice(0, H)))
    return states, (nn.getitem(out, (T - 1, 0, slice(0, H))), nn.getitem(out, (T - 1, 0, slice(H, None))))


def decode(context: tuple[Tensor, Tensor], length: int, model: ParserModel,
           teacher_tags: Sequence[Tag] | None = None) -> Tensor:
    """Logits ``T x 8`` for one sequence, free-running unless ``teacher_tags`` is given."""
    teacher = None
    if teacher_tags is not None:
        if len(teacher_tags) != length:
            raise LengthMismatch(f"{len(teacher_tags)} teacher tags for {length} steps")
        teacher = np.array([[Tag(t).index for t in teacher_tags]], dtype=np.intp)
    h, c = context
    packed = nn.reshape(nn.concat([nn.reshape(h, (1, -1)), nn.reshape(c, (1, -1))], axis=1),
                        (1, 2 * model.config.hidden_dim))
    return nn.reshape(_decoder_sequence(packed, length, model, teacher), (length, NUM_TAGS))


def embed_batch(model: ParserModel, token_lists: Sequence[Sequence[str]]):
    """Embed each distinct word once; returns (word matrix, (B, T) row index, lengths)."""
    index: dict[str, int] = {}
    lengths = np.array([len(toks) for toks in token_lists])
    if lengths.size == 0 or lengths.min() < 1:
        raise ValueError("every sequence needs at least one token")
    T = int(lengths.max())
    rows = np.zeros((len(token_lists), T), dtype=np.intp)
    for i, toks in enumerate(token_lists):
        for t, tok in enumerate(toks):
            rows[i, t] = index.setdefault(tok, len(index))
    return model.embedder.embed_words(list(index)), rows, lengths


def forward_batch(model: ParserModel, token_lists: Sequence[Sequence[str]],
                  teacher: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Decoder logits ``(T, B, 8)`` for a padded batch, plus the true lengths."""
    words, rows, lengths = embed_batch(model, token_lists)
    T = rows.shape[1]
    x = nn.take_rows(words, rows.T)
    final = nn.lstm_final(nn.reshape(x, (1, *x.shape)), [model.encoder], lengths)
    context = nn.reshape(final, final.shape[1:])
    return _decoder_sequence(context, T, model, teacher, lengths), lengths


def batch_loss(model: ParserModel, token_lists: Sequence[Sequence[str]], tag_ids: np.ndarray,
               mask: np.ndarray, teacher_forcing: bool) -> Tensor:
    """Mean cross-entropy over the real (unpadded) positions of a batch."""
    logits, _ = forward_batch(model, token_lists, tag_ids if teacher_forcing else None)
    T, B, K = logits.shape
    return nn.cross_entropy(nn.reshape(logits, (T * B, K)), tag_ids.T.reshape(-1), mask.T.reshape(-1))


def parse_tokens(token_lists: Sequence[Sequence[str]], model: ParserModel) -> list[ParseResult]:
    with nn.no_grad():
        logits, _ = forward_batch(model, token_lists)
    probs = nn.softmax(logits.data, axis=-1)
    results = []
    for i, toks in enumerate(token_lists):
        p = probs[: len(toks), i]
        results.append(ParseResult(tuple(toks), tuple(TAGS[j] for j in p.argmax(axis=-1)), p))
    return results


def parse(raw: str, model: ParserModel) -> ParseResult:
    tokens = tokenize(raw)
    with nn.no_grad():
        embedded = embed_sequence(tokens, model.embedder)
        _, context = encode(embedded, model)
        logits = decode(context, len(tokens), model)
    probs = nn.softmax(logits.data, axis=-1)
    return ParseResult(tuple(tokens), tuple(TAGS[j] for j in probs.argmax(axis=-1)), probs)


def parse_many(raws: Sequence[str], model: ParserModel, batch_size: int = 512) -> list[ParseResult]:
    token_lists = [tokenize(r) for r in raws]
    out: list[ParseResult] = []
    for start in range(0, len(token_lists), batch_size):
        out.extend(parse_tokens(token_lists[start : start + batch_size], model))
    return out


# -- serialization --------------------------------------------------------

def _header(model: ParserModel, payload: bytes) -> dict:
    vocab = model.vocab
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "variant": model.config.variant,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "tags": list(TAG_NAMES),
        "blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in model.blocks()],
        "bpe_vocab": None if vocab is None else vocab.dumps(),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }


def model_bytes(model: ParserModel) -> bytes:
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in model.blocks())
    header = json.dumps(_header(model, payload), sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return MODEL_MAGIC + header.encode("ascii") + b"\n" + payload


def save_model(model: ParserModel, path: str | Path) -> None:
    """Write header line + little-endian float64 blocks in :meth:`ParserModel.blocks` order."""
    Path(path).write_bytes(model_bytes(model))


def model_from_bytes(blob: bytes) -> ParserModel:
    if not blob.startswith(MODEL_MAGIC):
        raise CorruptFile("not an addrparse model file")
    end = blob.find(b"\n", len(MODEL_MAGIC))
    if end < 0:
        raise CorruptFile("model header is truncated")
    try:
        header = json.loads(blob[len(MODEL_MAGIC) : end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptFile("model header is not valid JSON") from None
    version = header.get("format_version") if isinstance(header, dict) else None
    if version != MODEL_FORMAT_VERSION:
        raise VersionError(f"model format version {version!r}, expected {MODEL_FORMAT_VERSION}")
    payload = blob[end + 1 :]
    try:
        if len(payload) != header["payload_bytes"]:
            raise CorruptFile(f"payload has {len(payload)} bytes, header says {header['payload_bytes']}")
        if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
            raise CorruptFile("payload checksum mismatch")
        if header["tags"] != list(TAG_NAMES):
            raise SchemaError(f"model tag set {header['tags']} differs from {list(TAG_NAMES)}")
        config = ModelConfig(**header["config"])
        vocab = BpeVocab.loads(header["bpe_vocab"]) if header["bpe_vocab"] is not None else None
        blocks = header["blocks"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise CorruptFile(f"model header is malformed ({exc})") from None

    model = ParserModel.build(config, vocab)
    expected = model.blocks()
    if [b["name"] for b in blocks] != [name for name, _ in expected]:
        raise CorruptFile("model blocks do not match the configured architecture")
    offset = 0
    for spec, (name, target) in zip(blocks, expected):
        if tuple(spec["shape"]) != target.shape:
            raise CorruptFile(f"block {name} has shape {spec['shape']}, expected {list(target.shape)}")
        nbytes = target.size * 8
        target[...] = np.frombuffer(payload, dtype="<f8", count=target.size, offset=offset).reshape(target.shape)
        offset += nbytes
    if isinstance(model.embedder, FixedNgramTable):
        model.embedder._cache.clear()
    return model


def load_model(path: str | Path) -> ParserModel:
    return model_from_bytes(Path(path).read_bytes())

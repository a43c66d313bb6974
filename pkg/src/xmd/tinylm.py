"""Tiny decoder-only transformer used as both the text teacher and the speech student.

The student is a copy of the teacher plus a linear speech adapter. Both models
share one teacher-forced forward pass; only the prefix embeddings differ
(token embeddings for text, pooled-and-projected frames for speech).
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor, no_grad

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>")
FORMAT_VERSION = "xmd1"
MASK_VALUE = -1e9

TEACHER = "teacher"
STUDENT = "student"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if toks[:4] != RESERVED:
            raise ValueError(f"vocab must start with reserved tokens {RESERVED}")
        if len(set(toks)) != len(toks):
            raise ValueError("vocab tokens must be distinct")
        if len(toks) < 8:
            raise ValueError(f"vocab needs at least 8 tokens, got {len(toks)}")

    @classmethod
    def build(cls, symbols: Sequence[str]) -> "Vocab":
        return cls(RESERVED + tuple(symbols))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq: int = 64
    frame_dim: int = 24

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def param_names(cfg: ModelConfig, role: str) -> list[str]:
    """Fixed parameter order; also the checkpoint serialization order."""
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        names += [f"l{i}.{n}" for n in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                                         "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]
    names += ["lnf_g", "lnf_b", "w_out"]
    if role == STUDENT:
        names += ["adapter_w", "adapter_b"]
    return names


def param_shapes(cfg: ModelConfig, role: str) -> dict[str, tuple[int, ...]]:
    d, V, f = cfg.d_model, cfg.vocab_size, cfg.d_ff
    by_suffix = {
        "ln1_g": (d,), "ln1_b": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln2_g": (d,), "ln2_b": (d,), "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }
    top = {
        "tok_emb": (V, d), "pos_emb": (cfg.max_seq, d), "lnf_g": (d,), "lnf_b": (d,),
        "w_out": (d, V), "adapter_w": (cfg.frame_dim, d), "adapter_b": (d,),
    }
    return {n: top[n] if n in top else by_suffix[n.split(".", 1)[1]]
            for n in param_names(cfg, role)}


@dataclass
class ModelParams:
    config: ModelConfig
    vocab: Vocab
    role: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def has_adapter(self) -> bool:
        return "adapter_w" in self.tensors

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in param_names(self.config, self.role)]

    def set_trainable(self, flag: bool) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.vocab, self.role,
                           {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                            for n, t in self.tensors.items()})

    def to_bytes(self) -> bytes:
        header = {
            "format": FORMAT_VERSION,
            "role": self.role,
            "config": asdict(self.config),
            "vocab": list(self.vocab.tokens),
            "params": [[n, list(self.tensors[n].shape)]
                       for n in param_names(self.config, self.role)],
        }
        buf = io.BytesIO()
        buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in param_names(self.config, self.role):
            buf.write(np.ascontiguousarray(self.tensors[n].data, dtype="<f8").tobytes())
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "ModelParams":
        nl = raw.find(b"\n")
        if nl < 0:
            raise CheckpointError(f"{source}: missing header line")
        try:
            header = json.loads(raw[:nl].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{source}: line 1: bad header ({exc})") from None
        if header.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"{source}: field 'format': expected {FORMAT_VERSION!r}, "
                                  f"got {header.get('format')!r}")
        role = header.get("role")
        if role not in (TEACHER, STUDENT):
            raise CheckpointError(f"{source}: field 'role': unknown role {role!r}")
        cfg = ModelConfig(**header["config"])
        vocab = Vocab(tuple(header["vocab"]))
        shapes = param_shapes(cfg, role)
        expected = [[n, list(s)] for n, s in shapes.items()]
        if header.get("params") != expected:
            raise CheckpointError(f"{source}: field 'params': layout does not match config")
        body = raw[nl + 1:]
        total = sum(int(np.prod(s)) for s in shapes.values())
        if len(body) != 8 * total:
            raise CheckpointError(f"{source}: body holds {len(body)} bytes, expected {8 * total}")
        flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
        tensors, off = {}, 0
        for n, s in shapes.items():
            k = int(np.prod(s))
            tensors[n] = Tensor(flat[off:off + k].reshape(s).copy(), name=n)
            off += k
        return cls(cfg, vocab, role, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_bytes(Path(path).read_bytes(), source=str(path))


def init_teacher(cfg: ModelConfig, vocab: Vocab, seed: int) -> ModelParams:
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocab has {len(vocab)} tokens but config expects {cfg.vocab_size}")
    rng = np.random.default_rng(seed)
    resid = 1.0 / np.sqrt(2 * cfg.n_layers)
    tensors = {}
    for n, s in param_shapes(cfg, TEACHER).items():
        suffix = n.split(".", 1)[-1]
        if suffix.endswith("_g"):
            arr = np.ones(s)
        elif suffix.endswith("_b") or suffix in ("b1", "b2"):
            arr = np.zeros(s)
        elif n in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.5, s)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(s[0]), s)
            if suffix in ("wo", "w2"):
                arr *= resid
        tensors[n] = Tensor(arr, name=n)
    return ModelParams(cfg, vocab, TEACHER, tensors)


def init_student_from_teacher(teacher: ModelParams, seed: int) -> ModelParams:
    """Copy every teacher weight bit-exact and attach a fresh speech adapter."""
    if teacher.role != TEACHER:
        raise ValueError(f"expected teacher params, got role {teacher.role!r}")
    cfg = teacher.config
    rng = np.random.default_rng(seed)
    tensors = {n: Tensor(t.data.copy(), name=n) for n, t in teacher.tensors.items()}
    tensors["adapter_w"] = Tensor(rng.uniform(-0.1, 0.1, (cfg.frame_dim, cfg.d_model)),
                                  name="adapter_w")
    tensors["adapter_b"] = Tensor(rng.uniform(-0.1, 0.1, (cfg.d_model,)), name="adapter_b")
    return ModelParams(cfg, teacher.vocab, STUDENT, tensors)


def embed_text(params: ModelParams, tokens) -> Tensor:
    """Embedding rows for a token sequence (n,) or a batch of equal-length ones (B, n)."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise ValueError("embed_text: empty token sequence")
    return tn.take(params["tok_emb"], ids)


def pool_frames(frames: np.ndarray) -> np.ndarray:
    """Mean over consecutive frame pairs along axis -2; an odd tail frame stands alone."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[-2]
    half = n // 2
    pairs = frames[..., : 2 * half, :]
    pooled = 0.5 * (pairs[..., 0::2, :] + pairs[..., 1::2, :])
    if n % 2:
        pooled = np.concatenate([pooled, frames[..., n - 1:, :]], axis=-2)
    return pooled


def encode_speech(params: ModelParams, frames) -> Tensor:
    """Speech prefix: pool frame pairs, then the affine adapter into model space."""
    if params.role != STUDENT or not params.has_adapter:
        raise ValueError("encode_speech: only the student consumes speech")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[-2] == 0:
        raise ValueError(f"encode_speech: need at least one frame, got shape {frames.shape}")
    if frames.shape[-1] != params.config.frame_dim:
        raise tn.ShapeError("encode_speech", frames.shape, params["adapter_w"].shape,
                            detail="frame_dim mismatch")
    pooled = Tensor(pool_frames(frames))
    return tn.matmul(pooled, params["adapter_w"]) + params["adapter_b"]


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    m = _MASKS.get(T)
    if m is None:
        m = np.triu(np.full((T, T), MASK_VALUE), k=1)
        _MASKS[T] = m
    return m


def _block(x: Tensor, p: ModelParams, i: int, mask: np.ndarray) -> Tensor:
    cfg = p.config
    B, T, d = x.shape
    h = cfg.n_heads
    dh = d // h
    pre = f"l{i}."
    a_in = tn.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
    q = tn.transpose(tn.reshape(a_in @ p[pre + "wq"], (B, T, h, dh)), (0, 2, 1, 3))
    k = tn.transpose(tn.reshape(a_in @ p[pre + "wk"], (B, T, h, dh)), (0, 2, 3, 1))
    v = tn.transpose(tn.reshape(a_in @ p[pre + "wv"], (B, T, h, dh)), (0, 2, 1, 3))
    scores = tn.add(tn.scale(tn.matmul(q, k), 1.0 / np.sqrt(dh)), Tensor(mask))
    att = tn.matmul(tn.softmax(scores), v)
    att = tn.reshape(tn.transpose(att, (0, 2, 1, 3)), (B, T, d))
    x = x + att @ p[pre + "wo"]
    f_in = tn.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
    hid = tn.relu(f_in @ p[pre + "w1"] + p[pre + "b1"])
    return x + (hid @ p[pre + "w2"] + p[pre + "b2"])


def _pad_targets(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(t) for t in targets)
    ids = np.full((len(targets), L), PAD, dtype=np.int64)
    mask = np.zeros((len(targets), L))
    for b, t in enumerate(targets):
        ids[b, : len(t)] = t
        mask[b, : len(t)] = 1.0
    return ids, mask


def forward_batch(params: ModelParams, prefix: Tensor,
                  targets: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced logits for a batch sharing one prefix length.

    Input layout per row is ``prefix | SEP | BOS y_1 .. y_{L-1}``; the logits
    returned at answer position i predict ``y_{i+1}``. Shorter targets are
    right-padded, which causal masking keeps invisible to real positions.
    Returns ``(logits (B, L, V), mask (B, L))``.
    """
    if prefix.data.ndim != 3:
        raise tn.ShapeError("forward_lm", prefix.shape, detail="prefix must be (B, n, d)")
    if len(targets) != prefix.shape[0]:
        raise ValueError(f"forward_lm: {prefix.shape[0]} prefixes but {len(targets)} targets")
    if any(len(t) == 0 for t in targets):
        raise ValueError("forward_lm: empty target sequence")
    cfg = params.config
    B, n, d = prefix.shape
    ids, mask = _pad_targets(targets)
    L = ids.shape[1]
    T = n + 1 + L
    if T > cfg.max_seq:
        raise ValueError(f"forward_lm: sequence length {T} exceeds max_seq {cfg.max_seq}")
    inp = np.empty((B, 1 + L), dtype=np.int64)
    inp[:, 0] = SEP
    inp[:, 1] = BOS
    inp[:, 2:] = ids[:, :-1]
    x = tn.concat([prefix, tn.take(params["tok_emb"], inp)], axis=1)
    x = x + tn.take(params["pos_emb"], np.arange(T))
    m = _causal_mask(T)
    for i in range(cfg.n_layers):
        x = _block(x, params, i, m)
    x = tn.narrow(x, 1, n + 1, T)
    x = tn.layer_norm(x, params["lnf_g"], params["lnf_b"])
    return x @ params["w_out"], mask


def forward_lm(params: ModelParams, prefix: Tensor, targets: Sequence[int]) -> Tensor:
    """Single-sequence forward: prefix (n, d) and targets of length L give (L, V) logits."""
    logits, _ = forward_batch(params, tn.reshape(prefix, (1,) + prefix.shape), [list(targets)])
    return tn.reshape(logits, logits.shape[1:])


def greedy_decode_batch(params: ModelParams, prefix: Tensor, max_len: int) -> list[list[int]]:
    """Greedy answers for a batch of equal-length prefixes.

    Each answer holds at most ``max_len`` tokens and always ends in EOS; when no
    EOS is chosen within ``max_len - 1`` steps, EOS fills the last slot. Ties
    go to the lowest token id.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    B = prefix.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    gen = np.zeros((B, 0), dtype=np.int64)
    with no_grad():
        prefix = prefix.detach()
        for step in range(max_len - 1):
            tgt = [list(row) + [PAD] for row in gen]
            logits, _ = forward_batch(params, prefix, tgt)
            nxt = np.argmax(logits.data[:, step, :], axis=-1)
            for b in range(B):
                if not done[b]:
                    out[b].append(int(nxt[b]))
                    done[b] = nxt[b] == EOS
            if all(done):
                break
            gen = np.concatenate([gen, np.where(done, PAD, nxt)[:, None]], axis=1)
    for b in range(B):
        if not done[b]:
            out[b].append(EOS)
    return out


def greedy_decode(params: ModelParams, prefix: Tensor, max_len: int) -> list[int]:
    return greedy_decode_batch(params, tn.reshape(prefix.detach(), (1,) + prefix.shape), max_len)[0]

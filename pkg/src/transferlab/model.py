"""Toy encoder-decoder transformer on top of the autodiff engine.

Parameters are float32 masters; all graph math is float64. Training
mutates a model in place through ``Adam.step``; decoding helpers run
without building graphs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID = 0

_PRESETS = {
    "small": dict(layers=2, d_model=64, heads=2, d_ff=128),
    "base": dict(layers=3, d_model=128, heads=4, d_ff=256),
    "large": dict(layers=4, d_model=256, heads=4, d_ff=512),
}

_MAGIC = b"DOT5"
_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    preset: str
    layers: int
    d_model: int
    heads: int
    d_ff: int
    max_len: int
    vocab_size: int
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if min(self.layers, self.d_model, self.heads, self.d_ff, self.max_len, self.vocab_size) < 1:
            raise ValueError("all model dimensions must be positive")

    @classmethod
    def from_preset(cls, preset: str, vocab_size: int, max_len: int, seed: int = 0) -> "ModelConfig":
        if preset not in _PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(_PRESETS)}")
        return cls(preset=preset, max_len=max_len, vocab_size=vocab_size, seed=seed, **_PRESETS[preset])


@dataclass
class AttentionTrace:
    """Cross-attention weights: (decoder step, layer, head, source position)."""

    weights: np.ndarray

    @property
    def steps(self) -> int:
        return self.weights.shape[0]

    def row(self, step: int, layer: int, head: int) -> np.ndarray:
        return self.weights[step, layer, head]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Checkpoint-order parameter name -> shape map for a config."""
    d, h, f, v, m = cfg.d_model, cfg.heads, cfg.d_ff, cfg.vocab_size, cfg.max_len
    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (v, d), "enc.pos": (m, d), "dec.pos": (m, d)}

    def attn(prefix: str):
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{nm}"] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.{nm}"] = (d,)

    def ln(prefix: str):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ff(prefix: str):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ff(f"enc.{i}.ff")
    ln("enc.final_ln")
    for i in range(cfg.layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ff(f"dec.{i}.ff")
    ln("dec.final_ln")
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = _init_params(config)
        self.params = params
        self._leaves: dict[str, Tensor] | None = None

    def graph_leaves(self) -> dict[str, Tensor]:
        """Fresh graph leaves for one forward/backward episode."""
        self._leaves = {
            name: Tensor(arr.astype(np.float64), requires_grad=True) for name, arr in self.params.items()
        }
        return self._leaves

    def gradients(self) -> dict[str, np.ndarray]:
        if self._leaves is None:
            raise RuntimeError("no forward graph; call a loss before reading gradients")
        return {name: leaf.grad for name, leaf in self._leaves.items() if leaf.grad is not None}

    def copy(self) -> "Seq2SeqModel":
        return Seq2SeqModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def bos_id(self) -> int:
        return 1  # vocab layout pins BOS right after PAD

    @property
    def eos_id(self) -> int:
        return 2


def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    # fan-in scaling: flat 0.02 keeps attention logits too uniform for the
    # routing circuits to form within a desk-scale step budget
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0DE]))
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = rng.normal(0.0, (1.0 / shape[0]) ** 0.5, size=shape).astype(np.float32)
        params[name] = arr
    return params


def _validate_ids(cfg: ModelConfig, ids, what: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a nonempty 1-D id sequence")
    if arr.size > cfg.max_len:
        raise ValueError(f"{what} length {arr.size} exceeds max_len {cfg.max_len}")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise ValueError(f"{what} contains ids outside [0, {cfg.vocab_size})")
    return arr


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.add(x, ad.mul(mu, -1.0))
    var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
    inv = ad.power(ad.add(var, eps), -0.5)
    return ad.add(ad.mul(ad.mul(centered, inv), g), b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return ad.transpose(ad.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, l, h * dk))


def _attention(
    leaves: dict[str, Tensor],
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    heads: int,
    mask: np.ndarray | None,
    capture: list | None = None,
) -> Tensor:
    q = _split_heads(_linear(q_in, leaves[f"{prefix}.wq"], leaves[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(kv_in, leaves[f"{prefix}.wk"], leaves[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(kv_in, leaves[f"{prefix}.wv"], leaves[f"{prefix}.bv"]), heads)
    dk = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = ad.add(scores, mask)
    attn = ad.softmax_last(scores)
    if capture is not None:
        capture.append(attn.data.copy())
    ctx = _merge_heads(ad.matmul(attn, v))
    return _linear(ctx, leaves[f"{prefix}.wo"], leaves[f"{prefix}.bo"])


def _key_mask(ids: np.ndarray) -> np.ndarray:
    # additive mask over PAD keys, shape (B, 1, 1, L)
    bad = ids == PAD_ID
    mask = np.where(bad, -1e30, 0.0)
    return mask[:, None, None, :]


def _causal_mask(length: int) -> np.ndarray:
    mask = np.triu(np.full((length, length), -1e30), k=1)
    return mask[None, None, :, :]


def encode_batch(model: Seq2SeqModel, leaves: dict[str, Tensor], src: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Run the encoder stack; returns hidden states and the source key mask."""
    cfg = model.config
    b, ls = src.shape
    x = ad.add(ad.gather_rows(leaves["embed.tokens"], src), ad.take_rows(leaves["enc.pos"], ls))
    kmask = _key_mask(src)
    for i in range(cfg.layers):
        h = _layer_norm(x, leaves[f"enc.{i}.ln1.g"], leaves[f"enc.{i}.ln1.b"])
        x = ad.add(x, _attention(leaves, f"enc.{i}.attn", h, h, cfg.heads, kmask))
        h = _layer_norm(x, leaves[f"enc.{i}.ln2.g"], leaves[f"enc.{i}.ln2.b"])
        ff = _linear(ad.relu(_linear(h, leaves[f"enc.{i}.ff.w1"], leaves[f"enc.{i}.ff.b1"])),
                     leaves[f"enc.{i}.ff.w2"], leaves[f"enc.{i}.ff.b2"])
        x = ad.add(x, ff)
    x = _layer_norm(x, leaves["enc.final_ln.g"], leaves["enc.final_ln.b"])
    return x, kmask


def decode_batch(
    model: Seq2SeqModel,
    leaves: dict[str, Tensor],
    enc_out: Tensor,
    src_kmask: np.ndarray,
    tgt_in: np.ndarray,
    capture: list | None = None,
) -> Tensor:
    """Decoder stack over teacher-forced inputs; returns (B, Lt, vocab) logits."""
    cfg = model.config
    b, lt = tgt_in.shape
    x = ad.add(ad.gather_rows(leaves["embed.tokens"], tgt_in), ad.take_rows(leaves["dec.pos"], lt))
    cmask = _causal_mask(lt)
    for i in range(cfg.layers):
        h = _layer_norm(x, leaves[f"dec.{i}.ln1.g"], leaves[f"dec.{i}.ln1.b"])
        x = ad.add(x, _attention(leaves, f"dec.{i}.self", h, h, cfg.heads, cmask))
        h = _layer_norm(x, leaves[f"dec.{i}.ln2.g"], leaves[f"dec.{i}.ln2.b"])
        x = ad.add(x, _attention(leaves, f"dec.{i}.cross", h, enc_out, cfg.heads, src_kmask, capture=capture))
        h = _layer_norm(x, leaves[f"dec.{i}.ln3.g"], leaves[f"dec.{i}.ln3.b"])
        ff = _linear(ad.relu(_linear(h, leaves[f"dec.{i}.ff.w1"], leaves[f"dec.{i}.ff.b1"])),
                     leaves[f"dec.{i}.ff.w2"], leaves[f"dec.{i}.ff.b2"])
        x = ad.add(x, ff)
    x = _layer_norm(x, leaves["dec.final_ln.g"], leaves["dec.final_ln.b"])
    return _linear(x, leaves["out.w"], leaves["out.b"])


def shift_right(tgt: np.ndarray, bos_id: int) -> np.ndarray:
    """Teacher-forcing decoder input: BOS followed by target minus its last id."""
    out = np.empty_like(tgt)
    out[..., 0] = bos_id
    out[..., 1:] = tgt[..., :-1]
    return out


def forward(model: Seq2SeqModel, src_ids, tgt_ids, capture: bool = False):
    """Teacher-forced logits for one (source, target) pair.

    Row ``t`` of the result scores the prediction of ``tgt_ids[t]``. With
    ``capture`` set, also returns the cross-attention trace.
    """
    cfg = model.config
    src = _validate_ids(cfg, src_ids, "src_ids")[None, :]
    tgt = _validate_ids(cfg, tgt_ids, "tgt_ids")[None, :]
    leaves = model.graph_leaves()
    captured: list | None = [] if capture else None
    enc_out, kmask = encode_batch(model, leaves, src)
    logits = decode_batch(model, leaves, enc_out, kmask, shift_right(tgt, model.bos_id), capture=captured)
    logits = ad.reshape(logits, logits.shape[1:])
    trace = None
    if capture:
        # captured: layers x (1, heads, Lt, Ls) -> (steps, layers, heads, Ls)
        stacked = np.stack([c[0] for c in captured], axis=0)
        trace = AttentionTrace(weights=stacked.transpose(2, 0, 1, 3))
    return logits, trace


def nll_teacher_forced(logits, target_ids, pad_id: int = PAD_ID) -> Tensor:
    """Mean negative log-likelihood over non-PAD target positions."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    target = np.asarray(target_ids, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise ValueError("logits and target shapes disagree")
    keep = (target != pad_id).astype(np.float64)
    n = keep.sum()
    if n == 0:
        raise ValueError("all-PAD target: mean NLL undefined")
    logp = ad.log_softmax_last(logits)
    flat = ad.reshape(logp, (-1, logits.shape[-1]))
    rows = np.arange(target.size)
    picked = ad.gather_pick(flat, rows, target.reshape(-1))
    masked = ad.mul(picked, keep.reshape(-1))
    return ad.mul(ad.tsum(masked), -1.0 / n)


def batched_token_mean_nll(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Per-item token-mean NLL, then mean over items of a padded batch."""
    b, l, v = logits.shape
    keep = (targets != pad_id).astype(np.float64)
    counts = keep.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("batch item with all-PAD target")
    logp = ad.log_softmax_last(logits)
    flat = ad.reshape(logp, (b * l, v))
    rows = np.arange(b * l)
    picked = ad.reshape(ad.gather_pick(flat, rows, targets.reshape(-1)), (b, l))
    per_item = ad.tsum(ad.mul(picked, keep), axis=1)
    weights = -1.0 / (counts * b)
    return ad.tsum(ad.mul(per_item, weights))


def backward(loss: Tensor) -> None:
    loss.backward()


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m.setdefault(name, np.zeros(g.shape, dtype=np.float64))
            v = self.v.setdefault(name, np.zeros(g.shape, dtype=np.float64))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1**self.t)
            vhat = v / (1.0 - self.beta2**self.t)
            update = params[name].astype(np.float64) - lr * mhat / (np.sqrt(vhat) + self.eps)
            params[name] = update.astype(np.float32)


def apply_gradients(model: Seq2SeqModel, optimizer: Adam, lr: float) -> None:
    optimizer.step(model.params, model.gradients(), lr)


def _last_step_logprobs(model: Seq2SeqModel, enc_out: Tensor, kmask: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
    leaves = model._leaves
    logits = decode_batch(model, leaves, enc_out, kmask, prefixes)
    last = logits.data[:, -1, :]
    shifted = last - last.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _tile_encoding(enc_out: Tensor, kmask: np.ndarray, n: int) -> tuple[Tensor, np.ndarray]:
    return Tensor(np.repeat(enc_out.data, n, axis=0)), np.repeat(kmask, n, axis=0)


def greedy_decode(model: Seq2SeqModel, src_ids, max_len: int) -> list[int]:
    """Argmax decoding; returns generated ids without the terminating EOS."""
    cfg = model.config
    src = _validate_ids(cfg, src_ids, "src_ids")[None, :]
    max_len = min(max_len, cfg.max_len)
    with ad.no_grad():
        leaves = model.graph_leaves()
        enc_out, kmask = encode_batch(model, leaves, src)
        out: list[int] = []
        for _ in range(max_len):
            prefix = np.array([[model.bos_id, *out]], dtype=np.int64)
            lp = _last_step_logprobs(model, enc_out, kmask, prefix)[0]
            nxt = int(lp.argmax())
            if nxt == model.eos_id:
                break
            out.append(nxt)
    return out


def beam_search(model: Seq2SeqModel, src_ids, beam: int, k: int, max_len: int) -> list[tuple[list[int], float]]:
    """Top-``k`` of a ``beam``-wide search, sorted by total log-probability.

    Hypotheses end at EOS (whose log-probability is included in the score)
    or at ``max_len``. Returned sequences exclude the EOS terminator.
    """
    if not 1 <= k <= beam:
        raise ValueError("need 1 <= k <= beam")
    cfg = model.config
    src = _validate_ids(cfg, src_ids, "src_ids")[None, :]
    max_len = min(max_len, cfg.max_len - 1)
    with ad.no_grad():
        leaves = model.graph_leaves()
        enc_src, kmask_src = encode_batch(model, leaves, src)
        hyps: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
        for _ in range(max_len):
            live = [h for h in hyps if not h[2]]
            if not live:
                break
            prefixes = np.array([[model.bos_id, *ids] for ids, _, _ in live], dtype=np.int64)
            enc_out, kmask = _tile_encoding(enc_src, kmask_src, len(live))
            lp = _last_step_logprobs(model, enc_out, kmask, prefixes)
            pool = [h for h in hyps if h[2]]
            width = min(beam, lp.shape[1])
            for (ids, score, _), row in zip(live, lp):
                top = np.argpartition(-row, width - 1)[:width]
                for v in top:
                    v = int(v)
                    pool.append(((*ids, v), score + float(row[v]), v == model.eos_id))
            pool.sort(key=lambda h: (-h[1], h[0]))
            hyps = pool[:beam]
            if all(h[2] for h in hyps):
                break
    results = []
    for ids, score, finished in hyps[:k]:
        seq = list(ids[:-1]) if finished else list(ids)
        results.append((seq, score))
    return results


def score_candidates(model: Seq2SeqModel, src_ids, candidates: list[list[int]]) -> list[float]:
    """Teacher-forced total log-probability of each candidate sequence."""
    if not candidates:
        raise ValueError("candidates must be nonempty")
    cfg = model.config
    src = _validate_ids(cfg, src_ids, "src_ids")[None, :]
    lengths = [len(c) for c in candidates]
    if min(lengths) == 0:
        raise ValueError("empty candidate")
    lt = max(lengths)
    tgt = np.full((len(candidates), lt), PAD_ID, dtype=np.int64)
    for i, cand in enumerate(candidates):
        _validate_ids(cfg, cand, "candidate")
        tgt[i, : len(cand)] = cand
    with ad.no_grad():
        leaves = model.graph_leaves()
        enc_out, kmask = encode_batch(model, leaves, src)
        enc_out, kmask = _tile_encoding(enc_out, kmask, len(candidates))
        logits = decode_batch(model, leaves, enc_out, kmask, shift_right(tgt, model.bos_id)).data
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    scores = []
    for i, n in enumerate(lengths):
        scores.append(float(logp[i, np.arange(n), tgt[i, :n]].sum()))
    return scores


def save_checkpoint(model: Seq2SeqModel, path: str) -> None:
    """Binary format: magic, u32 version, u32 count, then per-tensor records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(model.params)))
        for name, arr in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str, config: ModelConfig) -> Seq2SeqModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def pull(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if pull(4) != _MAGIC:
        raise BadMagicError("bad checkpoint magic")
    (version,) = struct.unpack("<I", pull(4))
    if version != _VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", pull(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", pull(4))
        name = pull(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", pull(4))
        dims = struct.unpack(f"<{rank}Q", pull(8 * rank))
        n_items = int(np.prod(dims)) if rank else 1
        payload = pull(4 * n_items)
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after final tensor record")
    expected = parameter_shapes(config)
    if set(params) != set(expected):
        raise ShapeMismatchError("checkpoint tensor names do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {params[name].shape}, config wants {shape}")
    return Seq2SeqModel(config, params)

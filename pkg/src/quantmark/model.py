"""Tiny character-level decoder-only transformer with an fp32 and a
simulated-INT8 inference mode."""
from __future__ import annotations

import enum
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from . import tokenizer as tok
from .optim import AdamW
from .quant import QuantizedMatrix, fake_quant, quantize
from .tensor import DTYPE, Tensor


class Mode(str, enum.Enum):
    FP32 = "fp32"
    INT8 = "int8"


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = tok.VOCAB_SIZE
    context_len: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be at least 2")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    quantizable: bool

    def __post_init__(self):
        if self.quantizable and self.tensor.data.ndim != 2:
            raise ValueError(f"quantizable parameter {self.name} must be rank-2")


def _param_specs(cfg: ModelConfig):
    """(name, shape, init std or 'ones'/'zeros', quantizable) in canonical order."""
    d, V = cfg.d_model, cfg.vocab_size
    proj_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    yield "tok_emb", (V, d), 0.02, False
    yield "pos_emb", (cfg.context_len, d), 0.01, False
    for i in range(cfg.n_layers):
        p = f"block{i}"
        yield f"{p}.ln1.g", (d,), "ones", False
        yield f"{p}.ln1.b", (d,), "zeros", False
        for w in ("wq", "wk", "wv"):
            yield f"{p}.attn.{w}", (d, d), 0.02, True
            yield f"{p}.attn.b{w[1]}", (d,), "zeros", False
        yield f"{p}.attn.wo", (d, d), proj_std, True
        yield f"{p}.attn.bo", (d,), "zeros", False
        yield f"{p}.ln2.g", (d,), "ones", False
        yield f"{p}.ln2.b", (d,), "zeros", False
        yield f"{p}.mlp.w1", (4 * d, d), 0.02, True
        yield f"{p}.mlp.b1", (4 * d,), "zeros", False
        yield f"{p}.mlp.w2", (d, 4 * d), proj_std, True
        yield f"{p}.mlp.b2", (d,), "zeros", False
    yield "ln_f.g", (d,), "ones", False
    yield "ln_f.b", (d,), "zeros", False
    yield "head.w", (V, d), 0.02, True


class LanguageModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.mode = Mode.FP32
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Parameter] = {}
        for name, shape, init, quantizable in _param_specs(config):
            if init == "ones":
                data = np.ones(shape, DTYPE)
            elif init == "zeros":
                data = np.zeros(shape, DTYPE)
            else:
                data = (rng.standard_normal(shape) * init).astype(DTYPE)
            self.params[name] = Parameter(name, Tensor(data, requires_grad=True, name=name), quantizable)

    # parameter access -----------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def names(self) -> list[str]:
        return list(self.params)

    def quantizable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.quantizable]

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"state dict does not match architecture: {sorted(missing)[:5]}")
        for n, arr in state.items():
            t = self.params[n].tensor
            if t.data.shape != arr.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.data.shape}")
            t.data = np.array(arr, dtype=DTYPE)

    def copy(self) -> "LanguageModel":
        other = LanguageModel.__new__(LanguageModel)
        other.config = self.config
        other.mode = self.mode
        other.params = {
            n: Parameter(n, Tensor(p.tensor.data.copy(), requires_grad=p.tensor.requires_grad, name=n),
                         p.quantizable)
            for n, p in self.params.items()
        }
        return other

    def quantized(self) -> dict[str, QuantizedMatrix]:
        return {n: quantize(self[n].data) for n in self.quantizable_names()}

    def num_params(self) -> int:
        return int(np.sum([t.size for t in self.tensors()]))

    @contextmanager
    def using(self, mode: Mode | str):
        prev = self.mode
        self.mode = Mode(mode)
        try:
            yield self
        finally:
            self.mode = prev

    # forward --------------------------------------------------------------

    def effective_weights(self, mode: Mode | str | None = None, ste: bool = False) -> dict[str, Tensor]:
        """Tensors used by the forward pass in ``mode``.

        In INT8 mode quantizable weights are replaced by D(Q(w)). With
        ``ste`` the replacement passes gradients straight through to w.
        """
        mode = Mode(mode or self.mode)
        if mode is Mode.FP32:
            return {n: p.tensor for n, p in self.params.items()}
        out = {}
        for n, p in self.params.items():
            if not p.quantizable:
                out[n] = p.tensor
            elif ste:
                out[n] = _straight_through(p.tensor, fake_quant(p.tensor.data))
            else:
                out[n] = Tensor(fake_quant(p.tensor.data))
        return out

    def forward(self, tokens, mode: Mode | str | None = None, weights: dict[str, Tensor] | None = None) -> Tensor:
        """Next-token logits, shape (B, T, vocab) for (B, T) input or (T, vocab) for (T,)."""
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        B, L = ids.shape
        if L > cfg.context_len:
            raise ValueError(f"sequence of length {L} exceeds context_len {cfg.context_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        W = weights if weights is not None else self.effective_weights(mode)
        H = cfg.n_heads
        hd = cfg.d_model // H
        inv_sqrt = DTYPE(1.0 / math.sqrt(hd))

        x = T.embedding(W["tok_emb"], ids) + T.embedding(W["pos_emb"], np.arange(L))
        for i in range(cfg.n_layers):
            p = f"block{i}."
            h = T.layer_norm(x, W[p + "ln1.g"], W[p + "ln1.b"])

            def heads(name):
                y = _linear(h, W[p + f"attn.w{name}"], W[p + f"attn.b{name}"])
                return T.transpose(T.reshape(y, (B, L, H, hd)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            att = T.causal_softmax(T.matmul(q, T.transpose(k)) * inv_sqrt)
            y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, cfg.d_model))
            x = x + _linear(y, W[p + "attn.wo"], W[p + "attn.bo"])
            h = T.layer_norm(x, W[p + "ln2.g"], W[p + "ln2.b"])
            h = T.gelu(_linear(h, W[p + "mlp.w1"], W[p + "mlp.b1"]))
            x = x + _linear(h, W[p + "mlp.w2"], W[p + "mlp.b2"])
        x = T.layer_norm(x, W["ln_f.g"], W["ln_f.b"])
        logits = T.matmul(x, T.transpose(W["head.w"]))
        if single:
            logits = T.reshape(logits, (L, cfg.vocab_size))
        return logits

    __call__ = forward


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = T.matmul(x, T.transpose(w))
    return y if b is None else y + b


def _straight_through(src: Tensor, value: np.ndarray) -> Tensor:
    out = Tensor(value)
    if src.requires_grad:
        out.requires_grad = True
        out._parents = (src,)
        out._backward = lambda g: T._accumulate(src, g)
    return out


# batches and losses --------------------------------------------------------

@dataclass
class Example:
    """A token sequence with per-target loss weights (len(weights) == len(ids) - 1)."""
    ids: list[int]
    weights: list[float]


def lm_example(text: str, context_len: int) -> Example:
    ids = [tok.BOS] + tok.encode(text) + [tok.EOS]
    ids = ids[: context_len + 1]
    return Example(ids, [1.0] * (len(ids) - 1))


def continuation_example(prompt: str, continuation: str, context_len: int, eos: bool = True) -> Example:
    """Loss only on the tokens of ``continuation`` (and EOS) after ``prompt``."""
    head = [tok.BOS] + tok.encode(prompt)
    tail = tok.encode(continuation) + ([tok.EOS] if eos else [])
    ids = (head + tail)[: context_len + 1]
    weights = [0.0] * (len(head) - 1) + [1.0] * len(tail)
    return Example(ids, weights[: len(ids) - 1])


def collate(examples: list[Example]):
    L = max(len(e.ids) for e in examples) - 1
    B = len(examples)
    inputs = np.full((B, L), tok.PAD, np.int64)
    targets = np.full((B, L), tok.PAD, np.int64)
    weights = np.zeros((B, L), DTYPE)
    for b, e in enumerate(examples):
        n = len(e.ids) - 1
        inputs[b, :n] = e.ids[:-1]
        targets[b, :n] = e.ids[1:]
        weights[b, :n] = e.weights
    return inputs, targets, weights


def batch_loss(model: LanguageModel, examples: list[Example], mode=None, weights=None) -> Tensor:
    if not examples:
        raise ValueError("empty batch")
    inputs, targets, w = collate(examples)
    logits = model.forward(inputs, mode=mode, weights=weights)
    B, L, V = logits.shape
    return T.cross_entropy(T.reshape(logits, (B * L, V)), targets.reshape(-1), w.reshape(-1))


def mean_loss(model: LanguageModel, examples: list[Example], mode=None, batch_size: int = 64) -> float:
    """Token-weighted mean loss over ``examples`` (no graph kept)."""
    total = 0.0
    count = 0.0
    W = model.effective_weights(mode)
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        n = float(np.sum([np.sum(e.weights) for e in chunk]))
        total += batch_loss(model, chunk, weights=_detached(W)).item() * n
        count += n
    return total / count


def _detached(W: dict[str, Tensor]) -> dict[str, Tensor]:
    return {n: Tensor(t.data) for n, t in W.items()}


# generation ---------------------------------------------------------------

def generate_batch(model: LanguageModel, prompts: list[str], max_new: int, mode=None) -> list[str]:
    """Greedy continuations for several prompts at once.

    Sequences are right-padded; because attention is causal, the logits at a
    sequence's last real position do not depend on the padding.
    """
    if max_new < 0:
        raise ValueError("max_new must be non-negative")
    ctx = model.config.context_len
    seqs = []
    for p in prompts:
        ids = [tok.BOS] + tok.encode(p)
        if len(ids) - 1 + max_new > ctx:
            raise ValueError(f"prompt of {len(ids) - 1} chars + max_new {max_new} exceeds context_len {ctx}")
        seqs.append(ids)
    out: list[list[int]] = [[] for _ in prompts]
    if max_new == 0 or not prompts:
        return ["" for _ in prompts]
    W = _detached(model.effective_weights(mode))
    live = list(range(len(prompts)))
    for _ in range(max_new):
        L = max(len(seqs[b]) for b in live)
        batch = np.full((len(live), L), tok.PAD, np.int64)
        for j, b in enumerate(live):
            batch[j, :len(seqs[b])] = seqs[b]
        logits = model.forward(batch, weights=W).data
        still = []
        for j, b in enumerate(live):
            nxt = int(np.argmax(logits[j, len(seqs[b]) - 1]))
            if nxt == tok.EOS:
                continue
            out[b].append(nxt)
            seqs[b].append(nxt)
            still.append(b)
        live = still
        if not live:
            break
    return [tok.decode(o) for o in out]


def generate(model: LanguageModel, prompt: str, max_new: int, mode=None) -> str:
    return generate_batch(model, [prompt], max_new, mode)[0]


# training -----------------------------------------------------------------

def train_steps(model: LanguageModel, sample_batch, steps: int, lr: float, *, weight_decay: float = 0.0,
                trainable: list[str] | None = None, loss_fn=None, after_step=None,
                log: list | None = None) -> LanguageModel:
    """Generic AdamW loop shared by base training, planting and erasing.

    ``sample_batch(step)`` returns a list of Examples; ``loss_fn(model, batch)``
    defaults to ``batch_loss``; ``after_step(step)`` runs after each update
    and may return True to stop early.
    """
    names = trainable if trainable is not None else model.names()
    for n in model.names():
        model[n].requires_grad = n in names
    opt = AdamW([model[n] for n in names], lr=lr, weight_decay=weight_decay)
    loss_fn = loss_fn or batch_loss
    try:
        for step in range(steps):
            batch = sample_batch(step)
            opt.zero_grad()
            loss = loss_fn(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} at step {step}")
            loss.backward()
            opt.step()
            if log is not None:
                log.append(value)
            if after_step is not None and after_step(step):
                break
    finally:
        for t in model.tensors():
            t.grad = None
            t.requires_grad = True
    return model


def train_base(model: LanguageModel, corpus: list[str], steps: int, lr: float = 3e-4, *, batch_size: int = 16,
               seed: int = 0, weight_decay: float = 0.01, log: list | None = None) -> LanguageModel:
    if not corpus:
        raise ValueError("corpus is empty")
    examples = [lm_example(t, model.config.context_len) for t in corpus]
    rng = np.random.default_rng(seed)

    def sample(_step):
        idx = rng.integers(0, len(examples), size=batch_size)
        return [examples[i] for i in idx]

    return train_steps(model, sample, steps, lr, weight_decay=weight_decay, log=log)

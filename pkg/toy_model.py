"""
Toy Autoregressive Model
A small causal transformer written in numpy with hand-derived gradients,
the two calibration objectives, AdamW with cosine warmup, and checkpoints.

Architecture (microgpt layout):
  - token + position embeddings
  - N blocks of RMSNorm -> causal multi-head attention -> residual,
    RMSNorm -> ReLU MLP -> residual (no biases, no norm gains)
  - final RMSNorm and a zero-initialized output projection
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from token_trie import TokenTrie, Vocabulary

logger = logging.getLogger(__name__)

RMS_EPS = 1.0e-5
PROB_FLOOR = 1.0e-30
LOG_FLOOR = math.log(PROB_FLOOR)
OFF_TRIE_LOGIT = -1.0e4
CHECKPOINT_VERSION = 1


class ContextLengthError(ValueError):
    """Raised when a token sequence exceeds the model context."""

    def __init__(self, message: str = "Sequence exceeds the model context length"):
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the loss trace so far."""

    def __init__(self, message: str = "Training diverged", trace: Optional[List[Dict]] = None):
        super().__init__(message)
        self.trace = list(trace or [])


@dataclass
class ModelConfig:
    context_length: int = 64
    width: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> 'ModelConfig':
        data = data or {}
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> Dict:
        return asdict(self)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, temperature))


def _rmsnorm(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rmsnorm_backward(dn: np.ndarray, n: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


class ToyTransformer:
    """Parameters live in ``self.params``; forward / backward are pure numpy."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.vocab = vocab
        self.vocab_size = len(vocab)
        self.temperature = config.temperature
        self.params = params if params is not None else self._init_params(np.random.default_rng(config.seed))

    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        c = self.config
        width, hidden = c.width, c.width * c.mlp_ratio
        std = 1.0 / math.sqrt(width)
        params = {
            'wte': rng.normal(0.0, std, (self.vocab_size, width)),
            'wpe': rng.normal(0.0, std, (c.context_length, width)),
        }
        for layer in range(c.layers):
            pre = f'layer{layer}.'
            for name in ('attn_wq', 'attn_wk', 'attn_wv', 'attn_wo'):
                params[pre + name] = rng.normal(0.0, std, (width, width))
            params[pre + 'mlp_fc1'] = rng.normal(0.0, std, (width, hidden))
            params[pre + 'mlp_fc2'] = rng.normal(0.0, std, (hidden, width))
        params['lm_head'] = np.zeros((width, self.vocab_size))
        return params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> 'ToyTransformer':
        return ToyTransformer(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})

    # -- forward -----------------------------------------------------------

    def forward(self, tokens, return_cache: bool = False):
        """Logits for every position of a (T,) or (B, T) token array."""
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        batch, length = tokens.shape
        if length > self.config.context_length:
            raise ContextLengthError(
                f"Sequence of length {length} exceeds context {self.config.context_length}")
        x = self.params['wte'][tokens] + self.params['wpe'][:length]
        mask = np.triu(np.ones((length, length), dtype=bool), k=1)
        blocks = []
        for layer in range(self.config.layers):
            x, cache = self._block_forward(layer, x, mask)
            blocks.append(cache)
        nf, rf = _rmsnorm(x)
        logits = nf @ self.params['lm_head']
        out = logits[0] if single else logits
        if not return_cache:
            return out
        return out, {'tokens': tokens, 'blocks': blocks, 'nf': nf, 'rf': rf, 'single': single}

    def next_logits(self, tokens: np.ndarray) -> np.ndarray:
        """Logits at the last position of each row of a (B, T) batch."""
        return self.forward(np.asarray(tokens)[None, :] if np.ndim(tokens) == 1 else tokens)[:, -1]

    def _block_forward(self, layer: int, x: np.ndarray, mask: np.ndarray):
        p = self.params
        pre = f'layer{layer}.'
        batch, length, width = x.shape
        heads = self.config.heads
        hd = width // heads
        scale = 1.0 / math.sqrt(hd)

        n1, r1 = _rmsnorm(x)
        q = (n1 @ p[pre + 'attn_wq']).reshape(batch, length, heads, hd).transpose(0, 2, 1, 3)
        k = (n1 @ p[pre + 'attn_wk']).reshape(batch, length, heads, hd).transpose(0, 2, 1, 3)
        v = (n1 @ p[pre + 'attn_wv']).reshape(batch, length, heads, hd).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask, -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att = att / att.sum(axis=-1, keepdims=True)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(batch, length, width)
        xa = x + y @ p[pre + 'attn_wo']

        n2, r2 = _rmsnorm(xa)
        h = n2 @ p[pre + 'mlp_fc1']
        hr = np.maximum(h, 0.0)
        out = xa + hr @ p[pre + 'mlp_fc2']
        cache = {'n1': n1, 'r1': r1, 'q': q, 'k': k, 'v': v, 'att': att, 'y': y,
                 'n2': n2, 'r2': r2, 'h': h, 'hr': hr, 'scale': scale}
        return out, cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache: Dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of sum(dlogits * logits) w.r.t. every parameter."""
        p = self.params
        dlogits = np.asarray(dlogits, dtype=float)
        if cache['single']:
            dlogits = dlogits[None]
        tokens = cache['tokens']
        batch, length = tokens.shape
        grads: Dict[str, np.ndarray] = {}

        grads['lm_head'] = _flat(cache['nf']).T @ _flat(dlogits)
        dx = _rmsnorm_backward(dlogits @ p['lm_head'].T, cache['nf'], cache['rf'])
        for layer in reversed(range(self.config.layers)):
            dx = self._block_backward(layer, dx, cache['blocks'][layer], grads)

        dwte = np.zeros_like(p['wte'])
        np.add.at(dwte, tokens.reshape(-1), _flat(dx))
        dwpe = np.zeros_like(p['wpe'])
        dwpe[:length] = dx.sum(axis=0)
        grads['wte'] = dwte
        grads['wpe'] = dwpe
        return grads

    def _block_backward(self, layer: int, dout: np.ndarray, c: Dict, grads: Dict[str, np.ndarray]) -> np.ndarray:
        p = self.params
        pre = f'layer{layer}.'
        batch, length, width = dout.shape
        heads = self.config.heads
        hd = width // heads

        grads[pre + 'mlp_fc2'] = _flat(c['hr']).T @ _flat(dout)
        dh = (dout @ p[pre + 'mlp_fc2'].T) * (c['h'] > 0)
        grads[pre + 'mlp_fc1'] = _flat(c['n2']).T @ _flat(dh)
        dxa = dout + _rmsnorm_backward(dh @ p[pre + 'mlp_fc1'].T, c['n2'], c['r2'])

        grads[pre + 'attn_wo'] = _flat(c['y']).T @ _flat(dxa)
        dy = (dxa @ p[pre + 'attn_wo'].T).reshape(batch, length, heads, hd).transpose(0, 2, 1, 3)
        att = c['att']
        datt = dy @ c['v'].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dy
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * c['scale']
        dq = dscores @ c['k']
        dk = dscores.transpose(0, 1, 3, 2) @ c['q']

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(batch, length, width)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        n1 = _flat(c['n1'])
        grads[pre + 'attn_wq'] = n1.T @ _flat(dq)
        grads[pre + 'attn_wk'] = n1.T @ _flat(dk)
        grads[pre + 'attn_wv'] = n1.T @ _flat(dv)
        dn1 = dq @ p[pre + 'attn_wq'].T + dk @ p[pre + 'attn_wk'].T + dv @ p[pre + 'attn_wv'].T
        return dxa + _rmsnorm_backward(dn1, c['n1'], c['r1'])


class TriePolicy:
    """Tabular policy that emits the trie targets exactly after each prompt.

    Off-trie tokens get a logit of -1e4, so softmax(z / tau) equals q on the
    trie children. Positions outside any known prompt emit uniform logits.
    """

    def __init__(self, vocab: Vocabulary, tries: Mapping[Tuple[int, ...], TokenTrie],
                 context_length: int = 64, temperature: float = 1.0):
        self.vocab = vocab
        self.vocab_size = len(vocab)
        self.tries = dict(tries)
        self.temperature = temperature
        self.config = ModelConfig(context_length=context_length, temperature=temperature)
        self.params: Dict[str, np.ndarray] = {}

    @classmethod
    def from_targets(cls, vocab: Vocabulary, items: Iterable[Tuple[Sequence[int], TokenTrie]],
                     **kwargs) -> 'TriePolicy':
        return cls(vocab, {tuple(int(t) for t in prompt): trie for prompt, trie in items}, **kwargs)

    def _row_logits(self, row: Sequence[int], position: int) -> np.ndarray:
        z = np.zeros(self.vocab_size)
        sep = self.vocab.sep_id
        try:
            s = list(row[:position + 1]).index(sep)
        except ValueError:
            return z
        trie = self.tries.get(tuple(int(t) for t in row[:s + 1]))
        if trie is None:
            return z
        node = trie.find([int(t) for t in row[s + 1:position + 1]])
        if node is None or not node.children:
            return z
        z[:] = OFF_TRIE_LOGIT
        for tok, child in node.children.items():
            z[tok] = math.log(child.prefix_mass / node.prefix_mass)
        return z * self.temperature

    def forward(self, tokens, return_cache: bool = False):
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        batch, length = tokens.shape
        if length > self.config.context_length:
            raise ContextLengthError(
                f"Sequence of length {length} exceeds context {self.config.context_length}")
        logits = np.zeros((batch, length, self.vocab_size))
        memo: Dict[Tuple[int, ...], np.ndarray] = {}
        for b in range(batch):
            row = tokens[b].tolist()
            for j in range(length):
                key = tuple(row[:j + 1])
                if key not in memo:
                    memo[key] = self._row_logits(row, j)
                logits[b, j] = memo[key]
        out = logits[0] if single else logits
        return (out, None) if return_cache else out

    def next_logits(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        memo: Dict[Tuple[int, ...], np.ndarray] = {}
        out = np.zeros((tokens.shape[0], self.vocab_size))
        for b, row in enumerate(tokens.tolist()):
            key = tuple(row)
            if key not in memo:
                memo[key] = self._row_logits(row, len(row) - 1)
            out[b] = memo[key]
        return out

    def backward(self, cache, dlogits) -> Dict[str, np.ndarray]:
        return {}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _completion_forward(model, prompt_tokens: Sequence[int], completion: Sequence[int], with_cache: bool):
    seq = [int(t) for t in prompt_tokens] + [int(t) for t in completion[:-1]]
    if with_cache:
        logits, cache = model.forward(seq, return_cache=True)
    else:
        logits, cache = model.forward(seq), None
    start = len(prompt_tokens) - 1
    return logits, cache, start


def _soft_terms(model, prompt_tokens, trie: TokenTrie, path: Sequence[int], with_grad: bool):
    targets = trie.path_targets(path)
    logits, cache, start = _completion_forward(model, prompt_tokens, path, with_grad)
    tau = model.temperature
    n = len(targets)
    rows = logits[start:start + n]
    logp = log_softmax(rows, tau)
    loss = 0.0
    dlogits = np.zeros_like(logits) if with_grad else None
    for k, q in enumerate(targets):
        ids = np.fromiter(q.keys(), dtype=np.int64, count=len(q))
        qv = np.fromiter(q.values(), dtype=float, count=len(q))
        lp = np.maximum(logp[k, ids], LOG_FLOOR)
        loss += float(np.sum(qv * (np.log(qv) - lp)))
        if with_grad:
            g = np.exp(logp[k]) * qv.sum()
            g[ids] -= qv
            dlogits[start + k] = g / (tau * n)
    return loss / n, cache, dlogits


def path_kl(model, prompt_tokens: Sequence[int], trie: TokenTrie, path: Sequence[int]) -> float:
    """Mean over the path's prefixes of KL(q(.|p) || pi(.|prompt, p)), summed over trie children."""
    loss, _, _ = _soft_terms(model, prompt_tokens, trie, path, with_grad=False)
    return loss


def soft_loss(model, prompt_tokens: Sequence[int], trie: TokenTrie,
              sampled_path: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
    loss, cache, dlogits = _soft_terms(model, prompt_tokens, trie, sampled_path, with_grad=True)
    return loss, model.backward(cache, dlogits)


def hard_loss(model, prompt_tokens: Sequence[int],
              completion_tokens: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean NLL over completion tokens only; prompt positions carry no loss."""
    completion = [int(t) for t in completion_tokens]
    logits, cache, start = _completion_forward(model, prompt_tokens, completion, True)
    tau = model.temperature
    n = len(completion)
    logp = log_softmax(logits[start:start + n], tau)
    picked = np.maximum(logp[np.arange(n), completion], LOG_FLOOR)
    loss = float(-picked.mean())
    g = np.exp(logp)
    g[np.arange(n), completion] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[start:start + n] = g / (tau * n)
    return loss, model.backward(cache, dlogits)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 2.0e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.03
    total_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def for_model(cls, model, **kwargs) -> 'OptimizerState':
        opt = cls(**kwargs)
        opt.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        opt.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return opt

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(round(self.warmup_fraction * self.total_steps, 9)))

    def scalars(self) -> Dict:
        return {k: getattr(self, k) for k in (
            'learning_rate', 'weight_decay', 'warmup_fraction', 'total_steps',
            'beta1', 'beta2', 'eps', 'step')}


def schedule(opt: OptimizerState, step: int) -> float:
    """Linear warmup over ceil(warmup_fraction * total) steps, then cosine to zero."""
    total = opt.total_steps
    if total <= 0:
        return 0.0
    warm = opt.warmup_steps
    if step < warm:
        return opt.learning_rate * step / warm
    if total <= warm:
        return opt.learning_rate
    progress = min(max((step - warm) / (total - warm), 0.0), 1.0)
    return opt.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(opt: OptimizerState, model, gradients: Mapping[str, np.ndarray]) -> float:
    """Decoupled weight decay, then the bias-corrected Adam update. Returns the lr used."""
    for name, grad in gradients.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"Non-finite gradient for {name} at step {opt.step}")
    lr = schedule(opt, min(opt.step, opt.total_steps))
    t = opt.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name, param in model.params.items():
        grad = gradients.get(name)
        if grad is None:
            continue
        param *= (1.0 - lr * opt.weight_decay)
        m = opt.m.setdefault(name, np.zeros_like(param))
        v = opt.v.setdefault(name, np.zeros_like(param))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * grad * grad
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    opt.step += 1
    return lr


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: ToyTransformer, opt: Optional[OptimizerState] = None,
                    extra: Optional[Mapping] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f'param/{k}': v for k, v in model.params.items()}
    if opt is not None:
        arrays.update({f'm/{k}': v for k, v in opt.m.items()})
        arrays.update({f'v/{k}': v for k, v in opt.v.items()})
    meta = {
        'format_version': CHECKPOINT_VERSION,
        'model_config': model.config.to_dict(),
        'vocab': model.vocab.to_list(),
        'param_names': list(model.params),
        'shapes': {k: list(v.shape) for k, v in model.params.items()},
        'optimizer': opt.scalars() if opt is not None else None,
        'extra': dict(extra or {}),
    }
    arrays['meta'] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_suffix(path.suffix + '.tmp')
    with tmp.open('wb') as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ToyTransformer, Optional[OptimizerState], Dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(data['meta'].item())
        if meta.get('format_version') != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint format {meta.get('format_version')} in {path}")
        vocab = Vocabulary(meta['vocab'])
        config = ModelConfig.from_dict(meta['model_config'])
        params = {k: data[f'param/{k}'].copy() for k in meta['param_names']}
        opt = None
        if meta.get('optimizer') is not None:
            opt = OptimizerState(**meta['optimizer'])
            opt.m = {k: data[f'm/{k}'].copy() for k in meta['param_names'] if f'm/{k}' in data.files}
            opt.v = {k: data[f'v/{k}'].copy() for k in meta['param_names'] if f'v/{k}' in data.files}
    model = ToyTransformer(config, vocab, params)
    logger.debug(f"[CHECKPOINT] loaded {path} ({model.num_parameters()} parameters)")
    return model, opt, meta.get('extra', {})

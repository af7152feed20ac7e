"""Tiny autoregressive categorical policy with hand-derived gradients.

Architecture, per decoding step ``t`` (``h_0 = 0``, ``x_0`` = start row)::

    a_t = embed[x_{t-1}] + context @ ctx_proj + h_{t-1} @ mix + b_hidden
    h_t = tanh(a_t)
    z_t = h_t @ head + b_out

Token distributions are ``softmax(z_t / temperature)`` restricted to an
optional boolean mask of admissible tokens. Everything is float64 numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteLogits

TENSORS = ("embed", "ctx_proj", "mix", "head", "b_hidden", "b_out")
DEFAULT_MAX_LEN = 32
DEFAULT_PARAM_CAP = 50_000

ADAM_RULE = (
    "t+=1; m=b1*m+(1-b1)*g; v=b2*v+(1-b2)*g^2; "
    "p-=lr*(m/(1-b1^t))/(sqrt(v/(1-b2^t))+eps) on entries with g!=0 only"
)


@dataclass
class PolicyParams:
    embed: np.ndarray  # (vocab + 1, d); last row is the start-of-sequence input
    ctx_proj: np.ndarray  # (ctx_dim, d)
    mix: np.ndarray  # (d, d)
    head: np.ndarray  # (d, vocab)
    b_hidden: np.ndarray  # (d,)
    b_out: np.ndarray  # (vocab,)
    init_seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.head.shape[1]

    @property
    def ctx_dim(self) -> int:
        return self.ctx_proj.shape[0]

    @property
    def hidden(self) -> int:
        return self.mix.shape[0]

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in TENSORS)

    def dims(self) -> dict:
        return {"vocab_size": self.vocab_size, "ctx_dim": self.ctx_dim, "hidden": self.hidden}

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in TENSORS}

    def copy(self) -> "PolicyParams":
        return replace(self, **{n: getattr(self, n).copy() for n in TENSORS})

    def zeros_like(self) -> "PolicyParams":
        return replace(self, **{n: np.zeros_like(getattr(self, n)) for n in TENSORS})

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in TENSORS])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        out, k = {}, 0
        for n in TENSORS:
            a = getattr(self, n)
            out[n] = np.array(vec[k : k + a.size], dtype=np.float64).reshape(a.shape)
            k += a.size
        return replace(self, **out)

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, n)).all() for n in TENSORS)

    def equals(self, other: "PolicyParams") -> bool:
        """Bit-identical comparison of every tensor."""
        return all(
            getattr(self, n).shape == getattr(other, n).shape
            and getattr(self, n).tobytes() == getattr(other, n).tobytes()
            for n in TENSORS
        )


def init_params(
    vocab_size: int,
    ctx_dim: int,
    hidden: int,
    seed: int,
    scale: float = 1.0,
    max_params: int = DEFAULT_PARAM_CAP,
) -> PolicyParams:
    """Gaussian init scaled by ``scale / sqrt(fan_in)``; biases start at zero."""
    n = (vocab_size + 1) * hidden + ctx_dim * hidden + hidden * hidden + hidden * vocab_size
    n += hidden + vocab_size
    if n > max_params:
        raise ValueError(f"policy would have {n} parameters, cap is {max_params}")
    rng = np.random.default_rng(int(seed))
    return PolicyParams(
        embed=rng.normal(0.0, scale, (vocab_size + 1, hidden)),
        ctx_proj=rng.normal(0.0, scale / math.sqrt(max(ctx_dim, 1)), (ctx_dim, hidden)),
        mix=rng.normal(0.0, scale / math.sqrt(hidden), (hidden, hidden)),
        head=rng.normal(0.0, scale / math.sqrt(hidden), (hidden, vocab_size)),
        b_hidden=np.zeros(hidden),
        b_out=np.zeros(vocab_size),
        init_seed=int(seed),
    )


def zero_params(vocab_size: int, ctx_dim: int, hidden: int) -> PolicyParams:
    """All-zero policy: every step distribution is uniform over the mask."""
    return init_params(vocab_size, ctx_dim, hidden, seed=0, scale=0.0)


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of a policy; its arrays refuse in-place writes."""

    params: PolicyParams
    step: int = 0


def snapshot(params: PolicyParams, step: int = 0) -> PolicySnapshot:
    frozen = params.copy()
    for n in TENSORS:
        getattr(frozen, n).flags.writeable = False
    return PolicySnapshot(frozen, int(step))


def as_params(p: PolicyParams | PolicySnapshot) -> PolicyParams:
    return p.params if isinstance(p, PolicySnapshot) else p


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    text: str
    logprob_sum: float
    per_step_logprobs: tuple[float, ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------------------
# Numerics


def masked_log_softmax(z: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Row-wise log-softmax over the last axis; masked-out entries get -inf."""
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _check_finite(z: np.ndarray) -> None:
    if not np.isfinite(z).all():
        raise NonFiniteLogits(f"non-finite logits (max |z| = {np.nanmax(np.abs(z))})")


def _broadcast_mask(mask, batch: int, vocab: int) -> np.ndarray | None:
    """Normalize a token mask to (B, V) or per-step (B, T, V).

    Accepted inputs: (V,) shared static, (B, V) per-row static,
    (B, T, V) per-row per-step.
    """
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, vocab))
    if mask.shape[0] != batch or mask.shape[-1] != vocab:
        raise ValueError(f"mask shape {mask.shape} does not fit batch {batch} x vocab {vocab}")
    return mask


def _mask_at(mask: np.ndarray | None, t: int) -> np.ndarray | None:
    if mask is None or mask.ndim == 2:
        return mask
    return mask[:, t] if t < mask.shape[1] else mask[:, -1]


@dataclass
class ForwardCache:
    contexts: np.ndarray  # (B, C)
    inputs: np.ndarray  # (B, T) token fed at each step (start row = vocab)
    targets: np.ndarray  # (B, T) token emitted at each step (padded with 0)
    valid: np.ndarray  # (B, T) bool
    h: np.ndarray  # (B, T, d)
    logp: np.ndarray  # (B, T, V) temperature-1 masked log-probs
    mask: np.ndarray | None  # (B, V) or (B, T, V)


def pad_tokens(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(1, max((len(s) for s in seqs), default=1))
    tokens = np.zeros((len(seqs), T), dtype=np.int64)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for b, s in enumerate(seqs):
        tokens[b, : len(s)] = s
        valid[b, : len(s)] = True
    return tokens, valid


def forward(params: PolicyParams, contexts, seqs: Sequence[Sequence[int]], mask=None) -> ForwardCache:
    """Teacher-forced pass over a batch of token sequences."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    B = contexts.shape[0]
    V, d = params.vocab_size, params.hidden
    targets, valid = pad_tokens(seqs)
    T = targets.shape[1]
    inputs = np.empty_like(targets)
    inputs[:, 0] = V
    inputs[:, 1:] = targets[:, :-1]
    mask = _broadcast_mask(mask, B, V)
    base = contexts @ params.ctx_proj + params.b_hidden
    h = np.zeros((B, T, d))
    logp = np.zeros((B, T, V))
    prev = np.zeros((B, d))
    for t in range(T):
        prev = np.tanh(params.embed[inputs[:, t]] + base + prev @ params.mix)
        z = prev @ params.head + params.b_out
        _check_finite(z)
        h[:, t] = prev
        logp[:, t] = masked_log_softmax(z, _mask_at(mask, t))
    return ForwardCache(contexts, inputs, targets, valid, h, logp, mask)


def token_logprobs(cache: ForwardCache) -> np.ndarray:
    """(B, T) log-prob of each target token; zero on padding."""
    lp = np.take_along_axis(cache.logp, cache.targets[..., None], axis=-1)[..., 0]
    return np.where(cache.valid, lp, 0.0)


def backward(params: PolicyParams, cache: ForwardCache, dlogits: np.ndarray) -> PolicyParams:
    """Back-propagate ``dL/dz`` of shape (B, T, V) through time.

    Entries of ``dlogits`` on padded steps or masked tokens must be zero.
    """
    grad = params.zeros_like()
    B, T, d = cache.h.shape
    da_next = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        dz = dlogits[:, t]
        h_t = cache.h[:, t]
        grad.head += h_t.T @ dz
        grad.b_out += dz.sum(axis=0)
        dh = dz @ params.head.T + da_next @ params.mix.T
        da = dh * (1.0 - h_t * h_t)
        h_prev = cache.h[:, t - 1] if t > 0 else np.zeros((B, d))
        grad.mix += h_prev.T @ da
        grad.ctx_proj += cache.contexts.T @ da
        grad.b_hidden += da.sum(axis=0)
        np.add.at(grad.embed, cache.inputs[:, t], da)
        da_next = da
    return grad


# ---------------------------------------------------------------------------
# Sampling


def sample_batch(
    params: PolicyParams | PolicySnapshot,
    contexts,
    uniforms: np.ndarray | None,
    temperature: float = 1.0,
    mask=None,
    end_id: int | None = 0,
    max_len: int = DEFAULT_MAX_LEN,
    greedy: bool = False,
    detokenize: Callable[[Sequence[int]], str] | None = None,
) -> list[TokenSequence]:
    """Decode one sequence per context row.

    ``uniforms`` has shape (B, max_len); token ``t`` of row ``b`` is chosen by
    inverse-CDF lookup of ``uniforms[b, t]``, so sampling is a pure function of
    its inputs. Greedy decoding ignores ``uniforms`` and records
    temperature-1 log-probs.
    """
    params = as_params(params)
    if not greedy and not temperature > 0:
        raise ValueError("temperature must be positive")
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if contexts.shape[1] != params.ctx_dim:
        raise ValueError(f"context length {contexts.shape[1]} != policy ctx_dim {params.ctx_dim}")
    B, V = contexts.shape[0], params.vocab_size
    if not greedy:
        uniforms = np.asarray(uniforms, dtype=np.float64).reshape(B, -1)
        if uniforms.shape[1] < max_len:
            raise ValueError("need one uniform per decoding step")
    mask = _broadcast_mask(mask, B, V)
    base = contexts @ params.ctx_proj + params.b_hidden
    h = np.zeros((B, params.hidden))
    prev_tok = np.full(B, V, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(B)]
    steps: list[list[float]] = [[] for _ in range(B)]
    rows = np.arange(B)
    for t in range(max_len):
        h = np.tanh(params.embed[prev_tok] + base + h @ params.mix)
        z = h @ params.head + params.b_out
        _check_finite(z)
        step_mask = _mask_at(mask, t)
        if greedy:
            logp = masked_log_softmax(z, step_mask)
            choice = np.argmax(logp, axis=-1)
        else:
            logp = masked_log_softmax(z / temperature, step_mask)
            probs = np.exp(logp)
            cdf = np.cumsum(probs, axis=-1)
            # number of cdf entries <= u, i.e. searchsorted(..., side="right") per row
            choice = (cdf <= uniforms[:, t : t + 1]).sum(axis=-1)
            over = choice >= V
            if over.any():
                # u landed above the rounded total mass: take the last admissible token
                last = V - 1 - np.argmax((probs > 0)[:, ::-1], axis=-1)
                choice = np.where(over, last, choice)
        chosen_lp = logp[rows, choice]
        for b in np.flatnonzero(~done):
            tokens[b].append(int(choice[b]))
            steps[b].append(float(chosen_lp[b]))
        if end_id is not None:
            done |= choice == end_id
        if done.all():
            break
        prev_tok = choice
    out = []
    for b in range(B):
        text = detokenize(tokens[b]) if detokenize else " ".join(map(str, tokens[b]))
        out.append(TokenSequence(tuple(tokens[b]), text, float(sum(steps[b])), tuple(steps[b])))
    return out


def sample_sequence(
    params: PolicyParams | PolicySnapshot,
    context,
    temperature: float,
    rng: np.random.Generator | None,
    mask=None,
    end_id: int | None = 0,
    max_len: int = DEFAULT_MAX_LEN,
    greedy: bool = False,
    detokenize=None,
) -> TokenSequence:
    """Sample one sequence; draws exactly ``max_len`` uniforms from ``rng``."""
    uniforms = None if greedy else rng.random((1, max_len))
    return sample_batch(
        params, [np.asarray(context, dtype=np.float64)], uniforms, temperature, mask,
        end_id, max_len, greedy, detokenize,
    )[0]


def sequence_logprob(params: PolicyParams | PolicySnapshot, context, seq, mask=None) -> float:
    """Exact temperature-1 log-probability of ``seq`` given ``context``."""
    tokens = seq.tokens if isinstance(seq, TokenSequence) else tuple(seq)
    if not tokens:
        return 0.0
    cache = forward(as_params(params), [context], [tokens], mask)
    return float(token_logprobs(cache)[0].sum())


def batch_logprobs(params: PolicyParams | PolicySnapshot, contexts, seqs, mask=None) -> np.ndarray:
    cache = forward(as_params(params), contexts, [s.tokens if isinstance(s, TokenSequence) else s for s in seqs], mask)
    return token_logprobs(cache).sum(axis=1)


def step_distributions(params: PolicyParams | PolicySnapshot, context, prefix, mask=None) -> np.ndarray:
    """Next-token distributions after each prefix of ``prefix``.

    Row ``t`` is the distribution of the token following ``prefix[:t]``; there
    are ``len(prefix) + 1`` rows.
    """
    cache = forward(as_params(params), [context], [tuple(prefix) + (0,)], mask)
    return np.exp(cache.logp[0])


def categorical_kl(p_logp: np.ndarray, q_logp: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis from log-probs; -inf entries carry no mass."""
    p = np.exp(p_logp)
    live = p > 0
    diff = np.where(live, p_logp, 0.0) - np.where(live & np.isfinite(q_logp), q_logp, 0.0)
    return np.where(live, p * diff, 0.0).sum(axis=-1)


def loss_gradient(params, snapshot, batch, hyper):
    """GRPO loss and its gradient; see :func:`coevolve.grpo.loss_and_grad`."""
    from .grpo import loss_and_grad

    loss, grad, _ = loss_and_grad(params, snapshot, batch, hyper)
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int
    m: PolicyParams
    v: PolicyParams
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(self.step, self.m.copy(), self.v.copy(), self.beta1, self.beta2, self.eps)


def adam_init(params: PolicyParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(0, params.zeros_like(), params.zeros_like(), beta1, beta2, eps)


def apply_update(
    params: PolicyParams, grad: PolicyParams, state: AdamState, lr: float
) -> tuple[PolicyParams, AdamState]:
    """One Adam step (see ``ADAM_RULE``); inputs are left untouched.

    Moments decay everywhere but only entries with a nonzero gradient move,
    so a zero gradient leaves the parameters exactly as they were.
    """
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    new_p, new_m, new_v = params.copy(), state.m.copy(), state.v.copy()
    for n in TENSORS:
        g = getattr(grad, n)
        if g.shape != getattr(params, n).shape:
            raise ValueError(f"gradient shape mismatch for {n}")
        m = b1 * getattr(state.m, n) + (1.0 - b1) * g
        v = b2 * getattr(state.v, n) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        delta = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        setattr(new_p, n, np.where(g != 0.0, getattr(params, n) - delta, getattr(params, n)))
        setattr(new_m, n, m)
        setattr(new_v, n, v)
    return new_p, AdamState(t, new_m, new_v, b1, b2, state.eps)

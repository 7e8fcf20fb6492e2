"""Residual energy-based models ``p~(x) = q0(x) * exp g(x)``.

The base ``q0`` is a frozen locally normalized model truncated at length
``T`` (the end marker is forced after ``T`` symbols).  The discriminator
sums per-position window scores and squashes the sum through a bounded
(``tanh2``) or one-sided (``softplus_neg``) activation.  Training uses the
ranking NCE objective; evaluation estimates the partition function by
sampling from ``q0``.  On the finite toy task every quantity also has an
exact counterpart computed by enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .errors import TrainingError, UndefinedKL
from .seqmodel import END, NgramSoftmax, Seq

SOFTPLUS_SHIFT = 20.0
Z_QUANTILE = 1.959963984540054  # two-sided 95% normal quantile


# -- activations ----------------------------------------------------------------

def tanh2(u):
    return 2.0 * np.tanh(u)


def tanh2_grad(u):
    return 2.0 * (1.0 - np.tanh(u) ** 2)


def softplus_neg(u, s: float = SOFTPLUS_SHIFT):
    return -np.logaddexp(0.0, np.asarray(u, dtype=float) + s)


def softplus_neg_grad(u, s: float = SOFTPLUS_SHIFT):
    return -expit(np.asarray(u, dtype=float) + s)


ACTIVATIONS = {
    "tanh2": (tanh2, tanh2_grad),
    "softplus": (softplus_neg, softplus_neg_grad),
}


# -- base model ---------------------------------------------------------------------

class TruncatedBase:
    """A frozen autoregressive model with the end marker forced at length ``T``."""

    def __init__(self, model, T: int):
        self.model = model
        self.T = T
        self.alphabet = "".join(model.symbols[:-1])
        self._unigram = None
        if isinstance(model, NgramSoftmax) and model.order == 1:
            w = model.params["W"][0]
            self._unigram = w - logsumexp(w)

    def logprob(self, x: str) -> float:
        if len(x) > self.T:
            return -math.inf
        if self._unigram is not None:
            idx = [self.model.sym_index[c] for c in x]
            stop = self._unigram[-1] if len(x) < self.T else 0.0
            return float(self._unigram[idx].sum() + stop)
        lp = self.model.log_conditionals([Seq((), x)])[0]
        tg = self.model.target_ids(Seq((), x))
        steps = lp[np.arange(len(x)), tg[:-1]].sum()
        return float(steps + (lp[len(x), -1] if len(x) < self.T else 0.0))

    def logprob_table(self, strings: Sequence[str]) -> np.ndarray:
        if self._unigram is None:
            return np.array([self.logprob(x) for x in strings])
        ids, lengths = encode_strings(strings, self.alphabet, self.T)
        logs = np.append(self._unigram[:-1], 0.0)   # pad index maps to log 1
        out = logs[np.where(ids < 0, len(self.alphabet), ids)].sum(axis=1)
        return out + np.where(lengths < self.T, self._unigram[-1], 0.0)

    def sample(self, rng: np.random.Generator) -> str:
        if self._unigram is None:
            return self.model.sample(rng, self.T).text
        p = np.exp(self._unigram)
        out = []
        while len(out) < self.T:
            k = int(rng.choice(len(p), p=p / p.sum()))
            if k == len(p) - 1:
                break
            out.append(self.alphabet[k])
        return "".join(out)

    def samples(self, rng: np.random.Generator, n: int) -> list[str]:
        return [self.sample(rng) for _ in range(n)]


def fit_unigram_base(strings: Iterable[str], alphabet: str, T: int,
                     smoothing: float = 0.5) -> TruncatedBase:
    """Maximum-likelihood unigram-plus-stop model under length truncation.

    A string of length ``T`` never emits the end marker, so only shorter
    strings contribute stop counts.
    """
    counts = np.full(len(alphabet) + 1, smoothing)
    index = {c: i for i, c in enumerate(alphabet)}
    for x in strings:
        for c in x:
            counts[index[c]] += 1
        if len(x) < T:
            counts[-1] += 1
    model = NgramSoftmax(1, tuple(alphabet) + (END,))
    model.params["W"] = np.log(counts / counts.sum())[None, :]
    return TruncatedBase(model, T)


def encode_strings(strings: Sequence[str], alphabet: str, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Symbol ids padded with ``-1`` to width ``T``, plus lengths."""
    index = {c: i for i, c in enumerate(alphabet)}
    ids = np.full((len(strings), T), -1, dtype=np.int64)
    lengths = np.zeros(len(strings), dtype=np.int64)
    for r, x in enumerate(strings):
        lengths[r] = len(x)
        ids[r, :len(x)] = [index[c] for c in x]
    return ids, lengths


# -- discriminator ------------------------------------------------------------------

class Discriminator:
    """Window scorer: one weight per adjacent pair, boundaries included.

    Position ``t`` scores the pair ``(x_t, x_{t+1})`` over the string padded
    with a boundary symbol on both sides, so every position sees its left
    and right neighbour.  ``g(x) = f(sum_t w[pair_t] + c)``.
    """

    def __init__(self, alphabet: str, T: int, activation: str = "tanh2", seed=0,
                 scale: float = 0.01):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.alphabet, self.T, self.activation = alphabet, T, activation
        self.B = len(alphabet)                 # boundary id
        self.n_pairs = (self.B + 1) ** 2
        rng = np.random.default_rng(seed)
        self.params = {"w": scale * rng.standard_normal(self.n_pairs), "c": np.zeros(1)}

    def copy(self) -> "Discriminator":
        other = Discriminator.__new__(Discriminator)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def pair_counts(self, strings: Sequence[str]) -> np.ndarray:
        ids, lengths = encode_strings(strings, self.alphabet, self.T)
        N = len(strings)
        padded = np.full((N, self.T + 2), -1, dtype=np.int64)
        padded[:, 0] = self.B
        padded[:, 1:self.T + 1] = ids
        padded[np.arange(N), lengths + 1] = self.B
        left, right = padded[:, :-1], padded[:, 1:]
        valid = (left >= 0) & (right >= 0)
        pid = np.where(valid, left * (self.B + 1) + right, 0)
        counts = np.zeros((N, self.n_pairs))
        np.add.at(counts, (np.repeat(np.arange(N), pid.shape[1]), pid.ravel()), valid.ravel())
        return counts

    def preactivation(self, counts: np.ndarray) -> np.ndarray:
        return counts @ self.params["w"] + self.params["c"][0]

    def score_counts(self, counts: np.ndarray) -> np.ndarray:
        f, _ = ACTIVATIONS[self.activation]
        return f(self.preactivation(counts))

    def score(self, strings: Sequence[str]) -> np.ndarray:
        return self.score_counts(self.pair_counts(strings))


class ConstantDiscriminator:
    """``g(x) = value`` everywhere; used for closed-form checks."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def score(self, strings: Sequence[str]) -> np.ndarray:
        return np.full(len(strings), float(self.value))


@dataclass
class RebmModel:
    base: TruncatedBase
    disc: object

    @property
    def T(self) -> int:
        return self.base.T

    def log_unnormalized(self, strings: Sequence[str]) -> np.ndarray:
        """``log q0(x) + g(x)``."""
        return self.base.logprob_table(strings) + self.disc.score(strings)


# -- ranking NCE ---------------------------------------------------------------------

def nce_loss_from_scores(g_data: float, g_noise: Sequence[float]) -> float:
    s = np.concatenate([[g_data], np.asarray(g_noise, dtype=float)])
    return float(-s[0] + logsumexp(s))


def nce_loss(m: RebmModel, x: str, noise: Sequence[str]) -> float:
    if not noise:
        raise ValueError("need at least one noise sample")
    s = m.disc.score([x] + list(noise))
    return nce_loss_from_scores(s[0], s[1:])


def nce_loss_and_grad(disc: Discriminator, data: Sequence[str],
                      noise: Sequence[Sequence[str]]) -> tuple[float, dict[str, np.ndarray]]:
    """Summed loss over ``data[i]`` ranked against ``noise[i]`` and its gradient."""
    K = len(noise[0])
    strings = []
    for x, ns in zip(data, noise):
        if len(ns) != K:
            raise ValueError("every item needs the same number of noise samples")
        strings += [x] + list(ns)
    counts = disc.pair_counts(strings)
    u = disc.preactivation(counts)
    f, df = ACTIVATIONS[disc.activation]
    g = f(u).reshape(len(data), K + 1)
    lse = logsumexp(g, axis=1)
    loss = float((lse - g[:, 0]).sum())
    ds = np.exp(g - lse[:, None])
    ds[:, 0] -= 1.0
    du = ds.ravel() * df(u)
    return loss, {"w": du @ counts, "c": np.array([du.sum()])}


@dataclass
class RebmTrainConfig:
    lr: float = 0.05
    batch: int = 16
    K: int = 25
    seed: int = 0
    max_epochs: int = 30
    patience: int = 1
    momentum: float = 0.9


@dataclass
class RebmTrainResult:
    disc: Discriminator
    train_curve: list[float] = field(default_factory=list)
    dev_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0


def dev_nce(disc: Discriminator, dev: Sequence[str], noise: Sequence[Sequence[str]]) -> float:
    loss, _ = nce_loss_and_grad(disc, dev, noise)
    return loss / len(dev)


def train_rebm(m: RebmModel, train: Sequence[str], dev: Sequence[str],
               cfg: RebmTrainConfig) -> RebmTrainResult:
    """Fit the discriminator with ranking NCE; ``q0`` stays frozen.

    Passes over the shuffled training data continue while the summed dev
    loss keeps decreasing (with ``cfg.patience`` extra epochs of grace).
    Dev noise is drawn once so successive dev losses are comparable.  The
    discriminator is replaced by the parameters at the best dev loss.
    """
    disc = m.disc
    rng = np.random.default_rng(cfg.seed)
    dev_noise = [m.base.samples(rng, cfg.K) for _ in dev]
    best = {k: v.copy() for k, v in disc.params.items()}
    best_loss = dev_nce(disc, dev, dev_noise)
    result = RebmTrainResult(disc, [], [best_loss], 0)
    velocity = {k: np.zeros_like(v) for k, v in disc.params.items()}
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            chunk = [train[k] for k in order[i:i + cfg.batch]]
            noise = [m.base.samples(rng, cfg.K) for _ in chunk]
            loss, grads = nce_loss_and_grad(disc, chunk, noise)
            if not math.isfinite(loss):
                disc.params = best
                raise TrainingError(f"NCE loss became {loss} in epoch {epoch}", checkpoint=disc)
            total += loss
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - cfg.lr * g / len(chunk)
                disc.params[k] += velocity[k]
        result.train_curve.append(total / len(train))
        loss = dev_nce(disc, dev, dev_noise)
        result.dev_curve.append(loss)
        if loss < best_loss:
            best_loss, stale, result.best_epoch = loss, 0, epoch
            best = {k: v.copy() for k, v in disc.params.items()}
        else:
            stale += 1
            if stale > cfg.patience:
                break
    disc.params = best
    return result


# -- partition function and metrics -----------------------------------------------------------

@dataclass(frozen=True)
class ZEstimate:
    mean: float
    M: int
    values: tuple[float, ...]
    seed: object

    @property
    def log_mean(self) -> float:
        return math.log(self.mean)


def estimate_Z(m: RebmModel, M: int, seed) -> ZEstimate:
    """Mean of ``exp g`` over ``M`` ancestral samples from ``q0``."""
    if M < 1:
        raise ValueError("M must be positive")
    rng = np.random.default_rng(seed)
    xs = m.base.samples(rng, M)
    values = np.exp(m.disc.score(xs))
    return ZEstimate(float(values.mean()), M, tuple(float(v) for v in values), seed)


def _log_z(z) -> float:
    return z.log_mean if isinstance(z, ZEstimate) else math.log(z)


def ll_improvement(m: RebmModel, test: Sequence[str], z) -> float:
    """Mean discriminator score minus ``log Z``, in nats per sequence.

    In expectation this is ``KL(p||q0) - KL(p||p_theta)``: positive values
    mean the residual model is closer to the data distribution.
    """
    return float(np.mean(m.disc.score(test))) - _log_z(z)


def token_count(test: Sequence[str]) -> int:
    """Tokens including each end marker."""
    return sum(len(x) + 1 for x in test)


def ppl_improvement(m: RebmModel, test: Sequence[str], z) -> float:
    """Perplexity ratio ``ppl(p_theta) / ppl(q0)``; below 1 is an improvement."""
    w = token_count(test)
    return math.exp((len(test) * _log_z(z) - float(np.sum(m.disc.score(test)))) / w)


def z_interval(estimates: Sequence[ZEstimate]) -> tuple[float, float, float]:
    """Normal 95% band of the individual estimates: ``(lo, mean, hi)``."""
    vals = np.array([e.mean for e in estimates])
    mu = float(vals.mean())
    sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return max(mu - Z_QUANTILE * sd, np.finfo(float).tiny), mu, mu + Z_QUANTILE * sd


def conservative_ppl_improvement(m: RebmModel, test: Sequence[str],
                                 estimates: Sequence[ZEstimate], end: str = "high") -> float:
    """Perplexity ratio at one end of the ``Z`` band.

    ``end="high"`` (the default) is the conservative choice: a larger
    partition function makes the ratio larger, i.e. the improvement smaller.
    """
    lo, mu, hi = z_interval(estimates)
    return ppl_improvement(m, test, {"high": hi, "low": lo, "mean": mu}[end])


@dataclass
class ImprovementReport:
    ll_improvement_ci: tuple[float, float, float]
    ppl_ratio: float
    ppl_improvement: float
    n_boot: int
    n_z: int
    M: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "ll_improvement": {"lo": self.ll_improvement_ci[0], "hi": self.ll_improvement_ci[1],
                               "mean": self.ll_improvement_ci[2]},
            "ppl_ratio": self.ppl_ratio,
            "ppl_improvement_percent": self.ppl_improvement,
            "bootstrap": {"resamples": self.n_boot, "z_estimates": self.n_z, "M": self.M},
            "seed": self.seed,
        }


def z_estimates(m: RebmModel, n_z: int, M: int, seed: int) -> list[ZEstimate]:
    return [estimate_Z(m, M, np.random.SeedSequence([seed, 1, i])) for i in range(n_z)]


def bootstrap_report(m: RebmModel, test: Sequence[str], n_boot: int = 1000, n_z: int = 32,
                     M: int = 512, seed: int = 0,
                     estimates: Optional[Sequence[ZEstimate]] = None) -> ImprovementReport:
    """Percentile interval of the log-likelihood improvement.

    Every (test resample, Z estimate) pair contributes one value; the
    interval is the 2.5 and 97.5 percentiles of that grid.
    """
    if estimates is None:
        estimates = z_estimates(m, n_z, M, seed)
    g = m.disc.score(test)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    idx = rng.integers(0, len(test), size=(n_boot, len(test)))
    boot_means = g[idx].mean(axis=1)
    log_z = np.array([e.log_mean for e in estimates])
    grid = boot_means[:, None] - log_z[None, :]
    lo, hi = np.percentile(grid, [2.5, 97.5])
    ratio = conservative_ppl_improvement(m, test, estimates)
    return ImprovementReport((float(lo), float(hi), float(grid.mean())), ratio,
                             100.0 * (1.0 - ratio), n_boot, len(estimates), M, seed)


# -- exact quantities on finite supports ----------------------------------------------------------

def kl(p: np.ndarray, q: np.ndarray) -> float:
    """``KL(p||q)`` for aligned probability vectors."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    on = p > 0
    if np.any(q[on] <= 0):
        raise UndefinedKL("q vanishes where p has mass")
    return float((p[on] * (np.log(p[on]) - np.log(q[on]))).sum())


def residual_distribution(q0: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalized ``q0 * exp g`` and its partition function."""
    w = np.asarray(q0, dtype=float) * np.exp(np.asarray(g, dtype=float))
    Z = float(w.sum())
    return w / Z, Z


def kl_decomposition(p, q0a, q0b, g) -> tuple[float, float]:
    """Both sides of the base-swap identity for a shared discriminator.

    ``lhs = KL(p||q'_theta) - KL(p||q''_theta)`` and
    ``rhs = KL(p||q'_0) - KL(p||q''_0) + log(Z'/Z'')``, all exact over the
    aligned finite support.
    """
    pa, Za = residual_distribution(q0a, g)
    pb, Zb = residual_distribution(q0b, g)
    lhs = kl(p, pa) - kl(p, pb)
    rhs = kl(p, q0a) - kl(p, q0b) + math.log(Za / Zb)
    return lhs, rhs


# -- the toy task ------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTask:
    """Uniform distribution over short strings avoiding forbidden bigrams."""

    alphabet: str = "abcd"
    T: int = 8
    forbidden: tuple[str, ...] = ("ab", "ba", "cd", "dc", "aa")

    def all_strings(self) -> list[str]:
        out = [""]
        for n in range(1, self.T + 1):
            out += ["".join(t) for t in product(self.alphabet, repeat=n)]
        return out

    def allowed(self, x: str) -> bool:
        return not any(x[i:i + 2] in self.forbidden for i in range(len(x) - 1))

    def support(self) -> list[str]:
        return [x for x in self.all_strings() if self.allowed(x)]

    def target(self) -> np.ndarray:
        """``p`` aligned with :meth:`all_strings`."""
        mask = np.array([self.allowed(x) for x in self.all_strings()], dtype=float)
        return mask / mask.sum()

    def sample(self, n: int, seed) -> list[str]:
        rng = np.random.default_rng(seed)
        sup = self.support()
        return [sup[i] for i in rng.integers(0, len(sup), size=n)]


@dataclass
class ExactToyReport:
    kl_base: float
    kl_residual: float
    Z: float
    ll_improvement_exact: float


def exact_toy_report(task: ToyTask, m: RebmModel) -> ExactToyReport:
    xs = task.all_strings()
    p = task.target()
    q0 = np.exp(m.base.logprob_table(xs))
    g = m.disc.score(xs)
    ptheta, Z = residual_distribution(q0, g)
    on = p > 0
    ll = float((p[on] * g[on]).sum()) - math.log(Z)
    return ExactToyReport(kl(p, q0), kl(p, ptheta), Z, ll)

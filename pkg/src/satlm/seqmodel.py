"""Locally normalized sequence models with hand-written gradients.

Three kinds share one interface:

* :class:`TrieExact` scores with exact conditionals from a known
  distribution over output strings (the reference model),
* :class:`NgramSoftmax` is a softmax table indexed by the previous
  ``order - 1`` output symbols,
* :class:`GatedRnn` is a stack of single-gate recurrent cells that first
  reads a context token sequence and then predicts the output symbols.

A training item is a :class:`Seq`: optional context token ids, the output
string (without the end marker) and an optional key used by exact models.
Every model predicts the output symbols and finally ``$``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

from .errors import TrainingError

END = "$"
BITS = ("0", "1", END)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Seq:
    context: tuple[int, ...]
    target: str
    key: Optional[Hashable] = None


@dataclass(frozen=True)
class Sample:
    text: str
    truncated: bool


class ContextVocab:
    """Token ids for modified-DIMACS text: ``#``, ``-`` and indices 1..max_var."""

    def __init__(self, max_var: int = 64):
        self.tokens = ["#", "-"] + [str(i) for i in range(1, max_var + 1)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> tuple[int, ...]:
        out = []
        for tok in text.split():
            if tok.startswith("-") and tok != "-":
                out += [self.index["-"], self.index[tok[1:]]]
            else:
                out.append(self.index[tok])
        return tuple(out)


def seq_from_example(example, vocab: ContextVocab) -> Seq:
    from .formula import dimacs_encode

    return Seq(vocab.encode(dimacs_encode(example.formula)), example.bits, key=example.formula)


# -- shared helpers -----------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ArModel:
    """Common interface.  Subclasses fill in :meth:`log_conditionals`."""

    kind = "abstract"
    trainable = True

    def __init__(self, symbols: Sequence[str] = BITS):
        symbols = tuple(symbols)
        if symbols[-1] != END:
            raise ValueError("the last symbol must be the end marker")
        self.symbols = symbols
        self.sym_index = {s: i for i, s in enumerate(symbols)}
        self.params: dict[str, np.ndarray] = {}

    @property
    def V(self) -> int:
        return len(self.symbols)

    def target_ids(self, seq: Seq) -> np.ndarray:
        return np.array([self.sym_index[c] for c in seq.target] + [self.V - 1], dtype=np.int64)

    def log_conditionals(self, batch: Sequence[Seq]) -> list[np.ndarray]:
        """Per item, a ``(len(target) + 1, V)`` array of teacher-forced log-probs."""
        raise NotImplementedError

    def loss_and_grad(self, batch: Sequence[Seq]) -> tuple[float, int, dict[str, np.ndarray]]:
        """Summed cross-entropy (nats), number of scored tokens, gradients."""
        raise NotImplementedError

    def sequence_nll(self, seq: Seq) -> float:
        lp = self.log_conditionals([seq])[0]
        return float(-lp[np.arange(len(lp)), self.target_ids(seq)].sum())

    def sample(self, seed, max_len: int, context: tuple[int, ...] = (),
               key: Optional[Hashable] = None) -> Sample:
        """Ancestral sampling until ``$`` or ``max_len`` symbols."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        text = ""
        while len(text) < max_len:
            lp = self.log_conditionals([Seq(context, text, key)])[0][-1]
            p = np.exp(lp)
            s = self.symbols[int(rng.choice(self.V, p=p / p.sum()))]
            if s == END:
                return Sample(text, False)
            text += s
        return Sample(text, True)

    # -- checkpoints ----------------------------------------------------------
    def meta(self) -> dict:
        return {"kind": self.kind, "symbols": list(self.symbols)}

    def save(self, path) -> None:
        buf = io.BytesIO()
        meta = dict(self.meta(), version=CHECKPOINT_VERSION)
        arrays = {f"p_{k}": v for k, v in sorted(self.params.items())}
        np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
        Path(path).write_bytes(buf.getvalue())

    def copy(self) -> "ArModel":
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def load_model(path) -> ArModel:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p_")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    kind = meta["kind"]
    if kind == "ngram_softmax":
        model: ArModel = NgramSoftmax(meta["order"], meta["symbols"])
    elif kind == "recurrent":
        model = GatedRnn(meta["context_size"], meta["hidden"], meta["layers"], meta["symbols"])
    elif kind == "trie_exact":
        return corpus_trie()
    else:
        raise ValueError(f"checkpoint kind {kind!r} has no parameters to load")
    model.params = params
    return model


# -- exact model --------------------------------------------------------------

class TrieExact(ArModel):
    """Exact conditionals of a distribution over output strings.

    ``support(key)`` returns ``{string: weight}`` for the item's key (the
    weights need not be normalized).  Prefix sums are cached per key.
    """

    kind = "trie_exact"
    trainable = False

    def __init__(self, support: Callable[[Hashable], dict], symbols: Sequence[str] = BITS,
                 floor: float = 0.0):
        super().__init__(symbols)
        self.support = support
        self.floor = floor
        self._tries: dict = {}

    def _trie(self, key):
        if key not in self._tries:
            mass: dict[str, float] = {}
            ends: dict[str, float] = {}
            for s, w in self.support(key).items():
                w = float(w)
                ends[s] = ends.get(s, 0.0) + w
                for i in range(len(s) + 1):
                    mass[s[:i]] = mass.get(s[:i], 0.0) + w
            self._tries[key] = (mass, ends)
        return self._tries[key]

    def conditional(self, key, prefix: str) -> np.ndarray:
        mass, ends = self._trie(key)
        total = mass.get(prefix, 0.0)
        if total <= 0:
            raise ValueError(f"prefix {prefix!r} has no mass under the exact model")
        p = np.array([mass.get(prefix + s, 0.0) for s in self.symbols[:-1]] + [ends.get(prefix, 0.0)])
        return p / total

    def log_conditionals(self, batch):
        out = []
        for seq in batch:
            rows = [self.conditional(seq.key, seq.target[:i]) for i in range(len(seq.target) + 1)]
            with np.errstate(divide="ignore"):
                out.append(np.log(np.maximum(np.array(rows), self.floor)))
        return out

    def meta(self):
        return {"kind": self.kind, "symbols": list(self.symbols)}


@lru_cache(maxsize=None)
def add_one_support(formula) -> dict[str, int]:
    """Uniform weights over the satisfiers of the add-one formula."""
    from .datagen import satisfier_mask

    j = formula.var_count
    out = {"0" * (j + 1): 1}
    for a in np.flatnonzero(satisfier_mask(formula)):
        out["1" + format(int(a), f"0{j}b")] = 1
    return out


def corpus_trie() -> TrieExact:
    return TrieExact(add_one_support)


# -- n-gram softmax -----------------------------------------------------------

class NgramSoftmax(ArModel):
    """Softmax over the next symbol given the previous ``order - 1`` symbols.

    Histories are padded on the left with a start symbol; context tokens
    are ignored.  ``order=1`` is a unigram-plus-stop model.
    """

    kind = "ngram_softmax"

    def __init__(self, order: int, symbols: Sequence[str] = BITS, seed=0, scale: float = 0.01):
        super().__init__(symbols)
        if order < 1:
            raise ValueError("order must be at least 1")
        self.order = order
        # history alphabet: the non-end symbols plus a start marker
        self.H = self.V
        rng = np.random.default_rng(seed)
        self.params = {"W": scale * rng.standard_normal((self.H ** (order - 1), self.V))}

    def meta(self):
        return {"kind": self.kind, "symbols": list(self.symbols), "order": self.order}

    def states(self, seq: Seq) -> np.ndarray:
        start = self.V - 1
        hist = [start] * (self.order - 1) + [self.sym_index[c] for c in seq.target]
        out = np.zeros(len(seq.target) + 1, dtype=np.int64)
        for t in range(len(seq.target) + 1):
            s = 0
            for h in hist[t:t + self.order - 1]:
                s = s * self.H + h
            out[t] = s
        return out

    def log_conditionals(self, batch):
        W = self.params["W"]
        return [_log_softmax(W[self.states(seq)]) for seq in batch]

    def loss_and_grad(self, batch):
        W = self.params["W"]
        grad = np.zeros_like(W)
        loss, tokens = 0.0, 0
        for seq in batch:
            st, tg = self.states(seq), self.target_ids(seq)
            lp = _log_softmax(W[st])
            loss -= lp[np.arange(len(tg)), tg].sum()
            d = np.exp(lp)
            d[np.arange(len(tg)), tg] -= 1.0
            np.add.at(grad, st, d)
            tokens += len(tg)
        return float(loss), tokens, {"W": grad}

    def fit_counts(self, data: Sequence[Seq], smoothing: float = 0.0) -> "NgramSoftmax":
        """Closed-form maximum likelihood (log relative frequencies)."""
        counts = np.full_like(self.params["W"], smoothing)
        for seq in data:
            np.add.at(counts, (self.states(seq), self.target_ids(seq)), 1.0)
        with np.errstate(divide="ignore"):
            logc = np.log(counts)
        rows = counts.sum(axis=1) > 0
        W = np.zeros_like(counts)
        W[rows] = np.maximum(logc[rows] - logc[rows].max(axis=1, keepdims=True), -1e3)
        self.params["W"] = W
        return self


# -- gated recurrent cell ------------------------------------------------------

class GatedRnn(ArModel):
    """Stack of single-gate cells ``h' = h + z * (tanh(.) - h)``.

    Inputs are context tokens, then a separator, then the output symbols
    (teacher forcing).  Predictions start at the separator.
    """

    kind = "recurrent"

    def __init__(self, context_size: int, hidden: int = 64, layers: int = 1,
                 symbols: Sequence[str] = BITS, seed=0):
        super().__init__(symbols)
        if not 1 <= layers <= 2:
            raise ValueError("layers must be 1 or 2")
        self.context_size, self.hidden, self.layers = context_size, hidden, layers
        self.sep = context_size
        self.n_inputs = context_size + 1 + (self.V - 1)
        rng = np.random.default_rng(seed)
        H = hidden
        p = {"E": rng.standard_normal((self.n_inputs, H)) * 0.1}
        for l in range(layers):
            p[f"W{l}"] = rng.standard_normal((H, 2 * H)) / math.sqrt(H)
            p[f"U{l}"] = rng.standard_normal((H, 2 * H)) / math.sqrt(H)
            p[f"b{l}"] = np.zeros(2 * H)
        p["Wo"] = rng.standard_normal((H, self.V)) * 0.1
        p["bo"] = np.zeros(self.V)
        self.params = p

    def meta(self):
        return {"kind": self.kind, "symbols": list(self.symbols), "context_size": self.context_size,
                "hidden": self.hidden, "layers": self.layers}

    def _inputs(self, batch):
        rows, targets, starts = [], [], []
        for seq in batch:
            ids = list(seq.context) + [self.sep] + [self.context_size + 1 + self.sym_index[c]
                                                   for c in seq.target]
            rows.append(ids)
            starts.append(len(seq.context))
            targets.append(self.target_ids(seq))
        T = max(len(r) for r in rows)
        ids = np.zeros((len(batch), T), dtype=np.int64)
        tgt = np.full((len(batch), T), -1, dtype=np.int64)
        for b, (r, s, tg) in enumerate(zip(rows, starts, targets)):
            ids[b, :len(r)] = r
            tgt[b, s:s + len(tg)] = tg
        return ids, tgt, starts

    def _forward(self, ids):
        p, H = self.params, self.hidden
        B, T = ids.shape
        x = p["E"][ids]                       # (B, T, H)
        caches = []
        for l in range(self.layers):
            W, U, b = p[f"W{l}"], p[f"U{l}"], p[f"b{l}"]
            xin = x @ W + b                   # (B, T, 2H)
            h = np.zeros((B, H))
            hs = np.empty((B, T, H))
            zs = np.empty((B, T, H))
            cs = np.empty((B, T, H))
            hp = np.empty((B, T, H))
            for t in range(T):
                a = xin[:, t] + h @ U
                z = _sigmoid(a[:, :H])
                c = np.tanh(a[:, H:])
                hp[:, t] = h
                h = h + z * (c - h)
                hs[:, t], zs[:, t], cs[:, t] = h, z, c
            caches.append((x, hp, zs, cs))
            x = hs
        logits = x @ p["Wo"] + p["bo"]
        return logits, x, caches

    def log_conditionals(self, batch):
        ids, tgt, starts = self._inputs(batch)
        logits, _, _ = self._forward(ids)
        lp = _log_softmax(logits)
        return [lp[b, s:s + len(seq.target) + 1] for b, (seq, s) in enumerate(zip(batch, starts))]

    def loss_and_grad(self, batch):
        p, H = self.params, self.hidden
        ids, tgt, _ = self._inputs(batch)
        logits, top, caches = self._forward(ids)
        lp = _log_softmax(logits)
        mask = tgt >= 0
        safe = np.where(mask, tgt, 0)
        picked = np.take_along_axis(lp, safe[..., None], axis=-1)[..., 0]
        loss = float(-(picked * mask).sum())
        dlog = np.exp(lp)
        np.put_along_axis(dlog, safe[..., None],
                          np.take_along_axis(dlog, safe[..., None], axis=-1) - 1.0, axis=-1)
        dlog *= mask[..., None]
        grads = {"Wo": np.einsum("bth,btv->hv", top, dlog), "bo": dlog.sum(axis=(0, 1))}
        dx = dlog @ p["Wo"].T                 # gradient w.r.t. top-layer states
        for l in reversed(range(self.layers)):
            x, hp, zs, cs = caches[l]
            U = p[f"U{l}"]
            B, T, _ = hp.shape
            da = np.empty((B, T, 2 * H))
            dh = np.zeros((B, H))
            for t in reversed(range(T)):
                dh = dh + dx[:, t]
                z, c, h0 = zs[:, t], cs[:, t], hp[:, t]
                dz = dh * (c - h0) * z * (1 - z)
                dc = dh * z * (1 - c * c)
                da[:, t, :H], da[:, t, H:] = dz, dc
                dh = dh * (1 - z) + da[:, t] @ U.T
            grads[f"W{l}"] = np.einsum("bth,btk->hk", x, da)
            grads[f"U{l}"] = np.einsum("bth,btk->hk", hp, da)
            grads[f"b{l}"] = da.sum(axis=(0, 1))
            dx = da @ p[f"W{l}"].T
        dE = np.zeros_like(p["E"])
        np.add.at(dE, ids, dx)
        grads["E"] = dE
        return loss, int(mask.sum()), grads


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.1
    batch: int = 32
    seed: int = 0
    early_stop_patience: int = 2
    max_epochs: int = 20
    momentum: float = 0.9
    clip: float = 5.0

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ValueError("patience must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    model: ArModel
    train_curve: list[float] = field(default_factory=list)
    dev_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0


def mean_nll(model: ArModel, data: Sequence[Seq], batch: int = 64) -> float:
    """Cross-entropy per scored token, in nats."""
    total, tokens = 0.0, 0
    for i in range(0, len(data), batch):
        chunk = data[i:i + batch]
        for seq, lp in zip(chunk, model.log_conditionals(chunk)):
            tg = model.target_ids(seq)
            total -= lp[np.arange(len(tg)), tg].sum()
            tokens += len(tg)
    return total / max(tokens, 1)


def train_ar(model: ArModel, train: Sequence[Seq], dev: Sequence[Seq],
             cfg: TrainConfig) -> TrainResult:
    """Minibatch SGD with momentum and early stopping on dev cross-entropy.

    The returned model holds the parameters of the first epoch that reached
    the lowest dev loss (epoch 0 is the initial model).
    """
    if not train:
        raise ValueError("empty training corpus")
    if not model.trainable:
        dev_loss = mean_nll(model, dev) if dev else float("nan")
        return TrainResult(model, [], [dev_loss], 0)
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    best = {k: v.copy() for k, v in model.params.items()}
    best_loss = mean_nll(model, dev)
    result = TrainResult(model, [], [best_loss], 0)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total, tokens = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            chunk = [train[k] for k in order[i:i + cfg.batch]]
            loss, n, grads = model.loss_and_grad(chunk)
            if not math.isfinite(loss):
                model.params = best
                raise TrainingError(f"loss became {loss} in epoch {epoch}", checkpoint=model)
            total, tokens = total + loss, tokens + n
            norm = math.sqrt(sum(float(((g / n) ** 2).sum()) for g in grads.values()))
            shrink = min(1.0, cfg.clip / norm) if norm > 0 else 1.0
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - cfg.lr * shrink * g / n
                model.params[k] += velocity[k]
        result.train_curve.append(total / tokens)
        dev_loss = mean_nll(model, dev)
        result.dev_curve.append(dev_loss)
        if not math.isfinite(dev_loss):
            model.params = best
            raise TrainingError(f"dev loss became {dev_loss} in epoch {epoch}", checkpoint=model)
        if dev_loss < best_loss:
            best_loss, stale, result.best_epoch = dev_loss, 0, epoch
            best = {k: v.copy() for k, v in model.params.items()}
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.params = best
    return result


# -- metrics -------------------------------------------------------------------

@dataclass
class EvalReport:
    enumeration_ppl: float
    enumeration_ppl_oracle: float
    assignment_ppl: float
    assignment_ppl_oracle: float
    token_ppl: float
    n_examples: int
    n_assignment: int

    def to_dict(self) -> dict:
        return asdict(self)


def _oracle(seq: Seq, prefix: str) -> np.ndarray:
    return TRIE_ORACLE.conditional(seq.key, prefix)


TRIE_ORACLE = corpus_trie()


def evaluate_ar(model: ArModel, data: Sequence[Seq], batch: int = 64,
                assignment_filter: Optional[Callable[[Seq], bool]] = None) -> EvalReport:
    """Corpus metrics, each the exponential of a mean cross-entropy.

    *realized* variants score the corpus bits; *oracle* variants score the
    exact conditional at the same realized prefix.  Assignment metrics use
    items whose first output bit is 1 (a satisfier of the formula follows),
    optionally restricted further by ``assignment_filter``.
    """
    enum_r = enum_o = asg_r = asg_o = tok = 0.0
    n_tok = n_asg_items = n_asg = 0
    for i in range(0, len(data), batch):
        chunk = data[i:i + batch]
        for seq, lp in zip(chunk, model.log_conditionals(chunk)):
            tg = model.target_ids(seq)
            nll = -lp[np.arange(len(tg)), tg]
            tok += nll.sum()
            n_tok += len(tg)
            enum_r += nll[0]
            q = _oracle(seq, "")
            enum_o -= float((q[q > 0] * lp[0][q > 0]).sum())
            if seq.target[:1] == "1" and (assignment_filter is None or assignment_filter(seq)):
                j = len(seq.target) - 1
                n_asg_items += 1
                n_asg += j
                asg_r += nll[1:j + 1].sum()
                for t in range(1, j + 1):
                    q = _oracle(seq, seq.target[:t])
                    row = lp[t]
                    asg_o -= float((q[q > 0] * row[q > 0]).sum())
    n = len(data)
    return EvalReport(
        enumeration_ppl=math.exp(enum_r / n),
        enumeration_ppl_oracle=math.exp(enum_o / n),
        assignment_ppl=math.exp(asg_r / n_asg) if n_asg else float("nan"),
        assignment_ppl_oracle=math.exp(asg_o / n_asg) if n_asg else float("nan"),
        token_ppl=math.exp(tok / n_tok),
        n_examples=n,
        n_assignment=n_asg_items,
    )


def enumeration_ppl(model: ArModel, data: Sequence[Seq]) -> float:
    return evaluate_ar(model, data).enumeration_ppl


def assignment_ppl(model: ArModel, data: Sequence[Seq],
                   assignment_filter: Optional[Callable[[Seq], bool]] = None) -> float:
    return evaluate_ar(model, data, assignment_filter=assignment_filter).assignment_ppl


def single_satisfier(seq: Seq) -> bool:
    return len(add_one_support(seq.key)) == 2


def numeric_grad(model: ArModel, seqs: Sequence[Seq], name: str, index: tuple,
                 h: float = 1e-5) -> float:
    """Central difference of the summed cross-entropy in one coordinate."""
    w = model.params[name]
    keep = w[index]
    w[index] = keep + h
    up = sum(model.sequence_nll(s) for s in seqs)
    w[index] = keep - h
    down = sum(model.sequence_nll(s) for s in seqs)
    w[index] = keep
    return (up - down) / (2 * h)

"""Relation-similarity data, the three training losses and the optimisation loop."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from . import gat, textenc
from .autodiff import Tensor
from .lexicon import INTERSECTION, UNION
from .model import RelationModel

logger = logging.getLogger(__name__)

Pair = tuple[str, str]
STOP_GRADIENT_SIDES = ("none", "graph", "encoder")


class DataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, batch_id: int, detail: str = ""):
        self.batch_id = batch_id
        super().__init__(f"non-finite loss at batch {batch_id}" + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------------- data

@dataclass(frozen=True)
class RelationExamples:
    relation: str
    positives: tuple[Pair, ...]
    negatives: tuple[Pair, ...]
    train_positives: tuple[Pair, ...]
    train_negatives: tuple[Pair, ...]
    val_positives: tuple[Pair, ...]
    val_negatives: tuple[Pair, ...]


@dataclass(frozen=True)
class RelationDataset:
    relations: tuple[RelationExamples, ...]

    def __len__(self) -> int:
        return len(self.relations)

    def words(self) -> list[str]:
        seen = {}
        for r in self.relations:
            for h, t in r.positives + r.negatives:
                seen.setdefault(h, None)
                seen.setdefault(t, None)
        return list(seen)


def _split(items: Sequence[Pair], key: str, fraction: float):
    order = list(items)
    random.Random(key).shuffle(order)
    n_train = int(math.floor(len(order) * fraction + 0.5))
    return tuple(order[:n_train]), tuple(order[n_train:])


def load_relation_data(source: TextIO, top_k: int = 10, train_fraction: float = 0.8,
                       split_seed: int = 0) -> RelationDataset:
    """Read ``{"relation", "pairs": [{"head", "tail", "score"}, ...]}`` records.

    The ``top_k`` highest-scored pairs of a relation become positives and
    the ``top_k`` lowest become negatives (fewer when a relation has under
    ``2 * top_k`` pairs). Both lists are split train/validation by a shuffle
    seeded from ``split_seed`` and the relation name.
    """
    relations = []
    seen_names = set()
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            name = str(rec["relation"])
            raw = rec["pairs"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"line {lineno}: malformed relation record ({exc})") from None
        if name in seen_names:
            raise DataError(f"line {lineno}: duplicate relation {name!r}")
        seen_names.add(name)
        if not isinstance(raw, list) or len(raw) < 2:
            raise DataError(f"relation {name!r} needs at least 2 scored pairs")
        scored = []
        keys = set()
        for item in raw:
            try:
                pair = (str(item["head"]), str(item["tail"]))
                score = float(item["score"])
            except (KeyError, TypeError, ValueError):
                raise DataError(f"relation {name!r}: malformed pair {item!r}") from None
            if pair in keys:
                raise DataError(f"relation {name!r}: duplicate pair {pair}")
            keys.add(pair)
            scored.append((score, pair))
        ranked = [p for _, p in sorted(scored, key=lambda sp: -sp[0])]
        n_pos = min(top_k, (len(ranked) + 1) // 2)
        n_neg = min(top_k, len(ranked) - n_pos)
        positives = tuple(ranked[:n_pos])
        negatives = tuple(ranked[len(ranked) - n_neg:])
        tp, vp = _split(positives, f"{split_seed}/{name}/pos", train_fraction)
        tn, vn = _split(negatives, f"{split_seed}/{name}/neg", train_fraction)
        relations.append(RelationExamples(name, positives, negatives, tp, tn, vp, vn))
    return RelationDataset(tuple(relations))


# -------------------------------------------------------------------- config

@dataclass
class LossToggles:
    use_L1: bool = True
    use_L2: bool = True
    use_L3: bool = True


@dataclass
class TrainConfig:
    tau: float = 0.5
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_relations: int = 5
    epochs: int = 25
    max_steps: int = 0  # 0 = no cap
    seed: int = 0
    split_seed: int = 0
    use_L1: bool = True
    use_L2: bool = True
    use_L3: bool = True
    encoder_dim: int = 64
    graph_dim: int = 300
    layers: int = 2
    leaky_slope: float = 0.2
    heads: int = 1
    max_len: int = textenc.MAX_LEN
    hops: int = 0
    sememe_mode: str = INTERSECTION
    denominator_includes_positive: bool = False
    stop_gradient_side: str = "none"
    score_with: str = "h_m"
    # score L3 on unit-length relation vectors; raw dot products let every
    # h_m grow along one shared direction
    normalize_relation_vectors: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_relations < 1:
            raise ValueError("batch_relations must be at least 1")
        if self.epochs < 0 or self.max_steps < 0:
            raise ValueError("epochs and max_steps must be non-negative")
        if self.stop_gradient_side not in STOP_GRADIENT_SIDES:
            raise ValueError(f"stop_gradient_side must be one of {STOP_GRADIENT_SIDES}")
        if self.sememe_mode not in (INTERSECTION, UNION):
            raise ValueError("sememe_mode must be 'intersection' or 'union'")

    @property
    def toggles(self) -> LossToggles:
        return LossToggles(self.use_L1, self.use_L2, self.use_L3)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- losses

def _word_alignment(word_reps: Tensor, sememe_means: Tensor, P: Tensor | None) -> Tensor:
    target = sememe_means if P is None else ad.matmul(sememe_means, ad.transpose(P))
    if target.shape != word_reps.shape:
        raise ad.ShapeError(f"word reps {word_reps.shape} vs projected sememe means {target.shape}")
    return ad.sum_all(ad.l2_norm_rows(ad.sub(word_reps, target)))


def word_alignment_loss(word_reps: Mapping[str, Tensor], sememe_reps: Mapping[str, Tensor],
                        P: Tensor | None = None) -> Tensor:
    """Sum over words of ``|h_w - mean_s P h_s|``.

    ``word_reps[w]`` is a ``(1, D)`` row, ``sememe_reps[w]`` the ``(|S_w|, d)``
    final states of ``w``'s sememes. Without ``P`` the two widths must agree.
    """
    if set(word_reps) != set(sememe_reps):
        raise ValueError("word_reps and sememe_reps must cover the same words")
    if not word_reps:
        return Tensor(0.0)
    words = list(word_reps)
    h_w = ad.concat_rows([ad.as_tensor(word_reps[w]) for w in words])
    means = ad.concat_rows([ad.mean_rows(ad.as_tensor(sememe_reps[w])) for w in words])
    return _word_alignment(h_w, means, P)


def relation_alignment_loss(h_g_prime: Tensor, h_m: Tensor) -> Tensor:
    """Mean over batch and coordinates of ``(h_g' - h_m)**2``."""
    if h_g_prime.shape[0] == 0:
        raise ValueError("empty batch")
    return ad.squared_error_mean(h_g_prime, h_m)


@dataclass(frozen=True)
class RelationGroup:
    """Relation representations of one relation's positives and negatives.

    ``pairs`` lists the (anchor, positive) row indices into ``positives``;
    by default every ordered pair with ``a != p``.
    """

    positives: Tensor
    negatives: Tensor
    pairs: tuple[tuple[int, int], ...] | None = None

    def anchor_positive_pairs(self) -> tuple[tuple[int, int], ...]:
        if self.pairs is not None:
            return self.pairs
        n = self.positives.shape[0]
        return tuple((a, p) for a in range(n) for p in range(n) if a != p)


def contrastive_loss(groups: Sequence[RelationGroup], tau: float,
                     denominator_includes_positive: bool = False, stats: dict | None = None) -> Tensor:
    """Supervised contrastive loss summed over relations and (anchor, positive) pairs.

    Each term is ``-log(exp(x_a.x_p / tau) / sum_n exp(x_a.x_n / tau))`` with
    the sum over the relation's negatives only, so a term can be negative.
    ``denominator_includes_positive`` adds ``exp(x_a.x_p / tau)`` to the sum.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    total = None
    for g in groups:
        if g.negatives.shape[0] == 0:
            raise ValueError("relation group has no negatives")
        ap = g.anchor_positive_pairs()
        if not ap:
            continue
        a_idx = [a for a, _ in ap]
        p_idx = [p for _, p in ap]
        sim_pos = ad.scale(ad.matmul(g.positives, ad.transpose(g.positives)), 1.0 / tau)
        sim_neg = ad.scale(ad.matmul(g.positives, ad.transpose(g.negatives)), 1.0 / tau)
        pos_terms = ad.gather(sim_pos, a_idx, p_idx)
        lse = ad.gather(ad.logsumexp_rows(sim_neg), a_idx)
        if denominator_includes_positive:
            lse = ad.logaddexp(pos_terms, lse)
        term = ad.sum_all(ad.sub(lse, pos_terms))
        total = term if total is None else ad.add(total, term)
        if stats is not None:
            stats["terms"] = stats.get("terms", 0) + len(ap)
    return total if total is not None else Tensor(0.0)


def total_loss(L1, L2, L3, toggles: LossToggles):
    """Sum of the enabled components, accumulated in the order L1, L2, L3."""
    parts = [x for x, on in ((L1, toggles.use_L1), (L2, toggles.use_L2), (L3, toggles.use_L3)) if on]
    if not parts:
        return 0.0 if not any(isinstance(x, Tensor) for x in (L1, L2, L3)) else Tensor(0.0)
    if any(isinstance(x, Tensor) for x in parts):
        out = ad.as_tensor(parts[0])
        for x in parts[1:]:
            out = ad.add(out, ad.as_tensor(x))
        return out
    out = parts[0]
    for x in parts[1:]:
        out = out + x
    return out


# ------------------------------------------------------------- batch assembly

@dataclass(frozen=True)
class StepPlan:
    """Constant structure for one optimisation step over a set of relations."""

    pairs: tuple[Pair, ...]
    prompts: textenc.PromptBatch
    groups: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    graph_rows: tuple[int, ...]  # pairs that take the graph path
    graph: gat.GraphBatch | None
    word_rows: tuple[int, ...]  # rows into concat(h_head, h_tail)
    word_pool: np.ndarray | None  # (words, graph nodes) averaging matrix
    words: tuple[str, ...] = ()


def plan_step(model: RelationModel, relations: Sequence[RelationExamples]) -> StepPlan:
    pairs: list[Pair] = []
    index: dict[Pair, int] = {}

    def row(p: Pair) -> int:
        if p not in index:
            index[p] = len(pairs)
            pairs.append(p)
        return index[p]

    groups = []
    for r in relations:
        pos = tuple(row(p) for p in r.train_positives)
        neg = tuple(row(p) for p in r.train_negatives)
        groups.append((pos, neg))
    prompts = textenc.batch_prompts([model.prompt(h, t) for h, t in pairs], model.vocab, model.encoder.max_len)

    graph_rows, subs = [], []
    for i, (h, t) in enumerate(pairs):
        sub = model.pair_subgraph(h, t)
        if sub is not None:
            graph_rows.append(i)
            subs.append(sub)
    if not subs:
        return StepPlan(tuple(pairs), prompts, tuple(groups), (), None, (), None)
    gbatch = gat.batch_subgraphs(subs)

    seen = set()
    word_rows, members, words = [], [], []
    for k, (i, sub) in enumerate(zip(graph_rows, subs)):
        off = gbatch.offsets[k]
        for role, local in ((0, sub.head_members), (1, sub.tail_members)):
            word = pairs[i][role]
            if word in seen:
                continue
            seen.add(word)
            words.append(word)
            word_rows.append(i + role * len(pairs))
            members.append([off + m for m in local])
    pool = np.zeros((len(words), gbatch.size))
    for w, rows in enumerate(members):
        pool[w, rows] = 1.0 / len(rows)
    return StepPlan(tuple(pairs), prompts, tuple(groups), tuple(graph_rows), gbatch,
                    tuple(word_rows), pool, tuple(words))


@dataclass
class StepLosses:
    L1: Tensor
    L2: Tensor
    L3: Tensor
    total: Tensor


def compute_losses(model: RelationModel, plan: StepPlan, config: TrainConfig,
                   stats: dict | None = None) -> StepLosses:
    toggles = config.toggles
    h_m, h_head, h_tail, _ = textenc.encode_batch(model.encoder, plan.prompts)
    zero = Tensor(0.0)
    L1 = L2 = L3 = zero

    if plan.graph is not None and (toggles.use_L1 or toggles.use_L2):
        H = gat.encode_batch(model.gat, plan.graph, model.node_init)
        if toggles.use_L2:
            h_g = gat.project(model.gat, ad.select_rows(H, plan.graph.virtual_rows))
            h_m_graph = ad.select_rows(h_m, plan.graph_rows)
            if config.stop_gradient_side == "graph":
                h_g = ad.detach(h_g)
            elif config.stop_gradient_side == "encoder":
                h_m_graph = ad.detach(h_m_graph)
            L2 = relation_alignment_loss(h_g, h_m_graph)
        if toggles.use_L1:
            word_reps = ad.select_rows(ad.concat_rows([h_head, h_tail]), plan.word_rows)
            means = ad.matmul(Tensor(plan.word_pool), H)
            L1 = _word_alignment(word_reps, means, model.P)

    if toggles.use_L3:
        x = ad.normalize_rows(h_m) if config.normalize_relation_vectors else h_m
        groups = []
        for pos, neg in plan.groups:
            if len(pos) < 2 or not neg:
                continue
            groups.append(RelationGroup(ad.select_rows(x, pos), ad.select_rows(x, neg)))
        L3 = contrastive_loss(groups, config.tau, config.denominator_includes_positive, stats)

    return StepLosses(L1, L2, L3, total_loss(L1, L2, L3, toggles))


# ----------------------------------------------------------------- optimiser

class AdamW:
    """Adam with decoupled weight decay. Parameters without a gradient are skipped."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= self.lr * update


# --------------------------------------------------------------------- loop

@dataclass
class EpochMetrics:
    epoch: int
    L1: float
    L2: float
    L3: float
    total: float
    val_acc: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "L1": self.L1, "L2": self.L2, "L3": self.L3,
                           "total": self.total, "val_acc": self.val_acc})


def mask_representations(model: RelationModel, pairs: Sequence[Pair]) -> np.ndarray:
    with ad.no_grad():
        batch = textenc.batch_prompts([model.prompt(h, t) for h, t in pairs], model.vocab, model.encoder.max_len)
        return textenc.encode_batch(model.encoder, batch)[0].value


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def validation_accuracy(model: RelationModel, data: RelationDataset) -> float:
    """Nearest-prototype retrieval of held-out positives.

    A relation's prototype is the mean unit representation of its training
    positives; a validation positive counts as correct when its own
    relation's prototype is the most cosine-similar one.
    """
    rels = [r for r in data.relations if r.train_positives]
    queries = [(k, p) for k, r in enumerate(rels) for p in r.val_positives]
    if not queries:
        return 0.0
    protos = np.stack([_unit(mask_representations(model, r.train_positives)).mean(axis=0) for r in rels])
    reps = _unit(mask_representations(model, [p for _, p in queries]))
    scores = reps @ _unit(protos).T
    chosen = np.argmax(scores, axis=1)
    return float(np.mean(chosen == np.array([k for k, _ in queries])))


@dataclass
class TrainResult:
    model: RelationModel
    metrics: list[EpochMetrics] = field(default_factory=list)
    steps: int = 0


def train(model: RelationModel, data: RelationDataset, config: TrainConfig,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    """Optimise ``model`` in place with AdamW.

    Each epoch visits the relations in a seeded random order, taking
    ``batch_relations`` relations per step. Pairs whose sememe intersection
    is empty for either word skip the graph and contribute only to the
    contrastive term.
    """
    config.validate()
    if not data.relations:
        raise DataError("empty relation dataset")
    result = TrainResult(model)
    if config.epochs == 0:
        return result
    params = model.parameters()
    opt = AdamW(params, config.learning_rate, (config.beta1, config.beta2), config.adam_eps,
                config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    plans: dict[tuple[int, ...], StepPlan] = {}
    toggles = config.toggles
    step = 0
    n_rel = len(data.relations)
    for epoch in range(config.epochs):
        order = rng.permutation(n_rel)
        sums = [0.0, 0.0, 0.0]
        n_steps = 0
        for start in range(0, n_rel, config.batch_relations):
            if config.max_steps and step >= config.max_steps:
                break
            key = tuple(int(i) for i in order[start:start + config.batch_relations])
            if key not in plans:
                plans[key] = plan_step(model, [data.relations[i] for i in key])
            opt.zero_grad()
            try:
                losses = compute_losses(model, plans[key], config)
                ad.backward(losses.total)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if not all(np.isfinite(p.grad).all() for p in params.values() if p.grad is not None):
                raise TrainingDiverged(step, "non-finite gradient")
            opt.step()
            sums[0] += losses.L1.item()
            sums[1] += losses.L2.item()
            sums[2] += losses.L3.item()
            n_steps += 1
            step += 1
        if n_steps == 0:
            break
        L1, L2, L3 = (s / n_steps for s in sums)
        L1 = L1 if toggles.use_L1 else 0.0
        L2 = L2 if toggles.use_L2 else 0.0
        L3 = L3 if toggles.use_L3 else 0.0
        record = EpochMetrics(epoch, L1, L2, L3, total_loss(L1, L2, L3, toggles),
                              validation_accuracy(model, data))
        if not math.isfinite(record.total):
            raise TrainingDiverged(step - 1, "non-finite epoch loss")
        result.metrics.append(record)
        logger.info("epoch %d L1=%.4f L2=%.4f L3=%.4f total=%.4f val_acc=%.3f", epoch, record.L1,
                    record.L2, record.L3, record.total, record.val_acc)
        if on_epoch is not None:
            on_epoch(record)
    result.steps = step
    return result

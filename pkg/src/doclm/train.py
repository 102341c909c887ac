"""Joint fine-tuning over task-homogeneous batches, with evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, metrics, prompts
from .decoder import LayoutLLM
from .prompts import TaskKind, TaskSample
from .tensor import ContractError, no_grad

log = logging.getLogger(__name__)

VRDU, NLP = "vrdu", "nlp"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_peak: float = 1e-5
    epochs: int = 20
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: int = 0
    eval_every: int = 0
    freeze_encoder: bool = False

    def validate(self) -> list[str]:
        problems = []
        if self.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if not 0.0 < self.warmup_ratio < 1.0:
            problems.append("train.warmup_ratio must lie in (0, 1)")
        if self.lr_peak <= 0:
            problems.append("train.lr_peak must be > 0")
        if self.epochs < 1:
            problems.append("train.epochs must be >= 1")
        if self.weight_decay < 0:
            problems.append("train.weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.eps <= 0:
            problems.append("train.eps must be > 0")
        if self.grad_clip <= 0:
            problems.append("train.grad_clip must be > 0")
        if self.max_steps < 0 or self.eval_every < 0:
            problems.append("train.max_steps and train.eval_every must be >= 0")
        return problems


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    tag: str
    samples: list[TaskSample]

    def check(self) -> None:
        want_vrdu = self.tag == VRDU
        if any(s.kind.is_vrdu != want_vrdu for s in self.samples):
            raise TrainingError(f"mixed batch: {self.tag}-tagged batch holds samples of the other kind")


@dataclass
class BatchPlan:
    batches: list[Batch]

    def check(self) -> None:
        for b in self.batches:
            b.check()

    def __len__(self) -> int:
        return len(self.batches)


def _chunk(samples, size, tag):
    return [Batch(tag, list(samples[i:i + size])) for i in range(0, len(samples), size)]


def plan_batches(vrdu: Sequence[TaskSample], nlp: Sequence[TaskSample], batch_size: int, seed: int, epoch: int) -> BatchPlan:
    """Shuffle each stream, cut same-tag batches, then shuffle the batch order."""
    if not vrdu and not nlp:
        raise ContractError("plan_batches needs at least one sample")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    v = [vrdu[i] for i in rng.permutation(len(vrdu))]
    n = [nlp[i] for i in rng.permutation(len(nlp))]
    batches = _chunk(v, batch_size, VRDU) + _chunk(n, batch_size, NLP)
    order = rng.permutation(len(batches))
    plan = BatchPlan([batches[i] for i in order])
    plan.check()
    return plan


# ---------------------------------------------------------------------------
# schedule and optimizer

def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over floor(warmup_ratio * total) steps, then cosine decay to zero."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = math.floor(cfg.warmup_ratio * total_steps)
    if step < warm:
        return cfg.lr_peak * step / warm
    if total_steps == warm:
        return cfg.lr_peak
    progress = (step - warm) / (total_steps - warm)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], states: Sequence[AdamState],
               lr: float, cfg: TrainConfig, decay: Sequence[bool] | None = None) -> None:
    """In-place AdamW: decoupled decay ``p -= lr*wd*p`` then the bias-corrected Adam step."""
    b1, b2 = cfg.beta1, cfg.beta2
    for i, (p, g, st) in enumerate(zip(params, grads, states)):
        if p.shape != g.shape or st.m.shape != p.shape:
            raise ContractError(f"adamw: parameter {p.shape}, gradient {g.shape}, state {st.m.shape}")
        if decay is None or decay[i]:
            p -= lr * cfg.weight_decay * p
        st.t += 1
        st.m *= b1
        st.m += (1.0 - b1) * g
        st.v *= b2
        st.v += (1.0 - b2) * g * g
        mhat = st.m / (1.0 - b1**st.t)
        vhat = st.v / (1.0 - b2**st.t)
        p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


def _decays(name: str) -> bool:
    # biases and layer-norm gains are not decayed
    return not (name.endswith(".bias") or name.endswith(".gain"))


class AdamW:
    def __init__(self, named_params, cfg: TrainConfig):
        self.cfg = cfg
        self.params = list(named_params)
        self.state = {name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in self.params}

    def step(self, lr: float) -> None:
        """Update only parameters that received a gradient this step."""
        live = [(n, p) for n, p in self.params if p.grad is not None]
        adamw_step([p.data for _, p in live], [p.grad for _, p in live],
                   [self.state[n] for n, _ in live], lr, self.cfg, [_decays(n) for n, _ in live])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"optim.m/{name}"] = st.m
            out[f"optim.v/{name}"] = st.v
        return out

    def steps(self) -> dict[str, int]:
        return {name: st.t for name, st in self.state.items()}

    def restore(self, arrays: dict, steps: dict) -> None:
        for name, st in self.state.items():
            st.m = np.array(arrays[f"optim.m/{name}"], copy=True)
            st.v = np.array(arrays[f"optim.v/{name}"], copy=True)
            st.t = int(steps[name])


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for g in grads:
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# training loop

@dataclass
class StepRecord:
    step: int
    epoch: int
    tag: str
    loss: float
    lr: float
    grad_norm: float


@dataclass
class TrainResult:
    trace: list[StepRecord] = field(default_factory=list)
    evals: list[tuple[int, dict]] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.trace]


def scored_positions(sample: TaskSample, model: LayoutLLM) -> int:
    """Number of cross-entropy terms a sample contributes (response bytes + EOS)."""
    n = len(sample.target.encode("utf-8")) + 1
    if model.cfg.loss_on_prompt:
        n += len(sample.prompt.encode("utf-8"))
    return n


def trainable(model: LayoutLLM, cfg: TrainConfig):
    return [(n, p) for n, p in model.named_parameters() if not (cfg.freeze_encoder and n.startswith("encoder."))]


def write_trace(path, trace: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "tag", "loss", "lr", "grad_norm"])
        for r in trace:
            w.writerow([r.step, r.epoch, r.tag, repr(r.loss), repr(r.lr), repr(r.grad_norm)])


def save_checkpoint(path, model: LayoutLLM, opt: AdamW, step: int, epoch: int, trace) -> None:
    arrays = dict(checkpoint.state_dict(model))
    arrays.update(opt.arrays())
    meta = {
        "step": step,
        "epoch": epoch,
        "optimizer_steps": opt.steps(),
        "trace": [[r.step, r.epoch, r.tag, r.loss, r.lr, r.grad_norm] for r in trace],
    }
    checkpoint.save(path, arrays, meta)


def train(
    model: LayoutLLM,
    vrdu: Sequence[TaskSample],
    nlp: Sequence[TaskSample],
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    eval_samples: Sequence[TaskSample] = (),
    on_step: Callable[[StepRecord, Batch], None] | None = None,
) -> TrainResult:
    """Fine-tune ``model`` in place and return the per-step loss trace.

    Each batch runs its samples one at a time and accumulates gradients; a
    sample's loss is weighted by its share of the batch's scored positions,
    so the update equals that of one padded batch with a token-mean loss.
    """
    problems = cfg.validate()
    if problems:
        raise ContractError("; ".join(problems))
    vrdu, nlp = list(vrdu), list(nlp)
    if not vrdu and not nlp:
        raise ContractError("train needs at least one sample")
    per_epoch = math.ceil(len(vrdu) / cfg.batch_size) + math.ceil(len(nlp) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    named = trainable(model, cfg)
    params = [p for _, p in named]
    opt = AdamW(named, cfg)
    result = TrainResult()
    step, start_epoch = 0, 0
    if resume_from is not None:
        arrays, meta = checkpoint.load(resume_from)
        checkpoint.load_state(model, arrays)
        opt.restore(arrays, meta["optimizer_steps"])
        step, start_epoch = int(meta["step"]), int(meta["epoch"]) + 1
        result.trace = [StepRecord(*r) for r in meta["trace"]]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        if step >= total:
            break
        plan = plan_batches(vrdu, nlp, cfg.batch_size, cfg.seed, epoch)
        for bi, batch in enumerate(plan.batches):
            if step >= total:
                break
            batch.check()
            for p in model.parameters():
                p.grad = None
            n_total = sum(scored_positions(s, model) for s in batch.samples)
            loss_value = 0.0
            for s in batch.samples:
                loss, n = model.sample_loss(s, encoder_grad=not cfg.freeze_encoder)
                w = n / n_total
                (loss * w).backward()
                loss_value += loss.item() * w
            if not math.isfinite(loss_value):
                raise TrainingError(f"non-finite loss {loss_value} at step {step} (epoch {epoch}, batch {bi}, {batch.tag})")
            norm = clip_grad_norm(params, cfg.grad_clip)
            step += 1
            lr = lr_at(step, total, cfg)
            opt.step(lr)
            rec = StepRecord(step, epoch, batch.tag, loss_value, lr, norm)
            result.trace.append(rec)
            if on_step is not None:
                on_step(rec, batch)
            log.debug("step %d epoch %d %s loss %.5f lr %.3g", step, epoch, batch.tag, loss_value, lr)
        if out is not None:
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", model, opt, step, epoch, result.trace)
            write_trace(out / "loss_trace.csv", result.trace)
        if cfg.eval_every and eval_samples and (epoch + 1) % cfg.eval_every == 0:
            result.evals.append((step, evaluate(model, eval_samples)))
    for p in model.parameters():
        p.grad = None
    return result


# ---------------------------------------------------------------------------
# evaluation

METRIC_NAMES = {
    TaskKind.CLASSIFICATION: "accuracy",
    TaskKind.EXTRACTION: "entity_f1",
    TaskKind.DOCQA: "anls",
    TaskKind.NLP: "exact_match",
}


def _score_task(kind: TaskKind, samples: Sequence[TaskSample], outputs: Sequence[str]) -> metrics.EvalReport:
    ids = [s.record_id for s in samples]
    if kind is TaskKind.CLASSIFICATION:
        preds = [prompts.parse_classification_output(o, s.labels) for o, s in zip(outputs, samples)]
        golds = [s.gold for s in samples]
        correct = [float(p is not None and p == g) for p, g in zip(preds, golds)]
        return metrics.EvalReport(
            kind.value, METRIC_NAMES[kind], metrics.classification_accuracy(preds, golds),
            sum(correct), len(samples), len(samples), sum(p is None for p in preds), list(zip(ids, correct)),
        )
    if kind is TaskKind.EXTRACTION:
        parsed = [prompts.parse_extraction_output(o, s.labels) for o, s in zip(outputs, samples)]
        preds = [p.pairs for p in parsed]
        golds = [s.gold for s in samples]
        c = metrics.entity_counts(preds, golds)
        per_doc = [metrics.entity_counts([p], [g]).f1 for p, g in zip(preds, golds)]
        breakdown = {
            lab: {"matched": v.matched, "n_pred": v.n_pred, "n_gold": v.n_gold, "f1": v.f1}
            for lab, v in metrics.per_label_f1(preds, golds).items()
        }
        return metrics.EvalReport(
            kind.value, METRIC_NAMES[kind], c.f1, 2 * c.matched, c.n_pred + c.n_gold, len(samples),
            sum(p.malformed_count for p in parsed), list(zip(ids, per_doc)), breakdown,
        )
    if kind is TaskKind.DOCQA:
        scores = metrics.anls_scores(list(outputs), [s.gold for s in samples])
        return metrics.EvalReport(
            kind.value, METRIC_NAMES[kind], metrics.anls(list(outputs), [s.gold for s in samples]),
            math.fsum(scores), len(samples), len(samples), 0, list(zip(ids, scores)),
        )
    exact = [float(o.strip() == s.target.strip()) for o, s in zip(outputs, samples)]
    return metrics.EvalReport(
        kind.value, METRIC_NAMES[kind], sum(exact) / len(exact), sum(exact), len(exact), len(exact), 0,
        list(zip(ids, exact)),
    )


def evaluate(model: LayoutLLM, samples: Sequence[TaskSample], out_dir=None,
             max_new: int | None = None) -> dict[TaskKind, metrics.EvalReport]:
    """Greedy-decode every sample, parse, and score one report per task present."""
    by_kind: dict[TaskKind, list[TaskSample]] = {}
    for s in samples:
        by_kind.setdefault(s.kind, []).append(s)
    reports = {}
    feats_cache: dict[int, object] = {}
    for kind in TaskKind:
        group = by_kind.get(kind)
        if not group:
            continue
        outputs = []
        for s in group:
            feats = None
            if kind.is_vrdu:
                key = id(s.doc)
                if key not in feats_cache:
                    with no_grad():
                        feats_cache[key] = model.encode(s.doc)
                feats = feats_cache[key]
            outputs.append(model.generate(s, feats, max_new))
        reports[kind] = _score_task(kind, group, outputs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for kind, rep in reports.items():
            (out / f"report_{kind.value}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    return reports

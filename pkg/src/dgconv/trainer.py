"""Minibatch SGD on the budget-penalized objective, with group-dynamics logging."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import complexity as Z
from .data import iterate_batches
from .errors import DimensionError, TrainingDiverged
from .tensor import softmax_xent

GATE_INIT = 1e-8


def cosine_lr(step, total_steps, base_lr):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def init_gates(layers, seed):
    """Set every continuous gate to +1e-8 or -1e-8 with equal probability."""
    rng = np.random.default_rng([seed, 7])
    for layer in layers:
        signs = rng.integers(0, 2, size=layer.num_gates) * 2 - 1
        layer.gates.data = (signs * GATE_INIT).astype(np.float64)
        layer.gates.grad = None


def init_weights(model, seed):
    """He-normal initialization (std = sqrt(2 / fan_in)) for kernels and the classifier."""
    rng = np.random.default_rng([seed, 3])
    for module in model.modules():
        if hasattr(module, "fan_in") and "weight" in module.params:
            w = module.params["weight"]
            std = math.sqrt(2.0 / module.fan_in())
            w.data = rng.normal(0.0, std, size=w.shape).astype(w.data.dtype)
    fc = model.fc.params["weight"]
    fc.data = rng.normal(0.0, math.sqrt(1.0 / fc.shape[0]), size=fc.shape).astype(fc.data.dtype)


def sgd_update(param, grad, velocity, lr, momentum=0.9, weight_decay=1e-4):
    """In place: ``v <- momentum * v + grad + wd * param``; ``param <- param - lr * v``.

    Weight decay applies only when ``param.decay`` is set.
    """
    if grad.shape != param.data.shape or velocity.shape != param.data.shape:
        raise DimensionError(f"gradient {grad.shape} / velocity {velocity.shape} vs parameter {param.data.shape}")
    velocity *= momentum
    velocity += grad
    if param.decay and weight_decay:
        velocity += weight_decay * param.data
    param.data -= (lr * velocity).astype(param.data.dtype)


class SGD:
    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        for name, p in self.params:
            if p.grad is None:
                continue
            sgd_update(p, p.grad, self.velocity[name], lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    augment: bool = True
    # False leaves the gates driven by the complexity penalty alone
    gate_task_grad: bool = True


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    task_loss: float
    total_loss: float
    zeta: int
    o: float
    multiplier: float
    groups: tuple
    train_acc: float
    gates: tuple = field(repr=False)
    gate_task: tuple = field(repr=False)
    gate_penalty: tuple = field(repr=False)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class DynamicsLog:
    """Per-step training record (loss, complexity, group counts, gate values)."""

    def __init__(self, layer_names):
        self.layer_names = list(layer_names)
        self.records = []

    def append(self, record):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("records must be strictly ordered by step")
        self.records.append(record)

    def header(self):
        fixed = ["step", "epoch", "lr", "task_loss", "total_loss", "zeta", "o", "multiplier"]
        return fixed + [f"G_layer_{i}" for i in range(len(self.layer_names))] + ["train_acc"]

    @staticmethod
    def metrics_row(r):
        return [r.step, r.epoch, r.lr, r.task_loss, r.total_loss, r.zeta, r.o, r.multiplier, *r.groups, r.train_acc]

    def metrics_rows(self):
        for r in self.records:
            yield self.metrics_row(r)

    @staticmethod
    def csv_line(row):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def metrics_csv(self):
        lines = [self.csv_line(self.header())]
        lines += [self.csv_line(row) for row in self.metrics_rows()]
        return "".join(lines)

    def gates_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "layer", "k", "tilde_g", "g", "task_grad", "penalty_grad"])
        for r in self.records:
            for l, (gv, tg, pg) in enumerate(zip(r.gates, r.gate_task, r.gate_penalty)):
                for k in range(len(gv)):
                    w.writerow([r.step, l, k, _fmt(gv[k]), int(gv[k] >= 0), _fmt(tg[k]), _fmt(pg[k])])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: object
    log: DynamicsLog
    metrics: dict


def evaluate(model, dataset, batch_size=256, return_logits=False):
    """Accuracy and mean cross-entropy in inference mode."""
    logits = []
    for x, _ in iterate_batches(dataset, batch_size, shuffle=False):
        logits.append(model.forward(x, train=False))
    logits = np.concatenate(logits) if logits else np.zeros((0, dataset.num_classes))
    loss, _ = softmax_xent(logits.astype(np.float64), dataset.labels)
    out = {"accuracy": float((logits.argmax(axis=1) == dataset.labels).mean()), "loss": loss, "n": len(dataset)}
    if return_logits:
        out["logits"] = logits
    return out


def train(model, dataset, budget=None, epochs=None, seed=None, config=None, test_dataset=None, on_epoch_end=None,
          on_step=None):
    """Train ``model`` on ``dataset`` under an optional :class:`ComplexityBudget`.

    ``on_epoch_end(epoch, model, optimizer, log)`` is called after every epoch
    (the CLI uses it for checkpoints) and ``on_step(record)`` after every
    optimizer step. Raises :class:`TrainingDiverged` when
    the loss becomes non-finite.
    """
    config = config or TrainConfig()
    epochs = config.epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    layers = model.dgconv_layers()
    o = budget.o if budget is not None else math.inf
    alpha = budget.alpha if budget is not None else Z.DEFAULT_ALPHA
    opt = SGD(model.named_parameters(), config.momentum, config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    log = DynamicsLog(model.dgconv_names())
    initial = Z.network_complexity(layers, o, alpha).zeta
    step = 0
    for epoch in range(epochs):
        for x, y in iterate_batches(dataset, config.batch_size, seed, epoch, augment=config.augment):
            lr = cosine_lr(step, total_steps, config.base_lr)
            snapshot = tuple(l.gates.data.copy() for l in layers)
            logits = model.forward(x, train=True)
            task_loss, dlogits = softmax_xent(logits, y)
            state = Z.network_complexity(layers, o, alpha)
            total, mult, penalty = Z.penalized_loss(task_loss, state)
            if not (math.isfinite(task_loss) and math.isfinite(total)):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch})",
                    {"step": step, "epoch": epoch, "lr": lr, "task_loss": task_loss, "zeta": state.zeta,
                     "max_abs_logit": float(np.abs(logits).max()),
                     "nonfinite_logits": int((~np.isfinite(logits)).sum())},
                )
            opt.zero_grad()
            model.backward(dlogits * mult)
            for layer, pen in zip(layers, penalty):
                layer.gate_grad.penalty = pen
                task = layer.gate_grad.task if config.gate_task_grad else np.zeros_like(pen)
                layer.gates.grad = task + pen
            opt.step(lr)
            log.append(StepRecord(
                step=step,
                epoch=epoch,
                lr=lr,
                task_loss=task_loss,
                total_loss=total,
                zeta=state.zeta,
                o=o,
                multiplier=mult,
                groups=tuple(1 << int(len(g) - g.sum()) for g in state.gates),
                train_acc=float((logits.argmax(axis=1) == y).mean()),
                gates=snapshot,
                gate_task=tuple(l.gate_grad.task.copy() for l in layers),
                gate_penalty=tuple(np.asarray(p, dtype=np.float64) for p in penalty),
            ))
            if on_step is not None:
                on_step(log.records[-1])
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, opt, log)
    final = Z.network_complexity(layers, o, alpha)
    metrics = {
        "steps": step,
        "initial_zeta": initial,
        "zeta": final.zeta,
        "o": o,
        "satisfied": final.satisfied,
        "groups": [l.group_count() for l in layers],
        "final_task_loss": log.records[-1].task_loss if log.records else None,
    }
    if test_dataset is not None:
        ev = evaluate(model, test_dataset)
        metrics["test_accuracy"] = ev["accuracy"]
        metrics["test_loss"] = ev["loss"]
    return TrainResult(model, log, metrics)

"""Optimization loops: pretext training, downstream evaluation, grid search.

Pretext training runs up to a fixed epoch budget with early stopping on the
pretext validation loss and returns the best-epoch parameters.  Downstream
training (linear evaluation or fine-tuning) early-stops on validation
accuracy.  Grid search evaluates a Cartesian product of hyperparameters with
deterministic tie-breaking.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import baselines
from .augment import CorruptionConfig, corrupt, make_views
from .data import PreprocessState, TabularDataset, apply_preprocess, expand_mask
from .distill import (
    EmbeddingQueue,
    QMatchConfig,
    qmatch_loss,
    queue_init,
    training_step,
)
from .model import (
    EmaParams,
    EncoderConfig,
    ModelParams,
    classifier_forward,
    ema_update,
    encoder_forward,
    init_params,
    projector_forward,
)
from .tensor import Tensor, backward, cross_entropy_rows, l2_normalize_rows, softmax_rows

PRETEXT_ALGORITHMS = ("qmatch", "vime", "tabnet", "infonce", "mse_align", "dino")
ALGORITHMS = PRETEXT_ALGORITHMS + ("supervised",)


class TrainingError(RuntimeError):
    """Divergence or invalid optimizer input."""


@dataclass
class TrainLoopConfig:
    batch_size: int = 512
    max_epochs: int = 200
    downstream_max_epochs: int = 500
    patience: int = 32
    learning_rate: float = 1e-3
    pretext_learning_rate: float = 1e-3
    weight_decay: float = 1e-1  # downstream; pretext always uses 0
    trials: int = 5

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass
class TrialResult:
    algorithm: str
    dataset: str
    task: str  # linear | finetune
    hyperparameters: dict
    seed: int
    val_accuracy: float
    test_accuracy: float
    wall_time: float

    def __post_init__(self):
        for a in (self.val_accuracy, self.test_accuracy):
            if not 0.0 <= a <= 100.0:
                raise ValueError(f"accuracy {a} outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialResult":
        return cls(**json.loads(line))


# Hyperparameter spaces mirroring the experiment protocol.
DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "common": {
        "learning_rate": [1e-5, 1e-4, 1e-3, 1e-2],
        "pretext_learning_rate": [1e-5, 1e-4, 1e-3],
    },
    "qmatch": {
        "corruption_probability": [0.3, 0.4, 0.5],
        "tau_student": [0.05, 0.1, 0.2],
        "queue_size": [2 ** 9, 2 ** 11],
    },
    "infonce": {"corruption_probability": [0.3, 0.4, 0.5],
                "tau": [0.04, 0.10, 0.15, 0.20, 0.30]},
    "vime": {"corruption_probability": [0.3, 0.4, 0.5]},
    "tabnet": {"corruption_probability": [0.3, 0.4, 0.5]},
    "mse_align": {"corruption_probability": [0.3, 0.4, 0.5]},
    "dino": {"corruption_probability": [0.3, 0.4, 0.5]},
    "supervised": {},
}


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Weight decay is applied after the adaptive step and skips biases and
    batch-norm parameters; with weight_decay=0 this is exactly Adam.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    @staticmethod
    def _decayed(name: str) -> bool:
        return not (name.endswith(".bias") or ".bn_" in name or name.endswith("bias"))

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient in {name!r} at step {t} "
                    f"(|g|_max={np.abs(g[np.isfinite(g)]).max() if np.any(np.isfinite(g)) else 'n/a'})")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and self._decayed(name):
                p.data -= self.lr * self.weight_decay * p.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.asarray([self.step_count], dtype=np.float64)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out


def adamw_step(optimizer: AdamW, params: ModelParams, grads=None):
    """Single optimizer update (grads live on the parameter tensors)."""
    optimizer.step()


class EarlyStopper:
    """Tracks the best metric; signals a stop after `patience` epochs without
    strict improvement."""

    def __init__(self, patience: int, mode: str = "min"):
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.best_epoch = -1
        self.stale = 0

    def update(self, metric: float, epoch: int) -> bool:
        improved = (self.best is None
                    or (self.mode == "min" and metric < self.best)
                    or (self.mode == "max" and metric > self.best))
        if improved:
            self.best = metric
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _batches(n: int, batch_size: int, rng: np.random.Generator | None,
             drop_last: bool):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    end = (n // batch_size) * batch_size if drop_last else n
    for start in range(0, end, batch_size):
        yield order[start:start + batch_size]


def _head(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str):
    return {
        f"{prefix}.weight": Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                              size=(fan_in, fan_out)), requires_grad=True),
        f"{prefix}.bias": Tensor(np.zeros(fan_out), requires_grad=True),
    }


@dataclass
class PretrainResult:
    params: ModelParams
    ema: EmaParams | None
    queue: EmbeddingQueue | None
    heads: dict[str, Tensor]
    best_epoch: int
    val_history: list[float]
    wall_time: float


def pretrain(algorithm: str, dataset: TabularDataset, splits: dict[str, np.ndarray],
             state: PreprocessState, encoder_config: EncoderConfig,
             loop: TrainLoopConfig, seed: int,
             qm_config: QMatchConfig | None = None,
             corruption: CorruptionConfig | None = None,
             extra: dict | None = None) -> PretrainResult:
    """Train the encoder on the chosen pretext task and keep the best-epoch
    parameters (early stopping on pretext validation loss)."""
    if algorithm not in PRETEXT_ALGORITHMS:
        raise ValueError(f"unknown pretext algorithm {algorithm!r}")
    extra = extra or {}
    qm_config = qm_config or QMatchConfig()
    corruption = corruption or CorruptionConfig()
    rng = np.random.default_rng(seed)

    params = init_params(encoder_config, seed)
    pre = lambda raw: apply_preprocess(state, raw)
    train_idx = splits["pretext_train"]
    val_idx = splits["pretext_val"]
    pool = dataset.features[train_idx]
    raw_dim = dataset.num_features

    heads: dict[str, Tensor] = {}
    bank = None
    ema = None
    queue = None
    if algorithm in ("qmatch", "dino"):
        ema = EmaParams(params.copy(requires_grad=False), decay=qm_config.tau_ema)
    if algorithm == "qmatch":
        queue = queue_init(qm_config.queue_capacity, encoder_config.projector_dim, rng)
    if algorithm == "vime":
        heads.update(_head(rng, encoder_config.embed_dim, raw_dim, "mask_head"))
        heads.update(_head(rng, encoder_config.embed_dim, state.output_dim, "recon_head"))
    if algorithm == "tabnet":
        heads.update(_head(rng, encoder_config.embed_dim, state.output_dim, "recon_head"))
    if algorithm == "dino":
        bank = baselines.PrototypeBank(extra.get("num_prototypes", 64),
                                       encoder_config.projector_dim, rng)
        heads["prototypes"] = bank.prototypes

    trainable = dict(params.trainable())
    trainable.update(heads)
    optimizer = AdamW(trainable, lr=loop.pretext_learning_rate, weight_decay=0.0)

    def project_norm(p: ModelParams, x: np.ndarray, mode: str) -> Tensor:
        h = encoder_forward(p, Tensor(x), mode=mode)
        return l2_normalize_rows(projector_forward(p, h))

    def step_loss(raw: np.ndarray, step_rng: np.random.Generator,
                  update: bool, bn_mode: str) -> float:
        """Forward (and optionally backward+update) one batch; returns loss."""
        if algorithm == "qmatch" and update:
            return training_step(raw, pool, params, ema, queue, corruption,
                                 qm_config, optimizer, step_rng, preprocess=pre)
        if algorithm == "qmatch":
            sview, tview = make_views(raw, pool, corruption, step_rng)
            z_s = project_norm(params, pre(sview), bn_mode)
            z_t = project_norm(ema.params, pre(tview), "eval")
            return float(qmatch_loss(z_s, z_t.detach(), queue, qm_config).data)

        if algorithm in ("infonce", "mse_align"):
            c1, _ = corrupt(raw, pool, corruption.p_student, corruption.mode, step_rng)
            c2, _ = corrupt(raw, pool, corruption.p_student, corruption.mode, step_rng)
            z1 = project_norm(params, pre(c1), bn_mode)
            z2 = project_norm(params, pre(c2), bn_mode)
            if algorithm == "infonce":
                loss = baselines.in_batch_info_nce(z1, z2, extra.get("tau", 0.1))
            else:
                loss = baselines.mse_align_loss(z1, z2.detach())
        elif algorithm == "dino":
            sview, tview = make_views(raw, pool, corruption, step_rng)
            z_s = project_norm(params, pre(sview), bn_mode)
            z_t = project_norm(ema.params, pre(tview), "eval")
            loss = baselines.dino_proto_loss(z_s, z_t, bank,
                                             tau_s=qm_config.tau_student,
                                             tau_t=qm_config.tau_teacher,
                                             update_center=update)
        elif algorithm in ("vime", "tabnet"):
            corrupted, mask = corrupt(raw, pool, corruption.p_student,
                                      corruption.mode, step_rng)
            emb = encoder_forward(params, Tensor(pre(corrupted)), mode=bn_mode)
            x_orig = Tensor(pre(raw))
            recon = emb @ heads["recon_head.weight"] + heads["recon_head.bias"]
            if algorithm == "vime":
                mask_logits = emb @ heads["mask_head.weight"] + heads["mask_head.bias"]
                loss = baselines.vime_pretext_loss(x_orig, mask, mask_logits, recon,
                                                   alpha_mask=extra.get("alpha_mask", 1.0),
                                                   alpha_recon=extra.get("alpha_recon", 1.0))
            else:
                loss = baselines.tabnet_recon_loss(x_orig, expand_mask(state, mask), recon)
        else:
            raise ValueError(algorithm)

        if update:
            params.zero_grad()
            for h in heads.values():
                h.zero_grad()
            backward(loss)
            optimizer.step()
            if algorithm == "dino":
                ema_update(ema, params)
        return float(loss.data)

    stopper = EarlyStopper(loop.patience, mode="min")
    best = {"params": params.copy(), "heads": {k: t.data.copy() for k, t in heads.items()},
            "ema": ema.params.copy(requires_grad=False) if ema else None,
            "queue": queue.snapshot() if queue else None}
    val_history: list[float] = []
    start = time.monotonic()
    for epoch in range(loop.max_epochs):
        for batch_idx in _batches(len(train_idx), loop.batch_size, rng, drop_last=True):
            loss_val = step_loss(dataset.features[train_idx[batch_idx]], rng,
                                 update=True, bn_mode="train")
            if not np.isfinite(loss_val):
                raise TrainingError(f"non-finite pretext loss at epoch {epoch}")

        # validation with a per-epoch deterministic corruption stream
        val_rng = np.random.default_rng([seed, epoch, 0x5EED])
        val_losses = [step_loss(dataset.features[val_idx[b]], val_rng,
                                update=False, bn_mode="eval")
                      for b in _batches(len(val_idx), loop.batch_size, None, False)]
        val_loss = float(np.mean(val_losses))
        val_history.append(val_loss)
        if stopper.best is None or val_loss < stopper.best:
            best = {"params": params.copy(),
                    "heads": {k: t.data.copy() for k, t in heads.items()},
                    "ema": ema.params.copy(requires_grad=False) if ema else None,
                    "queue": queue.snapshot() if queue else None}
        if stopper.update(val_loss, epoch):
            break

    best_params = best["params"]
    best_ema = EmaParams(best["ema"], decay=qm_config.tau_ema) if best["ema"] is not None else None
    best_queue = None
    if best["queue"] is not None:
        best_queue = EmbeddingQueue(queue.capacity, queue.dim, storage=best["queue"],
                                    cursor=queue.cursor)
    best_heads = {k: Tensor(v, requires_grad=True) for k, v in best["heads"].items()}
    return PretrainResult(params=best_params, ema=best_ema, queue=best_queue,
                          heads=best_heads, best_epoch=stopper.best_epoch,
                          val_history=val_history, wall_time=time.monotonic() - start)


# -- downstream -----------------------------------------------------------------

def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _embed_all(params: ModelParams, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    outs = [encoder_forward(params, Tensor(x[i:i + batch_size]), mode="eval").data
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def linear_eval(params: ModelParams, dataset: TabularDataset,
                splits: dict[str, np.ndarray], state: PreprocessState,
                loop: TrainLoopConfig, seed: int,
                algorithm: str = "", hyperparameters: dict | None = None) -> TrialResult:
    """Train an affine classifier on frozen encoder embeddings."""
    start = time.monotonic()
    rng = np.random.default_rng(seed)
    num_classes = dataset.num_classes
    missing = np.setdiff1d(np.arange(num_classes), dataset.labels[splits["down_train"]])
    if missing.size:
        raise TrainingError(f"classes {missing.tolist()} absent from downstream train labels")

    embeds = {}
    for split in ("down_train", "down_val", "test"):
        raw = dataset.features[splits[split]]
        embeds[split] = _embed_all(params, apply_preprocess(state, raw))
    labels = {split: dataset.labels[splits[split]]
              for split in ("down_train", "down_val", "test")}

    head = _head(rng, params.config.embed_dim, num_classes, "classifier")
    optimizer = AdamW(head, lr=loop.learning_rate, weight_decay=loop.weight_decay)

    def logits_of(x: np.ndarray) -> Tensor:
        return Tensor(x) @ head["classifier.weight"] + head["classifier.bias"]

    def accuracy(split: str) -> float:
        pred = logits_of(embeds[split]).data.argmax(axis=1)
        return 100.0 * float((pred == labels[split]).mean())

    x_train, y_train = embeds["down_train"], labels["down_train"]
    stopper = EarlyStopper(loop.patience, mode="max")
    best_head = {k: t.data.copy() for k, t in head.items()}
    for epoch in range(loop.downstream_max_epochs):
        for batch_idx in _batches(len(x_train), loop.batch_size, rng, drop_last=False):
            target = Tensor(_one_hot(y_train[batch_idx], num_classes))
            probs = softmax_rows(logits_of(x_train[batch_idx]), temperature=1.0)
            loss = cross_entropy_rows(target, probs)
            for t in head.values():
                t.zero_grad()
            backward(loss)
            optimizer.step()
        val_acc = accuracy("down_val")
        if stopper.best is None or val_acc > stopper.best:
            best_head = {k: t.data.copy() for k, t in head.items()}
        if stopper.update(val_acc, epoch):
            break
    for k, t in head.items():
        t.data[...] = best_head[k]

    return TrialResult(algorithm=algorithm or "linear", dataset=dataset.name,
                       task="linear", hyperparameters=hyperparameters or {},
                       seed=seed, val_accuracy=stopper.best,
                       test_accuracy=accuracy("test"),
                       wall_time=time.monotonic() - start)


def finetune(params: ModelParams, dataset: TabularDataset,
             splits: dict[str, np.ndarray], state: PreprocessState,
             loop: TrainLoopConfig, seed: int,
             algorithm: str = "", hyperparameters: dict | None = None) -> TrialResult:
    """Train the whole encoder plus a fresh classifier head on the labels."""
    start = time.monotonic()
    rng = np.random.default_rng(seed)
    num_classes = dataset.num_classes
    model = params.copy()
    head = _head(rng, model.config.embed_dim, num_classes, "classifier")
    trainable = dict(model.trainable())
    trainable.update(head)
    optimizer = AdamW(trainable, lr=loop.learning_rate, weight_decay=loop.weight_decay)

    data = {}
    labels = {}
    for split in ("down_train", "down_val", "test"):
        data[split] = apply_preprocess(state, dataset.features[splits[split]])
        labels[split] = dataset.labels[splits[split]]

    def accuracy(split: str) -> float:
        emb = _embed_all(model, data[split])
        logits = emb @ head["classifier.weight"].data + head["classifier.bias"].data
        return 100.0 * float((logits.argmax(axis=1) == labels[split]).mean())

    stopper = EarlyStopper(loop.patience, mode="max")
    best = (model.copy(), {k: t.data.copy() for k, t in head.items()})
    x_train, y_train = data["down_train"], labels["down_train"]
    for epoch in range(loop.downstream_max_epochs):
        for batch_idx in _batches(len(x_train), loop.batch_size, rng, drop_last=False):
            emb = encoder_forward(model, Tensor(x_train[batch_idx]), mode="train")
            logits = emb @ head["classifier.weight"] + head["classifier.bias"]
            target = Tensor(_one_hot(y_train[batch_idx], num_classes))
            loss = cross_entropy_rows(target, softmax_rows(logits, temperature=1.0))
            model.zero_grad()
            for t in head.values():
                t.zero_grad()
            backward(loss)
            optimizer.step()
        val_acc = accuracy("down_val")
        if stopper.best is None or val_acc > stopper.best:
            best = (model.copy(), {k: t.data.copy() for k, t in head.items()})
        if stopper.update(val_acc, epoch):
            break
    model, best_head = best
    for k, t in head.items():
        t.data[...] = best_head[k]

    # recompute accuracies with the best parameters
    def best_accuracy(split: str) -> float:
        emb = _embed_all(model, data[split])
        logits = emb @ head["classifier.weight"].data + head["classifier.bias"].data
        return 100.0 * float((logits.argmax(axis=1) == labels[split]).mean())

    return TrialResult(algorithm=algorithm or "finetune", dataset=dataset.name,
                       task="finetune", hyperparameters=hyperparameters or {},
                       seed=seed, val_accuracy=stopper.best,
                       test_accuracy=best_accuracy("test"),
                       wall_time=time.monotonic() - start)


def supervised_baseline(dataset: TabularDataset, splits: dict[str, np.ndarray],
                        state: PreprocessState, encoder_config: EncoderConfig,
                        loop: TrainLoopConfig, seed: int) -> TrialResult:
    """Downstream training from random initialization (no pretext task)."""
    params = init_params(encoder_config, seed)
    result = finetune(params, dataset, splits, state, loop, seed,
                      algorithm="supervised")
    return result


def run_trial(algorithm: str, task: str, dataset: TabularDataset,
              splits: dict[str, np.ndarray], state: PreprocessState,
              encoder_config: EncoderConfig, loop: TrainLoopConfig, seed: int,
              qm_config: QMatchConfig | None = None,
              corruption: CorruptionConfig | None = None,
              extra: dict | None = None,
              hyperparameters: dict | None = None) -> TrialResult:
    """Pretrain (unless supervised) then run the downstream task."""
    if algorithm == "supervised":
        res = supervised_baseline(dataset, splits, state, encoder_config, loop, seed)
        res.hyperparameters = hyperparameters or {}
        return res
    pre = pretrain(algorithm, dataset, splits, state, encoder_config, loop, seed,
                   qm_config=qm_config, corruption=corruption, extra=extra)
    fn = linear_eval if task == "linear" else finetune
    return fn(pre.params, dataset, splits, state, loop, seed,
              algorithm=algorithm, hyperparameters=hyperparameters or {})


# -- grid search -------------------------------------------------------------------

def _point_configs(algorithm: str, point: dict, loop: TrainLoopConfig):
    """Translate a grid point into the config objects it overrides."""
    lp = TrainLoopConfig(**{**asdict(loop),
                            "learning_rate": point.get("learning_rate", loop.learning_rate),
                            "pretext_learning_rate": point.get("pretext_learning_rate",
                                                               loop.pretext_learning_rate)})
    qm = QMatchConfig(tau_student=point.get("tau_student", 0.1),
                      queue_capacity=int(point.get("queue_size", 512)))
    corr = CorruptionConfig(p_student=point.get("corruption_probability", 0.3),
                            p_teacher=point.get("p_teacher", 0.0))
    extra = {k: v for k, v in point.items() if k in ("tau", "num_prototypes")}
    return lp, qm, corr, extra


def _tie_break_key(point: dict):
    return (point.get("learning_rate", 0.0),
            point.get("pretext_learning_rate", 0.0),
            point.get("queue_size", 0),
            point.get("tau_student", 0.0),
            point.get("tau", 0.0),
            point.get("corruption_probability", 0.0),
            tuple(sorted(point.items())))


def grid_search(algorithm: str, grid: dict[str, list], task: str,
                dataset: TabularDataset, splits: dict[str, np.ndarray],
                state: PreprocessState, encoder_config: EncoderConfig,
                loop: TrainLoopConfig, seeds: list[int]):
    """Evaluate the Cartesian product of `grid`, select by downstream
    validation accuracy (deterministic tie-breaking), then rerun the winner
    across all seeds.

    Returns (best_point, results_at_best, all_point_outcomes).
    """
    if not grid:
        grid = {"learning_rate": [loop.learning_rate]}
    keys = sorted(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]

    outcomes = []
    for point in points:
        lp, qm, corr, extra = _point_configs(algorithm, point, loop)
        try:
            result = run_trial(algorithm, task, dataset, splits, state, encoder_config,
                               lp, seeds[0], qm_config=qm, corruption=corr, extra=extra,
                               hyperparameters=point)
            outcomes.append({"point": point, "result": result, "failed": False})
        except TrainingError as e:
            outcomes.append({"point": point, "result": None, "failed": True,
                             "error": str(e)})

    valid = [o for o in outcomes if not o["failed"]]
    if not valid:
        raise TrainingError("every grid point failed")
    best = min(valid, key=lambda o: (-o["result"].val_accuracy, _tie_break_key(o["point"])))
    best_point = best["point"]

    lp, qm, corr, extra = _point_configs(algorithm, best_point, loop)
    results = [best["result"]]
    for seed in seeds[1:]:
        results.append(run_trial(algorithm, task, dataset, splits, state, encoder_config,
                                 lp, seed, qm_config=qm, corruption=corr, extra=extra,
                                 hyperparameters=best_point))
    return best_point, results, outcomes


# -- aggregation --------------------------------------------------------------------

def aggregate(results: list[TrialResult]) -> dict:
    """Mean +/- sample std per (algorithm, dataset), per-dataset rank by mean,
    and average rank per algorithm."""
    if not results:
        raise ValueError("no results to aggregate")
    cells: dict[tuple[str, str], list[float]] = {}
    for r in results:
        cells.setdefault((r.algorithm, r.dataset), []).append(r.test_accuracy)
    stats = {}
    for key, vals in cells.items():
        arr = np.asarray(vals)
        stats[key] = {"mean": float(arr.mean()),
                      "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                      "n": len(arr)}
    datasets = sorted({d for _, d in cells})
    algorithms = sorted({a for a, _ in cells})
    ranks: dict[tuple[str, str], int] = {}
    for d in datasets:
        col = sorted((a for a in algorithms if (a, d) in stats),
                     key=lambda a: -stats[(a, d)]["mean"])
        for rank, a in enumerate(col, start=1):
            ranks[(a, d)] = rank
    avg_rank = {}
    for a in algorithms:
        rs = [ranks[(a, d)] for d in datasets if (a, d) in ranks]
        avg_rank[a] = float(np.mean(rs)) if rs else float("nan")
    return {"stats": stats, "ranks": ranks, "avg_rank": avg_rank,
            "datasets": datasets, "algorithms": algorithms}


def format_rank(value: float) -> str:
    """Round half up to one decimal (so 1.25 -> '1.3')."""
    from decimal import Decimal, ROUND_HALF_UP
    return str(Decimal(repr(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))

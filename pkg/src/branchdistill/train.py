"""Optimizers and the training procedures.

Three procedures are built on one deterministic mini-batch loop:

* ``train_teacher``: hard-label training of one branch model,
* ``dump_teacher_logits``: forward-only pass writing a logit store,
* ``distill_student``: trains the multilingual student against precomputed
  teacher stores with the combined hard-label + distillation objective.

Every run is a pure function of (dataset bytes, config, seed): shuffling
comes from one seeded generator, batches are reduced in a fixed order, and
repeated runs produce bit-identical checkpoints. A manifest records the
config snapshot, input digests, per-epoch loss curve, and skip counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import Sample, sha256_file
from .distill import (
    LogitRecord,
    LogitStore,
    aggregate_logits,
    batch_kd,
    batch_nll,
    fixed_weights,
    impurity_weights,
    write_logit_store,
    TeacherWeights,
)
from .errors import IncompleteLogits, InvalidConfig, ShapeError
from .model import (
    ModelConfig,
    SpanModel,
    Vocabulary,
    collect_gradients,
    encode_dataset,
    forward_batch,
    init_model,
    save_model,
)
from .numerics import softmax_temperature

MANIFEST_VERSION = 1


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Update per parameter: m and v track the first and second gradient
    moments, are bias-corrected, and the step is
    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``.
    """

    def __init__(self, shapes: dict[str, tuple], lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.005):
        if lr < 0.0 or eps <= 0.0 or weight_decay < 0.0:
            raise InvalidConfig("bad optimizer hyperparameters")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise InvalidConfig(f"betas must be in [0, 1), got {betas}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape) for name, shape in shapes.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, theta in params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            theta -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: AdamW) -> None:
    """Apply one in-place update; ``state`` carries the moment accumulators."""
    state.step(params, grads)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    tau: float = 2.0
    lambda1: float = 0.5
    lambda2: float = 0.5
    strategy: str = "fixed"            # "fixed" or "impurity"
    impurity_sign: int = 1
    teacher_ids: tuple[str, ...] = ()
    lr: float = 5e-3
    weight_decay: float = 0.005
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        if not self.tau > 0.0:
            raise InvalidConfig(f"temperature must be positive, got {self.tau}")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise InvalidConfig("loss weights must be non-negative")
        if self.strategy not in ("fixed", "impurity"):
            raise InvalidConfig(f"unknown selective strategy {self.strategy!r}")
        if self.impurity_sign not in (1, -1):
            raise InvalidConfig("impurity_sign must be +1 or -1")


@dataclass
class RunManifest:
    run_name: str
    train_config: dict
    model_config: dict
    dataset_digest: str
    vocab_digest: str | None
    teacher_store_digests: dict[str, str] = field(default_factory=dict)
    epoch_losses: list[dict] = field(default_factory=list)
    skipped_samples: int = 0
    n_samples: int = 0
    checkpoints: list[str] = field(default_factory=list)
    final_checkpoint: str = ""
    format_version: int = MANIFEST_VERSION

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(asdict(self), sort_keys=True, separators=(",", ":"), allow_nan=False)
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _teacher_targets(batch_samples, stores: dict[str, LogitStore], cfg: TrainConfig,
                     max_len: int):
    """Aggregate per-teacher logits into softened target distributions."""
    teacher_ids = list(cfg.teacher_ids) if cfg.teacher_ids else sorted(stores)
    p_s = np.empty((len(batch_samples), max_len))
    p_e = np.empty((len(batch_samples), max_len))
    for row, sample in enumerate(batch_samples):
        records = []
        for tid in teacher_ids:
            store = stores.get(tid)
            if store is None:
                raise IncompleteLogits(f"no logit store for teacher {tid!r}")
            records.append(store.get(sample.key()))
        if cfg.strategy == "fixed":
            weights = fixed_weights(len(records))
        else:
            ws = impurity_weights([r.z_s for r in records], cfg.impurity_sign)
            we = impurity_weights([r.z_e for r in records], cfg.impurity_sign)
            weights = TeacherWeights(start=ws, end=we)
        z_s, z_e = aggregate_logits(records, weights)
        p_s[row] = softmax_temperature(z_s, cfg.tau)
        p_e[row] = softmax_temperature(z_e, cfg.tau)
    return p_s, p_e


def _run_training(
    samples: list[Sample],
    vocab: Vocabulary,
    model_config: ModelConfig,
    cfg: TrainConfig,
    run_name: str,
    out_dir=None,
    stores: dict[str, LogitStore] | None = None,
    dataset_digest: str = "",
    vocab_digest: str | None = None,
) -> tuple[SpanModel, RunManifest]:
    cfg.validate()
    if not samples:
        raise InvalidConfig("training dataset is empty")
    encoded, kept, skipped = encode_dataset(samples, vocab, model_config.max_len)
    if not kept:
        raise InvalidConfig("every training sample fell outside the input window")
    if stores is not None:
        for tid, store in stores.items():
            if store.max_len != model_config.max_len:
                raise ShapeError(
                    f"store for {tid!r} has max_len {store.max_len}, model expects "
                    f"{model_config.max_len}"
                )
        missing = [
            (tid, s.key())
            for tid in (cfg.teacher_ids or sorted(stores))
            for s in kept
            if s.key() not in stores[tid]
        ]
        if missing:
            tid, key = missing[0]
            raise IncompleteLogits(
                f"{len(missing)} samples lack teacher logits (first: {key!r} "
                f"from teacher {tid!r})"
            )

    model = init_model(model_config, cfg.seed)
    optimizer = AdamW(
        {name: arr.shape for name, arr in model.params.items()},
        lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x736866]))

    manifest = RunManifest(
        run_name=run_name,
        train_config=asdict(cfg),
        model_config=asdict(model_config),
        dataset_digest=dataset_digest,
        vocab_digest=vocab_digest,
        skipped_samples=skipped,
        n_samples=len(kept),
    )

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    n = len(kept)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = {"nll": 0.0, "kd": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            batch_idx = order[lo : lo + cfg.batch_size]
            batch_enc = [encoded[i] for i in batch_idx]
            batch_samples = [kept[i] for i in batch_idx]
            gold_s = np.array([e.gold_start for e in batch_enc])
            gold_e = np.array([e.gold_end for e in batch_enc])

            result = forward_batch(model, batch_enc)
            nll_t = batch_nll(result, gold_s, gold_e)
            if stores is not None:
                p_s, p_e = _teacher_targets(batch_samples, stores, cfg, model_config.max_len)
                kd_t = batch_kd(result, p_s, p_e, cfg.tau)
                loss_t = nm.add(nm.mul(nll_t, cfg.lambda1), nm.mul(kd_t, cfg.lambda2))
                kd_value = float(kd_t.data)
            else:
                # hard-label training: plain likelihood objective
                loss_t = nll_t
                kd_value = 0.0

            nm.backward(loss_t, seed=1.0)
            grads = collect_gradients(result)
            if cfg.clip_norm is not None:
                clip_gradients(grads, cfg.clip_norm)
            optimizer.step(model.params, grads)

            sums["nll"] += float(nll_t.data)
            sums["kd"] += kd_value
            sums["total"] += float(loss_t.data)
            n_batches += 1

        manifest.epoch_losses.append({
            "epoch": epoch,
            "nll": sums["nll"] / n_batches,
            "kd": sums["kd"] / n_batches,
            "total": sums["total"] / n_batches,
        })
        if out_path is not None:
            name = f"epoch_{epoch:03d}.ckpt"
            save_model(model, out_path / name)
            manifest.checkpoints.append(name)

    if out_path is not None:
        save_model(model, out_path / "final.ckpt")
        manifest.final_checkpoint = "final.ckpt"
        manifest.save(out_path / "manifest.json")
    return model, manifest


def train_teacher(
    samples: list[Sample],
    vocab: Vocabulary,
    model_config: ModelConfig,
    cfg: TrainConfig,
    run_name: str = "teacher",
    out_dir=None,
    dataset_digest: str = "",
    vocab_digest: str | None = None,
) -> tuple[SpanModel, RunManifest]:
    """Hard-label training of one branch model."""
    return _run_training(
        samples, vocab, model_config, cfg, run_name,
        out_dir=out_dir, stores=None,
        dataset_digest=dataset_digest, vocab_digest=vocab_digest,
    )


def distill_student(
    stores: dict[str, LogitStore],
    samples: list[Sample],
    vocab: Vocabulary,
    model_config: ModelConfig,
    cfg: TrainConfig,
    run_name: str = "student",
    out_dir=None,
    dataset_digest: str = "",
    vocab_digest: str | None = None,
) -> tuple[SpanModel, RunManifest]:
    """Train the multilingual student against precomputed teacher logits."""
    if not stores:
        raise InvalidConfig("distillation requires at least one teacher store")
    teacher_ids = cfg.teacher_ids or tuple(sorted(stores))
    unknown = [tid for tid in teacher_ids if tid not in stores]
    if unknown:
        raise InvalidConfig(f"teacher ids {unknown} have no store")
    model, manifest = _run_training(
        samples, vocab, model_config, cfg, run_name,
        out_dir=out_dir, stores=stores,
        dataset_digest=dataset_digest, vocab_digest=vocab_digest,
    )
    manifest.teacher_store_digests = {
        tid: sha256_file(stores[tid].path) for tid in teacher_ids
    }
    if out_dir is not None:
        manifest.save(Path(out_dir) / "manifest.json")
    return model, manifest


def dump_teacher_logits(
    model: SpanModel,
    samples: list[Sample],
    vocab: Vocabulary,
    path,
    teacher_id: str,
    batch_size: int = 32,
) -> tuple[int, int]:
    """Forward every encodable sample and write its logits to a store.

    Returns (records written, samples skipped as out-of-window).
    """
    encoded, kept, skipped = encode_dataset(samples, vocab, model.config.max_len)
    records = []
    for lo in range(0, len(kept), batch_size):
        batch_enc = encoded[lo : lo + batch_size]
        batch_samples = kept[lo : lo + batch_size]
        result = forward_batch(model, batch_enc)
        for row, sample in enumerate(batch_samples):
            records.append(LogitRecord(
                sample_id=sample.key(),
                teacher_id=teacher_id,
                z_s=result.z_s[row].copy(),
                z_e=result.z_e[row].copy(),
            ))
    write_logit_store(path, teacher_id, model.config.max_len, records)
    return len(records), skipped

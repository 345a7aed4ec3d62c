"""Optimization under explicit freeze policies: LR schedule, objectives, stages.

Train-time randomness is split into named torch.Generator streams (data order,
noise, timesteps, cfg dropout, objective mix) so that objective variants stay
comparable under shared seeds and checkpoints can resume bitwise in
deterministic mode.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from . import checkpoint as ckpt
from .data import batch_indices
from .diffusion import denoise_loss
from .errors import ObjectiveBatchMismatchError, PolicyError
from .pipeline import GenerationPipeline
from .queries import SOURCE_LAST_LAYER, ConditionSet

FROZEN = "frozen"
TRAINABLE = "trainable"

OBJECTIVE_T2I = "t2i"
OBJECTIVE_RECONSTRUCTION = "reconstruction"
OBJECTIVE_MIXED = "mixed"
OBJECTIVE_INSTRUCTION = "instruction_pairs"
OBJECTIVES = (OBJECTIVE_T2I, OBJECTIVE_RECONSTRUCTION, OBJECTIVE_MIXED, OBJECTIVE_INSTRUCTION)

GROUPS = ("backbone", "query_bank", "connector", "decoder")

_STREAM_OFFSETS = {"noise": 1, "timestep": 2, "cfg": 3, "mix": 4}


@dataclass(frozen=True)
class FreezePolicy:
    backbone: str = FROZEN
    query_bank: str = TRAINABLE
    connector: str = TRAINABLE
    decoder: str = TRAINABLE

    def __post_init__(self):
        for group in GROUPS:
            value = getattr(self, group)
            if value not in (FROZEN, TRAINABLE):
                raise ValueError(f"{group} must be 'frozen' or 'trainable', got {value!r}")

    def trainable_groups(self) -> list[str]:
        return [g for g in GROUPS if getattr(self, g) == TRAINABLE]


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    warmup_steps: int = 200
    total_steps: int = 5000

    def __post_init__(self):
        if not 0.0 < self.lr_min < self.lr_max:
            raise ValueError("need 0 < lr_min < lr_max")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = OBJECTIVE_T2I
    mix_ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup from 0 to lr_max, then cosine decay to lr_min."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.lr_max * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    progress = (step - sched.warmup_steps) / span
    return sched.lr_min + (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * progress)) / 2.0


def group_checksums(pipeline: GenerationPipeline) -> dict[str, str]:
    """Bitwise checksum of each parameter group."""
    sums = {}
    for name, module in pipeline.parameter_groups().items():
        h = hashlib.sha256()
        if module is not None:
            for pname, p in sorted(module.state_dict().items()):
                h.update(pname.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        sums[name] = h.hexdigest()
    return sums


class Trainer:
    def __init__(
        self,
        pipeline: GenerationPipeline,
        policy: FreezePolicy,
        objective: ObjectiveSpec,
        sched: ScheduleConfig,
        seed: int = 0,
        batch_size: int = 32,
        deterministic: bool = False,
        out_dir: str | Path | None = None,
        weight_decay: float = 0.01,
        ema_decay: float = 0.999,
    ):
        self.pipeline = pipeline
        self.policy = policy
        self.objective = objective
        self.sched = sched
        self.seed = seed
        self.batch_size = batch_size
        self.deterministic = deterministic
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.ema_decay = ema_decay
        self.step = 0
        if deterministic:
            torch.set_num_threads(1)

        if policy.query_bank == TRAINABLE:
            bank = pipeline.bank
            if bank is None:
                raise PolicyError("policy marks query_bank trainable but pipeline has no bank")
            if not bank.trainable:
                raise PolicyError("policy marks query_bank trainable but the bank is frozen")

        self._param_names: dict[str, list[tuple[str, nn.Parameter]]] = {}
        opt_groups = []
        for group, module in pipeline.parameter_groups().items():
            trainable = getattr(policy, group) == TRAINABLE and module is not None
            if module is not None:
                module.requires_grad_(trainable)
            named = []
            if trainable:
                named = [(f"{group}.{n}", p) for n, p in module.named_parameters()]
                wd = 0.0 if group == "query_bank" else weight_decay
                opt_groups.append(
                    {"params": [p for _, p in named], "weight_decay": wd, "lr": 0.0}
                )
            self._param_names[group] = named
        self.optimizer = (
            torch.optim.AdamW(opt_groups, betas=(0.9, 0.999)) if opt_groups else None
        )
        # EMA shadows of the trainable parameters; used for sampling/eval
        self._ema = {
            name: p.detach().clone()
            for group in self._param_names.values()
            for name, p in group
        }
        self._streams = {
            name: torch.Generator().manual_seed(seed * 7919 + offset)
            for name, offset in _STREAM_OFFSETS.items()
        }
        self._metrics_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # ---- batches ----

    def _validate_batch(self, batch: dict, kind: str) -> None:
        needs = {
            OBJECTIVE_T2I: ("images", "captions"),
            OBJECTIVE_MIXED: ("images", "captions"),
            OBJECTIVE_RECONSTRUCTION: ("images",),
            OBJECTIVE_INSTRUCTION: ("source_images", "instructions", "targets"),
        }[kind]
        missing = [k for k in needs if k not in batch]
        if missing:
            raise ObjectiveBatchMismatchError(
                f"objective {kind!r} requires batch keys {needs}, missing {missing}"
            )

    def _resolve_kind(self) -> str:
        if self.objective.kind != OBJECTIVE_MIXED:
            return self.objective.kind
        u = torch.rand(1, generator=self._streams["mix"]).item()
        return OBJECTIVE_RECONSTRUCTION if u < self.objective.mix_ratio else OBJECTIVE_T2I

    def _conditions(self, batch: dict, kind: str) -> tuple[ConditionSet, torch.Tensor]:
        pipe = self.pipeline
        if kind == OBJECTIVE_T2I:
            return pipe.conditions_for_text(batch["captions"]), batch["images"]
        if kind == OBJECTIVE_RECONSTRUCTION:
            return pipe.conditions_for_images(batch["images"]), batch["images"]
        if kind == OBJECTIVE_INSTRUCTION:
            cond = pipe.conditions_for_instruction(batch["source_images"], batch["instructions"])
            return cond, batch["targets"]
        raise ObjectiveBatchMismatchError(f"cannot build conditions for {kind!r}")

    def _apply_cfg_dropout(self, conditions: ConditionSet) -> ConditionSet:
        p = self.pipeline.denoiser.config.cfg_dropout_prob
        if p <= 0.0:
            return conditions
        vectors = conditions.vectors
        b, m, _ = vectors.shape
        u = torch.rand(b, generator=self._streams["cfg"])
        drop = (u < p).view(b, 1, 1)
        null = self.pipeline.denoiser.null_conditions(b, dtype=vectors.dtype).expand(b, m, -1)
        return ConditionSet(torch.where(drop, null, vectors), conditions.source)

    # ---- optimization ----

    def train_step(self, batch: dict) -> dict:
        """One optimizer step; returns {step, loss, lr, grad_norms}."""
        kind = self._resolve_kind()
        self._validate_batch(batch, self.objective.kind)
        conditions, targets = self._conditions(batch, kind)
        conditions = self._apply_cfg_dropout(conditions)
        b = targets.shape[0]
        t = torch.randint(
            1, self.pipeline.schedule.timesteps + 1, (b,), generator=self._streams["timestep"]
        )
        eps = torch.randn(targets.shape, generator=self._streams["noise"], dtype=targets.dtype)
        loss = denoise_loss(
            self.pipeline.denoiser, self.pipeline.schedule, targets, conditions, t, eps
        )
        lr = lr_at(min(self.step + 1, self.sched.total_steps), self.sched)
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            for pg in self.optimizer.param_groups:
                pg["lr"] = lr
            self.optimizer.step()
            with torch.no_grad():
                for group in self._param_names.values():
                    for name, p in group:
                        self._ema[name].mul_(self.ema_decay).add_(
                            p.detach(), alpha=1.0 - self.ema_decay
                        )
        grad_norms = {}
        for group in GROUPS:
            total = 0.0
            for _, p in self._param_names[group]:
                if p.grad is not None:
                    total += float(p.grad.detach().pow(2).sum())
            grad_norms[group] = math.sqrt(total)
        self.step += 1
        return {
            "step": self.step,
            "loss": float(loss.detach()),
            "lr": lr,
            "grad_norms": grad_norms,
            "objective": kind,
        }

    def run_stage(
        self,
        dataset,
        epochs: int,
        max_steps: int | None = None,
        checkpoint_name: str = "checkpoint.npz",
        log_name: str = "metrics.jsonl",
        buckets: list[int] | None = None,
    ) -> Path:
        """Train for whole epochs (or a step cap); emit a checkpoint and metrics log.

        The batch order for epoch e is a pure function of (seed, e), so a
        resumed trainer replays the exact remaining batches of its epoch.
        """
        if self.out_dir is None:
            raise ValueError("run_stage requires an out_dir")
        n = len(dataset)
        if self.objective.kind == OBJECTIVE_INSTRUCTION and buckets is None:
            buckets = [dataset.num_sources(i) for i in range(n)]
        bpe = max(1, len(batch_indices(n, self.batch_size, 0, self.seed, buckets)))
        target = epochs * bpe if max_steps is None else max_steps
        log_path = self.out_dir / log_name
        mode = "a" if self.step > 0 and log_path.exists() else "w"
        with log_path.open(mode) as fh:
            while self.step < target:
                epoch = self.step // bpe
                batches = batch_indices(n, self.batch_size, epoch, self.seed, buckets)
                for batch_idx in batches[self.step % bpe:]:
                    if self.step >= target:
                        break
                    metrics = self.train_step(dataset.batch(batch_idx))
                    fh.write(json.dumps(metrics, sort_keys=True) + "\n")
        return self.save_checkpoint(self.out_dir / checkpoint_name)

    # ---- persistence ----

    def save_checkpoint(self, path: str | Path) -> Path:
        tensors = {}
        for name, module in self.pipeline.parameter_groups().items():
            if module is not None:
                tensors.update(ckpt.state_dict_tensors(module, name))
        if self.optimizer is not None:
            flat = [name for g in self._param_names.values() for name, _ in g]
            for pname, state in zip(flat, self._flat_opt_state()):
                for key, value in state.items():
                    tensors[f"opt.{pname}.{key}"] = value
        for name, value in self._ema.items():
            tensors[f"ema.{name}"] = value
        for sname, gen in self._streams.items():
            tensors[f"rng.{sname}"] = gen.get_state()
        metadata = {
            "pipeline": self.pipeline.describe(),
            "step": self.step,
            "seed": self.seed,
            "policy": {g: getattr(self.policy, g) for g in GROUPS},
            "objective": {"kind": self.objective.kind, "mix_ratio": self.objective.mix_ratio},
        }
        return ckpt.save_archive(path, tensors, metadata)

    def _flat_opt_state(self):
        states = []
        for pg_params in self.optimizer.param_groups:
            for p in pg_params["params"]:
                states.append(self.optimizer.state.get(p, {}))
        return states

    def load_checkpoint(self, path: str | Path) -> None:
        tensors, metadata = ckpt.load_archive(path)
        for name, module in self.pipeline.parameter_groups().items():
            if module is not None:
                ckpt.load_state_dict_tensors(module, tensors, name)
        if self.optimizer is not None:
            flat = [
                (name, p) for g in self._param_names.values() for name, p in g
            ]
            for name, p in flat:
                prefix = f"opt.{name}."
                entries = {
                    k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)
                }
                if entries:
                    self.optimizer.state[p] = entries
        for name in self._ema:
            key = f"ema.{name}"
            if key in tensors:
                self._ema[name] = tensors[key].clone()
        for sname, gen in self._streams.items():
            key = f"rng.{sname}"
            if key in tensors:
                gen.set_state(tensors[key].to(torch.uint8))
        self.step = int(metadata.get("step", 0))

    def copy_ema_to_model(self) -> None:
        """Overwrite trainable parameters with their EMA shadows (for eval)."""
        with torch.no_grad():
            for group in self._param_names.values():
                for name, p in group:
                    p.copy_(self._ema[name])


def train_steps(trainer: Trainer, dataset, steps: int, buckets: list[int] | None = None) -> None:
    """Drive a trainer for a fixed number of steps without log files."""
    n = len(dataset)
    if trainer.objective.kind == OBJECTIVE_INSTRUCTION and buckets is None:
        buckets = [dataset.num_sources(i) for i in range(n)]
    bpe = max(1, len(batch_indices(n, trainer.batch_size, 0, trainer.seed, buckets)))
    while trainer.step < steps:
        epoch = trainer.step // bpe
        batches = batch_indices(n, trainer.batch_size, epoch, trainer.seed, buckets)
        for idx in batches[trainer.step % bpe:]:
            if trainer.step >= steps:
                break
            trainer.train_step(dataset.batch(idx))


def run_stage(
    pipeline: GenerationPipeline,
    dataset,
    epochs: int,
    policy: FreezePolicy,
    objective: ObjectiveSpec,
    sched: ScheduleConfig,
    out_dir: str | Path,
    seed: int = 0,
    batch_size: int = 32,
    max_steps: int | None = None,
    deterministic: bool = False,
    resume_from: str | Path | None = None,
) -> Path:
    """Convenience wrapper constructing a Trainer for a single stage."""
    trainer = Trainer(
        pipeline, policy, objective, sched,
        seed=seed, batch_size=batch_size, deterministic=deterministic, out_dir=out_dir,
    )
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    return trainer.run_stage(dataset, epochs, max_steps=max_steps)


def pretrain_backbone(
    backbone,
    tokenizer,
    captions: list[str],
    steps: int = 300,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
    pad_to: int = 16,
) -> float:
    """Brief next-token pre-training on synthetic captions before freezing.

    Gives the frozen backbone nontrivial structure; returns the final loss.
    """
    if steps <= 0:
        return float("nan")
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(backbone.parameters(), lr=lr, betas=(0.9, 0.999))
    rows = []
    for caption in captions:
        ids = tokenizer.tokenize(caption).ids[:pad_to]
        rows.append(ids + [tokenizer.pad_id] * (pad_to - len(ids)))
    ids = torch.tensor(rows, dtype=torch.long)
    loss = torch.zeros(())
    for _ in range(steps):
        idx = torch.randint(0, ids.shape[0], (batch_size,), generator=g)
        chunk = ids[idx]
        logits = backbone.next_token_logits(chunk[:, :-1], pad_id=tokenizer.pad_id)
        targets = chunk[:, 1:].reshape(-1)
        loss = nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), targets, ignore_index=tokenizer.pad_id
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return float(loss.detach())

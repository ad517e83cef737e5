"""Training orchestration: single-task runs, multitask co-training with
per-task fine-tune forks, snapshot collection and voted inference.

Multitask phase 1 draws one batch per task per cycle (round-robin order) and
applies one fused optimizer step: every stem output is stacked into a single
trunk pass, per-task losses are summed, and the trunk/stems/heads present in
the cycle update together. This is what makes co-training two tasks cheaper
than two separate runs while each head still only ever receives gradients
from its own task's batches. Phase 2 forks the shared network once per task
and fine-tunes each fork alone at the reduced learning-rate multiplier.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .network import ArchConfig, MultitaskNet, TaskSpec, build_network
from .optim import AdaDelta, lr_schedule
from .tensor import GradientTape, Tensor


@dataclass
class TrainConfig:
    batch_size: int = 20
    shared_epochs: int = 100
    finetune_epochs: int = 30
    snapshot_stride: int = 2
    snapshot_count: int = 5
    seed: int = 0
    share_first_conv: bool = True
    strict_determinism: bool = True
    finetune_heads_only: bool = False
    lr_shared: float = 1.0
    lr_finetune: float = 0.1
    rho: float = 0.95
    adadelta_eps: float = 1e-6

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.snapshot_count < 1 or self.snapshot_stride < 1:
            raise ValueError("snapshot_count and snapshot_stride must be >= 1")
        if self.snapshot_count * self.snapshot_stride > 2 * self.finetune_epochs:
            raise ValueError(
                f"snapshots do not fit in the fine-tune phase: "
                f"{self.snapshot_count} x {self.snapshot_stride} > 2 x {self.finetune_epochs}")
        if self.snapshot_epochs()[0] < 1:
            raise ValueError("snapshot schedule reaches before the first epoch")

    @property
    def total_epochs(self) -> int:
        return self.shared_epochs + self.finetune_epochs

    def snapshot_epochs(self) -> list[int]:
        """1-based epochs at which snapshots are captured: the final epoch E
        and the snapshot_count-1 epochs before it in steps of the stride."""
        last = self.total_epochs
        return [last - (self.snapshot_count - 1 - i) * self.snapshot_stride
                for i in range(self.snapshot_count)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    task_id: str
    loss: float
    lr: float


@dataclass
class Snapshot:
    epoch: int
    tensors: dict[str, np.ndarray]
    bn_initialized: list[bool]


@dataclass
class SnapshotSet:
    """Per-task parameter checkpoints taken near the end of training."""
    task: TaskSpec
    arch: ArchConfig
    share_first_conv: bool
    snapshots: list[Snapshot] = field(default_factory=list)

    def add(self, epoch: int, net: MultitaskNet) -> None:
        if self.snapshots and epoch <= self.snapshots[-1].epoch:
            raise ValueError("snapshot epochs must be strictly increasing")
        tensors = {p.name: p.data.copy() for p in net.parameters()}
        tensors.update({name: arr.copy() for name, arr in net.state_arrays()})
        self.snapshots.append(Snapshot(
            epoch, tensors, [s.initialized for s in net.bn_states()]))

    def epochs(self) -> list[int]:
        return [s.epoch for s in self.snapshots]

    def restore(self, index: int, dtype=np.float32) -> MultitaskNet:
        """Rebuild a single-task network and load the stored tensors into it."""
        snap = self.snapshots[index]
        net = build_network([self.task], self.arch,
                            share_first_conv=self.share_first_conv, seed=0, dtype=dtype)
        for p in net.parameters():
            p.data = snap.tensors[p.name].astype(dtype, copy=True)
        for name, arr in net.state_arrays():
            arr[...] = snap.tensors[name].astype(arr.dtype)
        for state, flag in zip(net.bn_states(), snap.bn_initialized):
            state.initialized = bool(flag)
        return net


class BatchStream:
    """Index stream over one training pool.

    Draws without replacement, reshuffling on exhaustion; remainders carry
    into the next batch so every batch holds exactly ``batch_size`` samples.
    Pools smaller than one batch are padded by resampling with replacement
    (with a warning), so pathological configurations still train.
    """

    def __init__(self, pool_size: int, batch_size: int, seed):
        self.pool_size = pool_size
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._undersized = pool_size < batch_size
        if self._undersized:
            warnings.warn(
                f"training pool ({pool_size}) smaller than one batch "
                f"({batch_size}); padding by resampling with replacement")
        self._perm = self._rng.permutation(pool_size)
        self._cursor = 0

    def next_batch(self) -> np.ndarray:
        if self._undersized:
            pad = self._rng.choice(self.pool_size, self.batch_size - self.pool_size,
                                   replace=True)
            return np.concatenate([self._rng.permutation(self.pool_size), pad])
        out = np.empty(self.batch_size, dtype=np.int64)
        filled = 0
        while filled < self.batch_size:
            avail = self.pool_size - self._cursor
            if avail == 0:
                self._perm = self._rng.permutation(self.pool_size)
                self._cursor = 0
                continue
            take = min(self.batch_size - filled, avail)
            out[filled:filled + take] = self._perm[self._cursor:self._cursor + take]
            self._cursor += take
            filled += take
        return out

    def state(self) -> dict:
        return {"rng": self._rng.bit_generator.state, "cursor": self._cursor,
                "perm": self._perm.tolist()}

    def load_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._cursor = state["cursor"]
        self._perm = np.asarray(state["perm"], dtype=np.int64)


def _steps_per_epoch(pool_size: int, batch_size: int) -> int:
    return max(1, math.ceil(pool_size / batch_size))


def _train_step(net: MultitaskNet, opt: AdaDelta, task_id: str, xb: np.ndarray,
                yb: np.ndarray, trainables: list[Tensor], lr: float) -> float:
    with GradientTape() as tape:
        feats = net.forward_features(Tensor(xb), task_id, training=True)
        probs = T.softmax(net.forward_logits(feats, task_id))
        loss = T.cross_entropy_loss(probs, yb)
    grads = T.backward(tape, loss, params=trainables)
    opt.step(grads, lr)
    return float(loss.data)


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------

def write_history(history: list[EpochRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "task", "loss", "lr"])
        for rec in history:
            writer.writerow([rec.epoch, rec.task_id, f"{rec.loss:.6f}", rec.lr])


def _snapshot_path(run_dir: str, task_id: str, epoch: int) -> str:
    return os.path.join(run_dir, "snapshots", task_id, f"{epoch}.ckpt")


def save_snapshot_set(sset: SnapshotSet, run_dir: str) -> None:
    for snap in sset.snapshots:
        path = _snapshot_path(run_dir, sset.task.task_id, snap.epoch)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        names = sorted(snap.tensors)
        save_checkpoint(
            path,
            arch=sset.arch.to_dict(),
            tasks=[[sset.task.task_id, sset.task.num_classes,
                    sset.task.input_channels, sset.share_first_conv]],
            tensors=[(n, snap.tensors[n]) for n in names],
            extra={"epoch": snap.epoch, "bn_initialized": snap.bn_initialized,
                   "kind": "snapshot"})


def load_snapshot_set(run_dir: str, task_id: str) -> SnapshotSet:
    snap_dir = os.path.join(run_dir, "snapshots", task_id)
    if not os.path.isdir(snap_dir):
        raise FileNotFoundError(f"no snapshots for task {task_id!r} under {run_dir}")
    files = sorted((int(os.path.splitext(f)[0]), f) for f in os.listdir(snap_dir)
                   if f.endswith(".ckpt"))
    if not files:
        raise FileNotFoundError(f"no snapshot files in {snap_dir}")
    sset = None
    for epoch, fname in files:
        ck = load_checkpoint(os.path.join(snap_dir, fname))
        tid, k, c, share = ck.tasks[0]
        if sset is None:
            sset = SnapshotSet(TaskSpec(tid, int(k), int(c)),
                               ArchConfig.from_dict(ck.arch), bool(share))
        sset.snapshots.append(Snapshot(epoch, dict(ck.tensors),
                                       list(ck.extra["bn_initialized"])))
    return sset


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------

class SingleTaskTrainer:
    """130-epoch (by default) AdaDelta loop over one task's augmented pool."""

    def __init__(self, task: TaskSpec, x: np.ndarray, y: np.ndarray,
                 arch: ArchConfig, config: TrainConfig, dtype=np.float32):
        if x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ValueError(f"bad pool: x {x.shape}, y {y.shape}")
        self.task, self.arch, self.config = task, arch, config
        self.x, self.y = x, y
        net_seed, stream_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.net = build_network([task], arch, share_first_conv=config.share_first_conv,
                                 seed=net_seed, dtype=dtype)
        self.opt = AdaDelta(self.net.parameters(), rho=config.rho, eps=config.adadelta_eps)
        self.stream = BatchStream(x.shape[0], config.batch_size, stream_seed)
        self.steps_per_epoch = _steps_per_epoch(x.shape[0], config.batch_size)
        self.history: list[EpochRecord] = []
        self.snapshot_set = SnapshotSet(task, arch, config.share_first_conv)
        self.completed_epochs = 0
        self.phase_seconds = {"shared": 0.0, "finetune": 0.0}

    def _trainables(self, epoch_idx: int) -> list[Tensor]:
        if self.config.finetune_heads_only and epoch_idx >= self.config.shared_epochs:
            return self.net.heads[self.task.task_id].parameters()
        return self.net.parameters()

    def run(self, run_dir: str | None = None, stop_after_epoch: int | None = None):
        cfg = self.config
        if run_dir:
            _init_run_dir(run_dir, cfg, self.arch, [self.task])
        snaps = set(cfg.snapshot_epochs())
        for epoch_idx in range(self.completed_epochs, cfg.total_epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(epoch_idx, cfg.shared_epochs, cfg.finetune_epochs,
                             cfg.lr_shared, cfg.lr_finetune)
            trainables = self._trainables(epoch_idx)
            losses = []
            for _ in range(self.steps_per_epoch):
                idx = self.stream.next_batch()
                losses.append(_train_step(self.net, self.opt, self.task.task_id,
                                          self.x[idx], self.y[idx], trainables, lr))
            phase = "shared" if epoch_idx < cfg.shared_epochs else "finetune"
            self.phase_seconds[phase] += time.perf_counter() - t0
            epoch = epoch_idx + 1
            self.history.append(EpochRecord(epoch, self.task.task_id,
                                            float(np.mean(losses)), lr))
            if epoch in snaps:
                self.snapshot_set.add(epoch, self.net)
            self.completed_epochs = epoch
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
        if run_dir:
            write_history(self.history, os.path.join(run_dir, "history.csv"))
            save_snapshot_set(self.snapshot_set, run_dir)
        return self.snapshot_set, self.history

    # -- resume support ----------------------------------------------------

    def save_state(self, path: str) -> None:
        tensors = [(p.name, p.data) for p in self.net.parameters()]
        tensors += self.net.state_arrays()
        tensors += self.opt.state_arrays()
        for snap in self.snapshot_set.snapshots:
            for name in sorted(snap.tensors):
                tensors.append((f"snapshot/{snap.epoch}/{name}", snap.tensors[name]))
        extra = {
            "kind": "single",
            "config": self.config.to_dict(),
            "completed_epochs": self.completed_epochs,
            "stream": self.stream.state(),
            "history": [[r.epoch, r.task_id, r.loss, r.lr] for r in self.history],
            "snapshot_epochs": self.snapshot_set.epochs(),
            "snapshot_bn": [s.bn_initialized for s in self.snapshot_set.snapshots],
            "bn_initialized": [s.initialized for s in self.net.bn_states()],
        }
        save_checkpoint(path, arch=self.arch.to_dict(),
                        tasks=[[self.task.task_id, self.task.num_classes,
                                self.task.input_channels, self.config.share_first_conv]],
                        tensors=tensors, extra=extra)

    @classmethod
    def from_checkpoint(cls, path: str, x: np.ndarray, y: np.ndarray,
                        dtype=np.float32) -> "SingleTaskTrainer":
        ck = load_checkpoint(path)
        if ck.extra.get("kind") != "single":
            raise ValueError(f"{path} is not a single-task trainer checkpoint")
        tid, k, c, _ = ck.tasks[0]
        task = TaskSpec(tid, int(k), int(c))
        trainer = cls(task, x, y, ArchConfig.from_dict(ck.arch),
                      TrainConfig.from_dict(ck.extra["config"]), dtype=dtype)
        _restore_net(trainer.net, ck)
        trainer.opt.load_state_arrays(ck.tensors)
        trainer.stream.load_state(ck.extra["stream"])
        trainer.completed_epochs = ck.extra["completed_epochs"]
        trainer.history = [EpochRecord(int(e), t, float(l), float(r))
                           for e, t, l, r in ck.extra["history"]]
        for epoch, bn in zip(ck.extra["snapshot_epochs"], ck.extra["snapshot_bn"]):
            prefix = f"snapshot/{epoch}/"
            tensors = {n[len(prefix):]: a for n, a in ck.tensors.items()
                       if n.startswith(prefix)}
            trainer.snapshot_set.snapshots.append(Snapshot(int(epoch), tensors, list(bn)))
        return trainer


def _restore_net(net: MultitaskNet, ck: Checkpoint) -> None:
    for p in net.parameters():
        p.data = ck.tensors[p.name].astype(p.data.dtype, copy=True)
    for name, arr in net.state_arrays():
        arr[...] = ck.tensors[name].astype(arr.dtype)
    for state, flag in zip(net.bn_states(), ck.extra["bn_initialized"]):
        state.initialized = bool(flag)


def _init_run_dir(run_dir: str, config: TrainConfig, arch: ArchConfig,
                  tasks: list[TaskSpec]) -> None:
    os.makedirs(run_dir, exist_ok=True)
    payload = {"train": config.to_dict(), "arch": arch.to_dict(),
               "tasks": [{"task_id": t.task_id, "num_classes": t.num_classes,
                          "input_channels": t.input_channels} for t in tasks]}
    with open(os.path.join(run_dir, "config"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


class MultitaskTrainer:
    """Co-trains one extractor over several tasks, then fine-tunes per-task forks."""

    def __init__(self, tasks: list[TaskSpec], pools: dict[str, tuple[np.ndarray, np.ndarray]],
                 arch: ArchConfig, config: TrainConfig, dtype=np.float32):
        if not tasks:
            raise ValueError("task list is empty")
        for t in tasks:
            if t.task_id not in pools:
                raise ValueError(f"no training pool for task {t.task_id!r}")
        self.tasks, self.arch, self.config = tasks, arch, config
        self.pools = pools
        self.dtype = dtype
        seeds = np.random.SeedSequence(config.seed).spawn(1 + len(tasks))
        self.net = build_network(tasks, arch, share_first_conv=config.share_first_conv,
                                 seed=seeds[0], dtype=dtype)
        self.opt = AdaDelta(self.net.parameters(), rho=config.rho, eps=config.adadelta_eps)
        self.streams = {t.task_id: BatchStream(pools[t.task_id][0].shape[0],
                                               config.batch_size, seeds[1 + i])
                        for i, t in enumerate(tasks)}
        smallest = min(pools[t.task_id][0].shape[0] for t in tasks)
        self.steps_per_epoch = _steps_per_epoch(smallest, config.batch_size)
        self.history: list[EpochRecord] = []
        self.completed_epochs = 0
        self.snapshot_sets: dict[str, SnapshotSet] = {}
        self.phase_seconds = {"shared": 0.0, "finetune": 0.0}
        self._all_trainables = self._trainables_for(self.net.task_order)

    def _trainables_for(self, task_ids) -> list[Tensor]:
        trainables, seen = [], set()
        for tid in task_ids:
            for p in self.net.parameters_for_task(tid):
                if id(p) not in seen:
                    seen.add(id(p))
                    trainables.append(p)
        return trainables

    def step_tasks(self, batches: dict[str, tuple[np.ndarray, np.ndarray]],
                   lr_multiplier: float) -> dict[str, float]:
        """One fused optimizer step over the given per-task batches.

        Stem outputs are stacked into a single trunk pass; per-task mean
        losses are summed for the backward sweep. Only the stems/heads of
        tasks present in ``batches`` (plus the trunk) are updated, so a step
        on task A's batch leaves task B's head untouched.
        """
        order = [tid for tid in self.net.task_order if tid in batches]
        if not order:
            raise ValueError("step_tasks needs at least one batch")
        losses: dict[str, float] = {}
        with GradientTape() as tape:
            stem_outs = [self.net.stem_out(Tensor(batches[tid][0]), tid) for tid in order]
            feats = self.net.trunk(T.concat_batch(stem_outs), training=True)
            total = None
            offset = 0
            for tid, stem_out in zip(order, stem_outs):
                b = stem_out.shape[0]
                task_feats = T.slice_batch(feats, offset, offset + b)
                offset += b
                probs = T.softmax(self.net.forward_logits(task_feats, tid))
                loss = T.cross_entropy_loss(probs, batches[tid][1])
                losses[tid] = float(loss.data)
                total = loss if total is None else T.add(total, loss)
        if len(order) == len(self.net.task_order):
            trainables = self._all_trainables
        else:
            trainables = self._trainables_for(order)
        grads = T.backward(tape, total, params=trainables)
        self.opt.step(grads, lr_multiplier)
        return losses

    def _run_shared_phase(self, stop_after_epoch: int | None) -> None:
        cfg = self.config
        for epoch_idx in range(self.completed_epochs, cfg.shared_epochs):
            lr = lr_schedule(epoch_idx, cfg.shared_epochs, cfg.finetune_epochs,
                             cfg.lr_shared, cfg.lr_finetune)
            sums = {t.task_id: 0.0 for t in self.tasks}
            for _ in range(self.steps_per_epoch):
                batches = {}
                for t in self.tasks:  # round-robin draw order
                    x, y = self.pools[t.task_id]
                    idx = self.streams[t.task_id].next_batch()
                    batches[t.task_id] = (x[idx], y[idx])
                for tid, loss in self.step_tasks(batches, lr).items():
                    sums[tid] += loss
            epoch = epoch_idx + 1
            for t in self.tasks:
                self.history.append(EpochRecord(
                    epoch, t.task_id, sums[t.task_id] / self.steps_per_epoch, lr))
            self.completed_epochs = epoch
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                return

    def _fork(self, task: TaskSpec) -> tuple[MultitaskNet, AdaDelta]:
        fork = build_network([task], self.arch,
                             share_first_conv=self.config.share_first_conv,
                             seed=0, dtype=self.dtype)
        src_params = {p.name: p for p in self.net.parameters_for_task(task.task_id)}
        for p in fork.parameters():
            p.data = src_params[p.name].data.copy()
        for (name, dst), (_, src) in zip(fork.state_arrays(), self.net.state_arrays()):
            dst[...] = src
        for dst_state, src_state in zip(fork.bn_states(), self.net.bn_states()):
            dst_state.initialized = src_state.initialized
        opt = self.opt.clone_state_for(fork.parameters(), src_params)
        return fork, opt

    def _finetune_task(self, task: TaskSpec) -> SnapshotSet:
        cfg = self.config
        fork, opt = self._fork(task)
        x, y = self.pools[task.task_id]
        stream = self.streams[task.task_id]
        steps = _steps_per_epoch(x.shape[0], cfg.batch_size)
        sset = SnapshotSet(task, self.arch, cfg.share_first_conv)
        snaps = set(cfg.snapshot_epochs())
        if cfg.finetune_heads_only:
            trainables = fork.heads[task.task_id].parameters()
        else:
            trainables = fork.parameters()
        for epoch_idx in range(cfg.shared_epochs, cfg.total_epochs):
            lr = lr_schedule(epoch_idx, cfg.shared_epochs, cfg.finetune_epochs,
                             cfg.lr_shared, cfg.lr_finetune)
            losses = []
            for _ in range(steps):
                idx = stream.next_batch()
                losses.append(_train_step(fork, opt, task.task_id,
                                          x[idx], y[idx], trainables, lr))
            epoch = epoch_idx + 1
            self.history.append(EpochRecord(epoch, task.task_id,
                                            float(np.mean(losses)), lr))
            if epoch in snaps:
                sset.add(epoch, fork)
        return sset

    def run(self, run_dir: str | None = None, stop_after_epoch: int | None = None):
        cfg = self.config
        if run_dir:
            _init_run_dir(run_dir, cfg, self.arch, self.tasks)
        t0 = time.perf_counter()
        self._run_shared_phase(stop_after_epoch)
        self.phase_seconds["shared"] += time.perf_counter() - t0
        if stop_after_epoch is not None and self.completed_epochs >= stop_after_epoch:
            return self.snapshot_sets, self.history
        t1 = time.perf_counter()
        for task in self.tasks:
            if task.task_id in self.snapshot_sets:
                continue  # already fine-tuned (resumed run)
            self.snapshot_sets[task.task_id] = self._finetune_task(task)
        self.phase_seconds["finetune"] += time.perf_counter() - t1
        self.completed_epochs = cfg.total_epochs
        if run_dir:
            write_history(self.history, os.path.join(run_dir, "history.csv"))
            for sset in self.snapshot_sets.values():
                save_snapshot_set(sset, run_dir)
        return self.snapshot_sets, self.history

    # -- resume support ----------------------------------------------------

    def save_state(self, path: str) -> None:
        """Resumable state; valid at shared-phase epoch boundaries and after
        any completed fine-tune fork."""
        tensors = [(p.name, p.data) for p in self.net.parameters()]
        tensors += self.net.state_arrays()
        tensors += self.opt.state_arrays()
        for tid, sset in self.snapshot_sets.items():
            for snap in sset.snapshots:
                for name in sorted(snap.tensors):
                    tensors.append((f"snapshotset/{tid}/{snap.epoch}/{name}",
                                    snap.tensors[name]))
        extra = {
            "kind": "multitask",
            "config": self.config.to_dict(),
            "completed_epochs": self.completed_epochs,
            "streams": {tid: s.state() for tid, s in self.streams.items()},
            "history": [[r.epoch, r.task_id, r.loss, r.lr] for r in self.history],
            "finetuned": {tid: {"epochs": sset.epochs(),
                                "bn": [s.bn_initialized for s in sset.snapshots]}
                          for tid, sset in self.snapshot_sets.items()},
            "bn_initialized": [s.initialized for s in self.net.bn_states()],
        }
        save_checkpoint(path, arch=self.arch.to_dict(),
                        tasks=[[t.task_id, t.num_classes, t.input_channels,
                                self.config.share_first_conv] for t in self.tasks],
                        tensors=tensors, extra=extra)

    @classmethod
    def from_checkpoint(cls, path: str, pools: dict[str, tuple[np.ndarray, np.ndarray]],
                        dtype=np.float32) -> "MultitaskTrainer":
        ck = load_checkpoint(path)
        if ck.extra.get("kind") != "multitask":
            raise ValueError(f"{path} is not a multitask trainer checkpoint")
        tasks = [TaskSpec(tid, int(k), int(c)) for tid, k, c, _ in ck.tasks]
        trainer = cls(tasks, pools, ArchConfig.from_dict(ck.arch),
                      TrainConfig.from_dict(ck.extra["config"]), dtype=dtype)
        _restore_net(trainer.net, ck)
        trainer.opt.load_state_arrays(ck.tensors)
        for tid, stream in trainer.streams.items():
            stream.load_state(ck.extra["streams"][tid])
        trainer.completed_epochs = ck.extra["completed_epochs"]
        trainer.history = [EpochRecord(int(e), t, float(l), float(r))
                           for e, t, l, r in ck.extra["history"]]
        for tid, meta in ck.extra["finetuned"].items():
            task = trainer.net.tasks[tid]
            sset = SnapshotSet(task, trainer.arch, trainer.config.share_first_conv)
            for epoch, bn in zip(meta["epochs"], meta["bn"]):
                prefix = f"snapshotset/{tid}/{epoch}/"
                tensors = {n[len(prefix):]: a for n, a in ck.tensors.items()
                           if n.startswith(prefix)}
                sset.snapshots.append(Snapshot(int(epoch), tensors, list(bn)))
            trainer.snapshot_sets[tid] = sset
        return trainer


# ---------------------------------------------------------------------------
# voted inference
# ---------------------------------------------------------------------------

def vote_predict(nets: list[MultitaskNet], task_id: str, patches: np.ndarray,
                 batch_size: int = 512) -> np.ndarray:
    """Majority vote over per-net argmax predictions, 2-2-1 style ties broken
    by the larger probability summed across nets for the tied classes."""
    if not nets:
        raise ValueError("vote_predict needs at least one network")
    n = patches.shape[0]
    k = nets[0].tasks[task_id].num_classes
    counts = np.zeros((n, k), dtype=np.float64)
    prob_sums = np.zeros((n, k), dtype=np.float64)
    for net in nets:
        for start in range(0, n, batch_size):
            chunk = patches[start:start + batch_size]
            probs = net.predict_probs(chunk, task_id)
            winners = probs.argmax(axis=1)
            counts[np.arange(start, start + chunk.shape[0]), winners] += 1.0
            prob_sums[start:start + chunk.shape[0]] += probs
    # counts dominate; prob sums (< len(nets)+1) only ever separate ties
    return (counts * (len(nets) + 1) + prob_sums).argmax(axis=1)


def snapshot_predict_vote(snapshots: SnapshotSet, patches: np.ndarray,
                          batch_size: int = 512, dtype=np.float32) -> np.ndarray:
    """Voted 0-based class prediction for a batch of patches."""
    if not snapshots.snapshots:
        raise ValueError("snapshot set is empty")
    nets = [snapshots.restore(i, dtype=dtype) for i in range(len(snapshots.snapshots))]
    return vote_predict(nets, snapshots.task.task_id, patches, batch_size)


def predict_coords(snapshots: SnapshotSet, cube, rows: np.ndarray, cols: np.ndarray,
                   patch_size: int, chunk: int = 1024, batch_size: int = 512) -> np.ndarray:
    """Voted prediction at scene coordinates, chunked to bound patch memory.

    Returns 1-based class labels (matching LabelRaster numbering).
    """
    from .data import extract_patches
    nets = [snapshots.restore(i) for i in range(len(snapshots.snapshots))]
    tid = snapshots.task.task_id
    out = np.empty(len(rows), dtype=np.int64)
    for start in range(0, len(rows), chunk):
        sl = slice(start, min(start + chunk, len(rows)))
        patches = extract_patches(cube, np.asarray(rows[sl]), np.asarray(cols[sl]),
                                  patch_size)
        out[sl] = vote_predict(nets, tid, patches, batch_size) + 1
    return out

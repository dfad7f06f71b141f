"""Teacher-forced training with dev-set model selection."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .autograd import backward
from .decoding import MAX_STEPS, decode_many
from .graph import Triple, canonical_serialize, read_triples
from .metrics import MetricsReport, evaluate
from .model import ISEModel, ModelConfig, Vocab
from .oracle import ExpansionAction, apply_actions, derive_actions, reduce_extended

log = logging.getLogger(__name__)


class OracleFailure(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"training triple on line {line}: {message}")
        self.line = line


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    warmup_steps: int = 2000
    eval_interval: int = 1  # epochs between dev evaluations
    lr_scale: float = 1.0
    train_fraction: float = 1.0
    time_budget: float | None = None  # seconds; checked at eval points
    max_decode_steps: int = MAX_STEPS
    threads: int = 1

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "warmup_steps", "eval_interval", "max_decode_steps", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")


@dataclass
class TrainResult:
    model: ISEModel
    checkpoint: Path | None
    best: dict
    log: list[dict] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)


def subsample(triples: Sequence[Triple], fraction: float, seed: int) -> list[Triple]:
    """Deterministic subset in file order; smaller fractions nest inside larger ones."""
    if fraction >= 1.0:
        return list(triples)
    n = max(1, round(fraction * len(triples)))
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED]))).permutation(len(triples))
    return [triples[i] for i in sorted(perm[:n])]


def oracle_actions(triples: Sequence[Triple]) -> list[list[ExpansionAction]]:
    out = []
    for line, t in enumerate(triples, start=1):
        try:
            actions = derive_actions(t.source, t.target)
            ok = canonical_serialize(reduce_extended(apply_actions(t.source, actions))) == canonical_serialize(t.target)
        except ValueError as exc:
            raise OracleFailure(line, str(exc)) from None
        if not ok:
            raise OracleFailure(line, "oracle actions do not reproduce the target")
        out.append(actions)
    return out


def evaluate_model(model: ISEModel, triples: Sequence[Triple], max_steps: int = MAX_STEPS, threads: int = 1) -> MetricsReport:
    results = decode_many(model, [(t.source, t.query) for t in triples], max_steps, threads)
    return evaluate([r.graph for r in results], [t.target for t in triples], [t.query for t in triples])


def save_model(model: ISEModel, path: str | Path, extra: dict | None = None) -> None:
    nn.save_checkpoint(model.params, model.config.to_dict(), path, {"vocab": model.vocab.to_json(), **(extra or {})})


def load_model(path: str | Path) -> tuple[ISEModel, dict]:
    ps, config, extra = nn.load_checkpoint(path)
    if "vocab" not in extra:
        raise nn.CheckpointError("checkpoint has no vocabulary")
    vocab = Vocab.from_json(extra["vocab"])
    return ISEModel(ModelConfig(**config), vocab, params=ps), extra


def fit(
    model: ISEModel,
    train: Sequence[Triple],
    dev: Sequence[Triple],
    cfg: TrainConfig,
    checkpoint: str | Path | None = None,
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize ``model`` in place; the returned model carries the best dev parameters."""
    actions = oracle_actions(train)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x7A1])))
    drop_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xD40])))
    schedule = nn.LrSchedule(model.config.hidden_dim, cfg.warmup_steps, cfg.lr_scale)
    state = nn.AdamState()
    model.params.zero_grad()

    start = time.monotonic()
    records: list[dict] = []
    trace: list[float] = []
    best_key: tuple | None = None
    best: dict = {}
    best_params = {n: p.data.copy() for n, p in model.params.items()}
    stale = 0
    order = np.arange(len(train))
    for epoch in range(1, cfg.max_epochs + 1):
        model.train(True, drop_rng)
        rng.shuffle(order)
        epoch_loss = 0.0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            batch_loss = 0.0
            for i in idx:
                t = train[i]
                loss = model.triple_loss(t, actions[i])
                batch_loss += loss.item()
                backward(loss)
            nn.adam_step(model.params, state, schedule, grad_scale=1.0 / len(idx))
            trace.append(batch_loss / len(idx))
            epoch_loss += batch_loss
        model.train(False)
        if epoch % cfg.eval_interval and epoch != cfg.max_epochs:
            continue
        report = evaluate_model(model, dev, cfg.max_decode_steps, cfg.threads)
        rec = {
            "epoch": epoch,
            "step": state.step,
            "lr": schedule(state.step),
            "train_loss": epoch_loss / len(train),
            "elapsed": round(time.monotonic() - start, 3),
            **{f"dev_{k}": v for k, v in report.as_dict().items()},
        }
        key = (report.graph_acc, report.node_f1 + report.edge_f1)
        if best_key is None or key > best_key:
            best_key, best, stale = key, rec, 0
            best_params = {n: p.data.copy() for n, p in model.params.items()}
            if checkpoint is not None:
                save_model(model, checkpoint, {"epoch": epoch, "dev": report.as_dict(), "train_config": asdict(cfg)})
        else:
            stale += 1
        rec["best_dev_graph_acc"] = best["dev_graph_acc"]
        records.append(rec)
        log.info(json.dumps(rec, sort_keys=True))
        if on_eval is not None:
            on_eval(rec)
        if report.graph_acc >= 1.0 or stale >= cfg.patience:
            break
        if cfg.time_budget is not None and time.monotonic() - start > cfg.time_budget:
            log.info("time budget exhausted after epoch %d", epoch)
            break
    for n, p in model.params.items():
        p.data[...] = best_params[n]
    return TrainResult(model, Path(checkpoint) if checkpoint is not None else None, best, records, trace)


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
) -> TrainResult:
    """Train on ``dataset_dir/train.jsonl``, select on ``dev.jsonl``, write ``model.ckpt`` and ``train_log.jsonl``."""
    data = Path(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = subsample(read_triples(data / "train.jsonl"), train_cfg.train_fraction, train_cfg.seed)
    dev_set = read_triples(data / "dev.jsonl")
    vocab = Vocab.build(train_set)
    model = ISEModel(model_cfg, vocab, seed=train_cfg.seed)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def write(rec: dict) -> None:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        return fit(model, train_set, dev_set, train_cfg, out / "model.ckpt", write)

"""Stage losses, training loops, checkpoints, gradient verification and the ablation harness."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .core import Document
from .model import PRETRAIN_TASKS, HIPModel, ModelConfig

log = logging.getLogger(__name__)

TERMS = ("spot", "mim", "etd", "wtb", "mlm", "ror", "tag")
LAMBDA_TAG = 10.0
CHECKPOINT_VERSION = 1


@dataclass
class LossReport:
    stage: str
    terms: dict  # term name -> scalar (tensor or float); inactive terms are absent
    total: object
    active_terms: frozenset = field(default_factory=frozenset)

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach()) if torch.is_tensor(self.total) else float(self.total)
        return out


def loss_pretrain(terms: dict, active: Iterable[str] = PRETRAIN_TASKS) -> LossReport:
    """Unit-weight sum of L_Spot and the active pre-training terms."""
    active = frozenset(active)
    bad = active - set(PRETRAIN_TASKS)
    if bad:
        raise ValueError(f"not pre-training tasks: {sorted(bad)}")
    if "spot" not in terms:
        raise KeyError("the spotting loss is always active")
    used = {"spot": terms["spot"]}
    for name in PRETRAIN_TASKS:
        if name in active:
            used[name] = terms[name]
    total = sum(used[k] for k in used)
    return LossReport("pretrain", used, total, active)


def loss_finetune(terms: dict, lambda_tag: float = LAMBDA_TAG) -> LossReport:
    """L_Spot + L_ETD + lambda_tag * L_Tag (ETD computed with lambda_size = 1.0)."""
    used = {k: terms[k] for k in ("spot", "etd", "tag")}
    total = used["spot"] + used["etd"] + lambda_tag * used["tag"]
    return LossReport("finetune", used, total, frozenset({"etd", "tag"}))


# -- gradient verification ------------------------------------------------------------

def grad_check(loss_closure: Callable[[], torch.Tensor], parameters: Sequence[torch.Tensor] | dict,
               eps: float = 1e-6, samples: int = 64, seed: int = 0, atol: float = 1e-7) -> float:
    """Max relative error between autograd and central differences.

    ``samples`` scalar entries are drawn (seeded) from each parameter group. A group's
    error is ``max|a - n| / max(max|a|, max|n|, atol)`` over its sampled entries: an
    entry far below the group's gradient scale sits under the round-off floor of the
    difference quotient (about ``|loss| * 2**-52 / eps``), so per-entry ratios there
    measure noise rather than the gradient. Use float64.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    groups = parameters if isinstance(parameters, dict) else {"params": list(parameters)}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, params in groups.items():
        params = [p for p in (params if isinstance(params, (list, tuple)) else [params]) if p.requires_grad]
        if not params:
            continue
        for p in params:
            p.grad = None
        loss = loss_closure()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        sizes = np.array([p.numel() for p in params])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(samples, total), replace=False)
        offsets = np.cumsum(sizes) - sizes
        ana, num = [], []
        with torch.no_grad():
            for flat in picks:
                k = int(np.searchsorted(offsets, flat, side="right") - 1)
                i = int(flat - offsets[k])
                view = params[k].view(-1)
                orig = view[i].item()
                view[i] = orig + eps
                fp = float(loss_closure())
                view[i] = orig - eps
                fm = float(loss_closure())
                view[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("non-finite loss during finite differences")
                num.append((fp - fm) / (2 * eps))
                ana.append(float(grads[k].reshape(-1)[i]))
        ana, num = np.array(ana), np.array(num)
        diff = np.abs(ana - num)
        err = float(diff.max() / max(np.abs(ana).max(), np.abs(num).max(), atol))
        j = int(diff.argmax())
        log.debug("%s: worst entry %d analytic %.3e numeric %.3e, group error %.2e", name, picks[j], ana[j], num[j], err)
        worst = max(worst, err)
    return worst


# -- training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "finetune"
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    active: tuple[str, ...] = PRETRAIN_TASKS
    decay_at: float | None = 2 / 3  # fraction of steps; None = constant lr
    decay_factor: float = 0.1
    grad_clip: float | None = 5.0
    warmup: int = 0  # linear warmup steps
    log_every: int = 100


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def train_step(model: HIPModel, opt: torch.optim.Optimizer, docs: Sequence[Document], tcfg: TrainConfig,
               rng: np.random.Generator) -> LossReport:
    model.train()
    terms = model.loss_terms(docs, tcfg.stage, tcfg.active, rng)
    report = loss_pretrain(terms, tcfg.active) if tcfg.stage == "pretrain" else loss_finetune(terms)
    opt.zero_grad(set_to_none=True)
    report.total.backward()
    if tcfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
    opt.step()
    return report


def lr_factor(step: int, tcfg: TrainConfig) -> float:
    """Linear warmup over the first `warmup` steps, then a single step decay."""
    f = 1.0
    if tcfg.warmup and step < tcfg.warmup:
        f = (step + 1) / tcfg.warmup
    if tcfg.decay_at is not None and step >= max(1, int(round(tcfg.decay_at * tcfg.steps))):
        f *= tcfg.decay_factor
    return f


def make_optimizer(model: HIPModel, tcfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, tcfg))
    return opt, sched


def train(model: HIPModel, docs: Sequence[Document], tcfg: TrainConfig, checkpoint: str | Path | None = None,
          resume: str | Path | None = None, callback: Callable[[int, LossReport], bool] | None = None) -> list[dict]:
    """Run ``tcfg.steps`` optimisation steps over seeded mini-batches of ``docs``.

    ``callback(step, report)`` may return True to stop early. Returns per-step loss dicts.
    """
    if not docs:
        raise ValueError("no training documents")
    set_deterministic(tcfg.seed)
    opt, sched = make_optimizer(model, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    start = 0
    order: list[int] = []
    if resume is not None:
        start, state = load_checkpoint(resume, model, opt, sched)
        if state is not None:
            rng.bit_generator.state = state["rng"]
            order = list(state["order"])
    history = []
    t0 = time.time()
    done = start
    # Adam moments of near-dead units go subnormal late in training and slow CPU steps ~3x.
    # numpy caches its float limits on first use and warns if that happens under the flush.
    np.finfo(np.float32), np.finfo(np.float64)
    torch.set_flush_denormal(True)
    try:
        for step in range(start, tcfg.steps):
            if len(order) < tcfg.batch_size:
                order += [int(i) for i in rng.permutation(len(docs))]
            batch, order = order[:tcfg.batch_size], order[tcfg.batch_size:]
            report = train_step(model, opt, [docs[i] for i in batch], tcfg, rng)
            sched.step()
            done = step + 1
            history.append(report.as_floats())
            if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
                log.info("step %d %s (%.0fs)", step + 1,
                         " ".join(f"{k}={v:.4f}" for k, v in history[-1].items()), time.time() - t0)
            if callback is not None and callback(step, report):
                break
        if checkpoint is not None:
            save_checkpoint(checkpoint, model, opt, sched, done, {"rng": rng.bit_generator.state, "order": order})
    finally:
        torch.set_flush_denormal(False)
    return history


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: HIPModel, opt=None, sched=None, step: int = 0, loop_state=None) -> None:
    """``loop_state`` holds the batch sampler's rng state and pending order for exact resumption."""
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "model": model.state_dict(),
        "optimizer": opt.state_dict() if opt is not None else None,
        "scheduler": sched.state_dict() if sched is not None else None,
        "step": step,
        "loop_state": loop_state,
    }, path)


def model_config_from_dict(d: dict) -> ModelConfig:
    from .chargrid import GridConfig
    from .grouping import GroupConfig
    from .labeling import SemConfig
    from .spotting import MIMConfig, SpotConfig

    def build(cls, values):
        kw = {}
        for k, v in values.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    return ModelConfig(
        spot=build(SpotConfig, d["spot"]), mim=build(MIMConfig, d["mim"]), grid=build(GridConfig, d["grid"]),
        group=build(GroupConfig, d["group"]), sem=build(SemConfig, d["sem"]),
    )


def load_checkpoint(path, model: HIPModel | None = None, opt=None, sched=None):
    """Restore into ``model`` (built from the stored config when None).

    Returns ``(model, step, loop_state)`` when ``model`` is None, else ``(step, loop_state)``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ck.get('version')}")
    built = model is None
    if built:
        model = HIPModel(model_config_from_dict(ck["config"]))
    if config_hash(model.cfg) != ck["config_hash"]:
        raise ValueError("checkpoint config hash does not match the model config")
    model.load_state_dict(ck["model"])
    if opt is not None and ck["optimizer"] is not None:
        opt.load_state_dict(ck["optimizer"])
    if sched is not None and ck["scheduler"] is not None:
        sched.load_state_dict(ck["scheduler"])
    if built:
        return model, ck["step"], ck["loop_state"]
    return ck["step"], ck["loop_state"]


# -- ablation ------------------------------------------------------------------------

# toggles per row of the hierarchical pre-training ablation; (g) trains the spotter only
ABLATION_ROWS = {
    "a": PRETRAIN_TASKS,
    "b": ("mim",),
    "c": ("etd",),
    "d": ("wtb",),
    "e": ("ror",),
    "f": ("mlm",),
    "g": (),
}


@dataclass
class AblationRow:
    row: str
    seed: int
    active: tuple[str, ...]
    spotting: float
    grouping: float
    labeling: float
    ee: float
    seconds: float


def run_ablation(train_docs: Sequence[Document], test_docs: Sequence[Document], rows: Sequence[str] = tuple(ABLATION_ROWS),
                 seeds: Sequence[int] = (0,), model_cfg: ModelConfig | None = None,
                 pretrain: TrainConfig | None = None, finetune: TrainConfig | None = None,
                 matrix: dict | None = None) -> list[AblationRow]:
    """Pre-train with each row's active set, fine-tune, then score S/G/L/EE on ``test_docs``.

    Every row pre-trains for the same number of steps; the spotting loss is always on.
    """
    from .pipeline import evaluate_model

    matrix = dict(ABLATION_ROWS if matrix is None else matrix)
    pretrain = pretrain or TrainConfig(stage="pretrain", steps=200, lr=1e-4, decay_at=None)
    finetune = finetune or TrainConfig(stage="finetune", steps=200, lr=5e-4)
    results = []
    for seed in seeds:
        for row in rows:
            active = tuple(matrix[row])
            t0 = time.time()
            torch.manual_seed(seed)
            model = HIPModel(model_cfg)
            if pretrain.steps > 0:
                train(model, train_docs, TrainConfig(**{**asdict(pretrain), "active": active, "seed": seed}))
            train(model, train_docs, TrainConfig(**{**asdict(finetune), "seed": seed}))
            rep = evaluate_model(model, test_docs)
            results.append(AblationRow(row, seed, active, rep.spotting_1ned, rep.grouping_f1, rep.labeling_acc,
                                       rep.ee_1ned, time.time() - t0))
            log.info("ablation row %s seed %d: %s", row, seed, results[-1])
    return results


def ablation_table(results: Sequence[AblationRow]) -> str:
    """Rows averaged over seeds, one column per toggle plus S/G/L/EE."""
    by_row: dict[str, list[AblationRow]] = {}
    for r in results:
        by_row.setdefault(r.row, []).append(r)
    head = ["row", *[t.upper() for t in PRETRAIN_TASKS], "S", "G", "L", "EE", "seeds"]
    lines = ["  ".join(f"{h:>5}" for h in head)]
    for row, rs in by_row.items():
        marks = ["x" if t in rs[0].active else "" for t in PRETRAIN_TASKS]
        nums = [np.mean([getattr(r, k) for r in rs]) for k in ("spotting", "grouping", "labeling", "ee")]
        cells = [row, *marks, *(f"{100 * v:.1f}" for v in nums), str(len(rs))]
        lines.append("  ".join(f"{c:>5}" for c in cells))
    return "\n".join(lines)


# -- per-head gradient suite --------------------------------------------------------

# loss used to check each parameter group: (stage, active pre-training tasks)
GRAD_SUITE = {
    "backbone": ("pretrain", PRETRAIN_TASKS),
    "spot": ("pretrain", ()),
    "grid_encoder": ("pretrain", ("etd", "wtb")),
    "mim": ("pretrain", ("mim",)),
    "etd_heatmap": ("pretrain", ("etd",)),
    "etd_size": ("pretrain", ("etd",)),
    "etd_offset": ("pretrain", ("etd",)),
    "wtb": ("pretrain", ("wtb",)),
    "semantic_encoder": ("pretrain", ("mlm", "ror")),
    "mlm": ("pretrain", ("mlm",)),
    "ror": ("pretrain", ("ror",)),
    "tag": ("finetune", ()),
}


def gradient_suite(model: HIPModel, docs: Sequence[Document], heads: Sequence[str] | None = None,
                   samples: int = 64, eps: float = 1e-6, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per head; run the model in float64."""
    named = model.heads()
    out = {}
    for name in heads or GRAD_SUITE:
        stage, active = GRAD_SUITE[name]

        def closure(stage=stage, active=active):
            terms = model.loss_terms(docs, stage, active, np.random.default_rng(seed))
            rep = loss_pretrain(terms, active) if stage == "pretrain" else loss_finetune(terms)
            return rep.total

        out[name] = grad_check(closure, {name: list(named[name].parameters())}, eps, samples, seed)
    return out

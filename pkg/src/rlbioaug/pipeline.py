"""Experiment orchestration: agent training, frozen-agent pretraining, linear probe, baselines."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import autodiff as ad
from . import checkpoint, data
from .augment import N_ACTIONS, ActionKind
from .contrastive import ssl_step
from .data import TEST, TRAIN, Dataset, SyntheticTaskSpec, Task
from .metrics import balanced_accuracy, confusion_matrix, macro_f1, per_class
from .model import (PAD_ACTION, EncoderConfig, PolicyConfig, encode, init_encoder, init_policy,
                    init_projector, policy_forward)
from .reward import ReferenceSet, accuracy_reward, reward as soft_knn_reward
from .rl import TRACE_COLUMNS, ExplorationSchedule, StepBatch, rl_step, top_k_sample
from .rng import make_rng

log = logging.getLogger(__name__)

MODES = ("RLBioAug", "RandomSelection", "Fixed")
REWARD_MODES = ("SoftKNN", "Accuracy", "SSLLoss")
REWARD_VIEWS = ("strong", "weak", "clean")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data_path: str | None = None
    synth: dict | None = None
    encoder: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    mode: str = "RLBioAug"
    fixed_action: str | None = None
    reward_mode: str = "SoftKNN"
    reward_view: str = "strong"
    tau: float = 0.5
    tau_knn: float = 0.1
    k_neighbors: int = 20
    top_k: int = 3
    lr_enc: float = 0.05
    lr_agent: float = 1e-3
    momentum: float = 0.0
    beta_start: float = 1.0
    beta_end: float = 0.1
    gamma: float = 0.1
    phase1_steps: int = 2000
    phase2_steps: int = 5000
    batch_size: int = 64
    train_frac: float = 0.8
    labeled_frac: float = 0.10
    reference_frac: float = 0.2
    warm_start: bool = False
    probe_c: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if (self.data_path is None) == (self.synth is None):
            raise ConfigError("exactly one of data_path and synth must be set")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "Fixed":
            if self.fixed_action not in ActionKind.__members__:
                raise ConfigError(f"Fixed mode needs fixed_action in {list(ActionKind.__members__)}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        if self.reward_view not in REWARD_VIEWS:
            raise ConfigError(f"reward_view must be one of {REWARD_VIEWS}")
        if not 1 <= self.top_k <= N_ACTIONS:
            raise ConfigError(f"top_k must be in [1, {N_ACTIONS}]")
        positive = {"tau": self.tau, "tau_knn": self.tau_knn, "k_neighbors": self.k_neighbors,
                    "batch_size": self.batch_size, "probe_c": self.probe_c}
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (InfoNCE needs negatives)")
        for name in ("lr_enc", "lr_agent", "momentum", "phase1_steps", "phase2_steps", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.beta_end <= self.beta_start:
            raise ConfigError("need 0 <= beta_end <= beta_start")
        try:
            if self.synth is not None:
                SyntheticTaskSpec(**self.synth).validate()
            EncoderConfig(**self.encoder)
            PolicyConfig(**self.policy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # derived pieces
    def load_dataset(self) -> Dataset:
        if self.synth is not None:
            ds = data.synth_generate(SyntheticTaskSpec(**self.synth))
        else:
            ds = data.load(self.data_path)
        return data.split(ds, self.train_frac, self.labeled_frac, self.reference_frac, seed=self.seed)

    def encoder_config(self, input_len: int) -> EncoderConfig:
        return EncoderConfig(**{**self.encoder, "input_len": input_len})

    def policy_config(self, state_dim: int) -> PolicyConfig:
        return PolicyConfig(**{**self.policy, "state_dim": state_dim})

    def schedule(self) -> ExplorationSchedule:
        return ExplorationSchedule(self.beta_start, self.beta_end, self.phase1_steps, self.gamma)


# ---------------------------------------------------------------------------
# trace / report I/O


def trace_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in TRACE_COLUMNS])
    return buf.getvalue()


def trace_from_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {reader.fieldnames}")
    rows = []
    for r in reader:
        row = {k: float(v) for k, v in r.items() if k not in ("step", "chosen_action_hist")}
        row["step"] = int(r["step"])
        row["chosen_action_hist"] = r["chosen_action_hist"]
        rows.append(row)
    return rows


@dataclass
class EvalReport:
    confusion: list[list[int]]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    b_acc: float
    mf1: float
    classes: list[int]
    seed: int
    config_hash: str

    @classmethod
    def from_confusion(cls, cm: np.ndarray, seed: int, config_hash: str) -> "EvalReport":
        cm = np.asarray(cm, dtype=np.int64)
        present = np.flatnonzero(cm.sum(axis=1) > 0)
        if len(present) < len(cm):
            warnings.warn(f"classes {np.flatnonzero(cm.sum(axis=1) == 0).tolist()} absent from the "
                          "test split; metrics use present classes only", RuntimeWarning, stacklevel=2)
        sub = cm[np.ix_(present, present)]
        pc = per_class(cm)
        return cls(cm.tolist(), pc["precision"].tolist(), pc["recall"].tolist(), pc["f1"].tolist(),
                   balanced_accuracy(sub), macro_f1(sub), present.tolist(), seed, config_hash)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# phases


def _batch(rng, pool: np.ndarray, size: int) -> np.ndarray:
    return np.sort(rng.choice(pool, size=min(size, len(pool)), replace=False))


class History:
    """Sliding window of the last K (action, reward) steps, shared by all samples."""

    def __init__(self, k: int):
        self.k = k
        self.items: deque = deque(maxlen=k)

    def push(self, actions: np.ndarray, rewards: np.ndarray) -> None:
        counts = np.bincount(actions, minlength=N_ACTIONS)
        self.items.append((int(np.argmax(counts)), float(np.mean(rewards))))

    def arrays(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        acts = np.full(self.k, PAD_ACTION, dtype=np.int64)
        rews = np.zeros(self.k)
        n = len(self.items)
        if n:
            acts[self.k - n:] = [a for a, _ in self.items]
            rews[self.k - n:] = [r for _, r in self.items]
        return np.tile(acts, (batch, 1)), np.tile(rews, (batch, 1))

    def to_tensors(self) -> dict[str, np.ndarray]:
        a, r = self.arrays(1)
        return {"history.actions": a[0].astype(np.float64), "history.rewards": r[0]}

    @classmethod
    def from_tensors(cls, k: int, tensors: dict) -> "History":
        h = cls(k)
        for a, r in zip(tensors["history.actions"], tensors["history.rewards"]):
            if int(a) != PAD_ACTION:
                h.items.append((int(a), float(r)))
        return h


@dataclass
class Phase1Result:
    policy: dict
    history: History
    trace: list[dict]
    encoder: dict
    projector: dict


def phase1_train_agent(cfg: ExperimentConfig, ds: Dataset) -> Phase1Result:
    """Cooperative loop on the labeled training subset: encoder and agent both update."""
    if ds.labeled is None or not ds.labeled.any():
        raise ConfigError("phase 1 needs a labeled training subset")
    ref_idx = np.flatnonzero(ds.reference)
    pool = np.flatnonzero(ds.labeled & ~ds.reference)
    if len(pool) < 2:
        raise ConfigError("fewer than two labeled epochs left for agent training")
    if len(ref_idx) < cfg.k_neighbors:
        raise ConfigError(f"reference set has {len(ref_idx)} epochs < k_neighbors={cfg.k_neighbors}")
    missing = set(range(ds.n_classes)) - set(ds.labels[ref_idx].tolist())
    if missing:
        raise ConfigError(f"reference set lacks class(es) {sorted(missing)}")

    ecfg = cfg.encoder_config(ds.epoch_len)
    pcfg = cfg.policy_config(ecfg.embedding_dim)
    enc = init_encoder(ecfg, (cfg.seed, 1))
    proj = init_projector(ecfg, (cfg.seed, 1))
    policy = init_policy(pcfg, (cfg.seed, 1))
    schedule = cfg.schedule()
    history = History(pcfg.history_len)
    velocity: dict = {}
    ref_X, ref_y = ds.X[ref_idx], ds.labels[ref_idx]
    trace = []
    for step in range(cfg.phase1_steps):
        idx = _batch(make_rng(cfg.seed, 11, step), pool, cfg.batch_size)
        X, y = ds.X[idx], ds.labels[idx]
        states = encode(X, enc, ecfg, stop_gradient=True).data
        probs = policy_forward((states, *history.arrays(len(idx))), policy, pcfg)
        actions = np.array([top_k_sample(p, cfg.top_k, (cfg.seed, 12, step, i))
                            for i, p in enumerate(probs.data)])
        seeds = [(cfg.seed, int(i), step) for i in idx]
        ssl = ssl_step(X, actions, enc, proj, ecfg, cfg.lr_enc, cfg.tau, seeds, cfg.momentum, velocity)
        rewards = _rewards(cfg, ecfg, enc, ssl, X, y, ref_X, ref_y, ds.n_classes)
        row = rl_step(StepBatch(probs, actions, rewards), policy, cfg.lr_agent, schedule, step)
        row["ssl_loss"] = ssl.loss
        trace.append(row)
        history.push(actions, rewards)
    return Phase1Result(policy, history, trace, enc, proj)


def _rewards(cfg, ecfg, enc, ssl, X, y, ref_X, ref_y, n_classes) -> np.ndarray:
    if cfg.reward_mode == "SSLLoss":
        return -ssl.pair_losses
    if cfg.reward_view == "strong":
        z = ssl.strong_embeddings
    else:
        views = ssl.weak_views if cfg.reward_view == "weak" else X
        z = encode(views, enc, ecfg, stop_gradient=True).data
    ref = ReferenceSet(encode(ref_X, enc, ecfg, stop_gradient=True).data, ref_y, n_classes)
    if cfg.reward_mode == "Accuracy":
        return accuracy_reward(z, y, ref, cfg.k_neighbors, cfg.tau_knn)
    return soft_knn_reward(z, y, ref, cfg.k_neighbors, cfg.tau_knn)


@dataclass
class Phase2Result:
    encoder: dict
    losses: list[float]
    action_counts: np.ndarray


def phase2_pretrain(cfg: ExperimentConfig, view: data.UnlabeledView, input_len: int,
                    policy: dict | None = None, history: History | None = None,
                    init: dict | None = None, agent_encoder: dict | None = None) -> Phase2Result:
    """Contrastive pretraining on unlabeled signals with actions from a frozen policy or a baseline.

    ``view`` carries no labels, so nothing here can read them.  The policy's
    states come from ``agent_encoder`` (the frozen encoder it was trained
    alongside); without one they come from the encoder being trained.
    """
    ecfg = cfg.encoder_config(input_len)
    pcfg = cfg.policy_config(ecfg.embedding_dim)
    if init is not None:
        enc = {k: ad.Tensor(v.data, requires_grad=True) for k, v in init.items()}
    else:
        enc = init_encoder(ecfg, (cfg.seed, 2))
    proj = init_projector(ecfg, (cfg.seed, 2))
    frozen_policy = ad.frozen(policy) if policy is not None else None
    frozen_agent_enc = ad.frozen(agent_encoder) if agent_encoder is not None else None
    history = history or History(pcfg.history_len)
    velocity: dict = {}
    pool = np.arange(len(view))
    losses = []
    counts = np.zeros(N_ACTIONS, dtype=np.int64)
    for step in range(cfg.phase2_steps):
        idx = _batch(make_rng(cfg.seed, 21, step), pool, cfg.batch_size)
        X = view.X[idx]
        state_enc = enc if frozen_agent_enc is None else frozen_agent_enc
        actions = _phase2_actions(cfg, X, state_enc, ecfg, frozen_policy, pcfg, history, step)
        counts += np.bincount(actions, minlength=N_ACTIONS)
        seeds = [(cfg.seed, 1_000_000 + int(i), step) for i in idx]
        ssl = ssl_step(X, actions, enc, proj, ecfg, cfg.lr_enc, cfg.tau, seeds, cfg.momentum, velocity)
        losses.append(ssl.loss)
    return Phase2Result(enc, losses, counts)


def _phase2_actions(cfg, X, enc, ecfg, policy, pcfg, history, step) -> np.ndarray:
    n = len(X)
    if cfg.mode == "Fixed":
        return np.full(n, int(ActionKind[cfg.fixed_action]))
    if cfg.mode == "RandomSelection":
        return make_rng(cfg.seed, 22, step).integers(0, N_ACTIONS, size=n)
    states = encode(X, enc, ecfg, stop_gradient=True).data
    probs = policy_forward((states, *history.arrays(n)), policy, pcfg).data
    return np.array([top_k_sample(p, cfg.top_k, (cfg.seed, 23, step, i)) for i, p in enumerate(probs)])


def embed_dataset(X: np.ndarray, encoder: dict, ecfg: EncoderConfig, chunk: int = 256) -> np.ndarray:
    return np.concatenate([encode(X[i:i + chunk], encoder, ecfg, stop_gradient=True).data
                           for i in range(0, len(X), chunk)])


def linear_probe(encoder: dict, ds: Dataset, ecfg: EncoderConfig, c: float = 1.0,
                 seed: int = 0, config_hash: str = "") -> EvalReport:
    """Fit multinomial logistic regression on frozen train embeddings; score on the test split."""
    train = ds.indices(TRAIN)
    train = train[ds.labels[train] >= 0]
    test = ds.indices(TEST)
    test = test[ds.labels[test] >= 0]
    if len(train) == 0 or len(test) == 0:
        raise ValueError("linear probe needs labeled train and test epochs")
    enc = {k: ad.Tensor(v.data if isinstance(v, ad.Tensor) else v) for k, v in encoder.items()}
    z_train = embed_dataset(ds.X[train], enc, ecfg)
    z_test = embed_dataset(ds.X[test], enc, ecfg)
    mu, sd = z_train.mean(axis=0), z_train.std(axis=0) + 1e-8
    clf = LogisticRegression(C=c, max_iter=2000)
    clf.fit((z_train - mu) / sd, ds.labels[train])
    pred = clf.predict((z_test - mu) / sd)
    cm = confusion_matrix(ds.labels[test], pred, ds.n_classes)
    return EvalReport.from_confusion(cm, seed, config_hash)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentResult:
    report: EvalReport
    trace: list[dict]
    phase2_losses: list[float]
    policy: dict | None
    encoder: dict
    action_counts: np.ndarray
    history: History | None = None
    agent_encoder: dict | None = None


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None) -> ExperimentResult:
    cfg.validate()
    ds = ds if ds is not None else cfg.load_dataset()
    if ds.split is None:
        ds = data.split(ds, cfg.train_frac, cfg.labeled_frac, cfg.reference_frac, seed=cfg.seed)
    ecfg = cfg.encoder_config(ds.epoch_len)
    trace: list[dict] = []
    policy = history = init = agent_encoder = None
    if cfg.mode == "RLBioAug":
        p1 = phase1_train_agent(cfg, ds)
        policy, history, trace, agent_encoder = p1.policy, p1.history, p1.trace, p1.encoder
        if cfg.warm_start:
            init = p1.encoder
    p2 = phase2_pretrain(cfg, ds.unlabeled_view(TRAIN), ds.epoch_len, policy, history, init, agent_encoder)
    report = linear_probe(p2.encoder, ds, ecfg, cfg.probe_c, cfg.seed, cfg.hash())
    return ExperimentResult(report, trace, p2.losses, policy, p2.encoder, p2.action_counts, history,
                            agent_encoder)


def write_run(out_dir: str | Path, cfg: ExperimentConfig, result: ExperimentResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.json").write_text(result.report.to_json())
    (out / "trace.csv").write_text(trace_to_csv(result.trace))
    checkpoint.save(out / "encoder.barl", result.encoder)
    if result.policy is not None:
        hist = result.history.to_tensors() if result.history is not None else {}
        agent_enc = {f"agent_encoder.{k}": v for k, v in (result.agent_encoder or {}).items()}
        checkpoint.save(out / "policy.barl", {**result.policy, **hist, **agent_enc})

"""Training: the unguided denoiser (DiffRec), the weak checkpoint it leaves
behind, and joint optimization of the main denoiser with the guidance network.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionDataset, PopularityProfile
from .diffusion import DenoiserModel, base_loss, build_schedule, q_sample, sample_unguided
from .errors import CheckpointError, GuidanceBlowup, InvalidHyperparameter, TrainingDivergence
from .fairness import (pop_loss, rec_distribution_soft, rec_distribution_soft_backward, target_distribution,
                       topk_threshold)
from .guidance import BLOWUP_LIMIT, ConstantWeight, GuidanceNet, TailStats, fuse, guided_sample
from .metrics import rank_users, recall_at_k
from .numerics import AdamState, Dense, DenseNet, SeededRng, adam_update

log = logging.getLogger(__name__)

MODELS = ("diffrec", "ag", "a2g")
VALIDATION_K = 20
MAX_WEAK_EPOCH = 10


@dataclass
class TrainConfig:
    seed: int = 0
    model: str = "a2g"
    epochs: int = 100
    patience: int = 10
    batch_size: int = 400
    lr: float = 1e-3
    steps: int = 10
    sampling_steps: int = 0
    noise_scale: float = 0.1
    noise_min: float = 1e-4
    noise_max: float = 0.02
    sampling_noise: bool = True
    init_from_noise: bool = False
    emb_dim: int = 10
    dims: tuple = (256,)
    aan_dims: tuple = (256, 64)
    e_weak: int = 3
    ag_weight: float = 1.5
    lambda_ag: float = 0.5
    lambda_pop: float = 0.5
    w_max: float = 3.0
    tau: float = 2.5
    eta: float = 0.6
    q_high: float = 0.2
    q_low: float = 0.5
    k_pop: int = 50
    tau_pop: float = 0.1
    constant_w: float | None = None
    use_d1: bool = True
    use_d2: bool = True
    use_d3: bool = True
    raw_tail_score: bool = False
    tail_momentum: float = 0.1

    @property
    def q(self):
        return np.array([self.q_high, 1.0 - self.q_high - self.q_low, self.q_low])

    def schedule(self):
        return build_schedule(self.steps, self.sampling_steps,
                              self.noise_scale * self.noise_min, self.noise_scale * self.noise_max)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return {f.name: format_value(getattr(self, f.name)) for f in dataclasses.fields(self)}


# (low, high, values allowed outside the range as "component disabled")
RANGES = {
    "lambda_ag": (0.2, 1.0, (0.0,)),
    "lambda_pop": (0.2, 1.0, (0.0,)),
    "w_max": (2.0, 4.0, ()),
    "tau": (2.0, 3.0, ()),
    "eta": (0.4, 0.8, (0.0,)),
    "q_high": (0.1, 0.4, ()),
    "q_low": (0.4, 0.8, ()),
    "e_weak": (1, 10, ()),
    "epochs": (1, 100, ()),
}


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(name, text):
    """Convert config text for field ``name`` to its typed value."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if name not in fields:
        raise KeyError(name)
    default = fields[name].default
    text = text.strip()
    if name == "constant_w":
        return None if text.lower() in ("", "none") else float(text)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def validate_config(cfg: TrainConfig, unsafe_ranges=False):
    if cfg.model not in MODELS:
        raise InvalidHyperparameter(f"model must be one of {MODELS}, got {cfg.model!r}")
    if cfg.batch_size < 1 or cfg.patience < 1 or cfg.k_pop < 1 or cfg.emb_dim < 1:
        raise InvalidHyperparameter("batch_size, patience, k_pop and emb_dim must be >= 1")
    if not cfg.lr > 0 or not cfg.tau_pop > 0 or not cfg.noise_scale > 0:
        raise InvalidHyperparameter("lr, tau_pop and noise_scale must be positive")
    if not cfg.dims or not cfg.aan_dims:
        raise InvalidHyperparameter("dims and aan_dims need at least one hidden width")
    if cfg.q_high + cfg.q_low > 1.0:
        raise InvalidHyperparameter(f"q_high + q_low must not exceed 1, got {cfg.q_high + cfg.q_low}")
    if cfg.constant_w is not None and not np.isfinite(cfg.constant_w):
        raise InvalidHyperparameter("constant_w must be finite")
    if not unsafe_ranges:
        for name, (lo, hi, extra) in RANGES.items():
            v = getattr(cfg, name)
            if not (lo <= v <= hi or v in extra):
                raise InvalidHyperparameter(f"{name}={v} outside its allowed range [{lo}, {hi}]")
    cfg.schedule()
    return cfg


# checkpoints ----------------------------------------------------------------------

MAGIC = b"A2GD"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict  # str -> str
    blocks: dict  # name -> float32 array
    epoch: int = 0
    val_history: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    version: int = FORMAT_VERSION

    def train_config(self):
        cfg = TrainConfig()
        for k, v in self.config.items():
            setattr(cfg, k, parse_value(k, v))
        return cfg

    def _net(self, prefix, hidden_act):
        i, layers = 0, []
        while f"{prefix}.{i}.weight" in self.blocks:
            layers.append([self.blocks[f"{prefix}.{i}.weight"], self.blocks[f"{prefix}.{i}.bias"]])
            i += 1
        if not layers:
            raise CheckpointError(f"checkpoint has no {prefix!r} network")
        return DenseNet([Dense(w.copy(), b.copy(), hidden_act if j < len(layers) - 1 else "identity")
                         for j, (w, b) in enumerate(layers)])

    def has(self, prefix):
        return f"{prefix}.0.weight" in self.blocks

    @property
    def n_items(self):
        return self.blocks["main.0.weight"].shape[1] - int(self.config.get("emb_dim", 10))

    def denoiser(self, prefix="main", role="main"):
        emb = int(self.config.get("emb_dim", 10))
        net = self._net(prefix, "tanh")
        return DenoiserModel(net, net.n_out, emb, role=role)

    def guidance(self):
        cfg = self.train_config()
        if cfg.model == "ag":
            return ConstantWeight(cfg.ag_weight)
        if cfg.constant_w is not None:
            return ConstantWeight(cfg.constant_w)
        stats = self.blocks.get("aan.tail_stats", np.array([0.0, 1.0], dtype=np.float32))
        return GuidanceNet(self._net("aan", "silu"), self.n_items, **guidance_kwargs(cfg),
                           stats=TailStats(float(stats[0]), float(stats[1]), cfg.tail_momentum))

    def fingerprint(self, prefix):
        h = hashlib.sha256()
        for name in sorted(self.blocks):
            if name.startswith(prefix + "."):
                h.update(name.encode())
                h.update(self.blocks[name].tobytes())
        return h.hexdigest()

    def equals(self, other):
        return (self.version == other.version and self.config == other.config and self.epoch == other.epoch
                and np.array_equal(self.val_history, other.val_history)
                and self.val_history.dtype == other.val_history.dtype
                and self.blocks.keys() == other.blocks.keys()
                and all(self.blocks[k].dtype == other.blocks[k].dtype
                        and self.blocks[k].shape == other.blocks[k].shape
                        and self.blocks[k].tobytes() == other.blocks[k].tobytes() for k in self.blocks))


def net_blocks(prefix, net: DenseNet):
    out = {}
    for i, layer in enumerate(net.layers):
        out[f"{prefix}.{i}.weight"] = np.array(layer.weight, dtype=np.float32)
        out[f"{prefix}.{i}.bias"] = np.array(layer.bias, dtype=np.float32)
    return out


def guidance_kwargs(cfg: TrainConfig):
    return dict(w_max=cfg.w_max, eta=cfg.eta, tau=cfg.tau,
                feature_mask=(float(cfg.use_d1), float(cfg.use_d2), float(cfg.use_d3)),
                raw_tail_score=cfg.raw_tail_score)


def checkpoint_bytes(ckpt: Checkpoint):
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.version)
    cfg_text = "".join(f"{k}={v}\n" for k, v in sorted(ckpt.config.items())).encode("utf-8")
    out += struct.pack("<I", len(cfg_text)) + cfg_text
    out += struct.pack("<I", ckpt.epoch)
    blocks = dict(ckpt.blocks)
    blocks["meta.val_history"] = np.asarray(ckpt.val_history, dtype=np.float32)
    out += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted checkpoint)")
    config = {}
    for line in r.take(r.u32()).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        config[k] = v
    epoch = r.u32()
    blocks = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf) - 4:
        raise CheckpointError(f"{path}: trailing bytes after the last block")
    val_history = blocks.pop("meta.val_history", np.zeros(0, dtype=np.float32))
    return Checkpoint(config, blocks, epoch, val_history, version)


# objectives -----------------------------------------------------------------------

@dataclass
class JointBatch:
    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray
    histories: np.ndarray  # (batch, 3) H_u rows


@dataclass
class JointResult:
    losses: dict
    main_grads: list
    aan_grads: list | None
    theta: np.ndarray
    weights: np.ndarray
    features: np.ndarray | None
    tail_batch: tuple | None
    z_ag: np.ndarray


def joint_objective(main: DenoiserModel, weak: DenoiserModel, weigher, batch: JointBatch, profile_bins, m_tail,
                    schedule, lambda_ag, lambda_pop, q, k_pop, tau_pop, theta=None):
    """L_base + lambda_ag * L_AG + lambda_pop * L_pop and its gradients.

    ``weigher`` is a GuidanceNet (trained jointly) or a ConstantWeight. The
    weak model receives no gradient. ``theta`` pins the soft top-k
    thresholds (they are treated as constants in the gradient anyway).
    """
    x0 = batch.x0
    n = x0.shape[0]
    x_t = q_sample(x0, batch.t, batch.noise, schedule)
    z1, cache1 = main.forward(x_t, batch.t)
    z0, _ = weak.forward(x_t, batch.t)

    learned = isinstance(weigher, GuidanceNet)
    if learned:
        w, gcache = weigher.forward(z1, z0, m_tail, training=True)
        features = gcache["u"][:, -3:]
    else:
        w, gcache = weigher.weight(z1, z0, m_tail), None
        features = None
    z_ag = fuse(z1, z0, w)

    d1 = z1 - x0
    l_base = float(np.sum(d1 * d1) / n)
    d_ag = z_ag - x0
    l_ag = float(np.sum(d_ag * d_ag) / n)
    # recommendations never include history items, so neither does the soft top-k
    eligible = x0 <= 0
    k = int(max(1, min(k_pop, eligible.sum(axis=1).min())))
    if theta is None:
        theta = topk_threshold(np.where(eligible, z_ag, -np.inf), k)
    r, soft_cache = rec_distribution_soft(z_ag, k, profile_bins, tau_pop, theta=theta, exclude=~eligible)
    target = target_distribution(batch.histories, q)
    pop = pop_loss(r, target)
    total = l_base + lambda_ag * l_ag + lambda_pop * pop.value
    if not np.isfinite(total):
        raise TrainingDivergence("joint objective is not finite")

    g_zag = lambda_ag * 2.0 * d_ag / n + lambda_pop * rec_distribution_soft_backward(soft_cache, pop.grad_r)
    g_z1 = 2.0 * d1 / n + w[:, None] * g_zag
    aan_grads = None
    if learned:
        g_w = np.sum(g_zag * (z1 - z0), axis=1)
        aan_grads, dz1_aan = weigher.backward(gcache, g_w)
        g_z1 = g_z1 + dz1_aan
    main_grads = main.backward(cache1, g_z1)

    losses = dict(base=l_base, ag=l_ag, pop=pop.value, pop_contrib=lambda_pop * pop.value,
                  total=total, pop_high=pop.over_high, pop_low=pop.under_low, pop_balance=pop.balance)
    tail_batch = (gcache["mu"], gcache["sd"]) if learned else None
    return JointResult(losses, main_grads, aan_grads, theta, w, features, tail_batch, z_ag)


# training loops ---------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    epoch_checkpoints: dict  # epoch -> Checkpoint (epochs <= MAX_WEAK_EPOCH)
    history: list  # per-epoch dicts
    steps: list  # per-step instrumentation


def early_stop(history, patience):
    """(stop?, best epoch 1-based) for a validation-metric history."""
    if not history:
        raise ValueError("empty validation history")
    best = int(np.argmax(history)) + 1
    return len(history) - best >= patience, best


def _dense_rows(m, rows):
    return m[rows].toarray().astype(np.float64)


def _check_profile(ds, profile):
    return profile if profile is not None else PopularityProfile.from_dataset(ds)


def validation_recall(score_fn, ds: InteractionDataset, k=VALIDATION_K):
    lists = rank_users(score_fn, ds.train, ds.train.toarray() > 0, k)
    return recall_at_k(lists, ds.val, k)


def unguided_scorer(model, cfg: TrainConfig, seed_key=3):
    schedule = cfg.schedule()
    base = SeededRng(cfg.seed).child(seed_key)

    def score(chunk, users, hist):
        return sample_unguided(model, hist, schedule, base.child(chunk), cfg.sampling_noise, cfg.init_from_noise)
    return score


def guided_scorer(main, weak, weigher, m_tail, cfg: TrainConfig, seed_key=3):
    schedule = cfg.schedule()
    base = SeededRng(cfg.seed).child(seed_key)

    def score(chunk, users, hist):
        return guided_sample(main, weak, weigher, hist, schedule, m_tail, base.child(chunk),
                             cfg.sampling_noise, cfg.init_from_noise)
    return score


def checkpoint_scorer(ckpt: Checkpoint, m_tail, seed=None, seed_key=3):
    cfg = ckpt.train_config()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    main = ckpt.denoiser("main")
    if cfg.model == "diffrec":
        return unguided_scorer(main, cfg, seed_key)
    weak = ckpt.denoiser("weak", role="weak")
    return guided_scorer(main, weak, ckpt.guidance(), m_tail, cfg, seed_key)


def recommend(ds: InteractionDataset, ckpt: Checkpoint, m_tail, k, seed=None):
    """Top-k test-time lists: train history in, train and validation items masked."""
    if ckpt.n_items != ds.n_items:
        raise CheckpointError(f"checkpoint scores {ckpt.n_items} items, dataset has {ds.n_items}")
    mask = (ds.train + ds.val).toarray() > 0
    return rank_users(checkpoint_scorer(ckpt, m_tail, seed), ds.train, mask, k)


def _snapshot(cfg, blocks, epoch, history):
    return Checkpoint(cfg.to_dict(), dict(blocks), epoch, np.asarray(history, dtype=np.float32))


def _log_epoch(epoch_row, log_fn):
    log.info("epoch %(epoch)d base=%(base).5f ag=%(ag).5f pop=%(pop).5f recall@20=%(recall).5f", epoch_row)
    if log_fn is not None:
        log_fn(epoch_row)


def train_diffrec(ds: InteractionDataset, cfg: TrainConfig, log_fn=None):
    """Train the unguided denoiser on the reconstruction loss alone.

    Epoch checkpoints are kept for the early epochs (weak-model candidates);
    ``best`` is the epoch with the highest validation Recall@20.
    """
    cfg = cfg.replace(model="diffrec")
    schedule = cfg.schedule()
    root = SeededRng(cfg.seed)
    model = DenoiserModel.init(ds.n_items, cfg.dims, root.child(1), cfg.emb_dim, dtype=np.float32)
    data_rng = root.child(2)
    state = AdamState.fresh(model.net.params(), lr=cfg.lr)
    users = np.flatnonzero(np.diff(ds.train.indptr) > 0)

    history, epochs, rows, steps, best = [], {}, [], [], None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        start_params, start_state = model.net.params(), state
        for attempt in range(2):
            try:
                losses = []
                perm = users[data_rng.permutation(len(users))]
                for s in range(0, len(perm), cfg.batch_size):
                    x0 = _dense_rows(ds.train, perm[s:s + cfg.batch_size])
                    t = data_rng.integers(1, schedule.steps + 1, size=x0.shape[0])
                    noise = data_rng.normal(x0.shape)
                    loss, grads = base_loss(model, x0, t, noise, schedule)
                    params, state = adam_update(model.net.params(), grads, state)
                    model.net.set_params(params)
                    losses.append(loss)
                    steps.append(dict(epoch=epoch, base=loss, ag=0.0, pop=0.0, pop_contrib=0.0, total=loss))
                break
            except TrainingDivergence:
                if attempt == 1:
                    raise TrainingDivergence(f"diverged twice in epoch {epoch}; last good epoch {epoch - 1}")
                model.net.set_params(start_params)
                state = dataclasses.replace(start_state, lr=start_state.lr / 2)
        recall = validation_recall(unguided_scorer(model, cfg), ds)
        history.append(recall)
        blocks = net_blocks("main", model.net)
        snap = _snapshot(cfg, blocks, epoch, history)
        if epoch <= MAX_WEAK_EPOCH:
            epochs[epoch] = snap
        stop, best_epoch = early_stop(history, cfg.patience)
        if best_epoch == epoch:
            best = snap
        row = dict(epoch=epoch, base=float(np.mean(losses)), ag=0.0, pop=0.0, recall=recall,
                   wall=time.perf_counter() - t0)
        rows.append(row)
        _log_epoch(row, log_fn)
        if stop:
            break
    best.val_history = np.asarray(history, dtype=np.float32)
    return TrainResult(best, epochs, rows, steps)


def assemble_ag(base: Checkpoint, weak: Checkpoint, cfg: TrainConfig):
    """AG-DiffRec needs no training: best DiffRec + early checkpoint + fixed w."""
    cfg = cfg.replace(model="ag")
    blocks = {k: v for k, v in base.blocks.items() if k.startswith("main.")}
    blocks.update({"weak." + k[5:]: v for k, v in weak.blocks.items() if k.startswith("main.")})
    return Checkpoint(cfg.to_dict(), blocks, base.epoch, base.val_history.copy())


def train_joint(ds: InteractionDataset, base: Checkpoint, weak: Checkpoint, cfg: TrainConfig,
                profile: PopularityProfile | None = None, log_fn=None):
    """Jointly train the main denoiser and the guidance network with the weak
    model frozen, selecting the epoch with the best validation Recall@20."""
    cfg = cfg.replace(model="a2g")
    profile = _check_profile(ds, profile)
    schedule = cfg.schedule()
    root = SeededRng(cfg.seed)
    main = base.denoiser("main")
    weak_model = weak.denoiser("main", role="weak")
    if main.net.n_in != weak_model.net.n_in or [l.n_out for l in main.net.layers] != [
            l.n_out for l in weak_model.net.layers]:
        raise CheckpointError("weak checkpoint architecture does not match the main model")
    weak_hash = weak.fingerprint("main")

    if cfg.constant_w is not None:
        weigher = ConstantWeight(cfg.constant_w)
    else:
        weigher = GuidanceNet.init(ds.n_items, cfg.aan_dims, root.child(4), dtype=np.float32,
                                   stats=TailStats(momentum=cfg.tail_momentum), **guidance_kwargs(cfg))
    learned = isinstance(weigher, GuidanceNet)

    def params():
        return main.net.params() + (weigher.net.params() if learned else [])

    n_main = len(main.net.params())

    def set_params(ps):
        main.net.set_params(ps[:n_main])
        if learned:
            weigher.net.set_params(ps[n_main:])

    state = AdamState.fresh(params(), lr=cfg.lr)
    data_rng = root.child(5)
    users = np.flatnonzero(np.diff(ds.train.indptr) > 0)
    m_tail = profile.tail.astype(np.float64)
    q = cfg.q

    def blocks_now():
        b = net_blocks("main", main.net)
        b.update({"weak." + k[5:]: v for k, v in weak.blocks.items() if k.startswith("main.")})
        if learned:
            b.update(net_blocks("aan", weigher.net))
            b["aan.tail_stats"] = np.array([weigher.stats.mean, weigher.stats.std], dtype=np.float32)
        return b

    history, rows, steps, best = [], [], [], None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        start_params, start_state = params(), state
        start_stats = dataclasses.replace(weigher.stats) if learned else None
        for attempt in range(2):
            try:
                sums = dict(base=0.0, ag=0.0, pop=0.0)
                n_steps = 0
                perm = users[data_rng.permutation(len(users))]
                for s in range(0, len(perm), cfg.batch_size):
                    idx = perm[s:s + cfg.batch_size]
                    x0 = _dense_rows(ds.train, idx)
                    t = data_rng.integers(1, schedule.steps + 1, size=x0.shape[0])
                    noise = data_rng.normal(x0.shape)
                    batch = JointBatch(x0, t, noise, profile.history[idx])
                    res = joint_objective(main, weak_model, weigher, batch, profile.bins, m_tail, schedule,
                                          cfg.lambda_ag, cfg.lambda_pop, q, cfg.k_pop, cfg.tau_pop)
                    if np.max(np.abs(res.z_ag)) > BLOWUP_LIMIT:
                        raise GuidanceBlowup(f"fused scores exceeded {BLOWUP_LIMIT:g} in epoch {epoch}")
                    grads = res.main_grads + (res.aan_grads if learned else [])
                    new, state = adam_update(params(), grads, state)
                    set_params(new)
                    if learned:
                        weigher.stats.update(*res.tail_batch)
                    step = dict(epoch=epoch, **res.losses, w_mean=float(np.mean(res.weights)))
                    if res.features is not None:
                        for j, name in enumerate(("d1", "d2", "d3")):
                            step[f"feat_{name}_maxabs"] = float(np.max(np.abs(res.features[:, j])))
                    steps.append(step)
                    for key in sums:
                        sums[key] += res.losses[key]
                    n_steps += 1
                break
            except TrainingDivergence:
                if attempt == 1:
                    raise TrainingDivergence(f"joint training diverged twice in epoch {epoch}; "
                                             f"last good epoch {epoch - 1}")
                set_params(start_params)
                state = dataclasses.replace(start_state, lr=start_state.lr / 2)
                if learned:
                    weigher.stats = dataclasses.replace(start_stats)
        recall = validation_recall(guided_scorer(main, weak_model, weigher, m_tail, cfg), ds)
        history.append(recall)
        snap = _snapshot(cfg, blocks_now(), epoch, history)
        stop, best_epoch = early_stop(history, cfg.patience)
        if best_epoch == epoch:
            best = snap
        row = dict(epoch=epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()}, recall=recall,
                   wall=time.perf_counter() - t0)
        rows.append(row)
        _log_epoch(row, log_fn)
        if stop:
            break
    if weak.fingerprint("main") != weak_hash:
        raise TrainingDivergence("weak model parameters changed during joint training")
    best.val_history = np.asarray(history, dtype=np.float32)
    return TrainResult(best, {}, rows, steps)

"""Training loop, importance-sampled evaluation and sampling.

Randomness is keyed: the shuffle of epoch e comes from (seed, "shuffle", e) and
the transformation uniforms of example i at step s from (seed, tag, s, i). A
step is therefore a pure function of the saved state, which is what makes
checkpoint resumption bit-exact.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import checkpoint as ckpt_io
from .config import RunConfig, data_dir, parse_sizes
from .data import (BinaryDataset, GrayImageSet, downsample, load_dataset, load_mnist,
                   read_idx, stochastic_binarize, synthetic_flow_dataset)
from .estimators import Baselines, estimate_gradients
from .flow import BaseParams, base_log_prob
from .model import LatentFlow
from .nn import AdamState, ContractViolation, adam_step
from .rng import keyed_uniforms, substream

log = logging.getLogger(__name__)

BETA_CLIP = 1e-6
METRICS_HEADER = ["epoch", "step", "objective", "config_hash", "seed"]
TIMING_HEADER = ["epoch", "step", "wall_time_s", "config_hash", "seed"]


class TrainingAborted(RuntimeError):
    def __init__(self, step, reason, checkpoint_path):
        super().__init__(f"step {step}: {reason}; last good state in {checkpoint_path}")
        self.step = step
        self.checkpoint_path = checkpoint_path


# -- data ---------------------------------------------------------------------------


@dataclass
class TrainData:
    train: BinaryDataset
    test: BinaryDataset
    generator: LatentFlow | None = None
    gray: GrayImageSet | None = None  # kept when binarisation is resampled


def load_data(cfg: RunConfig) -> TrainData:
    if cfg.data_source == "synthetic":
        n, m = cfg.synthetic_n, cfg.synthetic_eval_n
        ds, gen = synthetic_flow_dataset(cfg.synthetic_D, cfg.synthetic_L, cfg.synthetic_seed,
                                         n + m, hidden=parse_sizes(cfg.synthetic_hidden),
                                         scale=cfg.synthetic_scale)
        train, test = ds.split(n)
        return TrainData(train, test, gen)
    if cfg.data_source == "mnist":
        root = cfg.data_path or data_dir()
        limit = cfg.train_limit or None
        train = load_mnist(root, "train", cfg.binarize_seed, cfg.downsample, limit)
        test = load_mnist(root, "test", cfg.binarize_seed, cfg.downsample,
                          cfg.eval_limit or None)
        gray = None
        if cfg.resample_binarization:
            path = Path(root) / train.provenance["source"]
            gray = read_idx(path)
            if limit:
                gray = GrayImageSet(gray.pixels[:limit])
            gray = downsample(gray, cfg.downsample)
        return TrainData(train, test, None, gray)
    ds = load_dataset(cfg.data_path)
    n_eval = cfg.eval_limit or max(1, len(ds) // 10)
    if n_eval >= len(ds):
        raise ContractViolation("dataset too small for the requested evaluation split")
    train, test = ds.split(len(ds) - n_eval)
    if cfg.train_limit:
        train = BinaryDataset(train.bits[:cfg.train_limit], train.provenance)
    return TrainData(train, test)


# -- state ----------------------------------------------------------------------------


def build_model(cfg: RunConfig, D: int) -> LatentFlow:
    base = BaseParams.constant(D, cfg.beta_init, frozen=not cfg.train_beta)
    post = None if cfg.special_case else parse_sizes(cfg.posterior_hidden)
    return LatentFlow(D, cfg.L, base, made_hidden=parse_sizes(cfg.made_hidden),
                      posterior_hidden=post, mask_scheme=cfg.mask_scheme,
                      activation=cfg.activation, rng=substream(cfg.seed, "init"))


def trainable_groups(model: LatentFlow):
    groups = model.param_groups()
    if model.base.frozen:
        groups.pop("beta")
    return groups


@dataclass
class TrainState:
    cfg: RunConfig
    model: LatentFlow
    adam: dict
    baselines: Baselines
    step: int = 0
    epoch_sum: float = 0.0
    epoch_count: int = 0

    @classmethod
    def fresh(cls, cfg: RunConfig, D: int):
        model = build_model(cfg, D)
        adam = {k: AdamState.zeros(p.size, lr=cfg.lr) for k, p in trainable_groups(model).items()}
        return cls(cfg, model, adam, Baselines.for_model(model, cfg.estimator_config()))

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        s = {f"param/{k}": p.copy() for k, p in self.model.param_groups().items()}
        for k, a in self.adam.items():
            s[f"adam/{k}/m"] = a.m.copy()
            s[f"adam/{k}/v"] = a.v.copy()
            s[f"adam/{k}/step"] = np.array([a.step])
        for name, b in self._baseline_items():
            s[f"baseline/{name}/mean"] = b.mean.copy()
            s[f"baseline/{name}/var"] = b.var.copy()
        s["state/step"] = np.array([self.step])
        s["state/epoch_sum"] = np.array([self.epoch_sum])
        s["state/epoch_count"] = np.array([self.epoch_count])
        s["state/D"] = np.array([self.model.D])
        return ckpt_io.Checkpoint(self.cfg.to_text(), s)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, cfg: RunConfig | None = None):
        cfg = cfg or RunConfig.from_text(ck.config_text)
        D = int(ck["state/D"][0])
        state = cls.fresh(cfg, D)
        for k, p in state.model.param_groups().items():
            src = ck[f"param/{k}"]
            if src.shape != p.shape:
                raise ContractViolation(f"checkpoint group {k} has {src.size} values, "
                                        f"model expects {p.size}")
            p[...] = src
        for k, a in state.adam.items():
            a.m[...] = ck[f"adam/{k}/m"]
            a.v[...] = ck[f"adam/{k}/v"]
            a.step = int(ck[f"adam/{k}/step"][0])
        for name, b in state._baseline_items():
            b.mean = ck[f"baseline/{name}/mean"].copy()
            b.var = ck[f"baseline/{name}/var"].copy()
        state.step = int(ck["state/step"][0])
        state.epoch_sum = float(ck["state/epoch_sum"][0])
        state.epoch_count = int(ck["state/epoch_count"][0])
        return state

    def _baseline_items(self):
        yield "recon", self.baselines.recon
        for l, b in enumerate(self.baselines.kl):
            yield f"kl{l + 1}", b


def load_model(path) -> tuple[LatentFlow, RunConfig]:
    state = TrainState.from_checkpoint(ckpt_io.load(path))
    return state.model, state.cfg


# -- one step -------------------------------------------------------------------------


def train_step(state: TrainState, x, example_ids):
    """One Adam ascent step on a batch. Returns the batch objective values."""
    cfg = state.cfg
    model = state.model
    est = cfg.estimator_config()
    shape = (model.L, model.D)
    total = None
    objective = np.zeros(len(example_ids))
    for k in range(est.samples):
        uniforms = {"main": keyed_uniforms(cfg.seed, f"main{k}", state.step, example_ids, shape)}
        if est.self_critic == "sample":
            uniforms["critic"] = keyed_uniforms(cfg.seed, f"critic{k}", state.step,
                                                example_ids, shape)
        if est.kind == "sfe-special" and est.gamma_prefix > 0:
            uniforms["prefix"] = keyed_uniforms(cfg.seed, f"prefix{k}", state.step,
                                                example_ids, shape)
        obj, acc = estimate_gradients(model, x, est, state.baselines, uniforms)
        objective += obj
        if total is None:
            total = acc
        else:
            total.add(acc.grads)
    objective /= est.samples
    if not np.all(np.isfinite(objective)):
        raise FloatingPointError("non-finite training objective")
    bad = total.check_finite()
    if bad is not None:
        raise FloatingPointError(f"non-finite gradient in group {bad}")
    scale = 1.0 / (len(example_ids) * est.samples)
    groups = trainable_groups(model)
    for name, params in groups.items():
        grad = total.grads.get(name)
        if grad is None:
            continue
        new, _ = adam_step(params, -scale * grad, state.adam[name], name)
        if name == "beta":
            new = np.clip(new, BETA_CLIP, 1.0 - BETA_CLIP)
        params[...] = new
    state.step += 1
    return objective


# -- training loop --------------------------------------------------------------------


def _append_csv(path, header, row):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerow(row)


def epoch_order(seed, epoch, n):
    return substream(seed, "shuffle", epoch).permutation(n)


def train(cfg: RunConfig, data: TrainData | None = None, resume=None, out_dir=None):
    """Train from scratch or from ``resume`` (a checkpoint path or TrainState).

    Writes ``checkpoint.ckpt``, ``metrics.csv`` (deterministic: epoch, step,
    mean objective) and ``timing.csv`` (wall time) under the output directory.
    Returns the final TrainState.
    """
    data = data or load_data(cfg)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(resume, TrainState):
        state = resume
    elif resume is not None:
        state = TrainState.from_checkpoint(ckpt_io.load(resume), cfg)
    else:
        state = TrainState.fresh(cfg, data.train.D)
    if state.model.D != data.train.D:
        raise ContractViolation(f"model has D={state.model.D}, data has D={data.train.D}")
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    n = len(data.train)
    per_epoch = -(-n // cfg.batch_size)
    last_step = cfg.epochs * per_epoch
    if cfg.max_steps:
        last_step = min(last_step, cfg.max_steps)
    ckpt_path = out / "checkpoint.ckpt"
    ckpt_io.save(ckpt_path, state.to_checkpoint())
    bits = data.train.bits
    bits_epoch = None
    t0 = time.perf_counter()
    while state.step < last_step:
        epoch, pos = divmod(state.step, per_epoch)
        if data.gray is not None and bits_epoch != epoch:
            bits = stochastic_binarize(data.gray, cfg.binarize_seed + 1000003 * epoch).bits
            bits_epoch = epoch
        ids = epoch_order(cfg.seed, epoch, n)[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        good = copy.deepcopy(state.baselines)
        try:
            obj = train_step(state, bits[ids].astype(float), ids)
        except FloatingPointError as exc:
            state.baselines = good
            bad_path = out / "last_good.ckpt"
            ckpt_io.save(bad_path, state.to_checkpoint())
            raise TrainingAborted(state.step, str(exc), bad_path) from exc
        state.epoch_sum += float(obj.sum())
        state.epoch_count += len(ids)
        if pos == per_epoch - 1:
            mean = state.epoch_sum / state.epoch_count
            _append_csv(out / "metrics.csv", METRICS_HEADER,
                        [epoch + 1, state.step, repr(float(mean)), cfg.hash, cfg.seed])
            _append_csv(out / "timing.csv", TIMING_HEADER,
                        [epoch + 1, state.step, f"{time.perf_counter() - t0:.3f}",
                         cfg.hash, cfg.seed])
            log.info("epoch %d step %d objective %.4f", epoch + 1, state.step, mean)
            state.epoch_sum, state.epoch_count = 0.0, 0
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ckpt_io.save(ckpt_path, state.to_checkpoint())
    ckpt_io.save(ckpt_path, state.to_checkpoint())
    return state


# -- evaluation -----------------------------------------------------------------------


@dataclass
class EvalReport:
    is_nll: np.ndarray
    greedy_nll: np.ndarray | None
    K: int

    @property
    def mean_is_nll(self):
        return float(self.is_nll.mean())

    @property
    def mean_greedy_nll(self):
        return None if self.greedy_nll is None else float(self.greedy_nll.mean())


def log_weights(model: LatentFlow, x, uniforms):
    """Importance log-weights log p_Y + log p - log q for each sample.

    ``uniforms`` has shape (batch, K, L, D); the result has shape (batch, K).
    In the q := p case the ratio cancels and only log p_Y remains.
    """
    B, K = uniforms.shape[:2]
    xs = np.repeat(np.atleast_2d(x), K, axis=0)
    path = model.sample_posterior(xs, uniforms.reshape(B * K, model.L, model.D))
    lw = base_log_prob(path.y, model.base)[1]
    if not model.special_case:
        lw = lw + path.log_p.sum(axis=(1, 2)) - path.log_q.sum(axis=(1, 2))
    return lw.reshape(B, K)


def is_nll(model: LatentFlow, bits, K=1000, seed=0, example_ids=None, rows=8192):
    """-log (1/K sum_k w_k) per example, with uniforms keyed by (seed, "eval", id)."""
    bits = np.atleast_2d(bits)
    ids = np.arange(len(bits)) if example_ids is None else np.asarray(example_ids)
    out = np.empty(len(bits))
    chunk = max(1, rows // K)
    for start in range(0, len(bits), chunk):
        sl = slice(start, start + chunk)
        u = np.stack([substream(seed, "eval", i).random((K, model.L, model.D))
                      for i in ids[sl]])
        lw = log_weights(model, bits[sl].astype(float), u)
        out[sl] = -(logsumexp(lw, axis=1) - np.log(K))
    return out


def greedy_nll(model: LatentFlow, bits, source=None):
    path = model.greedy(np.atleast_2d(bits).astype(float), source)
    return -base_log_prob(path.y, model.base)[1]


def evaluate(model: LatentFlow, bits, K=1000, seed=0, greedy=True, rows=8192):
    """Importance-sampled NLL bound and (optionally) greedy single-flow NLL, in
    nats per example. Parameters and baselines are not touched."""
    if K < 1:
        raise ContractViolation("K must be >= 1")
    nll = is_nll(model, bits, K, seed, rows=rows)
    return EvalReport(nll, greedy_nll(model, bits) if greedy else None, K)


def write_eval_csv(path, report: EvalReport, cfg_hash="", seed=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example", "is_nll", "greedy_nll", "K", "config_hash", "seed"])
        for i, v in enumerate(report.is_nll):
            g = "" if report.greedy_nll is None else repr(float(report.greedy_nll[i]))
            w.writerow([i, repr(float(v)), g, report.K, cfg_hash, seed])


# -- sampling -------------------------------------------------------------------------


def sample(model: LatentFlow, n, seed=0):
    """x in the generative direction: y ~ p_Y, then u, then x = y xor u."""
    rng = substream(seed, "sample")
    return model.sample_data(rng.random((n, model.L, model.D)), rng.random((n, model.D)))[0]


def image_grid(bits, height, width, columns=10):
    """Tile images into a grid with 1-pixel white gutters; ink is black."""
    n = len(bits)
    rows = -(-n // columns)
    cols = min(columns, n)
    H, W = rows * height + rows - 1, cols * width + cols - 1
    grid = np.full((H, W), 255, dtype=np.uint8)
    for i, img in enumerate(np.asarray(bits).reshape(n, height, width)):
        r, c = divmod(i, columns)
        grid[r * (height + 1):r * (height + 1) + height,
             c * (width + 1):c * (width + 1) + width] = np.where(img > 0, 0, 255)
    return grid


def pgm_bytes(grid, comment=""):
    head = "P5\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{grid.shape[1]} {grid.shape[0]}\n255\n"
    return head.encode("ascii") + np.ascontiguousarray(grid, np.uint8).tobytes()


def image_shape(D, provenance=None):
    prov = provenance or {}
    if "height" in prov and "width" in prov and prov["height"] * prov["width"] == D:
        return int(prov["height"]), int(prov["width"])
    side = int(round(np.sqrt(D)))
    if side * side == D:
        return side, side
    return 1, D


def write_samples(path, model: LatentFlow, n, seed=0, shape=None, comment=""):
    bits = sample(model, n, seed)
    h, w = shape or image_shape(model.D)
    Path(path).write_bytes(pgm_bytes(image_grid(bits, h, w), comment))
    return bits


# -- repeated runs ----------------------------------------------------------------------


def train_runs(cfg: RunConfig, data: TrainData | None = None):
    """Train ``cfg.runs`` independent seeds and keep the lowest IS NLL.

    Returns ``(best_index, [(seed, is_nll, greedy_nll), ...])`` and writes
    ``runs.csv`` next to the per-run directories.
    """
    data = data or load_data(cfg)
    out = Path(cfg.out_dir)
    results = []
    for r in range(cfg.runs):
        run_cfg = cfg.replace(seed=cfg.seed + r, out_dir=str(out / f"run{r}"))
        state = train(run_cfg, data)
        rep = evaluate(state.model, data.test.bits, cfg.eval_samples, run_cfg.seed,
                       cfg.eval_greedy, cfg.eval_rows)
        results.append((run_cfg.seed, rep.mean_is_nll, rep.mean_greedy_nll))
    best = int(np.argmin([r[1] for r in results]))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "is_nll", "greedy_nll", "best", "config_hash"])
        for i, (seed, nll, g) in enumerate(results):
            w.writerow([i, seed, repr(float(nll)), "" if g is None else repr(float(g)), int(i == best),
                        cfg.hash])
    return best, results


__all__ = ["TrainState", "TrainData", "TrainingAborted", "train", "train_step", "evaluate",
           "is_nll", "greedy_nll", "sample", "image_grid", "pgm_bytes", "write_samples",
           "train_runs", "load_data", "load_model", "build_model"]

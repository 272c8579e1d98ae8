"""Experiment driver: reproducible pretraining, probing, sweeps, checks.

A `RunConfig` fully determines a run (corpus, encoder, sampling geometry,
objective, optimizer, probes, seeds) and is serialized verbatim into every
artifact it produces. Checkpoints are directories holding a manifest plus
raw little-endian float32 parameter bytes; metrics are JSON-lines. Runs
are bitwise reproducible on a single worker: the only randomness comes
from seeded generators, and reduction orders are fixed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np
from scipy import stats as sp_stats

from . import aggregation, autodiff as ad, downstream, nn, objective, sampling, synthcorpus
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, encode_clips, init_encoder
from .sampling import PairSpec, n_predictions, sample_pair_indices
from .synthcorpus import Corpus, build_grammar, generate_corpus, labels_for_window

OBJECTIVES = ("mvp", "mvp_single_scale", "mvp_no_agg", "cpc", "cvrl_seq")
PROBE_TASKS = ("agnostic", "specific", "summary")


class CheckpointError(ValueError):
    pass


class CheckpointCorruption(CheckpointError):
    def __init__(self, message: str, tensor_name: str):
        super().__init__(message)
        self.tensor_name = tensor_name


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_videos: int = 600
    n_eval: int = 100
    clips_per_video: int = 24
    frame_hw: tuple[int, int] = (32, 32)
    n_verbs: int = 6
    n_nouns: int = 6
    n_complex: int = 4
    noise_sigma: float = 0.06
    split: str = "block"     # "block": last n_eval ids are eval; "parity": odd ids are eval


@dataclass(frozen=True)
class PairConfig:
    n_obs: int = 4
    n_future: int = 8
    stride: int = 2
    offset: str = "random:1:8"   # "fixed:K" or "random:KMIN:KMAX"

    def spec(self) -> PairSpec:
        return PairSpec(n_obs=self.n_obs, n_future=self.n_future, stride=self.stride,
                        k_mode=PairSpec.parse_offset(self.offset))


@dataclass(frozen=True)
class AggConfig:
    heads: int = 2
    causal_target: str = "meanpool"   # or "attention"
    stop_target_grad: bool = True


@dataclass(frozen=True)
class LossConfig:
    objective: str = "mvp"
    tau: float = 0.1
    normalize: bool = False


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_size: int = 16
    checkpoint_every: int | None = None   # default: steps // 5

    def interval(self) -> int:
        return self.checkpoint_every or max(1, self.steps // 5)


@dataclass(frozen=True)
class ProbeConfig:
    observe_clips: int = 4
    specific_steps: int = 8
    summary_fraction: float = 0.5
    lr: float = 0.05
    steps: int = 400
    d_joint: int = 64
    d_text: int = 32
    tau: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class SeedsConfig:
    corpus: int = 0
    model: int = 0
    sampling: int = 0


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = CorpusConfig()
    encoder: EncoderConfig = EncoderConfig()
    pair: PairConfig = PairConfig()
    agg: AggConfig = AggConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    probe: ProbeConfig = ProbeConfig()
    seeds: SeedsConfig = SeedsConfig()
    head_hidden_ratio: int = 2
    dtype: str = "float32"
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        def build(cls, sub):
            fields = {f.name: f for f in dataclasses.fields(cls)}
            kwargs = {}
            for k, v in sub.items():
                if k not in fields:
                    raise ValueError(f"unknown config key {k!r} for {cls.__name__}")
                if isinstance(v, list):
                    v = tuple(v)
                kwargs[k] = v
            return cls(**kwargs)

        d = dict(d)
        parts = {}
        for key, cls in (("corpus", CorpusConfig), ("encoder", EncoderConfig),
                         ("pair", PairConfig), ("agg", AggConfig), ("loss", LossConfig),
                         ("optim", OptimConfig), ("probe", ProbeConfig), ("seeds", SeedsConfig)):
            if key in d:
                parts[key] = build(cls, d.pop(key))
        return RunConfig(**parts, **d)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def effective_n_p(self) -> int:
        if self.loss.objective == "mvp_single_scale":
            return 1
        return n_predictions(self.pair.n_future, self.pair.stride)

    def validate(self):
        if self.loss.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.loss.objective!r}")
        self.pair.spec()
        spec = self.pair.spec()
        if self.corpus.clips_per_video < spec.min_clips():
            raise ValueError(
                f"videos of {self.corpus.clips_per_video} clips are too short for "
                f"pair sampling (need {spec.min_clips()})")


def config_hash(config: RunConfig) -> str:
    """Hash of the canonical config JSON; out_dir is excluded so the same
    science config hashes identically wherever it runs."""
    d = config.to_dict()
    d.pop("out_dir", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def set_by_dotted(config: RunConfig, key: str, value) -> RunConfig:
    """Return a config with one dotted field replaced, e.g. 'pair.offset'."""
    d = config.to_dict()
    node = d
    parts = key.split(".")
    for p in parts[:-1]:
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# corpus and splits
# ---------------------------------------------------------------------------

def build_corpus(config: RunConfig, workers: int | None = None) -> Corpus:
    c = config.corpus
    grammar = build_grammar(config.seeds.corpus, c.n_verbs, c.n_nouns, c.n_complex)
    return generate_corpus(grammar, config.seeds.corpus, c.n_videos, c.clips_per_video,
                           c.frame_hw, c.noise_sigma, workers=workers)


def corpus_splits(config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """(train ids, eval ids); pretraining and probe fitting use train,
    probe metrics use eval."""
    c = config.corpus
    ids = np.arange(c.n_videos)
    if c.split == "parity":
        return ids[ids % 2 == 0], ids[ids % 2 == 1]
    if c.split == "block":
        if not (0 < c.n_eval < c.n_videos):
            raise ValueError("n_eval must be in (0, n_videos)")
        return ids[: c.n_videos - c.n_eval], ids[c.n_videos - c.n_eval:]
    raise ValueError(f"unknown split mode {c.split!r}")


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class Model:
    encoder: EncoderParams
    agg: aggregation.AttentionParams
    heads: objective.PredictionHeads
    hphi: aggregation.SummaryParams

    def all_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.flat("encoder"))
        out.update(self.agg.flat("agg"))
        out.update(self.heads.flat("heads"))
        out.update(self.hphi.flat("hphi"))
        return out

    def trainable_params(self, objective_name: str) -> dict[str, Tensor]:
        out = dict(self.encoder.flat("encoder"))
        if objective_name == "cvrl_seq":
            out.update(self.hphi.flat("hphi"))
        else:
            out.update(self.agg.flat("agg"))
            out.update(self.heads.flat("heads"))
        return out


def init_model(config: RunConfig) -> Model:
    dtype = config.np_dtype()
    seed = config.seeds.model
    enc = init_encoder(config.encoder, seed, dtype)
    d = config.encoder.output_grid[3]
    return Model(
        encoder=enc,
        agg=aggregation.init_attention(d, config.agg.heads, seed, dtype),
        heads=objective.init_heads(config.effective_n_p(), d,
                                   config.head_hidden_ratio * d, seed, dtype),
        hphi=aggregation.init_summary(d, seed, max_len=64, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict[str, Tensor], path: str, config: RunConfig,
                    step: int, metrics: dict | None = None):
    """Write manifest.json + params.bin (little-endian float32, atomic)."""
    os.makedirs(path, exist_ok=True)
    names = sorted(params)
    index = []
    offset = 0
    blobs = []
    for name in names:
        data = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        flat = np.ascontiguousarray(data, dtype="<f4")
        blobs.append(flat.tobytes())
        index.append({"name": name, "shape": list(data.shape), "offset": offset,
                      "count": int(data.size)})
        offset += data.size * 4
    manifest = {
        "format": "mvp-lab-checkpoint-v1",
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "step": step,
        "metrics": metrics or {},
        "dtype": "<f4",
        "tensors": index,
        "total_bytes": offset,
    }
    tmp_bin = os.path.join(path, "params.bin.tmp")
    with open(tmp_bin, "wb") as f:
        for b in blobs:
            f.write(b)
    os.replace(tmp_bin, os.path.join(path, "params.bin"))
    tmp_man = os.path.join(path, "manifest.json.tmp")
    with open(tmp_man, "w") as f:
        json.dump(manifest, f, indent=1)
    os.replace(tmp_man, os.path.join(path, "manifest.json"))


def load_checkpoint(path: str, expected_config: RunConfig | None = None,
                    force: bool = False) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; verifies hashes and byte counts.

    The manifest's recorded hash must match the hash recomputed from the
    embedded config (tamper check), and, when `expected_config` is given,
    that config's hash too. `force=True` downgrades mismatches to a pass.
    """
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    stored = manifest["config_hash"]
    recomputed = config_hash(RunConfig.from_dict(manifest["config"]))
    if stored != recomputed and not force:
        raise CheckpointError(
            f"checkpoint config hash {stored[:12]} does not match its embedded config "
            f"{recomputed[:12]} (pass force=True to load anyway)")
    if expected_config is not None and not force:
        expect = config_hash(expected_config)
        if expect != stored:
            raise CheckpointError(
                f"checkpoint was written under config {stored[:12]}, expected {expect[:12]} "
                f"(pass force=True to load anyway)")
    bin_path = os.path.join(path, "params.bin")
    size = os.path.getsize(bin_path)
    state: dict[str, np.ndarray] = {}
    with open(bin_path, "rb") as f:
        for entry in manifest["tensors"]:
            end = entry["offset"] + entry["count"] * 4
            if end > size:
                raise CheckpointCorruption(
                    f"params.bin truncated: tensor {entry['name']!r} needs bytes "
                    f"[{entry['offset']}, {end}) but file has {size}", entry["name"])
            f.seek(entry["offset"])
            buf = f.read(entry["count"] * 4)
            state[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return state, manifest


def apply_state(model: Model, state: dict[str, np.ndarray]):
    params = model.all_params()
    unknown = set(state) - set(params)
    if unknown:
        raise CheckpointError(f"unknown tensor names in checkpoint: {sorted(unknown)[:4]}")
    missing = set(params) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:4]}")
    for name, arr in state.items():
        p = params[name]
        if tuple(p.data.shape) != tuple(arr.shape):
            raise CheckpointError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
        p.data = arr.astype(p.data.dtype)


def checkpoint_hash(path: str) -> str:
    with open(os.path.join(path, "params.bin"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

class MetricsLog:
    """Append-only per-step records with strictly increasing step numbers."""

    def __init__(self, config_hash_: str, path: str | None = None):
        self.config_hash = config_hash_
        self.path = path
        self.records: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "w")
        else:
            self._fh = None

    def append(self, step: int, loss_sum: float, loss_mean: float,
               region_accuracy: float, wall_time: float):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("metrics steps must be strictly increasing")
        rec = {"step": step, "loss_sum": loss_sum, "loss_mean": loss_mean,
               "region_accuracy": region_accuracy, "wall_time": wall_time,
               "config_hash": self.config_hash}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def digest(self) -> str:
        """Hash of the deterministic fields (wall time excluded)."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps([r["step"], r["loss_sum"], r["loss_mean"],
                                 r["region_accuracy"], r["config_hash"]]).encode())
        return h.hexdigest()

    def tail_mean(self, key: str, n: int = 50) -> float:
        vals = [r[key] for r in self.records[-n:]]
        return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# batch sampling and objective forward
# ---------------------------------------------------------------------------

def _gather_pair_batch(corpus: Corpus, ids: np.ndarray, spec: PairSpec,
                       rng: np.random.Generator, batch_size: int):
    """Observed/future frame arrays for a batch of sampled pairs."""
    n_clips = corpus.clips_per_video
    obs = np.empty((batch_size, spec.n_obs, synthcorpus.CLIP_LEN,
                    *corpus.frame_hw, 3), dtype=np.float32)
    fut = np.empty((batch_size, spec.n_future, synthcorpus.CLIP_LEN,
                    *corpus.frame_hw, 3), dtype=np.float32)
    for i in range(batch_size):
        vid = int(ids[rng.integers(len(ids))])
        start, k = sample_pair_indices(n_clips, spec, rng)
        obs[i] = corpus.clip_block(vid, start, spec.n_obs)
        fut[i] = corpus.clip_block(vid, start + spec.n_obs + k, spec.n_future)
    return obs, fut


def _gather_two_view_batch(corpus: Corpus, ids: np.ndarray, n_obs: int,
                           rng: np.random.Generator, batch_size: int):
    n_clips = corpus.clips_per_video
    hi = n_clips - n_obs + 1
    a = np.empty((batch_size, n_obs, synthcorpus.CLIP_LEN, *corpus.frame_hw, 3), dtype=np.float32)
    b = np.empty_like(a)
    for i in range(batch_size):
        vid = int(ids[rng.integers(len(ids))])
        s1, s2 = int(rng.integers(hi)), int(rng.integers(hi))
        a[i] = corpus.clip_block(vid, s1, n_obs)
        b[i] = corpus.clip_block(vid, s2, n_obs)
    return a, b


def _encode_batch(model: Model, frames: np.ndarray, train_grad: bool) -> Tensor:
    b, n = frames.shape[:2]
    flat = frames.reshape(b * n, *frames.shape[2:])
    if train_grad:
        maps = encode_clips(model.encoder, flat)
    else:
        with ad.no_grad():
            maps = encode_clips(model.encoder, flat)
    return ad.reshape(maps, (b, n, *maps.shape[1:]))


def objective_step(model: Model, config: RunConfig, corpus: Corpus, ids: np.ndarray,
                   rng: np.random.Generator):
    """One forward pass of the configured objective.

    Returns (loss Tensor, loss_sum float, region accuracy float).
    """
    name = config.loss.objective
    loss_cfg = config.loss
    spec = config.pair.spec()
    bsz = config.optim.batch_size

    if name == "cvrl_seq":
        a, b = _gather_two_view_batch(corpus, ids, spec.n_obs, rng, bsz)
        za = aggregation.observed_summary(_encode_batch(model, a, True), model.hphi)
        zb = aggregation.observed_summary(_encode_batch(model, b, True), model.hphi)
        loss = objective.cvrl_seq_loss(za, zb, loss_cfg.tau, normalize=loss_cfg.normalize)
        sims = za.z.data @ zb.z.data.T
        return loss, float(loss.data) * bsz, objective.accuracy_from_similarities(sims)

    if name == "cpc":
        spec = replace(spec, n_future=model.heads.n_heads, stride=1, k_mode=("fixed", 1))
        obs, fut = _gather_pair_batch(corpus, ids, spec, rng, bsz)
        obs_maps = _encode_batch(model, obs, True)
        fut_maps = _encode_batch(model, fut, not config.agg.stop_target_grad)
        ctx = aggregation.spatial_mha(obs_maps, model.agg)
        report = objective.cpc_loss(ctx, fut_maps, model.heads, loss_cfg.tau,
                                    normalize=loss_cfg.normalize)
        preds = objective.predict_future(ctx, model.heads)
        targets = objective.cpc_targets(fut_maps, model.heads.n_heads)
        acc = objective.pretrain_region_accuracy(preds, targets, normalize=loss_cfg.normalize)
        return report.loss, report.total, acc

    stride = config.pair.n_future if name == "mvp_single_scale" else config.pair.stride
    obs, fut = _gather_pair_batch(corpus, ids, spec, rng, bsz)
    obs_maps = _encode_batch(model, obs, True)
    fut_maps = _encode_batch(model, fut, not config.agg.stop_target_grad)
    ctx = aggregation.spatial_mha(obs_maps, model.agg)
    preds = objective.predict_future(ctx, model.heads)
    if name == "mvp_no_agg":
        targets = objective.single_clip_targets(fut_maps, stride)
    else:
        targets = aggregation.causal_targets(
            fut_maps, stride, mode=config.agg.causal_target,
            params=model.agg if config.agg.causal_target == "attention" else None,
            stop_grad=config.agg.stop_target_grad).values
    report = objective.mvp_info_nce(preds, targets, loss_cfg.tau,
                                    normalize=loss_cfg.normalize)
    acc = objective.pretrain_region_accuracy(preds, targets, normalize=loss_cfg.normalize)
    return report.loss, report.total, acc


# ---------------------------------------------------------------------------
# pretraining loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    config: RunConfig
    model: Model
    metrics: MetricsLog
    checkpoints: list[str]
    out_dir: str


def run_pretrain(config: RunConfig, corpus: Corpus | None = None,
                 quiet: bool = True) -> PretrainResult:
    """Optimize the configured objective end-to-end; emit checkpoints + metrics.

    Deterministic for fixed seeds on a single worker: identical configs
    produce bitwise-identical parameter files and metric records.
    """
    config.validate()
    out_dir = config.out_dir or os.path.join("runs", config_hash(config)[:12])
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=1)

    if corpus is None:
        corpus = build_corpus(config)
    train_ids, _ = corpus_splits(config)
    model = init_model(config)
    params = model.trainable_params(config.loss.objective)
    opt = nn.make_optimizer(config.optim.kind, params, config.optim.lr,
                            config.optim.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seeds.sampling, 0x5A3]))
    chash = config_hash(config)
    metrics = MetricsLog(chash, os.path.join(out_dir, "metrics.jsonl"))
    interval = config.optim.interval()
    checkpoints: list[str] = []

    def emit(step: int):
        snap = {"loss_mean": metrics.tail_mean("loss_mean"),
                "region_accuracy": metrics.tail_mean("region_accuracy"),
                "step": step}
        path = os.path.join(out_dir, "checkpoints", f"step_{step:06d}")
        save_checkpoint(model.all_params(), path, config, step, snap)
        checkpoints.append(path)

    # untrained baseline checkpoint; diagnostic batch uses a side stream so
    # the main sampling stream is untouched
    diag_rng = np.random.default_rng(np.random.SeedSequence([config.seeds.sampling, 0xD1A6]))
    _, loss_sum0, acc0 = objective_step(model, config, corpus, train_ids, diag_rng)
    metrics_init = {"loss_mean": loss_sum0 / max(1, config.optim.batch_size),
                    "region_accuracy": acc0, "step": 0}
    path0 = os.path.join(out_dir, "checkpoints", "step_000000")
    save_checkpoint(model.all_params(), path0, config, 0, metrics_init)
    checkpoints.append(path0)

    t0 = time.time()
    for step in range(1, config.optim.steps + 1):
        opt.zero_grad()
        loss, loss_sum, acc = objective_step(model, config, corpus, train_ids, rng)
        if not np.isfinite(loss.data):
            emit_path = os.path.join(out_dir, "checkpoints", "diagnostic_nan")
            save_checkpoint(model.all_params(), emit_path, config, step,
                            {"aborted_at": step})
            metrics.close()
            raise RuntimeError(
                f"non-finite loss at step {step}; diagnostic snapshot at {emit_path}")
        loss.backward()
        opt.step()
        metrics.append(step, loss_sum, float(loss.data), acc, time.time() - t0)
        if step % interval == 0 and step != config.optim.steps:
            emit(step)
        if not quiet and step % max(1, config.optim.steps // 10) == 0:
            print(f"  step {step:5d}  loss {float(loss.data):.4f}  acc {acc:.3f}")
    emit(config.optim.steps)
    metrics.close()
    return PretrainResult(config=config, model=model, metrics=metrics,
                          checkpoints=checkpoints, out_dir=out_dir)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def summary_features(model: Model, corpus: Corpus, ids: np.ndarray, n_clips: int,
                     chunk: int = 32) -> np.ndarray:
    """Frozen-backbone summary vector z_O per video (no gradients exist)."""
    d = model.encoder.config.output_grid[3]
    out = np.empty((len(ids), d), dtype=np.float64)
    for lo in range(0, len(ids), chunk):
        batch_ids = ids[lo:lo + chunk]
        frames = np.stack([corpus.clip_block(int(v), 0, n_clips) for v in batch_ids])
        with ad.no_grad():
            maps = _encode_batch(model, frames, False)
            z = aggregation.observed_summary(maps, model.hphi).z
        out[lo:lo + len(batch_ids)] = z.data
    return out


def _probe_labels_agnostic(corpus: Corpus, ids: np.ndarray, observe: int):
    v = np.zeros((len(ids), corpus.grammar.n_verbs), dtype=np.float64)
    n = np.zeros((len(ids), corpus.grammar.n_nouns), dtype=np.float64)
    for i, vid in enumerate(ids):
        tl = corpus.timelines[int(vid)]
        vm, nm, _ = labels_for_window(tl, observe, tl.total_clips)
        v[i], n[i] = vm, nm
    return v, n


def _probe_labels_specific(corpus: Corpus, ids: np.ndarray, observe: int, steps: int):
    v = np.zeros((len(ids), steps), dtype=np.int64)
    n = np.zeros((len(ids), steps), dtype=np.int64)
    for i, vid in enumerate(ids):
        tl = corpus.timelines[int(vid)]
        _, _, per_clip = labels_for_window(tl, observe, observe + steps)
        v[i] = [a[0] for a in per_clip]
        n[i] = [a[1] for a in per_clip]
    return v, n


def check_split_disjoint(train_ids: np.ndarray, eval_ids: np.ndarray):
    overlap = np.intersect1d(train_ids, eval_ids)
    if overlap.size:
        raise ValueError(f"split overlap detected: {overlap[:8].tolist()}")


def run_probe(checkpoint_path: str | None, task: str, config: RunConfig | None = None,
              corpus: Corpus | None = None, model: Model | None = None,
              out_path: str | None = None, force: bool = False) -> dict:
    """Train a linear probe on frozen features and evaluate on the held-out split."""
    if task not in PROBE_TASKS:
        raise ValueError(f"unknown probe task {task!r}; expected one of {PROBE_TASKS}")
    step = None
    if model is None:
        state, manifest = load_checkpoint(checkpoint_path, expected_config=config, force=force)
        config = RunConfig.from_dict(manifest["config"]) if config is None else config
        model = init_model(config)
        apply_state(model, state)
        step = manifest.get("step")
    if config is None:
        raise ValueError("config required when probing an in-memory model")
    if corpus is None:
        corpus = build_corpus(config)
    train_ids, eval_ids = corpus_splits(config)
    check_split_disjoint(train_ids, eval_ids)

    pc = config.probe
    metrics: dict = {"task": task, "config_hash": config_hash(config), "step": step}

    if task == "agnostic":
        feats_tr = summary_features(model, corpus, train_ids, pc.observe_clips)
        feats_ev = summary_features(model, corpus, eval_ids, pc.observe_clips)
        yv_tr, yn_tr = _probe_labels_agnostic(corpus, train_ids, pc.observe_clips)
        yv_ev, yn_ev = _probe_labels_agnostic(corpus, eval_ids, pc.observe_clips)
        heads = downstream.init_agnostic_heads(feats_tr.shape[1], corpus.grammar.n_verbs,
                                               corpus.grammar.n_nouns, dtype=np.float64)
        opt = nn.Adam(heads.flat(), lr=pc.lr)
        x = Tensor(feats_tr)
        counter: dict = {}
        for _ in range(pc.steps):
            opt.zero_grad()
            pv, pn = downstream.order_agnostic_forward(x, heads)
            loss = ad.add(downstream.bce_multilabel(pv, yv_tr, counter),
                          downstream.bce_multilabel(pn, yn_tr, counter))
            loss.backward()
            opt.step()
        pv, pn = downstream.order_agnostic_forward(Tensor(feats_ev), heads)
        map_v, per_v, skip_v = downstream.mean_ap_detailed(pv.data, yv_ev)
        map_n, per_n, skip_n = downstream.mean_ap_detailed(pn.data, yn_ev)
        metrics.update({
            "map_verb": map_v, "map_noun": map_n, "map_mean": (map_v + map_n) / 2,
            "per_class_ap_verb": [None if math.isnan(a) else a for a in per_v],
            "per_class_ap_noun": [None if math.isnan(a) else a for a in per_n],
            "skipped_classes": {"verb": skip_v, "noun": skip_n},
            "bce_clamped": counter.get("clamped", 0),
            "train_loss": float(loss.data),
        })

    elif task == "specific":
        steps = pc.specific_steps
        feats_tr = summary_features(model, corpus, train_ids, pc.observe_clips)
        feats_ev = summary_features(model, corpus, eval_ids, pc.observe_clips)
        v_tr, n_tr = _probe_labels_specific(corpus, train_ids, pc.observe_clips, steps)
        v_ev, n_ev = _probe_labels_specific(corpus, eval_ids, pc.observe_clips, steps)
        heads = downstream.init_specific_heads(feats_tr.shape[1], corpus.grammar.n_verbs,
                                               corpus.grammar.n_nouns, steps, dtype=np.float64)
        opt = nn.Adam(heads.flat(), lr=pc.lr)
        x = Tensor(feats_tr)
        for _ in range(pc.steps):
            opt.zero_grad()
            logit_pairs = downstream.order_specific_forward(x, heads)
            loss = downstream.sequence_ce_loss(logit_pairs, v_tr, n_tr)
            loss.backward()
            opt.step()
        logit_pairs = downstream.order_specific_forward(Tensor(feats_ev), heads)
        pred_v = np.stack([lp[0].data.argmax(-1) for lp in logit_pairs], axis=1)
        pred_n = np.stack([lp[1].data.argmax(-1) for lp in logit_pairs], axis=1)
        dists = {"action": [], "verb": [], "noun": []}
        for i in range(len(eval_ids)):
            pred = list(zip(pred_v[i], pred_n[i]))
            gt = list(zip(v_ev[i], n_ev[i]))
            for comp in dists:
                dists[comp].append(downstream.edit_distance(pred, gt, component=comp))
        per_step_verb = (pred_v == v_ev).mean(axis=0)
        per_step_noun = (pred_n == n_ev).mean(axis=0)
        metrics.update({
            "edit_action": float(np.mean(dists["action"])),
            "edit_verb": float(np.mean(dists["verb"])),
            "edit_noun": float(np.mean(dists["noun"])),
            "per_step_verb_acc": per_step_verb.tolist(),
            "per_step_noun_acc": per_step_noun.tolist(),
            "train_loss": float(loss.data),
        })

    else:  # summary retrieval
        n_obs = max(1, int(round(pc.summary_fraction * corpus.clips_per_video)))
        feats_tr = summary_features(model, corpus, train_ids, n_obs)
        feats_ev = summary_features(model, corpus, eval_ids, n_obs)
        vocab = synthcorpus.summary_vocab_size(corpus.grammar.n_complex)
        heads = downstream.init_retrieval_heads(feats_tr.shape[1], pc.d_text, pc.d_joint,
                                                vocab, pc.seed, dtype=np.float64)
        opt = nn.Adam(heads.flat(), lr=pc.lr)
        toks_tr = [corpus.summaries[int(v)] for v in train_ids]
        toks_ev = [corpus.summaries[int(v)] for v in eval_ids]
        x = Tensor(feats_tr)
        for _ in range(pc.steps):
            opt.zero_grad()
            c = nn.linear(x, heads.w_video)
            f = nn.linear(downstream.text_encode_batch(toks_tr, heads.text_encoder),
                          heads.w_text)
            loss = downstream.summary_contrastive(c, f, pc.tau)
            loss.backward()
            opt.step()
        with ad.no_grad():
            c = nn.linear(Tensor(feats_ev), heads.w_video).data
            f = nn.linear(downstream.text_encode_batch(toks_ev, heads.text_encoder),
                          heads.w_text).data
        sims = c @ f.T
        ks = [k for k in (1, 5, 10) if k <= len(eval_ids)]
        metrics.update({f"recall_at_{k}": downstream.recall_at_k(sims, k) for k in ks})
        metrics["train_loss"] = float(loss.data)

    if out_path:
        os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
        with open(out_path, "w") as f:
            json.dump(metrics, f, indent=1)
    return metrics


# ---------------------------------------------------------------------------
# sweeps and studies
# ---------------------------------------------------------------------------

ABLATION_CSV_HEADER = "arm,seed_count,metric,mean,std"
ABLATION_METRICS = ("map_mean", "map_verb", "map_noun")


def run_ablation(base: RunConfig, grid: dict[str, list], seeds: list[int],
                 out_dir: str, corpus: Corpus | None = None,
                 probe_task: str = "agnostic", quiet: bool = True) -> list[dict]:
    """One pretrain+probe per grid cell per seed; aggregate mean/std per cell.

    `grid` maps dotted config keys (plus the shorthand "objective") to value
    lists; the cartesian product defines the arms. Seeds reseed model init
    and sampling; the corpus is shared. Per-cell failures are recorded in
    ablation_meta.json and the sweep continues.
    """
    os.makedirs(out_dir, exist_ok=True)
    keys = list(grid)
    value_lists = [grid[k] for k in keys]
    cells = [()]
    for vals in value_lists:
        cells = [c + (v,) for c in cells for v in vals]
    if corpus is None:
        corpus = build_corpus(base)

    rows: list[dict] = []
    meta = {"base_config_hash": config_hash(base), "arms": {}, "failures": []}
    for cell in cells:
        arm = ",".join(f"{k}={v}" for k, v in zip(keys, cell))
        cfg = base
        for k, v in zip(keys, cell):
            key = "loss.objective" if k == "objective" else k
            cfg = set_by_dotted(cfg, key, v)
        results = []
        arm_hashes = []
        for seed in seeds:
            run_cfg = replace(cfg, seeds=replace(cfg.seeds, model=seed, sampling=seed),
                              out_dir=os.path.join(out_dir, f"{arm.replace('=', '_').replace(',', '__').replace(':', '-')}", f"seed{seed}"))
            arm_hashes.append(config_hash(run_cfg))
            try:
                res = run_pretrain(run_cfg, corpus=corpus, quiet=quiet)
                probe = run_probe(res.checkpoints[-1], probe_task, corpus=corpus)
                results.append(probe)
            except Exception as e:  # per-cell failure: record, continue
                meta["failures"].append({"arm": arm, "seed": seed, "error": repr(e)})
        meta["arms"][arm] = {"config_hashes": arm_hashes, "n_ok": len(results)}
        for metric in ABLATION_METRICS:
            vals = [r[metric] for r in results if metric in r]
            if not vals:
                continue
            rows.append({"arm": arm, "seed_count": len(vals), "metric": metric,
                         "mean": float(np.mean(vals)), "std": float(np.std(vals)),
                         "values": vals})
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w") as f:
        f.write(ABLATION_CSV_HEADER + "\n")
        for r in rows:
            f.write(f"{r['arm']},{r['seed_count']},{r['metric']},{r['mean']:.6f},{r['std']:.6f}\n")
    with open(os.path.join(out_dir, "ablation_meta.json"), "w") as f:
        json.dump(meta, f, indent=1)
    return rows


def pretrain_probe_correlation(run_dir: str, corpus: Corpus | None = None) -> dict:
    """Spearman rank correlation between checkpoint pretraining accuracy and
    probed mean mAP across a run's checkpoint series (the Fig-5-style study)."""
    ckpt_root = os.path.join(run_dir, "checkpoints")
    names = sorted(d for d in os.listdir(ckpt_root) if d.startswith("step_"))
    if len(names) < 2:
        raise ValueError("need at least two checkpoints for a correlation study")
    accs, maps, steps = [], [], []
    for name in names:
        path = os.path.join(ckpt_root, name)
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        acc = manifest["metrics"].get("region_accuracy")
        if acc is None or not np.isfinite(acc):
            continue
        probe_path = os.path.join(run_dir, "probes", f"{name}_agnostic.json")
        if os.path.exists(probe_path):
            with open(probe_path) as f:
                probe = json.load(f)
        else:
            probe = run_probe(path, "agnostic", corpus=corpus, out_path=probe_path)
        accs.append(acc)
        maps.append(probe["map_mean"])
        steps.append(manifest["step"])
    rho, pval = sp_stats.spearmanr(accs, maps)
    report = {"steps": steps, "pretrain_accuracy": accs, "map_mean": maps,
              "spearman_rho": float(rho), "p_value": float(pval),
              "n_checkpoints": len(accs)}
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    return report


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def _fd_builders() -> dict:
    """Registry of gradcheckable ops: name -> builder(seed) -> (params, forward)."""

    def rnd(seed):
        return np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))

    def weights(rng, *shape):
        return Tensor(rng.standard_normal(shape) * 0.3, requires_grad=True)

    def b_linear(seed):
        rng = rnd(seed)
        w = weights(rng, 6, 4)
        x = rng.standard_normal((5, 6))
        return {"w": w}, lambda: ad.tsum(ad.matmul(Tensor(x), w))

    def b_layer_norm(seed):
        rng = rnd(seed)
        g, b = weights(rng, 7), weights(rng, 7)
        x = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
        w = rng.standard_normal((4, 7))
        return {"x": x, "g": g, "b": b}, lambda: ad.tsum(ad.mul(nn.layer_norm(x, g, b), w))

    def b_positional_add(seed):
        rng = rnd(seed)
        pos = weights(rng, 5, 6)
        x = Tensor(rng.standard_normal((3, 5, 6)), requires_grad=True)
        w = rng.standard_normal((3, 5, 6))
        return {"pos": pos, "x": x}, lambda: ad.tsum(ad.mul(ad.add(x, pos), w))

    def b_mlp_block(seed):
        rng = rnd(seed)
        p = {"w1": weights(rng, 6, 12), "b1": weights(rng, 12),
             "w2": weights(rng, 12, 6), "b2": weights(rng, 6)}
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = rng.standard_normal((4, 6))
        fwd = lambda: ad.tsum(ad.mul(nn.mlp2(x, p["w1"], p["b1"], p["w2"], p["b2"],
                                             nonlinearity="relu"), w))
        return {**p, "x": x}, fwd

    def b_attention_block(seed):
        rng = rnd(seed)
        p = nn.init_block(rng, 8, 16, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
        w = rng.standard_normal((2, 5, 8))
        fwd = lambda: ad.tsum(ad.mul(nn.transformer_block(x, p, 2), w))
        return {**p, "x": x}, fwd

    def b_patch_embed(seed):
        rng = rnd(seed)
        w = weights(rng, 48, 5)
        b = weights(rng, 5)
        x = Tensor(rng.standard_normal((3, 10, 48)), requires_grad=True)
        m = rng.standard_normal((3, 10, 5))
        return {"w": w, "b": b, "x": x}, lambda: ad.tsum(ad.mul(nn.linear(x, w, b), m))

    def b_encoder(seed):
        cfg = EncoderConfig(frame_hw=(16, 16), patch=(2, 8, 8), stage_dims=(8, 12),
                            stage_heads=(2, 2), stage_blocks=(1, 1), pool_spatial=2,
                            pool_temporal=2, mlp_ratio=2)
        enc = init_encoder(cfg, seed, dtype=np.float64)
        rng = rnd(seed)
        clip = rng.random((1, 8, 16, 16, 3))
        w = rng.standard_normal(cfg.output_grid)
        fwd = lambda: ad.tsum(ad.mul(encode_clips(enc, clip), w))
        return enc.flat(), fwd

    def b_spatial_mha(seed):
        rng = rnd(seed)
        p = aggregation.init_attention(8, 2, seed, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 2, 2, 2, 8)), requires_grad=True)
        w = rng.standard_normal((6, 2, 2, 8))
        fwd = lambda: ad.tsum(ad.mul(aggregation.spatial_mha(x, p).values, w))
        return {**p.flat(), "x": x}, fwd

    def b_observed_summary(seed):
        rng = rnd(seed)
        p = aggregation.init_summary(8, seed, max_len=8, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 2, 2, 2, 8)), requires_grad=True)
        w = rng.standard_normal(8)
        fwd = lambda: ad.tsum(ad.mul(aggregation.observed_summary(x, p).z, w))
        return {**p.flat(), "x": x}, fwd

    def b_prediction_heads(seed):
        rng = rnd(seed)
        heads = objective.init_heads(2, 6, 12, seed, dtype=np.float64)
        x = Tensor(rng.standard_normal((4, 2, 2, 6)), requires_grad=True)
        ctx = aggregation.ContextualizedRegions(values=x, n_clips=2, l_per_clip=2)
        w = rng.standard_normal((2, 8, 6))
        fwd = lambda: ad.tsum(ad.mul(objective.predict_future(ctx, heads).values, w))
        return {**heads.flat(), "x": x}, fwd

    def b_mvp_info_nce(seed):
        rng = rnd(seed)
        preds = Tensor(rng.standard_normal((2, 2, 4, 5)), requires_grad=True)
        targets = rng.standard_normal((2, 2, 4, 5))
        fwd = lambda: objective.mvp_info_nce(preds, targets, tau=0.5).loss
        return {"preds": preds}, fwd

    def b_cpc_loss(seed):
        rng = rnd(seed)
        heads = objective.init_heads(2, 6, 8, seed, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 4, 2, 2, 6)) * 0.5, requires_grad=True)
        ctx = aggregation.ContextualizedRegions(values=ad.reshape(x, (4, 2, 2, 6)),
                                                n_clips=2, l_per_clip=2)
        fut = rng.standard_normal((1, 3, 1, 2, 2, 6))
        fwd = lambda: objective.cpc_loss(ctx, fut, heads, tau=0.5).loss
        return {**heads.flat(), "x": x}, fwd

    def b_cvrl_seq_loss(seed):
        rng = rnd(seed)
        za = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        zb = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        return {"za": za, "zb": zb}, lambda: objective.cvrl_seq_loss(za, zb, tau=0.5)

    def b_summary_contrastive(seed):
        rng = rnd(seed)
        c = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        f = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        return {"c": c, "f": f}, lambda: downstream.summary_contrastive(c, f, tau=0.5)

    def b_text_encode(seed):
        rng = rnd(seed)
        enc = downstream.init_text_encoder(9, 6, seed, dtype=np.float64)
        tokens = np.array([0, 3, 3, 7])
        w = rng.standard_normal(6)
        fwd = lambda: ad.tsum(ad.mul(downstream.text_encode(tokens, enc), w))
        return {"table": enc.table}, fwd

    def b_bce(seed):
        rng = rnd(seed)
        logits = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        y = (rng.random((4, 5)) > 0.5).astype(np.float64)
        fwd = lambda: downstream.bce_multilabel(ad.sigmoid(logits), y)
        return {"logits": logits}, fwd

    return {
        "linear": b_linear, "layer_norm": b_layer_norm, "positional_add": b_positional_add,
        "mlp_block": b_mlp_block, "attention_block": b_attention_block,
        "patch_embed": b_patch_embed, "encoder": b_encoder, "spatial_mha": b_spatial_mha,
        "observed_summary": b_observed_summary, "prediction_heads": b_prediction_heads,
        "mvp_info_nce": b_mvp_info_nce, "cpc_loss": b_cpc_loss,
        "cvrl_seq_loss": b_cvrl_seq_loss, "summary_contrastive": b_summary_contrastive,
        "text_encode": b_text_encode, "bce_multilabel": b_bce,
    }


GRADCHECK_OPS = tuple(sorted(_fd_builders()))


def finite_diff_gradcheck(op_selector: str, seed: int = 0, eps: float = 1e-5,
                          n_coords: int = 32) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least `n_coords` coordinates across the op's parameter
    tensors. Relative error uses max(|analytic|, |fd|, 1e-8) in the
    denominator. All checks run in double precision.
    """
    builders = _fd_builders()
    if op_selector not in builders:
        raise ValueError(f"unknown op {op_selector!r}; known: {sorted(builders)}")
    params, forward = builders[op_selector](seed)
    out = forward()
    if out.data.size != 1:
        raise ValueError("gradcheck target must be scalar")
    for p in params.values():
        p.grad = None
    out.backward()

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    names = sorted(params)
    per_tensor = max(1, -(-n_coords // len(names)))  # ceil division
    worst = 0.0
    for name in names:
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        k = min(per_tensor, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(forward().data)
            flat[c] = orig - eps
            fm = float(forward().data)
            flat[c] = orig
            fd = (fp - fm) / (2 * eps)
            ga = float(analytic.reshape(-1)[c])
            if not (np.isfinite(fd) and np.isfinite(ga)):
                raise ValueError(f"non-finite gradient at {name}[{c}]: fd={fd}, analytic={ga}")
            rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst

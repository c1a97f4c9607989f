"""Experiment orchestration: data generation, staged training, ensemble
sampling, evaluation, and ablation studies.

The cascade trains in a fixed order: the deterministic forecaster
first, then the frame autoencoder, and last the latent diffusion stage,
which consumes the other two (blurry forecasts and context are encoded
to latents before diffusion training starts).  Every stage is seeded
from the master seed, checkpoints carry optimizer and RNG state so a
resumed run continues bit-identically, and every artifact embeds the
config hash and seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from . import metrics as vm
from . import report
from . import synthetic_radar as sr
from .autoencoder import FrameAutoencoder, ae_train_step, latent_scale, recon_threshold_study
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash
from .denoiser import FrameGuidedDenoiser
from .diffusion import ddim_sample, diffusion_train_step, make_linear_schedule
from .forecaster import MesoscaleForecaster, det_train_step
from .numerics import AdamW, cosine_lr


class PrerequisiteError(Exception):
    pass


STAGES = ("det", "ae", "diff")
STAGE_ORDER_HINT = ("stage order: train-det (deterministic forecaster), then "
                    "train-ae (frame autoencoder), then train-diff (latent diffusion)")


def stable_hash(*parts) -> int:
    """63-bit integer from the SHA-256 of the joined parts; the only
    seed-derivation rule in the package, so runs are machine-independent."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def member_seed(master_seed: int, event_seed: int, member: int) -> int:
    return stable_hash(master_seed, event_seed, member)


def data_hash(config: ExperimentConfig) -> str:
    """Identity of the generated dataset: generator settings + split sizes."""
    parts = sorted(f"{k}={v}" for k, v in sr.config_key_values(config.generator).items())
    parts.append(f"counts={config.dataset.n_train},{config.dataset.n_val},{config.dataset.n_test}")
    return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


def provenance(config: ExperimentConfig) -> list[str]:
    return [f"config_hash = {config_hash(config)}",
            f"seed = {config.master_seed}"]


class EventData:
    """Lazy event store: sequences regenerated on demand from seeds and
    cached as normalized torch tensors."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._cache: dict[int, torch.Tensor] = {}

    def frames(self, seed: int) -> torch.Tensor:
        """(T_total, 1, H, W) float32 in [0, 1]."""
        if seed not in self._cache:
            event = sr.generate_event(self.config.generator, seed)
            self._cache[seed] = torch.from_numpy(sr.normalize(event.frames))
        return self._cache[seed]

    def frames_byte(self, seed: int) -> np.ndarray:
        return sr.denormalize(self.frames(seed).numpy())

    def context_target(self, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
        gen = self.config.generator
        frames = self.frames(seed)
        return frames[:gen.t_in], frames[gen.t_in:]


# ---------------------------------------------------------------------------
# artifact paths and checkpoint plumbing

def manifest_path(out_dir: Path) -> Path:
    return out_dir / "manifest.txt"


def checkpoint_path(out_dir: Path, stage: str, step: int) -> Path:
    return out_dir / f"checkpoint_{stage}_{step}.ckpt"


def find_latest_checkpoint(out_dir: Path, stage: str) -> tuple[Path, int] | None:
    pattern = re.compile(rf"checkpoint_{re.escape(stage)}_(\d+)\.ckpt$")
    best: tuple[Path, int] | None = None
    for path in out_dir.glob(f"checkpoint_{stage}_*.ckpt"):
        match = pattern.match(path.name)
        if match:
            step = int(match.group(1))
            if best is None or step > best[1]:
                best = (path, step)
    return best


def _model_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"model.{name}": tensor.detach().cpu().numpy()
            for name, tensor in model.state_dict().items()}


def _optimizer_tensors(optimizer: AdamW) -> dict[str, np.ndarray]:
    return {f"opt.{name}": tensor.detach().cpu().numpy()
            for name, tensor in optimizer.state_tensors().items()}


def _save_stage_checkpoint(out_dir: Path, stage: str, step: int,
                           config: ExperimentConfig, model: torch.nn.Module,
                           optimizer: AdamW, torch_gen: torch.Generator,
                           np_rng: np.random.Generator,
                           extra_meta: dict | None = None) -> Path:
    tensors = _model_tensors(model)
    tensors.update(_optimizer_tensors(optimizer))
    tensors["rng.torch"] = torch_gen.get_state().numpy()
    meta = {
        "stage": stage,
        "step": step,
        "config_hash": config_hash(config),
        "data_hash": data_hash(config),
        "master_seed": config.master_seed,
        "numpy_rng": np_rng.bit_generator.state,
    }
    meta.update(extra_meta or {})
    path = checkpoint_path(out_dir, stage, step)
    save_checkpoint(path, kind=stage, tensors=tensors, meta=meta)
    return path


def _load_model_state(model: torch.nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    state = {name[len("model."):]: torch.from_numpy(np.array(arr))
             for name, arr in tensors.items() if name.startswith("model.")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise PrerequisiteError(
            f"checkpoint does not match the configured model: {exc}") from exc


def _load_optimizer_state(optimizer: AdamW, tensors: Mapping[str, np.ndarray]) -> None:
    state = {name[len("opt."):]: torch.from_numpy(np.array(arr))
             for name, arr in tensors.items() if name.startswith("opt.")}
    optimizer.load_state_tensors(state)


def _require_stage_checkpoint(out_dir: Path, stage: str,
                              config: ExperimentConfig):
    found = find_latest_checkpoint(out_dir, stage)
    if found is None:
        raise PrerequisiteError(
            f"no {stage!r} checkpoint in {out_dir}; {STAGE_ORDER_HINT}")
    ckpt = load_checkpoint(found[0])
    if ckpt.meta.get("data_hash") != data_hash(config):
        raise PrerequisiteError(
            f"{found[0].name} was trained on different data "
            f"(data_hash mismatch); rerun gen-data and the earlier stages")
    return ckpt


def _load_split(out_dir: Path, config: ExperimentConfig) -> sr.DatasetSplit:
    path = manifest_path(out_dir)
    if not path.exists():
        raise PrerequisiteError(f"no dataset manifest at {path}; run gen-data first")
    split, stored_hash = sr.load_manifest(path)
    if stored_hash != data_hash(config):
        raise PrerequisiteError(
            f"manifest {path} was generated from a different generator config; "
            "rerun gen-data")
    return split


# ---------------------------------------------------------------------------
# data generation

def run_gen_data(config: ExperimentConfig, out_dir: Path) -> sr.DatasetSplit:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = (config.dataset.n_train, config.dataset.n_val, config.dataset.n_test)
    split = sr.make_dataset(config.generator, counts)
    sr.save_manifest(manifest_path(out_dir), split, data_hash(config))
    return split


# ---------------------------------------------------------------------------
# training

def _build_model(stage: str, config: ExperimentConfig) -> torch.nn.Module:
    if stage == "det":
        return MesoscaleForecaster(config.forecaster)
    if stage == "ae":
        return FrameAutoencoder(config.autoencoder)
    if stage == "diff":
        return FrameGuidedDenoiser(config.denoiser)
    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


def load_stage_model(out_dir: Path, stage: str, config: ExperimentConfig) -> torch.nn.Module:
    """Build the stage model and load the newest checkpoint into it."""
    ckpt = _require_stage_checkpoint(Path(out_dir), stage, config)
    model = _build_model(stage, config)
    _load_model_state(model, ckpt.tensors)
    model.eval()
    return model


@torch.no_grad()
def prepare_diffusion_data(config: ExperimentConfig, det: MesoscaleForecaster,
                           ae: FrameAutoencoder, data: EventData,
                           seeds: Iterable[int]) -> dict:
    """Encode every training event once: clean target latents plus the
    two conditioning latents (blurry forecast, context), standardized by
    one dataset-level scale computed from the clean latents."""
    z_target, z_blur, z_ctx = [], [], []
    for seed in seeds:
        ctx, tgt = data.context_target(seed)
        blur = det.predict(ctx[None])
        z_target.append(ae.encode_sequence(tgt[None])[0])
        z_blur.append(ae.encode_sequence(blur)[0])
        z_ctx.append(ae.encode_sequence(ctx[None])[0])
    z_target = torch.stack(z_target)
    scale = latent_scale(z_target)
    return {
        "z0": z_target / scale,
        "blur": torch.stack(z_blur) / scale,
        "ctx": torch.stack(z_ctx) / scale,
        "scale": scale,
    }


def _write_loss_csv(out_dir: Path, stage: str, rows: list[tuple[int, float, float]],
                    config: ExperimentConfig) -> Path:
    path = out_dir / f"loss_{stage}.csv"
    report.write_csv(path, ("step", "loss", "lr"), rows, comments=provenance(config))
    return path


def _read_loss_rows(out_dir: Path, stage: str,
                    up_to_step: int) -> list[tuple[int, float, float]]:
    path = out_dir / f"loss_{stage}.csv"
    if not path.exists():
        return []
    _, raw = report.read_csv(path)
    rows = [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in raw]
    return [r for r in rows if r[0] <= up_to_step]


def run_train(stage: str, config: ExperimentConfig, out_dir: Path,
              resume: bool = True, stop_after: int | None = None) -> Path:
    """Train one stage to its configured budget. Returns the final
    checkpoint path.  `stop_after` halts early right after saving a
    checkpoint at that step (used to exercise resumption)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    split = _load_split(out_dir, config)
    data = EventData(config)
    budget = {"det": config.train_det, "ae": config.train_ae,
              "diff": config.train_diff}[stage]

    diff_data = None
    schedule = None
    if stage == "diff":
        det = load_stage_model(out_dir, "det", config)
        ae = load_stage_model(out_dir, "ae", config)
        diff_data = prepare_diffusion_data(config, det, ae, data, split.train)
        schedule = make_linear_schedule(config.schedule.n_steps,
                                        config.schedule.beta_start,
                                        config.schedule.beta_end)

    torch.manual_seed(stable_hash(config.master_seed, stage, "init"))
    model = _build_model(stage, config)
    optimizer = AdamW(model.parameters(), lr=budget.lr,
                      weight_decay=budget.weight_decay)
    torch_gen = torch.Generator()
    torch_gen.manual_seed(stable_hash(config.master_seed, stage, "train"))
    np_rng = np.random.Generator(
        np.random.PCG64(stable_hash(config.master_seed, stage, "batch")))

    start_step = 0
    loss_rows: list[tuple[int, float, float]] = []
    if resume:
        found = find_latest_checkpoint(out_dir, stage)
        if found is not None:
            ckpt = load_checkpoint(found[0])
            if ckpt.meta.get("data_hash") != data_hash(config):
                raise PrerequisiteError(
                    f"{found[0].name} belongs to different data; rerun gen-data")
            _load_model_state(model, ckpt.tensors)
            _load_optimizer_state(optimizer, ckpt.tensors)
            torch_gen.set_state(torch.from_numpy(np.array(ckpt.tensors["rng.torch"])))
            np_rng.bit_generator.state = ckpt.meta["numpy_rng"]
            start_step = int(ckpt.meta["step"])
            loss_rows = _read_loss_rows(out_dir, stage, start_step)

    n_train = len(split.train)
    t_total = config.generator.t_total
    extra_meta = {"latent_scale": diff_data["scale"]} if diff_data else None
    final_path = checkpoint_path(out_dir, stage, start_step)

    for step in range(start_step + 1, budget.steps + 1):
        lr = cosine_lr(step - 1, budget.steps, budget.lr, budget.lr_min)
        if stage == "det":
            idx = np_rng.integers(0, n_train, size=budget.batch_size)
            pairs = [data.context_target(split.train[i]) for i in idx]
            ctx = torch.stack([p[0] for p in pairs])
            tgt = torch.stack([p[1] for p in pairs])
            loss = det_train_step(model, optimizer, ctx, tgt, lr)
        elif stage == "ae":
            ev = np_rng.integers(0, n_train, size=budget.batch_size)
            fr = np_rng.integers(0, t_total, size=budget.batch_size)
            frames = torch.stack([data.frames(split.train[e])[f]
                                  for e, f in zip(ev, fr)])
            parts = ae_train_step(model, optimizer, frames, config.ae_loss,
                                  lr, generator=torch_gen)
            loss = parts["total"]
        else:
            idx = np_rng.integers(0, n_train, size=budget.batch_size)
            index = torch.from_numpy(idx)
            batch = {"z0": diff_data["z0"][index],
                     "blur": diff_data["blur"][index],
                     "ctx": diff_data["ctx"][index]}
            loss = diffusion_train_step(model, schedule, optimizer, batch,
                                        budget.p_drop, lr, torch_gen)
        loss_rows.append((step, loss, lr))
        at_boundary = step % budget.checkpoint_every == 0 or step == budget.steps
        stopping = stop_after is not None and step >= stop_after
        if at_boundary or stopping:
            final_path = _save_stage_checkpoint(
                out_dir, stage, step, config, model, optimizer, torch_gen,
                np_rng, extra_meta)
            _write_loss_csv(out_dir, stage, loss_rows, config)
        if stopping:
            return final_path

    _write_loss_csv(out_dir, stage, loss_rows, config)
    return final_path


# ---------------------------------------------------------------------------
# sampling

class CascadeSampler:
    """Holds the three trained models and runs the full cascade:
    deterministic forecast -> frame encoding -> guided diffusion ->
    decoding -> byte scale."""

    def __init__(self, config: ExperimentConfig, det: MesoscaleForecaster,
                 ae: FrameAutoencoder, diff: FrameGuidedDenoiser, scale: float):
        self.config = config
        self.det = det
        self.ae = ae
        self.diff = diff
        self.scale = scale
        self.schedule = make_linear_schedule(config.schedule.n_steps,
                                             config.schedule.beta_start,
                                             config.schedule.beta_end)

    @classmethod
    def from_artifacts(cls, config: ExperimentConfig, out_dir: Path) -> "CascadeSampler":
        out_dir = Path(out_dir)
        det = load_stage_model(out_dir, "det", config)
        ae = load_stage_model(out_dir, "ae", config)
        diff_ckpt = _require_stage_checkpoint(out_dir, "diff", config)
        diff = _build_model("diff", config)
        _load_model_state(diff, diff_ckpt.tensors)
        diff.eval()
        scale = float(diff_ckpt.meta["latent_scale"])
        return cls(config, det, ae, diff, scale)

    @torch.no_grad()
    def deterministic_forecast(self, ctx: torch.Tensor) -> torch.Tensor:
        """(T_in,1,H,W) in [0,1] -> (T_out,1,H,W) in [0,1]."""
        return self.det.predict(ctx[None])[0]

    @torch.no_grad()
    def sample_member(self, ctx: torch.Tensor, seed: int,
                      use_blur: bool = True) -> torch.Tensor:
        """One ensemble member, (T_out,1,H,W) in [0,1].  With
        use_blur=False the diffusion runs conditioned on the context
        alone (probabilistic-only ablation)."""
        c = self.config.denoiser
        z_ctx = self.ae.encode_sequence(ctx[None]) / self.scale
        z_blur = None
        if use_blur:
            blur = self.det.predict(ctx[None])
            z_blur = self.ae.encode_sequence(blur) / self.scale
        gen = torch.Generator()
        gen.manual_seed(seed)
        shape = (1, c.t_out, c.latent_channels, c.latent_height, c.latent_width)
        z = ddim_sample(self.diff, self.schedule, (z_blur, z_ctx), shape,
                        n_sample_steps=self.config.sampler.n_sample_steps,
                        guidance=self.config.sampler.guidance, generator=gen)
        frames = self.ae.decode_sequence(z * self.scale)[0]
        return frames.clamp(0.0, 1.0)

    @torch.no_grad()
    def sample_ensemble(self, ctx: torch.Tensor, event_seed: int, n: int,
                        use_blur: bool = True) -> np.ndarray:
        """(n, T_out, 1, H, W) byte-scale members; member m is seeded by
        hash(master_seed, event_seed, m)."""
        members = [self.sample_member(
            ctx, member_seed(self.config.master_seed, event_seed, m), use_blur)
            for m in range(n)]
        return sr.denormalize(torch.stack(members).numpy())


def _det_raster_path(out_dir: Path, event_seed: int) -> Path:
    return out_dir / f"det_{event_seed}.raw"


def _member_raster_path(out_dir: Path, event_seed: int, member: int) -> Path:
    return out_dir / f"cascade_{event_seed}_m{member}.raw"


def run_sample(config: ExperimentConfig, out_dir: Path) -> list[int]:
    """Sample the ensemble for every test event; writes raw rasters.
    Returns the event seeds sampled."""
    out_dir = Path(out_dir)
    split = _load_split(out_dir, config)
    sampler = CascadeSampler.from_artifacts(config, out_dir)
    data = EventData(config)
    n = config.ensemble_size
    for event_seed in split.test:
        ctx, _ = data.context_target(event_seed)
        det_frames = sr.denormalize(sampler.deterministic_forecast(ctx).numpy())
        sr.save_raw_sequence(_det_raster_path(out_dir, event_seed), det_frames)
        members = sampler.sample_ensemble(ctx, event_seed, n)
        for m in range(n):
            sr.save_raw_sequence(_member_raster_path(out_dir, event_seed, m),
                                 members[m])
    return list(split.test)


# ---------------------------------------------------------------------------
# evaluation

def score_model(members_by_event: dict[int, np.ndarray],
                targets_by_event: dict[int, np.ndarray],
                thresholds: Iterable[float], pools: Iterable[int],
                ssim_window: int = 7) -> list[tuple]:
    """Score one model's ensemble against targets on the byte scale.

    Categorical scores accumulate confusion counts per member over all
    events, score, then average over members; CRPS uses the full
    ensemble jointly per event, averaged over events; SSIM is averaged
    over members, events, and frames on [0,1]-scaled fields.  Returns
    (threshold, pool, csi, hss, crps, ssim) rows, thresholds major.
    """
    event_seeds = sorted(members_by_event)
    if not event_seeds:
        raise ValueError("no events to score")
    n_members = members_by_event[event_seeds[0]].shape[0]
    rows = []
    for pool in pools:
        pooled_members = {s: vm.max_pool(members_by_event[s], pool)
                          for s in event_seeds}
        pooled_targets = {s: vm.max_pool(targets_by_event[s], pool)
                          for s in event_seeds}
        crps = float(np.mean([vm.crps_ensemble(pooled_members[s], pooled_targets[s])
                              for s in event_seeds]))
        ssim_vals = []
        for s in event_seeds:
            pred, tgt = pooled_members[s], pooled_targets[s]
            for m in range(n_members):
                for t in range(tgt.shape[0]):
                    ssim_vals.append(vm.ssim(pred[m, t, 0] / 255.0,
                                             tgt[t, 0] / 255.0,
                                             data_range=1.0, window=ssim_window))
        ssim_mean = float(np.mean(ssim_vals))
        for tau in thresholds:
            csi_vals, hss_vals = [], []
            for m in range(n_members):
                counts = np.zeros(4, dtype=np.int64)
                for s in event_seeds:
                    c = vm.confusion_counts(pooled_members[s][m],
                                            pooled_targets[s], tau)
                    counts += np.array(c, dtype=np.int64)
                merged = vm.ConfusionCounts(*counts.tolist())
                csi_vals.append(vm.csi(merged))
                hss_vals.append(vm.hss(merged))
            rows.append((tau, pool, float(np.mean(csi_vals)),
                         float(np.mean(hss_vals)), crps, ssim_mean))
    # reorder thresholds-major so each (model, threshold) groups its pools
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def _event_targets(config: ExperimentConfig, data: EventData,
                   seeds: Iterable[int]) -> dict[int, np.ndarray]:
    targets = {}
    for seed in seeds:
        _, tgt = data.context_target(seed)
        targets[seed] = sr.denormalize(tgt.numpy())
    return targets


def run_evaluate(config: ExperimentConfig, out_dir: Path) -> Path:
    """Score the deterministic baseline and the cascade ensemble on the
    test events; writes metrics.csv and a frame grid per event."""
    out_dir = Path(out_dir)
    split = _load_split(out_dir, config)
    data = EventData(config)
    n = config.ensemble_size

    det_forecasts: dict[int, np.ndarray] = {}
    cascade_forecasts: dict[int, np.ndarray] = {}
    for event_seed in split.test:
        det_path = _det_raster_path(out_dir, event_seed)
        if not det_path.exists():
            raise PrerequisiteError(f"missing forecast raster {det_path}; run sample first")
        det_forecasts[event_seed] = sr.load_raw_sequence(det_path)[None]
        members = []
        for m in range(n):
            path = _member_raster_path(out_dir, event_seed, m)
            if not path.exists():
                raise PrerequisiteError(f"missing forecast raster {path}; run sample first")
            members.append(sr.load_raw_sequence(path))
        cascade_forecasts[event_seed] = np.stack(members)

    targets = _event_targets(config, data, split.test)
    m = config.metrics
    rows = []
    for model_name, forecasts in (("det", det_forecasts),
                                  ("cascade", cascade_forecasts)):
        for row in score_model(forecasts, targets, m.thresholds, m.pools,
                               m.ssim_window):
            rows.append((model_name,) + row)

    metrics_csv = out_dir / "metrics.csv"
    report.write_csv(metrics_csv,
                     ("model", "threshold", "pool", "csi", "hss", "crps", "ssim"),
                     rows, comments=provenance(config))

    meta = {"config_hash": config_hash(config), "seed": str(config.master_seed)}
    for event_seed in split.test:
        grid = {
            "observed": targets[event_seed],
            "deterministic": det_forecasts[event_seed][0],
            "cascade": cascade_forecasts[event_seed][0],
        }
        report.save_frame_grid(out_dir / f"frames_{event_seed}.png", grid,
                               metadata=meta)
    return metrics_csv


# ---------------------------------------------------------------------------
# ablations

def _ablation_frame_split(config: ExperimentConfig, out_dir: Path,
                          splits: tuple[int, ...] = (1, 6, 12)) -> Path:
    """Train one diffusion variant per frame grouping with identical
    seed, data, and budget; emit loss curves."""
    out_dir = Path(out_dir)
    split = _load_split(out_dir, config)
    data = EventData(config)
    det = load_stage_model(out_dir, "det", config)
    ae = load_stage_model(out_dir, "ae", config)
    diff_data = prepare_diffusion_data(config, det, ae, data, split.train)
    schedule = make_linear_schedule(config.schedule.n_steps,
                                    config.schedule.beta_start,
                                    config.schedule.beta_end)
    budget = config.train_diff
    n_train = len(split.train)

    rows: list[tuple[int, int, float]] = []
    curves: dict[str, tuple[list[int], list[float]]] = {}
    for frames_per_split in splits:
        denoiser_cfg = dataclasses.replace(config.denoiser,
                                           frames_per_split=frames_per_split)
        torch.manual_seed(stable_hash(config.master_seed, "ablate_split", "init"))
        model = FrameGuidedDenoiser(denoiser_cfg)
        optimizer = AdamW(model.parameters(), lr=budget.lr,
                          weight_decay=budget.weight_decay)
        torch_gen = torch.Generator()
        torch_gen.manual_seed(stable_hash(config.master_seed, "ablate_split", "train"))
        np_rng = np.random.Generator(
            np.random.PCG64(stable_hash(config.master_seed, "ablate_split", "batch")))
        steps, losses = [], []
        for step in range(1, budget.steps + 1):
            lr = cosine_lr(step - 1, budget.steps, budget.lr, budget.lr_min)
            idx = torch.from_numpy(np_rng.integers(0, n_train, size=budget.batch_size))
            batch = {"z0": diff_data["z0"][idx], "blur": diff_data["blur"][idx],
                     "ctx": diff_data["ctx"][idx]}
            loss = diffusion_train_step(model, schedule, optimizer, batch,
                                        budget.p_drop, lr, torch_gen)
            rows.append((frames_per_split, step, loss))
            steps.append(step)
            losses.append(loss)
        curves[f"split={frames_per_split}"] = (steps, losses)

    csv_path = out_dir / "ablation_frame_split.csv"
    report.write_csv(csv_path, ("split", "step", "train_loss"), rows,
                     comments=provenance(config))
    report.save_line_plot(out_dir / "ablation_frame_split.png", curves,
                          xlabel="step", ylabel="noise-prediction loss",
                          title="frame grouping ablation", logy=True,
                          metadata={"config_hash": config_hash(config),
                                    "seed": str(config.master_seed)})
    return csv_path


def _ablation_latent_dim(config: ExperimentConfig, out_dir: Path,
                         latent_dims: tuple[int, ...] = (2, 4, 8)) -> Path:
    """Train one autoencoder per latent width with identical seed, data,
    and budget; score reconstruction CSI/HSS per threshold."""
    out_dir = Path(out_dir)
    split = _load_split(out_dir, config)
    data = EventData(config)
    budget = config.train_ae
    n_train = len(split.train)
    t_total = config.generator.t_total
    eval_frames = torch.cat([data.frames(seed) for seed in split.test])

    rows: list[tuple[int, float, float, float]] = []
    series_csi: dict[str, tuple[list[float], list[float]]] = {}
    for c_z in latent_dims:
        ae_cfg = dataclasses.replace(config.autoencoder, latent_channels=c_z)
        torch.manual_seed(stable_hash(config.master_seed, "ablate_latent", "init"))
        model = FrameAutoencoder(ae_cfg)
        optimizer = AdamW(model.parameters(), lr=budget.lr,
                          weight_decay=budget.weight_decay)
        torch_gen = torch.Generator()
        torch_gen.manual_seed(stable_hash(config.master_seed, "ablate_latent", "train"))
        np_rng = np.random.Generator(
            np.random.PCG64(stable_hash(config.master_seed, "ablate_latent", "batch")))
        for step in range(1, budget.steps + 1):
            lr = cosine_lr(step - 1, budget.steps, budget.lr, budget.lr_min)
            ev = np_rng.integers(0, n_train, size=budget.batch_size)
            fr = np_rng.integers(0, t_total, size=budget.batch_size)
            frames = torch.stack([data.frames(split.train[e])[f]
                                  for e, f in zip(ev, fr)])
            ae_train_step(model, optimizer, frames, config.ae_loss, lr,
                          generator=torch_gen)
        model.eval()
        normalized = [tau / 255.0 for tau in config.metrics.thresholds]
        study = recon_threshold_study(model, eval_frames, normalized)
        taus, csis = [], []
        for (tau_norm, csi_val, hss_val), tau_byte in zip(study, config.metrics.thresholds):
            rows.append((c_z, tau_byte, csi_val, hss_val))
            taus.append(tau_byte)
            csis.append(csi_val)
        series_csi[f"C_z={c_z}"] = (taus, csis)

    csv_path = out_dir / "ablation_latent_dim.csv"
    report.write_csv(csv_path, ("latent_dim", "threshold", "csi", "hss"), rows,
                     comments=provenance(config))
    report.save_line_plot(out_dir / "ablation_latent_dim.png", series_csi,
                          xlabel="threshold (byte)", ylabel="reconstruction CSI",
                          title="autoencoder distortion ablation",
                          metadata={"config_hash": config_hash(config),
                                    "seed": str(config.master_seed)})
    return csv_path


def _ablation_cascade(config: ExperimentConfig, out_dir: Path) -> Path:
    """Evaluate the deterministic model alone, the diffusion stage
    conditioned on context only, and the full cascade on the same test
    events."""
    out_dir = Path(out_dir)
    split = _load_split(out_dir, config)
    sampler = CascadeSampler.from_artifacts(config, out_dir)
    data = EventData(config)
    n = config.ensemble_size

    det_f: dict[int, np.ndarray] = {}
    prob_f: dict[int, np.ndarray] = {}
    cascade_f: dict[int, np.ndarray] = {}
    for event_seed in split.test:
        ctx, _ = data.context_target(event_seed)
        det_f[event_seed] = sr.denormalize(
            sampler.deterministic_forecast(ctx).numpy())[None]
        prob_f[event_seed] = sampler.sample_ensemble(ctx, event_seed, n,
                                                     use_blur=False)
        cascade_f[event_seed] = sampler.sample_ensemble(ctx, event_seed, n,
                                                        use_blur=True)

    targets = _event_targets(config, data, split.test)
    m = config.metrics
    rows = []
    for model_name, forecasts in (("det", det_f), ("prob_only", prob_f),
                                  ("cascade", cascade_f)):
        for row in score_model(forecasts, targets, m.thresholds, m.pools,
                               m.ssim_window):
            rows.append((model_name,) + row)
    csv_path = out_dir / "ablation_cascade.csv"
    report.write_csv(csv_path,
                     ("model", "threshold", "pool", "csi", "hss", "crps", "ssim"),
                     rows, comments=provenance(config))
    return csv_path


ABLATION_KINDS = ("frame_split", "latent_dim", "cascade")


def run_ablation(kind: str, config: ExperimentConfig, out_dir: Path) -> Path:
    if kind == "frame_split":
        return _ablation_frame_split(config, out_dir)
    if kind == "latent_dim":
        return _ablation_latent_dim(config, out_dir)
    if kind == "cascade":
        return _ablation_cascade(config, out_dir)
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")

"""Self-supervised adversarial training loop and one-shot inference.

Per batch: one discriminator update on the min-max loss with detached
fakes, then one generator update on the weighted total objective. Adam
with shared hyperparameters drives every module; the geometry extractor
stays frozen and the ensemble weights stay fixed for the whole run.
Every stochastic choice is a pure function of (seed, step), so identical
(config, seed) runs produce bit-identical states.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig, config_from_dict, config_to_dict
from .data import preprocess, sample_pair_indices
from .discriminators import (DiscriminatorEnsemble, EnsembleInput,
                             gan_loss_discriminator, gan_loss_generator)
from .generator import FaceGenerator
from .geometry import GeometryExtractor, SceneSpec, build_backend
from .losses import LossWeights, perceptual_loss, total_loss
from .motion import KeypointSet, equivariance_loss, invert_jacobian
from .seeding import seeded_generator
from .tps import sample_valid_transform


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AnimationRequest:
    source: np.ndarray
    driving: list
    mode: str = "relative"  # or "absolute"


@dataclass
class TrainState:
    config: TrainConfig
    generator: FaceGenerator
    ensemble: DiscriminatorEnsemble
    geometry: GeometryExtractor
    opt_generator: torch.optim.Adam
    opt_discriminator: torch.optim.Adam
    step: int = 0
    geometry_fingerprint: bytes = b""

    def loss_weights(self):
        return LossWeights(self.config.w_perceptual, self.config.w_gan,
                           self.config.w_equivariance)


def _geometry_fingerprint(geometry):
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(geometry.named_buffers()):
        digest.update(name.encode())
        digest.update(tensor.detach().numpy().tobytes())
    for name, tensor in sorted(geometry.named_parameters()):
        digest.update(name.encode())
        digest.update(tensor.detach().numpy().tobytes())
    return digest.digest()


def build_state(config):
    """Construct all modules and optimizers from a validated config."""
    config.validate()
    torch.use_deterministic_algorithms(True)
    generator = FaceGenerator(config, seed=config.seed)
    ensemble = DiscriminatorEnsemble(
        member_names=config.member_names, weights=config.member_weights,
        base=config.disc_base, num_blocks=config.disc_blocks,
        init_seed=config.seed)
    backend = build_backend(
        config.geometry_backend,
        oracle_spec=SceneSpec(size=config.image_size,
                              base_depth=float(config.image_size)),
        external_path=config.geometry_weights or None)
    geometry = GeometryExtractor(backend, pixel_spacing=config.pixel_spacing)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(ensemble.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2))
    state = TrainState(config=config, generator=generator, ensemble=ensemble,
                       geometry=geometry, opt_generator=opt_g,
                       opt_discriminator=opt_d, step=0)
    state.geometry_fingerprint = _geometry_fingerprint(geometry)
    return state


def _needs_geometry(state):
    return any(state.ensemble.member_weight(n) > 0
               for n in state.ensemble.member_names if n != "rgb")


def _ensemble_input(state, image, with_grad):
    if not _needs_geometry(state):
        return EnsembleInput(rgb=image)
    if with_grad:
        maps = state.geometry(image)
    else:
        with torch.no_grad():
            maps = state.geometry(image)
    return EnsembleInput(rgb=image, depth=maps.depth, normal=maps.normal)


def _sample_transform(state, batch_size):
    cfg = state.config
    gen = seeded_generator(cfg.seed, f"tps:{state.step}")
    return sample_valid_transform(
        batch_size, generator=gen,
        control_points=cfg.equivariance_tps_points,
        scale_jitter=cfg.equivariance_scale_jitter,
        rotation_deg=cfg.equivariance_rotation_deg,
        tps_std=cfg.equivariance_tps_std)


def train_step(state, batch, log_scores=True):
    """One discriminator update followed by one generator update.

    batch: (source, driving) tensors of shape (B, 3, H, W). Returns the
    LossReport for the generator objective; raises TrainingDiverged with
    a per-term dump if any loss goes non-finite.
    """
    cfg = state.config
    source, driving = batch
    state.generator.train()
    state.ensemble.train()

    kp_source = state.generator.keypoints(source)
    kp_driving = state.generator.keypoints(driving)
    out = state.generator(source, kp_source, kp_driving)
    prediction = out["prediction"]

    # discriminator sub-step (generator frozen via detach)
    real_input = _ensemble_input(state, driving, with_grad=False)
    fake_input = _ensemble_input(state, prediction.detach(), with_grad=False)
    d_loss, real_scores, fake_scores = gan_loss_discriminator(
        state.ensemble, real_input, fake_input, form=cfg.gan_loss)
    state.opt_discriminator.zero_grad()
    d_loss.backward()
    state.opt_discriminator.step()

    # generator sub-step (gradients reach the generator through the
    # frozen geometry extractor applied to the fake image)
    fake_attached = _ensemble_input(state, prediction, with_grad=True)
    adv, _ = gan_loss_generator(state.ensemble, fake_attached, form=cfg.gan_loss)
    perceptual = perceptual_loss(driving, prediction)
    transform = _sample_transform(state, driving.shape[0])
    equivariance = equivariance_loss(driving, state.generator.keypoints, transform,
                                     keypoints=kp_driving)

    total, report = total_loss(perceptual, adv, equivariance,
                               state.loss_weights(), discriminator=d_loss)
    if not np.isfinite(report.total) or not np.isfinite(report.discriminator):
        raise TrainingDiverged(
            "non-finite loss at step "
            f"{state.step}: perceptual={report.perceptual} "
            f"adversarial_g={report.adversarial_g} "
            f"equivariance={report.equivariance} "
            f"discriminator={report.discriminator}")
    state.opt_generator.zero_grad()
    total.backward()
    state.opt_generator.step()

    if log_scores:
        for name, score in real_scores.items():
            report.scores[f"{name}_real"] = float(score.detach().mean())
        for name, score in fake_scores.items():
            report.scores[f"{name}_fake"] = float(score.detach().mean())
    state.step += 1
    return report


class FrameStore:
    """All frames of a manifest preloaded at target size (desk corpora are
    tiny; this keeps the training loop off the disk)."""

    def __init__(self, manifest, image_size):
        from .data import _frame_files, load_image

        self.frames = {}
        for clip in manifest.clips:
            files = _frame_files(clip.frame_dir)
            self.frames[clip.clip_id] = [
                torch.from_numpy(preprocess(load_image(f), image_size)).permute(2, 0, 1)
                for f in files]

    def get(self, clip_id, index):
        return self.frames[clip_id][index]


def sample_batch(manifest, store, seed, step, batch_size):
    sources, drivings = [], []
    for i in range(batch_size):
        clip, si, di = sample_pair_indices(manifest, seed, step * batch_size + i)
        sources.append(store.get(clip.clip_id, si))
        drivings.append(store.get(clip.clip_id, di))
    return torch.stack(sources), torch.stack(drivings)


def fit(state, manifest, log_path=None, progress=None):
    """Run the loop from state.step to config.total_steps."""
    cfg = state.config
    store = FrameStore(manifest, cfg.image_size)
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.step < cfg.total_steps:
            step = state.step
            batch = sample_batch(manifest, store, cfg.seed, step, cfg.batch_size)
            report = train_step(state, batch)
            if log_fh:
                record = {"step": step}
                record.update(report.to_dict())
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if progress:
                progress(step, report)
    finally:
        if log_fh:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpointing


def state_entries(state):
    """Canonical (name -> tensor) map covering parameters, buffers, and
    optimizer moments; the frozen geometry tensors ride along so their
    constancy can be audited."""
    entries = {}
    for name, p in state.generator.named_parameters():
        entries[f"generator/{name}"] = p
    for name, b in state.generator.named_buffers():
        entries[f"generator_buffer/{name}"] = b
    for name, p in state.ensemble.named_parameters():
        entries[f"ensemble/{name}"] = p
    for name, b in state.ensemble.named_buffers():
        entries[f"ensemble_buffer/{name}"] = b
    for name, b in state.geometry.named_buffers():
        entries[f"geometry/{name}"] = b
    for name, p in state.geometry.named_parameters():
        entries[f"geometry/{name}"] = p
    entries.update(_optimizer_entries("adam_g", state.opt_generator, state.generator))
    entries.update(_optimizer_entries("adam_d", state.opt_discriminator, state.ensemble))
    return entries


def _optimizer_entries(prefix, optimizer, module):
    entries = {}
    for name, p in module.named_parameters():
        opt_state = optimizer.state.get(p)
        if not opt_state:
            continue
        entries[f"{prefix}/{name}/step"] = torch.as_tensor(
            float(opt_state["step"])).reshape(1)
        entries[f"{prefix}/{name}/exp_avg"] = opt_state["exp_avg"]
        entries[f"{prefix}/{name}/exp_avg_sq"] = opt_state["exp_avg_sq"]
    return entries


def save_state(state, path):
    if _geometry_fingerprint(state.geometry) != state.geometry_fingerprint:
        raise RuntimeError("geometry extractor changed during training; "
                           "it is contractually frozen")
    ckpt.save_checkpoint(path, state.step, config_to_dict(state.config),
                         state_entries(state))


def load_state(path):
    """Rebuild a TrainState from an archive; round-trips bit-exactly."""
    step, config_dict, entries, _ = ckpt.load_checkpoint(path)
    state = build_state(config_from_dict(config_dict))
    state.step = step

    def assign(module, prefix, buffer_prefix=None):
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(torch.from_numpy(entries[f"{prefix}/{name}"]))
            for name, b in module.named_buffers():
                key = f"{buffer_prefix or prefix}/{name}"
                b.copy_(torch.from_numpy(entries[key]))

    assign(state.generator, "generator", "generator_buffer")
    assign(state.ensemble, "ensemble", "ensemble_buffer")
    assign(state.geometry, "geometry")
    state.geometry_fingerprint = _geometry_fingerprint(state.geometry)
    _load_optimizer(entries, "adam_g", state.opt_generator, state.generator)
    _load_optimizer(entries, "adam_d", state.opt_discriminator, state.ensemble)
    return state


def _load_optimizer(entries, prefix, optimizer, module):
    for name, p in module.named_parameters():
        key = f"{prefix}/{name}/step"
        if key not in entries:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(entries[key][0])),
            "exp_avg": torch.from_numpy(entries[f"{prefix}/{name}/exp_avg"]),
            "exp_avg_sq": torch.from_numpy(entries[f"{prefix}/{name}/exp_avg_sq"]),
        }


# ---------------------------------------------------------------------------
# inference


def _relative_keypoints(kp_source, kp_driving, kp_initial, eps=1e-4):
    positions = kp_source.positions + (kp_driving.positions - kp_initial.positions)
    change = torch.matmul(kp_driving.jacobians, invert_jacobian(kp_initial.jacobians, eps))
    jacobians = torch.matmul(change, kp_source.jacobians)
    return KeypointSet(positions, jacobians)


def animate(state, request):
    """Generate one frame per driving frame from a single source image."""
    if not request.driving:
        raise ValueError("empty driving sequence")
    if request.mode not in ("relative", "absolute"):
        raise ValueError(f"unknown transfer mode {request.mode!r}")
    was_training = state.generator.training
    state.generator.eval()
    frames = []
    try:
        with torch.no_grad():
            source = torch.from_numpy(request.source).permute(2, 0, 1).unsqueeze(0)
            kp_source = state.generator.keypoints(source)
            kp_initial = None
            for frame in request.driving:
                drv = torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0)
                kp_driving = state.generator.keypoints(drv)
                if kp_initial is None:
                    kp_initial = kp_driving
                if request.mode == "relative":
                    kp_target = _relative_keypoints(kp_source, kp_driving, kp_initial,
                                                    state.config.jacobian_eps)
                else:
                    kp_target = kp_driving
                out = state.generator(source, kp_source, kp_target)
                frames.append(out["prediction"][0].permute(1, 2, 0).numpy())
    finally:
        if was_training:
            state.generator.train()
    return frames

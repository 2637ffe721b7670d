import os
from os import path
from contextlib import nullcontext
from copy import deepcopy
from dataclasses import asdict, replace
from typing import Dict, Iterator, List, Optional, Tuple
import logging

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Sampler
from torch.optim import AdamW, Adam, SGD
from torch.cuda.amp import GradScaler
from tqdm import trange

from lsdiff.errors import TrainingError, ConfigMismatch
from lsdiff.environment import RunConfig, TrainConfig
from lsdiff.codec import LatentCodec, build_codec, encode_frames
from lsdiff.conditions import (ConditionBundle, IdGuider, IdGuiderConfig, MelStubExtractor,
                               drop_conditions, encode_identity)
from lsdiff.diffusion import (DiffusionState, LossWeights, add_noise, dsm_loss, sample_training_sigma)
from lsdiff.unet import DenoisingUNet, UNetConfig, ModelFactory, CHECKPOINT_FORMAT_VERSION
from lsdiff.data import TrainBatch, SyntheticLipDataset, LipSyncDataset, DatasetBase, collate

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"


class StepBatchSampler(Sampler):
    """
    Yields one batch of ``(step, index)`` keys per training step. The batch
    drawn at step ``s`` depends only on ``(seed, s)``, so a resumed run sees the
    same data as an uninterrupted one.
    """

    def __init__(self, num_items: int, batch_size: int, start_step: int, end_step: int, seed: int = 0):
        self.num_items = num_items
        self.batch_size = batch_size
        self.start_step = start_step
        self.end_step = end_step
        self.seed = seed

    def __iter__(self) -> Iterator[List[Tuple[int, int]]]:
        for step in range(self.start_step, self.end_step):
            rng = np.random.default_rng([self.seed, step])
            replace_ = self.num_items < self.batch_size
            idx = rng.choice(self.num_items, size=self.batch_size, replace=replace_)
            yield [(step, int(i)) for i in idx]

    def __len__(self):
        return max(0, self.end_step - self.start_step)


def create_optim(params, name: str = "adamw", lr: float = 6e-5):
    if name == "adamw":
        optim = AdamW(params, lr=lr)
    elif name == "adam":
        optim = Adam(params, lr=lr)
    elif name == "sgd":
        optim = SGD(params, lr=lr, momentum=0.9)
    else:
        raise NotImplementedError(name)
    return optim


def build_datasets(config: RunConfig, extractor) -> Tuple[DatasetBase, DatasetBase]:
    tc = config.train
    common = dict(frames_per_clip=tc.frames_per_clip, k=tc.audio_k, pad_ratio=tc.pad_ratio,
                  alpha=tc.smooth_alpha, max_gap=tc.max_gap, mask_mode=tc.mask_mode, seed=config.seed)
    if tc.manifest is not None:
        trainset = LipSyncDataset(extractor, tc.manifest, val_clips=tc.val_clips, resolution=tc.resolution, **common)
    else:
        trainset = SyntheticLipDataset(extractor, num_clips=tc.num_synthetic_clips, num_frames=tc.synthetic_frames,
                                       size=tc.resolution, fps=tc.fps, channels=tc.image_channels,
                                       val_clips=tc.val_clips, **common)
    valset = deepcopy(trainset)

    # Clean up dataset by getting rid of the other split
    valset = valset.set_split("val").commit()
    trainset = trainset.set_split("train").commit()
    return trainset, valset


def build_models(config: RunConfig, codec: Optional[LatentCodec] = None):
    tc = config.train
    codec = codec if codec is not None else build_codec(tc.codec, tc.image_channels, tc.codec_scale,
                                                        config.unet.latent_channels)
    unet_cfg = replace(config.unet, latent_channels=codec.latent_channels)
    if unet_cfg.latent_channels != config.unet.latent_channels:
        logger.info("latent_channels set to %d by the %s codec", codec.latent_channels, tc.codec)
    unet, guider = ModelFactory.build(unet_cfg, tc.image_channels, codec.scale, tc.guider_input)
    return unet, guider, codec


def fit_codec(codec: LatentCodec,
              frames: torch.Tensor,
              steps: int = 200,
              lr: float = 1e-3,
              batch_size: int = 8,
              optim: str = "adam",
              seed: int = 0,
              device=torch.device("cpu")) -> List[float]:
    """
    Reconstruction pre-fit of a trainable codec on ``[N, C, H, W]`` frames.
    Returns the per-step MSE; the codec is left frozen in eval mode.
    """
    codec.train()
    codec.requires_grad_(True)
    opt = create_optim(codec.parameters(), optim, lr)
    generator = torch.Generator().manual_seed(seed)
    losses = []
    for _ in trange(steps, desc="Fitting codec"):
        idx = torch.randint(frames.shape[0], (min(batch_size, frames.shape[0]),), generator=generator)
        x = frames[idx].to(device)
        loss = F.mse_loss(codec.decode(codec.encode(x)), x)
        loss.backward()
        opt.step()
        opt.zero_grad(set_to_none=True)
        losses.append(loss.item())
    codec.eval()
    codec.requires_grad_(False)
    if losses:
        logger.info("codec fit: reconstruction mse %.6f -> %.6f", losses[0], losses[-1])
    return losses


############## Training step ##############

def make_bundle(batch: TrainBatch, guider: IdGuider, codec: LatentCodec, device) -> Tuple[torch.Tensor, ConditionBundle]:
    z0 = encode_frames(batch.target.to(device), codec)
    masked = encode_frames(batch.masked.to(device), codec)
    ids = encode_identity(batch.ref_image.to(device), batch.ref_lip_mask.to(device), guider, codec)
    return z0, ConditionBundle(ids, batch.audio.to(device), masked)


def train_step(batch: TrainBatch,
               unet: DenoisingUNet,
               guider: IdGuider,
               codec: LatentCodec,
               optim: torch.optim.Optimizer,
               tc: TrainConfig,
               generator: torch.Generator,
               scaler: Optional[GradScaler] = None,
               device=torch.device("cpu")) -> float:
    """
    One dropout draw and one sigma draw per sample, one optimizer update.
    Raises NONFINITE_LOSS (with the batch's sample ids) before any update.
    """
    unet.train()
    guider.train()
    z0, bundle = make_bundle(batch, guider, codec, device)
    if tc.cfg_dropout:
        bundle = drop_conditions(bundle, tc.p_audio, tc.p_ref, generator)
    sigma = sample_training_sigma(z0.shape[0], generator, tc.p_mean, tc.p_std).to(device)
    z_t, _ = add_noise(z0, sigma, generator)
    weights = LossWeights(tc.loss_weighting, tc.sigma_data)

    use_amp = scaler is not None and scaler.is_enabled()
    with (torch.autocast(device_type="cuda") if use_amp else nullcontext()):
        loss = dsm_loss(z0, DiffusionState(z_t, sigma), bundle, unet, weights, tc.sigma_data)
    if not torch.isfinite(loss):
        optim.zero_grad(set_to_none=True)
        raise TrainingError(f"loss is {loss.item()}", code="NONFINITE_LOSS", sample_ids=batch.sample_ids)

    params = [p for g in optim.param_groups for p in g["params"]]
    if use_amp:
        scaler.scale(loss).backward()
        scaler.unscale_(optim)
        nn.utils.clip_grad_norm_(params, tc.grad_clip)
        scaler.step(optim)
        scaler.update()
    else:
        loss.backward()
        nn.utils.clip_grad_norm_(params, tc.grad_clip)
        optim.step()
    optim.zero_grad(set_to_none=True)
    return loss.item()


@torch.no_grad()
def validation_loss(batches, unet, guider, codec, tc: TrainConfig, seed: int = 0, device=torch.device("cpu")) -> float:
    """Mean DSM loss over ``batches`` with a fixed noise stream and no condition dropout."""
    unet.eval()
    guider.eval()
    generator = torch.Generator().manual_seed(seed)
    weights = LossWeights(tc.loss_weighting, tc.sigma_data)
    losses = []
    for batch in batches:
        z0, bundle = make_bundle(batch, guider, codec, device)
        sigma = sample_training_sigma(z0.shape[0], generator, tc.p_mean, tc.p_std).to(device)
        z_t, _ = add_noise(z0, sigma, generator)
        losses.append(dsm_loss(z0, DiffusionState(z_t, sigma), bundle, unet, weights, tc.sigma_data).item())
    return float(np.mean(losses)) if losses else 0.0


############## Checkpoints ##############

def _codec_spec(codec: LatentCodec, name: str) -> Dict:
    return {"name": name, "scale": codec.scale, "image_channels": codec.image_channels,
            "latent_channels": codec.latent_channels, "state": codec.state_dict()}


def save_checkpoint(fpath: str,
                    unet: DenoisingUNet,
                    guider: IdGuider,
                    codec: LatentCodec,
                    config: RunConfig,
                    optim: Optional[torch.optim.Optimizer] = None,
                    step: int = 0,
                    generator: Optional[torch.Generator] = None,
                    scaler: Optional[GradScaler] = None) -> Dict:
    """Single-file archive of every state needed to resume or to run inference."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": step,
        "unet_config": unet.config.to_dict(),
        "guider_config": asdict(guider.config),
        "run_config": config.to_dict(),
    }
    payload = dict(manifest)
    payload.update({
        "unet": unet.state_dict(),
        "guider": guider.state_dict(),
        "codec": _codec_spec(codec, config.train.codec),
        "optim": optim.state_dict() if optim is not None else None,
        "scaler": scaler.state_dict() if scaler is not None else None,
        "rng": {
            "generator": generator.get_state() if generator is not None else None,
            "torch": torch.get_rng_state(),
        },
    })
    try:
        os.makedirs(path.dirname(path.abspath(fpath)), exist_ok=True)
        tmp = fpath + ".tmp"
        torch.save(payload, tmp)
        os.replace(tmp, fpath)
    except OSError as e:
        raise TrainingError(f"cannot write checkpoint {fpath}: {e}", code="IO_FAILURE") from e
    logger.info("checkpoint set: step %d -> %s", step, fpath)
    return manifest


def load_checkpoint(fpath: str) -> Dict:
    if not path.isfile(fpath):
        raise TrainingError(f"checkpoint {fpath} does not exist", code="IO_FAILURE")
    try:
        ckpt = torch.load(fpath, map_location="cpu")
    except Exception as e:
        raise TrainingError(f"cannot read checkpoint {fpath}: {e}", code="IO_FAILURE") from e
    if ckpt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigMismatch(f"unsupported checkpoint format {ckpt.get('format_version')}")
    return ckpt


def restore_checkpoint(fpath: str,
                       unet: DenoisingUNet,
                       guider: IdGuider,
                       optim: Optional[torch.optim.Optimizer] = None,
                       generator: Optional[torch.Generator] = None,
                       scaler: Optional[GradScaler] = None,
                       codec: Optional[LatentCodec] = None) -> int:
    """Load states in place and return the stored step. Raises CONFIG_MISMATCH on architecture drift."""
    ckpt = load_checkpoint(fpath)
    if ckpt["unet_config"] != unet.config.to_dict():
        raise ConfigMismatch(f"checkpoint UNet config {ckpt['unet_config']} != {unet.config.to_dict()}")
    if ckpt["guider_config"] != asdict(guider.config):
        raise ConfigMismatch(f"checkpoint guider config {ckpt['guider_config']} != {asdict(guider.config)}")
    unet.load_state_dict(ckpt["unet"])
    guider.load_state_dict(ckpt["guider"])
    if codec is not None:
        codec.load_state_dict(ckpt["codec"]["state"])
    if optim is not None and ckpt.get("optim") is not None:
        optim.load_state_dict(ckpt["optim"])
    if scaler is not None and ckpt.get("scaler") is not None:
        scaler.load_state_dict(ckpt["scaler"])
    if generator is not None and ckpt["rng"].get("generator") is not None:
        generator.set_state(ckpt["rng"]["generator"])
    torch.set_rng_state(ckpt["rng"]["torch"])
    return int(ckpt["step"])


def load_models(fpath: str) -> Tuple[DenoisingUNet, IdGuider, LatentCodec, RunConfig]:
    """Rebuild the networks and codec a checkpoint was trained with, for inference."""
    ckpt = load_checkpoint(fpath)
    config = RunConfig.from_dict(ckpt["run_config"])
    spec = ckpt["codec"]
    codec = build_codec(spec["name"], spec["image_channels"], spec["scale"], spec["latent_channels"])
    codec.load_state_dict(spec["state"])
    unet = DenoisingUNet(UNetConfig(**ckpt["unet_config"]))
    gcfg = ckpt["guider_config"]
    guider = IdGuider(IdGuiderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in gcfg.items()}))
    unet.load_state_dict(ckpt["unet"])
    guider.load_state_dict(ckpt["guider"])
    unet.eval()
    guider.eval()
    return unet, guider, codec, config


############## Runner ##############

class Runner:
    def __init__(self, config: RunConfig, run_dir: Optional[str] = None, device=None):
        self.config = config
        self.tc = config.train
        self.device = torch.device(device if device is not None else config.device)
        self.run_dir = run_dir
        torch.manual_seed(config.seed)

        self.unet, self.guider, self.codec = build_models(config)
        self.unet, self.guider, self.codec = (self.unet.to(self.device), self.guider.to(self.device),
                                              self.codec.to(self.device))
        self.extractor = MelStubExtractor(self.unet.config.audio_dim, self.tc.sample_rate, seed=config.seed)
        self.optim = self.create_optim()
        self.scaler = GradScaler(enabled=self.tc.use_fp16 and self.device.type == "cuda")
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step_id = 0
        self.losses: List[float] = []
        self.val_losses: List[Tuple[int, float]] = []

        self.trainset, self.valset = build_datasets(config, self.extractor)
        if len(self.trainset) == 0:
            raise TrainingError("training split is empty", code="CLIP_TOO_SHORT")

        if run_dir is not None and path.isfile(path.join(run_dir, CHECKPOINT_NAME)):
            # load state and continue training
            self.step_id = restore_checkpoint(path.join(run_dir, CHECKPOINT_NAME), self.unet, self.guider,
                                              self.optim, self.generator, self.scaler, self.codec)
            logger.info("Continuing training from step %d.", self.step_id)
        else:
            if self.codec.trainable and self.tc.codec_fit_steps > 0:
                fit_codec(self.codec, self.trainset.frames(), self.tc.codec_fit_steps, self.tc.codec_lr,
                          self.tc.batch_size * self.tc.frames_per_clip, seed=config.seed, device=self.device)
            logger.info("Training start!")

    def create_optim(self):
        params = list(self.unet.parameters()) + list(self.guider.parameters())
        return create_optim(params, self.tc.optim, self.tc.lr)

    def loader(self, dataset, start_step: int, end_step: int) -> DataLoader:
        sampler = StepBatchSampler(len(dataset), self.tc.batch_size, start_step, end_step, self.config.seed)
        return DataLoader(dataset, batch_sampler=sampler, collate_fn=collate, num_workers=self.tc.num_workers)

    def run_loop(self, steps: Optional[int] = None) -> List[float]:
        end_step = self.tc.steps if steps is None else min(self.tc.steps, self.step_id + steps)
        tbar = trange(self.step_id, end_step, desc="Training", initial=self.step_id, total=self.tc.steps)
        batches = iter(self.loader(self.trainset, self.step_id, end_step))
        for step in tbar:
            loss = self.train_forward(next(batches), step)
            tbar.set_postfix(loss=f"{loss:.4f}", refresh=False)
            if (step + 1) % self.tc.log_interval == 0:
                logger.info("step %d loss %.6f", step + 1, loss)
            if self.valset.has_val() and (step + 1) % self.tc.val_interval == 0:
                self.val_losses.append((step + 1, self.run_val()))
            if self.run_dir is not None and (step + 1) % self.tc.checkpoint_interval == 0:
                self.set_checkpoint()
        if self.run_dir is not None:
            self.set_checkpoint()
        return self.losses

    def train_forward(self, batch: TrainBatch, step_id: int) -> float:
        loss = train_step(batch, self.unet, self.guider, self.codec, self.optim, self.tc,
                          self.generator, self.scaler, self.device)
        self.losses.append(loss)
        self.step_id = step_id + 1
        return loss

    def run_val(self) -> float:
        n_batches = max(1, len(self.valset) // self.tc.batch_size)
        batches = self.loader(self.valset, 0, n_batches)
        loss = validation_loss(batches, self.unet, self.guider, self.codec, self.tc,
                               seed=self.config.seed + 1, device=self.device)
        logger.info("validation loss at step %d: %.6f", self.step_id, loss)
        return loss

    def set_checkpoint(self, fpath: Optional[str] = None) -> Dict:
        fpath = fpath or path.join(self.run_dir, CHECKPOINT_NAME)
        return save_checkpoint(fpath, self.unet, self.guider, self.codec, self.config, self.optim,
                               self.step_id, self.generator, self.scaler)

"""
Evaluation metrics: PSNR and SSIM on frames, Fréchet distance between
Gaussian fits of embeddings (FID over frames, FVD over clips), and external
command adapters for LPIPS and lip-sync confidence.
"""
import os
import json
import math
import shlex
import logging
import subprocess
from os import path
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import linalg

from lsdiff.errors import MetricError, ShapeMismatch
from lsdiff.environment import EvaluateConfig
from lsdiff.media import CONTAINER_EXTS, SIDECAR_NAME, load_video

logger = logging.getLogger(__name__)

INF = math.inf
INF_SENTINEL = "INF"
EIG_TOLERANCE = 1e-10


############## Frame metrics ##############

def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``INF`` when the inputs are identical."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr of {tuple(a.shape)} and {tuple(b.shape)}")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0:
        return INF
    return 10.0 * math.log10(peak ** 2 / mse)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """
    Mean SSIM over all valid ``window x window`` uniform windows of every channel.
    Inputs are ``[..., H, W]``; local variances use the population normaliser.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim of {tuple(a.shape)} and {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise ShapeMismatch(f"{tuple(a.shape[-2:])} frames are smaller than the {window}px window")
    x = a.double().reshape(-1, 1, *a.shape[-2:])
    y = b.double().reshape(-1, 1, *b.shape[-2:])
    pool = lambda t: F.avg_pool2d(t, window, stride=1)
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx ** 2
    vy = pool(y * y) - my ** 2
    cxy = pool(x * y) - mx * my
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


############## Fréchet distance ##############

@dataclass(frozen=True)
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_embeddings(cls, emb: np.ndarray) -> "FrechetStats":
        """Gaussian fit of ``[N, D]`` embeddings; a single sample gets a zero covariance."""
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[:, None]
        d = emb.shape[1]
        cov = np.cov(emb, rowvar=False).reshape(d, d) if emb.shape[0] > 1 else np.zeros((d, d))
        return cls(emb.mean(axis=0), cov)


def _check_psd(cov: np.ndarray, name: str):
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise MetricError(f"{name} covariance has shape {cov.shape}", code="NON_PSD_COVARIANCE")
    scale = max(1.0, float(np.abs(cov).max()))
    if not np.allclose(cov, cov.T, atol=EIG_TOLERANCE * scale):
        raise MetricError(f"{name} covariance is not symmetric", code="NON_PSD_COVARIANCE")
    lo = float(linalg.eigvalsh(cov).min())
    if lo < -1e-8 * scale:
        raise MetricError(f"{name} covariance has eigenvalue {lo:.3g}", code="NON_PSD_COVARIANCE")


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh((cov + cov.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """
    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``. The trace term uses
    the symmetric form ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)`` with eigenvalues
    clamped at 0.
    """
    mu_a, mu_b = np.atleast_1d(a.mean), np.atleast_1d(b.mean)
    sa, sb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape[0] != mu_a.shape[0]:
        raise ShapeMismatch(f"stats of dimension {mu_a.shape} and {mu_b.shape}")
    _check_psd(sa, "first")
    _check_psd(sb, "second")
    root_a = _psd_sqrt(sa)
    inner = linalg.eigvalsh((root_a @ sb @ root_a + (root_a @ sb @ root_a).T) / 2)
    tr_covmean = float(np.sqrt(np.clip(inner, 0, None)).sum())
    dist = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * tr_covmean)
    return 0.0 if dist < EIG_TOLERANCE * max(1.0, abs(dist)) else dist


############## Embedders and adapters ##############

class MeanPixelEmbedder:
    """Frames embed to their global mean pixel; a clip embeds to the mean of its frames."""

    def frames(self, frames: torch.Tensor) -> np.ndarray:
        return frames.double().flatten(1).mean(dim=1, keepdim=True).numpy()

    def clip(self, frames: torch.Tensor) -> np.ndarray:
        return np.array([float(frames.double().mean())])


class CommandAdapter:
    """
    Runs ``<command> <generated> <reference>`` and reads a float from the last
    line of its stdout. Used for LPIPS and lip-sync confidence scripts.
    """

    def __init__(self, command: str, name: str = "external", timeout: Optional[float] = None):
        self.argv = shlex.split(command)
        self.name = name
        self.timeout = timeout

    def __call__(self, generated: str, reference: str) -> float:
        proc = subprocess.run(self.argv + [generated, reference], capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise MetricError(f"{self.name} command exited with {proc.returncode}: {proc.stderr.strip()}",
                              code="ADAPTER_FAILED")
        lines = proc.stdout.strip().splitlines()
        try:
            return float(lines[-1])
        except (IndexError, ValueError) as e:
            raise MetricError(f"{self.name} command printed no score", code="ADAPTER_FAILED") from e


############## Report ##############

def _encode(v):
    if isinstance(v, float) and math.isinf(v):
        return INF_SENTINEL
    return v


@dataclass
class MetricReport:
    pairs: List[Dict] = field(default_factory=list)
    aggregate: Dict[str, float] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"pairs": [{k: _encode(v) for k, v in p.items()} for p in self.pairs],
                "aggregate": {k: _encode(v) for k, v in self.aggregate.items()},
                "config": self.config}

    def to_json(self, fpath: str) -> str:
        os.makedirs(path.dirname(path.abspath(fpath)), exist_ok=True)
        with open(fpath, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return fpath

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.to_dict()["pairs"])

    def to_csv(self, fpath: str) -> str:
        self.to_frame().to_csv(fpath, index=False)
        return fpath

    @classmethod
    def from_json(cls, fpath: str) -> "MetricReport":
        with open(fpath, "r") as f:
            d = json.load(f)
        decode = lambda v: INF if v == INF_SENTINEL else v
        return cls([{k: decode(v) for k, v in p.items()} for p in d["pairs"]],
                   {k: decode(v) for k, v in d["aggregate"].items()}, d.get("config", {}))


def _clip_names(dirpath: str) -> Dict[str, str]:
    out = {}
    for name in sorted(os.listdir(dirpath)):
        p = path.join(dirpath, name)
        if path.isdir(p) and path.isfile(path.join(p, SIDECAR_NAME)):
            out[name] = p
        elif path.isfile(p) and name.lower().endswith(CONTAINER_EXTS):
            out[path.splitext(name)[0]] = p
    return out


def _mean(values: Sequence[float]) -> float:
    return INF if any(math.isinf(v) for v in values) else float(np.mean(values))


def evaluate_pairs(generated_dir: str,
                   reference_dir: str,
                   embedder=None,
                   config: EvaluateConfig = EvaluateConfig(),
                   lpips: Optional[Callable[[str, str], float]] = None,
                   sync: Optional[Callable[[str, str], float]] = None) -> MetricReport:
    """
    Pair clips by name across the two directories, score each pair with SSIM
    and PSNR (plus the optional adapters), then compare the embedding
    distributions: FID over all frames, FVD over whole clips.
    """
    embedder = embedder if embedder is not None else MeanPixelEmbedder()
    gen, ref = _clip_names(generated_dir), _clip_names(reference_dir)
    for name in sorted(set(gen) ^ set(ref)):
        side = generated_dir if name not in gen else reference_dir
        raise MetricError(f"{name} has no counterpart in {side}")
    if lpips is None and config.lpips_command:
        lpips = CommandAdapter(config.lpips_command, "lpips")
    if sync is None and config.sync_command:
        sync = CommandAdapter(config.sync_command, "sync_c")

    pairs, gen_frames, ref_frames, gen_clips, ref_clips = [], [], [], [], []
    for name in sorted(gen):
        g, r = load_video(gen[name]), load_video(ref[name])
        if g.frames.shape != r.frames.shape:
            raise ShapeMismatch(f"{name}: generated {tuple(g.frames.shape)} vs reference {tuple(r.frames.shape)}")
        row = {"name": name,
               "ssim": float(np.mean([ssim(a, b, config.ssim_window, config.k1, config.k2, config.peak)
                                      for a, b in zip(g.frames, r.frames)])),
               "psnr": psnr(g.frames, r.frames, config.peak)}
        if lpips is not None:
            row["lpips"] = lpips(gen[name], ref[name])
        if sync is not None:
            row["sync_c"] = sync(gen[name], ref[name])
        pairs.append(row)
        logger.info("%s: ssim %.4f psnr %s", name, row["ssim"], row["psnr"])
        gen_frames.append(embedder.frames(g.frames))
        ref_frames.append(embedder.frames(r.frames))
        gen_clips.append(embedder.clip(g.frames))
        ref_clips.append(embedder.clip(r.frames))

    aggregate = {}
    if pairs:
        aggregate["ssim"] = float(np.mean([p["ssim"] for p in pairs]))
        aggregate["psnr"] = _mean([p["psnr"] for p in pairs])
        for key in ("lpips", "sync_c"):
            if key in pairs[0]:
                aggregate[key] = float(np.mean([p[key] for p in pairs]))
        aggregate["fid"] = frechet_distance(FrechetStats.from_embeddings(np.concatenate(gen_frames)),
                                            FrechetStats.from_embeddings(np.concatenate(ref_frames)))
        aggregate["fvd"] = frechet_distance(FrechetStats.from_embeddings(np.stack(gen_clips)),
                                            FrechetStats.from_embeddings(np.stack(ref_clips)))
    cfg = {"generated_dir": generated_dir, "reference_dir": reference_dir,
           "embedder": type(embedder).__name__, "ssim_window": config.ssim_window,
           "k1": config.k1, "k2": config.k2, "peak": config.peak}
    return MetricReport(pairs, aggregate, cfg)

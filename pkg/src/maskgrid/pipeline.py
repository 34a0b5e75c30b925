"""End-to-end orchestration: stage training, persistence, inference, eval.

Each training stage writes its own checkpoint file, so later stages can
never mutate earlier ones. Every command records a manifest (config
hash, seeds, checkpoint hashes) sufficient to reproduce its outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .config import PipelineConfig
from .data import generate_images
from .decoder import ComposerNet, decode, train_decoder, visible_mse, masked_mse
from .encoder import RestrictiveEncoder, encode_partial, train_encoder, visible_grid
from .masks import MaskGrid, build_pyramid, generate_mask
from .sampler import SampleSchedule, sample_all
from .serialize import CheckpointError, read_checkpoint, write_checkpoint
from .transformer import BidirectionalTransformer, train_transformer
from .vq import VQArtifacts, Codebook, TokenGrid, VQEncoder, lookup, train_vq
from .blocks import ImageGenerator

log = logging.getLogger(__name__)


class CheckpointMismatchError(Exception):
    """A checkpoint is missing or its extents disagree with the config."""


@dataclass
class PipelineArtifacts:
    cfg: PipelineConfig
    vq: VQArtifacts
    encoder: RestrictiveEncoder
    transformer: BidirectionalTransformer
    composer: ComposerNet


# -- persistence ---------------------------------------------------------------


def checkpoint_paths(cfg: PipelineConfig) -> dict[str, Path]:
    wd = Path(cfg.workdir)
    return {
        "vq": wd / "vq.mgrd",
        "encoder": wd / "encoder.mgrd",
        "transformer": wd / "transformer.mgrd",
        "decoder": wd / "decoder.mgrd",
    }


def save_vq(cfg: PipelineConfig, vq: VQArtifacts) -> Path:
    path = checkpoint_paths(cfg)["vq"]
    path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(path, vq.state_entries())
    return path


def save_encoder(cfg: PipelineConfig, encoder: RestrictiveEncoder) -> Path:
    path = checkpoint_paths(cfg)["encoder"]
    path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(
        path, {f"encoder/{k}": v for k, v in encoder.state_dict().items()}
    )
    return path


def save_transformer(cfg: PipelineConfig, model: BidirectionalTransformer) -> Path:
    path = checkpoint_paths(cfg)["transformer"]
    path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(
        path, {f"transformer/{k}": v for k, v in model.state_dict().items()}
    )
    return path


def save_decoder(cfg: PipelineConfig, nets: ComposerNet) -> Path:
    path = checkpoint_paths(cfg)["decoder"]
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, np.ndarray] = {}
    for key, value in nets.state_dict().items():
        if key.startswith("disc."):
            entries[f"disc/{key[len('disc.'):]}"] = value
        else:
            entries[f"decoder/{key}"] = value
    write_checkpoint(path, entries)
    return path


def _strip(entries: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in entries.items() if k.startswith(prefix)}


def _load_into(module, state: dict[str, np.ndarray], what: str) -> None:
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointMismatchError(f"{what}: {e}") from None


def load_vq(cfg: PipelineConfig) -> VQArtifacts:
    """Rebuild just the VQ stage from its checkpoint."""
    path = checkpoint_paths(cfg)["vq"]
    if not path.exists():
        raise CheckpointMismatchError(f"missing checkpoint files: ['{path}']")
    rng = np.random.default_rng(0)
    vq = VQArtifacts(
        VQEncoder(cfg.latent_channels, rng),
        ImageGenerator(cfg.latent_channels, rng),
        Codebook.initialized(cfg.codebook_size, cfg.latent_channels, rng),
    )
    try:
        vq.load_state_entries(read_checkpoint(path))
    except CheckpointError as e:
        raise CheckpointMismatchError(str(e)) from None
    except (KeyError, ValueError) as e:
        raise CheckpointMismatchError(f"vq: {e}") from None
    return vq


def load_artifacts(cfg: PipelineConfig) -> PipelineArtifacts:
    """Rebuild all stage models from the workdir checkpoints."""
    paths = checkpoint_paths(cfg)
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise CheckpointMismatchError(f"missing checkpoint files: {missing}")
    rng = np.random.default_rng(0)
    try:
        enc_entries = read_checkpoint(paths["encoder"])
        tf_entries = read_checkpoint(paths["transformer"])
        dec_entries = read_checkpoint(paths["decoder"])
    except CheckpointError as e:
        raise CheckpointMismatchError(str(e)) from None

    vq = load_vq(cfg)

    encoder = RestrictiveEncoder(
        cfg.codebook_size, cfg.alpha, rng, channels=tuple(cfg.encoder_channels)
    )
    _load_into(encoder, _strip(enc_entries, "encoder/"), "encoder")

    transformer = BidirectionalTransformer(
        cfg.codebook_size, cfg.grid_len, cfg.tf_dim, cfg.tf_layers, cfg.tf_heads, rng
    )
    _load_into(transformer, _strip(tf_entries, "transformer/"), "transformer")

    composer = ComposerNet(
        cfg.latent_channels, cfg.alpha, cfg.stages, rng, image_size=cfg.image_size
    )
    state = {f"disc.{k}": v for k, v in _strip(dec_entries, "disc/").items()}
    state.update(_strip(dec_entries, "decoder/"))
    _load_into(composer, state, "decoder")

    return PipelineArtifacts(cfg, vq, encoder, transformer, composer)


# -- stage training -------------------------------------------------------------


def training_images(cfg: PipelineConfig, data_dir: str | None = None) -> np.ndarray:
    if data_dir:
        from .data import load_dataset

        return load_dataset(data_dir)
    images, _ = generate_images(
        cfg.dataset_kind, cfg.dataset_count, cfg.image_size, cfg.seed_dataset
    )
    return images


def default_mask_fn(cfg: PipelineConfig):
    """Free-form training masks: an even mix of small and large random."""

    def fn(seed: int) -> MaskGrid:
        kind = "small-random" if seed % 2 == 0 else "large-random"
        return generate_mask(kind, (cfg.image_size, cfg.image_size), seed)

    return fn


def run_train_vq(cfg: PipelineConfig, images: np.ndarray) -> tuple[VQArtifacts, dict]:
    vq, report = train_vq(
        images,
        K=cfg.codebook_size,
        n_z=cfg.latent_channels,
        steps=cfg.vq_steps,
        batch_size=cfg.vq_batch,
        lr=cfg.vq_lr,
        seed=cfg.seed_vq,
    )
    save_vq(cfg, vq)
    return vq, report


def run_train_encoder(
    cfg: PipelineConfig, images: np.ndarray, vq: VQArtifacts
) -> tuple[RestrictiveEncoder, dict]:
    enc, report = train_encoder(
        images,
        vq,
        default_mask_fn(cfg),
        steps=cfg.encoder_steps,
        batch_size=cfg.encoder_batch,
        lr=cfg.encoder_lr,
        seed=cfg.seed_encoder,
        alpha=cfg.alpha,
        channels=tuple(cfg.encoder_channels),
    )
    save_encoder(cfg, enc)
    return enc, report


def run_train_transformer(
    cfg: PipelineConfig, images: np.ndarray, vq: VQArtifacts
) -> tuple[BidirectionalTransformer, dict]:
    model, report = train_transformer(
        images,
        vq,
        grid_len=cfg.grid_len,
        steps=cfg.tf_steps,
        batch_size=cfg.tf_batch,
        lr=cfg.tf_lr,
        seed=cfg.seed_transformer,
        dim=cfg.tf_dim,
        layers=cfg.tf_layers,
        heads=cfg.tf_heads,
    )
    save_transformer(cfg, model)
    return model, report


def run_train_decoder(
    cfg: PipelineConfig, images: np.ndarray, vq: VQArtifacts
) -> tuple[ComposerNet, dict]:
    nets, report = train_decoder(
        images,
        vq,
        default_mask_fn(cfg),
        steps=cfg.decoder_steps,
        batch_size=cfg.decoder_batch,
        lr=cfg.decoder_lr,
        seed=cfg.seed_decoder,
        alpha=cfg.alpha,
        stages=cfg.stages,
        r1_weight=cfg.r1_weight,
        perceptual_weight=cfg.perceptual_weight,
    )
    save_decoder(cfg, nets)
    return nets, report


# -- inference -------------------------------------------------------------------


def inpaint_image(
    arts: PipelineArtifacts,
    image: np.ndarray,
    mask: MaskGrid,
    n_samples: int,
    seed: int,
    steps: int | None = None,
    temperature: float | None = None,
    anneal: float | None = None,
) -> list[tuple[np.ndarray, TokenGrid]]:
    """Draw `n_samples` completions of one (3, H, W) image.

    Visible token cells take the encoder's argmax labels; the remaining
    cells are filled by the iterative sampler (skipped when the token
    mask is already complete), then everything is decoded against the
    partial-image features.
    """
    cfg = arts.cfg
    steps = cfg.sampler_steps if steps is None else steps
    temperature = cfg.temperature if temperature is None else temperature
    anneal = cfg.anneal if anneal is None else anneal
    image = np.asarray(image, dtype=np.float32)
    masked = image * mask.values[None]
    logits, pyramid = encode_partial(arts.encoder, masked, mask)
    base_grid = visible_grid(logits, pyramid.token_mask, arts.vq.codebook.mask_label)
    missing = base_grid.missing_count()
    results = []
    for s in range(n_samples):
        grid = base_grid.copy()
        if missing:
            schedule = SampleSchedule.build(missing, steps, temperature, anneal)
            sample_seq = np.random.SeedSequence(entropy=seed, spawn_key=(s,))
            grid = sample_all(grid, arts.transformer, schedule, sample_seq)
        z = lookup(grid, arts.vq.codebook)
        out = decode(masked, mask, z, arts.composer)
        results.append((out.data, grid))
    return results


def evaluate(
    arts: PipelineArtifacts,
    images: np.ndarray,
    mask_setting: str,
    n_samples: int,
    seed: int,
    steps: int | None = None,
    temperature: float | None = None,
    anneal: float | None = None,
) -> metrics.EvalReport:
    """Deterministic quality/diversity report over an eval corpus."""
    if n_samples < 2:
        raise ValueError(f"evaluate needs n_samples >= 2, got {n_samples}")
    cfg = arts.cfg
    shape = (cfg.image_size, cfg.image_size)
    mse_vis: list[float] = []
    mse_mask: list[float] = []
    diversities: list[float] = []
    firsts = []
    manifest = []
    for i, image in enumerate(images):
        mask_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i, 0)).generate_state(1)[0])
        mask = generate_mask(mask_setting, shape, mask_seed)
        sample_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i, 1)).generate_state(1)[0])
        samples = inpaint_image(
            arts, image, mask, n_samples, sample_seed, steps, temperature, anneal
        )
        outs = np.stack([s[0] for s in samples])
        firsts.append(outs[0])
        mse_vis.append(visible_mse(outs, image[None], mask))
        mse_mask.append(masked_mse(outs, image[None], mask))
        missing_cells = build_pyramid(mask, cfg.alpha, cfg.stages).token_mask.values == 0
        diversities.append(metrics.sample_diversity(arts.vq, outs, missing_cells))
        manifest.append(
            {"image": i, "mask_seed": mask_seed, "sample_seed": sample_seed}
        )
    return metrics.EvalReport(
        setting=mask_setting,
        n_images=len(images),
        n_samples=n_samples,
        seed=seed,
        mse_visible=float(np.mean(mse_vis)),
        mse_masked=float(np.mean(mse_mask)),
        fid_proxy=metrics.fid_proxy(arts.vq, images, np.stack(firsts)),
        diversity_mean=float(np.mean(diversities)),
        diversity_std=float(np.std(diversities)),
        manifest=manifest,
    )


def run_ablation(
    axis: str,
    values: list[float],
    cfg: PipelineConfig,
    images: np.ndarray,
    vq: VQArtifacts,
    arts: PipelineArtifacts | None = None,
) -> dict:
    """Sweep one knob, holding the rest of the config fixed.

    alpha retrains the encoder per value and compares final losses;
    temperature and anneal re-evaluate diversity on the trained pipeline.
    """
    if axis == "alpha":
        rows = {}
        for v in values:
            enc, report = train_encoder(
                images,
                vq,
                default_mask_fn(cfg),
                steps=cfg.encoder_steps,
                batch_size=cfg.encoder_batch,
                lr=cfg.encoder_lr,
                seed=cfg.seed_encoder,
                alpha=float(v),
                channels=tuple(cfg.encoder_channels),
            )
            tail = report["loss_history"][-max(1, cfg.encoder_steps // 10) :]
            rows[float(v)] = {"final_loss": float(np.mean(tail))}
        return {"axis": axis, "rows": rows}
    if axis in ("temperature", "anneal"):
        if arts is None:
            raise ValueError(f"{axis} ablation requires trained pipeline artifacts")
        eval_images = images[: cfg.eval_images]
        rows = {}
        for v in values:
            kwargs = {"temperature": float(v)} if axis == "temperature" else {"anneal": float(v)}
            report = evaluate(
                arts, eval_images, "box80", cfg.eval_samples, cfg.seed_eval, **kwargs
            )
            rows[float(v)] = {
                "diversity_mean": report.diversity_mean,
                "diversity_std": report.diversity_std,
                "fid_proxy": report.fid_proxy,
            }
        return {"axis": axis, "rows": rows}
    raise ValueError(f"unknown ablation axis {axis!r}, expected alpha|temperature|anneal")


# -- manifests --------------------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(
    out_dir: str | Path,
    command: str,
    cfg: PipelineConfig,
    seeds: dict[str, int],
    outputs: list[str] | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = {
        name: file_sha256(path)
        for name, path in checkpoint_paths(cfg).items()
        if path.exists()
    }
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seeds": seeds,
        "checkpoints": checkpoints,
        "outputs": outputs or [],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path

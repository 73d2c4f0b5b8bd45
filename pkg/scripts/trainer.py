"""
Few-shot training of the prompt bank and adapters.

An episode is a batch of (X̂, Y) pairs drawn from the k-shot support set: each element
picks a support image, and with probability p_empty keeps it as a pure normal sample,
otherwise synthesizes an anomaly with a randomly drawn task. Only the prompt vectors and
the adapters are updated (Adam); the dual encoder stays frozen.

Checkpoints are a magic line, a little-endian uint32 header length, a JSON header and a
raw little-endian float32 blob holding every trainable tensor.
"""

import copy
import json
import struct
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from loguru import logger

from scripts.encoders import DualEncoder, EncoderConfig, init_frozen
from scripts.errors import (
    CheckpointFormatError,
    CheckpointIncompatibleError,
    NonFiniteLossError,
    PlacementError,
    RejectedInputError,
)
from scripts.mask_gen import AnomalyMask
from scripts.objective import total_loss
from scripts.phantom_data import DatasetManifest, Image, load_support
from scripts.prompt_adapter import PromptAdapterModel
from scripts.seeding import derive_seed, make_rng
from scripts.synthesis import SynthesisConfig, SynthesisTask, sample_mask_for_task, sample_task, synthesize

LOSS_COLUMNS = ["step", "focal", "dice", "total"]
CHECKPOINT_MAGIC = b"MEDIPROBE-CKPT\n"
CHECKPOINT_VERSION = 1
GRADCHECK_ZERO = 1e-10
GRADCHECK_FLOOR = 1e-8

Episode = List[Tuple[Image, AnomalyMask]]


@dataclass
class SupportSet:
    """The k normal images of one task."""

    images: List[Image]

    def __post_init__(self):
        if not self.images:
            raise RejectedInputError("support set needs at least one image")
        shapes = {np.shape(image) for image in self.images}
        if len(shapes) != 1:
            raise RejectedInputError(f"support images differ in shape: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise RejectedInputError(f"support images must be square 2-D arrays, got {shape}")

    @property
    def k(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return int(np.shape(self.images[0])[0])

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "SupportSet":
        return cls(images=load_support(manifest))


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    p_empty: float = 0.2
    seed: int = 0
    log_every: int = 50
    threads: int = 1
    # redraws of mask + synthesis when CutPaste cannot place its patch
    max_retries: int = 8

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> None:
        if self.steps < 0:
            raise RejectedInputError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise RejectedInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise RejectedInputError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.p_empty <= 1.0:
            raise RejectedInputError(f"p_empty must lie in [0, 1], got {self.p_empty}")
        if self.threads < 1:
            raise RejectedInputError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


@dataclass(frozen=True)
class EpisodePlan:
    """Everything one batch element draws from the episode stream, fixed before synthesis."""

    image_index: int
    task: Optional[SynthesisTask]
    seed: int

    @property
    def empty(self) -> bool:
        return self.task is None


def plan_episode(
    support_size: int,
    rng: np.random.Generator,
    batch_size: int,
    p_empty: float,
    synthesis_config: Optional[SynthesisConfig] = None,
) -> List[EpisodePlan]:
    synthesis_config = synthesis_config or SynthesisConfig()
    plans = []
    for _ in range(batch_size):
        index = int(rng.integers(support_size))
        empty = rng.random() < p_empty
        task = None if empty else sample_task(rng, synthesis_config.tasks, synthesis_config.weights())
        plans.append(EpisodePlan(image_index=index, task=task, seed=int(rng.integers(2**63 - 1))))
    return plans


def resize_pair(X: Image, Y: AnomalyMask, size: int) -> Tuple[Image, AnomalyMask]:
    """Bilinear resize of the image and nearest-neighbour resize of the mask to size×size."""
    if X.shape == (size, size):
        return X, Y
    image = torch.as_tensor(np.asarray(X, dtype=np.float64))[None, None]
    image = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()
    mask = torch.as_tensor(Y.values.astype(np.float64))[None, None]
    mask = F.interpolate(mask, size=(size, size), mode="nearest")[0, 0].numpy()
    return np.clip(image, 0.0, 1.0), AnomalyMask.from_array(mask > 0.5)


def realize_element(
    X: Image, plan: EpisodePlan, size: int, synthesis_config: SynthesisConfig, max_retries: int
) -> Tuple[Image, AnomalyMask]:
    """Turn one plan into (X̂, Y), redrawing the mask when a placement fails."""
    if plan.empty:
        return resize_pair(np.asarray(X, dtype=np.float64), AnomalyMask.empty(X.shape), size)
    for attempt in range(max_retries):
        stream = derive_seed(plan.seed, attempt)
        Y = sample_mask_for_task(plan.task, derive_seed(stream, "mask"), X.shape[0], synthesis_config)
        try:
            X_hat = synthesize(X, Y, plan.task, derive_seed(stream, "apply"), synthesis_config)
        except PlacementError as e:
            logger.debug(f"Episode element redraw {attempt + 1}/{max_retries}: {e}")
            continue
        return resize_pair(X_hat, Y, size)
    raise PlacementError(f"{plan.task.value}: no valid synthesis after {max_retries} mask draws")


def sample_episode(
    support: SupportSet,
    rng: np.random.Generator,
    config: TrainConfig,
    image_size: int,
    synthesis_config: Optional[SynthesisConfig] = None,
    executor: Optional[Executor] = None,
) -> Episode:
    """
    Draw one batch of (X̂, Y) pairs.

    Every element gets its own seed from `rng` before any synthesis runs, so the result
    is the same whether elements are synthesized serially or in a thread pool.
    """
    synthesis_config = synthesis_config or SynthesisConfig()
    plans = plan_episode(support.k, rng, config.batch_size, config.p_empty, synthesis_config)

    def run(plan: EpisodePlan) -> Tuple[Image, AnomalyMask]:
        return realize_element(
            support.images[plan.image_index], plan, image_size, synthesis_config, config.max_retries
        )

    if executor is None:
        return [run(plan) for plan in plans]
    return list(executor.map(run, plans))


def episode_tensors(batch: Episode, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    images = torch.as_tensor(np.stack([x for x, _ in batch]), dtype=dtype)
    masks = torch.as_tensor(np.stack([y.values for _, y in batch]).astype(np.float64), dtype=dtype)
    return images, masks


def train(
    support: SupportSet,
    model: PromptAdapterModel,
    config: TrainConfig,
    synthesis_config: Optional[SynthesisConfig] = None,
) -> Tuple[PromptAdapterModel, pd.DataFrame]:
    """
    Optimize the prompt vectors and adapters of `model` in place.

    Returns:
        (model, loss history with columns step, focal, dice, total)

    Raises:
        NonFiniteLossError: If a step produces NaN or inf; carries the step index
    """
    config.validate()
    synthesis_config = synthesis_config or SynthesisConfig()
    torch.set_num_threads(config.threads)

    frozen_digest = model.encoders.digest()
    parameters = list(model.trainable_parameters().values())
    optimizer = None
    if parameters:
        optimizer = torch.optim.Adam(parameters, lr=config.learning_rate, betas=config.betas, weight_decay=0.0)
    else:
        logger.warning("Model has no trainable parameters; training only records the loss")

    logger.info(
        f"Training {sum(p.numel() for p in parameters)} parameters for {config.steps} steps "
        f"(batch {config.batch_size}, k={support.k}, seed={config.seed})"
    )
    rng = make_rng(config.seed, "episodes")
    history = []
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for step in range(1, config.steps + 1):
            batch = sample_episode(support, rng, config, model.image_size, synthesis_config, pool)
            images, masks = episode_tensors(batch, model.encoders.dtype)
            maps = model(images)
            loss = total_loss(maps.normal, maps.anomaly, masks)
            if not torch.isfinite(loss.total):
                logger.error(f"Non-finite loss at step {step}: {loss.as_floats()}")
                raise NonFiniteLossError(step)
            if optimizer is not None:
                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()
            history.append({"step": step, **loss.as_floats()})
            if step % config.log_every == 0 or step == config.steps:
                window = pd.DataFrame(history[-config.log_every:])
                logger.info(
                    f"Step {step}/{config.steps}: focal={window.focal.mean():.4f} "
                    f"dice={window.dice.mean():.4f} total={window.total.mean():.4f}"
                )

    if model.encoders.digest() != frozen_digest:
        raise RuntimeError("frozen encoder weights changed during training")
    return model, pd.DataFrame(history, columns=LOSS_COLUMNS)


def write_loss_history(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, columns=LOSS_COLUMNS)
    logger.info(f"Loss history ({len(history)} steps) written to {path}")
    return path


def analytic_gradients(
    model: PromptAdapterModel, images: torch.Tensor, masks: torch.Tensor
) -> Dict[str, torch.Tensor]:
    """Autograd gradients of the total loss for every trainable tensor."""
    parameters = model.trainable_parameters()
    maps = model(images)
    loss = total_loss(maps.normal, maps.anomaly, masks).total
    grads = torch.autograd.grad(loss, list(parameters.values()))
    return {name: g.detach() for name, g in zip(parameters, grads)}


def _relative_error(a: float, b: float) -> float:
    if abs(a) < GRADCHECK_ZERO and abs(b) < GRADCHECK_ZERO:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), GRADCHECK_FLOOR)


def grad_check(
    model: PromptAdapterModel,
    batch: Episode,
    h: float = 1e-5,
    coords: int = 64,
    seed: int = 0,
) -> float:
    """
    Compare autograd gradients with central differences on sampled coordinates.

    Runs on a float64 copy of the model. Coordinates are drawn without replacement from
    all entries of the prompt vectors and adapter weights.

    Returns:
        Max relative error, with |a - b| / max(|a|, |b|, 1e-8)
    """
    model64 = copy.deepcopy(model).double()
    images, masks = episode_tensors(batch, torch.float64)
    parameters = {name: p for name, p in model64.trainable_parameters().items() if not name.endswith("bias")}
    if not parameters:
        logger.warning("Nothing to check: model has no trainable weights")
        return 0.0

    analytic = analytic_gradients(model64, images, masks)
    index = [(name, i) for name, p in parameters.items() for i in range(p.numel())]
    rng = make_rng(seed, "gradcheck")
    chosen = rng.choice(len(index), size=min(coords, len(index)), replace=False)
    logger.info(f"Checking {len(chosen)} of {len(index)} coordinates with h={h}")

    def loss_value() -> float:
        with torch.no_grad():
            maps = model64(images)
            return float(total_loss(maps.normal, maps.anomaly, masks).total)

    worst = 0.0
    for k in sorted(int(c) for c in chosen):
        name, i = index[k]
        flat = parameters[name].data.view(-1)
        original = float(flat[i])
        flat[i] = original + h
        plus = loss_value()
        flat[i] = original - h
        minus = loss_value()
        flat[i] = original
        numeric = (plus - minus) / (2.0 * h)
        error = _relative_error(float(analytic[name].view(-1)[i]), numeric)
        if error > worst:
            logger.debug(f"{name}[{i}]: analytic={float(analytic[name].view(-1)[i]):.6e} numeric={numeric:.6e}")
        worst = max(worst, error)
    logger.info(f"Gradient check max relative error: {worst:.3e}")
    return worst


@dataclass
class Checkpoint:
    """Parsed checkpoint file: JSON header plus the float32 tensors it declares."""

    header: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(repr=False)

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.header.get("metadata", {})

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.header["encoder"])


def save_checkpoint(
    model: PromptAdapterModel, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in sorted(model.trainable_parameters().items()):
        data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    header = {
        "version": CHECKPOINT_VERSION,
        "encoder": model.encoders.config.to_dict(),
        "encoder_seed": model.encoders.seed,
        "encoder_digest": model.encoders.digest(),
        "model": model.settings(),
        "tensors": entries,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(chunks))
    logger.info(f"Checkpoint with {len(entries)} tensors written to {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Parse and validate a checkpoint file without building a model.

    Raises:
        CheckpointFormatError: Bad magic, truncated file or malformed header
        CheckpointIncompatibleError: Unknown format version
    """
    path = Path(path)
    data = path.read_bytes()
    start = len(CHECKPOINT_MAGIC) + 4
    if not data.startswith(CHECKPOINT_MAGIC) or len(data) < start:
        raise CheckpointFormatError(f"{path} is not a checkpoint file")
    (header_length,) = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))
    if len(data) < start + header_length:
        raise CheckpointFormatError(f"{path}: header truncated")
    try:
        header = json.loads(data[start:start + header_length].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: malformed header ({e})") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointIncompatibleError(f"{path}: format version {header.get('version')} is not supported")

    blob = data[start + header_length:]
    try:
        expected = sum(int(entry["nbytes"]) for entry in entries)
        if len(blob) != expected:
            raise CheckpointFormatError(f"{path}: tensor blob holds {len(blob)} bytes, header declares {expected}")
        tensors = {}
        for entry in entries:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            if count * 4 != entry["nbytes"]:
                raise CheckpointFormatError(f"{path}: tensor {entry['name']} size does not match its shape")
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
            tensors[entry["name"]] = values.reshape(entry["shape"]).astype(np.float32)
    except CheckpointFormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: malformed tensor table ({e})") from e
    return Checkpoint(header=header, tensors=tensors)


def load_checkpoint(
    path: Union[str, Path], encoders: Optional[DualEncoder] = None
) -> Tuple[PromptAdapterModel, Dict[str, Any]]:
    """
    Rebuild a model from a checkpoint.

    Without `encoders` the frozen encoder is recreated from the stored config and seed.
    The file is fully parsed and checked before any model is built.

    Raises:
        CheckpointFormatError: Truncated or malformed file
        CheckpointIncompatibleError: Encoder digest or tensor layout mismatch
    """
    checkpoint = read_checkpoint(path)
    header = checkpoint.header
    if encoders is None:
        encoders = init_frozen(checkpoint.encoder_config, int(header["encoder_seed"]))
    if encoders.config != checkpoint.encoder_config or encoders.digest() != header["encoder_digest"]:
        logger.error(f"Encoder mismatch loading {path}: checkpoint digest {header['encoder_digest'][:12]}")
        raise CheckpointIncompatibleError(f"{path} was trained with a different frozen encoder")

    model = PromptAdapterModel(encoders, **header["model"])
    expected = {name: tuple(p.shape) for name, p in model.trainable_parameters().items()}
    stored = {name: tuple(values.shape) for name, values in checkpoint.tensors.items()}
    if expected != stored:
        raise CheckpointIncompatibleError(f"{path}: tensor layout {stored} does not match model {expected}")
    parameters = model.trainable_parameters()
    with torch.no_grad():
        for name, values in checkpoint.tensors.items():
            parameters[name].copy_(torch.from_numpy(values))
    logger.info(f"Loaded checkpoint {path} ({len(stored)} tensors)")
    return model, checkpoint.metadata


def resolve_tasks(names: Union[str, Sequence[str]]) -> Tuple[SynthesisTask, ...]:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n.strip()]
    return tuple(SynthesisTask(n.strip()) for n in names)

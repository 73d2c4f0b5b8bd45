"""
Learnable prompts, per-layer adapters and the similarity maps built from them.

Every prompt is `[V1]...[VM][CLS]`: M shared learnable vectors followed by the frozen
word embeddings of one class phrase. The encoded prompts of each set are averaged into
f_n (normal) and f_a (anomaly). Vision features of each tapped layer are projected by an
adapter into the same space, compared with f_n / f_a by cosine similarity, turned into a
two-way softmax with temperature tau, upsampled to the image size and averaged.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from scripts.encoders import (
    ANOMALY_CLASS_TOKENS,
    HARD_PROMPT_TEMPLATE,
    NORMAL_CLASS_TOKENS,
    DualEncoder,
)
from scripts.errors import LengthError, RejectedInputError, ShapeError
from scripts.seeding import derive_seed

DEFAULT_PROMPT_LENGTH = 8
DEFAULT_TAU = 0.07
NORM_FLOOR = 1e-12
PROMPT_INIT_SCALE = 0.02


class PromptMode(str, Enum):
    LEARNABLE = "learnable"
    HARD = "hard"


class AdapterMode(str, Enum):
    LINEAR = "linear"
    AVGPOOL = "avgpool"


@dataclass
class SimilarityMaps:
    """Per-layer (S_n_j, S_a_j) pairs and their aggregate (S_n, S_a) at image resolution."""

    per_layer: List[Tuple[torch.Tensor, torch.Tensor]]
    normal: torch.Tensor
    anomaly: torch.Tensor
    tau: float


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


class PromptBank(nn.Module):
    """
    Prompt sets for the normal (I phrases) and anomaly (E phrases) classes.

    In `learnable` mode the prefix is the trainable tensor `ctx` (M × text_dim); in
    `hard` mode it is the frozen embedding of the hand-written template "a photo of the".
    """

    def __init__(
        self,
        encoders: DualEncoder,
        prompt_length: int = DEFAULT_PROMPT_LENGTH,
        mode: Union[PromptMode, str] = PromptMode.LEARNABLE,
        seed: int = 0,
        normal_tokens: Sequence[str] = NORMAL_CLASS_TOKENS,
        anomaly_tokens: Sequence[str] = ANOMALY_CLASS_TOKENS,
    ):
        super().__init__()
        self.mode = PromptMode(mode)
        if not normal_tokens or not anomaly_tokens:
            raise RejectedInputError("both prompt sets need at least one class phrase")
        vocabulary = encoders.vocabulary
        self.normal_tokens = tuple(normal_tokens)
        self.anomaly_tokens = tuple(anomaly_tokens)
        self.normal_ids = [vocabulary.encode(p) for p in self.normal_tokens]
        self.anomaly_ids = [vocabulary.encode(p) for p in self.anomaly_tokens]

        if self.mode == PromptMode.LEARNABLE:
            if prompt_length < 1:
                raise RejectedInputError(f"prompt_length must be >= 1, got {prompt_length}")
            init = torch.randn(prompt_length, encoders.config.text_dim, generator=_generator(seed))
            self.ctx = nn.Parameter(init * PROMPT_INIT_SCALE)
            self.template_ids: List[int] = []
            prefix_length = prompt_length
        else:
            self.ctx = None
            self.template_ids = vocabulary.encode(HARD_PROMPT_TEMPLATE)
            prefix_length = len(self.template_ids)

        context = encoders.config.context_length
        for phrase, ids in zip(self.normal_tokens + self.anomaly_tokens, self.normal_ids + self.anomaly_ids):
            if prefix_length + len(ids) + 2 > context:
                logger.error(f"Prompt for '{phrase}' needs {prefix_length + len(ids) + 2} of {context} positions")
                raise LengthError(f"class phrase '{phrase}' does not fit the context after {prefix_length} prefix tokens")

    @property
    def prompt_length(self) -> int:
        return self.ctx.shape[0] if self.ctx is not None else len(self.template_ids)

    def prefix(self, encoders: DualEncoder) -> torch.Tensor:
        if self.ctx is not None:
            return self.ctx.to(encoders.dtype)
        return encoders.word_embeddings(self.template_ids)

    def build_prompt_sequences(self, encoders: DualEncoder) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        """
        Embedding sequences `[V1..VM]` + class-word embeddings for both prompt sets.

        Returns:
            (normal sequences, anomaly sequences), each entry of shape (M + len(class), text_dim)
        """
        prefix = self.prefix(encoders)

        def assemble(ids: List[int]) -> torch.Tensor:
            return torch.cat([prefix, encoders.word_embeddings(ids)], dim=0)

        return [assemble(ids) for ids in self.normal_ids], [assemble(ids) for ids in self.anomaly_ids]

    def mean_text_features(self, encoders: DualEncoder) -> Tuple[torch.Tensor, torch.Tensor]:
        """f_n = mean_i F(p_n_i), f_a = mean_e F(p_a_e); differentiable w.r.t. ctx."""
        normal, anomaly = self.build_prompt_sequences(encoders)
        features = encoders.encode_text(normal + anomaly)
        f_n = features[: len(normal)].mean(dim=0)
        f_a = features[len(normal):].mean(dim=0)
        return f_n, f_a


def adapt(features: torch.Tensor, adapter: nn.Linear) -> torch.Tensor:
    """
    Position-wise affine map of a (…, C_j) feature map to (…, C).

    Raises:
        ShapeError: If the channel count differs from the adapter input
    """
    if features.shape[-1] != adapter.in_features:
        raise ShapeError(f"adapter expects {adapter.in_features} channels, got {features.shape[-1]}")
    return adapter(features)


def channel_avgpool(features: torch.Tensor, out_dim: int) -> torch.Tensor:
    """Average pooling along the channel axis from C_j to out_dim (identity when equal)."""
    if features.shape[-1] == out_dim:
        return features
    lead = features.shape[:-1]
    pooled = F.adaptive_avg_pool1d(features.reshape(-1, 1, features.shape[-1]), out_dim)
    return pooled.reshape(*lead, out_dim)


class Adapters(nn.Module):
    """One adapter per tap layer: a linear layer, or parameter-free channel pooling."""

    def __init__(
        self,
        in_dims: Sequence[int],
        out_dim: int,
        mode: Union[AdapterMode, str] = AdapterMode.LINEAR,
        seed: int = 0,
    ):
        super().__init__()
        self.mode = AdapterMode(mode)
        self.out_dim = out_dim
        self.layers = nn.ModuleList()
        if self.mode == AdapterMode.LINEAR:
            for j, in_dim in enumerate(in_dims):
                layer = nn.Linear(in_dim, out_dim)
                weight = torch.randn(out_dim, in_dim, generator=_generator(derive_seed(seed, "adapter", j)))
                with torch.no_grad():
                    layer.weight.copy_(weight / in_dim**0.5)
                    layer.bias.zero_()
                self.layers.append(layer)
        self.depth = len(in_dims)

    def forward(self, j: int, features: torch.Tensor) -> torch.Tensor:
        if self.mode == AdapterMode.LINEAR:
            return adapt(features, self.layers[j])
        return channel_avgpool(features, self.out_dim)


def similarity_maps(
    g: torch.Tensor, f_n: torch.Tensor, f_a: torch.Tensor, tau: float = DEFAULT_TAU
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Two-way softmax over cosine similarities divided by tau, at every position of g.

    Returns:
        (S_n_j, S_a_j) with the spatial shape of g[..., 0]
    """
    if tau <= 0:
        raise RejectedInputError(f"tau must be positive, got {tau}")
    g = F.normalize(g, dim=-1, eps=NORM_FLOOR)
    cos_n = g @ F.normalize(f_n, dim=-1, eps=NORM_FLOOR)
    cos_a = g @ F.normalize(f_a, dim=-1, eps=NORM_FLOOR)
    probs = torch.stack([cos_n, cos_a], dim=-1).div(tau).softmax(dim=-1)
    return probs[..., 0], probs[..., 1]


def _upsample(score: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if tuple(score.shape[-2:]) == (height, width):
        return score
    batched = score if score.ndim == 3 else score.unsqueeze(0)
    up = F.interpolate(batched.unsqueeze(1), size=(height, width), mode="bilinear", align_corners=False)
    up = up.squeeze(1)
    return up if score.ndim == 3 else up[0]


def aggregate(
    per_layer: Sequence[Tuple[torch.Tensor, torch.Tensor]], height: int, width: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Bilinear (pixel-center aligned) upsampling of every layer's maps, then the mean over layers."""
    if not per_layer:
        raise RejectedInputError("aggregate needs at least one layer")
    normal = torch.stack([_upsample(s_n, height, width) for s_n, _ in per_layer]).mean(dim=0)
    anomaly = torch.stack([_upsample(s_a, height, width) for _, s_a in per_layer]).mean(dim=0)
    return normal, anomaly


class PromptAdapterModel(nn.Module):
    """
    Frozen dual encoder plus the trainable prompt bank and adapters.

    Only `bank` and `adapters` carry trainable parameters; the encoder weights are
    frozen by `init_frozen` and never handed to an optimizer.
    """

    def __init__(
        self,
        encoders: DualEncoder,
        prompt_length: int = DEFAULT_PROMPT_LENGTH,
        tau: float = DEFAULT_TAU,
        prompt_mode: Union[PromptMode, str] = PromptMode.LEARNABLE,
        adapter_mode: Union[AdapterMode, str] = AdapterMode.LINEAR,
        init_seed: int = 0,
        bank: Optional[PromptBank] = None,
    ):
        super().__init__()
        self.encoders = encoders
        self.tau = tau
        self.init_seed = init_seed
        config = encoders.config
        self.bank = bank or PromptBank(encoders, prompt_length, prompt_mode, seed=derive_seed(init_seed, "prompt"))
        in_dims = [config.vision_dim] * len(config.tap_layers)
        self.adapters = Adapters(in_dims, config.feature_dim, adapter_mode, seed=derive_seed(init_seed, "adapters"))

    @property
    def image_size(self) -> int:
        return self.encoders.config.image_size

    def settings(self) -> Dict:
        return {
            "prompt_length": self.bank.prompt_length,
            "tau": self.tau,
            "prompt_mode": self.bank.mode.value,
            "adapter_mode": self.adapters.mode.value,
            "init_seed": self.init_seed,
        }

    def trainable_parameters(self) -> Dict[str, nn.Parameter]:
        return {
            name: p
            for name, p in self.named_parameters()
            if not name.startswith("encoders.") and p.requires_grad
        }

    def text_features(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.bank.mean_text_features(self.encoders)

    def forward(self, images: torch.Tensor) -> SimilarityMaps:
        """
        Anomaly maps for a (B, H, W) batch (or one (H, W) image).
        """
        f_n, f_a = self.text_features()
        pyramid = self.encoders.encode_image_multiscale(images)
        per_layer = []
        for j, G in enumerate(pyramid):
            g = self.adapters(j, G)
            per_layer.append(similarity_maps(g, f_n, f_a, self.tau))
        normal, anomaly = aggregate(per_layer, self.image_size, self.image_size)
        return SimilarityMaps(per_layer=per_layer, normal=normal, anomaly=anomaly, tau=self.tau)

"""
A small frozen vision/text dual encoder.

The vision side is a pre-norm ViT that exposes the patch tokens of selected layers as
spatial feature maps; the text side is a causal pre-norm transformer that maps a
sequence of raw token embeddings to a C-dimensional feature, so that learnable prompt
vectors can be injected directly. Weights are drawn once from a seeded normal
initialization and then frozen.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from loguru import logger

from scripts.errors import ConfigError, LengthError, ShapeError

# Class tokens for the normal and anomaly prompt sets
NORMAL_CLASS_TOKENS: Tuple[str, ...] = (
    "normal",
    "healthy",
    "negative",
    "unremarkable",
    "clear",
    "asymptomatic",
    "normal findings",
    "no findings",
    "in good health",
    "no evidence of disease",
)
ANOMALY_CLASS_TOKENS: Tuple[str, ...] = (
    "abnormal",
    "disease",
    "lesion",
    "positive",
    "symptomatic",
    "pathological",
    "impaired",
    "evidence of disease",
    "abnormal finding",
    "pathological condition",
    "pathological abnormality",
)
HARD_PROMPT_TEMPLATE = "a photo of the"

PAD, SOT, EOT = "<pad>", "<sot>", "<eot>"
PUNCTUATION = (".", ",")

# CLIP preprocessing statistics, one per replicated channel
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    vision_dim: int = 64
    vision_layers: int = 6
    vision_heads: int = 4
    text_dim: int = 64
    text_layers: int = 4
    text_heads: int = 4
    context_length: int = 16
    vocab_size: int = 64
    feature_dim: int = 64
    tap_layers: Tuple[int, ...] = field(default=(2, 4, 6))

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        """
        Raises:
            ConfigError: On any inconsistent field
        """
        problems = []
        if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            problems.append(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if not self.tap_layers:
            problems.append("tap_layers must not be empty")
        elif any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            problems.append(f"tap_layers {self.tap_layers} must be strictly increasing")
        elif self.tap_layers[0] < 1 or self.tap_layers[-1] > self.vision_layers:
            problems.append(f"tap_layers {self.tap_layers} must lie in [1, {self.vision_layers}]")
        if self.vision_dim % self.vision_heads != 0:
            problems.append(f"vision_dim {self.vision_dim} not divisible by {self.vision_heads} heads")
        if self.text_dim % self.text_heads != 0:
            problems.append(f"text_dim {self.text_dim} not divisible by {self.text_heads} heads")
        if self.context_length < 3:
            problems.append("context_length must leave room for start/end tokens")
        if self.vocab_size < len(TextVocabulary().words):
            problems.append(f"vocab_size {self.vocab_size} smaller than the {len(TextVocabulary().words)}-word vocabulary")
        if self.feature_dim <= 0:
            problems.append("feature_dim must be positive")
        if problems:
            for p in problems:
                logger.error(f"Invalid encoder config: {p}")
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["tap_layers"] = list(self.tap_layers)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "EncoderConfig":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid encoder config: {e}") from e


class TextVocabulary:
    """Fixed word-level vocabulary covering the class tokens and the hand-written template."""

    def __init__(self):
        phrases = NORMAL_CLASS_TOKENS + ANOMALY_CLASS_TOKENS + (HARD_PROMPT_TEMPLATE,)
        words = sorted({w for phrase in phrases for w in phrase.split()} | set(PUNCTUATION))
        self.words: List[str] = [PAD, SOT, EOT] + words
        self.index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}

    def encode(self, phrase: str) -> List[int]:
        ids = []
        for word in phrase.split():
            if word not in self.index:
                raise ConfigError(f"word '{word}' is not in the text vocabulary")
            ids.append(self.index[word])
        return ids

    def __len__(self) -> int:
        return len(self.words)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if attn_mask is not None:
            scores = scores + attn_mask
        out = torch.matmul(scores.softmax(dim=-1), v)
        return self.out_proj(out.transpose(1, 2).reshape(b, n, d))


class ResidualAttentionBlock(nn.Module):
    """Pre-norm transformer block with a GELU feed-forward."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor = None) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), attn_mask)
        x = x + self.mlp(self.ln_2(x))
        return x


class Transformer(nn.Module):
    def __init__(self, dim: int, layers: int, heads: int):
        super().__init__()
        self.resblocks = nn.ModuleList([ResidualAttentionBlock(dim, heads) for _ in range(layers)])

    def forward(
        self, x: torch.Tensor, attn_mask: torch.Tensor = None, taps: Sequence[int] = ()
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        tapped = []
        for i, block in enumerate(self.resblocks, start=1):
            x = block(x, attn_mask)
            if i in taps:
                tapped.append(x)
        return x, tapped


class VisionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        width = config.vision_dim
        self.conv1 = nn.Conv2d(3, width, kernel_size=config.patch_size, stride=config.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(width))
        self.positional_embedding = nn.Parameter(torch.zeros(config.grid_size**2 + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.transformer = Transformer(width, config.vision_layers, config.vision_heads)
        self.ln_post = nn.LayerNorm(width)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        # (B, H, W) single channel, replicated to 3 channels here only
        x = images.unsqueeze(1).expand(-1, 3, -1, -1)
        x = (x - self.pixel_mean.to(x.dtype)) / self.pixel_std.to(x.dtype)
        x = self.conv1(x)
        b, c, g, _ = x.shape
        x = x.reshape(b, c, g * g).permute(0, 2, 1)
        cls = self.class_embedding.expand(b, 1, c)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        x = self.ln_pre(x)
        _, tapped = self.transformer(x, taps=self.config.tap_layers)
        # class token dropped; normalized patch tokens back onto the grid
        return [self.ln_post(t[:, 1:, :]).reshape(b, g, g, c) for t in tapped]


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.text_dim)
        self.positional_embedding = nn.Parameter(torch.zeros(config.context_length, config.text_dim))
        self.transformer = Transformer(config.text_dim, config.text_layers, config.text_heads)
        self.ln_final = nn.LayerNorm(config.text_dim)
        self.text_projection = nn.Parameter(torch.zeros(config.text_dim, config.feature_dim))
        causal = torch.full((config.context_length, config.context_length), float("-inf")).triu_(1)
        self.register_buffer("attn_mask", causal, persistent=False)

    def forward(self, sequences: Sequence[torch.Tensor], sot: torch.Tensor, eot: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        lengths = [s.shape[0] + 2 for s in sequences]
        longest = max(lengths)
        if longest > self.config.context_length:
            raise LengthError(
                f"sequence of {longest} tokens (with start/end) exceeds context length {self.config.context_length}"
            )
        rows = []
        for seq, length in zip(sequences, lengths):
            parts = [sot[None], seq, eot[None]]
            if length < longest:
                parts.append(pad[None].expand(longest - length, -1))
            rows.append(torch.cat(parts, dim=0))
        x = torch.stack(rows) + self.positional_embedding[:longest]
        mask = self.attn_mask[:longest, :longest].to(x.dtype)
        x, _ = self.transformer(x, attn_mask=mask)
        x = self.ln_final(x)
        eot_index = torch.tensor([length - 1 for length in lengths], device=x.device)
        return x[torch.arange(x.shape[0]), eot_index] @ self.text_projection


class DualEncoder(nn.Module):
    """Frozen vision and text towers plus the word vocabulary they share with the prompts."""

    def __init__(self, config: EncoderConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.vocabulary = TextVocabulary()
        self.vision = VisionEncoder(config)
        self.text = TextEncoder(config)

    @property
    def dtype(self) -> torch.dtype:
        return self.vision.conv1.weight.dtype

    def word_embeddings(self, ids: Sequence[int]) -> torch.Tensor:
        index = torch.as_tensor(list(ids), dtype=torch.long)
        return self.text.token_embedding(index)

    def encode_image_multiscale(self, images: Union[np.ndarray, torch.Tensor]) -> List[torch.Tensor]:
        """
        Patch-token feature maps of the tap layers.

        Args:
            images: (H, W) or (B, H, W) intensities with H = W = image_size

        Returns:
            One (B, g, g, vision_dim) tensor per tap layer, g = image_size / patch_size
            (batch axis dropped for 2-D input)

        Raises:
            ShapeError: If the spatial size differs from image_size
        """
        x = torch.as_tensor(images, dtype=self.dtype)
        single = x.ndim == 2
        if single:
            x = x.unsqueeze(0)
        size = self.config.image_size
        if x.ndim != 3 or x.shape[-2:] != (size, size):
            logger.error(f"Encoder expects {size}x{size} images, got {tuple(x.shape)}")
            raise ShapeError(f"expected images of size {size}x{size}, got {tuple(x.shape)}")
        pyramid = self.vision(x)
        return [p[0] for p in pyramid] if single else pyramid

    def encode_text(self, sequences: Union[torch.Tensor, Sequence[torch.Tensor]]) -> torch.Tensor:
        """
        Map raw token-embedding sequences to C-dimensional features.

        Start/end embeddings are added here; the feature is the projected output at
        the end position. Gradients flow back to every input embedding.

        Args:
            sequences: One (L, text_dim) tensor, or a list of them

        Returns:
            (C,) for a single sequence, (N, C) for a list

        Raises:
            LengthError: If L + 2 exceeds context_length
        """
        single = isinstance(sequences, torch.Tensor) and sequences.ndim == 2
        batch = [sequences] if single else list(sequences)
        batch = [s.to(self.dtype) for s in batch]
        special = self.word_embeddings(
            [self.vocabulary.index[SOT], self.vocabulary.index[EOT], self.vocabulary.index[PAD]]
        )
        features = self.text(batch, special[0], special[1], special[2])
        return features[0] if single else features

    def digest(self) -> str:
        """SHA-256 over every weight (as float32), in name order."""
        sha = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            sha.update(name.encode("utf-8"))
            sha.update(tensor.detach().cpu().to(torch.float32).contiguous().numpy().tobytes())
        return sha.hexdigest()


def _initialize(model: DualEncoder, seed: int) -> None:
    """
    Scaled-normal weights (std 1/sqrt(fan-in)), zero biases, unit LayerNorm gains.

    In the vision tower the residual-branch output projections are further scaled by
    1/sqrt(2 * layers), as in CLIP, so each patch token keeps its own content at every
    tap depth.
    """
    generator = torch.Generator().manual_seed(seed)

    def normal_(tensor: torch.Tensor, fan: int) -> None:
        values = torch.randn(tensor.shape, generator=generator, dtype=torch.float32) / math.sqrt(fan)
        tensor.data.copy_(values)

    for module in model.modules():
        if isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Linear):
            normal_(module.weight, module.in_features)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Conv2d):
            normal_(module.weight, module.weight[0].numel())
        elif isinstance(module, nn.Embedding):
            normal_(module.weight, module.embedding_dim)

    normal_(model.vision.class_embedding, model.config.vision_dim)
    normal_(model.vision.positional_embedding, model.config.vision_dim)
    normal_(model.text.positional_embedding, model.config.text_dim)
    normal_(model.text.text_projection, model.config.text_dim)

    depth_scale = math.sqrt(2 * model.config.vision_layers)
    for block in model.vision.transformer.resblocks:
        for branch_out in (block.attn.out_proj, block.mlp[2]):
            branch_out.weight.data.div_(depth_scale)


def init_frozen(config: EncoderConfig, seed: int) -> DualEncoder:
    """
    Build the dual encoder with deterministic weights and freeze it.

    Raises:
        ConfigError: If the config is inconsistent
    """
    model = DualEncoder(config, seed)
    _initialize(model, seed)
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    model.eval()
    logger.info(f"Initialized frozen dual encoder (seed={seed}, digest={model.digest()[:12]})")
    return model

"""Small decoder-only transformer with a linear exit head per designated layer.

The trunk (embeddings, blocks, final norm) and the original LM head are
trained jointly by ``train_base``.  ``train_exit_heads`` then freezes the
trunk and trains one new zero-initialized linear head per exit layer,
including a new final-layer head, with a summed cross-entropy objective.
Which final head supplies the expert distribution is a runtime binding
(``expert_head_source``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import BinaryIO, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .contrast import ExpertSource

CHECKPOINT_MAGIC = b"ACDM"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the loss trace up to the failure."""

    def __init__(self, message: str, loss_trace: list[float]):
        super().__init__(message)
        self.loss_trace = loss_trace


@dataclass(frozen=True)
class MultiExitConfig:
    vocab_size: int = 256
    context_len: int = 256
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    exit_layers: tuple[int, ...] = (2, 4, 6, 8)

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        layers = tuple(self.exit_layers)
        if list(layers) != sorted(set(layers)):
            raise ValueError("exit_layers must be sorted ascending and unique")
        if not layers or layers[-1] != self.n_layers:
            raise ValueError("exit_layers must end with the final layer")
        if layers[0] < 1:
            raise ValueError("exit layers are 1-indexed")
        object.__setattr__(self, "exit_layers", layers)


@dataclass
class HeadTrainConfig:
    learning_rate: float = 2e-4
    schedule: str = "linear_decay"  # or "constant"
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    sequence_len: int = 128
    optimizer: str = "sgd"  # or "adamw"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if min(self.batch_size, self.sequence_len) < 1 or self.epochs < 0:
            raise ValueError("counts must be positive")
        if self.schedule not in ("linear_decay", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        shape = (b, t, self.n_heads, d // self.n_heads)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        a = a.transpose(1, 2).contiguous().view(b, t, d)
        x = x + self.proj(a)
        x = x + self.mlp(self.ln2(x))
        return x


class MultiExitModel(nn.Module):
    def __init__(self, config: MultiExitConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.context_len, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        # original final head, trained with the trunk
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)
        # one new zero-init head per exit layer (final layer included)
        self.new_heads = nn.ModuleDict()
        for layer in config.exit_layers:
            head = nn.Linear(config.d_model, config.vocab_size)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.new_heads[str(layer)] = head

        self.expert_source: ExpertSource = ExpertSource.ORIGINAL_HEAD
        self.new_heads_trained: bool = False
        self.provenance: dict = {}
        self.base_loss_history: list[float] = []

    # ------------------------------------------------------------- forward

    def trunk_hidden(self, tokens: torch.Tensor) -> dict[int, torch.Tensor]:
        """Hidden state after each exit layer, post final norm. (B,T,d) each."""
        b, t = tokens.shape
        if t > self.config.context_len:
            raise ValueError(
                f"context of length {t} exceeds context_len {self.config.context_len}"
            )
        pos = torch.arange(t, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        out: dict[int, torch.Tensor] = {}
        wanted = set(self.config.exit_layers)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in wanted:
                out[i] = self.ln_f(x)
        return out

    def _head_for(self, layer: int, source: ExpertSource | None = None) -> nn.Linear:
        if layer == self.config.n_layers:
            src = source if source is not None else self.expert_source
            if src is ExpertSource.ORIGINAL_HEAD:
                return self.lm_head
            if not self.new_heads_trained:
                raise ValueError(
                    "expert source 'new_head' requested but no new final head "
                    "has been trained"
                )
            return self.new_heads[str(layer)]
        return self.new_heads[str(layer)]

    def exit_logits(
        self, tokens: torch.Tensor, expert_source: ExpertSource | None = None
    ) -> dict[int, torch.Tensor]:
        """Per-exit logits for every position, (B,T,V) each, one trunk pass."""
        hidden = self.trunk_hidden(tokens)
        return {
            layer: self._head_for(layer, expert_source)(h)
            for layer, h in hidden.items()
        }

    @torch.no_grad()
    def exit_hidden_states(self, context: Sequence[int]) -> dict[int, np.ndarray]:
        """Post-norm hidden states at each exit for a single context, (T,d)."""
        tokens = self._context_tensor(context)
        hidden = self.trunk_hidden(tokens)
        return {layer: h[0].cpu().numpy() for layer, h in hidden.items()}

    def _context_tensor(self, context: Sequence[int]) -> torch.Tensor:
        if len(context) == 0:
            raise ValueError("context must be non-empty")
        if len(context) > self.config.context_len:
            raise ValueError(
                f"context of length {len(context)} exceeds context_len "
                f"{self.config.context_len}"
            )
        return torch.tensor([list(context)], dtype=torch.long)

    @torch.no_grad()
    def logits_all_positions(self, context: Sequence[int]) -> dict[int, np.ndarray]:
        tokens = self._context_tensor(context)
        return {
            layer: logits[0].cpu().numpy()
            for layer, logits in self.exit_logits(tokens).items()
        }


@torch.no_grad()
def forward_all_exits(
    model: MultiExitModel,
    context: Sequence[int],
    expert_source: ExpertSource | None = None,
) -> dict[int, np.ndarray]:
    """Last-position logits for every exit layer, from a single trunk pass."""
    tokens = model._context_tensor(context)
    logits = model.exit_logits(tokens, expert_source)
    return {layer: l[0, -1].cpu().numpy() for layer, l in logits.items()}


def expert_head_source(model: MultiExitModel, source: ExpertSource) -> int:
    """Bind which final-layer head supplies the expert distribution.

    Returns the final exit id the binding applies to.
    """
    source = ExpertSource(source)
    if source is ExpertSource.NEW_HEAD and not model.new_heads_trained:
        raise ValueError("no newly trained final head available")
    model.expert_source = source
    return model.config.n_layers


# ------------------------------------------------------------------ training


def _chunk_corpus(corpus: Sequence[Sequence[int]], sequence_len: int) -> torch.Tensor:
    """Non-overlapping windows of sequence_len+1 tokens (input + shifted label)."""
    if not corpus:
        raise ValueError("corpus is empty")
    window = sequence_len + 1
    chunks = []
    for seq in corpus:
        seq = list(seq)
        for start in range(0, len(seq) - 1, sequence_len):
            chunk = seq[start : start + window]
            if len(chunk) < 2:
                continue
            chunks.append(chunk)
    if not chunks:
        raise ValueError("corpus has no usable training windows")
    # pad ragged tails with the ignore marker -1
    out = torch.full((len(chunks), window), -1, dtype=torch.long)
    for i, chunk in enumerate(chunks):
        out[i, : len(chunk)] = torch.tensor(chunk, dtype=torch.long)
    return out


def _lr_at(cfg: HeadTrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant" or total_steps <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 - step / total_steps)


def _batches(chunks: torch.Tensor, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(chunks))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batch = chunks[idx]
        inputs = batch[:, :-1].clamp(min=0)
        labels = batch[:, 1:].clone()
        labels[batch[:, :-1] < 0] = -1  # padded input positions carry no loss
        yield inputs, labels


def _head_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(
        logits.reshape(-1, logits.size(-1)), labels.reshape(-1), ignore_index=-1
    )


def train_base(
    config: MultiExitConfig, corpus: Sequence[Sequence[int]], cfg: HeadTrainConfig
) -> MultiExitModel:
    """Train the trunk plus the original final head jointly (AdamW).

    The new exit heads stay zero-initialized; train them afterwards with
    ``train_exit_heads`` on the frozen result.
    """
    torch.manual_seed(cfg.seed)
    model = MultiExitModel(config)
    model.provenance = {"base_train": asdict(cfg)}
    if cfg.epochs == 0:
        model.base_loss_history = []
        return model

    chunks = _chunk_corpus(corpus, min(cfg.sequence_len, config.context_len))
    params = [
        p
        for name, p in model.named_parameters()
        if not name.startswith("new_heads.")
    ]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = (len(chunks) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs

    history: list[float] = []
    step = 0
    for _epoch in range(cfg.epochs):
        epoch_losses = []
        for inputs, labels in _batches(chunks, cfg.batch_size, rng):
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, step, total_steps)
            hidden = model.trunk_hidden(inputs)
            logits = model.lm_head(hidden[config.n_layers])
            loss = _head_loss(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite base loss at step {step}", history
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        history.append(float(np.mean(epoch_losses)))
    model.base_loss_history = history
    return model


def train_exit_heads(
    model: MultiExitModel, corpus: Sequence[Sequence[int]], cfg: HeadTrainConfig
) -> tuple[MultiExitModel, dict[int, list[float]]]:
    """Train all new exit heads on the frozen trunk.

    The objective is the sum of per-head next-token cross-entropies; only
    ``new_heads`` parameters receive updates.  Returns the model and the
    per-head mean loss for each epoch.
    """
    chunks = _chunk_corpus(corpus, min(cfg.sequence_len, model.config.context_len))
    torch.manual_seed(cfg.seed)

    head_params = list(model.new_heads.parameters())
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("new_heads."))

    if cfg.optimizer == "adamw":
        opt = torch.optim.AdamW(head_params, lr=cfg.learning_rate)
    else:
        opt = torch.optim.SGD(head_params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = (len(chunks) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs

    exits = list(model.config.exit_layers)
    history: dict[int, list[float]] = {e: [] for e in exits}
    flat_trace: list[float] = []
    step = 0
    for _epoch in range(cfg.epochs):
        epoch_losses = {e: [] for e in exits}
        for inputs, labels in _batches(chunks, cfg.batch_size, rng):
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, step, total_steps)
            with torch.no_grad():
                hidden = model.trunk_hidden(inputs)
            per_head = {
                e: _head_loss(model.new_heads[str(e)](hidden[e]), labels)
                for e in exits
            }
            total = sum(per_head.values())
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite head loss at step {step}", flat_trace
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            for e in exits:
                epoch_losses[e].append(float(per_head[e].detach()))
            flat_trace.append(float(total.detach()))
            step += 1
        for e in exits:
            history[e].append(float(np.mean(epoch_losses[e])))

    for p in model.parameters():
        p.requires_grad_(True)
    if cfg.epochs > 0:
        model.new_heads_trained = True
    model.provenance["head_train"] = asdict(cfg)
    return model, history


# ---------------------------------------------------------------- checkpoint


def base_parameter_bytes(model: MultiExitModel) -> bytes:
    """Concatenated raw bytes of every non-head parameter, for freeze audits."""
    buf = io.BytesIO()
    for name, tensor in model.state_dict().items():
        if not name.startswith("new_heads."):
            buf.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: MultiExitModel, sink: BinaryIO) -> int:
    meta = {
        "config": asdict(model.config),
        "expert_source": model.expert_source.value,
        "new_heads_trained": model.new_heads_trained,
        "provenance": model.provenance,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    written = 0
    header = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(blob)) + blob
    sink.write(header)
    written += len(header)
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        name_b = name.encode("utf-8")
        part = struct.pack("<H", len(name_b)) + name_b
        part += struct.pack("<B", arr.ndim)
        part += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        part += arr.tobytes()
        sink.write(part)
        written += len(part)
    return written


def load_checkpoint(source: BinaryIO) -> MultiExitModel:
    head = source.read(10)
    if head[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, meta_len = struct.unpack("<HI", head[4:])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(source.read(meta_len).decode("utf-8"))
    cfg_d = dict(meta["config"])
    cfg_d["exit_layers"] = tuple(cfg_d["exit_layers"])
    config = MultiExitConfig(**cfg_d)
    model = MultiExitModel(config)

    state = {}
    while True:
        len_b = source.read(2)
        if not len_b:
            break
        (name_len,) = struct.unpack("<H", len_b)
        name = source.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", source.read(1))
        shape = struct.unpack(f"<{ndim}I", source.read(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(source.read(4 * count), dtype="<f4").reshape(shape)
        state[name] = torch.tensor(data.copy())
    model.load_state_dict(state)
    model.expert_source = ExpertSource(meta["expert_source"])
    model.new_heads_trained = bool(meta["new_heads_trained"])
    model.provenance = meta.get("provenance", {})
    return model

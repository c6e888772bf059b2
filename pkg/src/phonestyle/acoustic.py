"""Utterance-level models: text encoder, attention-based acoustic model, style predictor.

The acoustic model consumes the per-phone concatenation ``[text embedding,
style embedding]`` and decodes mel frames autoregressively with
location-sensitive attention, Tacotron 2 style but at reduced width.  Style
sequences for training come from the frozen style encoder applied to the
forced-aligned segments of each utterance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import plcsd
from .config import AcousticConfig, PredictorConfig, config_hash, from_dict, to_dict
from .corpus import PhoneInventory, Utterance, segment_utterance
from .errors import ValidationError
from .formats import Checkpoint, load_checkpoint, save_checkpoint
from .nnutil import (check_finite, group_arrays, init_weights, length_mask, load_group_arrays,
                     load_optimizer_arrays, optimizer_arrays, pad_frames)

log = logging.getLogger(__name__)


class TextEncoder(nn.Module):
    """Phone embedding, a few 1-D convolutions, then a bidirectional LSTM."""

    def __init__(self, n_phones: int, cfg: AcousticConfig):
        super().__init__()
        self.embedding = nn.Embedding(n_phones, cfg.phone_embedding)
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.phone_embedding, cfg.phone_embedding, cfg.text_kernel, padding=cfg.text_kernel // 2)
            for _ in range(cfg.text_conv_layers))
        self.lstm = nn.LSTM(cfg.phone_embedding, cfg.d_t // 2, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * (cfg.d_t // 2), cfg.d_t)

    def forward(self, phone_ids, lengths):
        x = self.embedding(phone_ids)
        mask = length_mask(lengths, x.shape[1]).to(x.dtype)[..., None]
        for conv in self.convs:
            x = F.relu(conv((x * mask).transpose(1, 2))).transpose(1, 2)
        x = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(x)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
        return self.out(out)


class LocationAttention(nn.Module):
    def __init__(self, query_dim, memory_dim, attention_dim, n_filters, kernel, use_location=True):
        super().__init__()
        self.query = nn.Linear(query_dim, attention_dim, bias=False)
        self.keys = nn.Linear(memory_dim, attention_dim, bias=False)
        self.use_location = use_location
        self.location_conv = nn.Conv1d(2, n_filters, kernel, padding=kernel // 2, bias=False)
        self.location_proj = nn.Linear(n_filters, attention_dim, bias=False)
        self.v = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, query, keys, memory, prev_weights, cum_weights, mem_mask):
        energy = self.query(query)[:, None, :] + keys
        if self.use_location:
            loc = self.location_conv(torch.stack([prev_weights, cum_weights], dim=1)).transpose(1, 2)
            energy = energy + self.location_proj(loc)
        scores = self.v(torch.tanh(energy)).squeeze(-1)
        scores = scores.masked_fill(~mem_mask, -1e9)
        weights = F.softmax(scores, dim=-1)
        context = torch.bmm(weights[:, None, :], memory).squeeze(1)
        return context, weights


class AcousticModel(nn.Module):
    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.cfg = cfg
        d_mem = cfg.d_t + cfg.d_s
        self.n_mels = cfg.n_mels
        # dropout in the prenet weakens the shortcut from the previous frame, so the decoder has to
        # read phone and style from the attended memory; training only, inference stays deterministic
        self.prenet = nn.Sequential(nn.Linear(cfg.n_mels, cfg.prenet_width), nn.ReLU(), nn.Dropout(cfg.prenet_dropout),
                                    nn.Linear(cfg.prenet_width, cfg.prenet_width), nn.ReLU(),
                                    nn.Dropout(cfg.prenet_dropout))
        self.attention_rnn = nn.LSTMCell(cfg.prenet_width + d_mem, cfg.attention_rnn_width)
        self.attention = LocationAttention(cfg.attention_rnn_width, d_mem, cfg.attention_dim,
                                           cfg.location_filters, cfg.location_kernel, cfg.attention == "location")
        self.decoder_rnn = nn.LSTMCell(cfg.attention_rnn_width + d_mem, cfg.decoder_rnn_width)
        self.mel_out = nn.Linear(cfg.decoder_rnn_width + d_mem, cfg.n_mels)
        self.gate_out = nn.Linear(cfg.decoder_rnn_width + d_mem, 1)

    def _init_state(self, memory):
        b, m, d = memory.shape
        z = memory.new_zeros
        return {
            "att": (z(b, self.cfg.attention_rnn_width), z(b, self.cfg.attention_rnn_width)),
            "dec": (z(b, self.cfg.decoder_rnn_width), z(b, self.cfg.decoder_rnn_width)),
            "w": z(b, m), "cum": z(b, m), "ctx": z(b, d),
        }

    def _step(self, prev_frame, st, memory, keys, mem_mask):
        x = torch.cat([self.prenet(prev_frame), st["ctx"]], dim=-1)
        att_h, att_c = self.attention_rnn(x, st["att"])
        ctx, w = self.attention(att_h, keys, memory, st["w"], st["cum"], mem_mask)
        dec_h, dec_c = self.decoder_rnn(torch.cat([att_h, ctx], dim=-1), st["dec"])
        out = torch.cat([dec_h, ctx], dim=-1)
        new = {"att": (att_h, att_c), "dec": (dec_h, dec_c), "w": w, "cum": st["cum"] + w, "ctx": ctx}
        return self.mel_out(out), self.gate_out(out).squeeze(-1), new

    def forward(self, memory, mem_lengths, teacher):
        """Teacher-forced decode; returns frames, gate logits and attention weights."""
        b, t, _ = teacher.shape
        mem_mask = length_mask(mem_lengths, memory.shape[1])
        keys = self.attention.keys(memory)
        st = self._init_state(memory)
        prev = teacher.new_zeros(b, self.n_mels)
        mels, gates, aligns = [], [], []
        for i in range(t):
            mel, gate, st = self._step(prev, st, memory, keys, mem_mask)
            mels.append(mel)
            gates.append(gate)
            aligns.append(st["w"])
            prev = teacher[:, i]
        return torch.stack(mels, 1), torch.stack(gates, 1), torch.stack(aligns, 1)

    @torch.no_grad()
    def generate(self, memory, max_frames, threshold):
        """Free-running decode of one sequence (batch of 1)."""
        mem_mask = torch.ones(memory.shape[:2], dtype=torch.bool)
        keys = self.attention.keys(memory)
        st = self._init_state(memory)
        prev = memory.new_zeros(1, self.n_mels)
        mels, gates, aligns = [], [], []
        truncated = True
        for _ in range(max_frames):
            mel, gate, st = self._step(prev, st, memory, keys, mem_mask)
            p = torch.sigmoid(gate)
            mels.append(mel[0])
            gates.append(p[0])
            aligns.append(st["w"][0])
            prev = mel
            if float(p[0]) >= threshold:
                truncated = False
                break
        return torch.stack(mels), torch.stack(gates), torch.stack(aligns), truncated


def guided_attention_penalty(align, mem_lengths, mel_lengths, sigma):
    """Mean attention mass placed away from the diagonal of each (frames, phones) grid."""
    b, t, m = align.shape
    n = torch.arange(m, dtype=align.dtype)[None, None, :] / mem_lengths.to(align.dtype)[:, None, None]
    tt = torch.arange(t, dtype=align.dtype)[None, :, None] / mel_lengths.to(align.dtype)[:, None, None]
    w = 1.0 - torch.exp(-((n - tt) ** 2) / (2 * sigma ** 2))
    mask = (length_mask(mel_lengths, t)[:, :, None] & length_mask(mem_lengths, m)[:, None, :]).to(align.dtype)
    return (align * w * mask).sum() / mask.sum()


def combine(text_seq, style_seq):
    """Per-phone concatenation ``[text, style]``."""
    text_seq = np.asarray(text_seq)
    style_seq = np.asarray(style_seq)
    if len(text_seq) != len(style_seq):
        raise ValidationError(f"sequence lengths differ ({len(text_seq)} vs {len(style_seq)}); interpolate first")
    return np.concatenate([text_seq, style_seq], axis=-1)


@torch.no_grad()
def encode_text(phones: Sequence[str], text_encoder: TextEncoder, inventory: PhoneInventory) -> np.ndarray:
    if len(phones) == 0:
        raise ValidationError("empty phone sequence")
    ids = torch.tensor([inventory.indices(phones)], dtype=torch.long)
    out = text_encoder(ids, torch.tensor([len(phones)]))
    return out[0].numpy()


def utterance_style_sequence(utt: Utterance, model: plcsd.PLCSD, silence_labels=None) -> np.ndarray:
    kwargs = {} if silence_labels is None else {"silence_labels": frozenset(silence_labels)}
    segs = segment_utterance(utt, inventory=model.inventory, **kwargs)
    return plcsd.encode_style(segs, model)


@dataclass
class AcousticOutput:
    frames: np.ndarray
    gates: np.ndarray
    alignment: np.ndarray  # (frames, phones) attention weights
    truncated: bool


@torch.no_grad()
def acoustic_forward(combined: np.ndarray, model: AcousticModel, teacher: np.ndarray | None = None,
                     max_frames: int | None = None) -> AcousticOutput:
    combined = np.asarray(combined)
    if len(combined) == 0:
        raise ValidationError("empty combined sequence")
    mem = torch.as_tensor(combined, dtype=torch.float32)[None]
    if teacher is not None:
        t = torch.as_tensor(np.asarray(teacher), dtype=torch.float32)[None]
        mel, gate, align = model(mem, torch.tensor([len(combined)]), t)
        return AcousticOutput(mel[0].numpy(), torch.sigmoid(gate[0]).numpy(), align[0].numpy(), False)
    mel, gate, align, truncated = model.generate(mem, max_frames or model.cfg.max_decode_frames,
                                                 model.cfg.gate_threshold)
    check_finite(mel, "acoustic_model", "output")
    return AcousticOutput(mel.numpy(), gate.numpy(), align.numpy(), truncated)


class _UttData:
    def __init__(self, utt_id, phone_ids, style, mel):
        self.id, self.phone_ids, self.style, self.mel = utt_id, phone_ids, style, mel


class AcousticTrainer:
    """Joint training of the text encoder and acoustic model against frozen style embeddings."""

    def __init__(self, config: AcousticConfig, inventory: PhoneInventory):
        config.validate()
        self.config = config
        self.inventory = inventory
        torch.manual_seed(config.seed)
        self.text_encoder = TextEncoder(inventory.size, config)
        self.acoustic = AcousticModel(config)
        init_weights(self.text_encoder)
        init_weights(self.acoustic)
        self.optimizer = torch.optim.Adam(
            list(self.text_encoder.parameters()) + list(self.acoustic.parameters()), lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history: list[dict] = []
        self.skipped: list[str] = []
        self.provenance: dict = {}

    def prepare(self, utterances: Sequence[Utterance], style_model: plcsd.PLCSD, silence_labels=None):
        """Compute each utterance's style sequence once with the frozen style encoder."""
        data = []
        for utt in utterances:
            try:
                style = utterance_style_sequence(utt, style_model, silence_labels)
            except ValidationError as exc:
                log.warning("skipping utterance %s: %s", utt.id, exc)
                self.skipped.append(utt.id)
                continue
            data.append(_UttData(utt.id, self.inventory.indices(utt.phone_sequence), style, utt.mel.frames))
        return data

    def _batch_loss(self, items):
        ids = nn.utils.rnn.pad_sequence([torch.tensor(d.phone_ids) for d in items], batch_first=True)
        lengths = torch.tensor([len(d.phone_ids) for d in items])
        style, _ = pad_frames([d.style for d in items])
        mels, mel_lengths = pad_frames([d.mel for d in items])
        text = self.text_encoder(ids, lengths)
        memory = torch.cat([text, style], dim=-1)
        pred, gate, align = self.acoustic(memory, lengths, mels)
        mask = length_mask(mel_lengths, mels.shape[1]).to(mels.dtype)
        mse = (((pred - mels) ** 2).mean(-1) * mask).sum() / mask.sum()
        gate_target = (torch.arange(mels.shape[1])[None, :] >= (mel_lengths - 1)[:, None]).to(mels.dtype)
        gate_loss = F.binary_cross_entropy_with_logits(gate, gate_target)
        guide = guided_attention_penalty(align, lengths, mel_lengths, self.config.guided_attention_sigma)
        total = mse + self.config.gate_weight * gate_loss + self.config.guided_attention_weight * guide
        return total, {"mse": float(mse.detach()), "gate": float(gate_loss.detach()), "guide": float(guide.detach())}

    def train_epoch(self, data) -> dict:
        self.text_encoder.train()
        self.acoustic.train()
        order = self.rng.permutation(len(data))
        bs = self.config.batch_size
        sums, n = {"mse": 0.0, "gate": 0.0, "guide": 0.0}, 0
        params = list(self.text_encoder.parameters()) + list(self.acoustic.parameters())
        for i in range(0, len(order), bs):
            items = [data[j] for j in order[i:i + bs]]
            total, parts = self._batch_loss(items)
            check_finite(total.detach(), "acoustic", "loss")
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            if self.config.grad_clip:
                nn.utils.clip_grad_norm_(params, self.config.grad_clip)
            self.optimizer.step()
            for k in sums:
                sums[k] += parts[k] * len(items)
            n += len(items)
        self.epoch += 1
        return {k: v / n for k, v in sums.items()}

    def fit(self, data, epoch_callback=None):
        if not data:
            raise ValidationError("no usable utterances for acoustic training")
        while self.epoch < self.config.epochs:
            rec = {"epoch": self.epoch + 1, **self.train_epoch(data)}
            self.history.append(rec)
            log.info("acoustic epoch %d mse=%.4f gate=%.4f guide=%.4f", rec["epoch"], rec["mse"], rec["gate"],
                     rec["guide"])
            if epoch_callback:
                epoch_callback(self, rec)
        return self

    def to_checkpoint(self, extra=None) -> Checkpoint:
        groups = {"text_encoder": group_arrays(self, ["text_encoder"])["text_encoder"],
                  "acoustic_model": group_arrays(self, ["acoustic"])["acoustic"],
                  "optim/acoustic": optimizer_arrays(self.optimizer)}
        return Checkpoint("acoustic", groups, to_dict(self.config), self.epoch,
                          {"numpy": self.rng.bit_generator.state},
                          {"inventory": list(self.inventory.phones), "history": self.history,
                           "skipped": self.skipped, **(extra or {})}, config_hash(self.config))

    def save(self, path, extra=None) -> str:
        return save_checkpoint(path, self.to_checkpoint({**self.provenance, **(extra or {})}))

    @classmethod
    def from_checkpoint(cls, ckpt) -> "AcousticTrainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if ckpt.component != "acoustic":
            raise ValidationError(f"expected an acoustic checkpoint, got {ckpt.component!r}")
        tr = cls(from_dict(AcousticConfig, ckpt.config), PhoneInventory(tuple(ckpt.extra["inventory"])))
        load_group_arrays(tr, {"text_encoder": ckpt.groups["text_encoder"], "acoustic": ckpt.groups["acoustic_model"]})
        if ckpt.groups.get("optim/acoustic"):
            load_optimizer_arrays(tr.optimizer, ckpt.groups["optim/acoustic"])
        tr.rng.bit_generator.state = ckpt.rng["numpy"]
        tr.epoch = ckpt.epoch
        tr.history = list(ckpt.extra.get("history", []))
        tr.skipped = list(ckpt.extra.get("skipped", []))
        return tr


def train_utterance_level(utterances, style_model: plcsd.PLCSD, config: AcousticConfig,
                          inventory: PhoneInventory | None = None, epoch_callback=None) -> AcousticTrainer:
    trainer = AcousticTrainer(config, inventory or style_model.inventory)
    data = trainer.prepare(utterances, style_model)
    return trainer.fit(data, epoch_callback)


# --- style predictor ------------------------------------------------------------

@dataclass
class PredictorPair:
    utterance_id: str
    text: np.ndarray  # (m, d_t)
    style: np.ndarray  # (m, d_s)


def build_predictor_pairs(utterances, text_encoder: TextEncoder, style_model: plcsd.PLCSD,
                          inventory: PhoneInventory | None = None) -> list[PredictorPair]:
    inventory = inventory or style_model.inventory
    pairs = []
    for utt in utterances:
        text = encode_text(utt.phone_sequence, text_encoder, inventory)
        style = utterance_style_sequence(utt, style_model)
        pairs.append(PredictorPair(utt.id, text, style))
    return pairs


def sinusoid_positions(length, dim, dtype=torch.float32):
    pos = torch.arange(length, dtype=dtype)[:, None]
    i = torch.arange(0, dim, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / dim)
    pe = torch.zeros(length, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, :dim // 2])
    return pe


class FFTBlock(nn.Module):
    """Self-attention followed by a two-layer 1-D convolution, each with residual + layer norm."""

    def __init__(self, dim, heads, hidden, kernel):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.conv1 = nn.Conv1d(dim, hidden, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(hidden, dim, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pad_mask):
        keep = (~pad_mask).to(x.dtype)[..., None]
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + a) * keep
        h = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return self.norm2(x + h) * keep


class StylePredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.inp = nn.Linear(cfg.d_t, cfg.model_dim)
        self.blocks = nn.ModuleList(FFTBlock(cfg.model_dim, cfg.n_heads, cfg.conv_hidden, cfg.conv_kernel)
                                    for _ in range(cfg.n_blocks))
        self.out = nn.Linear(cfg.model_dim, cfg.d_s)
        self.register_buffer("target_mean", torch.zeros(cfg.d_s))
        self.register_buffer("target_std", torch.ones(cfg.d_s))

    def forward(self, text, lengths):
        """Standardised style predictions, shape (B, m, d_s)."""
        pad_mask = ~length_mask(lengths, text.shape[1])
        x = self.inp(text) + sinusoid_positions(text.shape[1], self.cfg.model_dim, text.dtype)[None]
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.out(x)

    @torch.no_grad()
    def predict(self, text_seq: np.ndarray) -> np.ndarray:
        """Style sequence in the style encoder's units for one text-embedding sequence."""
        self.eval()
        text = torch.as_tensor(np.asarray(text_seq), dtype=torch.float32)[None]
        z = self.forward(text, torch.tensor([text.shape[1]]))[0]
        return (z * self.target_std + self.target_mean).numpy()


class PredictorTrainer:
    def __init__(self, config: PredictorConfig):
        config.validate()
        self.config = config
        torch.manual_seed(config.seed)
        self.model = StylePredictor(config)
        init_weights(self.model)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history: list[dict] = []
        self.provenance: dict = {}

    def set_normalisation(self, pairs):
        allstyle = np.concatenate([p.style for p in pairs])
        with torch.no_grad():
            self.model.target_mean.copy_(torch.as_tensor(allstyle.mean(0)))
            self.model.target_std.copy_(torch.as_tensor(np.maximum(allstyle.std(0), 1e-6)))

    def _loss(self, items):
        text, lengths = pad_frames([p.text for p in items])
        target, _ = pad_frames([p.style for p in items])
        target = (target - self.model.target_mean) / self.model.target_std
        pred = self.model(text, lengths)
        mask = length_mask(lengths, text.shape[1]).to(text.dtype)
        return (((pred - target) ** 2).mean(-1) * mask).sum() / mask.sum()

    @torch.no_grad()
    def evaluate(self, pairs) -> float:
        self.model.eval()
        return float(self._loss(pairs))

    def fit(self, pairs: Sequence[PredictorPair], epoch_callback=None):
        if not pairs:
            raise ValidationError("no predictor pairs")
        if self.epoch == 0:
            self.set_normalisation(pairs)
            self.history.append({"epoch": 0, "mse": self.evaluate(pairs)})
        bs = self.config.batch_size
        while self.epoch < self.config.epochs:
            self.model.train()
            order = self.rng.permutation(len(pairs))
            total, n = 0.0, 0
            for i in range(0, len(order), bs):
                items = [pairs[j] for j in order[i:i + bs]]
                loss = self._loss(items)
                check_finite(loss.detach(), "style_predictor", "loss")
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer.step()
                total += float(loss.detach()) * len(items)
                n += len(items)
            self.epoch += 1
            rec = {"epoch": self.epoch, "mse": total / n}
            self.history.append(rec)
            if epoch_callback:
                epoch_callback(self, rec)
        self.model.eval()
        return self

    def to_checkpoint(self, extra=None) -> Checkpoint:
        groups = {"style_predictor": {n: p.detach().numpy().copy() for n, p in self.model.named_parameters()},
                  "target_norm": {"mean": self.model.target_mean.numpy().copy(),
                                  "std": self.model.target_std.numpy().copy()},
                  "optim/predictor": optimizer_arrays(self.optimizer)}
        return Checkpoint("style_predictor", groups, to_dict(self.config), self.epoch,
                          {"numpy": self.rng.bit_generator.state}, {"history": self.history, **(extra or {})},
                          config_hash(self.config))

    def save(self, path, extra=None) -> str:
        return save_checkpoint(path, self.to_checkpoint({**self.provenance, **(extra or {})}))

    @classmethod
    def from_checkpoint(cls, ckpt) -> "PredictorTrainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if ckpt.component != "style_predictor":
            raise ValidationError(f"expected a style_predictor checkpoint, got {ckpt.component!r}")
        tr = cls(from_dict(PredictorConfig, ckpt.config))
        with torch.no_grad():
            params = dict(tr.model.named_parameters())
            for n, arr in ckpt.groups["style_predictor"].items():
                params[n].copy_(torch.as_tensor(arr))
            tr.model.target_mean.copy_(torch.as_tensor(ckpt.groups["target_norm"]["mean"]))
            tr.model.target_std.copy_(torch.as_tensor(ckpt.groups["target_norm"]["std"]))
        if ckpt.groups.get("optim/predictor"):
            load_optimizer_arrays(tr.optimizer, ckpt.groups["optim/predictor"])
        tr.rng.bit_generator.state = ckpt.rng["numpy"]
        tr.epoch = ckpt.epoch
        tr.history = list(ckpt.extra.get("history", []))
        tr.model.eval()
        return tr


def train_style_predictor(pairs, config: PredictorConfig, epoch_callback=None) -> PredictorTrainer:
    return PredictorTrainer(config).fit(list(pairs), epoch_callback)


def predict_style(phones: Sequence[str], text_encoder: TextEncoder, predictor: StylePredictor,
                  inventory: PhoneInventory) -> np.ndarray:
    """Phones are always routed through the text encoder before the predictor."""
    return predictor.predict(encode_text(phones, text_encoder, inventory))

"""Phone-level content/style disentanglement.

Six components operate on single phone segments: content and style encoders,
an autoregressive segment decoder, content-to-phone and style-to-phone
classifiers, and a natural-vs-reconstructed segment discriminator.  Training
alternates six sub-steps per minibatch (see ``SUBSTEPS``), each updating only
the parameter groups it names.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .config import PlcsdConfig, to_dict, config_hash
from .corpus import MelSpectrogram, PhoneInventory, PhoneSegment
from .errors import NumericError, ValidationError
from .formats import Checkpoint, load_checkpoint, save_checkpoint
from .nnutil import (check_finite, grad_norm, group_arrays, init_weights, length_mask, load_group_arrays,
                     load_optimizer_arrays, optimizer_arrays, pad_frames)

log = logging.getLogger(__name__)

GROUPS = ("content_encoder", "style_encoder", "decoder",
          "content_classifier", "style_classifier", "segment_discriminator")

# (sub-step name, trained groups); every other group is held fixed.
SUBSTEPS = (
    ("auto", ("content_encoder", "style_encoder", "decoder")),
    ("content", ("content_encoder", "content_classifier")),
    ("style_dis", ("style_classifier",)),
    ("style_gen", ("style_encoder",)),
    ("seg_dis", ("segment_discriminator",)),
    ("seg_gen", ("content_encoder", "style_encoder", "decoder")),
)

LOSS_NAMES = ("L_auto", "L_c", "L_contra", "L_s_dis", "L_s_gen", "L_seg_dis", "L_seg_gen")


class SequenceEncoder(nn.Module):
    """Bidirectional LSTM whose final cell states are projected to an embedding."""

    def __init__(self, n_in, width, out_dim):
        super().__init__()
        self.lstm = nn.LSTM(n_in, width // 2, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(width, out_dim)

    def forward(self, x, lengths):
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, (_, c) = self.lstm(packed)
        return self.proj(torch.cat([c[0], c[1]], dim=-1))


class SegmentDecoder(nn.Module):
    """Unidirectional LSTM fed ``[previous frame, z_c, z_s]``, with mel and gate heads."""

    def __init__(self, n_mels, d_c, d_s, width):
        super().__init__()
        self.n_mels = n_mels
        self.lstm = nn.LSTM(n_mels + d_c + d_s, width, batch_first=True)
        self.mel_out = nn.Linear(width, n_mels)
        self.gate_out = nn.Linear(width, 1)

    def forward(self, z_c, z_s, teacher):
        """Teacher-forced pass: returns predicted frames and gate logits for every target frame."""
        b, t, _ = teacher.shape
        go = teacher.new_zeros(b, 1, self.n_mels)
        prev = torch.cat([go, teacher[:, :-1]], dim=1)
        cond = torch.cat([z_c, z_s], dim=-1)[:, None, :].expand(b, t, -1)
        out, _ = self.lstm(torch.cat([prev, cond], dim=-1))
        return self.mel_out(out), self.gate_out(out).squeeze(-1)

    @torch.no_grad()
    def generate(self, z_c, z_s, max_frames, threshold):
        """Free-running decode of a batch; returns per-item (frames, gate probs, truncated)."""
        b = z_c.shape[0]
        cond = torch.cat([z_c, z_s], dim=-1)[:, None, :]
        prev = z_c.new_zeros(b, 1, self.n_mels)
        state = None
        frames, gates = [], []
        done = torch.zeros(b, dtype=torch.bool)
        stop_at = torch.full((b,), max_frames, dtype=torch.long)
        for step in range(max_frames):
            out, state = self.lstm(torch.cat([prev, cond], dim=-1), state)
            mel = self.mel_out(out)
            gate = torch.sigmoid(self.gate_out(out)).reshape(b)
            frames.append(mel[:, 0])
            gates.append(gate)
            newly = (~done) & (gate >= threshold)
            stop_at[newly] = step + 1
            done |= newly
            if bool(done.all()):
                break
            prev = mel
        frames = torch.stack(frames, dim=1)
        gates = torch.stack(gates, dim=1)
        return [(frames[i, :stop_at[i]], gates[i, :stop_at[i]], not bool(done[i])) for i in range(b)]


class PhoneClassifier(nn.Module):
    def __init__(self, d_in, n_phones, hidden):
        super().__init__()
        if hidden:
            self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh(), nn.Linear(hidden, n_phones))
        else:
            self.net = nn.Sequential(nn.Linear(d_in, n_phones))
        self.d_in = d_in

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, z):
        if z.shape[-1] != self.d_in:
            raise ValidationError(f"classifier expects dimension {self.d_in}, got {z.shape[-1]}")
        return self.net(z)


class SegmentDiscriminator(nn.Module):
    def __init__(self, n_mels, width):
        super().__init__()
        self.lstm = nn.LSTM(n_mels, width, batch_first=True)
        self.out = nn.Linear(width, 1)

    def forward(self, x, lengths):
        """Logit of P(natural) per segment."""
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        return self.out(h[-1]).squeeze(-1)


class PLCSD(nn.Module):
    def __init__(self, config: PlcsdConfig, inventory: PhoneInventory):
        super().__init__()
        self.config = config
        self.inventory = inventory
        n_w = inventory.size
        self.content_encoder = SequenceEncoder(config.n_mels, config.encoder_width, config.d_c)
        self.style_encoder = SequenceEncoder(config.n_mels, config.encoder_width, config.d_s)
        self.decoder = SegmentDecoder(config.n_mels, config.d_c, config.d_s, config.decoder_width)
        self.content_classifier = PhoneClassifier(config.d_c, n_w, config.classifier_hidden)
        self.style_classifier = PhoneClassifier(config.d_s, n_w, config.classifier_hidden)
        self.segment_discriminator = SegmentDiscriminator(config.n_mels, config.discriminator_width)
        init_weights(self)

    def group_parameters(self, groups) -> list:
        return [p for g in groups for p in getattr(self, g).parameters()]


@dataclass
class Batch:
    mels: torch.Tensor  # (B, T, M), zero padded
    lengths: torch.Tensor  # (B,)
    phones: torch.Tensor  # (B,)

    def __len__(self):
        return self.mels.shape[0]

    @property
    def mask(self):
        return length_mask(self.lengths, self.mels.shape[1]).to(self.mels.dtype)


def collate(segments: Sequence[PhoneSegment], inventory: PhoneInventory, dtype=torch.float32) -> Batch:
    if not segments:
        raise ValidationError("empty batch")
    mels, lengths = pad_frames([s.mel.frames for s in segments], dtype)
    if int(lengths.min()) < 1:
        raise ValidationError("segment with zero frames")
    phones = torch.tensor(inventory.indices(s.phone for s in segments), dtype=torch.long)
    return Batch(mels, lengths, phones)


# --- pure loss terms ----------------------------------------------------------

def clipped_log(p, eps):
    return torch.log(torch.clamp(p, eps, 1.0 - eps))


def reconstruction_terms(pred, gate_logits, target, lengths, eps=1e-7):
    """Per-segment spectrogram and gate terms, each averaged over the segment's frames.

    Spectrogram term: mean over frames of the squared L2 distance between frames.
    Gate term: mean over frames of the gate BCE with target 1 on the final frame only.
    """
    mask = length_mask(lengths, target.shape[1]).to(target.dtype)
    n = lengths.to(target.dtype)
    spec = (((pred - target) ** 2).sum(-1) * mask).sum(1) / n
    gate_target = F.one_hot(lengths - 1, target.shape[1]).to(target.dtype)
    p = torch.sigmoid(gate_logits)
    bce = -(gate_target * clipped_log(p, eps) + (1 - gate_target) * clipped_log(1 - p, eps))
    gate = (bce * mask).sum(1) / n
    return spec, gate


def phone_nll(logits, phones, eps=1e-7):
    """Per-segment ``-log P(true phone)``; probabilities floored at ``eps``."""
    logp = F.log_softmax(logits, dim=-1).gather(1, phones[:, None]).squeeze(1)
    return -torch.clamp(logp, min=math.log(eps))


def pairwise_same_label_distance(emb, labels):
    """Sum over pairs i < j with equal labels of ``||emb_i - emb_j||_2``."""
    diff = emb[:, None, :] - emb[None, :, :]
    sq = (diff ** 2).sum(-1)
    same = (labels[:, None] == labels[None, :]) & torch.ones_like(sq, dtype=torch.bool).triu(1)
    pos = same & (sq > 0)
    dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return dist.sum()


def uniformity_deviation(probs):
    """Per-segment ``sum_w |P(w) - 1/N_w|``."""
    return (probs - 1.0 / probs.shape[-1]).abs().sum(-1)


def discriminator_terms(real_logits, fake_logits, eps=1e-7):
    return -(clipped_log(torch.sigmoid(real_logits), eps) + clipped_log(1 - torch.sigmoid(fake_logits), eps))


def generator_terms(fake_logits, eps=1e-7):
    return -clipped_log(torch.sigmoid(fake_logits), eps)


# --- batch-level losses (sums over the batch) -----------------------------------

def _embed(model, batch, detach_content=False, detach_style=False):
    z_c = model.content_encoder(batch.mels, batch.lengths)
    z_s = model.style_encoder(batch.mels, batch.lengths)
    return (z_c.detach() if detach_content else z_c), (z_s.detach() if detach_style else z_s)


def reconstruct_teacher_forced(model, batch):
    z_c, z_s = _embed(model, batch)
    pred, gate = model.decoder(z_c, z_s, batch.mels)
    return pred * batch.mask[..., None], gate


def auto_loss(model: PLCSD, batch: Batch, parts=False):
    pred, gate = reconstruct_teacher_forced(model, batch)
    spec, gterm = reconstruction_terms(pred, gate, batch.mels, batch.lengths, model.config.prob_clip)
    if parts:
        return spec.sum(), gterm.sum()
    return spec.sum() + gterm.sum()


def content_class_loss(model: PLCSD, batch: Batch):
    z_c = model.content_encoder(batch.mels, batch.lengths)
    return phone_nll(model.content_classifier(z_c), batch.phones, model.config.prob_clip).sum()


def contrast_loss(model: PLCSD, batch: Batch):
    z_c = model.content_encoder(batch.mels, batch.lengths)
    return pairwise_same_label_distance(z_c, batch.phones)


def style_adv_dis_loss(model: PLCSD, batch: Batch):
    with torch.no_grad():
        z_s = model.style_encoder(batch.mels, batch.lengths)
    return phone_nll(model.style_classifier(z_s), batch.phones, model.config.prob_clip).sum()


def style_adv_gen_loss(model: PLCSD, batch: Batch):
    z_s = model.style_encoder(batch.mels, batch.lengths)
    probs = F.softmax(model.style_classifier(z_s), dim=-1)
    return uniformity_deviation(probs).sum()


def seg_adv_dis_loss(model: PLCSD, batch: Batch):
    with torch.no_grad():
        fake, _ = reconstruct_teacher_forced(model, batch)
    disc = model.segment_discriminator
    terms = discriminator_terms(disc(batch.mels, batch.lengths), disc(fake, batch.lengths), model.config.prob_clip)
    return terms.sum()


def seg_adv_gen_loss(model: PLCSD, batch: Batch):
    fake, _ = reconstruct_teacher_forced(model, batch)
    return generator_terms(model.segment_discriminator(fake, batch.lengths), model.config.prob_clip).sum()


LOSS_FUNCTIONS = {
    "L_auto": auto_loss,
    "L_c": content_class_loss,
    "L_contra": contrast_loss,
    "L_s_dis": style_adv_dis_loss,
    "L_s_gen": style_adv_gen_loss,
    "L_seg_dis": seg_adv_dis_loss,
    "L_seg_gen": seg_adv_gen_loss,
}


# --- single-segment operations ------------------------------------------------

def _as_batch(segments, model):
    if isinstance(segments, PhoneSegment):
        segments = [segments]
    dtype = next(model.parameters()).dtype
    return collate(segments, model.inventory, dtype)


@torch.no_grad()
def encode_content(segments, model: PLCSD) -> np.ndarray:
    """Content embeddings, one row per segment."""
    batch = _as_batch(segments, model)
    z = model.content_encoder(batch.mels, batch.lengths)
    check_finite(z, "content_encoder", "activation")
    return z.cpu().numpy()


@torch.no_grad()
def encode_style(segments, model: PLCSD) -> np.ndarray:
    batch = _as_batch(segments, model)
    z = model.style_encoder(batch.mels, batch.lengths)
    check_finite(z, "style_encoder", "activation")
    return z.cpu().numpy()


@torch.no_grad()
def classify_content_phone(z_c, model: PLCSD) -> np.ndarray:
    z = torch.as_tensor(np.atleast_2d(z_c), dtype=next(model.parameters()).dtype)
    return F.softmax(model.content_classifier(z), dim=-1).numpy()


@torch.no_grad()
def classify_style_phone(z_s, model: PLCSD) -> np.ndarray:
    z = torch.as_tensor(np.atleast_2d(z_s), dtype=next(model.parameters()).dtype)
    return F.softmax(model.style_classifier(z), dim=-1).numpy()


@torch.no_grad()
def discriminate_segment(mel, model: PLCSD) -> float:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if len(frames) < 1:
        raise ValidationError("segment needs at least one frame")
    x, lengths = pad_frames([frames], next(model.parameters()).dtype)
    p = torch.sigmoid(model.segment_discriminator(x, lengths))
    check_finite(p, "segment_discriminator", "output")
    return float(p[0])


def fit_phone_probe(z, phones, n_phones: int, hidden: int, steps: int = 1000, lr: float = 1e-2,
                    seed: int = 0) -> PhoneClassifier:
    """Train a freshly initialised phone classifier on frozen embeddings (full batch, cross-entropy).

    Used to audit how much phone identity an embedding still carries after training;
    ``hidden`` should match the classifier being audited.
    """
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(phones), dtype=torch.long)
    if len(z) == 0 or len(z) != len(y):
        raise ValidationError("probe needs matching, non-empty embeddings and labels")
    torch.manual_seed(seed)
    probe = PhoneClassifier(z.shape[1], n_phones, hidden)
    init_weights(probe)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(probe(z), y).backward()
        opt.step()
    return probe.eval()


@torch.no_grad()
def probe_accuracy(probe: PhoneClassifier, z, phones) -> float:
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    return float((probe(z).argmax(1).numpy() == np.asarray(phones)).mean())


@dataclass
class DecodeResult:
    frames: np.ndarray
    gates: np.ndarray
    truncated: bool = False


@torch.no_grad()
def decode_segment(z_c, z_s, model: PLCSD, teacher: MelSpectrogram | None = None,
                   max_frames: int | None = None) -> DecodeResult:
    dtype = next(model.parameters()).dtype
    zc = torch.as_tensor(np.atleast_2d(z_c), dtype=dtype)
    zs = torch.as_tensor(np.atleast_2d(z_s), dtype=dtype)
    if teacher is not None:
        t = torch.as_tensor(teacher.frames, dtype=dtype)[None]
        pred, gate = model.decoder(zc, zs, t)
        return DecodeResult(pred[0].numpy(), torch.sigmoid(gate[0]).numpy(), False)
    max_frames = max_frames or model.config.max_decode_frames
    frames, gates, truncated = model.decoder.generate(zc, zs, max_frames, model.config.gate_threshold)[0]
    return DecodeResult(frames.numpy(), gates.numpy(), truncated)


@torch.no_grad()
def reconstruct_segments(segments: Sequence[PhoneSegment], model: PLCSD,
                         max_frames: int | None = None) -> list[DecodeResult]:
    """Free-running reconstructions ``D(E_c(s), E_s(s))``."""
    batch = _as_batch(list(segments), model)
    z_c, z_s = _embed(model, batch)
    out = model.decoder.generate(z_c, z_s, max_frames or model.config.max_decode_frames,
                                 model.config.gate_threshold)
    return [DecodeResult(f.numpy(), g.numpy(), tr) for f, g, tr in out]


# --- training ---------------------------------------------------------------

@dataclass
class StepReport:
    losses: dict  # batch sums
    mean_losses: dict  # batch means (what the optimiser saw, before weighting)
    grad_norms: dict
    order: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"losses": self.losses, "mean_losses": self.mean_losses,
                "grad_norms": self.grad_norms, "order": self.order}


def make_optimizers(model: PLCSD, config: PlcsdConfig) -> list[torch.optim.Optimizer]:
    return [torch.optim.Adam(model.group_parameters(groups), lr=lr)
            for (_, groups), lr in zip(SUBSTEPS, config.learning_rates)]


def _substep_losses(model, batch, name):
    """Return ``(objective, {loss name: batch sum})`` for one sub-step."""
    b = len(batch)
    if name == "auto":
        total = auto_loss(model, batch)
        return total / b, {"L_auto": total}
    if name == "content":
        z_c = model.content_encoder(batch.mels, batch.lengths)
        l_c = phone_nll(model.content_classifier(z_c), batch.phones, model.config.prob_clip).sum()
        l_contra = pairwise_same_label_distance(z_c, batch.phones)
        return (l_c + model.config.contrast_weight * l_contra) / b, {"L_c": l_c, "L_contra": l_contra}
    if name == "style_dis":
        total = style_adv_dis_loss(model, batch)
        return total / b, {"L_s_dis": total}
    if name == "style_gen":
        total = style_adv_gen_loss(model, batch)
        return total / b, {"L_s_gen": total}
    if name == "seg_dis":
        total = seg_adv_dis_loss(model, batch)
        return total / b, {"L_seg_dis": total}
    if name == "seg_gen":
        total = seg_adv_gen_loss(model, batch)
        return total / b, {"L_seg_gen": total}
    raise KeyError(name)


def _snapshot(model, groups):
    return {g: [p.detach().clone() for p in getattr(model, g).parameters()] for g in groups}


def train_step(model: PLCSD, batch: Batch, optimizers, hook: Callable | None = None,
               verify_frozen: bool = False) -> StepReport:
    """Run the six sub-steps on one minibatch, updating ``model`` in place.

    ``hook(phase, index, name)`` is called with phase ``"before"``/``"after"``
    around every sub-step.
    """
    if len(batch) == 0:
        raise ValidationError("empty batch")
    losses, means, norms, order = {}, {}, {}, []
    for idx, ((name, groups), opt) in enumerate(zip(SUBSTEPS, optimizers)):
        if hook:
            hook("before", idx, name)
        frozen = [g for g in GROUPS if g not in groups]
        before = _snapshot(model, frozen) if verify_frozen else None
        params = model.group_parameters(groups)
        reps = model.config.critic_steps if name in ("style_dis", "seg_dis") else 1
        for _ in range(reps):
            objective, parts = _substep_losses(model, batch, name)
            for key, val in parts.items():
                check_finite(val.detach(), f"sub-step {idx + 1} ({name})", f"loss {key}")
            grads = torch.autograd.grad(objective, params, allow_unused=True)
            for g in grads:
                if g is not None:
                    check_finite(g, f"sub-step {idx + 1} ({name})", "gradient")
            opt.zero_grad(set_to_none=True)
            for p, g in zip(params, grads):
                p.grad = g if g is not None else torch.zeros_like(p)
            opt.step()
            opt.zero_grad(set_to_none=True)
        if verify_frozen:
            for g, tensors in before.items():
                for old, new in zip(tensors, getattr(model, g).parameters()):
                    if not torch.equal(old, new):
                        raise RuntimeError(f"sub-step {idx + 1} modified frozen group {g}")
        for key, val in parts.items():
            losses[key] = float(val.detach())
            means[key] = float(val.detach()) / len(batch)
        norms[name] = grad_norm(grads)
        order.append(name)
        if hook:
            hook("after", idx, name)
    return StepReport(losses, means, norms, order)


class PlcsdTrainer:
    """Owns the model, the six optimisers and the shuffling RNG."""

    def __init__(self, config: PlcsdConfig, inventory: PhoneInventory):
        config.validate()
        self.config = config
        torch.manual_seed(config.seed)
        self.model = PLCSD(config, inventory)
        self.optimizers = make_optimizers(self.model, config)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history: list[dict] = []
        self.provenance: dict = {}  # merged into checkpoint metadata (stage, run config hash)

    @property
    def inventory(self):
        return self.model.inventory

    def batches(self, segments):
        order = self.rng.permutation(len(segments))
        bs = self.config.batch_size
        for i in range(0, len(order), bs):
            yield collate([segments[j] for j in order[i:i + bs]], self.inventory)

    def train_epoch(self, segments, log_file=None, hook=None, verify_frozen=False) -> dict:
        sums = {k: 0.0 for k in LOSS_NAMES}
        n = 0
        self.model.train()
        for step, batch in enumerate(self.batches(segments)):
            report = train_step(self.model, batch, self.optimizers, hook=hook, verify_frozen=verify_frozen)
            for k in LOSS_NAMES:
                sums[k] += report.losses[k]
            n += len(batch)
            if log_file is not None:
                log_file.write(json.dumps({"epoch": self.epoch + 1, "step": step, **report.to_json()}) + "\n")
        self.epoch += 1
        return {k: v / n for k, v in sums.items()}

    @torch.no_grad()
    def evaluate(self, segments) -> dict:
        """Per-segment mean of each loss on ``segments`` without updating anything."""
        sums = {k: 0.0 for k in LOSS_NAMES}
        bs = self.config.batch_size
        for i in range(0, len(segments), bs):
            batch = collate(segments[i:i + bs], self.inventory)
            for k, fn in LOSS_FUNCTIONS.items():
                sums[k] += float(fn(self.model, batch))
        return {k: v / len(segments) for k, v in sums.items()}

    def fit(self, segments, val_segments=None, checkpoint_dir=None, log_path=None,
            epoch_callback: Callable | None = None):
        if not segments:
            raise ValidationError("no training segments")
        best, stale = math.inf, 0
        log_file = open(log_path, "a") if log_path else None
        try:
            while self.epoch < self.config.max_epochs:
                train_means = self.train_epoch(segments, log_file)
                val = self.evaluate(val_segments) if val_segments else train_means
                record = {"epoch": self.epoch, "train": train_means, "val": val}
                self.history.append(record)
                log.info("epoch %d L_auto=%.4f val L_auto=%.4f", self.epoch, train_means["L_auto"], val["L_auto"])
                if checkpoint_dir is not None:
                    self.save(Path(checkpoint_dir) / "plcsd_last.ckpt")
                if epoch_callback:
                    epoch_callback(self, record)
                if val["L_auto"] < best * (1 - self.config.min_improvement):
                    best, stale = val["L_auto"], 0
                    if checkpoint_dir is not None:
                        self.save(Path(checkpoint_dir) / "plcsd_best.ckpt")
                else:
                    stale += 1
                    if stale >= self.config.patience:
                        log.info("early stop at epoch %d", self.epoch)
                        break
        finally:
            if log_file:
                log_file.close()
        return self.model

    def to_checkpoint(self, extra=None) -> Checkpoint:
        groups = group_arrays(self.model, GROUPS)
        for (name, _), opt in zip(SUBSTEPS, self.optimizers):
            groups[f"optim/{name}"] = optimizer_arrays(opt)
        return Checkpoint(
            component="plcsd",
            groups=groups,
            config=to_dict(self.config),
            config_hash=config_hash(self.config),
            epoch=self.epoch,
            rng={"numpy": self.rng.bit_generator.state},
            extra={"inventory": list(self.inventory.phones), "history": self.history, **(extra or {})},
        )

    def save(self, path) -> str:
        return save_checkpoint(path, self.to_checkpoint(self.provenance))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path) -> "PlcsdTrainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if ckpt.component != "plcsd":
            raise ValidationError(f"expected a plcsd checkpoint, got {ckpt.component!r}")
        from .config import from_dict
        trainer = cls(from_dict(PlcsdConfig, ckpt.config), PhoneInventory(tuple(ckpt.extra["inventory"])))
        load_group_arrays(trainer.model, {g: ckpt.groups[g] for g in GROUPS})
        for (name, _), opt in zip(SUBSTEPS, trainer.optimizers):
            if ckpt.groups.get(f"optim/{name}"):
                load_optimizer_arrays(opt, ckpt.groups[f"optim/{name}"])
        trainer.rng.bit_generator.state = ckpt.rng["numpy"]
        trainer.epoch = ckpt.epoch
        trainer.history = list(ckpt.extra.get("history", []))
        return trainer


def train(segments: Sequence[PhoneSegment], config: PlcsdConfig, inventory: PhoneInventory | None = None,
          **fit_kwargs) -> PLCSD:
    if not segments:
        raise ValidationError("no training segments")
    inventory = inventory or PhoneInventory.arpabet()
    trainer = PlcsdTrainer(config, inventory)
    return trainer.fit(list(segments), **fit_kwargs)

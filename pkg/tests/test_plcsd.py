import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import GRAD_TARGETS, gradient_errors, mini_model
from phonestyle import plcsd
from phonestyle.config import PlcsdConfig
from phonestyle.corpus import MelSpectrogram, PhoneInventory, PhoneSegment
from phonestyle.errors import NumericError, ValidationError
from phonestyle.synthetic import SyntheticGenerator

EPS = 1e-7


def small_setup(n=24, seed=0, **overrides):
    gen = SyntheticGenerator(4, 2, seed=seed, n_mels=6)
    segs, _ = gen.segments(n, seed=seed)
    kw = dict(n_mels=6, d_c=4, d_s=4, encoder_width=8, decoder_width=8, classifier_hidden=4,
              discriminator_width=4, batch_size=8, max_epochs=2, seed=seed)
    kw.update(overrides)
    return gen, segs, PlcsdConfig(**kw)


# --- pure loss terms -------------------------------------------------------------------

def test_reconstruction_terms_hand_values():
    target = torch.tensor([[[1.0, 2.0, 3.0]]])
    delta = torch.tensor([0.5, -1.0, 2.0])
    spec, _ = plcsd.reconstruction_terms(target + delta, torch.zeros(1, 1), target, torch.tensor([1]))
    assert spec.item() == pytest.approx(float((delta ** 2).sum()))


def test_perfect_reconstruction_leaves_gate_floor():
    target = torch.randn(2, 4, 3, dtype=torch.float64)
    lengths = torch.tensor([4, 2])
    big = 50.0
    logits = torch.full((2, 4), -big, dtype=torch.float64)
    logits[0, 3] = big
    logits[1, 1] = big
    spec, gate = plcsd.reconstruction_terms(target, logits, target, lengths, EPS)
    assert torch.all(spec == 0)
    # every frame sits at the clip, so the per-frame mean is exactly the floor
    assert torch.allclose(gate, torch.full((2,), -math.log(1 - EPS), dtype=gate.dtype), rtol=1e-9, atol=0)


def test_gate_targets_mark_final_frame_only():
    target = torch.zeros(1, 3, 2)
    lengths = torch.tensor([3])
    # a gate that fires on frame 2 of 3 is penalised; firing on the last frame is not
    early = torch.tensor([[-50.0, 50.0, 50.0]])
    late = torch.tensor([[-50.0, -50.0, 50.0]])
    assert plcsd.reconstruction_terms(target, early, target, lengths)[1] > 1.0
    assert plcsd.reconstruction_terms(target, late, target, lengths)[1] < 1e-6


def test_phone_nll_examples():
    assert plcsd.phone_nll(torch.tensor([[0.0, -1e9]]), torch.tensor([0])).item() == pytest.approx(0.0, abs=1e-6)
    assert plcsd.phone_nll(torch.zeros(1, 39), torch.tensor([5])).item() == pytest.approx(math.log(39))
    assert math.log(39) == pytest.approx(3.6636, abs=1e-4)
    assert plcsd.phone_nll(torch.zeros(1, 2), torch.tensor([1])).item() == pytest.approx(math.log(2))
    # clipping keeps the loss finite
    assert plcsd.phone_nll(torch.tensor([[0.0, 1e9]]), torch.tensor([0])).item() == pytest.approx(-math.log(EPS))


def test_contrast_examples():
    d = plcsd.pairwise_same_label_distance
    assert d(torch.eye(3), torch.tensor([0, 1, 2])).item() == 0.0
    assert d(torch.ones(2, 3), torch.tensor([1, 1])).item() == 0.0
    assert d(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([4, 4])).item() == pytest.approx(math.sqrt(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10))
def test_contrast_is_permutation_invariant(seed, n):
    g = torch.Generator().manual_seed(seed)
    emb = torch.randn(n, 3, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (n,), generator=g)
    perm = torch.randperm(n, generator=g)
    a = plcsd.pairwise_same_label_distance(emb, labels)
    b = plcsd.pairwise_same_label_distance(emb[perm], labels[perm])
    assert a.item() == pytest.approx(b.item(), rel=1e-12)
    brute = sum(float(torch.linalg.norm(emb[i] - emb[j])) for i in range(n) for j in range(i + 1, n)
                if labels[i] == labels[j])
    assert a.item() == pytest.approx(brute, rel=1e-12, abs=1e-12)


def test_uniformity_examples():
    u = plcsd.uniformity_deviation
    assert u(torch.full((1, 4), 0.25)).item() == 0.0
    assert u(torch.tensor([[1.0, 0.0]])).item() == pytest.approx(1.0)
    assert u(torch.tensor([[0.4, 0.2, 0.2, 0.2]])).item() == pytest.approx(0.3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6))
def test_uniformity_zero_iff_uniform(weights):
    p = torch.tensor(weights, dtype=torch.float64)
    if p.sum() == 0:
        p = torch.ones_like(p)
    p = p / p.sum()
    val = plcsd.uniformity_deviation(p[None]).item()
    assert val >= 0
    is_uniform = bool(torch.all(p == 1.0 / len(p)))
    assert (val == 0.0) == is_uniform


def test_adversarial_terms():
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    half = torch.zeros(1)
    assert plcsd.discriminator_terms(half, half).item() == pytest.approx(2 * math.log(2))
    assert 2 * math.log(2) == pytest.approx(1.3863, abs=1e-4)
    f64 = lambda v: torch.tensor([v], dtype=torch.float64)  # noqa: E731
    perfect = plcsd.discriminator_terms(f64(logit(1 - EPS)), f64(logit(EPS)))
    assert perfect.item() == pytest.approx(-2 * math.log(1 - EPS), rel=1e-6)
    assert plcsd.generator_terms(half).item() == pytest.approx(math.log(2))
    assert plcsd.generator_terms(torch.tensor([logit(1 - EPS)])).item() < 1e-6
    worst = plcsd.generator_terms(torch.tensor([-1e6])).item()
    assert math.isfinite(worst) and worst == pytest.approx(-math.log(EPS))


# --- model operations -------------------------------------------------------------------

def _seg(frames, phone="AA"):
    frames = np.asarray(frames, dtype=np.float32)
    return PhoneSegment("u", 0, phone, MelSpectrogram(frames, 0.01), (0, len(frames)))


def test_encoders_contract():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    a = plcsd.encode_content(segs[:3], model)
    assert a.shape == (3, cfg.d_c)
    assert np.array_equal(a, plcsd.encode_content(segs[:3], model))
    frame = segs[0].mel.frames[:1]
    one, five = _seg(frame), _seg(np.repeat(frame, 5, axis=0))
    z = plcsd.encode_style([one, five], model)
    assert z.shape == (2, cfg.d_s) and np.all(np.isfinite(z))
    twin = plcsd.encode_style([segs[0], _seg(segs[0].mel.frames, segs[0].phone)], model)
    assert np.array_equal(twin[0], twin[1])
    # batch composition does not leak between segments
    alone = plcsd.encode_style(segs[2], model)
    np.testing.assert_allclose(alone[0], plcsd.encode_style(segs[:5], model)[2], atol=1e-6)


def test_encoder_reports_non_finite():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    with torch.no_grad():
        model.content_encoder.proj.weight.fill_(float("nan"))
    with pytest.raises(NumericError) as info:
        plcsd.encode_content(segs[:2], model)
    assert info.value.component == "content_encoder"


def test_decode_lengths_and_gate_contract():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    zc, zs = plcsd.encode_content(segs[0], model), plcsd.encode_style(segs[0], model)
    teacher = MelSpectrogram(np.zeros((7, cfg.n_mels), np.float32), 0.01)
    res = plcsd.decode_segment(zc, zs, model, teacher=teacher)
    assert res.frames.shape == (7, cfg.n_mels) and res.gates.shape == (7,)
    with torch.no_grad():
        model.decoder.gate_out.weight.zero_()
        model.decoder.gate_out.bias.fill_(60.0)
    res = plcsd.decode_segment(zc, zs, model)
    assert len(res.frames) == 1 and not res.truncated
    with torch.no_grad():
        model.decoder.gate_out.bias.fill_(-60.0)
    res = plcsd.decode_segment(zc, zs, model, max_frames=9)
    assert len(res.frames) == 9 and len(res.gates) == 9 and res.truncated
    assert np.all((res.gates >= 0) & (res.gates <= 1))


def test_classifier_contract():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    z = plcsd.encode_content(segs[:6], model)
    p = plcsd.classify_content_phone(z, model)
    assert p.shape == (6, gen.inventory.size)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    with torch.no_grad():
        model.style_classifier.final.weight.zero_()
        model.style_classifier.final.bias.zero_()
    q = plcsd.classify_style_phone(plcsd.encode_style(segs[:3], model), model)
    np.testing.assert_allclose(q, 1.0 / gen.inventory.size, atol=1e-7)
    same = plcsd.classify_content_phone(np.stack([z[0], z[0]]), model)
    assert np.array_equal(same[0], same[1])
    with pytest.raises(ValidationError):
        plcsd.classify_content_phone(np.zeros((1, cfg.d_c + 1)), model)


def test_discriminator_contract():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    rng = np.random.default_rng(0)
    for n in (1, 100):
        x = rng.normal(size=(n, cfg.n_mels))
        p = plcsd.discriminate_segment(x, model)
        assert 0.0 < p < 1.0 and p == plcsd.discriminate_segment(x, model)
    with pytest.raises(ValidationError):
        plcsd.discriminate_segment(np.zeros((0, cfg.n_mels)), model)


def test_losses_are_batch_sums():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    half = plcsd.collate(segs[:4], gen.inventory)
    double = plcsd.collate(segs[:4] + segs[:4], gen.inventory)
    for name in ("L_auto", "L_c", "L_s_dis", "L_s_gen", "L_seg_dis", "L_seg_gen"):
        fn = plcsd.LOSS_FUNCTIONS[name]
        with torch.no_grad():
            assert fn(model, double).item() == pytest.approx(2 * fn(model, half).item(), rel=1e-5)
            assert fn(model, half).item() >= 0


# --- gradients -----------------------------------------------------------------------

def test_gradients_match_finite_differences():
    errs = gradient_errors(seed=1)
    assert set(errs) == set(GRAD_TARGETS)
    for name, (err, norm) in errs.items():
        assert norm > 0, name
        assert err < 1e-4, (name, err)


def test_adversarial_losses_do_not_reach_frozen_groups():
    model, batch = mini_model()
    checks = {"L_s_dis": "style_encoder", "L_seg_dis": "decoder"}
    for name, group in checks.items():
        loss = plcsd.LOSS_FUNCTIONS[name](model, batch)
        grads = torch.autograd.grad(loss, model.group_parameters([group]), allow_unused=True)
        assert all(g is None or torch.all(g == 0) for g in grads), name


# --- training -----------------------------------------------------------------------

def test_train_step_order_and_frozen_groups():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    opts = plcsd.make_optimizers(model, cfg)
    seen = []
    snaps = {}

    def hook(phase, idx, name):
        if phase == "before":
            snaps[idx] = {g: [p.detach().clone() for p in getattr(model, g).parameters()] for g in plcsd.GROUPS}
            return
        seen.append(name)
        trained = dict(plcsd.SUBSTEPS)[name]
        for g in plcsd.GROUPS:
            same = all(torch.equal(a, b) for a, b in zip(snaps[idx][g], getattr(model, g).parameters()))
            assert same == (g not in trained), (name, g)

    report = plcsd.train_step(model, plcsd.collate(segs[:8], gen.inventory), opts, hook=hook, verify_frozen=True)
    assert seen == [n for n, _ in plcsd.SUBSTEPS] == report.order
    assert set(report.losses) == set(plcsd.LOSS_NAMES) and len(report.losses) == 7
    assert all(math.isfinite(v) for v in report.losses.values())
    assert set(report.grad_norms) == {n for n, _ in plcsd.SUBSTEPS}


def test_train_step_aborts_on_non_finite():
    gen, segs, cfg = small_setup()
    model = plcsd.PLCSD(cfg, gen.inventory)
    opts = plcsd.make_optimizers(model, cfg)
    batch = plcsd.collate(segs[:4], gen.inventory)
    batch.mels[0, 0, 0] = float("inf")
    with pytest.raises(NumericError, match="sub-step 1"):
        plcsd.train_step(model, batch, opts)


def test_training_is_deterministic(tmp_path):
    gen, segs, cfg = small_setup()
    paths = []
    for k in range(2):
        tr = plcsd.PlcsdTrainer(cfg, gen.inventory)
        tr.fit(segs)
        paths.append(tmp_path / f"run{k}.ckpt")
        tr.save(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    with pytest.raises(ValidationError):
        plcsd.train([], cfg, gen.inventory)


def test_resume_reproduces_next_step(tmp_path):
    gen, segs, cfg = small_setup(max_epochs=2)
    full = plcsd.PlcsdTrainer(cfg, gen.inventory)
    full.fit(segs, log_path=tmp_path / "full.jsonl")
    half = plcsd.PlcsdTrainer(PlcsdConfig(**{**cfg.__dict__, "max_epochs": 1}), gen.inventory)
    half.fit(segs)
    half.save(tmp_path / "half.ckpt")
    resumed = plcsd.PlcsdTrainer.from_checkpoint(tmp_path / "half.ckpt")
    resumed.config.max_epochs = 2
    resumed.fit(segs, log_path=tmp_path / "resumed.jsonl")
    full_rows = [json.loads(l) for l in (tmp_path / "full.jsonl").read_text().splitlines()]
    res_rows = [json.loads(l) for l in (tmp_path / "resumed.jsonl").read_text().splitlines()]
    second_epoch = [r for r in full_rows if r["epoch"] == 2]
    assert [r["losses"] for r in second_epoch] == [r["losses"] for r in res_rows]


def test_training_log_has_seven_losses(tmp_path):
    gen, segs, cfg = small_setup(max_epochs=1)
    plcsd.PlcsdTrainer(cfg, gen.inventory).fit(segs, log_path=tmp_path / "log.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(rows) == math.ceil(len(segs) / cfg.batch_size)
    for r in rows:
        assert set(r["losses"]) == set(plcsd.LOSS_NAMES)
        assert set(r["grad_norms"]) == {n for n, _ in plcsd.SUBSTEPS}


def test_early_stop(monkeypatch):
    gen, segs, cfg = small_setup(max_epochs=20, patience=2, min_improvement=0.99)
    tr = plcsd.PlcsdTrainer(cfg, gen.inventory)
    tr.fit(segs)
    # the first epoch always improves on infinity; nothing after can improve by 99%
    assert tr.epoch == 3


def test_posteriors_valid_after_training():
    gen, segs, cfg = small_setup(max_epochs=1)
    tr = plcsd.PlcsdTrainer(cfg, gen.inventory)
    tr.fit(segs)
    for fn, enc in ((plcsd.classify_content_phone, plcsd.encode_content),
                    (plcsd.classify_style_phone, plcsd.encode_style)):
        p = fn(enc(segs, tr.model), tr.model)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValidationError):
        PlcsdConfig(gate_threshold=1.0).validate()
    with pytest.raises(ValidationError):
        PlcsdConfig(learning_rates=(1e-3,)).validate()
    with pytest.raises(ValidationError):
        PlcsdConfig(encoder_width=7).validate()
    assert PlcsdConfig().learning_rates == (1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4)
    assert PhoneInventory.arpabet().size == 39


def test_phone_probe_learns_separable_and_fails_on_noise():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 300)
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    z = centers[labels] + rng.normal(0, 0.3, (300, 2))
    probe = plcsd.fit_phone_probe(z[:200], labels[:200], 3, hidden=0, steps=300)
    assert plcsd.probe_accuracy(probe, z[200:], labels[200:]) > 0.95
    noise = rng.normal(size=(300, 2))
    probe = plcsd.fit_phone_probe(noise[:200], labels[:200], 3, hidden=4, steps=300)
    assert plcsd.probe_accuracy(probe, noise[200:], labels[200:]) < 0.55
    with pytest.raises(ValidationError):
        plcsd.fit_phone_probe(z[:3], labels[:2], 3, hidden=0)

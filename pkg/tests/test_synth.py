import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phonestyle import acoustic, plcsd, synth
from phonestyle.config import AcousticConfig, MelConfig, PlcsdConfig, PredictorConfig, VocoderConfig
from phonestyle.corpus import MelSpectrogram, compute_mel, segment_utterance
from phonestyle.errors import ValidationError
from phonestyle.formats import load_mel
from phonestyle.synthetic import SyntheticGenerator

N_MELS = 6


@pytest.fixture(scope="module")
def tiny():
    """Untrained but complete model stack; enough for every plumbing contract."""
    gen = SyntheticGenerator(4, 2, seed=0, n_mels=N_MELS)
    pc = PlcsdConfig(n_mels=N_MELS, d_c=4, d_s=4, encoder_width=8, decoder_width=8, classifier_hidden=4,
                     discriminator_width=4, max_epochs=1)
    style = plcsd.PlcsdTrainer(pc, gen.inventory).model
    ac = AcousticConfig(n_mels=N_MELS, d_t=4, d_s=4, phone_embedding=8, prenet_width=8, attention_rnn_width=16,
                        decoder_rnn_width=16, attention_dim=8, location_filters=2, location_kernel=3,
                        max_decode_frames=12)
    tr = acoustic.AcousticTrainer(ac, gen.inventory)
    pred = acoustic.PredictorTrainer(PredictorConfig(d_t=4, d_s=4, model_dim=8, n_blocks=1, conv_hidden=8)).model
    models = synth.SynthesisModels(style, tr.text_encoder, tr.acoustic, pred, checkpoint_hashes={"plcsd": "x"})
    utts, styles = gen.utterances(3, seed=3)
    return gen, models, utts, styles


# --- interpolation ---------------------------------------------------------------------

seqs = arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 4)), elements=st.floats(-10, 10, width=32))


@settings(max_examples=80, deadline=None)
@given(seqs)
def test_interpolation_identity_and_endpoints(seq):
    assert np.array_equal(synth.interpolate_style_sequence(seq, len(seq)), seq)
    for t in range(2, 12):
        out = synth.interpolate_style_sequence(seq, t)
        assert out.shape == (t, seq.shape[1]) and out.dtype == seq.dtype
        assert np.array_equal(out[0], seq[0]) and np.array_equal(out[-1], seq[-1])


def test_interpolation_midpoint_and_replication():
    a, b = np.float32([1.0, -2.0]), np.float32([3.0, 4.0])
    out = synth.interpolate_style_sequence(np.stack([a, b]), 3)
    assert np.array_equal(out, np.stack([a, (a + b) / 2, b]))
    rep = synth.interpolate_style_sequence(a[None], 5)
    assert np.array_equal(rep, np.repeat(a[None], 5, axis=0))
    assert np.array_equal(synth.interpolate_style_sequence(np.stack([a, b, a]), 1), b[None])
    with pytest.raises(ValidationError):
        synth.interpolate_style_sequence(np.zeros((0, 2)), 3)
    with pytest.raises(ValidationError):
        synth.interpolate_style_sequence(a[None], 0)


@settings(max_examples=80, deadline=None)
@given(seqs, st.integers(1, 15))
def test_interpolation_is_convex(seq, t):
    out = synth.interpolate_style_sequence(seq, t)
    n = len(seq)
    for j, row in enumerate(out):
        p = j * (n - 1) / (t - 1) if t > 1 and n > 1 else (n - 1) // 2 * (n > 1)
        lo, hi = int(np.floor(p)), int(np.ceil(p))
        lower = np.minimum(seq[lo], seq[hi])
        upper = np.maximum(seq[lo], seq[hi])
        tol = 4 * np.finfo(np.float32).eps * np.maximum(np.abs(lower), np.abs(upper))
        assert np.all(row >= lower - tol) and np.all(row <= upper + tol)


# --- acoustic plumbing -------------------------------------------------------------------

def test_combine_requires_equal_lengths():
    assert acoustic.combine(np.zeros((3, 2)), np.ones((3, 4))).shape == (3, 6)
    with pytest.raises(ValidationError, match="interpolate"):
        acoustic.combine(np.zeros((3, 2)), np.ones((4, 4)))


def test_encode_text_shapes(tiny):
    gen, models, utts, _ = tiny
    text = acoustic.encode_text(utts[0].phone_sequence, models.text_encoder, gen.inventory)
    assert text.shape == (len(utts[0].phone_sequence), 4)
    with pytest.raises(ValidationError):
        acoustic.encode_text([], models.text_encoder, gen.inventory)
    with pytest.raises(ValidationError):
        acoustic.encode_text(["ZZZ"], models.text_encoder, gen.inventory)


def test_style_sequence_has_one_row_per_phone(tiny):
    gen, models, utts, _ = tiny
    for u in utts:
        seq = acoustic.utterance_style_sequence(u, models.style_model)
        assert seq.shape == (len(u.phone_sequence), 4)


def test_acoustic_forward_teacher_and_free_run(tiny):
    _, models, utts, _ = tiny
    combined = np.zeros((4, 8), np.float32)
    out = acoustic.acoustic_forward(combined, models.acoustic_model, teacher=np.zeros((5, N_MELS)))
    assert out.frames.shape == (5, N_MELS) and out.alignment.shape == (5, 4)
    np.testing.assert_allclose(out.alignment.sum(1), 1.0, atol=1e-5)
    free = acoustic.acoustic_forward(combined, models.acoustic_model, max_frames=7)
    assert 1 <= len(free.frames) <= 7
    assert free.truncated == (len(free.frames) == 7 and free.gates[-1] < 0.5)


def test_predict_style_routes_through_text_encoder(tiny):
    gen, models, utts, _ = tiny
    phones = utts[1].phone_sequence
    direct = models.predictor.predict(acoustic.encode_text(phones, models.text_encoder, gen.inventory))
    assert np.array_equal(acoustic.predict_style(phones, models.text_encoder, models.predictor, gen.inventory),
                          direct)
    assert direct.shape == (len(phones), 4)


# --- generation ----------------------------------------------------------------------

def test_transfer_to_self_equals_reconstruct(tiny):
    _, models, utts, _ = tiny
    a = synth.reconstruct(utts[0], models)
    b = synth.transfer(utts[0].phone_sequence, utts[0], models)
    assert a.mel.frames.tobytes() == b.mel.frames.tobytes()


def test_transfer_uses_interpolated_reference_style(tiny):
    _, models, utts, _ = tiny
    src, ref = utts[0], utts[2]
    res = synth.transfer(src.phone_sequence, ref, models)
    ref_style = plcsd.encode_style(segment_utterance(ref), models.style_model)
    expected = synth.interpolate_style_sequence(ref_style, len(src.phone_sequence))
    assert np.array_equal(res.style_seq, expected)
    assert res.combined.shape == (len(src.phone_sequence), 8)


def test_tts_needs_predictor(tiny):
    gen, models, utts, _ = tiny
    res = synth.synthesize_tts(utts[0].phone_sequence, models)
    assert res.mel.n_mels == N_MELS
    bare = synth.SynthesisModels(models.style_model, models.text_encoder, models.acoustic_model)
    with pytest.raises(ValidationError):
        synth.synthesize_tts(utts[0].phone_sequence, bare)


def test_request_validation(tiny):
    _, _, utts, _ = tiny
    with pytest.raises(ValidationError):
        synth.GenerationRequest("sing").validate()
    with pytest.raises(ValidationError):
        synth.GenerationRequest("transfer", ["AA"]).validate()
    with pytest.raises(ValidationError):
        synth.GenerationRequest("tts").validate()
    synth.GenerationRequest("reconstruct", reference=utts[0]).validate()


def test_run_request_writes_outputs(tiny, tmp_path):
    _, models, utts, _ = tiny
    req = synth.GenerationRequest("transfer", utts[1].phone_sequence, utts[0], str(tmp_path / "o" / "x"))
    side = synth.run_request(req, models, MelConfig(), extra_sidecar={"run": "t"})
    mel = load_mel(tmp_path / "o" / "x.mel")
    meta = json.loads((tmp_path / "o" / "x.json").read_text())
    assert meta == side
    assert meta["mode"] == "transfer" and meta["reference_id"] == utts[0].id
    assert meta["n_frames"] == mel.n_frames and meta["checkpoint_hashes"] == {"plcsd": "x"} and meta["run"] == "t"
    # a 6-band mel cannot be vocoded with an 80-band configuration
    assert not (tmp_path / "o" / "x.wav").exists()


# --- vocoder ----------------------------------------------------------------------------

def test_vocoder_contracts():
    cfg = MelConfig()
    floor = MelSpectrogram(np.full((10, cfg.n_mels), np.log(cfg.log_floor), np.float32), cfg.frame_shift)
    x = synth.vocode(floor, cfg, VocoderConfig(n_iter=5))
    assert len(x) == 10 * cfg.hop_length
    assert np.max(np.abs(x)) < 1e-3
    t = np.arange(cfg.sample_rate // 4) / cfg.sample_rate
    mel = compute_mel(0.5 * np.sin(2 * np.pi * 440 * t), cfg.sample_rate, cfg)
    a = synth.vocode(mel, cfg, VocoderConfig(n_iter=10))
    assert np.array_equal(a, synth.vocode(mel, cfg, VocoderConfig(n_iter=10)))
    assert np.all(np.isfinite(a)) and len(a) == mel.n_frames * cfg.hop_length
    # the reconstruction keeps its energy where the tone was
    spec = np.abs(np.fft.rfft(a))
    peak = np.fft.rfftfreq(len(a), 1 / cfg.sample_rate)[spec.argmax()]
    assert abs(peak - 440) < 40
    with pytest.raises(ValidationError):
        synth.vocode(MelSpectrogram(np.zeros((3, 5), np.float32), 0.01), cfg)

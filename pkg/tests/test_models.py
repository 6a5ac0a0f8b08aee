import math
import shlex
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noisysed import backend
from noisysed.audio import AnalysisConfig, Spectrogram, Waveform, mel_spectrogram
from noisysed.augment import NoisePool, RuleSelector, augment_clip, draw_noise_events, select_noise_rulebased
from noisysed.errors import BackendError, CalibrationError, ShapeMismatch, UnknownQuery
from noisysed.events import EventInstance, Timeline, weak_from_strong
from noisysed.models import (
    BCE_EPS,
    LassModelHandle,
    SedModelHandle,
    _fit_logistic,
    active_frame_mask,
    bce_loss,
    calibrate_reference_sed,
    ema_update,
    finetune_reference_sed,
    lass_separate,
    load_model,
    pool_frames,
    reference_lass,
    save_model,
    sed_infer,
    sigmoid,
)
from noisysed.psds import macro_recall
from noisysed.scenes import (
    TARGET_CLASSES,
    SceneSpec,
    compose_scene,
    derive_seed,
    fixture_ontology,
    fixture_prototypes,
    make_noisy_clip,
    random_scene_spec,
    render_event,
)

CFG = AnalysisConfig()
SR = 16000
STUB = Path(__file__).parent / "stubs" / "backend_stub.py"
PROTOS = fixture_prototypes()


def stub_address(n):
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(STUB))} {n}"


def band_energy(x, band):
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / SR)
    return spec[(f >= band[0]) & (f <= band[1])].sum()


@pytest.fixture(scope="module")
def theta():
    scenes = [random_scene_spec(f"c{i}", i, TARGET_CLASSES, force_class=TARGET_CLASSES[i % 10]) for i in range(60)]
    rendered = [compose_scene(s, PROTOS) for s in scenes]
    return calibrate_reference_sed(
        ((mel_spectrogram(w, CFG), tl) for w, tl in rendered), TARGET_CLASSES, CFG, context_frames=15
    )


# --- loss and EMA -----------------------------------------------------------


def bce_oracle(ps, ys, pw, yw):
    def term(p, y):
        total = 0.0
        for pi, yi in zip(np.ravel(p), np.ravel(y)):
            pi = min(max(pi, BCE_EPS), 1 - BCE_EPS)
            total += -(yi * math.log(pi) + (1 - yi) * math.log(1 - pi))
        return total / np.size(p)

    return term(ps, ys) + term(pw, yw)


class TestBce:
    def test_uniform_half_is_two_ln2(self):
        rng = np.random.default_rng(0)
        ys = rng.integers(0, 2, (50, 10))
        yw = rng.integers(0, 2, 10)
        assert abs(bce_loss(np.full((50, 10), 0.5), np.full(10, 0.5), ys, yw) - 2 * math.log(2)) <= 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            t, n = rng.integers(1, 20), rng.integers(1, 6)
            ps, pw = rng.random((t, n)), rng.random(n)
            ys, yw = rng.integers(0, 2, (t, n)), rng.integers(0, 2, n)
            assert abs(bce_loss(ps, pw, ys, yw) - bce_oracle(ps, ys, pw, yw)) <= 1e-12

    def test_perfect_prediction_is_near_zero(self):
        y = np.array([[0, 1], [1, 0]])
        loss = bce_loss(y.astype(float), np.array([1.0, 0.0]), y, np.array([1, 0]))
        assert 0 <= loss <= 2 * -math.log(1 - BCE_EPS) + 1e-15

    @given(st.floats(0.0, 1.0), st.integers(0, 1), st.floats(0.01, 0.99))
    def test_decreases_toward_label(self, p, y, step):
        q = p + step * (y - p)
        if q == p:
            return
        before = bce_loss([[p]], [p], [[y]], [y])
        after = bce_loss([[q]], [q], [[y]], [y])
        assert after <= before

    def test_accepts_prediction_objects(self):
        from noisysed.events import ClipPrediction, FrameGrid

        fg = FrameGrid("c", np.full((3, 2), 0.5), 0.016)
        cp = ClipPrediction("c", np.full(2, 0.5))
        assert bce_loss(fg, cp, np.zeros((3, 2)), np.zeros(2)) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            bce_loss(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(2))


class TestEma:
    def test_closed_form(self):
        assert ema_update([1.0], [0.0], 0.999)[0] == 0.999
        assert np.array_equal(ema_update([3.0, 4.0], [3.0, 4.0]), [3.0, 4.0])
        assert np.array_equal(ema_update([1.0, 2.0], [5.0, 6.0], 0.0), [5.0, 6.0])

    @given(
        arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
        arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
        st.floats(0.0, 0.999),
    )
    def test_contraction_toward_student(self, t, s, d):
        out = ema_update(t, s, d)
        assert np.allclose(np.abs(out - s), d * np.abs(t - s), rtol=1e-12, atol=1e-9)

    def test_errors(self):
        with pytest.raises(ShapeMismatch):
            ema_update([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            ema_update([1.0], [1.0], 1.0)


# --- SED --------------------------------------------------------------------


class TestSedInfer:
    def test_single_event_argmax(self, theta):
        for c in TARGET_CLASSES:
            spec = SceneSpec("s", 3.0, ((c, 1.0, 1.0, 1.0),), seed=2)
            wav, _ = compose_scene(spec, PROTOS)
            _, clip = sed_infer(theta, mel_spectrogram(wav, CFG))
            assert TARGET_CLASSES[int(np.argmax(clip.probs))] == c

    def test_silence_stays_low(self, theta):
        _, clip = sed_infer(theta, mel_spectrogram(Waveform.silence(3 * SR), CFG))
        assert np.all(clip.probs <= 0.1)

    def test_clip_is_max_over_frames(self, theta):
        wav, _ = compose_scene(random_scene_spec("c", 5, TARGET_CLASSES), PROTOS)
        frames, clip = sed_infer(theta, mel_spectrogram(wav, CFG))
        assert np.array_equal(clip.probs, frames.probs.max(axis=0))

    @given(arrays(np.float64, (7, 3), elements=st.floats(0.0, 1.0)))
    def test_pooling(self, p):
        assert np.array_equal(pool_frames(p, "max"), p.max(axis=0))
        lin = pool_frames(p, "linear-softmax")
        assert np.all(lin <= p.max(axis=0) + 1e-12)

    def test_rejects_linear_spectrogram(self, theta):
        x = Spectrogram(np.ones((4, 513)), 0.016, "linear-magnitude", SR)
        with pytest.raises(ValueError):
            sed_infer(theta, x)

    def test_rejects_wrong_band_count(self, theta):
        with pytest.raises(ShapeMismatch):
            sed_infer(theta, Spectrogram(np.ones((4, 32)), 0.016, "mel", SR))

    def test_sigmoid_is_stable(self):
        assert sigmoid(1e4) == 1.0
        assert sigmoid(-1e4) == 0.0
        assert sigmoid(0.0) == 0.5


class TestCalibration:
    def test_single_clip_templates_are_active_frame_means(self):
        classes = ("dog", "cat")
        examples = []
        for i, c in enumerate(classes):
            wav, tl = compose_scene(SceneSpec(f"s{i}", 3.0, ((c, 0.5, 2.0, 1.0),), seed=i), PROTOS)
            examples.append((mel_spectrogram(wav, CFG), tl))
        m = calibrate_reference_sed(examples, classes, CFG)
        for j, (mel, tl) in enumerate(examples):
            mask = active_frame_mask(tl, classes, mel.n_frames, mel.frame_hop_seconds, CFG.win_length / SR)
            mean = mel.values[mask[:, j]].mean(axis=0)
            assert np.allclose(m.templates[j], mean / np.linalg.norm(mean), atol=1e-12)

    def test_class_without_frames_is_named(self):
        wav, tl = compose_scene(SceneSpec("s", 2.0, (("dog", 0.5, 1.0, 1.0),)), PROTOS)
        with pytest.raises(CalibrationError, match="cat"):
            calibrate_reference_sed([(mel_spectrogram(wav, CFG), tl)], ("dog", "cat"), CFG)

    def test_empty_set(self):
        with pytest.raises(CalibrationError):
            calibrate_reference_sed([], ("dog",), CFG)

    def test_separable_scores_map_to_point_one_and_point_nine(self):
        pos, neg = np.array([0.8, 0.9]), np.array([0.2, 0.4])
        slope, bias, t = _fit_logistic(pos, neg)
        assert t == pytest.approx(0.6)
        assert sigmoid(slope * pos.min() + bias) >= 0.9
        assert sigmoid(slope * neg.max() + bias) <= 0.1
        assert sigmoid(bias) <= 0.1

    def test_overlapping_scores_weigh_misses(self):
        pos = np.array([0.3, 0.9, 0.9])
        neg = np.array([0.5, 0.1])
        # cutting below 0.3 costs one alarm, above it one miss
        assert _fit_logistic(pos, neg, miss_cost=2.0)[2] < 0.3
        assert _fit_logistic(pos, neg, miss_cost=0.5)[2] > 0.3

    def test_recall_on_held_out_clean_set(self, theta):
        preds, weak = [], []
        for i in range(20):
            spec = random_scene_spec(f"h{i}", 1000 + i, TARGET_CLASSES)
            wav, tl = compose_scene(spec, PROTOS)
            preds.append(sed_infer(theta, mel_spectrogram(wav, CFG), spec.clip_id)[1])
            weak.append(weak_from_strong(tl))
        assert macro_recall(preds, weak, 0.5, TARGET_CLASSES) == 1.0

    def test_model_file_round_trip(self, theta, tmp_path):
        save_model(theta, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert np.array_equal(back.templates, theta.templates)
        assert np.array_equal(back.slope, theta.slope)
        assert back.context_frames == theta.context_frames

    def test_model_file_header_checked(self, theta):
        d = theta.to_dict()
        with pytest.raises(ValueError):
            SedModelHandle.from_dict({**d, "version": 99})
        with pytest.raises(ValueError):
            SedModelHandle.from_dict({**d, "model": "lass"})


class TestFinetune:
    def test_needs_epochs(self, theta):
        wav, tl = compose_scene(SceneSpec("s", 2.0, (("dog", 0.5, 1.0, 1.0),)), PROTOS)
        with pytest.raises(CalibrationError):
            finetune_reference_sed(theta, [(mel_spectrogram(wav, CFG), tl)], [], CFG)

    def test_undetected_frames_leave_templates_alone(self, theta):
        # frames labelled "dog" that hold only rain are never detected as dog,
        # so they must not leak into the dog template
        base = []
        for i, c in enumerate(TARGET_CLASSES):
            wav, tl = compose_scene(SceneSpec(f"b{i}", 2.0, ((c, 0.5, 1.0, 1.0),), seed=i), PROTOS)
            base.append((mel_spectrogram(wav, CFG), tl))
        rain = Waveform(render_event(PROTOS["rain"], 2.0, seed=4).samples)
        tl = Timeline("r", 2.0, (EventInstance("dog", 0.5, 1.5),))
        tuned = finetune_reference_sed(theta, base, [base + [(mel_spectrogram(rain, CFG), tl)]], CFG)
        ref = calibrate_reference_sed(base + base, TARGET_CLASSES, CFG, context_frames=theta.context_frames)
        j = TARGET_CLASSES.index("dog")
        assert np.allclose(tuned.templates[j], ref.templates[j], atol=1e-12)

    def test_class_without_positives_is_named(self, theta):
        wav, tl = compose_scene(SceneSpec("s", 2.0, (("dog", 0.5, 1.0, 1.0),)), PROTOS)
        ex = [(mel_spectrogram(wav, CFG), tl)]
        base = []
        for i, c in enumerate(TARGET_CLASSES):
            w, t = compose_scene(SceneSpec(f"b{i}", 2.0, ((c, 0.5, 1.0, 1.0),), seed=i), PROTOS)
            base.append((mel_spectrogram(w, CFG), t))
        with pytest.raises(CalibrationError, match="alarm_bell_ringing"):
            finetune_reference_sed(theta, base, [ex], CFG)

    def test_noisy_finetune_beats_theta_recall_at_0db(self):
        # pooled over three seeds: recalibrating on -5 dB scenes never lowers the
        # clip-wise recall at 0 dB and raises it overall
        onto = fixture_ontology()
        totals = {"theta": 0.0, "alpha": 0.0}
        for seed in range(3):
            pool = NoisePool.synthetic(onto, seed)
            cal = [
                compose_scene(
                    random_scene_spec(f"c{i}", derive_seed(seed, "calibrate", i), TARGET_CLASSES,
                                      force_class=TARGET_CLASSES[i % 10]),
                    PROTOS,
                )
                for i in range(60)
            ]
            mels = [(mel_spectrogram(w, CFG), tl) for w, tl in cal]
            th = calibrate_reference_sed(mels, TARGET_CLASSES, CFG, context_frames=15)

            def epoch():
                for i, (w, tl) in enumerate(cal):
                    y, _ = augment_clip(w, weak_from_strong(tl), pool, RuleSelector(onto), -5.0,
                                        derive_seed(seed, "ft", i), PROTOS)
                    yield mel_spectrogram(y, CFG), tl

            al = finetune_reference_sed(th, mels, [epoch()], CFG)
            preds = {"theta": [], "alpha": []}
            weak = []
            for i in range(40):
                spec = random_scene_spec(f"t{i}", derive_seed(seed, "test", i), TARGET_CLASSES)
                wav, tl = compose_scene(spec, PROTOS)
                wk = weak_from_strong(tl)
                sel = select_noise_rulebased(wk, onto)
                noisy = make_noisy_clip(wav, draw_noise_events(sel, pool, derive_seed(seed, "tn", i)), 0.0, PROTOS)
                mel = mel_spectrogram(noisy, CFG)
                weak.append(wk)
                preds["theta"].append(sed_infer(th, mel, spec.clip_id)[1])
                preds["alpha"].append(sed_infer(al, mel, spec.clip_id)[1])
            r = {k: macro_recall(v, weak, 0.5, TARGET_CLASSES) for k, v in preds.items()}
            assert r["alpha"] >= r["theta"]
            for k in totals:
                totals[k] += r[k]
        assert totals["alpha"] > totals["theta"]


# --- separation -------------------------------------------------------------


class TestLass:
    lass = reference_lass(PROTOS, TARGET_CLASSES, CFG)

    def test_two_band_mixture(self):
        a = render_event(PROTOS["dog"], 2.0, seed=1).samples
        b = render_event(PROTOS["frying"], 2.0, seed=2).samples
        out = lass_separate(self.lass, Waveform(a + b), "dog").samples
        assert band_energy(out, PROTOS["dog"].band) >= 0.9 * band_energy(a, PROTOS["dog"].band)
        assert band_energy(out, PROTOS["frying"].band) <= 0.1 * band_energy(b, PROTOS["frying"].band)

    def test_absent_class_query(self):
        a = Waveform(render_event(PROTOS["dog"], 2.0, seed=1).samples)
        out = lass_separate(self.lass, a, "vacuum_cleaner")
        assert np.sum(out.samples**2) <= 0.05 * np.sum(a.samples**2)

    def test_silence(self):
        out = lass_separate(self.lass, Waveform.silence(SR), "dog")
        assert len(out) == SR
        assert np.allclose(out.samples, 0.0, atol=1e-15)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=4000), rng.normal(size=4000)
        lhs = lass_separate(self.lass, Waveform(alpha * x + beta * y), "cat").samples
        rhs = alpha * lass_separate(self.lass, Waveform(x), "cat").samples + beta * lass_separate(
            self.lass, Waveform(y), "cat"
        ).samples
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_unknown_query(self):
        with pytest.raises(UnknownQuery):
            lass_separate(self.lass, Waveform.silence(SR), "kazoo")

    def test_mask_bounds_checked(self):
        with pytest.raises(ValueError):
            LassModelHandle("reference-mask", {"x": np.full(CFG.n_freqs, 1.5)})
        with pytest.raises(ShapeMismatch):
            LassModelHandle("reference-mask", {"x": np.ones(10)})

    def test_round_trip(self, tmp_path):
        save_model(self.lass, tmp_path / "l.json")
        back = load_model(tmp_path / "l.json")
        assert back.mask_table.keys() == self.lass.mask_table.keys()
        assert all(np.array_equal(back.mask_table[k], v) for k, v in self.lass.mask_table.items())


# --- external backends ------------------------------------------------------


class TestBackendProtocol:
    @given(
        st.text(),
        arrays(np.float64, (3, 4), elements=st.floats(0, 1e6)),
        st.floats(1e-3, 1.0),
    )
    def test_sed_request_round_trip(self, rid, mel, hop):
        msg = backend.decode_request(backend.encode_sed_request(rid, mel, hop))
        assert msg["id"] == rid and msg["hop_seconds"] == hop
        assert np.array_equal(msg["mel"], mel)

    @given(st.text(), arrays(np.float64, 16, elements=st.floats(-1, 1)), st.text())
    def test_separate_request_round_trip(self, rid, audio, query):
        msg = backend.decode_request(backend.encode_separate_request(rid, audio, 16000, query))
        assert (msg["id"], msg["sample_rate"], msg["query"]) == (rid, 16000, query)
        assert np.array_equal(msg["audio"], audio)

    @given(st.text(), arrays(np.float64, (2, 3), elements=st.floats(0, 1)))
    def test_responses_round_trip(self, rid, probs):
        msg = backend.decode_response(backend.encode_sed_response(rid, probs, probs[0]), rid)
        assert np.array_equal(msg["framewise"], probs)
        msg = backend.decode_response(backend.encode_separate_response(rid, probs[0]), rid)
        assert np.array_equal(msg["audio"], probs[0])

    def test_bad_responses(self):
        with pytest.raises(BackendError):
            backend.decode_response("", "r1")
        with pytest.raises(BackendError):
            backend.decode_response('{"id": "r2", "audio": []}', "r1")
        with pytest.raises(BackendError, match="boom"):
            backend.decode_response('{"id": "r1", "error": "boom"}', "r1")
        with pytest.raises(BackendError):
            backend.decode_request('{"op": "train", "id": "x"}')

    def test_child_process_sed(self):
        m = SedModelHandle("external-backend", ("a", "b"), address=stub_address(2))
        frames, clip = sed_infer(m, Spectrogram(np.ones((5, 64)), 0.016, "mel", SR), "c1")
        assert frames.probs.shape == (5, 2)
        assert np.all(frames.probs == 0.25) and np.all(clip.probs == 0.25)

    def test_child_process_separation(self):
        m = LassModelHandle("external-backend", address=stub_address(2))
        x = Waveform(np.linspace(-1, 1, 100))
        assert np.allclose(lass_separate(m, x, "dog").samples, 0.5 * x.samples)
        with pytest.raises(BackendError, match="cannot separate"):
            lass_separate(m, x, "broken")

    def test_dead_backend(self):
        m = SedModelHandle("external-backend", ("a",), address=f"{shlex.quote(sys.executable)} -c pass")
        with pytest.raises(BackendError, match="c9"):
            sed_infer(m, Spectrogram(np.ones((2, 64)), 0.016, "mel", SR), "c9")

"""Exporter conformance tests.

No pretrained weights are reachable in the test environment, so every test
uses the seeded random-init fallback. That preserves everything these tests
check: output geometry (width 768, 50 fps, frame count from the model's
320x downsampling), file format, and rerun determinism.
"""

import warnings

import numpy as np
import pytest
import scipy.io.wavfile

from hubert_exporter.export import (ExportJob, extract_features, load_audio,
                                    load_model, export, write_sft)
from speechface.features import Provenance, load_features

SR = 16000


@pytest.fixture(scope="module")
def model():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return load_model(model_path=None, random_init_seed=0)


def write_wav(path, seconds, freq=220.0):
    t = np.arange(int(seconds * SR)) / SR
    samples = (0.4 * np.sin(2 * np.pi * freq * t)).astype(np.float32)
    scipy.io.wavfile.write(path, SR, samples)
    return path


def run_export(tmp_path, wavs, sub="out"):
    job = ExportJob(inputs=wavs, out_dir=tmp_path / sub, random_init_seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return export(job)


def test_one_second_clip_geometry(tmp_path):
    wav = write_wav(tmp_path / "one.wav", 1.0)
    (out,) = run_export(tmp_path, [wav])
    f = load_features(out)
    assert f.data.shape[1] == 768
    assert f.fps == 50.0
    assert abs(f.data.shape[0] - 50) <= 1
    assert f.provenance == Provenance.PRETRAINED_EXPORT


def test_bit_exact_roundtrip(tmp_path, model):
    samples = load_audio(write_wav(tmp_path / "clip.wav", 0.5))
    features = extract_features(model, samples)
    write_sft(features, tmp_path / "clip.sft")
    loaded = load_features(tmp_path / "clip.sft")
    assert loaded.data.dtype == np.float64
    assert np.array_equal(loaded.data.astype(np.float32), features)


def test_rerun_determinism(tmp_path):
    wav = write_wav(tmp_path / "clip.wav", 1.0)
    (a,) = run_export(tmp_path, [wav], "r1")
    (b,) = run_export(tmp_path, [wav], "r2")
    assert a.read_bytes() == b.read_bytes()


def test_silence_is_finite(tmp_path):
    scipy.io.wavfile.write(tmp_path / "sil.wav", SR, np.zeros(SR, np.float32))
    (out,) = run_export(tmp_path, [tmp_path / "sil.wav"])
    assert np.isfinite(load_features(out).data).all()


def test_frame_count_scales_with_duration(tmp_path, model):
    counts = {}
    for seconds in (1.0, 2.0):
        samples = load_audio(write_wav(tmp_path / f"{seconds}.wav", seconds))
        counts[seconds] = extract_features(model, samples).shape[0]
    assert abs(counts[2.0] - counts[1.0] - 50) <= 1


def test_stereo_and_int16_and_resample(tmp_path, model):
    t = np.arange(22050) / 22050
    mono = 0.3 * np.sin(2 * np.pi * 180 * t)
    stereo = (np.stack([mono, mono], axis=1) * 32767).astype(np.int16)
    scipy.io.wavfile.write(tmp_path / "st.wav", 22050, stereo)
    samples = load_audio(tmp_path / "st.wav")
    assert samples.ndim == 1
    assert abs(len(samples) - SR) <= 1
    assert extract_features(model, samples).shape[1] == 768


def test_unreadable_audio_raises(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file")
    with pytest.raises(Exception, match="cannot read audio"):
        run_export(tmp_path, [bad])


def test_missing_model_without_fallback_raises(tmp_path):
    from hubert_exporter.export import ModelLoadError
    with pytest.raises(ModelLoadError):
        load_model(model_path=tmp_path / "nope", random_init_seed=None)


def test_cli_roundtrip(tmp_path, capsys):
    from hubert_exporter.cli import main
    wav = write_wav(tmp_path / "clip.wav", 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc = main(["--in", str(wav), "--out", str(tmp_path / "cli"),
                   "--random-init-seed", "0"])
    assert rc == 0
    printed = capsys.readouterr().out.strip()
    assert load_features(printed).data.shape[1] == 768

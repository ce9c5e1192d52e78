import struct

import numpy as np
import pytest

from vrnn import data as D
from vrnn.errors import ContractError, DimensionError, FormatError


def test_wav_fixture(fixtures_dir):
    wav = D.load_wav((fixtures_dir / "four_samples.wav").read_bytes())
    assert (wav.rate, wav.channels, wav.n_samples) == (16000, 1, 4)
    assert wav.data[:, 0].tolist() == [0, 1000, -32768, 32767]


def test_wav_stereo_becomes_mean():
    wav = D.load_wav(D.encode_wav(8000, np.array([[100, 300], [-2, 4]], dtype=np.int16)))
    assert wav.channels == 2 and wav.mono().tolist() == [200.0, 1.0]


def test_wav_errors_carry_offsets(fixtures_dir):
    good = (fixtures_dir / "four_samples.wav").read_bytes()
    with pytest.raises(FormatError, match="offset 0"):
        D.load_wav(b"RIFX" + good[4:])
    with pytest.raises(FormatError, match="runs past end"):
        D.load_wav(good[:-2])
    eight_bit = good[:34] + struct.pack("<H", 8) + good[36:]
    with pytest.raises(FormatError, match="bit depth 8"):
        D.load_wav(eight_bit)
    float_fmt = good[:20] + struct.pack("<H", 3) + good[22:]
    with pytest.raises(FormatError, match="format code 3"):
        D.load_wav(float_fmt)


def test_wav_skips_unknown_chunks():
    base = D.encode_wav(16000, np.array([1, 2, 3], dtype=np.int16))
    extra = b"LIST" + struct.pack("<I", 3) + b"abc\x00"
    body = base[12:]
    buf = b"RIFF" + struct.pack("<I", 4 + len(extra) + len(body)) + b"WAVE" + extra + body
    assert D.load_wav(buf).data[:, 0].tolist() == [1, 2, 3]


def test_framing_rules():
    wav = D.load_wav(D.encode_wav(16000, (np.arange(8000) % 700 - 350).astype(np.int16)))
    frames = D.frame(wav)
    assert frames.shape == (40, 200)
    assert np.array_equal(frames.reshape(-1), (np.arange(8000) % 700 - 350) / 32768.0)
    short = D.load_wav(D.encode_wav(16000, np.zeros(399, dtype=np.int16)))
    assert D.frame(short).shape == (1, 200)
    with pytest.raises(ContractError):
        D.frame(D.load_wav(D.encode_wav(16000, np.zeros(199, dtype=np.int16))))
    assert D.frame(D.WavFile(1, 1, np.array([[-32768]] * 2, dtype=np.int16)), 2).tolist() == [[-1.0, -1.0]]


def test_normalization_round_trip_and_moments(rng):
    ds = D.SequenceDataset([rng.normal(3, 2, size=(n, 4)) for n in (30, 50, 20)], 4)
    stats = D.compute_stats(ds)
    norm = D.normalize(ds, stats)
    allf = np.concatenate(norm.sequences).astype(np.float64)
    assert np.abs(allf.mean(axis=0)).max() < 1e-5 and np.abs(allf.std(axis=0) - 1).max() < 1e-4
    back = D.denormalize(norm, stats)
    assert max(np.abs(a - b).max() for a, b in zip(back.sequences, ds.sequences)) < 1e-6
    with pytest.raises(DimensionError):
        D.normalize(D.SequenceDataset([np.zeros((2, 3))], 3), stats)


def test_constant_dimension_uses_floor():
    ds = D.SequenceDataset([np.column_stack([np.full(5, 7.0), np.arange(5.0)])], 2)
    stats = D.compute_stats(ds)
    assert stats.std[0] == D.STD_FLOOR
    assert (D.normalize(ds, stats).sequences[0][:, 0] == 0).all()


def test_stats_json_round_trip():
    s = D.NormalizationStats(np.array([0.1, -2.0]), np.array([1.5, 0.25]))
    t = D.NormalizationStats.from_json(s.to_json())
    assert t.mean.tobytes() == s.mean.tobytes() and t.std.tobytes() == s.std.tobytes()


def test_split_partition_law(rng):
    seqs = [np.full((1, 1), i, dtype=float) for i in range(100)]
    ds = D.SequenceDataset(seqs, 1)
    tr, va, te = D.split(ds, 5)
    assert (len(tr), len(va), len(te)) == (90, 5, 5)
    ids = sorted(int(s[0, 0]) for part in (tr, va, te) for s in part.sequences)
    assert ids == list(range(100))
    same = D.split(ds, 5)[0]
    other = D.split(ds, 6)[0]
    first = [int(s[0, 0]) for s in tr.sequences]
    assert first == [int(s[0, 0]) for s in same.sequences]
    assert first != [int(s[0, 0]) for s in other.sequences]
    with pytest.raises(ContractError):
        D.split(D.SequenceDataset(seqs[:19], 1), 0)


def test_synth_is_seeded_and_switch_rate_matches():
    a = D.synth_regime_switching(5, 50, 8, 3)
    b = D.synth_regime_switching(5, 50, 8, 3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.sequences, b.sequences))
    big = D.synth_regime_switching(100, 1001, 2, 11)
    switches = sum(len(D.switch_points(s)) for s in big.labels)
    n = 100 * 1000
    sd = np.sqrt(n * 0.05 * 0.95)
    assert abs(switches - 0.05 * n) < 3 * sd


def test_synth_spectral_peak_per_state():
    d = 16
    ds = D.synth_regime_switching(40, 60, d, 2, cycles=(1, 3))
    for state, cyc in ((0, 1), (1, 3)):
        frames = np.concatenate([s[lab == state] for s, lab in zip(ds.sequences, ds.labels)])
        spectrum = np.abs(np.fft.rfft(frames.astype(np.float64), axis=1)).mean(axis=0)
        assert int(np.argmax(spectrum)) == cyc


def test_container_round_trip_and_errors(tmp_path, rng):
    ds = D.SequenceDataset([rng.normal(size=(n, 3)) for n in (4, 1, 7)], 3)
    path = tmp_path / "x.vseq"
    D.container_write(ds, path)
    back = D.container_read(path)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ds.sequences, back.sequences))
    buf = path.read_bytes()
    with pytest.raises(FormatError, match="magic"):
        D.container_parse(b"XSEQ" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        D.container_parse(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(FormatError, match="truncated"):
        D.container_parse(buf[:-1])
    with pytest.raises(FormatError, match="trailing"):
        D.container_parse(buf + b"\x00")


def test_empty_container(tmp_path):
    path = tmp_path / "empty.vseq"
    D.container_write(D.SequenceDataset([], 0), path)
    assert path.read_bytes() == b"VSEQ" + struct.pack("<II", 1, 0)
    assert len(D.container_read(path)) == 0


def test_container_fixture_is_stable(fixtures_dir):
    ds = D.container_read(fixtures_dir / "two_seqs.vseq")
    assert [s.shape for s in ds.sequences] == [(3, 2), (1, 2)]
    assert ds.sequences[1].tolist() == [[-1.0, 4.0]]


def test_strokes_offsets_and_errors():
    ds = D.load_strokes("0 0 0\n1 2 1\n\n5 5 1\n6 4 0\n8 4 1\n")
    assert len(ds) == 2
    assert ds.sequences[0].tolist() == [[0, 0, 0], [1, 2, 1]]
    absolute = np.cumsum(ds.sequences[1][:, :2], axis=0)
    assert absolute.tolist() == [[5, 5], [6, 4], [8, 4]]
    with pytest.raises(FormatError, match="offset 2"):
        D.load_strokes("0 0 0\n1 2 2\n")
    with pytest.raises(FormatError, match="offset 1"):
        D.load_strokes("0 0\n")


def test_batches_have_prefix_masks(rng):
    seqs = [rng.normal(size=(n, 2)) for n in (3, 1, 2)]
    b = D.make_batch(seqs)
    assert b.mask.tolist() == [[1, 1, 1], [1, 0, 0], [1, 1, 0]]
    assert (b.values[1, 1:] == 0).all() and b.lengths.tolist() == [3, 1, 2]
    with pytest.raises(DimensionError):
        D.SequenceDataset([np.zeros((2, 2)), np.zeros((2, 3))])

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2i import data as D
from s2i.config import ConfigError

from oracles import bilinear_loop, bin_loop


def events(stamps, duration=1.0):
    return D.SpikeEventFile(list(range(len(stamps))), [np.asarray(s, dtype=np.float64) for s in stamps],
                            duration)


class TestBinning:
    def test_direct_count(self):
        ev = events([[0.001, 0.004, 0.012]])
        np.testing.assert_array_equal(D.bin_spikes(ev, 10, 20), [[2, 1]])

    def test_right_edge_exclusive(self):
        ev = events([[0.0, 0.01, 0.02]])
        np.testing.assert_array_equal(D.bin_spikes(ev, 10, 20), [[1, 1]])

    def test_no_spikes(self):
        out = D.bin_spikes(events([[], []]), 10, 50)
        assert out.shape == (2, 5) and not out.any()

    def test_offset_window(self):
        ev = events([[0.101, 0.109, 0.115, 0.3]])
        np.testing.assert_array_equal(D.bin_spikes(ev, 10, 20, t0=0.1), [[2, 1]])

    def test_matches_loop_oracle(self, rng):
        stamps = [np.sort(rng.uniform(0, 1.0, rng.integers(0, 60))) for _ in range(7)]
        ev = events(stamps)
        np.testing.assert_array_equal(D.bin_spikes(ev, 10, 200, t0=0.3), bin_loop(stamps, 0.3, 10, 20))

    def test_window_past_recording(self):
        with pytest.raises(IndexError):
            D.bin_spikes(events([[0.01]], duration=0.1), 10, 200)

    def test_window_not_multiple_of_bin(self):
        with pytest.raises(ConfigError):
            D.bin_spikes(events([[0.01]]), 10, 25)

    def test_conservation(self, rng):
        stamps = [np.sort(rng.uniform(0, 10.0, 1000)) for _ in range(100)]
        counts = D.bin_spikes(events(stamps, 10.0), 10, 10_000)
        assert counts.sum(dtype=np.int64) == 100_000

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            events([[0.2, 0.1]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), t0_bins=st.integers(0, 20), n_bins=st.integers(1, 30))
def test_conservation_within_window(seed, t0_bins, n_bins):
    rng = np.random.default_rng(seed)
    stamps = [np.sort(rng.uniform(0, 1.0, rng.integers(0, 40))) for _ in range(3)]
    t0 = t0_bins * 0.01
    counts = D.bin_spikes(events(stamps, 1.0), 10, 10 * n_bins, t0)
    edges = D.bin_edges(t0, 10, n_bins)
    inside = sum(int(((s >= edges[0]) & (s < edges[-1])).sum()) for s in stamps)
    assert counts.sum() == inside


def toy_dataset(n, shape=(4, 4)):
    spikes = np.arange(n * 2 * 3, dtype=np.float32).reshape(n, 2, 3)
    targets = np.stack([np.full(shape, i / max(n, 1)) for i in range(n)])
    return D.PairedDataset(spikes, targets, [f"i{k}" for k in range(n)])


class TestSplit:
    @pytest.mark.parametrize("n,expect", [(1800, (1440, 360)), (5, (4, 1))])
    def test_sizes(self, n, expect):
        train, test = D.split(toy_dataset(n), 0.8, seed=0)
        assert (len(train), len(test)) == expect

    def test_disjoint_and_complete(self):
        ds = toy_dataset(50)
        train, test = D.split(ds, 0.8, seed=3)
        assert not set(train.ids) & set(test.ids)
        assert set(train.ids) | set(test.ids) == set(ds.ids)
        assert train.split == "train" and test.split == "test"

    def test_seeded(self):
        ds = toy_dataset(1800)
        a, _ = D.split(ds, 0.8, seed=1)
        b, _ = D.split(ds, 0.8, seed=1)
        c, _ = D.split(ds, 0.8, seed=2)
        assert a.ids == b.ids
        assert a.ids != c.ids

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ConfigError):
            D.split(toy_dataset(5), fraction)


class TestShuffle:
    def test_pairs_preserved(self):
        ds = toy_dataset(20)
        sh = D.shuffle_frames(ds, seed=5)
        for i, item in enumerate(sh.ids):
            k = ds.ids.index(item)
            np.testing.assert_array_equal(sh.spikes[i], ds.spikes[k])
            np.testing.assert_array_equal(sh.targets[i], ds.targets[k])

    def test_seeded(self):
        ds = toy_dataset(20)
        assert D.shuffle_frames(ds, 4).ids == D.shuffle_frames(ds, 4).ids

    def test_uniform_over_orders(self):
        ds = toy_dataset(4)
        counts = dict.fromkeys(itertools.permutations(ds.ids), 0)
        trials = 10_000
        for s in range(trials):
            counts[tuple(D.shuffle_frames(ds, s).ids)] += 1
        p = 1 / 24
        sd = np.sqrt(trials * p * (1 - p))
        assert all(abs(c - trials * p) < 3 * sd for c in counts.values())


class TestPrepareImage:
    def test_constant(self):
        out = D.prepare_image(np.full((37, 23), 0.3), 16, 16)
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_checkerboard_halves_to_gray(self):
        board = (np.indices((32, 32)).sum(0) % 2).astype(np.float64)
        np.testing.assert_allclose(D.prepare_image(board, 16, 16), 0.5, atol=1e-12)

    def test_bilinear_oracle(self, rng):
        for shape, out in [((20, 13), (8, 9)), ((7, 7), (16, 11)), ((30, 40), (30, 17))]:
            img = rng.random(shape)
            np.testing.assert_allclose(D.resize_bilinear(img, *out), bilinear_loop(img, *out), atol=1e-5)

    def test_rgb_uint8(self):
        rgb = np.zeros((4, 4, 3), np.uint8)
        rgb[..., 0] = 255
        np.testing.assert_allclose(D.prepare_image(rgb, 4, 4), 1 / 3, atol=1e-12)

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            D.prepare_image(np.zeros((2, 2, 2, 2)), 2, 2)


class TestSynthetic:
    def test_zero_image_gives_baseline(self):
        cfg = D.SynthConfig(n_neurons=5, image_size=(16, 16), baseline=3.0)
        pop = D.make_population(cfg)
        np.testing.assert_allclose(D.expected_rates(np.zeros((2, 16, 16)), pop, cfg), 3.0)
        silent = D.synth_generate(np.zeros((3, 16, 16)), D.SynthConfig(n_neurons=5, image_size=(16, 16),
                                                                         baseline=0.0))
        assert not silent.spikes.any()

    def test_contrast_doubling_does_not_lower_rates(self, rng):
        cfg = D.SynthConfig(n_neurons=16, image_size=(16, 16))
        pop = D.make_population(cfg)
        imgs = rng.random((10, 16, 16))
        m = imgs.mean(axis=(1, 2), keepdims=True)
        r1 = D.expected_rates(imgs, pop, cfg)
        r2 = D.expected_rates(m + 2 * (imgs - m), pop, cfg)
        assert (r2 >= r1 - 1e-9).all()

    def test_poisson_mean(self):
        cfg = D.SynthConfig(n_neurons=4, image_size=(16, 16), gain=200.0, seed=9)
        img = D.stimulus_images(1, 16, seed=2)[0]
        ds = D.synth_generate(np.repeat(img[None], 2000, axis=0), cfg)  # 2000 stimuli x 5 bins
        counts = ds.spikes.transpose(1, 0, 2).reshape(4, -1)
        assert counts.shape[1] == 10_000
        lam = D.expected_rates(img[None], D.make_population(cfg), cfg)[0] * cfg.bin_ms / 1000
        se = np.sqrt(lam / counts.shape[1])
        assert (np.abs(counts.mean(axis=1) - lam) < 3 * se).all()

    def test_bit_identical_reruns(self):
        imgs = D.stimulus_images(6, 16, seed=1)
        cfg = D.SynthConfig(n_neurons=9, image_size=(16, 16), seed=4)
        a, b = D.synth_generate(imgs, cfg), D.synth_generate(imgs, cfg)
        assert a.spikes.tobytes() == b.spikes.tobytes()
        assert a.meta == b.meta

    def test_default_centres_cover_image(self):
        cfg = D.SynthConfig(n_neurons=64, image_size=(32, 32))
        c = D.make_population(cfg).centers
        assert c[:, 0].min() < 8 and c[:, 0].max() > 23
        assert c[:, 1].min() < 8 and c[:, 1].max() > 23
        assert D.make_population(cfg).sigmas[0] == pytest.approx(32 / 6)

    def test_filters_zero_mean_unit_norm(self):
        f = D.make_population(D.SynthConfig(n_neurons=8, image_size=(20, 20))).filters
        np.testing.assert_allclose(f.mean(axis=(1, 2)), 0, atol=1e-12)
        np.testing.assert_allclose((f ** 2).sum(axis=(1, 2)), 1, atol=1e-12)

    def test_centre_outside_image(self):
        with pytest.raises(ConfigError):
            D.make_population(D.SynthConfig(n_neurons=1, image_size=(8, 8), rf_centers=[(9.0, 1.0)]))

    def test_wrong_image_size(self):
        with pytest.raises(ConfigError):
            D.synth_generate(np.zeros((1, 8, 8)), D.SynthConfig(image_size=(16, 16)))


class TestFiles:
    def test_pgm_round_trip(self, tmp_path, rng):
        img = rng.random((9, 13))
        D.save_pgm(img, tmp_path / "a.pgm")
        back = D.load_pgm(tmp_path / "a.pgm")
        assert back.shape == (9, 13)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_pgm_endpoints(self, tmp_path):
        img = np.array([[0.0, 1.0]])
        D.save_pgm(img, tmp_path / "e.pgm")
        assert (tmp_path / "e.pgm").read_bytes().endswith(b"\x00\xff")
        np.testing.assert_array_equal(D.load_pgm(tmp_path / "e.pgm"), img)

    def test_pgm_comment_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x10\x20")
        np.testing.assert_allclose(D.load_pgm(tmp_path / "c.pgm"), [[16 / 255, 32 / 255]])

    def test_pgm_errors(self, tmp_path):
        (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(D.ParseError, match="binary PGM"):
            D.load_pgm(tmp_path / "p2.pgm")
        (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        with pytest.raises(D.ParseError, match="truncated"):
            D.load_pgm(tmp_path / "short.pgm")

    def test_csv_round_trip(self, tmp_path, rng):
        ev = D.counts_to_events(rng.poisson(2.0, (5, 4)), 10.0, rng)
        D.save_csv_events(ev, tmp_path / "e.csv")
        back = D.load_csv_events(tmp_path / "e.csv", duration=ev.duration, neuron_ids=range(5))
        for a, b in zip(ev.timestamps, back.timestamps):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(D.bin_spikes(back, 10, 40), D.bin_spikes(ev, 10, 40))

    def test_counts_to_events_rebins_exactly(self, rng):
        counts = rng.poisson(3.0, (6, 10))
        ev = D.counts_to_events(counts, 10.0, rng)
        np.testing.assert_array_equal(D.bin_spikes(ev, 10, 100), counts)

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "h.csv").write_text("neuron,time\n0,0.1\n")
        with pytest.raises(D.ParseError, match=r"h\.csv:1"):
            D.load_csv_events(tmp_path / "h.csv")

    def test_csv_bad_row_reports_line(self, tmp_path):
        (tmp_path / "r.csv").write_text("neuron_id,timestamp_s\n0,0.1\n1,abc\n")
        with pytest.raises(D.ParseError, match=r"r\.csv:3"):
            D.load_csv_events(tmp_path / "r.csv")

    def test_manifest_round_trip(self, tmp_path):
        cfg = D.SynthConfig(n_neurons=6, image_size=(16, 16), gain=100.0, seed=2)
        ds = D.synth_generate(D.stimulus_images(10, 16, seed=0), cfg)
        path = D.write_dataset(ds, cfg, tmp_path / "out")
        manifest = json.loads(path.read_text())
        assert manifest["seed"] == 2
        assert len(manifest["rf_centers"]) == 6
        parts = D.load_manifest(path)
        assert len(parts["train"]) == 8 and len(parts["test"]) == 2
        train = parts["train"]
        np.testing.assert_array_equal(train.spikes, ds.by_ids(train.ids).spikes)
        assert np.abs(train.targets - ds.by_ids(train.ids).targets).max() <= 0.5 / 255 + 1e-12

    def test_manifest_bad_format(self, tmp_path):
        (tmp_path / "m.json").write_text('{"format": "other"}')
        with pytest.raises(D.ParseError):
            D.read_manifest(tmp_path / "m.json")

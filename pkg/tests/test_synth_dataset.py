import json
from collections import Counter

import numpy as np
import pytest

from branchycsi.csi import SCENARIOS, Scenario, synth_capture, synth_dataset, synth_generate
from branchycsi.csi.dataset import (
    MANIFEST,
    DatasetFormatError,
    dataset_read,
    dataset_write,
    read_image,
    split_dataset,
    write_image,
)
from branchycsi.csi.pcap import parse_pcap, write_pcap
from branchycsi.csi.preprocess import frames_to_images
from branchycsi.csi.synth import label_schedule, synth_window, timeline_labels
from branchycsi.errors import ParameterError


def test_scenarios_cover_the_taxonomy():
    assert len(SCENARIOS) == 7
    assert Scenario(1, 2).name == "one_person/walk" and Scenario(0).name == "nobody"
    for bad in [(0, 1), (2, 0), (3, None), (1, 5)]:
        with pytest.raises(ParameterError):
            Scenario(*bad)


def test_label_schedule_proportions():
    sched = label_schedule(600)
    rod = Counter(s.rod_label for s in sched)
    har = Counter(s.har_label for s in sched if s.rod_label == 1)
    assert rod == {0: 150, 1: 300, 2: 150}
    assert set(har.values()) == {60}


def test_synth_is_deterministic_and_seed_sensitive():
    a = synth_dataset(8, seed=7)
    b = synth_dataset(8, seed=7)
    c = synth_dataset(8, seed=8)
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))
    assert any(x.values.tobytes() != y.values.tobytes() for x, y in zip(a, c))
    assert all(x.shape == (234, 300) for x in a)


def test_synth_window_is_int16_valued():
    raw = synth_window(Scenario(1, 2), np.random.default_rng(0), 50)
    assert raw.shape == (256, 50)
    assert np.all(raw.real == np.round(raw.real)) and np.abs(raw.real).max() < 32768


def test_generate_single_scenario():
    imgs = synth_generate((1, 4), seed=1, count=3, window=120)
    assert [(i.rod_label, i.har_label) for i in imgs] == [(1, 4)] * 3 and imgs[0].shape == (234, 120)
    with pytest.raises(ParameterError):
        synth_generate((0, None), seed=1, count=-1)


def test_capture_through_pcap_matches_direct_generation(tmp_path):
    segs = [(Scenario(1, 0), 300), (Scenario(0), 300)]
    frames = synth_capture(segs, seed=3)
    assert len(frames) == 600 and len(timeline_labels(segs)) == 600
    assert np.all(np.diff([f.timestamp_us for f in frames]) == 10_000)
    path = tmp_path / "cap.pcap"
    write_pcap(frames, path)
    parsed = list(parse_pcap(path))
    assert all(np.array_equal(a.csi, b.csi) for a, b in zip(frames, parsed))
    assert [i.values.tobytes() for i in frames_to_images(parsed)] == [i.values.tobytes() for i in frames_to_images(frames)]


def test_empty_and_occupied_windows_differ_in_temporal_variation():
    """Physics sanity: a person moving adds variance over time that an empty room lacks."""
    rng = np.random.default_rng(0)

    def temporal_std(s):
        a = np.abs(synth_window(s, rng, 300))
        return np.median(a.std(axis=1) / a.mean(axis=1).clip(1))

    assert temporal_std(Scenario(1, 2)) > 2 * temporal_std(Scenario(0))


def test_dataset_round_trip(tmp_path):
    samples = synth_dataset(5, seed=1)
    assert dataset_write(samples, tmp_path / "d") == 5
    back = dataset_read(tmp_path / "d")
    assert [(s.rod_label, s.har_label, s.meta) for s in back] == [(s.rod_label, s.har_label, s.meta) for s in samples]
    assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(samples, back))
    header = json.loads((tmp_path / "d" / MANIFEST).read_text().splitlines()[0])
    assert header["format"] == "radio-image-dataset" and header["taxonomy_version"] == 1


def test_dataset_write_is_byte_identical(tmp_path):
    samples = synth_dataset(3, seed=2)
    dataset_write(samples, tmp_path / "a")
    dataset_write(samples, tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        dataset_read(tmp_path)
    dataset_write(synth_dataset(2, seed=1), tmp_path / "d")
    manifest = tmp_path / "d" / MANIFEST
    lines = manifest.read_text().splitlines()
    header = json.loads(lines[0])
    header["taxonomy_version"] = 2
    manifest.write_text("\n".join([json.dumps(header)] + lines[1:]))
    with pytest.raises(DatasetFormatError):
        dataset_read(tmp_path / "d")
    rec = json.loads(lines[1])
    rec["har_label"] = 9
    manifest.write_text("\n".join([lines[0], json.dumps(rec)]))
    with pytest.raises(DatasetFormatError):
        dataset_read(tmp_path / "d")
    manifest.write_text(lines[0] + "\n{not json\n")
    with pytest.raises(DatasetFormatError):
        dataset_read(tmp_path / "d")


def test_image_file_format(tmp_path):
    v = np.random.default_rng(0).random((234, 7)).astype(np.float32)
    write_image(tmp_path / "x.csir", v)
    blob = (tmp_path / "x.csir").read_bytes()
    assert blob[:4] == b"CSIR" and len(blob) == 16 + 4 * v.size
    np.testing.assert_array_equal(read_image(tmp_path / "x.csir"), v)
    (tmp_path / "y.csir").write_bytes(blob[:-4])
    with pytest.raises(DatasetFormatError):
        read_image(tmp_path / "y.csir")


def test_split_is_stratified_and_seeded():
    samples = synth_dataset(100, seed=0, window=20)
    train, test = split_dataset(samples, 0.2, seed=1)
    assert len(train) + len(test) == 100 and len(test) == 20
    key = lambda s: (s.rod_label, s.har_label)  # noqa: E731
    assert Counter(map(key, test)) == Counter({k: v // 5 for k, v in Counter(map(key, samples)).items()})
    again = split_dataset(samples, 0.2, seed=1)[1]
    assert [s.meta["index"] for s in again] == [s.meta["index"] for s in test]
    with pytest.raises(ParameterError):
        split_dataset(samples, 1.0)

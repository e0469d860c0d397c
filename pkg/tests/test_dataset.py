import hashlib

import numpy as np
import pytest

from instrumentnet import dataset as D
from instrumentnet.dsp import MelConfig, preprocess, write_wav


def write_tree(root, names, per_class=2, seconds=0.1):
    for name in names:
        (root / name).mkdir(parents=True)
        for j in range(per_class):
            write_wav(root / name / f"[{name}][dru][jaz]{j:04d}.wav", np.zeros(int(44100 * seconds)), 44100)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_vocabulary_is_bijective():
    assert len(D.INSTRUMENTS) == 11
    assert [D.LABEL_INDEX[a] for a in D.INSTRUMENTS] == list(range(11))
    assert D.canonical_label(" VOI ") == "voi"
    assert D.canonical_label("gac") == "acg" and D.canonical_label("gel") == "elg"
    assert D.canonical_label("drums", {"drums": "pia"}) == "pia"
    with pytest.raises(D.UnknownLabelError):
        D.canonical_label("dru")


def test_label_vector():
    np.testing.assert_array_equal(np.flatnonzero(D.label_vector(["voi", "cel"])), [0, 10])


def test_published_counts_total():
    assert sum(D.IRMAS_TRAINING_COUNTS.values()) == 6705
    # test excerpts are multi-label, so label counts exceed the 2874 files
    assert sum(D.IRMAS_TESTING_COUNTS.values()) > 2874
    assert D.IRMAS_TRAINING_COUNTS["cel"] == 388 and D.IRMAS_TESTING_COUNTS["voi"] == 1044


def test_scan_training_toy_tree(tmp_path):
    write_tree(tmp_path, ["voi", "gac"] + [a for a in D.INSTRUMENTS if a not in ("voi", "acg")])
    manifest = D.scan_training(tmp_path)
    assert len(manifest) == 22
    assert set(manifest.counts.values()) == {2}
    assert all(len(ex.labels) == 1 for ex in manifest)
    assert manifest.excerpts[0].duration_seconds == pytest.approx(0.1)
    assert [e.audio_path for e in D.scan_training(tmp_path)] == [e.audio_path for e in manifest]
    assert D.count_mismatches(manifest, {a: 2 for a in D.INSTRUMENTS}) == {}
    assert D.count_mismatches(manifest, D.IRMAS_TRAINING_COUNTS)["cel"] == (2, 388)


def test_scan_training_errors(tmp_path):
    with pytest.raises(D.DatasetError):
        D.scan_training(tmp_path)
    (tmp_path / "cel").mkdir()
    with pytest.raises(D.DatasetError):
        D.scan_training(tmp_path)
    write_tree(tmp_path / "x", ["bass"])
    with pytest.raises(D.UnknownLabelError):
        D.scan_training(tmp_path / "x")


def test_label_files(tmp_path, caplog):
    (tmp_path / "a.txt").write_text("voi\nacg\n")
    (tmp_path / "b.txt").write_text("pia\npia\n")
    (tmp_path / "c.txt").write_text("dru\ngel\t\n")
    (tmp_path / "d.txt").write_text("dru\n\n")
    assert D.read_label_file(tmp_path / "a.txt") == ("acg", "voi")
    assert D.read_label_file(tmp_path / "b.txt") == ("pia",)
    assert D.read_label_file(tmp_path / "c.txt") == ("elg",)
    assert "dru" in caplog.text
    with pytest.raises(D.DatasetError):
        D.read_label_file(tmp_path / "d.txt")


def test_scan_testing_requires_label_files(tmp_path):
    write_wav(tmp_path / "x.wav", np.zeros(100), 44100)
    with pytest.raises(D.DatasetError):
        D.scan_testing(tmp_path)
    (tmp_path / "x.txt").write_text("voi\n")
    manifest = D.scan_testing(tmp_path)
    assert manifest.split == "test" and manifest.excerpts[0].labels == ("voi",)


def test_manifest_json_lines(tmp_path, tiny_corpus):
    manifest = D.scan_testing(tiny_corpus / "test")
    back = D.DatasetManifest.load(manifest.save(tmp_path / "m.jsonl"))
    assert back.excerpts == manifest.excerpts and back.split == "test"


def test_synth_round_trip(tiny_corpus):
    train = D.scan_training(tiny_corpus / "train")
    assert train.counts == {**{a: 0 for a in D.INSTRUMENTS}, "cel": 4, "cla": 4, "flu": 4}
    assert all(ex.duration_seconds == pytest.approx(3.0) for ex in train)
    test = D.scan_testing(tiny_corpus / "test")
    assert len(test) == 4
    assert all(3.0 <= ex.duration_seconds <= 6.0 for ex in test)
    assert all(set(ex.labels) <= {"cel", "cla", "flu"} for ex in test)


def test_synth_is_deterministic(tmp_path):
    spec = D.SynthSpec(n_classes=2, train_per_class=2, n_test=2, seed=7, test_seconds=(3.0, 4.0))
    D.synth_corpus(tmp_path / "a", spec)
    D.synth_corpus(tmp_path / "b", spec)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        D.SynthSpec(n_classes=1)
    with pytest.raises(ValueError):
        D.SynthSpec(n_classes=12)
    with pytest.raises(ValueError):
        D.SynthSpec(arrangement="random")


def test_predominance_margin():
    assert D.predominant([0.0, -3.0, -6.0, -6.5, -20.0], 6.0) == [0, 1, 2]


def test_lead_envelopes_partition_the_excerpt():
    env = D.lead_envelopes(44100 * 4, 3, 44100, np.random.default_rng(0))
    leader = env.argmax(axis=0)
    assert set(leader) == {0, 1, 2}
    # each lead owns one contiguous stretch
    assert np.count_nonzero(np.diff(leader)) == 2
    np.testing.assert_allclose(env.min(), 0.1)


def test_rendered_lines_have_unit_rms():
    x = D.render_line(D.TIMBRES[2], 1.0, 44100, np.random.default_rng(0))
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0)


def test_synthetic_timbres_are_separable(tiny_corpus):
    cfg = MelConfig()
    means, spreads = [], []
    for abbr in ("cel", "cla", "flu"):
        vecs = np.array([preprocess(p, cfg).values.mean(axis=0)
                         for p in sorted((tiny_corpus / "train" / abbr).glob("*.wav"))])
        means.append(vecs.mean(axis=0))
        spreads.append(np.mean(np.linalg.norm(vecs - vecs.mean(axis=0), axis=1)))
    between = np.mean([np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)])
    assert between > max(spreads)

"""Tests for the synthetic tactile dataset: renderer, on-disk format, annotation."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from tactgen import data
from tactgen.errors import ConfigError, DatasetFormatError, DatasetIntegrityError


def test_generate_sample_deterministic():
    a = data.generate_sample(1, 2, 0, seed=7)
    b = data.generate_sample(1, 2, 0, seed=7)
    assert np.array_equal(a.image, b.image)
    assert a.texture_caption == b.texture_caption == "rough"
    assert a.shape_caption == "a cross stud"


def test_gel_changes_image_and_border_matches_oracle():
    cfg = data.RenderConfig()
    border = data.border_mask(cfg.image_size, cfg.border_px)
    imgs = {}
    for gel in (0, 1):
        sample = data.generate_sample(2, 1, gel, seed=5)
        imgs[gel] = sample.image
        # independent oracle: expected border color from palette parameters alone
        expected = cfg.palette.expected_border_color(gel)
        measured = sample.image[border].mean(axis=0)
        assert np.abs(measured - expected).max() < 0.05
    assert not np.array_equal(imgs[0], imgs[1])


def test_non_contact_sample():
    cfg = data.RenderConfig()
    sample = data.generate_sample(0, data.NO_CONTACT, 1, seed=3)
    assert not sample.contact
    assert sample.texture_caption == "" and sample.shape_caption == ""
    expected = cfg.palette.expected_border_color(1)
    assert np.abs(sample.image.mean(axis=(0, 1)) - expected).max() < 0.03
    sample.validate(gel_count=3)


def test_out_of_range_ids_rejected():
    with pytest.raises(IndexError):
        data.generate_sample(99, 0, 0, seed=0)
    with pytest.raises(IndexError):
        data.generate_sample(0, 7, 0, seed=0)
    with pytest.raises(IndexError):
        data.generate_sample(0, 0, 99, seed=0)


def test_zero_image_size_is_config_error():
    with pytest.raises(ConfigError):
        data.generate_sample(0, 0, 0, seed=0, config=data.RenderConfig(image_size=0))


def test_pixel_range_and_validation():
    sample = data.generate_sample(3, 3, 2, seed=11)
    assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
    sample.validate(gel_count=3)
    bad = data.TactileSample(image=sample.image, texture_caption="x", shape_caption="",
                             gel_id=0, contact=False)
    with pytest.raises(ValueError):
        bad.validate()


def test_palette_invariants():
    data.default_palette(3).validate()
    close = data.default_palette(3)
    close.backgrounds[1] = close.backgrounds[0] + 0.01
    with pytest.raises(ConfigError):
        close.validate()


def test_gel_factor_separability():
    # averaged over >=100 seeds, between-gel distance must exceed within-gel spread
    per_gel = 34
    means = {g: [] for g in range(3)}
    for g in range(3):
        for seed in range(per_gel):
            img = data.generate_sample(seed % 4, seed % 4, g, seed).image
            means[g].append(img.mean(axis=(0, 1)))
    centroids = {g: np.mean(v, axis=0) for g, v in means.items()}
    within = np.mean([np.mean([np.linalg.norm(m - centroids[g]) for m in means[g]])
                      for g in means])
    between = np.mean([np.linalg.norm(centroids[a] - centroids[b])
                       for a in range(3) for b in range(a + 1, 3)])
    assert between > within


def small_spec():
    return data.DatasetSpec(seeds_per_combo=2, noncontact_per_gel=1,
                            render=data.RenderConfig(image_size=16, border_px=2))


def test_dataset_round_trip(tmp_path):
    root = tmp_path / "ds"
    manifest = data.generate_dataset(str(root), small_spec())
    back_manifest, samples = data.read_dataset(root)
    assert back_manifest.gel_count == 3
    assert back_manifest.sample_count == manifest.sample_count
    originals = [data.generate_sample(r.texture_id, r.shape_id, r.gel_id, r.seed,
                                      small_spec().render)
                 for r in manifest.records[:10]]
    for orig, loaded in zip(originals, samples):
        assert np.array_equal(orig.image, loaded.image)  # lossless: 8-bit grid
        assert orig.texture_caption == loaded.texture_caption
        assert orig.shape_caption == loaded.shape_caption


def test_every_sample_in_exactly_one_split(tmp_path):
    manifest = data.build_manifest(str(tmp_path), small_spec())
    manifest.validate()
    ids = [r.sample_id for r in manifest.records]
    assert len(ids) == len(set(ids))
    assert set(r.split for r in manifest.records) <= {"train", "val", "test"}


def test_missing_image_is_integrity_error(tmp_path):
    root = tmp_path / "ds"
    manifest = data.generate_dataset(str(root), small_spec())
    victim = root / "images" / f"{manifest.records[3].sample_id}.ppm"
    victim.unlink()
    with pytest.raises(DatasetIntegrityError):
        data.read_dataset(root)


def test_corrupt_manifest_names_file(tmp_path):
    root = tmp_path / "ds"
    data.generate_dataset(str(root), small_spec())
    (root / "manifest.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(DatasetFormatError) as err:
        data.read_dataset(root)
    assert "manifest.json" in str(err.value)


def test_ppm_round_trip_exact(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(9, 7, 3)) * 255) / 255
    path = tmp_path / "x.ppm"
    data.write_ppm(path, img)
    back = data.read_ppm(path)
    assert np.array_equal(back, img.astype(np.float32))


def test_truncated_ppm_rejected(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P6\n4 4\n255\n\x00\x01")
    with pytest.raises(DatasetFormatError):
        data.read_ppm(path)


# -- annotation -----------------------------------------------------------------

def test_annotation_prompt_contains_stage_cues():
    prompt = data.build_annotation_prompt("capture session")
    for cue in ("about to touch", "in contact", "special situations"):
        assert cue in prompt
    assert "capture session" in prompt


@pytest.mark.parametrize("response,expected", [
    ("Step 1: ... Step 4: the object is a basketball surface", "a basketball surface"),
    ("step 4 - the object is a zipper.", "a zipper"),
    ("STEP 4: The object is A Woolen Glove!", "a woolen glove"),
    ("Reasoning...\nStep 4: the object is corduroy fabric\nDone.", "corduroy fabric"),
    ("Step 4: the object is 'a button'", "a button"),
])
def test_parse_annotation_crafted(response, expected):
    caption, warned = data.parse_annotation_response(response)
    assert caption == expected
    assert not warned


@pytest.mark.parametrize("response", ["", "no steps here", "Step 4: hmm unclear"])
def test_parse_annotation_unparseable(response):
    caption, warned = data.parse_annotation_response(response)
    assert caption == ""
    assert warned


def test_sidecar_adapter_default(monkeypatch):
    monkeypatch.delenv("ANNOTATOR_URL", raising=False)
    adapter = data.make_annotator()
    assert isinstance(adapter, data.SidecarCaptionAdapter)
    sample = data.generate_sample(0, 3, 0, seed=1)
    caption, warned = adapter.shape_caption(sample)
    assert caption == "a basketball surface"
    assert not warned


class _AnnotatorHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        assert "about to touch" in body["prompt"]
        assert body["image_base64"]
        reply = json.dumps({"response": "Step 4: the object is a test fixture"})
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(reply.encode())

    def log_message(self, *args):
        pass


def test_http_annotator_client(monkeypatch):
    server = HTTPServer(("127.0.0.1", 0), _AnnotatorHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/annotate"
        monkeypatch.setenv("ANNOTATOR_URL", url)
        client = data.make_annotator()
        assert isinstance(client, data.HttpAnnotatorClient)
        sample = data.generate_sample(0, 0, 0, seed=1)
        caption, warned = client.shape_caption(sample, context="unit test")
        assert caption == "a test fixture"
        assert not warned
    finally:
        server.shutdown()

import hashlib
import json

import pytest

from semxfer import dataset as D
from semxfer.dataset import GenConfig, gen_dataset
from semxfer.scene import KINDS, apply_transform, render_grid, render_tokens


def test_counts(small_dataset, small_config):
    ds = small_dataset
    assert len(ds.pairs) == small_config.pairs
    assert len(ds.train) == small_config.train_triplets
    assert len(ds.test) == small_config.test_triplets
    assert all(t.q_domain == t.r_domain == "A" for t in ds.train)
    assert all(t.q_domain == t.r_domain == "B" for t in ds.test)


def test_every_triplet_validates(small_dataset):
    for tr in small_dataset.train + small_dataset.test:
        assert apply_transform(small_dataset.scenes[tr.q], tr.t) == small_dataset.scenes[tr.r]


def test_pairs_are_distinct_base_scenes(small_dataset):
    ds = small_dataset
    assert len(set(ds.pairs)) == len(ds.pairs)
    assert all("base" in ds.roles[s] for s in ds.pairs)


def test_pool_contains_targets_and_queries(small_dataset):
    pool = set(small_dataset.pool)
    assert all(t.r in pool and t.q in pool for t in small_dataset.test)


def test_test_kinds_seen_in_training(small_dataset):
    assert {t.t.kind for t in small_dataset.test} <= {t.t.kind for t in small_dataset.train}


def test_queries_grouped_per_scene(small_dataset, small_config):
    qs = [t.q for t in small_dataset.test]
    assert len(set(qs)) == -(-small_config.test_triplets // small_config.queries_per_test_scene)


def test_holdout_never_in_training(small_dataset):
    ds = small_dataset
    for tr in ds.train:
        assert not ds.is_novel(tr.q) and not ds.is_novel(tr.r)
    for s in ds.pairs:
        assert not ds.is_novel(s)
    novel_tests = [t for t in ds.test if ds.is_novel(t.q)]
    assert novel_tests
    assert not any(ds.is_novel(s) for s in ds.translation_db())


def test_renderers_injective_over_dataset(small_dataset):
    grids, toks = set(), set()
    for s in small_dataset.scenes.values():
        grids.add(render_grid(s).tobytes())
        toks.add(render_tokens(s))
    assert len(grids) == len(toks) == len(small_dataset.scenes)


def test_scene_ids_unique_content(small_dataset):
    contents = {s.objects for s in small_dataset.scenes.values()}
    assert len(contents) == len(small_dataset.scenes)


def test_deterministic(small_config):
    a, b = gen_dataset(small_config), gen_dataset(small_config)
    assert [t.to_json() for t in a.test] == [t.to_json() for t in b.test]
    assert a.pairs == b.pairs


def test_seed_changes_data(small_config):
    other = GenConfig(**{**small_config.to_json(), "seed": small_config.seed + 1})
    assert [t.to_json() for t in gen_dataset(other).train] != [t.to_json() for t in gen_dataset(small_config).train]


def test_zero_pairs():
    ds = gen_dataset(GenConfig(seed=1, base_scenes=20, pairs=0, train_triplets=100, test_triplets=20))
    assert ds.pairs == []


def test_infeasible():
    with pytest.raises(D.GenerationError):
        gen_dataset(GenConfig(base_scenes=2, pairs=2, train_triplets=10_000, test_triplets=10))


def test_bad_configs():
    with pytest.raises(D.GenerationError):
        GenConfig(pairs=300, base_scenes=200)
    with pytest.raises(D.GenerationError):
        GenConfig.from_json({"bogus": 1})
    with pytest.raises(D.GenerationError):
        GenConfig(kind_weights={"explode": 1.0})


def test_kind_weights_restrict_kinds():
    cfg = GenConfig(seed=2, base_scenes=20, pairs=5, train_triplets=100, test_triplets=20,
                    kind_weights={k: (1.0 if k == "change_color" else 0.0) for k in KINDS})
    ds = gen_dataset(cfg)
    assert {t.t.kind for t in ds.train + ds.test} == {"change_color"}


class TestFiles:
    def test_write_read_round_trip(self, small_dataset, tmp_path):
        manifest = D.write_dataset(small_dataset, tmp_path)
        ds, m2 = D.read_dataset(tmp_path)
        assert m2 == manifest
        assert ds.pairs == small_dataset.pairs
        assert [t.to_json() for t in ds.train] == [t.to_json() for t in small_dataset.train]
        assert ds.pool == small_dataset.pool
        assert ds.translation_db() == small_dataset.translation_db()

    def test_manifest_hashes(self, small_dataset, tmp_path):
        manifest = D.write_dataset(small_dataset, tmp_path)
        assert set(manifest["files"]) == {"scenes", "pairs", "train", "test"}
        for name, fname in manifest["files"].items():
            assert manifest["hashes"][name] == hashlib.sha256((tmp_path / fname).read_bytes()).hexdigest()
        canon = json.dumps(manifest["hashes"], sort_keys=True, separators=(",", ":")).encode()
        assert manifest["dataset_hash"] == hashlib.sha256(canon).hexdigest()
        assert manifest["seed"] == small_dataset.config.seed
        assert GenConfig.from_json(manifest["gen_config"]) == small_dataset.config

    def test_byte_identical_rewrite(self, small_config, tmp_path):
        D.write_dataset(gen_dataset(small_config), tmp_path / "a")
        D.write_dataset(gen_dataset(small_config), tmp_path / "b")
        for f in ["manifest.json", *D.FILES.values()]:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_record_format(self, small_dataset, tmp_path):
        D.write_dataset(small_dataset, tmp_path)
        trip = json.loads((tmp_path / "test.jsonl").read_text().splitlines()[0])
        assert {"q", "t", "r", "domain"} <= set(trip) and "kind" in trip["t"]
        scene = json.loads((tmp_path / "scenes.jsonl").read_text().splitlines()[0])
        assert {"id", "objects"} <= set(scene)
        assert set(scene["objects"][0]) == {"shape", "color", "size", "row", "col"}
        assert set(json.loads((tmp_path / "pairs.jsonl").read_text().splitlines()[0])) == {"id"}

    def test_tamper_detected(self, small_dataset, tmp_path):
        D.write_dataset(small_dataset, tmp_path)
        with (tmp_path / "train.jsonl").open("a") as fh:
            fh.write("\n")
        with pytest.raises(D.DataError, match="train.jsonl"):
            D.read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(D.DataError, match="manifest"):
            D.read_dataset(tmp_path)

    def test_parse_error_has_line_number(self, small_dataset, tmp_path):
        D.write_dataset(small_dataset, tmp_path)
        lines = (tmp_path / "pairs.jsonl").read_text().splitlines()
        lines[2] = "{not json"
        (tmp_path / "pairs.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(D.DataError, match=r"pairs.jsonl:3"):
            D.read_dataset(tmp_path, verify=False)

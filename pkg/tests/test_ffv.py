import numpy as np
import pytest

from wiplab import ffv


def make_cache(rng, n_img=6, n_txt=4, dim=8):
    records = []
    for i in range(n_img):
        records.append(ffv.EmbeddingRecord(
            f"img_{i:02d}", "image", rng.standard_normal(dim),
            {"path": f"surfaces/{i}.jpg", "cof": round(0.2 + 0.1 * i, 2),
             "label": f"surface {i}"}))
    mats = [("Wrought iron", "wrought iron", 0.44), ("Ice", "rubber", 0.1),
            ("Asphalt", "rubber", 0.9), ("Oak", "leather", 0.61)]
    for i in range(n_txt):
        m, am, c = mats[i % len(mats)]
        records.append(ffv.EmbeddingRecord(
            f"txt_{i:02d}", "text", rng.standard_normal(dim),
            {"material": m, "against": am, "cof": c}))
    return ffv.EmbeddingCache(dim, records, {"encoder": "test-encoder"})


@pytest.fixture
def cache(rng):
    return make_cache(rng)


class TestCosine:
    def test_self_similarity(self, rng):
        v = rng.standard_normal(16)
        assert ffv.cosine_similarity(v, v[None, :])[0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert ffv.cosine_similarity(np.array([1.0, 0.0]), np.array([[0.0, 2.0]]))[0] == 0.0

    def test_hand_value(self):
        got = ffv.cosine_similarity(np.array([1.0, 1.0, 0.0]), np.array([[1.0, 0.0, 0.0]]))
        assert got[0] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ffv.ZeroVector):
            ffv.cosine_similarity(np.zeros(3), np.ones((2, 3)))
        with pytest.raises(ffv.ZeroVector):
            ffv.cosine_similarity(np.ones(3), np.zeros((2, 3)))

    def test_scores_bounded(self, rng):
        for _ in range(100):
            q = rng.standard_normal(8)
            m = rng.standard_normal((5, 8))
            scores = ffv.cosine_similarity(q, m)
            assert np.all(np.abs(scores) <= 1.0 + 1e-12)


class TestRetrieve:
    def test_k_covers_all(self, cache, rng):
        img, txt = ffv.retrieve_topk(cache, rng.standard_normal(8), k=50)
        assert len(img) == cache.n_image and len(txt) == cache.n_text
        assert all(a.score >= b.score for a, b in zip(img, img[1:]))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            dim = int(rng.integers(2, 17))
            n_img = int(rng.integers(1, 20))
            n_txt = int(rng.integers(1, 20))
            c = make_cache(rng, n_img, n_txt, dim)
            q = rng.standard_normal(dim)
            k = int(rng.integers(1, 8))
            img, txt = ffv.retrieve_topk(c, q, k)
            for kind, hits, records in (("image", img, c.image_records),
                                        ("text", txt, c.text_records)):
                scores = ffv.cosine_similarity(q, c.matrix(kind))
                order = sorted(range(len(records)),
                               key=lambda i: (-scores[i], records[i].id))
                want = [records[i].id for i in order[:k]]
                assert [h.id for h in hits] == want

    def test_tie_broken_by_id(self, rng):
        v = rng.standard_normal(4)
        records = [
            ffv.EmbeddingRecord("b_dup", "image", v.copy(), {}),
            ffv.EmbeddingRecord("a_dup", "image", v.copy(), {}),
            ffv.EmbeddingRecord("c_far", "image", -v, {}),
        ]
        c = ffv.EmbeddingCache(4, records)
        img, _ = ffv.retrieve_topk(c, v, k=3)
        assert [h.id for h in img] == ["a_dup", "b_dup", "c_far"]

    def test_empty_cache(self):
        c = ffv.EmbeddingCache(4, [])
        with pytest.raises(ffv.EmptyCache):
            ffv.retrieve_topk(c, np.ones(4), 1)

    def test_bad_k(self, cache):
        with pytest.raises(ValueError):
            ffv.retrieve_topk(cache, np.ones(8), 0)


class TestPrompt:
    def test_contains_friction_table_line(self, cache, rng):
        img, txt = ffv.retrieve_topk(cache, cache.by_id["txt_00"].vector, k=3)
        prompt = ffv.build_prompt(img, txt)
        assert "Wrought iron and wrought iron: 0.44" in prompt

    def test_answer_contract_always_present(self, cache):
        img, _ = ffv.retrieve_topk(cache, cache.by_id["img_00"].vector, k=1)
        prompt = ffv.build_prompt(img, [])
        assert "CoF: <decimal>" in prompt

    def test_deterministic_bytes(self, cache, rng):
        q = rng.standard_normal(8)
        img, txt = ffv.retrieve_topk(cache, q, k=4)
        assert ffv.build_prompt(img, txt) == ffv.build_prompt(img, txt)

    def test_requires_hits(self):
        with pytest.raises(ValueError):
            ffv.build_prompt([], [])


class TestParse:
    def test_embedded_match(self):
        assert ffv.parse_cof("Analysis... CoF: 0.45 because...") == 0.45

    def test_no_match(self):
        with pytest.raises(ffv.NoMatch):
            ffv.parse_cof("no number here")

    def test_clamp_high(self):
        assert ffv.parse_cof("CoF: 3.2") == 2.0

    def test_clamp_negative(self):
        assert ffv.parse_cof("CoF: -0.4") == 0.0

    def test_first_occurrence_wins(self):
        assert ffv.parse_cof("CoF: 0.3 ... CoF: 0.9") == 0.3

    def test_decimal_forms(self):
        assert ffv.parse_cof("CoF: .5") == 0.5
        assert ffv.parse_cof("CoF:0.25") == 0.25


class TestEstimate:
    def test_mock_pipeline_identity(self, cache):
        client = ffv.MockClient("Sure. CoF: 0.9")
        est = ffv.estimate("img_00", cache, 3, client)
        assert est.mu_hat == 0.9
        assert est.retries == 0
        assert len(est.image_hits) == 3

    def test_retry_budget(self, cache):
        client = ffv.MockClient([ffv.ClientError(500), ffv.ClientTimeout("t"), "CoF: 0.55"])
        est = ffv.estimate("img_00", cache, 2, client, sleep=lambda s: None)
        assert est.mu_hat == 0.55 and est.retries == 2
        assert len(client.calls) == 3

    def test_exhausted_retries_raise_last_error(self, cache):
        client = ffv.MockClient([ffv.ClientError(500), ffv.ClientError(503),
                                 ffv.ClientError(504)])
        with pytest.raises(ffv.ClientError) as exc:
            ffv.estimate("img_00", cache, 2, client, attempts=3, sleep=lambda s: None)
        assert exc.value.status == 504

    def test_no_match_retries_then_raises(self, cache):
        client = ffv.MockClient(["gibberish", "more gibberish", "still nothing"])
        with pytest.raises(ffv.NoMatch):
            ffv.estimate("img_00", cache, 2, client, attempts=3, sleep=lambda s: None)

    def test_self_query_is_top_hit(self, cache):
        # An icy-surface record queried with its own embedding must be hit #1
        # and surface in the prompt sent to the client.
        client = ffv.MockClient("CoF: 0.1")
        est = ffv.estimate("txt_01", cache, 2, client)
        assert est.text_hits[0].id == "txt_01"
        assert "Ice and rubber: 0.1" in client.calls[0]["prompt"]

    def test_output_always_clamped(self, cache):
        for resp in ("CoF: 99", "CoF: -3", "CoF: 1.2"):
            est = ffv.estimate("img_00", cache, 2, ffv.MockClient(resp))
            assert 0.0 <= est.mu_hat <= 2.0

    def test_unknown_id(self, cache):
        with pytest.raises(ffv.FfvError):
            ffv.estimate("missing", cache, 2, ffv.MockClient("CoF: 1"))

    def test_deterministic_given_same_inputs(self, cache):
        a = ffv.estimate("img_01", cache, 3, ffv.MockClient("CoF: 0.7"))
        b = ffv.estimate("img_01", cache, 3, ffv.MockClient("CoF: 0.7"))
        assert a.mu_hat == b.mu_hat
        assert [h.id for h in a.image_hits] == [h.id for h in b.image_hits]


class TestKfold:
    def test_perfect_predictor(self):
        pairs = [(x, x) for x in np.linspace(0.1, 1.0, 12)]
        for k in (2, 5, 10):
            rep = ffv.kfold_rmse(pairs, k)
            assert rep.mean == 0.0 and all(v == 0.0 for v in rep.per_fold)

    def test_constant_predictor_hand_case(self):
        pairs = [(0.3, 0.2), (0.3, 0.4)] * 10
        rep = ffv.kfold_rmse(pairs, 5)
        for v in rep.per_fold:
            assert v == pytest.approx(0.1, abs=1e-12)
        assert rep.mean == pytest.approx(0.1, abs=1e-12)

    def test_partition_covers_everything_once(self):
        n, k = 23, 5
        perm = np.random.default_rng(0).permutation(n)
        folds = np.array_split(perm, k)
        seen = np.concatenate(folds)
        assert sorted(seen.tolist()) == list(range(n))
        rep = ffv.kfold_rmse([(0.1, 0.2)] * n, k)
        assert sum(rep.fold_sizes) == n

    def test_too_few_samples(self):
        with pytest.raises(ffv.TooFewSamples):
            ffv.kfold_rmse([(0.1, 0.1)], 2)


class TestCacheIO:
    def test_roundtrip_no_warnings(self, cache, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache.save(path)
        back, warnings = ffv.load_cache(path)
        assert warnings == []
        assert back.n_image == cache.n_image and back.n_text == cache.n_text
        # round-trip affects similarity by far less than 1e-6
        q = cache.records[0].vector
        s1 = ffv.cosine_similarity(q, cache.matrix("image"))
        s2 = ffv.cosine_similarity(q, back.matrix("image"))
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_duplicate_id_rejected(self, rng):
        v = rng.standard_normal(4)
        with pytest.raises(ffv.CacheFormatError, match="dup"):
            ffv.EmbeddingCache(4, [
                ffv.EmbeddingRecord("dup", "image", v, {}),
                ffv.EmbeddingRecord("dup", "text", v, {}),
            ])

    def test_wrong_dimension_names_record(self, cache, tmp_path):
        path = tmp_path / "bad.jsonl"
        cache.save(path)
        lines = path.read_text().splitlines()
        import json
        rec = json.loads(lines[3])
        rec["vector"] = rec["vector"][:-1]        # truncate one vector
        lines[3] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ffv.CacheFormatError, match=rec["id"]):
            ffv.load_cache(path)

    def test_count_mismatch_rejected(self, cache, tmp_path):
        path = tmp_path / "bad2.jsonl"
        cache.save(path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")   # drop one record
        with pytest.raises(ffv.CacheFormatError, match="counts"):
            ffv.load_cache(path)

    def test_zero_vector_rejected(self):
        with pytest.raises(ffv.CacheFormatError, match="zero"):
            ffv.EmbeddingCache(3, [ffv.EmbeddingRecord("z", "image", np.zeros(3), {})])

    def test_unknown_keys_warn(self, cache, tmp_path):
        path = tmp_path / "warn.jsonl"
        cache.save(path)
        lines = path.read_text().splitlines()
        import json
        rec = json.loads(lines[1])
        rec["extra_field"] = 1
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        _, warnings = ffv.load_cache(path)
        assert len(warnings) == 1 and "extra_field" in warnings[0]


class TestMockClient:
    def test_fixture_plain_text(self, tmp_path):
        fx = tmp_path / "resp.txt"
        fx.write_text("Thinking... CoF: 0.33")
        client = ffv.MockClient.from_fixture(fx)
        assert client.complete("s", "p") == "Thinking... CoF: 0.33"
        assert client.complete("s", "p") == "Thinking... CoF: 0.33"

    def test_fixture_scripted_json(self, tmp_path):
        fx = tmp_path / "script.json"
        fx.write_text('[{"status": 500}, "TIMEOUT", "CoF: 0.8"]')
        client = ffv.MockClient.from_fixture(fx)
        with pytest.raises(ffv.ClientError):
            client.complete("s", "p")
        with pytest.raises(ffv.ClientTimeout):
            client.complete("s", "p")
        assert client.complete("s", "p") == "CoF: 0.8"

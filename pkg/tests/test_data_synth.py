import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clinfuse.data_synth import (
    DiscretizedSeries, MultimodalRecord, NormStats, RawEpisode, SynthConfig, discretize, fit_norm_stats,
    generate_cohort, label_model, load_dataset, read_pgm, render_image, save_dataset, split_by_patient,
    standardize, write_pgm,
)
from clinfuse.errors import ConfigError, DatasetError, DatasetVersionError
from clinfuse.schema import DEFAULT_SCHEMA as S, TaskSpec


def small(**kw):
    base = dict(n_patients=60, image_size=64, max_episodes=2)
    base.update(kw)
    return SynthConfig(**base)


def fake_record(pid, eid, t=3, labels=(0,)):
    return MultimodalRecord(pid, eid, DiscretizedSeries(np.zeros((t, 76))), None, np.array(labels, np.uint8))


# --- cohort -----------------------------------------------------------------

class TestCohort:
    def test_pairing_rate_gives_expected_image_count(self):
        recs = generate_cohort(SynthConfig(n_patients=1000, max_episodes=1, image_size=32), seed=3)
        paired = sum(r.has_image for r in recs)
        # binomial(1000, 0.18): sd ~ 12
        assert 140 <= paired <= 220

    def test_zero_pairing_has_no_images(self):
        recs = generate_cohort(small(pairing_rate=0.0), seed=0)
        assert not any(r.has_image for r in recs)

    def test_full_pairing(self):
        recs = generate_cohort(small(pairing_rate=1.0), seed=0)
        assert all(r.image.shape == (64, 64) and r.image.dtype == np.uint8 for r in recs)

    def test_same_seed_identical(self):
        a = generate_cohort(small(pairing_rate=0.5), seed=11)
        b = generate_cohort(small(pairing_rate=0.5), seed=11)
        assert a == b
        assert all(x.series.values.tobytes() == y.series.values.tobytes() for x, y in zip(a, b))

    def test_different_seed_differs(self):
        assert generate_cohort(small(), seed=1) != generate_cohort(small(), seed=2)

    def test_records_independent_of_cohort_size(self):
        a = generate_cohort(small(n_patients=20), seed=5)
        b = generate_cohort(small(n_patients=40), seed=5)
        assert a == b[: len(a)]

    def test_series_width_and_label_shape(self):
        for task, n in (("mortality", 1), ("phenotyping", 25)):
            recs = generate_cohort(small(task=task, n_patients=15), seed=0)
            assert all(r.series.values.shape[1] == 76 and r.labels.shape == (n,) for r in recs)

    def test_mortality_episodes_are_48h(self):
        recs = generate_cohort(small(task="mortality", n_patients=15), seed=0)
        assert {r.series.t for r in recs} == {24}

    def test_episode_ids_grouped_by_patient(self):
        recs = generate_cohort(small(max_episodes=3), seed=0)
        assert any(r.episode_id.endswith("_E1") for r in recs)
        for r in recs:
            assert r.episode_id.startswith(r.patient_id + "_E")

    @pytest.mark.parametrize("field,value", [("n_patients", 3), ("pairing_rate", 1.5), ("max_episodes", 0),
                                             ("label_flip", [0.1, 0.2]), ("duration_hours", (10, 5))])
    def test_invalid_config_names_field(self, field, value):
        cfg = small(task="mortality")
        setattr(cfg, field, value)
        with pytest.raises(ConfigError) as info:
            cfg.validate()
        assert info.value.field == field

    def test_label_flip_raises_disagreement(self):
        base = small(task="custom", num_labels=2, n_patients=800, max_episodes=1, pairing_rate=0.0)
        clean = generate_cohort(base, seed=4)
        base.label_flip = [0.0, 0.4]
        noisy = generate_cohort(base, seed=4)
        y0 = np.stack([r.labels for r in clean])
        y1 = np.stack([r.labels for r in noisy])
        assert np.array_equal(y0[:, 0], y1[:, 0])
        assert 0.3 < (y0[:, 1] != y1[:, 1]).mean() < 0.5

    def test_config_round_trip(self):
        cfg = small(task="custom", num_labels=3, label_flip=[0.1, 0.2, 0.3])
        assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_config_field(self):
        with pytest.raises(ConfigError):
            SynthConfig.from_dict({"n_patient": 5})


class TestLabelModel:
    def _latents(self, n=20000, seed=0):
        rng = np.random.default_rng(seed)
        return rng.standard_normal(n), rng.standard_normal(n)

    def test_interaction_dominates(self):
        cfg = SynthConfig(task="mortality")
        m = label_model(cfg, 0)
        assert abs(m.interaction[0]) == cfg.signal_strength
        assert abs(m.interaction[0]) > 4 * abs(m.ehr_weight[0])

    def test_unimodal_information_is_small(self):
        # the best predictor from one latent alone sits well below the joint predictor
        from clinfuse.metrics import auroc

        cfg = SynthConfig(task="mortality")
        m = label_model(cfg, 0)
        ze, zi = self._latents()
        p = m.probabilities(ze, zi)[:, 0]
        y = np.random.default_rng(1).random(len(p)) < p
        joint = auroc(p, y)
        bins = np.digitize(ze, np.quantile(ze, np.linspace(0, 1, 41)[1:-1]))
        ehr_only = np.array([y[bins == b].mean() for b in range(40)])[bins]
        assert joint > 0.85
        assert auroc(ehr_only, y) < 0.70


class TestImage:
    def test_disk_grows_with_latent(self):
        bright = [(render_image(z, np.random.default_rng(0), 128) >= 190).sum() for z in (-1.5, 0.0, 1.5)]
        assert bright[0] < bright[1] < bright[2]

    def test_pgm_round_trip(self, tmp_path):
        img = render_image(0.3, np.random.default_rng(1), 64)
        write_pgm(tmp_path / "a.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")

    def test_pgm_rejects_ascii(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(DatasetError):
            read_pgm(tmp_path / "a.pgm")


# --- discretisation ---------------------------------------------------------

HR = 3  # heart rate variable index in the default schema
CAP_REFILL, GCS_EYE = 12, 13  # two-level and four-level categoricals


class TestDiscretize:
    def test_bins_and_width(self):
        ep = RawEpisode("p", "e", [(0.5, HR, 80.0)], 48.0)
        assert discretize(ep).values.shape == (24, 76)

    def test_partial_bin_rounds_up(self):
        assert discretize(RawEpisode("p", "e", [], 5.0)).t == 3

    def test_trace_last_value_wins_and_carry_forward(self):
        ep = RawEpisode("p", "e", [(1.0, HR, 80.0), (3.0, HR, 90.0), (3.5, HR, 95.0)], 6.0)
        v = discretize(ep).values
        assert v[:, HR].tolist() == [80.0, 95.0, 95.0]
        mask = v[:, S.mask_offset + HR]
        assert mask.tolist() == [1.0, 1.0, 0.0]
        tsl = v[:, S.tsl_offset + HR]
        assert tsl.tolist() == [1.0, 0.5, 2.5]

    def test_never_observed_uses_normal_and_capped_time(self):
        v = discretize(RawEpisode("p", "e", [], 6.0)).values
        assert np.allclose(v[:, :12], S.continuous_normals)
        assert np.all(v[:, S.tsl_offset : S.tsl_offset + 17] == 6.0)
        assert np.all(v[:, S.mask_offset : S.mask_offset + 17] == 0.0)

    def test_categorical_one_hot(self):
        ep = RawEpisode("p", "e", [(0.1, GCS_EYE, 2.0)], 4.0)
        v = discretize(ep).values
        start, stop = S.block_offsets()[1]
        assert v[0, start:stop].tolist() == [0, 0, 1, 0]

    def test_rejects_out_of_range_category(self):
        with pytest.raises(ValueError, match="category"):
            discretize(RawEpisode("p", "e", [(0.1, CAP_REFILL, 2.0)], 4.0))

    def test_rejects_event_outside_episode(self):
        with pytest.raises(ValueError, match="outside"):
            discretize(RawEpisode("p", "e", [(5.0, HR, 80.0)], 4.0))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 20), st.integers(0, 16), st.integers(0, 12)), max_size=40),
           st.floats(1.0, 20.0))
    def test_structural_invariants(self, raw, duration):
        events = []
        for time, var, cat in raw:
            if time > duration:
                continue
            value = float(cat % S.n_categories(var)) if S.is_categorical(var) else 50.0 + cat
            events.append((time, var, value))
        v = discretize(RawEpisode("p", "e", events, duration)).values
        for start, stop in S.block_offsets():
            assert np.all(v[:, start:stop].sum(axis=1) == 1.0)
        masks = v[:, S.mask_offset : S.mask_offset + 17]
        assert set(np.unique(masks)) <= {0.0, 1.0}
        tsl = v[:, S.tsl_offset : S.tsl_offset + 17]
        assert np.all((tsl >= 0) & (tsl <= duration))
        assert np.all(tsl[masks == 1] <= 2.0)


# --- split and normalisation --------------------------------------------------

class TestSplit:
    def test_ratios_of_patients(self):
        recs = [fake_record(f"P{i}", f"P{i}_E0") for i in range(1000)]
        tr, va, te = split_by_patient(recs, seed=0)
        assert (len(tr), len(va), len(te)) == (700, 100, 200)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=3, max_size=60), st.integers(0, 10_000))
    def test_disjoint_and_complete(self, episodes, seed):
        recs = [fake_record(f"P{i}", f"P{i}_E{e}") for i, n in enumerate(episodes) for e in range(n)]
        parts = split_by_patient(recs, seed=seed)
        pids = [{r.patient_id for r in p} for p in parts]
        assert not (pids[0] & pids[1] or pids[0] & pids[2] or pids[1] & pids[2])
        assert sum(len(p) for p in parts) == len(recs)

    def test_seed_changes_assignment(self):
        recs = [fake_record(f"P{i}", f"P{i}_E0") for i in range(50)]
        a = {r.patient_id for r in split_by_patient(recs, seed=0)[0]}
        b = {r.patient_id for r in split_by_patient(recs, seed=1)[0]}
        assert a != b

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_by_patient([fake_record("P", "P_E0")], ratios=(0.5, 0.5, 0.5))


class TestNormalisation:
    def _two_records(self):
        v0, v1 = np.zeros((1, 76)), np.zeros((1, 76))
        v1[0, :12] = 2.0
        return [fake_record("a", "a0").replace(series=DiscretizedSeries(v0)),
                fake_record("b", "b0").replace(series=DiscretizedSeries(v1))]

    def test_two_value_example(self):
        recs = self._two_records()
        stats = fit_norm_stats(recs)
        assert np.all(stats.mean == 1.0) and np.all(stats.std == 1.0)
        out = [standardize(r.series, stats).values[0, 0] for r in recs]
        assert out == [-1.0, 1.0]

    def test_only_continuous_channels_change(self):
        recs = self._two_records()
        recs[1].series.values[0, 20] = 1.0
        z = standardize(recs[1].series, fit_norm_stats(recs)).values
        assert np.array_equal(z[:, 12:], recs[1].series.values[:, 12:])

    def test_constant_channel_passes_through(self):
        stats = NormStats(np.full(12, 5.0), np.zeros(12))
        s = DiscretizedSeries(np.full((2, 76), 5.0))
        assert np.array_equal(standardize(s, stats).values, s.values)

    def test_train_stats_standardise_train_to_unit(self):
        recs = generate_cohort(small(n_patients=40), seed=0)
        stats = fit_norm_stats(recs)
        z = np.concatenate([standardize(r.series, stats).values[:, :12] for r in recs])
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-10)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-10)


# --- persistence ---------------------------------------------------------------

class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        recs = generate_cohort(small(n_patients=12, pairing_rate=0.5, task="mortality"), seed=2)
        save_dataset(recs, tmp_path / "ds", TaskSpec.mortality(), seed=2)
        back, task, manifest = load_dataset(tmp_path / "ds")
        assert back == recs
        assert task == TaskSpec.mortality()
        nulls = [e for e in manifest["records"] if e["image"] is None]
        assert len(nulls) == sum(not r.has_image for r in recs) > 0

    def test_csv_has_76_named_columns(self, tmp_path):
        recs = generate_cohort(small(n_patients=10, task="mortality"), seed=0)
        save_dataset(recs, tmp_path, TaskSpec.mortality())
        header = (tmp_path / "series" / f"{recs[0].episode_id}.csv").read_text().splitlines()[0].split(",")
        assert len(header) == 76 and header == S.channel_names()

    def test_version_mismatch(self, tmp_path):
        save_dataset([fake_record("P", "P_E0")], tmp_path, TaskSpec.mortality())
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DatasetVersionError):
            load_dataset(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetError, match="corrupt"):
            load_dataset(tmp_path)

    def test_missing_image_file(self, tmp_path):
        rec = fake_record("P", "P_E0").replace(image=np.zeros((8, 8), np.uint8))
        save_dataset([rec], tmp_path, TaskSpec.mortality())
        (tmp_path / "images" / "P_E0.pgm").unlink()
        with pytest.raises(DatasetError, match="missing image"):
            load_dataset(tmp_path)

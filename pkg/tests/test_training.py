"""Loss arithmetic, slate sampling, unbiasedness by enumeration, gradient
checks through the full model, and training-loop behavior."""

import itertools

import numpy as np
import pytest

from georange import numkit as nk
from georange.data import (DatasetManifest, EmbeddingStore, ObservationRecord,
                           SyntheticWorldSpec, TextEmbeddingRecord, TextKind,
                           generate_synthetic_world)
from georange.errors import ConfigError
from georange.geo import GeoPoint
from georange.model import ModelConfig, init_model
from georange.numkit import Tensor
from georange.training import (LossBatch, LossWeights, TrainConfig, TrainData,
                               _prepare, _sample_slate_rows,
                               sample_negatives, sampled_anfull_loss, train,
                               train_step)


@pytest.fixture(autouse=True)
def _float64():
    with nk.precision("float64"):
        yield


def loss_value(yhat, z, yhat_prime, lam, m, s):
    batch = LossBatch(yhat=np.asarray(yhat, dtype=np.float64), z=np.asarray(z),
                      yhat_prime=np.asarray(yhat_prime, dtype=np.float64))
    return float(sampled_anfull_loss(batch, LossWeights(lam_pos=lam, m=m,
                                                        s=s)).data)


def full_loss(y_all, true_idx, yprime_all, lam, s):
    """Reference all-species loss (M = S): direct formula, no subsampling."""
    total = lam * np.log(y_all[true_idx])
    total += sum(np.log(1 - y) for i, y in enumerate(y_all) if i != true_idx)
    total += sum(np.log(1 - y) for y in yprime_all)
    return -total / s


class TestSampledLoss:
    def test_hand_arithmetic(self):
        """M=2, S=3, lam=1, all probabilities 1/2 -> loss = 2 ln 2."""
        val = loss_value([0.5, 0.5], [1, 0], [0.5, 0.5], lam=1.0, m=2, s=3)
        assert val == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_m_equals_s_recovers_full_loss(self):
        rng = np.random.default_rng(0)
        s = 5
        y = rng.uniform(0.1, 0.9, s)
        yp = rng.uniform(0.1, 0.9, s)
        z = np.zeros(s)
        z[0] = 1
        sampled = loss_value(y, z, yp, lam=3.0, m=s, s=s)
        expect = full_loss(y, 0, yp, lam=3.0, s=s)
        assert sampled == pytest.approx(expect, abs=1e-12)

    @pytest.mark.parametrize("s,m", [(4, 2), (4, 3), (5, 2), (5, 3),
                                     (6, 2), (6, 3)])
    def test_unbiasedness_by_exhaustive_enumeration(self, s, m):
        """Averaging over every obs-slate and rand-slate equals the full
        M = S loss to 1e-10 (the importance weights are exactly right)."""
        rng = np.random.default_rng(s * 10 + m)
        y_all = rng.uniform(0.05, 0.95, s)
        yp_all = rng.uniform(0.05, 0.95, s)
        true = 2
        lam = 2.5
        others = [i for i in range(s) if i != true]
        total, count = 0.0, 0
        for obs_slate in itertools.combinations(others, m - 1):
            for rand_slate in itertools.combinations(range(s), m):
                yhat = np.concatenate([[y_all[true]],
                                       [y_all[i] for i in obs_slate]])
                z = np.zeros(m)
                z[0] = 1
                yprime = np.array([yp_all[i] for i in rand_slate])
                total += loss_value(yhat, z, yprime, lam=lam, m=m, s=s)
                count += 1
        assert total / count == pytest.approx(
            full_loss(y_all, true, yp_all, lam=lam, s=s), abs=1e-10)

    def test_permutation_invariance_of_negative_slots(self):
        rng = np.random.default_rng(1)
        y = rng.uniform(0.1, 0.9, 5)
        yp = rng.uniform(0.1, 0.9, 5)
        z = np.zeros(5)
        z[0] = 1
        base = loss_value(y, z, yp, lam=2.0, m=5, s=9)
        perm = np.r_[0, 1 + rng.permutation(4)]
        assert loss_value(y[perm], z[perm], yp[rng.permutation(5)],
                          lam=2.0, m=5, s=9) == pytest.approx(base, abs=1e-12)

    def test_loss_decreases_as_true_probability_rises(self):
        z = [1, 0, 0]
        yp = [0.3, 0.3, 0.3]
        lo = loss_value([0.2, 0.4, 0.4], z, yp, lam=2.0, m=3, s=6)
        hi = loss_value([0.6, 0.4, 0.4], z, yp, lam=2.0, m=3, s=6)
        assert hi < lo

    def test_probability_clamp_keeps_loss_finite(self):
        t = Tensor(np.array([1e-12, 0.5]))
        batch = LossBatch.__new__(LossBatch)  # bypass (0,1) validation
        batch.yhat = t
        batch.z = np.array([1, 0])
        batch.yhat_prime = Tensor(np.array([0.5, 1 - 1e-12]))
        out = sampled_anfull_loss(batch, LossWeights(lam_pos=1.0, m=2, s=4))
        assert np.isfinite(out.data)

    def test_weights_validate(self):
        with pytest.raises(ConfigError):
            LossWeights(lam_pos=1.0, m=5, s=4)
        with pytest.raises(ConfigError):
            LossWeights(lam_pos=1.0, m=1, s=4)

    def test_gradient_through_loss_matches_finite_differences(self):
        """d loss / d logits via the tape vs central differences."""
        rng = np.random.default_rng(2)
        m, s = 4, 9
        logits = Tensor(rng.normal(size=m), requires_grad=True)
        logits_p = Tensor(rng.normal(size=m), requires_grad=True)
        z = np.zeros(m)
        z[0] = 1
        w = LossWeights(lam_pos=3.0, m=m, s=s)

        def build():
            batch = LossBatch(yhat=nk.sigmoid(logits), z=z,
                              yhat_prime=nk.sigmoid(logits_p))
            return sampled_anfull_loss(batch, w)

        with nk.recording() as rec:
            loss = build()
        grads = nk.backward(rec, loss, [logits, logits_p])
        for t, g in ((logits, grads[logits]), (logits_p, grads[logits_p])):
            fd = np.zeros(m)
            for i in range(m):
                orig = t.data[i]
                t.data[i] = orig + 1e-6
                hi = float(build().data)
                t.data[i] = orig - 1e-6
                lo = float(build().data)
                t.data[i] = orig
                fd[i] = (hi - lo) / 2e-6
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


def make_manifest(s):
    return DatasetManifest(species_counts={i: 10 for i in range(s)},
                           pre_counts={i: 10 for i in range(s)},
                           held_out=[], cap=1000)


class TestSampleNegatives:
    def test_exhaustive_when_m_equals_s(self):
        manifest = make_manifest(4)
        obs = ObservationRecord(2, GeoPoint(0.0, 0.0))
        obs_negs, rand_ids, _ = sample_negatives(
            obs, manifest, 4, np.random.default_rng(0))
        assert sorted(obs_negs.tolist()) == [0, 1, 3]
        assert sorted(rand_ids.tolist()) == [0, 1, 2, 3]

    def test_true_species_never_in_obs_slate(self):
        manifest = make_manifest(8)
        obs = ObservationRecord(5, GeoPoint(0.0, 0.0))
        rng = np.random.default_rng(1)
        for _ in range(2000):
            obs_negs, _, _ = sample_negatives(obs, manifest, 4, rng)
            assert 5 not in obs_negs

    def test_m_larger_than_s_rejected(self):
        with pytest.raises(ConfigError):
            sample_negatives(ObservationRecord(0, GeoPoint(0, 0)),
                             make_manifest(3), 4, np.random.default_rng(0))

    def test_slate_frequencies_match_inclusion_probability(self):
        """Each non-true species appears with frequency (M-1)/(S-1) +- 2%
        in the batched sampler used by training."""
        s, m, b = 10, 4, 100_000
        rng = np.random.default_rng(3)
        true_rows = np.full(b, 7)
        obs_neg, rand_rows = _sample_slate_rows(true_rows, s, m, rng)
        assert not (obs_neg == 7).any()
        expect = (m - 1) / (s - 1)
        for sp in range(s):
            if sp == 7:
                continue
            freq = (obs_neg == sp).any(axis=1).mean()
            assert abs(freq - expect) < 0.02 * max(1.0, 1 / expect)
        expect_rand = m / s
        for sp in range(s):
            freq = (rand_rows == sp).any(axis=1).mean()
            assert abs(freq - expect_rand) < 0.02


def build_tiny_world(with_text=True, seed=5):
    spec = SyntheticWorldSpec(width=16, height=8, climate_fields=2,
                              train_species=6, held_out_species=1,
                              sharpness=5.0, text_noise=0.4, seed=seed,
                              text_dim=10, min_obs=15, max_obs=25,
                              sections_per_species=2)
    world = generate_synthetic_world(spec)
    train_obs = [r for r in world.observations
                 if r.species_id in world.train_ids]
    counts = {}
    for r in train_obs:
        counts[r.species_id] = counts.get(r.species_id, 0) + 1
    manifest = DatasetManifest(species_counts=counts, pre_counts=counts,
                               held_out=world.held_out_ids, cap=1000)
    embeddings = world.embeddings if with_text else None
    return TrainData(observations=train_obs, manifest=manifest,
                     embeddings=embeddings), world


def tiny_model_config(data, seed=0):
    return ModelConfig(env_channels=0, residual_blocks=1, feature_dim=16,
                       text_in=data.embeddings.dim if data.embeddings else 10,
                       text_hidden=8, seed=seed, precision="float64")


class TestTrainStep:
    def setup_step(self, data, seed=0, m=4, lam=8.0):
        config = TrainConfig(epochs=1, learning_rate=1e-3, batch_size=8,
                             m=m, lam_pos=lam, seed=seed, precision="float64")
        params = init_model(tiny_model_config(data, seed),
                            data.manifest.species_ids)
        prep = _prepare(data, params, env=False)
        opt = nk.AdamState(params=params.parameters(), lr=config.learning_rate)
        return params, prep, config, opt

    def test_textless_species_gives_zero_text_head_gradient(self):
        data, _ = build_tiny_world(with_text=True)
        # strip all text for species id 0
        recs = [r for r in data.embeddings.records if r.species_id != 0]
        data.embeddings = EmbeddingStore(dim=data.embeddings.dim, records=recs)
        params, prep, config, opt = self.setup_step(data)
        only_sp0 = np.array([i for i, r in enumerate(data.observations)
                             if r.species_id == 0][:4])
        text_params = [params.text_w1, params.text_b1, params.text_w2,
                       params.text_b2, params.text_w3, params.text_b3]
        before = [p.data.copy() for p in text_params]
        rng = np.random.default_rng(0)
        train_step(params, only_sp0, prep, data, config, opt, rng)
        # phi moved only if some slate member had text AND the observed
        # species had text; observed species is textless, so phi is frozen
        for p, b in zip(text_params, before):
            assert np.array_equal(p.data, b)

    def test_tokens_absent_from_slates_unchanged(self):
        data, _ = build_tiny_world(with_text=False)
        params, prep, config, opt = self.setup_step(data, m=2)
        batch = np.array([0])
        before = params.tokens.data.copy()
        rng = np.random.default_rng(1)
        train_step(params, batch, prep, data, config, opt, rng)
        changed = np.any(params.tokens.data != before, axis=1)
        # exactly the true species row and the sampled slate rows moved
        assert changed.sum() <= 1 + 1 + 2  # true + (M-1) obs + M rand
        assert changed.sum() >= 1

    def test_smoke_training_decreases_moving_average(self):
        """200 tiny steps: the 50-step moving average strictly decreases."""
        data, _ = build_tiny_world(with_text=True)
        params, prep, config, opt = self.setup_step(data, m=4, lam=8.0)
        rng = np.random.default_rng(2)
        n = len(data.observations)
        losses = []
        for _ in range(200):
            batch = rng.integers(0, n, size=8)
            parts = train_step(params, batch, prep, data, config, opt, rng)
            losses.append(parts["token_loss"] + parts["text_loss"])
        head = float(np.mean(losses[:50]))
        tail = float(np.mean(losses[-50:]))
        assert tail < head

    @staticmethod
    def kink_margin(rec):
        """Distance of relu/clamp inputs to their kinks; finite differences
        are only a valid oracle when no kink lies within the probe step."""
        margin = np.inf
        for e in rec.entries:
            if e.op == "relu":
                margin = min(margin, float(np.abs(e.inputs[0].data).min()))
            elif e.op == "clamp":
                x = e.inputs[0].data
                margin = min(margin, float((x - e.aux["lo"]).min()),
                             float((e.aux["hi"] - x).min()))
        return margin

    def test_end_to_end_gradient_check(self):
        """Finite differences through location encoder, tokens, and text head
        on the full dual-branch step loss, 10 valid seeds."""
        data, _ = build_tiny_world(with_text=True)
        checked = 0
        for seed in range(40):
            if checked >= 10:
                break
            params, prep, config, opt = self.setup_step(data, seed=seed)
            rng_master = np.random.default_rng(100 + seed)
            batch = rng_master.integers(0, len(data.observations), size=3)
            all_params = params.parameters()

            def run(record=False):
                # fixed step rng so slates/locations are identical per call
                rng = np.random.default_rng(999 + seed)
                s = params.tokens.data.shape[0]
                from georange.training import (_sample_random_positions,
                                               _sample_slate_rows,
                                               _text_matrix, PROB_EPS)
                rows = prep.true_rows[batch]
                obs_neg, rand_rows = _sample_slate_rows(rows, s, config.m, rng)
                x_obs = prep.positions[batch]
                x_rand = _sample_random_positions(len(batch), None,
                                                  np.float64, rng)
                flat_obs = np.concatenate([rows[:, None], obs_neg],
                                          axis=1).reshape(-1)
                flat_rand = rand_rows.reshape(-1)
                m = config.m
                b = len(batch)
                w_pos = np.zeros(b * m)
                w_pos[0::m] = config.lam_pos
                w_neg = np.full(b * m, (s - 1) / (m - 1))
                w_neg[0::m] = 0.0
                from georange.model import (location_features,
                                            text_species_embedding)
                loc_o = location_features(params, x_obs)
                loc_r = location_features(params, x_rand)

                def branch(table, io, ir, wp, wn, wr):
                    z_o = nk.dot(nk.repeat_rows(loc_o, m),
                                 nk.gather_rows(table, io))
                    t_o = nk.add(
                        nk.mul(nk.softplus(nk.scale(z_o, -1.0)), Tensor(wp)),
                        nk.mul(nk.softplus(z_o), Tensor(wn)))
                    z_r = nk.dot(nk.repeat_rows(loc_r, m),
                                 nk.gather_rows(table, ir))
                    t_r = nk.mul(nk.softplus(z_r), Tensor(wr))
                    return nk.scale(nk.add(nk.reduce_sum(t_o),
                                           nk.reduce_sum(t_r)),
                                    1.0 / (s * b))

                tok = branch(params.tokens, flat_obs, flat_rand, w_pos, w_neg,
                             np.full(b * m, s / m))
                rows_with_text = np.unique(flat_obs)
                text_mat = _text_matrix(data.embeddings, prep.row_ids,
                                        rows_with_text, rng, np.float64)
                lut = np.zeros(s, dtype=np.int64)
                lut[rows_with_text] = np.arange(rows_with_text.size)
                ok_o = np.isin(flat_obs, rows_with_text)
                ok_r = np.isin(flat_rand, rows_with_text)
                feats = text_species_embedding(params, Tensor(text_mat))
                txt = branch(feats, lut[flat_obs] * ok_o,
                             lut[flat_rand] * ok_r, w_pos * ok_o,
                             w_neg * ok_o, np.full(b * m, s / m) * ok_r)
                return nk.add(tok, txt)

            with nk.recording() as rec:
                loss = run()
            if self.kink_margin(rec) < 2e-4:  # kink within FD reach: skip
                continue
            checked += 1
            grads = nk.backward(rec, loss, all_params)
            for p in all_params:
                g = grads[p]
                flat = p.data.reshape(-1)
                gflat = g.reshape(-1)
                idx = np.random.default_rng(seed).choice(
                    flat.size, size=min(6, flat.size), replace=False)
                fd = np.zeros(len(idx))
                for k, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + 1e-5
                    hi = float(run().data)
                    flat[i] = orig - 1e-5
                    lo = float(run().data)
                    flat[i] = orig
                    fd[k] = (hi - lo) / 2e-5
                an = gflat[idx]
                denom = max(np.linalg.norm(an) + np.linalg.norm(fd), 1e-8)
                assert np.linalg.norm(an - fd) / denom < 1e-6, p.name
        assert checked >= 10


class TestTrain:
    def test_zero_epochs_equals_initialization(self, tmp_path):
        data, _ = build_tiny_world()
        config = TrainConfig(epochs=0, m=4, seed=3, precision="float64",
                             batch_size=8)
        mc = tiny_model_config(data, seed=3)
        params, report = train(data, config, model_config=mc,
                               checkpoint_path=tmp_path / "c.lesm")
        fresh = init_model(mc, data.manifest.species_ids)
        for a, b in zip(params.parameters(), fresh.parameters()):
            assert np.array_equal(a.data, b.data)
        assert report == []

    def test_same_seed_bit_identical_checkpoints(self, tmp_path):
        data, _ = build_tiny_world()
        config = TrainConfig(epochs=2, m=4, lam_pos=8.0, batch_size=16,
                             seed=4, precision="float64")
        mc = tiny_model_config(data, seed=4)
        train(data, config, model_config=mc,
              checkpoint_path=tmp_path / "a.lesm")
        train(data, config, model_config=mc,
              checkpoint_path=tmp_path / "b.lesm")
        assert (tmp_path / "a.lesm").read_bytes() == \
               (tmp_path / "b.lesm").read_bytes()

    def test_m_exceeding_species_count_rejected(self):
        data, _ = build_tiny_world()
        with pytest.raises(ConfigError):
            train(data, TrainConfig(epochs=1, m=500))

    def test_report_written_as_ldjson(self, tmp_path):
        import json
        data, _ = build_tiny_world()
        config = TrainConfig(epochs=2, m=4, lam_pos=8.0, batch_size=16,
                             seed=4, precision="float64")
        train(data, config, model_config=tiny_model_config(data, 4),
              report_path=tmp_path / "report.ndjson")
        lines = (tmp_path / "report.ndjson").read_text().strip().split("\n")
        assert len(lines) == 2
        for i, line in enumerate(lines):
            rec = json.loads(line)
            assert rec["epoch"] == i
            assert {"token_loss", "text_loss", "wall_seconds",
                    "obs_per_second"} <= set(rec)

    def test_textless_dataset_matches_token_only_training(self, tmp_path):
        """With no text anywhere, theta/token training is identical to a run
        where the text branch never contributes."""
        data, _ = build_tiny_world(with_text=False)
        config = TrainConfig(epochs=1, m=4, lam_pos=8.0, batch_size=16,
                             seed=6, precision="float64")
        mc = tiny_model_config(data, seed=6)
        params_a, _ = train(data, config, model_config=mc)
        params_b, _ = train(data, config, model_config=mc)
        for a, b in zip(params_a.parameters(), params_b.parameters()):
            assert np.array_equal(a.data, b.data)
        # text head stays at initialization (no text terms existed)
        fresh = init_model(mc, data.manifest.species_ids)
        assert np.array_equal(params_a.text_w1.data, fresh.text_w1.data)

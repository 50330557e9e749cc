import json
import os

import numpy as np
import pytest

from partlearn import downstream as ds
from partlearn import nncore as nn
from partlearn import synth
from partlearn.downstream import (AdaptResult, EvalReport, LoraAdapter, Normalizer,
                                  ProbeHead, ReportRow, SvrConvergenceWarning,
                                  TaskData, clone_encoder, dynamic_predict,
                                  encode_corpus, finetune_all, fit_lora,
                                  fit_probe_mlp, fit_scratch, fit_svr,
                                  make_normalizer, pca_embed, r2_score,
                                  read_report_csv, run_protocol, write_report_csv,
                                  write_report_json)
from partlearn.encoder import EncoderConfig, PartEncoder, extract_graph


@pytest.fixture(scope="module")
def tiny_setup():
    parts = [synth.generate_part(synth.PartSpec(seed=s, primitive_count=2),
                                 part_id=f"p{s:03d}") for s in range(18)]
    graphs = [extract_graph(p) for p in parts]
    enc = PartEncoder(EncoderConfig(hidden_width=16, latent_width=8, seed=2))
    latents = encode_corpus(enc, graphs)
    return graphs, enc, latents


def params_bytes(module) -> dict:
    return {k: p.data.tobytes() for k, p in module.params().items()}


# --- metric ----------------------------------------------------------------------

def test_r2_hand_oracles():
    assert r2_score([1.0, 2.0, 4.0], [1.0, 2.0, 3.0]) == pytest.approx(0.5)
    assert r2_score([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    # predicting the truth mean everywhere scores exactly zero
    assert r2_score([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
    assert r2_score([9.0, 9.0, 9.0], [1.0, 2.0, 3.0]) < 0.0


def test_r2_rejections():
    with pytest.raises(ValueError):
        r2_score([1.0, 2.0], [3.0, 3.0])  # constant truth is undefined
    with pytest.raises(ValueError):
        r2_score([1.0], [1.0])
    with pytest.raises(ValueError):
        r2_score([1.0, 2.0, 3.0], [1.0, 2.0])


# --- normalization ---------------------------------------------------------------

def test_static_normalizer_round_trip():
    y = np.array([0.5, 2.0, 7.0, 1.3])
    nz = Normalizer(mode="static", log=True).fit(y)
    assert nz.mu == pytest.approx(np.log(y).mean())
    assert nz.sigma == pytest.approx(np.log(y).std())
    z = nz.normalize(y)
    assert np.allclose(nz.denormalize(z), y, rtol=0, atol=1e-12)
    assert np.allclose(nz.normalize(nz.denormalize(z)), z, rtol=0, atol=1e-12)
    # constant labels degrade to sigma 1 and still round-trip
    flat = Normalizer(mode="static", log=True).fit(np.full(3, 2.0))
    assert flat.sigma == 1.0
    assert np.allclose(flat.denormalize(flat.normalize([2.0, 2.0])), 2.0, atol=1e-12)


def test_raw_normalizer_pass_through():
    nz = Normalizer(mode="static", log=False).fit(np.array([0.0, 0.5, 1.0]))
    y = np.array([0.1, 0.9])
    assert np.array_equal(nz.normalize(y), y)
    assert np.array_equal(nz.denormalize(y), y)


def test_normalizer_validation():
    with pytest.raises(ValueError):
        Normalizer(mode="weird")
    with pytest.raises(ValueError):
        Normalizer(mode="dynamic", tdi_feature=True)
    with pytest.raises(ValueError):
        Normalizer(mode="static", log=True).fit([1.0, -2.0])
    with pytest.raises(ValueError):
        Normalizer(mode="dynamic").fit([1.0, 2.0])  # needs TDI
    with pytest.raises(ValueError):
        Normalizer(mode="dynamic").fit([1.0, 2.0], tdi=[1.0, 0.0])
    with pytest.raises(ValueError):
        Normalizer(mode="dynamic").fit([1.0, 2.0], tdi=[1.0])


def test_make_normalizer_modes():
    y = [1.0, 2.0, 3.0]
    assert make_normalizer("static", y).mode == "static"
    plus = make_normalizer("static+tdi", y, tdi=[1.0, 1.0, 1.0])
    assert plus.mode == "static" and plus.tdi_feature and plus.needs_tdi
    dyn = make_normalizer("dynamic", y, tdi=[1.0, 2.0, 3.0])
    assert dyn.mode == "dynamic" and dyn.needs_tdi
    with pytest.raises(ValueError):
        make_normalizer("nope", y)


def test_dynamic_predict_oracles():
    tdi = np.array([2.0, 5.0, 9.0])
    # a head output of one passes the heuristic straight through
    assert np.array_equal(dynamic_predict(np.ones(3), tdi), tdi)
    # a perfect heuristic makes the constant-1 head optimal
    assert r2_score(dynamic_predict(np.ones(3), tdi), tdi) == 1.0
    with pytest.raises(ValueError):
        dynamic_predict(np.ones(2), np.array([1.0, 0.0]))


# --- probe head ------------------------------------------------------------------

def test_probe_head_parameter_count():
    head = ProbeHead(64, np.random.default_rng(0))
    assert head.parameter_count() == 4225
    out = head(nn.Tensor(np.zeros((5, 64))))
    assert out.data.shape == (5, 1)


def test_probe_linear_teacher_r2():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((140, 8))
    w = rng.standard_normal(8) * 0.4
    y = np.exp(x @ w * 0.5 + 0.2 + rng.normal(0.0, 0.01, 140))
    nz = make_normalizer("static", y[:100])
    fit = fit_probe_mlp(x[:100], y[:100], nz, seed=1)
    r2 = r2_score(fit.predict(x[100:]), y[100:])
    assert r2 > 0.9
    assert fit.trainable_params == ProbeHead(8, np.random.default_rng(0)).parameter_count()


def test_probe_deterministic_per_seed():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((30, 6))
    y = np.exp(rng.standard_normal(30) * 0.1 + 1.0)
    preds = []
    for seed in (4, 4, 5):
        nz = make_normalizer("static", y)
        fit = fit_probe_mlp(x, y, nz, seed=seed, steps=50)
        preds.append(fit.predict(x))
    assert np.array_equal(preds[0], preds[1])
    assert not np.array_equal(preds[0], preds[2])


def test_probe_rejects_bad_labels():
    x = np.zeros((4, 3))
    nz = Normalizer(log=False)
    with pytest.raises(ValueError):
        fit_probe_mlp(x, [1.0, 2.0, np.nan, 3.0], nz, steps=1)
    with pytest.raises(ValueError):
        fit_probe_mlp(x, [1.0, 2.0], nz, steps=1)


# --- SVR -------------------------------------------------------------------------

def test_svr_line_oracle():
    x = np.linspace(-1.0, 1.0, 20)[:, None]
    y = x[:, 0].copy()
    model = fit_svr(x, y)
    assert model.converged
    assert r2_score(model.predict(x), y) > 0.99
    again = fit_svr(x, y)
    assert np.array_equal(model.beta, again.beta)


def test_svr_flat_target_within_epsilon():
    x = np.linspace(0.0, 1.0, 12)[:, None]
    model = fit_svr(x, np.full(12, 3.0), epsilon=0.01)
    assert np.max(np.abs(model.predict(x) - 3.0)) <= 0.012


def test_svr_nonconvergence_is_reported():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 4))
    y = rng.standard_normal(40) * 5.0
    with pytest.warns(SvrConvergenceWarning):
        model = fit_svr(x, y, Normalizer(log=False), max_passes=1)
    assert not model.converged and model.passes == 1


def test_svr_validation():
    with pytest.raises(ValueError):
        fit_svr(np.zeros((1, 2)), [1.0])
    with pytest.raises(ValueError):
        fit_svr(np.zeros((3, 2)), [1.0, 2.0, 3.0], gamma=-1.0)
    with pytest.raises(ValueError):
        fit_svr(np.zeros((3, 2)), [1.0, 2.0, 3.0], c=0.0)


def test_svr_dynamic_mode():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((25, 3))
    y = np.exp(rng.standard_normal(25) * 0.5 + 1.0)
    nz = make_normalizer("dynamic", y, tdi=y)  # perfect heuristic
    model = fit_svr(x, y, nz, tdi=y)
    assert r2_score(model.predict(x, tdi=y), y) > 0.99


# --- LoRA ------------------------------------------------------------------------

def test_lora_rank_scaling_and_validation(tiny_setup):
    graphs, enc, _ = tiny_setup
    a1 = LoraAdapter(enc, 1, np.random.default_rng(0))
    a8 = LoraAdapter(enc, 8, np.random.default_rng(0))
    assert a8.parameter_count() == 8 * a1.parameter_count()
    per_layer = sum(r * (layer.w_self.data.shape[1] + layer.w_self.data.shape[0])
                    for r in (1,) for layer in enc.adapter_layers()) * 2
    assert a1.parameter_count() == per_layer
    with pytest.raises(ValueError):
        LoraAdapter(enc, 0, np.random.default_rng(0))


def test_lora_zero_init_matches_probe(tiny_setup):
    graphs, enc, latents = tiny_setup
    y = np.exp(latents[:, 0] * 0.3 + 1.0)
    nz = make_normalizer("static", y)
    probe = fit_probe_mlp(latents, y, nz, seed=7, steps=0)
    lora = fit_lora(enc, graphs, y, nz, seed=7, rank=1, steps=0)
    assert np.allclose(lora.predict(graphs), probe.predict(latents),
                       rtol=0, atol=1e-12)


def test_lora_never_mutates_base(tiny_setup):
    graphs, enc, latents = tiny_setup
    y = np.exp(latents[:, 1] * 0.5 + 0.5)
    before = params_bytes(enc)
    fit = fit_lora(enc, graphs, y, make_normalizer("static", y), seed=0,
                   rank=2, steps=25)
    assert params_bytes(enc) == before
    # the adapters themselves did move
    assert any(np.any(b.data != 0.0) for (_, b) in fit.lora.pairs.values())


def test_lora_trainable_param_accounting(tiny_setup):
    graphs, enc, latents = tiny_setup
    y = np.exp(latents[:, 0] * 0.2 + 1.0)
    nz = make_normalizer("static", y)
    fit1 = fit_lora(enc, graphs, y, nz, rank=1, steps=0)
    fit8 = fit_lora(enc, graphs, y, nz, rank=8, steps=0)
    head = fit1.head.parameter_count()
    assert fit8.trainable_params - head == 8 * (fit1.trainable_params - head)


# --- finetune / scratch ------------------------------------------------------------

def test_clone_encoder_is_independent(tiny_setup):
    _, enc, _ = tiny_setup
    twin = clone_encoder(enc)
    assert params_bytes(twin) == params_bytes(enc)
    twin.tier1[0].w_self.data[0, 0] += 1.0
    assert params_bytes(twin) != params_bytes(enc)


def test_finetune_zero_steps_equals_probe(tiny_setup):
    graphs, enc, latents = tiny_setup
    y = np.exp(latents[:, 2] * 0.4 + 0.3)
    nz = make_normalizer("static", y)
    probe = fit_probe_mlp(latents, y, nz, seed=9, steps=0)
    tuned = finetune_all(enc, graphs, y, nz, seed=9, steps=0)
    assert np.allclose(tuned.predict(graphs), probe.predict(latents),
                       rtol=0, atol=1e-12)
    # the input encoder is copied, never touched
    assert tuned.encoder is not enc


def test_finetune_overfits_few_samples(tiny_setup):
    graphs, enc, latents = tiny_setup
    rng = np.random.default_rng(5)
    y = np.exp(rng.standard_normal(10) * 0.6)
    nz = make_normalizer("static", y)
    fit = finetune_all(enc, graphs[:10], y, nz, seed=0, steps=800,
                       lr_start=3e-3, lr_end=1e-5)
    assert fit.final_loss < 5e-3
    assert fit.trainable_params == (enc.parameter_count()
                                    + fit.head.parameter_count())


def test_scratch_baseline(tiny_setup):
    graphs, enc, latents = tiny_setup
    y = np.exp(latents[:, 0] * 0.2 + 0.5)
    nz = make_normalizer("static", y)
    a = fit_scratch(enc.config, graphs, y, nz, seed=3, steps=5)
    b = fit_scratch(enc.config, graphs, y, nz, seed=3, steps=5)
    assert np.array_equal(a.predict(graphs), b.predict(graphs))
    # fresh random weights, not the pretrained ones
    assert params_bytes(a.encoder) != params_bytes(enc)


# --- protocol ----------------------------------------------------------------------

def test_run_protocol_bookkeeping(tiny_setup):
    graphs, enc, latents = tiny_setup
    rng = np.random.default_rng(8)
    tasks = [TaskData("alpha", np.exp(latents[:, 0] + rng.normal(0, 0.05, 18))),
             TaskData("beta", np.exp(latents[:, 1] + rng.normal(0, 0.05, 18)))]
    report = run_protocol(enc, graphs, tasks,
                          strategies=("probe-mlp", "probe-svr"),
                          shot_list=(4, 6), n_runs=2, test_size=8, seed=1,
                          fit_options={"probe-mlp": {"steps": 40}})
    assert len(report.rows) == 2 * 2 * 2 * 2
    assert all(row.r2 <= 1.0 for row in report.rows)
    assert {row.strategy for row in report.rows} == {"probe-mlp", "probe-svr"}
    aggs = report.aggregates()
    assert all(agg["runs"] == 2 for agg in aggs)
    key = lambda r: (r.task, r.strategy, r.normalization, r.shots)
    for agg in aggs:
        members = [r.r2 for r in report.rows
                   if key(r) == (agg["task"], agg["strategy"],
                                 agg["normalization"], agg["shots"])]
        assert agg["r2_mean"] == pytest.approx(np.mean(members))


def test_run_protocol_is_deterministic(tiny_setup):
    graphs, enc, latents = tiny_setup
    tasks = [TaskData("alpha", np.exp(latents[:, 0]))]
    kw = dict(strategies=("probe-mlp",), shot_list=(5,), n_runs=2, test_size=6,
              seed=0, fit_options={"probe-mlp": {"steps": 30}})
    r1 = run_protocol(enc, graphs, tasks, **kw)
    r2 = run_protocol(enc, graphs, tasks, **kw)
    assert [row.r2 for row in r1.rows] == [row.r2 for row in r2.rows]


def test_run_protocol_normalization_modes(tiny_setup):
    graphs, enc, latents = tiny_setup
    rng = np.random.default_rng(2)
    y = np.exp(latents[:, 0] * 0.5 + 1.0)
    tdi = y * rng.uniform(0.9, 1.1, 18)
    tasks = [TaskData("timed", y, tdi=tdi)]
    report = run_protocol(enc, graphs, tasks, strategies=("probe-mlp",),
                          shot_list=(6,), n_runs=1, test_size=6, seed=0,
                          normalizations=("static", "static+tdi", "dynamic"),
                          fit_options={"probe-mlp": {"steps": 30}})
    assert {row.normalization for row in report.rows} == set(ds.NORMALIZATIONS)
    assert all(np.isfinite(row.r2) and row.r2 <= 1.0 for row in report.rows)


def test_run_protocol_rejections(tiny_setup):
    graphs, enc, latents = tiny_setup
    tasks = [TaskData("alpha", np.exp(latents[:, 0]))]
    with pytest.raises(ValueError):
        run_protocol(enc, graphs, tasks, test_size=18)
    with pytest.raises(ValueError):
        run_protocol(enc, graphs, tasks, shot_list=(15,), test_size=8)
    with pytest.raises(ValueError):
        run_protocol(enc, graphs, tasks, strategies=("mystery",), test_size=4)
    with pytest.raises(ValueError):
        run_protocol(enc, graphs, tasks, normalizations=("dynamic",), test_size=4)


def test_run_protocol_refits_tdi_on_each_shot_subset(tiny_setup):
    graphs, enc, latents = tiny_setup
    y = np.exp(latents[:, 0] * 0.5 + 1.0)
    calls = []

    def fitter(train_idx):
        calls.append(np.array(train_idx))
        return np.full(18, float(np.mean(y[train_idx])))

    tasks = [TaskData("timed", y, tdi_fit=fitter)]
    report = run_protocol(enc, graphs, tasks, strategies=("probe-mlp",),
                          shot_list=(4, 5), n_runs=2, test_size=6, seed=0,
                          normalizations=("static+tdi", "dynamic"),
                          fit_options={"probe-mlp": {"steps": 25}})
    # one fit per (shots, run), shared by both TDI-aware normalizations
    assert len(calls) == 4
    order = np.random.default_rng([0, 5]).permutation(18)
    test_idx = np.sort(order[:6])
    pool = order[6:]
    expected = [np.sort(np.random.default_rng([0, s, r])
                        .choice(pool, size=s, replace=False))
                for s in (4, 5) for r in (0, 1)]
    assert [c.tolist() for c in calls] == [e.tolist() for e in expected]
    assert all(np.intersect1d(c, test_idx).size == 0 for c in calls)
    assert all(np.isfinite(row.r2) for row in report.rows)


def test_run_protocol_run_offset_reproduces_single_cells(tiny_setup):
    graphs, enc, latents = tiny_setup
    tasks = [TaskData("alpha", np.exp(latents[:, 0]))]
    kw = dict(strategies=("probe-mlp",), shot_list=(5,), test_size=6, seed=0,
              fit_options={"probe-mlp": {"steps": 25}})
    full = run_protocol(enc, graphs, tasks, n_runs=2, **kw)
    part0 = run_protocol(enc, graphs, tasks, n_runs=1, run_offset=0, **kw)
    part1 = run_protocol(enc, graphs, tasks, n_runs=1, run_offset=1, **kw)
    assert [r.run_seed for r in full.rows] == [0, 1]
    assert [r.r2 for r in full.rows] == [part0.rows[0].r2, part1.rows[0].r2]


# --- report files -------------------------------------------------------------------

def sample_report() -> EvalReport:
    rows = [ReportRow("am", "probe-mlp", "static", 50, 0, 0.8125, 1.5, 4225),
            ReportRow("am", "probe-mlp", "static", 50, 1, 0.75, 1.25, 4225)]
    return EvalReport(rows)


def test_report_csv_round_trip(tmp_path):
    report = sample_report()
    path = str(tmp_path / "report.csv")
    write_report_csv(report, path)
    text = open(path).read()
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(ds.CSV_COLUMNS)
    # timing stays blank by default so reruns are byte-identical
    assert lines[1].split(",")[6] == ""
    back = read_report_csv(path)
    assert [r.r2 for r in back.rows] == [0.8125, 0.75]
    assert all(np.isnan(r.fit_seconds) for r in back.rows)
    write_report_csv(report, path)
    assert open(path).read() == text

    timed = str(tmp_path / "timed.csv")
    write_report_csv(report, timed, timing=True)
    assert read_report_csv(timed).rows[0].fit_seconds == 1.5
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]


def test_report_json_mirror(tmp_path):
    report = sample_report()
    path = str(tmp_path / "report.json")
    write_report_json(report, path)
    payload = json.loads(open(path).read())
    assert len(payload["rows"]) == 2
    assert payload["rows"][0]["fit_seconds"] is None
    agg = payload["aggregates"][0]
    assert agg["runs"] == 2
    assert agg["r2_mean"] == pytest.approx((0.8125 + 0.75) / 2)


def test_read_report_rejects_other_csv(tmp_path):
    path = str(tmp_path / "other.csv")
    with open(path, "w") as fh:
        fh.write("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_report_csv(path)


# --- embedding ----------------------------------------------------------------------

def test_pca_embed_planar_data():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.standard_normal((64, 2)))[0].T
    coords_true = rng.standard_normal((50, 2)) * np.array([3.0, 1.0])
    x = coords_true @ basis + 0.7
    out = pca_embed(x, dims=2)
    assert out.shape == (50, 2)
    # two principal directions capture all the variance of planar data
    assert np.sum(out.var(axis=0)) == pytest.approx(np.sum(x.var(axis=0)), rel=1e-9)
    assert out[:, 0].var() >= out[:, 1].var()
    assert np.array_equal(pca_embed(x, dims=2), out)
    with pytest.raises(ValueError):
        pca_embed(x[:1], dims=2)

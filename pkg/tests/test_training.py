import csv
import io
import json
import zipfile
from dataclasses import replace

import numpy as np
import pytest
import torch

from vcstar import training as T
from vcstar.features import synth_corpus
from vcstar.metrics import items_from_synth
from vcstar.training import TrainingConfig


def tiny(**kw):
    base = dict(
        batch_size=2,
        segment_len=16,
        iterations=4,
        channels=(2, 3),
        bottleneck_channels=4,
        n_blocks=1,
    )
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def synth():
    return synth_corpus(2, 3, 128, seed=2, q=8)


@pytest.fixture(scope="module")
def corpus(synth):
    return synth.corpus


def params(state):
    return {k: v.detach().clone() for k, v in state.models.state_tensors().items()}


# ---------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    cfg = tiny(variant="T_ADV", weights={"lambda_cls": 2.0, "lambda_cyc": 3.0, "lambda_id": 4.0})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainingConfig.from_json(p) == cfg


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError, match="unknown"):
        TrainingConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        tiny(variant="BOGUS")
    with pytest.raises(ValueError):
        tiny(batch_size=0)
    with pytest.raises(ValueError):
        tiny(lr_g=-1.0)


def test_paper_preset():
    cfg = T.paper_preset()
    assert cfg.iterations == 300_000
    assert (cfg.batch_size, cfg.segment_len) == (8, 128)
    assert (cfg.lr_g, cfg.lr_d, cfg.adam_beta1) == (2e-4, 1e-4, 0.5)
    assert cfg.id_cutoff == 10_000
    assert T.paper_preset(iterations=5).iterations == 5


def test_model_config_follows_variant():
    for variant, cond, pair, cls in [
        ("CLS_ONLY", "none", False, True),
        ("T_ADV", "target", False, False),
        ("T_ADV_PLUS_CLS", "target", False, True),
        ("ST_ADV", "pair", True, False),
    ]:
        m = tiny(variant=variant).model_config(3, 8)
        assert (m.discriminator_condition, m.pair_conditioned, m.use_classifier) == (cond, pair, cls)


def test_prepare_corpus_errors(corpus):
    with pytest.raises(ValueError):
        T.prepare_corpus({0: corpus[0]}, 16)
    with pytest.raises(ValueError):
        T.prepare_corpus({0: corpus[0], 2: corpus[1]}, 16)
    with pytest.raises(ValueError):
        T.prepare_corpus(corpus, 129)


def test_sample_batch_shapes(corpus):
    cfg = tiny(batch_size=5)
    normed, _ = T.prepare_corpus(corpus, cfg.segment_len)
    x, c, cp = T.sample_batch(normed, cfg, np.random.default_rng(0))
    assert x.shape == (5, 8, 16) and x.dtype == torch.float32
    assert c.shape == cp.shape == (5,)
    assert int(c.max()) < 2 and int(cp.max()) < 2


# -------------------------------------------------------------- training


def test_zero_learning_rate_leaves_params(corpus):
    cfg = tiny(lr_g=0.0, lr_d=0.0, lr_c=0.0, variant="T_ADV_PLUS_CLS")
    state = T.init_state(corpus, cfg)
    before = params(state)
    state, rows = T.train_loop(corpus, cfg, state)
    assert len(rows) == 4
    for k, v in params(state).items():
        assert torch.equal(v, before[k]), k


@pytest.mark.parametrize("variant", list(T.OBJECTIVE_AXIS))
def test_every_variant_trains(corpus, variant):
    cfg = tiny(variant=variant, iterations=2)
    state = T.init_state(corpus, cfg)
    before = params(state)
    state, rows = T.train_loop(corpus, cfg, state)
    assert state.iteration == 2
    assert all(np.isfinite(r[k]) for r in rows for k in T.LOG_FIELDS)
    changed = [k for k, v in params(state).items() if not torch.equal(v, before[k])]
    assert any(k.startswith("generator.") for k in changed)
    assert any(k.startswith("discriminator.") for k in changed)
    assert any(k.startswith("classifier.") for k in changed) == (state.models.classifier is not None)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_determinism_bitwise(corpus, tmp_path, dtype):
    cfg = tiny(dtype=dtype)
    logs = []
    for run in range(2):
        _, rows = T.train_loop(corpus, cfg)
        p = tmp_path / f"{dtype}_{run}.csv"
        T.write_loss_log(rows, p)
        logs.append(p.read_bytes())
    assert logs[0] == logs[1]
    _, other = T.train_loop(corpus, replace(cfg, seed=1))
    assert other[0]["L_G"] != rows[0]["L_G"]


def test_loss_log_schema(corpus, tmp_path):
    _, rows = T.train_loop(corpus, tiny(iterations=3))
    p = tmp_path / "loss.csv"
    T.write_loss_log(rows[:2], p)
    T.write_loss_log(rows[2:], p, append=True)
    with open(p) as fh:
        data = list(csv.DictReader(fh))
    assert len(data) == 3
    assert tuple(data[0]) == T.LOG_FIELDS
    assert [int(r["iteration"]) for r in data] == [0, 1, 2]
    assert float(data[1]["L_G"]) == rows[1]["L_G"]


def test_identity_term_switches_off(corpus):
    _, rows = T.train_loop(corpus, tiny(iterations=4, id_cutoff=2))
    assert rows[0]["id"] > 0 and rows[1]["id"] > 0
    assert rows[2]["id"] == 0.0 and rows[3]["id"] == 0.0


def test_resume_equals_uninterrupted(corpus, tmp_path):
    cfg = tiny(iterations=6, checkpoint_every=3)
    full, full_rows = T.train_loop(corpus, cfg, out_dir=tmp_path / "a")
    T.train_loop(corpus, replace(cfg, iterations=3), out_dir=tmp_path / "b")
    resumed = T.checkpoint_load(tmp_path / "b" / "ckpt_0000003.vcz")
    assert resumed.iteration == 3
    resumed, rows = T.train_loop(corpus, cfg, state=resumed)
    assert rows == full_rows[3:]
    a, b = params(full), params(resumed)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert (tmp_path / "a" / "ckpt_0000006.vcz").exists()


def test_numerical_abort(corpus, tmp_path):
    cfg = tiny()
    state = T.init_state(corpus, cfg)
    with torch.no_grad():
        state.models.discriminator.head.bias.fill_(float("nan"))
    with pytest.raises(T.NumericalAbort) as info:
        T.train_loop(corpus, cfg, state=state, out_dir=tmp_path)
    assert info.value.snapshot["iteration"] == 0
    assert not np.isfinite(info.value.snapshot["L_D"])
    assert (tmp_path / "abort.vcz").exists()


# ------------------------------------------------------------ checkpoints


def test_checkpoint_byte_identical(corpus, tmp_path):
    state, _ = T.train_loop(corpus, tiny(variant="T_ADV_PLUS_CLS", iterations=2))
    T.checkpoint_save(state, tmp_path / "a.vcz")
    loaded = T.checkpoint_load(tmp_path / "a.vcz")
    T.checkpoint_save(loaded, tmp_path / "b.vcz")
    assert (tmp_path / "a.vcz").read_bytes() == (tmp_path / "b.vcz").read_bytes()
    assert loaded.config == state.config
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
    assert {d: s.to_dict() for d, s in loaded.stats.items()} == {d: s.to_dict() for d, s in state.stats.items()}


def test_checkpoint_keeps_dtype(corpus, tmp_path):
    state, _ = T.train_loop(corpus, tiny(dtype="float64", iterations=1))
    T.checkpoint_save(state, tmp_path / "a.vcz")
    with zipfile.ZipFile(tmp_path / "a.vcz") as zf:
        manifest = json.loads(zf.read("manifest.json"))
    assert {m["dtype"] for k, m in manifest["tensors"].items() if k.startswith("model/")} == {"<f8"}
    loaded = T.checkpoint_load(tmp_path / "a.vcz")
    assert next(loaded.models.generator.parameters()).dtype == torch.float64


def _rewrite_manifest(src, dst, edit):
    with zipfile.ZipFile(src) as zin:
        entries = {n: zin.read(n) for n in zin.namelist()}
    entries["manifest.json"] = edit(entries["manifest.json"])
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zout:
        for n, data in entries.items():
            zout.writestr(n, data)
    dst.write_bytes(buf.getvalue())


def test_checkpoint_errors(corpus, tmp_path):
    state = T.init_state(corpus, tiny())
    good = tmp_path / "good.vcz"
    T.checkpoint_save(state, good)

    bad = tmp_path / "bad.vcz"
    _rewrite_manifest(good, bad, lambda b: b"{not json")
    with pytest.raises(T.CheckpointError, match="bad manifest"):
        T.checkpoint_load(bad)

    def bump(b):
        d = json.loads(b)
        d["format_version"] = 99
        return json.dumps(d).encode()

    _rewrite_manifest(good, bad, bump)
    with pytest.raises(T.CheckpointError, match="version"):
        T.checkpoint_load(bad)

    def drop(b):
        d = json.loads(b)
        del d["stats"]
        return json.dumps(d).encode()

    _rewrite_manifest(good, bad, drop)
    with pytest.raises(T.CheckpointError, match="bad manifest"):
        T.checkpoint_load(bad)

    (tmp_path / "junk.vcz").write_bytes(b"nope")
    with pytest.raises(T.CheckpointError):
        T.checkpoint_load(tmp_path / "junk.vcz")


# --------------------------------------------------------------- ablation


@pytest.mark.parametrize("axis,labels", [("objective", T.OBJECTIVE_AXIS), ("conditioning", T.CONDITIONING_AXIS)])
def test_ablation_shape(corpus, synth, tmp_path, axis, labels):
    items = items_from_synth(synth, [2])
    report = T.ablation_run(corpus, items, tiny(iterations=1), axis)
    assert [r["variant"] for r in report.rows] == list(labels)
    for r in report.rows:
        assert r["n_seeds"] == 3 and r["seeds"] == [0, 1, 2]
        assert r["mcd_mean"] == pytest.approx(np.mean(r["mcd_per_seed"]))
        assert r["mcd_std"] == pytest.approx(np.std(r["mcd_per_seed"]))
        assert r["msd_std"] == pytest.approx(np.std(r["msd_per_seed"]))
    report.write(tmp_path)
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(labels)
    data = json.loads((tmp_path / "ablation.json").read_text())
    assert data["axis"] == axis and "mcd" in data["conventions"]


def test_ablation_errors(corpus, synth):
    with pytest.raises(ValueError):
        T.ablation_variants("nope", tiny())
    with pytest.raises(ValueError):
        T.ablation_run(corpus, [], tiny(iterations=1), "objective")

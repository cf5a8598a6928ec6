import dataclasses
import json

import numpy as np
import pytest

from fewshot_sbir.evalharness import (EvalConfig, EvalReport, MissingCheckpointError, acc_at_q,
                                      adapt, adaptation_set, ablation_suite, emit_report,
                                      evaluate_method, load_report, retrieve, true_match_ranks)

FAST = EvalConfig(seeds=2, timing=False)


def _zero_alpha(cp):
    params = dict(cp.params)
    for k in ("alpha.M.w", "alpha.M.b"):
        params[k] = np.zeros_like(params[k])
    return dataclasses.replace(cp, params=params)


# -- scoring ----------------------------------------------------------------------

def test_acc_at_q_examples():
    assert acc_at_q([1, 3, 7], 5) == pytest.approx(200 / 3)
    assert acc_at_q([1, 1, 1], 1) == 100.0
    assert acc_at_q([4, 2, 3], 4) == 100.0
    with pytest.raises(ValueError):
        acc_at_q([], 1)


def test_retrieve_gallery_of_one(meta_checkpoint, small_world):
    data = small_world[0]
    params = meta_checkpoint.tensors(False)
    assert retrieve(params, data.features[1], data.features[:1], ["only"]) == ["only"]


def test_retrieve_ties_break_by_id(meta_checkpoint, small_world):
    data = small_world[0]
    params = meta_checkpoint.tensors(False)
    row = data.features[:1]
    assert retrieve(params, data.features[3], np.vstack([row, row, row]), ["b", "c", "a"]) == ["a", "b", "c"]


def test_true_match_ranks_tie_rule():
    q = np.array([[0.0, 0.0]])
    g = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
    assert true_match_ranks(q, g, np.array([1]), ["b", "a", "c"]).tolist() == [1]
    assert true_match_ranks(q, g, np.array([0]), ["b", "a", "c"]).tolist() == [2]
    assert true_match_ranks(q, g, np.array([2]), ["b", "a", "c"]).tolist() == [3]


# -- adaptation -------------------------------------------------------------------

def test_adaptation_set_is_method_independent(small_world):
    data, _, split = small_world
    unit = split.test_units[0]
    a = adaptation_set(data, split, unit, 3, seed=1)
    b = adaptation_set(data, split, unit, 3, seed=1)
    assert a.digest(data) == b.digest(data)
    assert len(set(data.pair_id[a.anchor])) == 3
    assert a.digest(data) != adaptation_set(data, split, unit, 3, seed=2).digest(data)


def test_adaptation_set_rejects_large_k(small_world):
    data, _, split = small_world
    with pytest.raises(ValueError):
        adaptation_set(data, split, split.test_units[0], 50, seed=0)


def test_zero_alpha_adapt_is_identity(meta_checkpoint, small_world):
    data, _, split = small_world
    cp = _zero_alpha(meta_checkpoint)
    aset = adaptation_set(data, split, split.test_units[0], 3, 0)
    out = adapt(cp, aset, data, "ours")
    assert all(np.array_equal(out[k].data, cp.params[k]) for k in cp.params)


def test_zero_alpha_ours_equals_no_adapt_rankings(meta_checkpoint, small_world):
    data, _, split = small_world
    cp = _zero_alpha(meta_checkpoint)
    ours = evaluate_method("ours", cp, data, split, 3, FAST)
    base = evaluate_method("no-adapt", cp, data, split, 3, FAST)
    assert ours.acc1 == base.acc1 and ours.acc5 == base.acc5


def test_ours_adapt_changes_only_the_head(meta_checkpoint, small_world):
    data, _, split = small_world
    aset = adaptation_set(data, split, split.test_units[0], 3, 0)
    info = {}
    out = adapt(meta_checkpoint, aset, data, "ours", info=info)
    changed = {k for k in out if not np.array_equal(out[k].data, meta_checkpoint.params[k])}
    assert changed == {"M.w", "M.b"}
    assert 0.0 < info["margin"] < 1.0


def test_k1_uses_fixed_margin(meta_checkpoint, small_world):
    data, _, split = small_world
    info = {}
    adapt(meta_checkpoint, adaptation_set(data, split, split.test_units[0], 1, 0), data, "ours",
          EvalConfig(fixed_margin=0.3), info)
    assert info["margin"] == 0.3


@pytest.mark.parametrize("method", ["fine-tune", "maml-full"])
def test_full_network_methods_touch_encoder(meta_checkpoint, small_world, method):
    data, _, split = small_world
    aset = adaptation_set(data, split, split.test_units[0], 3, 0)
    out = adapt(meta_checkpoint, aset, data, method)
    assert not np.array_equal(out["F.w1"].data, meta_checkpoint.params["F.w1"])
    assert np.array_equal(out["R.out.w"].data, meta_checkpoint.params["R.out.w"])


def test_unknown_method_and_missing_checkpoint(meta_checkpoint, small_world):
    data, _, split = small_world
    with pytest.raises(ValueError):
        evaluate_method("oracle", meta_checkpoint, data, split, 3, FAST)
    with pytest.raises(MissingCheckpointError):
        evaluate_method("ours", None, data, split, 3, FAST)


def test_evaluation_is_deterministic(meta_checkpoint, small_world):
    data, _, split = small_world
    a = evaluate_method("ours", meta_checkpoint, data, split, 3, FAST)
    b = evaluate_method("ours", meta_checkpoint, data, split, 3, FAST)
    assert a.rows() == b.rows() and len(a.rows()) == 2
    assert set(a.margins) == set(split.test_units)


def test_ablation_suite_shapes(meta_checkpoint, small_world):
    data, _, split = small_world
    seen = []

    def trainer(overrides):
        seen.append(overrides)
        return meta_checkpoint

    res = ablation_suite(meta_checkpoint, data, split, FAST, trainer, steps=(1, 2), ks=(1, 3),
                         dims=(4,), reg_grid=("none",), k=3)
    assert [r.label for r in res.all_reports()] == ["ours-steps1", "ours-steps2", "ours-k1", "ours-k3",
                                                    "ours-d4", "ours-reg[none]"]
    assert seen == [{"embed_dim": 4}, {"regularizers": "none"}]
    assert set(res.margins) == set(split.test_units) and res.margin_std >= 0


# -- report files -------------------------------------------------------------------

def _reports():
    return [EvalReport("ours", "category", 5, [40.0, 1 / 3], [80.0, 90.0], [1.5, 2.25]),
            EvalReport("no-adapt", "category", 5, [30.0], [70.0], [0.0])]


def test_empty_report_is_header_only(tmp_path):
    emit_report([], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "method,mode,k,seed,acc1,acc5,adapt_ms\n"
    emit_report([], tmp_path / "r.json", "json")
    assert json.loads((tmp_path / "r.json").read_text()) == []


def test_csv_and_json_hold_identical_numbers(tmp_path):
    emit_report(_reports(), tmp_path / "r.csv")
    emit_report(_reports(), tmp_path / "r.json", "json")
    assert load_report(tmp_path / "r.csv") == load_report(tmp_path / "r.json")
    assert load_report(tmp_path / "r.csv")[1]["acc1"] == 1 / 3


def test_emission_is_idempotent(tmp_path):
    for fmt in ("csv", "json"):
        emit_report(_reports(), tmp_path / f"a.{fmt}", fmt)
        first = (tmp_path / f"a.{fmt}").read_bytes()
        emit_report(_reports(), tmp_path / f"a.{fmt}", fmt)
        assert (tmp_path / f"a.{fmt}").read_bytes() == first


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(_reports(), tmp_path / "r.xml", "xml")

import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from azlab.harness import (ResultsTable, SweepPlan, average_runs, collect_results,
                           decode, dump_predictions, prediction_filename, round3, run_ablation,
                           stddev_of_difference)
from azlab.metrics import gold_answers
from azlab.model import IDENTITY_SPEC, Zone, ZoneSpec
from azlab.synthetic import make_keyvalue_dataset
from azlab.text import load_squad

from test_model import tiny_checkpoint

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def small_setup():
    ck = tiny_checkpoint(n_layers=2, n=40)
    ck.metadata["featurize"] = {"max_seq_length": 40, "doc_stride": 8, "max_query_length": 8}
    data = make_keyvalue_dataset(6, seed=3, max_pairs=5)
    return ck, data, load_squad(data)


# ---------------------------------------------------------------- files

def test_prediction_filenames():
    assert prediction_filename(ZoneSpec(0, Zone.Q2)) == "predictions_layer0_q2.json"
    assert prediction_filename(ZoneSpec(11, "p2q")) == "predictions_layer11_p2q.json"
    assert prediction_filename(ZoneSpec(None, Zone.ALL)) == "predictions_layerall_all.json"


def test_default_plan_size():
    plan = SweepPlan.default(12, "out")
    assert len(plan.cells) == 60
    assert len(set(plan.cells)) == 60


def test_full_sweep_writes_expected_names(tmp_path, small_setup):
    ck, _, examples = small_setup
    manifest = run_ablation(ck, examples, SweepPlan.default(2, tmp_path))
    expected = {f"predictions_layer{i}_{z}.json" for i in range(2)
                for z in ("all", "q2", "q2p", "p2q", "p2")}
    written = {p.name for p in tmp_path.glob("predictions_*.json")}
    assert written == expected
    assert all(c["status"] == "ok" for c in manifest["cells"].values())
    assert json.loads((tmp_path / "manifest.json").read_text())["metric"] == "em"


def test_none_cell_matches_baseline(tmp_path, small_setup):
    ck, _, examples = small_setup
    run_ablation(ck, examples, SweepPlan([ZoneSpec(1, Zone.NONE)], tmp_path))
    baseline = dump_predictions(decode(ck, examples, spec=IDENTITY_SPEC))
    assert (tmp_path / "predictions_layer1_none.json").read_text() == baseline


def test_rerun_and_parallel_are_byte_identical(tmp_path, small_setup):
    ck, _, examples = small_setup
    cells = [ZoneSpec(0, Zone.P2), ZoneSpec(1, Zone.Q2P), ZoneSpec(None, Zone.P2Q)]
    run_ablation(ck, examples, SweepPlan(cells, tmp_path / "a"))
    run_ablation(ck, examples, SweepPlan(cells, tmp_path / "b"))
    run_ablation(ck, examples, SweepPlan(list(reversed(cells)), tmp_path / "c"), workers=3)
    run_ablation(ck, examples, SweepPlan(cells[1:2], tmp_path / "d"))
    for name in map(prediction_filename, cells):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
    name = prediction_filename(cells[1])
    assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "a" / name).read_bytes()


def test_failed_cell_recorded_not_fatal(tmp_path, small_setup):
    ck, _, examples = small_setup
    manifest = run_ablation(ck, examples, SweepPlan([ZoneSpec(5, Zone.Q2), ZoneSpec(0, Zone.Q2)],
                                                    tmp_path))
    assert manifest["cells"]["predictions_layer5_q2.json"]["status"] == "failed"
    assert manifest["cells"]["predictions_layer0_q2.json"]["status"] == "ok"


def test_empty_plan_rejected(tmp_path, small_setup):
    ck, _, examples = small_setup
    with pytest.raises(ValueError):
        run_ablation(ck, examples, SweepPlan([], tmp_path))


# ---------------------------------------------------------------- collect

def write_cells(directory, n_layers, answer_for):
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n_layers):
        for z in ("all", "q2", "q2p", "p2q", "p2"):
            preds = answer_for(i, z)
            (directory / f"predictions_layer{i}_{z}.json").write_text(json.dumps(preds))


def test_collect_perfect_predictions(tmp_path):
    data = make_keyvalue_dataset(5, seed=0)
    golds = gold_answers(data)
    write_cells(tmp_path, 3, lambda i, z: {q: g[0] for q, g in golds.items()})
    table = collect_results(tmp_path, data)
    assert table.values.shape == (3, 5) and (table.values == 100.0).all()
    lines = table.to_csv().splitlines()
    assert lines[0] == "layer,all,q2,q2p,p2q,p2"
    assert lines[1] == "1,100.000,100.000,100.000,100.000,100.000"


def test_collect_layer2_q2p_value(tmp_path):
    # 2500 questions, 2009 right -> 80.36 EM in layer index 1 (label 2), zone q2p
    golds = {f"q{i}": ["yes"] for i in range(2500)}
    data = {"data": [{"paragraphs": [{"context": "", "qas": [
        {"id": q, "question": "?", "answers": [{"text": "yes", "answer_start": 0}]}
        for q in golds]}]}]}

    def answers(i, z):
        n_right = 2009 if (i, z) == (1, "q2p") else 2500
        return {f"q{k}": "yes" if k < n_right else "no" for k in range(2500)}

    write_cells(tmp_path, 2, answers)
    table = collect_results(tmp_path, data)
    row2 = table.to_csv().splitlines()[2].split(",")
    assert row2[0] == "2" and row2[3] == "80.360"


def test_collect_missing_file_names_cell(tmp_path):
    data = make_keyvalue_dataset(2, seed=0)
    golds = gold_answers(data)
    write_cells(tmp_path, 2, lambda i, z: {q: g[0] for q, g in golds.items()})
    (tmp_path / "predictions_layer1_p2q.json").unlink()
    with pytest.raises(FileNotFoundError, match="layer 1 zone p2q"):
        collect_results(tmp_path, data)


def test_em_table_not_above_f1_table(tmp_path):
    data = make_keyvalue_dataset(30, seed=4)
    golds = gold_answers(data)
    rng = np.random.default_rng(0)
    noise = ["v1", "k2 is v3", "is", ".", "v7 .", "v10 v11"]

    def answers(i, z):
        return {q: (g[0] if rng.random() < 0.5 else f"{g[0]} {rng.choice(noise)}")
                for q, g in golds.items()}

    write_cells(tmp_path, 3, answers)
    em = collect_results(tmp_path, data)
    f1 = collect_results(tmp_path, data, use_f1=True)
    assert f1.metric == "f1"
    assert (em.values <= f1.values).all()
    assert (em.values < f1.values).any()


def test_round_half_even():
    assert round3(80.3605) == 80.36
    assert round3(80.3615) == 80.362
    assert round3(2 / 3 * 100) == 66.667


def test_csv_round_trip(tmp_path):
    t = ResultsTable.read_csv(FIXTURES / "table1_single_run.csv")
    assert t.n_layers == 12
    t.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == (FIXTURES / "table1_single_run.csv").read_text()
    assert t.cell(2, "q2p") == 80.36


def test_bad_csv_header(tmp_path):
    (tmp_path / "x.csv").write_text("layer,a,b\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        ResultsTable.read_csv(tmp_path / "x.csv")


# ---------------------------------------------------------------- statistics

def test_average_identical_tables():
    t = ResultsTable.read_csv(FIXTURES / "table1_single_run.csv")
    assert np.array_equal(average_runs([t, t]).values, t.values)


def test_average_two_cells():
    a = ResultsTable(np.full((1, 5), 80.0))
    b = ResultsTable(np.full((1, 5), 81.0))
    out = average_runs([a, b])
    assert (out.values == 80.5).all()
    assert out.to_csv().splitlines()[1] == "1,80.500,80.500,80.500,80.500,80.500"


def test_average_matches_scalar_loop():
    rng = np.random.default_rng(5)
    tables = [ResultsTable(np.round(rng.uniform(60, 90, (4, 5)), 3)) for _ in range(5)]
    out = average_runs(tables)
    for i in range(4):
        for j in range(5):
            s = 0.0
            for t in tables:
                s += t.values[i][j]
            assert out.values[i, j] == round3(s / 5)


def test_average_mismatch_rejected():
    with pytest.raises(ValueError):
        average_runs([ResultsTable(np.zeros((2, 5))), ResultsTable(np.zeros((3, 5)))])
    with pytest.raises(ValueError):
        average_runs([ResultsTable(np.zeros((2, 5))), ResultsTable(np.zeros((2, 5)), "f1")])


def test_stddev_identical_is_zero():
    t = ResultsTable.read_csv(FIXTURES / "table1_single_run.csv")
    assert stddev_of_difference(t, t) == (0.0,) * 5


def test_stddev_translation_invariant_and_symmetric():
    rng = np.random.default_rng(1)
    a = ResultsTable(rng.uniform(70, 80, (6, 5)))
    b = ResultsTable(rng.uniform(70, 80, (6, 5)))
    shifted = b.values.copy()
    shifted[:, 2] += 3.25
    base = stddev_of_difference(a, b)
    moved = stddev_of_difference(a, ResultsTable(shifted))
    assert moved[2] == pytest.approx(base[2], abs=1e-12)
    assert stddev_of_difference(b, a) == pytest.approx(base, abs=1e-12)


def test_stddev_matches_manual_sample_formula():
    a = ResultsTable.read_csv(FIXTURES / "table1_single_run.csv")
    b = ResultsTable.read_csv(FIXTURES / "table2_five_run_average.csv")
    got = stddev_of_difference(a, b)
    for j in range(5):
        d = [b.values[i, j] - a.values[i, j] for i in range(12)]
        m = sum(d) / len(d)
        manual = (sum((x - m) ** 2 for x in d) / (len(d) - 1)) ** 0.5
        assert got[j] == pytest.approx(manual, abs=1e-12)
        assert got[j] == pytest.approx(statistics.stdev(d), abs=1e-12)


def test_stddev_shape_mismatch():
    with pytest.raises(ValueError):
        stddev_of_difference(ResultsTable(np.zeros((2, 5))), ResultsTable(np.zeros((3, 5))))

import json
import os

import numpy as np
import pytest

from opend import bench, detect, executor, hands, instruct, scene


def test_default_quota_matches_data_split(full_dataset):
    counts = full_dataset.counts()
    assert counts["cabinets"] == 174
    assert counts["cabinets_train"] == 135 and counts["cabinets_test"] == 39
    assert counts["drawers"] == 167
    assert counts["drawers_train"] == 138 and counts["drawers_test"] == 29
    assert counts["doors"] == 205
    assert counts["doors_train"] == 145 and counts["doors_test"] == 60
    assert counts["parts"] == 372


def test_dataset_deterministic(full_dataset):
    again = bench.build_dataset(0)
    assert again.fingerprint() == full_dataset.fingerprint()


def test_dataset_differs_across_master_seeds(mini_dataset):
    other = bench.build_dataset(12, mini_dataset.quota)
    assert other.fingerprint() != mini_dataset.fingerprint()


def test_quota_scaling_scales_counts():
    quota = bench.DatasetQuota(cabinets_train=8, cabinets_test=4, drawers_train=10,
                               drawers_test=6, doors_train=8, doors_test=4)
    half = quota.scaled(0.5)
    ds = bench.build_dataset(3, half)
    counts = ds.counts()
    assert counts["cabinets_train"] == 4 and counts["cabinets_test"] == 2
    assert counts["drawers_train"] == 5 and counts["drawers_test"] == 3
    assert counts["doors_train"] == 4 and counts["doors_test"] == 2


def test_every_dataset_instruction_grounds(mini_dataset):
    for ref in mini_dataset.instructions:
        c = mini_dataset.cabinet(ref.cabinet_id)
        assert instruct.ground_instruction(ref.text, c) == ref.part_id


def test_dataset_save_load_round_trip(tmp_path, mini_dataset):
    out = tmp_path / "ds"
    bench.save_dataset(mini_dataset, out)
    back = bench.load_dataset(out)
    assert back.fingerprint() == mini_dataset.fingerprint()
    assert back.counts() == mini_dataset.counts()


def test_dataset_files_byte_identical(tmp_path, mini_dataset):
    a, b = tmp_path / "a", tmp_path / "b"
    bench.save_dataset(mini_dataset, a)
    bench.save_dataset(bench.build_dataset(11, mini_dataset.quota), b)
    for name in sorted(os.listdir(a / "scenes")):
        assert (a / "scenes" / name).read_bytes() == (b / "scenes" / name).read_bytes()
    assert (a / "instructions.tsv").read_bytes() == (b / "instructions.tsv").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_smoke_benchmark_counts_episodes(mini_dataset):
    table = bench.run_benchmark(mini_dataset, [hands.FRANKA], bench.DetectorSpec("oracle"),
                                split="test", jobs=1)
    n_test = len(mini_dataset.split_instructions("test"))
    assert table.rows[(hands.FRANKA, "oracle", "test", "overall")].episodes == n_test


def test_parallelism_does_not_change_results(tmp_path, mini_dataset):
    outs = {}
    for jobs in (1, 4):
        out = tmp_path / f"j{jobs}"
        table = bench.run_benchmark(mini_dataset, [hands.FRANKA], bench.DetectorSpec("oracle"),
                                    split="test", jobs=jobs, out_dir=out)
        outs[jobs] = (table.to_csv(), out)
    assert outs[1][0] == outs[4][0]
    t1, t4 = (sorted(os.listdir(outs[j][1] / "trajs")) for j in (1, 4))
    assert t1 == t4
    for name in t1:
        a = (outs[1][1] / "trajs" / name).read_bytes()
        b = (outs[4][1] / "trajs" / name).read_bytes()
        assert a == b, name


def test_always_miss_detector_all_no_detection(mini_dataset):
    spec = bench.DetectorSpec("oracle", detect.NoiseConfig(p_miss=1.0))
    table = bench.run_benchmark(mini_dataset, [hands.FRANKA], spec, split="test", jobs=1)
    row = table.rows[(hands.FRANKA, spec.label, "test", "overall")]
    assert row.successes == 0
    assert row.failures == {executor.NO_DETECTION: row.episodes}


def test_grasp_eval_records_rates(mini_dataset):
    table = bench.grasp_eval(mini_dataset, [hands.FRANKA], split="test", jobs=1)
    row = table.rows[(hands.FRANKA, "gt", "test", "overall")]
    assert row.episodes == len(mini_dataset.split_instructions("test"))
    assert 0.0 <= row.success_rate <= 1.0
    drawer = table.rows[(hands.FRANKA, "gt", "test", scene.DRAWER)]
    door = table.rows[(hands.FRANKA, "gt", "test", scene.DOOR)]
    assert drawer.success_rate >= door.success_rate


def _fat_handle_cabinet(cid):
    handle = scene.Handle((-scene.PANEL_THICKNESS - 0.03, 0.0, 0.6), scene.HORIZONTAL,
                          0.14, 0.10, 0.03)
    joint = scene.Joint(scene.PRISMATIC, (-1.0, 0.0, 0.0), (0.0, 0.0, 0.6), 0.38)
    part = scene.Part(0, scene.DRAWER, joint, handle, (-0.2, 0.2, 0.4, 0.8))
    return scene.Cabinet(cid, (0.5, 1.2, 0.4), 0.0, (part,), split="test")


def test_grasp_eval_zero_when_handles_exceed_gap():
    cabs = [_fat_handle_cabinet(i) for i in range(3)]
    refs = [bench.InstructionRef(c.id, 0, "test", scene.DRAWER, "open the drawer") for c in cabs]
    ds = bench.Dataset(cabs, refs, 0, bench.DatasetQuota())
    table = bench.grasp_eval(ds, [hands.FRANKA], split="test", jobs=1)
    row = table.rows[(hands.FRANKA, "gt", "test", "overall")]
    assert row.success_rate == 0.0
    assert row.failures == {executor.NO_GRASP: 3}


# ---------------------------------------------------------------------------
# report


def _toy_table():
    t = bench.MetricsTable()
    for i in range(1000):
        res = executor.EpisodeResult(i % 1000 < 303, 0.5 if i % 1000 < 303 else 0.1,
                                     0, 0 if i % 1000 < 303 else None,
                                     executor.NONE if i % 1000 < 303 else executor.NO_GRASP)
        t.add(hands.FRANKA, "oracle", "test", scene.DRAWER, res)
    return t


def test_empty_table_reports_header_only():
    t = bench.MetricsTable()
    assert bench.report(t, "csv").decode().strip().count("\n") == 0
    assert "hand" in bench.report(t, "text").decode()


def test_rate_formatting_one_decimal_percent():
    text = bench.report(_toy_table(), "text").decode()
    assert "30.3%" in text


def test_text_and_csv_agree_on_values():
    t = _toy_table()
    text = bench.report(t, "text").decode()
    csv_table = bench.MetricsTable.from_csv(bench.report(t, "csv"))
    rate = csv_table.rows[(hands.FRANKA, "oracle", "test", "overall")].success_rate
    assert f"{100 * rate:.1f}%" in text


def test_csv_round_trips():
    t = _toy_table()
    back = bench.MetricsTable.from_csv(t.to_csv())
    assert back.to_csv() == t.to_csv()


def test_report_writes_figures(tmp_path):
    paths = bench.write_report(_toy_table(), tmp_path)
    names = {os.path.basename(p) for p in paths}
    assert {"metrics.txt", "metrics.csv", "success_rates.png",
            "failures.png", "open_ratios.png"} <= names
    for p in paths:
        assert os.path.getsize(p) > 0


def test_overall_is_weighted_mean_of_kinds(mini_dataset):
    table = bench.run_benchmark(mini_dataset, [hands.FRANKA], bench.DetectorSpec("oracle"),
                                split="test", jobs=1)
    kinds = [table.rows.get((hands.FRANKA, "oracle", "test", k)) for k in bench.KINDS]
    overall = table.rows[(hands.FRANKA, "oracle", "test", "overall")]
    n = sum(r.episodes for r in kinds if r)
    succ = sum(r.successes for r in kinds if r)
    assert overall.episodes == n and overall.successes == succ


def test_dump_images_writes_observations(tmp_path, mini_dataset):
    n = bench.dump_images(mini_dataset, tmp_path, renders_per_cabinet=2, split="test")
    assert n == 2 * sum(1 for c in mini_dataset.cabinets if c.split == "test")
    pngs = [f for f in os.listdir(tmp_path) if f.endswith(".png")]
    assert len(pngs) == n
    labels = [f for f in os.listdir(tmp_path) if f.endswith(".labels.json")]
    assert len(labels) == n
    with open(tmp_path / sorted(labels)[0]) as f:
        rec = json.load(f)
    assert rec["labels"] and all(len(l["bbox"]) == 4 for l in rec["labels"])

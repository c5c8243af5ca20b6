use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stunet::arch::ArchConfig;

fn stunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stunet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn cfg(name: &str) -> String {
    configs().join(format!("{name}.json")).to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn committed_configs_equal_presets() {
    for name in ["stu-net-s", "stu-net-b", "stu-net-l", "stu-net-h", "nnunet", "nnunet-star"] {
        let on_disk = ArchConfig::load(cfg(name)).unwrap();
        assert_eq!(on_disk, ArchConfig::preset(name).unwrap(), "{name}");
    }
}

#[test]
fn describe_prints_the_b_row() {
    let o = stunet(&["describe", "--config", &cfg("stu-net-b")]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("STU-Net-B ")).expect("table row");
    assert!(row.contains("58.26") && row.trim_end().ends_with("0.51"), "{row}");
}

fn flops_from_describe(out: &str) -> u64 {
    let line = out.lines().find(|l| l.trim_start().starts_with("FLOPs at")).unwrap();
    line.split(": ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn flops_scale_with_patch_volume() {
    let full = flops_from_describe(&stdout(&stunet(&["describe", "--config", &cfg("stu-net-b")])));
    let small = flops_from_describe(&stdout(&stunet(&["describe", "--config", &cfg("stu-net-b"), "--patch", "32,32,32"])));
    assert_eq!(full, small * 64);
}

#[test]
fn describe_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("row.csv");
    let o = stunet(&["describe", "--config", &cfg("stu-net-s"), "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("Model,depth,width,Params (M),FLOPs (T)\n"));
    assert!(text.contains("STU-Net-S,"));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut c = ArchConfig::stu_net_b();
    c.widths[2] = 0;
    std::fs::write(&bad, c.to_json()).unwrap();
    let o = stunet(&["describe", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widths"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let o = stunet(&["describe", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn scale_b_by_two_gives_l() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l.json");
    let o = stunet(&["scale", "--base", &cfg("stu-net-b"), "--depth", "2", "--width", "2", "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(ArchConfig::load(&out).unwrap(), ArchConfig::stu_net_l());
}

#[test]
fn unit_scale_reproduces_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.json");
    stunet(&["scale", "--base", &cfg("stu-net-b"), "--depth", "1", "--width", "1", "-o", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(cfg("stu-net-b")).unwrap());
}

#[test]
fn depth_below_one_block_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    let o = stunet(&["scale", "--base", &cfg("stu-net-s"), "--depth", "0.4", "--width", "1", "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn golden_tables_pass() {
    for (which, cells) in [("table2", 8), ("table5", 12), ("table6", 32)] {
        let o = stunet(&["tables", "--which", which, "--patch", "128,128,128"]);
        assert_eq!(o.status.code(), Some(0), "{which}: {}", stdout(&o));
        assert!(stdout(&o).contains(&format!("{cells}/{cells} cells within tolerance")), "{which}");
    }
}

#[test]
fn tables_off_patch_miss_tolerance_with_exit_3() {
    let o = stunet(&["tables", "--which", "table2", "--patch", "64,64,64"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_table_exits_2() {
    assert_eq!(stunet(&["tables", "--which", "table9"]).status.code(), Some(2));
}

#[test]
fn calibrate_confirms_the_committed_convention() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("cal.json");
    let o = stunet(&["calibrate", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("survivors:  1"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["ranked"].as_array().unwrap().len(), 512);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(stunet(&["describe"]).status.code(), Some(2));
    assert_eq!(stunet(&["frobnicate"]).status.code(), Some(2));
}

const TINY_SPEC: &str = r#"{
  "extent": [32, 32, 32], "channels": 1, "background": [0.0],
  "classes": [
    {"family": "sphere", "size": [4, 7], "count": [1, 2], "intensity": [1.0]},
    {"family": "box", "size": [3, 6], "count": [1, 1], "intensity": [2.0]},
    {"family": "shell", "size": [6, 9], "count": [1, 1], "intensity": [-1.0]}
  ],
  "noise": 0.2, "spacing": [1.5, 1.5, 1.5]
}"#;

fn tiny_config(dir: &Path, in_channels: usize) -> PathBuf {
    let c = ArchConfig { widths: vec![2, 2, 4, 4, 8, 8], num_classes: 4, in_channels, ..ArchConfig::stu_net_s() };
    let p = dir.join(format!("tiny{in_channels}.json"));
    c.save(&p).unwrap();
    p
}

fn gen(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, TINY_SPEC).unwrap();
    let out = dir.join(name);
    let o = stunet(&["gen-data", "--spec", s(&spec), "--n", "2", "--seed", seed, "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", "5");
    let b = gen(dir.path(), "b", "5");
    let c = gen(dir.path(), "c", "6");
    assert_eq!(read_tree(&a), read_tree(&b));
    assert_ne!(read_tree(&a), read_tree(&c));
    assert!(a.join("case_0000/volume.stuw").exists() && a.join("case_0001/meta.json").exists());
}

#[test]
fn builtin_task_data_has_two_channels_for_task_b() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = stunet(&["gen-data", "--task", "b", "--n", "1", "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("2 channels"));
    assert_eq!(stunet(&["gen-data", "--task", "z", "-o", s(&out)]).status.code(), Some(2));
}

fn pretrain(dir: &Path, data: &Path, out: &str) -> (Output, PathBuf) {
    let cfg = tiny_config(dir, 1);
    let w = dir.join(out);
    let o = stunet(&[
        "pretrain", "--config", s(&cfg), "--data", s(data), "--epochs", "1", "--iters", "2", "--seed", "3", "-o", s(&w), "--history",
        s(&dir.join(format!("{out}.csv"))),
    ]);
    (o, w)
}

#[test]
fn pretrain_infer_eval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "data", "1");
    let (o, w1) = pretrain(d, &data, "w1.stuw");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, w2) = pretrain(d, &data, "w2.stuw");
    assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(&w2).unwrap());
    let hist = std::fs::read_to_string(d.join("w1.stuw.csv")).unwrap();
    assert!(hist.starts_with("epoch,lr,mean_loss,val_dsc\n0,"));

    let cfg = tiny_config(d, 1);
    let pred = d.join("pred");
    let o = stunet(&["infer", "--config", s(&cfg), "--weights", s(&w1), "--data", s(&data), "-o", s(&pred)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pred.join("case_0001.labels.stuw").exists());

    let o = stunet(&["eval", "--pred", s(&pred), "--data", s(&data), "--json", s(&d.join("m.json"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mean foreground DSC"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    let mean = m["mean_foreground_dsc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}

#[test]
fn finetune_reports_multipliers_and_replicates_channels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data1 = gen(d, "data1", "1");
    let (_, w) = pretrain(d, &data1, "pre.stuw");
    // two-channel copy of the data
    let spec2 = TINY_SPEC.replace("\"channels\": 1", "\"channels\": 2").replace("[0.0]", "[0.0, 0.0]").replace("[1.0]", "[1.0, 0.5]").replace("[2.0]", "[2.0, 1.0]").replace("[-1.0]", "[-1.0, 0.0]");
    std::fs::write(d.join("spec2.json"), spec2).unwrap();
    let data2 = d.join("data2");
    stunet(&["gen-data", "--spec", s(&d.join("spec2.json")), "--n", "2", "--seed", "2", "-o", s(&data2)]);
    let cfg = tiny_config(d, 1);
    let out = d.join("ft.stuw");
    let o = stunet(&[
        "finetune", "--from", s(&w), "--replicate-channels", "2", "--config", s(&cfg), "--data", s(&data2), "--epochs", "1", "--iters", "1", "-o",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("lr multipliers: head 1 (") && text.contains("backbone 0.1 ("), "{text}");
    let store = stunet::weights::load(&out).unwrap();
    let stem = store.iter().find(|(n, _)| n.starts_with("stem.")).unwrap().1;
    assert_eq!(stem.shape()[1], 2);
}

#[test]
fn finetune_from_a_corrupt_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.stuw");
    std::fs::write(&bad, b"not a weight file").unwrap();
    let cfg = tiny_config(d, 1);
    let o = stunet(&["finetune", "--from", s(&bad), "--config", s(&cfg), "--data", s(d), "--epochs", "1", "-o", s(&d.join("x"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn eval_merge_equals_evaluation_of_premerged_maps() {
    use stunet::harness::dataset_io::{load_dataset, save_dataset, save_labels};
    use stunet::harness::{merge_labels, LabelMap, MergeRule, MergeSpec};
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "data", "9");
    let (vols, classes) = load_dataset(&data).unwrap();
    // predictions: ground truth with a deterministic stripe of label noise
    let pred = d.join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    let preds: Vec<LabelMap> = vols
        .iter()
        .map(|v| {
            let data = v.labels.data().iter().enumerate().map(|(i, &l)| if i % 7 == 0 { (i % 4) as u16 } else { l }).collect();
            LabelMap::new(v.labels.shape(), data).unwrap()
        })
        .collect();
    for (i, p) in preds.iter().enumerate() {
        save_labels(&pred.join(format!("case_{i:04}.labels.stuw")), p).unwrap();
    }
    let spec = MergeSpec::new(vec![MergeRule { sources: vec![1, 2], target: 1 }]).unwrap();
    std::fs::write(d.join("merge.json"), r#"[{"sources": [1, 2], "target": 1}]"#).unwrap();
    let merged_out = d.join("merged.json");
    let o = stunet(&["eval", "--pred", s(&pred), "--data", s(&data), "--merge", s(&d.join("merge.json")), "--json", s(&merged_out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    // the same evaluation on maps merged up front
    let pre_data = d.join("pre_data");
    let pre_vols: Vec<_> = vols.iter().map(|v| stunet::harness::Volume { labels: merge_labels(&v.labels, &spec), ..v.clone() }).collect();
    save_dataset(&pre_data, &pre_vols, classes).unwrap();
    let pre_pred = d.join("pre_pred");
    std::fs::create_dir_all(&pre_pred).unwrap();
    for (i, p) in preds.iter().enumerate() {
        save_labels(&pre_pred.join(format!("case_{i:04}.labels.stuw")), &merge_labels(p, &spec)).unwrap();
    }
    // same spec again so both runs score the same surviving ids; merging is idempotent
    let pre_out = d.join("pre.json");
    let o = stunet(&["eval", "--pred", s(&pre_pred), "--data", s(&pre_data), "--merge", s(&d.join("merge.json")), "--json", s(&pre_out)]);
    assert_eq!(o.status.code(), Some(0));
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(merged_out).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pre_out).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a["per_class"].as_array().unwrap().len(), 2);
}

#[test]
fn chained_merge_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "data", "1");
    std::fs::write(d.join("m.json"), r#"[{"sources": [1], "target": 2}, {"sources": [2], "target": 3}]"#).unwrap();
    let o = stunet(&["eval", "--pred", s(d), "--data", s(&data), "--merge", s(&d.join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

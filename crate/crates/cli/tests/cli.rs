use std::path::Path;
use std::process::{Command, Output};

fn grit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grit"))
        .args(args)
        .env_remove("GRIT_SEED")
        .output()
        .expect("spawn grit")
}

fn plan(arms: &str) -> String {
    format!(
        r#"{{
  "base": {{"batch_size": 8, "search_space": 32, "queue_capacity": 64, "dataset_size": 256,
           "temperature": 0.07, "lambda_cons": 0.2, "mask_prob": 0.5, "embed_dim": 8, "master_seed": 5}},
  "corpus": {{"n_clusters": 8, "dataset_size": 256, "eval_size": 32, "image_dim": 16, "seq_len": 8,
             "topic_tokens_per_cluster": 4, "n_attributes": 8, "attribute_fraction": 0.125,
             "noise": 0.5, "signature_noise": 0.3, "centroid_scale": 1.0}},
  "train": {{"learning_rate": 0.5, "hidden": 16, "fusion_hidden": 8, "scheduler": "grit"}},
  "arms": {arms},
  "epochs": 2,
  "seeds": [1, 2],
  "dump": {{"schedules": true}},
  "uov_grid": [0.5, 0.75]
}}"#
    )
}

const TWO_ARMS: &str = r#"[{"name": "random", "train": {"scheduler": "random"}}, {"name": "grit"}]"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write(tmp.path(), "plan.json", &plan(TWO_ARMS));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = grit(&["run", "--plan", &plan, "--out", out.to_str().unwrap(), "--jobs", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["cells.csv", "summary.json", "cells/grit__s1/metrics.csv", "cells/random__s2/uov.csv",
              "cells/grit__s2/schedules/epoch-001.grsc"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"complete\"").count(), 4);

    let o = grit(&["show-schedule", a.join("cells/grit__s1/schedules/epoch-001.grsc").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("batches    32"));

    let o = grit(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("a/grit"));
}

#[test]
fn duplicate_arms_exit_2_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write(tmp.path(), "plan.json", &plan(r#"[{"name": "x"}, {"name": "x"}]"#));
    let out = tmp.path().join("out");
    let o = grit(&["run", "--plan", &plan, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn seed_env_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write(tmp.path(), "plan.json", &plan(r#"[{"name": "grit"}]"#));
    let run = |out: &Path, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_grit"));
        c.args(["run", "--plan", &plan, "--out", out.to_str().unwrap()]);
        match seed {
            Some(s) => c.env("GRIT_SEED", s),
            None => c.env_remove("GRIT_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read(out.join("cells.csv")).unwrap()
    };
    let base = run(&tmp.path().join("a"), None);
    assert_eq!(base, run(&tmp.path().join("b"), Some("5")));
    assert_ne!(base, run(&tmp.path().join("c"), Some("6")));
}

#[test]
fn corrupted_schedule_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.grsc");
    std::fs::write(&p, b"GRSX\x01\x00\x00\x00").unwrap();
    let o = grit(&["show-schedule", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
}

#[test]
fn missing_column_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("r");
    std::fs::create_dir(&d).unwrap();
    write(&d, "cells.csv", "arm,seed,final_r1_i2t,final_r1_t2i,same_cluster_frac,uov1,steps_to_threshold\ng,1,0.5,0.5,0.1,,\n");
    write(&d, "cells_timing.csv", "arm,seed,epoch_seconds_median\ng,1,0.2\n");
    let o = grit(&["compare", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mean_neg_sim"));
}

#[test]
fn gen_corpus_and_dump_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.json", r#"{"n_clusters": 4, "dataset_size": 64, "image_dim": 8, "seq_len": 4,
        "topic_tokens_per_cluster": 2, "n_attributes": 4, "attribute_fraction": 0.25, "noise": 0.1,
        "signature_noise": 0.3, "centroid_scale": 1.0, "seed": 3}"#);
    let out = tmp.path().join("c.grco");
    let o = grit(&["gen-corpus", "--spec", &spec, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&std::fs::read(&out).unwrap()[..4], b"GRCO");

    let bad = write(tmp.path(), "bad.json", r#"{"n_clusters": 1, "dataset_size": 64, "image_dim": 8, "seq_len": 4,
        "topic_tokens_per_cluster": 2, "n_attributes": 4, "attribute_fraction": 0.25, "noise": 0.1,
        "signature_noise": 0.3, "centroid_scale": 1.0}"#);
    assert_eq!(grit(&["gen-corpus", "--spec", &bad, "--out", out.to_str().unwrap()]).status.code(), Some(2));

    let plan = write(tmp.path(), "plan.json", &plan(TWO_ARMS));
    let sched = tmp.path().join("e1.grsc");
    let o = grit(&["dump-schedule", "--plan", &plan, "--arm", "grit", "--seed", "1", "--epoch", "1",
                   "--out", sched.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&sched).unwrap().len(), 20 + 4 * 256);
}

//! End-to-end pipeline through the command-line interface.

use std::fs;
use std::path::Path;

use fashionfae::cli::run;

fn sha_of_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                entries.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["ffae"];
    full.extend_from_slice(args);
    run(full)
}

#[test]
fn gen_corpus_is_deterministic_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let code = cli(&[
            "gen-corpus",
            "--n",
            "12",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
            "--image-size",
            "16",
            "--patch-size",
            "4",
        ]);
        assert_eq!(code, 0);
    }
    assert_eq!(sha_of_dir(&a), sha_of_dir(&b), "identical directory contents");
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let codebook = tmp.path().join("codebook.ffvq");
    let run_dir = tmp.path().join("run");
    let eval_dir = tmp.path().join("eval");
    let report_dir = tmp.path().join("report");
    let ft_dir = tmp.path().join("finetune");

    assert_eq!(
        cli(&[
            "gen-corpus",
            "--n",
            "8",
            "--seed",
            "3",
            "--out",
            corpus.to_str().unwrap(),
            "--image-size",
            "16",
            "--patch-size",
            "4",
        ]),
        0
    );
    assert!(corpus.join("items.jsonl").exists());
    assert!(corpus.join("vocab.txt").exists());
    assert!(corpus.join("images").join("item-0000.ffae").exists());

    assert_eq!(
        cli(&[
            "train-tokenizer",
            "--corpus",
            corpus.to_str().unwrap(),
            "--k",
            "8",
            "--iters",
            "10",
            "--seed",
            "1",
            "--patch-size",
            "4",
            "--out",
            codebook.to_str().unwrap(),
        ]),
        0
    );
    assert!(codebook.exists());

    // tiny run config exercising the key=value loader
    let cfg_path = tmp.path().join("run.cfg");
    fs::write(
        &cfg_path,
        "steps=6\nbatch_size=4\nembed_dim=8\nn_layers_text_fusion=2\nsplit_point=1\n\
         n_layers_image=1\nn_heads=2\nseed=5\ncheckpoint_every=3\n",
    )
    .unwrap();
    assert_eq!(
        cli(&[
            "pretrain",
            "--corpus",
            corpus.to_str().unwrap(),
            "--codebook",
            codebook.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out-dir",
            run_dir.to_str().unwrap(),
        ]),
        0
    );
    assert!(run_dir.join("checkpoint_final.ffck").exists());
    assert!(run_dir.join("checkpoint_final.ffos").exists());
    assert!(run_dir.join("checkpoint_000003.ffck").exists(), "cadence checkpoint");
    assert!(run_dir.join("model.cfg").exists());
    let log = fs::read_to_string(run_dir.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,task,loss"));
    assert_eq!(log.lines().count(), 7, "header plus six steps");

    assert_eq!(
        cli(&[
            "evaluate",
            "--corpus",
            corpus.to_str().unwrap(),
            "--codebook",
            codebook.to_str().unwrap(),
            "--run-dir",
            run_dir.to_str().unwrap(),
            "--protocol",
            "full",
            "--out-dir",
            eval_dir.to_str().unwrap(),
        ]),
        0
    );
    assert!(eval_dir.join("eval_full_i2t.json").exists());
    assert!(eval_dir.join("eval_full_t2i.json").exists());

    // random_m records the requested M
    assert_eq!(
        cli(&[
            "evaluate",
            "--corpus",
            corpus.to_str().unwrap(),
            "--codebook",
            codebook.to_str().unwrap(),
            "--run-dir",
            run_dir.to_str().unwrap(),
            "--protocol",
            "random_m",
            "--m",
            "100",
            "--direction",
            "i2t",
            "--seed",
            "2",
            "--out-dir",
            eval_dir.to_str().unwrap(),
        ]),
        0
    );
    let run_json = fs::read_to_string(eval_dir.join("eval_random_m_i2t.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&run_json).unwrap();
    assert_eq!(parsed["m"], 100);

    assert_eq!(
        cli(&[
            "finetune",
            "--corpus",
            corpus.to_str().unwrap(),
            "--codebook",
            codebook.to_str().unwrap(),
            "--run-dir",
            run_dir.to_str().unwrap(),
            "--label-field",
            "category",
            "--steps",
            "4",
            "--batch-size",
            "4",
            "--seed",
            "1",
            "--out-dir",
            ft_dir.to_str().unwrap(),
        ]),
        0
    );
    assert!(ft_dir.join("finetune_category.json").exists());
    assert!(ft_dir.join("head_category.ffck").exists());

    assert_eq!(
        cli(&[
            "report",
            "--eval",
            eval_dir.join("eval_full_i2t.json").to_str().unwrap(),
            eval_dir.join("eval_full_t2i.json").to_str().unwrap(),
            "--loss-log",
            run_dir.join("loss_log.csv").to_str().unwrap(),
            "--out-dir",
            report_dir.to_str().unwrap(),
        ]),
        0
    );
    let csv = fs::read_to_string(report_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "protocol,direction,r@1,r@5,r@10,mean");
    assert_eq!(csv.lines().count(), 3);
    assert!(report_dir.join("summary.txt").exists());
}

#[test]
fn pretrain_resume_continues_the_loss_log() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let codebook = tmp.path().join("codebook.ffvq");

    assert_eq!(
        cli(&[
            "gen-corpus", "--n", "8", "--seed", "3",
            "--out", corpus.to_str().unwrap(),
            "--image-size", "16", "--patch-size", "4",
        ]),
        0
    );
    assert_eq!(
        cli(&[
            "train-tokenizer",
            "--corpus", corpus.to_str().unwrap(),
            "--k", "8", "--iters", "5", "--seed", "1", "--patch-size", "4",
            "--out", codebook.to_str().unwrap(),
        ]),
        0
    );

    let cfg = "batch_size=4\nembed_dim=8\nn_layers_text_fusion=2\nsplit_point=1\n\
               n_layers_image=1\nn_heads=2\nseed=5\n";

    // uninterrupted run of 8 steps
    let full_dir = tmp.path().join("full");
    let cfg_path = tmp.path().join("full.cfg");
    fs::write(&cfg_path, format!("{cfg}steps=8\n")).unwrap();
    assert_eq!(
        cli(&[
            "pretrain",
            "--corpus", corpus.to_str().unwrap(),
            "--codebook", codebook.to_str().unwrap(),
            "--config", cfg_path.to_str().unwrap(),
            "--out-dir", full_dir.to_str().unwrap(),
        ]),
        0
    );

    // first half, then resume for the rest
    let half_dir = tmp.path().join("half");
    let cfg_half = tmp.path().join("half.cfg");
    fs::write(&cfg_half, format!("{cfg}steps=4\n")).unwrap();
    assert_eq!(
        cli(&[
            "pretrain",
            "--corpus", corpus.to_str().unwrap(),
            "--codebook", codebook.to_str().unwrap(),
            "--config", cfg_half.to_str().unwrap(),
            "--out-dir", half_dir.to_str().unwrap(),
        ]),
        0
    );
    let cfg_rest = tmp.path().join("rest.cfg");
    fs::write(&cfg_rest, format!("{cfg}steps=8\n")).unwrap();
    assert_eq!(
        cli(&[
            "pretrain",
            "--corpus", corpus.to_str().unwrap(),
            "--codebook", codebook.to_str().unwrap(),
            "--config", cfg_rest.to_str().unwrap(),
            "--out-dir", half_dir.to_str().unwrap(),
            "--resume", half_dir.join("checkpoint_final").to_str().unwrap(),
        ]),
        0
    );

    let log_full = fs::read_to_string(full_dir.join("loss_log.csv")).unwrap();
    let log_resumed = fs::read_to_string(half_dir.join("loss_log.csv")).unwrap();
    assert_eq!(log_full, log_resumed, "resumed log must match uninterrupted");
    assert_eq!(
        fs::read(full_dir.join("checkpoint_final.ffck")).unwrap(),
        fs::read(half_dir.join("checkpoint_final.ffck")).unwrap(),
        "final parameters must match bit-exactly"
    );
}

#[test]
fn gradcheck_subcommand_passes_and_exits_zero() {
    assert_eq!(cli(&["gradcheck", "--seed", "1"]), 0);
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(cli(&["--definitely-not-a-flag"]), 2);
    assert_eq!(cli(&["gen-corpus", "--bogus"]), 2);
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["gen-corpus", "--help"]), 0);
}

#[test]
fn runtime_failures_exit_nonzero_with_single_line_error() {
    let tmp = tempfile::tempdir().unwrap();
    // evaluate against a missing run directory
    let code = cli(&[
        "evaluate",
        "--corpus",
        tmp.path().join("nope").to_str().unwrap(),
        "--codebook",
        tmp.path().join("nope.ffvq").to_str().unwrap(),
        "--run-dir",
        tmp.path().join("norun").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn data_dir_env_variable_provides_the_default_root() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var("FFAE_DATA_DIR", tmp.path());
    let code = cli(&[
        "gen-corpus",
        "--n",
        "4",
        "--seed",
        "2",
        "--image-size",
        "16",
        "--patch-size",
        "4",
    ]);
    std::env::remove_var("FFAE_DATA_DIR");
    assert_eq!(code, 0);
    assert!(tmp.path().join("corpus").join("items.jsonl").exists());
}

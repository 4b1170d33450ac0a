use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CORPUS: &str = "\
the quick brown fox jumps over the lazy dog
a small cat sleeps near the warm fire
my friend reads old books at night
the quiet river runs past the old town
we walk along the road to the market
";

fn atcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atcl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_lm_setup(dir: &Path) -> String {
    fs::write(dir.join("train.txt"), CORPUS).unwrap();
    let cfg = format!(
        "task = lm\ntrain_corpus = {}\nd_model = 8\nn_heads = 2\nlayers = 1\nseq_len = 6\nbatch_size = 4\nmax_steps = 6\neval_interval = 3\n",
        dir.join("train.txt").display()
    );
    let path = dir.join("lm.cfg");
    fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

#[test]
fn help_documents_exit_codes() {
    let o = atcl(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for needle in ["train", "probe-neighbors", "vocab-build", "7  non-finite"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn lm_train_then_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_lm_setup(dir.path());
    let out = dir.path().join("run");
    let o = atcl(&[
        "train", "--config", &cfg, "--set", "mode=atcl", "--set", "n_negatives=10", "--seed", "5", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("step=6"));

    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(header["overrides"][0], "mode=atcl");
    assert_eq!(header["overrides"][1], "n_negatives=10");
    assert_eq!(header["overrides"][2], "seed=5");
    assert_eq!(header["config"]["n_negatives"], 10);
    assert_eq!(metrics.lines().count(), 7);

    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let corpus = dir.path().join("train.txt");
    let o = atcl(&["eval-ppl", "--checkpoint", ckpt, "--corpus", corpus.to_str().unwrap(), "--seq-len", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ppl: f64 = stdout(&o).trim().parse().unwrap();
    assert!(ppl >= 1.0);

    let o = atcl(&["probe-neighbors", "--checkpoint", ckpt, "--word", "friend", "--k", "4", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["neighbors"].as_array().unwrap().len(), 4);

    let o = atcl(&["attack", "--checkpoint", ckpt, "--sentence", "my friend reads old", "--epsilon", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("target     old"));

    let o = atcl(&["robustness", "--checkpoint", ckpt, "--corpus", corpus.to_str().unwrap(), "--samples", "5", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["mean_kl"].as_f64().unwrap() >= 0.0);

    let o = atcl(&["probe-neighbors", "--checkpoint", ckpt, "--word", "zebra"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).starts_with("error[input]:"));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_lm_setup(dir.path());
    let out = dir.path().join("run");
    let run = || {
        let o = atcl(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(out.join("metrics.jsonl")).unwrap(), fs::read(out.join("model.ckpt")).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn translation_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("src.txt"), "red house\nsmall dog\nold tree\n").unwrap();
    fs::write(d.join("trg.txt"), "house red\ndog small\ntree old\n").unwrap();
    let cfg = format!(
        "task = nmt\ntrain_source = {}\ntrain_target = {}\nbpe_merges = 40\nd_model = 8\nn_heads = 2\nencoder_layers = 1\ndecoder_layers = 1\nbatch_size = 3\nmax_steps = 4\neval_interval = 0\nanchor_side = decoder\n",
        d.join("src.txt").display(),
        d.join("trg.txt").display()
    );
    fs::write(d.join("nmt.cfg"), cfg).unwrap();
    let out = d.join("nmt");
    let o = atcl(&["train", "--config", d.join("nmt.cfg").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("bleu="));
    let o = atcl(&[
        "translate", "--checkpoint", out.join("model.ckpt").to_str().unwrap(), "--input", d.join("src.txt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn bleu_and_data_tools() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.txt"), CORPUS).unwrap();
    let a = d.join("a.txt");
    let o = atcl(&["eval-bleu", "--hypotheses", a.to_str().unwrap(), "--references", a.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("1 "));

    let merges = d.join("merges.txt");
    let o = atcl(&["bpe-train", "--corpus", a.to_str().unwrap(), "--merges", "30", "--output", merges.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let vocab = d.join("vocab.txt");
    let o = atcl(&[
        "vocab-build", "--corpus", a.to_str().unwrap(), "--merges", merges.to_str().unwrap(), "--output",
        vocab.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&vocab).unwrap().contains("@@"));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_lm_setup(dir.path());
    let out = dir.path().join("x");
    let o = atcl(&["train", "--config", &cfg, "--set", "bogus=1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[config]:"));

    let o = atcl(&["train", "--config", "/nonexistent/cfg"]);
    assert_eq!(o.status.code(), Some(4));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = atcl(&["probe-neighbors", "--checkpoint", bad.to_str().unwrap(), "--word", "the"]);
    assert_eq!(o.status.code(), Some(5));

    let o = atcl(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tgdt::engine::{exhaustive_search, Query};
use tgdt::features::read_feature_file;
use tgdt::index::load_index;
use tgdt::similarity::SimilarityMode;

fn tgdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgdt"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) {
    let out = tgdt(&[
        "gen-synthetic",
        "--pairs",
        "24",
        "--concepts",
        "8",
        "--concepts-per-sample",
        "2",
        "--image-dim",
        "4",
        "--text-dim",
        "8",
        "--tokens",
        "3",
        "--latent-dim",
        "8",
        "--seed",
        seed,
        "--out-dir",
        s(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_synthetic_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    small_data(&a, "3");
    small_data(&b, "3");
    small_data(&c, "4");
    for f in ["images.tgf", "texts.tgf", "pairs.tsv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("images.tgf")).unwrap(),
        fs::read(c.join("images.tgf")).unwrap()
    );
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path(), "1");
    let images = tmp.path().join("images.tgf");
    assert_eq!(code(&tgdt(&["no-such-command"])), 1);
    assert_eq!(code(&tgdt(&["eval", "--bogus-flag"])), 1);
    assert_eq!(code(&tgdt(&["--help"])), 0);
    let bad_theta = tgdt(&[
        "eval",
        "--image-index",
        "x",
        "--text-index",
        "y",
        "--gt",
        "z",
        "--theta",
        "1.5",
    ]);
    assert_eq!(code(&bad_theta), 1);
    assert!(bad_theta.stdout.is_empty());
    // A feature file where an index is expected.
    let wrong = tgdt(&[
        "eval",
        "--image-index",
        s(&images),
        "--text-index",
        s(&images),
        "--gt",
        "z",
    ]);
    assert_eq!(code(&wrong), 2);
    assert_eq!(
        code(&tgdt(&[
            "index",
            "--input",
            s(&tmp.path().join("missing.tgf")),
            "--output",
            "o"
        ])),
        2
    );
}

#[test]
fn help_shows_default_hyperparameters() {
    let text = String::from_utf8(tgdt(&["ablate", "--help"]).stdout).unwrap();
    for flag in [
        "--delta",
        "--sigma",
        "--theta",
        "--k",
        "--mode",
        "--task",
        "--epochs",
        "--batch-size",
        "--lr",
        "--seed",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for default in [
        "[default: 0.2]",
        "[default: 0.3]",
        "[default: 0.5]",
        "[default: 100]",
    ] {
        assert!(text.contains(default), "missing {default}");
    }
}

#[test]
fn search_prints_exhaustive_ranking_when_k_covers_gallery() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path(), "2");
    let index = tmp.path().join("images.tgi");
    assert_eq!(
        code(&tgdt(&[
            "index",
            "--input",
            s(&tmp.path().join("images.tgf")),
            "--output",
            s(&index)
        ])),
        0
    );
    // Raw text tokens are narrower than image tokens, so query the image gallery with images.
    let out = tgdt(&[
        "search",
        "--index",
        s(&index),
        "--query",
        s(&tmp.path().join("images.tgf")),
        "--mode",
        "two-stage",
        "--k",
        "24",
        "--top",
        "24",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();

    let idx = load_index(fs::File::open(&index).unwrap()).unwrap();
    let queries =
        read_feature_file(fs::File::open(tmp.path().join("images.tgf")).unwrap()).unwrap();
    let mut lines = text.lines().skip(1);
    for q in &queries {
        let want =
            exhaustive_search(&Query::new(q).unwrap(), &idx, SimilarityMode::Mixed(0.5)).unwrap();
        for e in &want.entries {
            let cells: Vec<&str> = lines.next().unwrap().split('\t').collect();
            assert_eq!(cells[0].parse::<u64>().unwrap(), q.id());
            assert_eq!(cells[2].parse::<u64>().unwrap(), e.id);
            assert!((cells[3].parse::<f64>().unwrap() - e.score).abs() < 1e-8);
            assert_eq!(cells[4], "rerank");
        }
    }
}

#[test]
fn train_and_eval_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path(), "5");
    let p = |f: &str| tmp.path().join(f).to_str().unwrap().to_string();
    let train = |out: &str| {
        let o = tgdt(&[
            "train",
            "--images",
            &p("images.tgf"),
            "--texts",
            &p("texts.tgf"),
            "--pairs",
            &p("pairs.tsv"),
            "--layers",
            "1",
            "--heads",
            "2",
            "--model-dim",
            "8",
            "--output-dim",
            "8",
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--out",
            &p(out),
            "--history",
            &p(&format!("{out}.tsv")),
            "--threads",
            "2",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("a.ckpt");
    train("b.ckpt");
    assert_eq!(
        fs::read(p("a.ckpt")).unwrap(),
        fs::read(p("b.ckpt")).unwrap()
    );
    let history = fs::read_to_string(p("a.ckpt.tsv")).unwrap();
    assert_eq!(
        history.lines().next().unwrap(),
        "epoch\tloss\tr1_global\tr1_local"
    );
    assert_eq!(history.lines().count(), 3);

    for side in ["images", "texts"] {
        let enc = p(&format!("{side}.enc"));
        assert_eq!(
            code(&tgdt(&[
                "encode",
                "--checkpoint",
                &p("a.ckpt"),
                "--input",
                &p(&format!("{side}.tgf")),
                "--output",
                &enc
            ])),
            0
        );
        let idx = p(&format!("{side}.tgi"));
        assert_eq!(
            code(&tgdt(&[
                "index",
                "--input",
                &enc,
                "--output",
                &idx,
                "--checkpoint",
                &p("a.ckpt")
            ])),
            0
        );
    }
    let eval = || {
        tgdt(&[
            "eval",
            "--image-index",
            &p("images.tgi"),
            "--text-index",
            &p("texts.tgi"),
            "--gt",
            &p("pairs.tsv"),
        ])
        .stdout
    };
    let (a, b) = (eval(), eval());
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("path\tt2i_r1"));
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 4 to 7 drive the `tgdt` binary end to end; the rest exercise the
//! library against its naive reference implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use tgdt::encoder::{EncoderConfig, EncoderParams};
use tgdt::engine::{
    exhaustive_search, global_topk, two_stage_search, InferenceConfig, Query, SearchPath,
};
use tgdt::eval::{build_indexes, evaluate_retrieval, GroundTruth};
use tgdt::features::{read_feature_file, write_feature_file, Modality, SampleFeatures};
use tgdt::gradcheck::{check_loss_gradient, BatchShape};
use tgdt::index::{build_index, load_index, save_index};
use tgdt::loss::{
    cmc_loss, inter_modal_loss, intra_modal_loss, tgdt_loss_for_task, EncodedBatch, LossConfig,
    TaskMode,
};
use tgdt::reference;
use tgdt::similarity::{global_similarity, local_similarity, mixed_similarity, SimilarityMode};
use tgdt::trainer::{fit_encoder_config, read_pairs, PairedDataset};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn tgdt(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tgdt"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`tgdt {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn json(path: &Path) -> Result<Value, String> {
    serde_json::from_str(&ok(fs::read_to_string(path))?).map_err(|e| e.to_string())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn r1(report: &Value) -> (f64, f64) {
    (
        report["text_to_image"]["r1"].as_f64().unwrap_or(f64::NAN),
        report["image_to_text"]["r1"].as_f64().unwrap_or(f64::NAN),
    )
}

fn metrics(report: &Value) -> (&Value, &Value) {
    (&report["text_to_image"], &report["image_to_text"])
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| gaussian(rng, d)).collect()
}

fn matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

fn kernels() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let d = rng.random_range(1..=8);
        let (x, y) = (gaussian(&mut rng, d), gaussian(&mut rng, d));
        let g = ok(global_similarity(&x, &y))?;
        worst = worst.max((g - reference::cosine(&x, &y)).abs());
        ensure!(
            (-1.0..=1.0).contains(&g),
            "case {case}: global {g} out of bounds"
        );
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
        ensure!(
            (ok(global_similarity(&xs, &ys))? - g).abs() <= 1e-12,
            "case {case}: global not scale invariant"
        );

        let (nx, ny) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (tx, ty) = (rows(&mut rng, nx, d), rows(&mut rng, ny, d));
        let l = ok(local_similarity(matrix(&tx).view(), matrix(&ty).view()))?;
        worst = worst.max((l - reference::local(&tx, &ty)).abs());
        ensure!(
            (-1.0..=1.0).contains(&l),
            "case {case}: local {l} out of bounds"
        );
        let scaled: Vec<Vec<f64>> = tx
            .iter()
            .map(|r| r.iter().map(|v| v * a).collect())
            .collect();
        let l2 = ok(local_similarity(matrix(&scaled).view(), matrix(&ty).view()))?;
        ensure!(
            (l2 - l).abs() <= 1e-12,
            "case {case}: local not scale invariant"
        );
        let (mut px, mut py) = (tx.clone(), ty.clone());
        px.shuffle(&mut rng);
        py.shuffle(&mut rng);
        let l3 = ok(local_similarity(matrix(&px).view(), matrix(&py).view()))?;
        ensure!(
            (l3 - l).abs() <= 1e-12,
            "case {case}: local depends on token order"
        );

        let theta = rng.random_range(0.0..=1.0);
        let m = ok(mixed_similarity(g, l, theta))?;
        worst = worst.max((m - reference::mixed(g, l, theta)).abs());
        ensure!(
            m >= g.min(l) - 1e-15 && m <= g.max(l) + 1e-15,
            "case {case}: mixed outside [min, max]"
        );
        ensure!(
            ok(mixed_similarity(g, l, 0.0))? == g && ok(mixed_similarity(g, l, 1.0))? == l,
            "case {case}: endpoints"
        );
    }
    ensure!(worst <= 1e-9, "max deviation from reference {worst:e}");
    Ok(format!("1000 cases, max deviation {worst:.1e}"))
}

fn one_hot(d: usize, i: usize) -> Vec<f64> {
    (0..d).map(|j| f64::from(u8::from(i == j))).collect()
}

fn loss_correctness() -> Check {
    ensure!(
        inter_modal_loss(0.9, 0.1, 0.1, 0.2) == 0.0,
        "inter margins satisfied"
    );
    ensure!(
        (inter_modal_loss(0.8, 0.5, 0.9, 0.2) - 0.3).abs() <= 1e-15,
        "inter worked example"
    );
    ensure!(
        inter_modal_loss(0.4, 0.4, 0.4, 0.0) == 0.0,
        "inter zero margin"
    );
    ensure!(
        intra_modal_loss(0.5, 0.5, 0.5, 0.5, 0.3) == 0.0,
        "intra equal"
    );
    ensure!(
        (intra_modal_loss(0.9, 0.5, 0.2, 0.35, 0.3) - 0.1).abs() <= 1e-15,
        "intra worked example"
    );
    ensure!(
        intra_modal_loss(1.0, -1.0, -1.0, 1.0, 2.0) == 0.0,
        "intra slack bound"
    );
    ensure!(
        (cmc_loss(0.3, 0.1) - 0.4).abs() <= 1e-15 && cmc_loss(0.0, 0.0) == 0.0,
        "cmc sum"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let delta: f64 = rng.random_range(0.0..0.5);
        let (sn1, sn2): (f64, f64) = (rng.random_range(-1.0..0.0), rng.random_range(-1.0..0.0));
        let sp = sn1.max(sn2) + delta + rng.random_range(0.0..0.5);
        ensure!(
            inter_modal_loss(sp, sn1, sn2, delta) == 0.0,
            "case {case}: constructed inter margin"
        );
        ensure!(
            inter_modal_loss(sn1.max(sn2) + delta * 0.5, sn1, sn2, delta) > 0.0 || delta == 0.0,
            "case {case}"
        );
        let sigma: f64 = rng.random_range(0.0..1.0);
        let gap = sigma * 0.999;
        let (a, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (b, e) = (
            a + rng.random_range(-gap..=gap),
            c + rng.random_range(-gap..=gap),
        );
        ensure!(
            intra_modal_loss(a, b, c, e, sigma) == 0.0,
            "case {case}: constructed intra slack"
        );
    }

    // Orthogonal pairs: positives at 1, every negative at 0, no intra gap.
    let (b, d) = (3, 4);
    let stacked = |i: usize| matrix(&[one_hot(d, i), one_hot(d, i)]);
    let images: Vec<_> = (0..b).map(stacked).collect();
    let batch = ok(EncodedBatch::new(images.clone(), images))?;
    let v = ok(tgdt_loss_for_task(
        &batch,
        &LossConfig::default(),
        TaskMode::Joint,
    ))?;
    ensure!(v.total == 0.0, "separated batch has loss {}", v.total);

    let shape = BatchShape {
        batch: 4,
        tokens: 3,
        dim: 4,
    };
    let errs = ok(check_loss_gradient(
        &LossConfig::default(),
        TaskMode::Joint,
        shape,
        20,
        3,
        1e-5,
        1e-3,
    ))?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    ensure!(
        errs.len() == 20 && worst <= 1e-4,
        "gradient check max relative error {worst:e}"
    );
    Ok(format!(
        "worked examples exact, 1000 constructed cases, gradient error {worst:.1e} at 20 points"
    ))
}

fn random_sample(rng: &mut ChaCha8Rng, id: u64, modality: Modality, d: usize) -> SampleFeatures {
    let n = rng.random_range(1..=8);
    let g: Vec<f32> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    SampleFeatures::new(
        id,
        modality,
        g,
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng)),
    )
}

fn two_stage_equivalence() -> Check {
    let (n, d) = (500, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut qualifying, mut queries) = (0, 0);
    for g in 0..20 {
        let items: Vec<_> = (0..n as u64)
            .map(|i| random_sample(&mut rng, i * 5 + 2, Modality::Image, d))
            .collect();
        let idx = ok(build_index(&items))?;
        for qi in 0..10 {
            queries += 1;
            let q = ok(Query::new(&random_sample(
                &mut rng,
                100_000 + qi,
                Modality::Text,
                d,
            )))?;
            let theta = rng.random_range(0.0..=1.0);
            let full = ok(exhaustive_search(&q, &idx, SimilarityMode::Mixed(theta)))?;
            let saturated = ok(two_stage_search(&q, &idx, &InferenceConfig { k: n, theta }))?;
            ensure!(
                saturated.ids() == full.ids(),
                "gallery {g} query {qi}: order differs at k = n"
            );
            for (a, b) in saturated.entries.iter().zip(&full.entries) {
                ensure!(
                    (a.score - b.score).abs() <= 1e-12,
                    "gallery {g} query {qi}: score {} vs {}",
                    a.score,
                    b.score
                );
            }
            let stage1: BTreeSet<u64> = ok(global_topk(&q, &idx, 100))?.ids().into_iter().collect();
            if full.entries[..5].iter().all(|e| stage1.contains(&e.id)) {
                qualifying += 1;
                let two = ok(two_stage_search(
                    &q,
                    &idx,
                    &InferenceConfig { k: 100, theta },
                ))?;
                ensure!(
                    two.ids()[..5] == full.ids()[..5],
                    "gallery {g} query {qi}: top 5 differs at k = 100"
                );
            }
        }
    }
    Ok(format!("20 galleries x 10 queries exact at k = n; top-5 conditional check held on {qualifying}/{queries}"))
}

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn path(&self, name: &str) -> String {
        p(&self.dir.path().join(name)).to_string()
    }
}

fn desk_training(w: &Workdir, epochs: &str) -> Vec<String> {
    let mut args = vec![
        "--images".to_string(),
        w.path("data/images.tgf"),
        "--texts".into(),
        w.path("data/texts.tgf"),
        "--pairs".into(),
        w.path("data/pairs.tsv"),
    ];
    let flags = [
        "--layers",
        "2",
        "--heads",
        "4",
        "--model-dim",
        "32",
        "--output-dim",
        "32",
        "--lr",
        "1e-3",
        "--batch-size",
        "40",
        "--seed",
        "7",
        "--task",
        "joint",
        "--epochs",
        epochs,
    ];
    args.extend(flags.iter().map(|s| s.to_string()));
    args
}

fn tgdt_owned(sub: &str, args: &[String], extra: &[&str]) -> Result<String, String> {
    let mut all = vec![sub];
    all.extend(args.iter().map(String::as_str));
    all.extend(extra);
    tgdt(&all)
}

fn prepare_end_to_end(w: &Workdir) -> Result<(), String> {
    let data = w.path("data");
    tgdt(&[
        "gen-synthetic",
        "--pairs",
        "512",
        "--concepts",
        "64",
        "--noise-std",
        "0.05",
        "--seed",
        "7",
        "--out-dir",
        &data,
    ])?;
    let ckpt = w.path("model.ckpt");
    tgdt_owned(
        "train",
        &desk_training(w, "30"),
        &["--out", &ckpt, "--history", &w.path("history.tsv")],
    )?;
    for side in ["images", "texts"] {
        let (raw, enc, gi) = (
            w.path(&format!("data/{side}.tgf")),
            w.path(&format!("{side}.enc")),
            w.path(&format!("{side}.tgi")),
        );
        tgdt(&[
            "encode",
            "--checkpoint",
            &ckpt,
            "--input",
            &raw,
            "--output",
            &enc,
        ])?;
        tgdt(&[
            "index",
            "--input",
            &enc,
            "--output",
            &gi,
            "--checkpoint",
            &ckpt,
        ])?;
    }
    Ok(())
}

fn eval_args<'a>(w: &'a Workdir, store: &'a mut Vec<String>, extra: &[&str]) -> Vec<&'a str> {
    store.clear();
    store.extend(
        [
            "--image-index",
            &w.path("images.tgi"),
            "--text-index",
            &w.path("texts.tgi"),
            "--gt",
            &w.path("data/pairs.tsv"),
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    store.extend(extra.iter().map(|s| s.to_string()));
    store.iter().map(String::as_str).collect()
}

fn end_to_end(w: &Workdir) -> Check {
    prepare_end_to_end(w)?;
    let mut store = Vec::new();
    let mut args = vec!["eval"];
    args.extend(eval_args(
        w,
        &mut store,
        &[
            "--mode",
            "two-stage",
            "--k",
            "100",
            "--theta",
            "0.5",
            "--json",
        ],
    ));
    let report_path = w.path("eval.json");
    args.push(&report_path);
    tgdt(&args)?;
    let (t2i, i2t) = r1(&json(Path::new(&report_path))?);

    let data = ok(PairedDataset::new(
        ok(read_feature_file(ok(fs::File::open(
            w.path("data/images.tgf"),
        ))?))?,
        ok(read_feature_file(ok(fs::File::open(
            w.path("data/texts.tgf"),
        ))?))?,
        &ok(read_pairs(std::io::BufReader::new(ok(fs::File::open(
            w.path("data/pairs.tsv"),
        ))?)))?,
    ))?;
    let untrained = ok(EncoderParams::init(fit_encoder_config(
        &EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 32,
            output_dim: 32,
            seed: 7,
            ..EncoderConfig::default()
        },
        &data,
    )))?;
    let (bi, bt) = ok(build_indexes(&data, &untrained))?;
    let gt = ok(GroundTruth::from_pairs(&data.pair_ids()))?;
    let base = ok(evaluate_retrieval(
        &bi,
        &bt,
        &gt,
        &SearchPath::TwoStage(InferenceConfig::default()),
    ))?;

    tgdt_owned(
        "train",
        &desk_training(w, "30"),
        &["--out", &w.path("model2.ckpt")],
    )?;
    let same = ok(fs::read(w.path("model.ckpt")))? == ok(fs::read(w.path("model2.ckpt")))?;

    let summary = format!(
        "trained R@1 t2i {t2i:.3} i2t {i2t:.3}; untrained {:.3} / {:.3}; retrain identical: {same}",
        base.text_to_image.r1, base.image_to_text.r1
    );
    ensure!(t2i >= 0.8 && i2t >= 0.8, "{summary}");
    ensure!(
        base.text_to_image.r1 <= 0.05 && base.image_to_text.r1 <= 0.05,
        "{summary}"
    );
    ensure!(same, "{summary}");
    Ok(summary)
}

fn sweep_trend(w: &Workdir) -> Check {
    let mut store = Vec::new();
    let k_json = w.path("k.json");
    let mut args = vec![
        "sweep",
        "--param",
        "k",
        "--values",
        "1,5,10,50,100,512",
        "--mode",
        "two-stage",
        "--json",
        &k_json,
    ];
    args.extend(eval_args(w, &mut store, &[]));
    tgdt(&args)?;
    let table = json(Path::new(&k_json))?;
    let rows = table["rows"].as_array().ok_or("k sweep has no rows")?;
    ensure!(rows.len() == 6, "expected 6 k rows, got {}", rows.len());
    let r10 = |r: &Value, dir: &str| r["report"][dir]["r10"].as_f64().unwrap_or(f64::NAN);
    for pair in rows.windows(2) {
        for dir in ["text_to_image", "image_to_text"] {
            ensure!(
                r10(&pair[1], dir) >= r10(&pair[0], dir),
                "{dir} R@10 decreases in k"
            );
        }
    }

    let eval = |mode: &str, store: &mut Vec<String>| -> Result<Value, String> {
        let out = w.path(&format!("eval-{mode}.json"));
        let mut args = vec!["eval", "--mode", mode, "--theta", "0.5", "--json", &out];
        args.extend(eval_args(w, store, &[]));
        tgdt(&args)?;
        json(Path::new(&out))
    };
    let mixed = eval("mixed", &mut store)?;
    ensure!(
        metrics(&rows[5]["report"]) == metrics(&mixed),
        "k = 512 row differs from exhaustive mixed"
    );

    let t_json = w.path("theta.json");
    let mut args = vec![
        "sweep", "--param", "theta", "--values", "0,1", "--mode", "mixed", "--json", &t_json,
    ];
    args.extend(eval_args(w, &mut store, &[]));
    tgdt(&args)?;
    let theta = json(Path::new(&t_json))?;
    let global = eval("global", &mut store)?;
    let local = eval("local", &mut store)?;
    ensure!(
        metrics(&theta["rows"][0]["report"]) == metrics(&global),
        "theta = 0 differs from pure global"
    );
    ensure!(
        metrics(&theta["rows"][1]["report"]) == metrics(&local),
        "theta = 1 differs from pure local"
    );
    let r10s: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.3}", r10(r, "text_to_image")))
        .collect();
    Ok(format!(
        "t2i R@10 over k: {}; endpoints exact",
        r10s.join(" ")
    ))
}

fn speed_trend(w: &Workdir) -> Check {
    let dir = w.path("bench");
    tgdt(&[
        "gen-synthetic",
        "--pairs",
        "5000",
        "--image-dim",
        "60",
        "--text-dim",
        "64",
        "--latent-dim",
        "64",
        "--tokens",
        "8",
        "--seed",
        "5",
        "--out-dir",
        &dir,
    ])?;
    for side in ["images", "texts"] {
        tgdt(&[
            "index",
            "--input",
            &format!("{dir}/{side}.tgf"),
            "--output",
            &format!("{dir}/{side}.tgi"),
        ])?;
    }
    let report = format!("{dir}/bench.json");
    tgdt(&[
        "bench",
        "--image-index",
        &format!("{dir}/images.tgi"),
        "--text-index",
        &format!("{dir}/texts.tgi"),
        "--gt",
        &format!("{dir}/pairs.tsv"),
        "--k",
        "100",
        "--max-queries",
        "200",
        "--json",
        &report,
        "--threads",
        "1",
    ])?;
    let bench = json(Path::new(&report))?;
    let rows = bench["rows"].as_array().ok_or("bench has no rows")?;
    let total = |label: &str| -> Result<f64, String> {
        rows.iter()
            .find(|r| r["path"].as_str().is_some_and(|p| p.starts_with(label)))
            .and_then(|r| r["timing"]["total_seconds"].as_f64())
            .ok_or_else(|| format!("missing {label} row"))
    };
    let (g, l, m, t) = (
        total("global")?,
        total("local")?,
        total("mixed")?,
        total("two-stage")?,
    );
    let summary = format!(
        "global {g:.3}s, local {l:.3}s, mixed {m:.3}s, two-stage {t:.3}s; speedup {:.1}x",
        l / t
    );
    ensure!(l >= 10.0 * t, "{summary}");
    ensure!(g <= l && g <= m && g <= t, "{summary}");
    Ok(summary)
}

fn ablation(w: &Workdir) -> Check {
    let run = || tgdt_owned("ablate", &desk_training(w, "15"), &[]);
    let (a, b) = (run()?, run()?);
    ensure!(a == b, "ablation output differs between runs");
    let lines = a.lines().count();
    ensure!(lines == 7, "expected header plus 6 rows, got {lines} lines");
    for line in a.lines().skip(1) {
        println!("    {line}");
    }
    Ok("3 tasks x 2 losses, identical across two runs".into())
}

fn persistence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let modality = if rng.random_bool(0.5) {
            Modality::Image
        } else {
            Modality::Text
        };
        let d = rng.random_range(1..=6);
        let samples: Vec<_> = (0..rng.random_range(0..=8))
            .map(|i| random_sample(&mut rng, i * 3 + 1, modality, d))
            .collect();
        let mut buf = Vec::new();
        ok(write_feature_file(&samples, &mut buf))?;
        let back = ok(read_feature_file(&buf[..]))?;
        ensure!(
            back.len() == samples.len() && back.iter().zip(&samples).all(|(a, b)| a.bit_eq(b)),
            "case {case}: features"
        );

        let heads = rng.random_range(1..=2);
        let cfg = EncoderConfig {
            num_layers: rng.random_range(1..=2),
            num_heads: heads,
            model_dim: heads * rng.random_range(1..=3),
            output_dim: rng.random_range(1..=4),
            image_input_dim: rng.random_range(1..=5),
            text_input_dim: rng.random_range(1..=5),
            seed: rng.random(),
        };
        let params = ok(EncoderParams::init(cfg))?;
        let mut buf = Vec::new();
        ok(params.save(&mut buf))?;
        let loaded = ok(EncoderParams::load(&buf[..]))?;
        ensure!(
            loaded.config() == params.config()
                && loaded
                    .data()
                    .iter()
                    .zip(params.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
            "case {case}: checkpoint"
        );

        let idx = ok(build_index(&samples))?;
        let mut buf = Vec::new();
        ok(save_index(&idx, &mut buf))?;
        ensure!(ok(load_index(&buf[..]))? == idx, "case {case}: index");
    }
    Ok("200 cases each for features, checkpoints and indexes".into())
}

fn report(n: usize, name: &str, budget: Duration, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = check();
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {n} [{}] {name} ({elapsed:.1?}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() -> ExitCode {
    let w = Workdir {
        dir: tempfile::tempdir().expect("temp dir"),
    };
    let s = Duration::from_secs;
    let results = [
        report(1, "kernel oracles", s(10), kernels),
        report(2, "loss correctness", s(60), loss_correctness),
        report(3, "two-stage equivalence", s(60), two_stage_equivalence),
        report(4, "end-to-end learning", s(300), || end_to_end(&w)),
        report(5, "k and theta sweeps", s(120), || sweep_trend(&w)),
        report(6, "speed trend", s(300), || speed_trend(&w)),
        report(7, "ablation harness", s(600), || ablation(&w)),
        report(8, "persistence roundtrips", s(30), persistence),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

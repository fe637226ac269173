//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use cllab::config::ExperimentConfig;
use cllab::corpus::{synth_sts, CorpusConfig, SynthConfig, TokenSequence};
use cllab::diagnostics::{alignment, rank_report, uniformity, variance_report};
use cllab::encoder::{forward, init_params, Activation, EncoderConfig, ForwardMode};
use cllab::matrix::gaussian_sample;
use cllab::objectives::{audit_suite, barlow_twins, dcl, dcl_similarity, info_nce, AuditOptions, LossConfig};
use cllab::trainer::{train, NoiseMode, TrainObjective};
use cllab::{Matrix, Rng};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn sentences(n: usize, seed: u64) -> Vec<TokenSequence> {
    let synth = SynthConfig { n_train_sentences: n, n_eval_pairs: 1, ..SynthConfig::default() };
    synth_sts(&Rng::new(seed), &synth, &CorpusConfig::default()).unwrap().corpus
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let entries = audit_suite(5, 8, 16, &LossConfig::default(), AuditOptions::default()).unwrap();
    let worst = entries.iter().max_by(|a, b| a.result.max_rel_error.total_cmp(&b.result.max_rel_error)).unwrap();
    let elapsed = start.elapsed();
    let objectives: std::collections::BTreeSet<String> = entries.iter().map(|e| e.result.objective.to_string()).collect();
    let pass = worst.result.max_rel_error < 1e-4 && elapsed < Duration::from_secs(60) && objectives.len() == 5;
    outcome(
        pass,
        format!(
            "{} audits over {} objectives x 5 seeds, worst {:.2e} ({} seed {}), {}",
            entries.len(),
            objectives.len(),
            worst.result.max_rel_error,
            worst.result.objective,
            worst.seed,
            secs(elapsed)
        ),
    )
}

fn rank_bottleneck() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig { out_dim: 768, ..EncoderConfig::default() };
    let corpus = sentences(64 * 20, 21);
    let pads = [100usize, 300, 704];
    let expected = [164usize, 364, 768];
    let mut observed_ok = 0;
    let mut hits = [0usize; 3];
    for seed in 0..20u64 {
        let root = Rng::new(seed);
        let params = init_params(&mut root.split(0), &cfg).unwrap();
        let batch = &corpus[64 * seed as usize..64 * (seed as usize + 1)];
        let mut rng = root.split(1);
        let (z1, _) = forward(&params, batch, ForwardMode::Dropout, &mut rng).unwrap();
        let (z2, _) = forward(&params, batch, ForwardMode::Dropout, &mut rng).unwrap();
        let r = rank_report(&z1, &z2, &pads, &mut root.split(2)).unwrap();
        observed_ok += usize::from(r.observed_rank == 64);
        for (k, &(_, rank)) in r.padded_ranks.iter().enumerate() {
            hits[k] += usize::from(rank == expected[k]);
        }
    }
    let elapsed = start.elapsed();
    let pass = observed_ok == 20 && hits.iter().all(|&h| h >= 19) && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "rank 64 in {observed_ok}/20 seeds; padded 164/364/768 in {}/{}/{} of 20, {}",
            hits[0],
            hits[1],
            hits[2],
            secs(elapsed)
        ),
    )
}

fn variance_reduction() -> Outcome {
    let params = init_params(&mut Rng::new(5), &EncoderConfig::default()).unwrap();
    let batch = sentences(8, 22);
    let r = variance_report(&params, &batch, 10, 1000, &Rng::new(6), false).unwrap();
    outcome(
        (0.08..=0.12).contains(&r.ratio),
        format!(
            "K=10, 1000 draws: ratio {:.4} (single {:.3e}, mean-of-K {:.3e})",
            r.ratio, r.single_draw_variance, r.mean_of_k_variance
        ),
    )
}

fn off_dropout_zero_variance() -> Outcome {
    let batch = sentences(6, 23);
    let params = init_params(&mut Rng::new(7), &EncoderConfig::default()).unwrap();
    let mut rng = Rng::new(8);
    let (a, _) = forward(&params, &batch, ForwardMode::Deterministic, &mut rng).unwrap();
    let (b, _) = forward(&params, &batch, ForwardMode::Deterministic, &mut rng).unwrap();
    let identical = a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());

    let linear = EncoderConfig {
        embed_dim: 8,
        hidden_dim: 8,
        out_dim: 4,
        activation: Activation::Identity,
        ..EncoderConfig::default()
    };
    let params = init_params(&mut Rng::new(9), &linear).unwrap();
    let small = &batch[..3];
    let (det, _) = forward(&params, small, ForwardMode::Deterministic, &mut rng).unwrap();
    let draws = 10_000;
    let len = det.as_slice().len();
    let (mut sum, mut sq) = (vec![0.0; len], vec![0.0; len]);
    let mut rng = Rng::new(10);
    for _ in 0..draws {
        let (z, _) = forward(&params, small, ForwardMode::Dropout, &mut rng).unwrap();
        for (k, &v) in z.as_slice().iter().enumerate() {
            let centered = v - det.as_slice()[k];
            sum[k] += centered;
            sq[k] += centered * centered;
        }
    }
    let n = draws as f64;
    let worst_z = (0..len)
        .map(|k| {
            let mean = sum[k] / n;
            let var = (sq[k] - n * mean * mean) / (n - 1.0);
            mean.abs() / (var / n).sqrt()
        })
        .fold(0.0, f64::max);
    outcome(
        identical && worst_z <= 3.0,
        format!(
            "deterministic forwards bit-identical: {identical}; linear head, 10^4 draws, worst |mean - det| = {worst_z:.2} SE over {len} coordinates"
        ),
    )
}

fn closed_form_fixtures() -> Outcome {
    let n = 8;
    let eye = Matrix::identity(n);
    let mut worst: f64 = 0.0;
    for tau in [0.05, 1.0] {
        let cfg = LossConfig { tau, ..LossConfig::default() };
        let v = info_nce(&eye, &eye, &cfg).unwrap().value;
        let expected = (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln();
        worst = worst.max((v - expected).abs());
    }
    let cfg = LossConfig::default();
    let z = gaussian_sample(&mut Rng::new(12), n, 5, 0.0, 1.0).unwrap();
    let s = dcl_similarity(&z, &z, &cfg).unwrap();
    let diag = (0..5).map(|c| (s[(c, c)] - (n as f64 - 1.0) / cfg.tau_dcl).abs()).fold(0.0, f64::max);
    let one_col = gaussian_sample(&mut Rng::new(13), n, 1, 0.0, 1.0).unwrap();
    let other = gaussian_sample(&mut Rng::new(14), n, 1, 0.0, 1.0).unwrap();
    let dcl_d1 = dcl(&one_col, &other, &cfg).unwrap().value;
    let row = gaussian_sample(&mut Rng::new(15), 1, 6, 0.0, 1.0).unwrap();
    let row2 = gaussian_sample(&mut Rng::new(16), 1, 6, 0.0, 1.0).unwrap();
    let nce_n1 = info_nce(&row, &row2, &cfg).unwrap().value;
    outcome(
        worst <= 1e-9 && diag <= 1e-9 && dcl_d1 == 0.0 && nce_n1 == 0.0,
        format!(
            "InfoNCE orthogonal fixture err {worst:.1e}; DCL diagonal err {diag:.1e}; D=1 DCL = {dcl_d1}; N=1 InfoNCE = {nce_n1}"
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn directional_training() -> Outcome {
    let base = ["lr=1e-3".to_string(), "eval_interval=16".to_string()];
    let cfg = ExperimentConfig::load(None, &base, None).unwrap();
    let data = cfg.load_data().unwrap();
    type Variant = (&'static str, Box<dyn Fn(&mut cllab::trainer::TrainConfig)>);
    let variants: [Variant; 3] = [
        ("info_nce", Box::new(|_| {})),
        ("combined", Box::new(|c| c.objective = TrainObjective::Combined)),
        ("neg_minus", Box::new(|c| c.neg_noise = NoiseMode::MeanSampled { k: 10 })),
    ];
    let mut medians = Vec::new();
    let mut slowest = Duration::ZERO;
    for (name, apply) in &variants {
        let mut scores = Vec::new();
        for seed in 0..5u64 {
            let mut t = cfg.train.clone();
            t.seed = seed;
            apply(&mut t);
            let start = Instant::now();
            let out = train(&t, &data.corpus, &data.dev, &data.test, None).unwrap();
            slowest = slowest.max(start.elapsed());
            scores.push(out.report.best_dev_spearman);
        }
        medians.push((name, median(scores)));
    }
    let (info, comb, neg) = (medians[0].1, medians[1].1, medians[2].1);
    outcome(
        comb >= info && neg >= info && slowest < Duration::from_secs(300),
        format!(
            "median best-dev spearman over 5 seeds: info_nce {info:.4}, combined {comb:.4} ({}), neg_minus {neg:.4} ({}); slowest run {}",
            if comb >= info { "ok" } else { "below baseline" },
            if neg >= info { "ok" } else { "below baseline" },
            secs(slowest)
        ),
    )
}

fn cllab(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cllab"))
        .args(args)
        .current_dir(dir)
        .env_remove("CLLAB_SEED")
        .output()
        .expect("binary runs")
}

const GRID_CONFIG: &str = r#"
output_dir = "out"
lr = 1e-3
eval_interval = 8
[synth]
n_train_sentences = 1024
n_eval_pairs = 300
"#;

fn well_formed_grid(path: &Path, cells: usize) -> std::result::Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&"value,best_dev_spearman,best_step,test_spearman,status") {
        return Err("bad header".into());
    }
    if lines.len() != cells + 1 {
        return Err(format!("{} rows, expected {cells}", lines.len() - 1));
    }
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        let numeric = f.len() == 5
            && f[1].parse::<f64>().is_ok_and(|x| (-1.0..=1.0).contains(&x))
            && f[2].parse::<u64>().is_ok()
            && f[3].parse::<f64>().is_ok();
        if !numeric || f[4] != "ok" {
            return Err(format!("malformed row {l:?}"));
        }
    }
    Ok(())
}

fn ablation_grids() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), GRID_CONFIG).unwrap();
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for (axis, cells) in [("m", 6), ("lambda_dcl", 6), ("tau_dcl", 6), ("noise", 5)] {
        let o = cllab(dir.path(), &["ablate", "--config", "cfg.toml", "--axis", axis]);
        let check = if o.status.success() {
            well_formed_grid(&dir.path().join(format!("out/ablate_{axis}.csv")), cells)
        } else {
            Err(String::from_utf8_lossy(&o.stderr).trim().to_string())
        };
        match check {
            Ok(()) => notes.push(format!("{axis} {cells} rows")),
            Err(e) => {
                pass = false;
                notes.push(format!("{axis}: {e}"));
            }
        }
    }
    outcome(pass, format!("{}; {}", notes.join(", "), secs(start.elapsed())))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("cfg.toml"), GRID_CONFIG).unwrap();
    // (name, arguments, artifact compared; empty means stdout)
    type Run<'a> = (&'a str, Vec<&'a str>, &'a str);
    let runs: [Run; 5] = [
        ("train", vec!["train", "--config", "cfg.toml", "--set", "objective=combined", "--set", "seed=3"], "metrics.csv"),
        ("ablate", vec!["ablate", "--config", "cfg.toml", "--axis", "noise", "--values", "baseline,neg_minus"], "ablate_noise.csv"),
        ("diagnose", vec!["diagnose", "--config", "cfg.toml", "--checkpoint", "best.ckpt", "--draws", "200"], "diagnose.json"),
        ("eval", vec!["eval", "--config", "cfg.toml", "--checkpoint", "best.ckpt"], "eval.json"),
        ("gradcheck", vec!["gradcheck", "--seeds", "1"], ""),
    ];
    // checkpoint consumed by diagnose and eval
    let o = cllab(p, &["train", "--config", "cfg.toml"]);
    if !o.status.success() {
        return outcome(false, "setup training run failed");
    }
    std::fs::rename(p.join("out/best.ckpt"), p.join("best.ckpt")).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, args, artifact) in &runs {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let o = cllab(p, args);
            let bytes = if artifact.is_empty() {
                o.stdout.clone()
            } else {
                std::fs::read(p.join("out").join(artifact)).unwrap_or_default()
            };
            outputs.push((o.status.success(), bytes));
            let _ = std::fs::remove_dir_all(p.join("out"));
        }
        let same = outputs[0].0 && outputs[1].0 && !outputs[0].1.is_empty() && outputs[0].1 == outputs[1].1;
        pass &= same;
        notes.push(format!("{name} {}", if same { "identical" } else { "DIFFERS" }));
    }
    outcome(pass, notes.join(", "))
}

fn unit_rows(z: &Matrix) -> Vec<Vec<f64>> {
    (0..z.rows())
        .map(|i| {
            let r = z.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn brute_barlow_twins(z1: &Matrix, z2: &Matrix, lambda: f64) -> f64 {
    let (n, d) = z1.shape();
    let mut loss = 0.0;
    for c in 0..d {
        for e in 0..d {
            let num: f64 = (0..n).map(|i| z1[(i, c)] * z2[(i, e)]).sum();
            let a: f64 = (0..n).map(|i| z1[(i, c)].powi(2)).sum::<f64>().sqrt();
            let b: f64 = (0..n).map(|i| z2[(i, e)].powi(2)).sum::<f64>().sqrt();
            let cc = num / (a * b);
            loss += if c == e { (1.0 - cc).powi(2) } else { lambda * cc * cc };
        }
    }
    loss
}

fn standardized(z: &Matrix) -> Vec<Vec<f64>> {
    let (n, d) = z.shape();
    (0..d)
        .map(|c| {
            let mean = (0..n).map(|i| z[(i, c)]).sum::<f64>() / n as f64;
            let sd = ((0..n).map(|i| (z[(i, c)] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            (0..n).map(|i| (z[(i, c)] - mean) / sd).collect()
        })
        .collect()
}

fn brute_dcl(z1: &Matrix, z2: &Matrix, tau: f64) -> f64 {
    let (a, b) = (standardized(z1), standardized(z2));
    let d = a.len();
    let s = |c: usize, e: usize| a[c].iter().zip(&b[e]).map(|(x, y)| x * y).sum::<f64>() / tau;
    (0..d)
        .map(|c| -(s(c, c).exp() / (0..d).map(|e| s(c, e).exp()).sum::<f64>()).ln())
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn brute_alignment(z1: &Matrix, z2: &Matrix) -> f64 {
    let (a, b) = (unit_rows(z1), unit_rows(z2));
    a.iter().zip(&b).map(|(x, y)| sq_dist(x, y)).sum::<f64>() / a.len() as f64
}

fn brute_uniformity(z: &Matrix) -> f64 {
    let u = unit_rows(z);
    let n = u.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (-2.0 * sq_dist(&u[i], &u[j])).exp();
            }
        }
    }
    (total / (n * (n - 1)) as f64).ln()
}

fn oracle_equivalence() -> Outcome {
    let cfg = LossConfig::default();
    let mut rng = Rng::new(99);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let n = 2 + rng.below(7);
        let d = 1 + rng.below(6);
        let z1 = gaussian_sample(&mut rng, n, d, 0.0, 1.0).unwrap();
        let z2 = gaussian_sample(&mut rng, n, d, 0.0, 1.0).unwrap();
        let diffs = [
            barlow_twins(&z1, &z2, &cfg).unwrap().value - brute_barlow_twins(&z1, &z2, cfg.lambda_bt),
            dcl(&z1, &z2, &cfg).unwrap().value - brute_dcl(&z1, &z2, cfg.tau_dcl),
            alignment(&z1, &z2).unwrap() - brute_alignment(&z1, &z2),
            uniformity(&z1).unwrap() - brute_uniformity(&z1),
        ];
        for (w, diff) in worst.iter_mut().zip(diffs) {
            *w = w.max(diff.abs());
        }
    }
    outcome(
        worst.iter().all(|&w| w <= 1e-12),
        format!(
            "100 cases each, max |diff|: barlow_twins {:.1e}, dcl {:.1e}, alignment {:.1e}, uniformity {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("rank bottleneck", rank_bottleneck),
        ("CLT variance reduction", variance_reduction),
        ("off-dropout zero variance", off_dropout_zero_variance),
        ("closed-form loss fixtures", closed_form_fixtures),
        ("directional training result", directional_training),
        ("ablation grids execute", ablation_grids),
        ("determinism", determinism),
        ("oracle equivalence", oracle_equivalence),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let r = run();
        println!("criterion {id} ({name}): {} | {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        if !r.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

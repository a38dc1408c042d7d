//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every reference value is computed here, apart
//! from the library, with plain loops.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use opera::checkpoint;
use opera::config::ExperimentConfig;
use opera::data::experiment_split;
use opera_core::labels::{Level, PairRelation};
use opera_core::model::{Arrangement, HierarchyModel, ModelConfig, Mode, OnlineTargetPair};
use opera_core::objectives::{unified_loss, OperaLossConfig, SimilarityRow, WeightScheme};
use opera_core::theory::{equivalent_weights, verify_corollary1, verify_proposition1, ConstantWeights, LinearHierarchy};
use opera_core::training::{online_step, pretrain_observed, BatchReport, LossSettings, Objective, Observer, ViewBatch};
use opera_core::{LabelPair, Matrix, Rng};

const BIN: &str = env!("CARGO_BIN_EXE_opera");

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt();
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row of similarities `s_j = y . p_j` for random `y` and prototypes.
fn random_sims(rng: &mut Rng, n: usize) -> Vec<f64> {
    let d = 1 + rng.below(8);
    let y: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
    (0..n)
        .map(|_| {
            let p: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            dot(&y, &p)
        })
        .collect()
}

fn one_positive_row(sims: Vec<f64>, pos: usize, positive: PairRelation) -> SimilarityRow {
    let rels = (0..sims.len()).map(|j| if j == pos { positive } else { PairRelation::CROSS_CLASS }).collect();
    SimilarityRow::new(0, sims, rels).unwrap()
}

fn softmax_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(4);
        let pos = rng.below(n);
        let s = random_sims(&mut rng, n);
        let got = unified_loss(&[one_positive_row(s.clone(), pos, PairRelation::SAME_CLASS)], WeightScheme::Softmax, Level::Class)
            .unwrap()
            .grad_sims
            .remove(0);
        // d/ds of -log(exp(s_p) / sum_{n != p} exp(s_n))
        let m = s.iter().enumerate().filter(|&(j, _)| j != pos).map(|(_, v)| *v).fold(f64::MIN, f64::max);
        let z: f64 = s.iter().enumerate().filter(|&(j, _)| j != pos).map(|(_, v)| (v - m).exp()).sum();
        let want: Vec<f64> = s.iter().enumerate().map(|(j, v)| if j == pos { -1.0 } else { (v - m).exp() / z }).collect();
        worst = worst.max(rel_err(&got, &want));
    }
    let t = start.elapsed();
    outcome(worst < 1e-12 && t < Duration::from_secs(1), format!("worst rel err {worst:.2e}, {t:.2?}"))
}

fn info_nce_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(12);
    let mut worst: f64 = 0.0;
    for tau in [0.2, 0.5, 1.0] {
        for _ in 0..100 {
            let n = 2 + rng.below(4);
            let pos = rng.below(n);
            let s = random_sims(&mut rng, n);
            let row = one_positive_row(s.clone(), pos, PairRelation::SAME_INSTANCE);
            let got = unified_loss(&[row], WeightScheme::InfoNce { temperature: tau }, Level::Instance).unwrap().grad_sims.remove(0);
            // d/ds of -log(exp(s_p / tau) / sum_j exp(s_j / tau))
            let m = s.iter().fold(f64::MIN, |a, &b| a.max(b / tau));
            let e: Vec<f64> = s.iter().map(|v| (v / tau - m).exp()).collect();
            let z: f64 = e.iter().sum();
            // the positive entry is written as -(sum of the others) / z so it
            // keeps full precision when the positive dominates
            let rest: f64 = e.iter().enumerate().filter(|&(j, _)| j != pos).map(|(_, v)| v).sum();
            let want: Vec<f64> = e.iter().enumerate().map(|(j, v)| if j == pos { -rest / z / tau } else { v / z / tau }).collect();
            worst = worst.max(rel_err(&got, &want));
        }
    }
    let t = start.elapsed();
    outcome(worst < 1e-12 && t < Duration::from_secs(1), format!("worst rel err {worst:.2e}, {t:.2?}"))
}

/// Pair objective of the two-level linear model written out by hand.
fn pair_objective(wg: &Matrix, wh: &Matrix, y: &[f64], p: &[f64], rel: PairRelation, w: &ConstantWeights) -> f64 {
    let lin = |m: &Matrix, v: &[f64]| -> Vec<f64> { (0..m.rows()).map(|r| dot(m.row(r), v)).collect() };
    let (ys, ps) = (lin(wg, y), lin(wg, p));
    let (yf, pf) = (lin(wh, &ys), lin(wh, &ps));
    let c_self = if rel.same_instance() { -w.self_positive } else { w.self_negative };
    let c_full = if rel.same_class() { -w.full_positive } else { w.full_negative };
    c_self * dot(&ys, &ps) + c_full * dot(&yf, &pf)
}

fn proposition1() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(13);
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..100 {
        let h = LinearHierarchy::random(&mut rng, 8);
        worst = worst.max(verify_proposition1(&h, &mut rng, 10).max_rel_discrepancy);
        // The objective is linear in y, so a central difference along p is
        // exact up to rounding.
        let d = h.input_dim();
        let y: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let p: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let w = ConstantWeights::random(&mut rng);
        let ps: Vec<f64> = (0..h.instance_map().rows()).map(|r| dot(h.instance_map().row(r), &p)).collect();
        let pf: Vec<f64> = (0..h.class_map().rows()).map(|r| dot(h.class_map().row(r), &ps)).collect();
        let (alpha, beta) = (dot(&ps, &ps), dot(&pf, &pf));
        let closed = equivalent_weights(&w, alpha, beta);
        for rel in [PairRelation::SAME_INSTANCE, PairRelation::SAME_CLASS, PairRelation::CROSS_CLASS] {
            let up: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a + b).collect();
            let down: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
            let fd = 0.5
                * (pair_objective(h.instance_map(), h.class_map(), &up, &p, rel, &w)
                    - pair_objective(h.instance_map(), h.class_map(), &down, &p, rel, &w));
            let scale = (w.self_positive.max(w.self_negative) * alpha + w.full_positive.max(w.full_negative) * beta).max(1e-300);
            worst_oracle = worst_oracle.max((fd - closed.get(rel)).abs() / scale);
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-8 && worst_oracle < 1e-8 && t < Duration::from_secs(1),
        format!("max rel discrepancy {worst:.2e}, against hand-written objective {worst_oracle:.2e}, {t:.2?}"),
    )
}

fn corollary1() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(14);
    let mut violations = 0;
    let mut oracle_violations = 0;
    for _ in 0..1000 {
        let h = LinearHierarchy::random(&mut rng, 8);
        let w = ConstantWeights::random(&mut rng);
        let mut replay = rng.clone();
        if verify_corollary1(&h, &w, &mut rng, 1).is_err() {
            violations += 1;
        }
        let p: Vec<f64> = (0..h.input_dim()).map(|_| replay.gaussian()).collect();
        let ps: Vec<f64> = (0..h.instance_map().rows()).map(|r| dot(h.instance_map().row(r), &p)).collect();
        let pf: Vec<f64> = (0..h.class_map().rows()).map(|r| dot(h.class_map().row(r), &ps)).collect();
        let (a, b) = (dot(&ps, &ps), dot(&pf, &pf));
        let inst = -w.self_positive * a - w.full_positive * b;
        let same = w.self_negative * a - w.full_positive * b;
        let cross = w.self_negative * a + w.full_negative * b;
        if !(inst <= same && same <= cross) {
            oracle_violations += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        violations == 0 && oracle_violations == 0 && t < Duration::from_secs(1),
        format!("{violations} violations ({oracle_violations} by hand), {t:.2?}"),
    )
}

#[derive(Default)]
struct ConflictLog {
    batches: usize,
    empty_batches: usize,
    worst: f64,
}

impl Observer for ConflictLog {
    fn on_batch(&mut self, r: &BatchReport<'_>) {
        self.batches += 1;
        match r.loss.pairs.as_ref().and_then(|p| p.max_abs_conflicting()) {
            Some(v) => self.worst = self.worst.max(v),
            None => self.empty_batches += 1,
        }
    }
}

fn neutralization() -> Outcome {
    let cfg = ExperimentConfig::load(&example("naive_neutral.cfg")).unwrap();
    let (train, _) = experiment_split(&cfg).unwrap();
    let mut log = ConflictLog::default();
    let res = pretrain_observed(&cfg.run, &train, &mut log);
    let pass = res.is_ok() && cfg.run.epochs == 10 && log.batches > 0 && log.empty_batches == 0 && log.worst == 0.0;
    outcome(
        pass,
        format!(
            "{} epochs, {} batches, {} without conflicting pairs, max |dJ/ds| {:e}",
            cfg.run.epochs, log.batches, log.empty_batches, log.worst
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let settings = LossSettings {
        objective: Objective::Opera,
        opera: OperaLossConfig::default(),
        symmetrize: true,
        full_both_views: true,
        naive_self: WeightScheme::Softmax,
        naive_full: WeightScheme::Softmax,
    };
    let cfg = ModelConfig {
        input_dim: 5,
        backbone_widths: vec![7, 6],
        projector_hidden: 6,
        embed_dim: 4,
        predictor_hidden: 8,
        class_hidden: 6,
        num_classes: 3,
        arrangement: Arrangement::C,
        bn_eps: 1e-5,
    };
    let labels: Vec<LabelPair> = (0..8).map(|i| LabelPair::new(i, i % 3)).collect();
    let mut worst: f64 = 0.0;
    let mut seeds = 0;
    let mut skipped = 0;
    let mut seed = 0u64;
    while seeds < 20 {
        seed += 1;
        let mut rng = Rng::new(1000 + seed);
        let model = HierarchyModel::new(&cfg, &mut rng).unwrap();
        let v1 = rng.gaussian_matrix(8, 5, 1.0);
        let v2 = rng.gaussian_matrix(8, 5, 1.0);
        let k1 = rng.gaussian_matrix(8, 4, 1.0);
        let k2 = rng.gaussian_matrix(8, 4, 1.0);
        let batch = ViewBatch {
            first: &v1,
            second: &v2,
            first_keys: Some(&k1),
            second_keys: Some(&k2),
            labels: &labels,
        };
        let mut probe = model.clone();
        let (_, c1) = probe.forward(&v1, Mode::Train).unwrap();
        let (_, c2) = probe.forward(&v2, Mode::Train).unwrap();
        if model.min_kink_distance(&c1).min(model.min_kink_distance(&c2)) < 1e-3 {
            skipped += 1;
            continue;
        }
        // a query row that is exactly zero has no direction to normalise
        let analytic = match online_step(&mut model.clone(), batch, &settings) {
            Ok((_, g)) => g.into_tensors(),
            Err(opera_core::Error::DegenerateBatch(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let loss_at = |idx: usize, k: usize, h: f64| {
            let mut m = model.clone();
            m.params_mut()[idx].as_mut_slice()[k] += h;
            online_step(&mut m, batch, &settings).unwrap().0.total
        };
        let numeric: Vec<Vec<f64>> = analytic
            .iter()
            .enumerate()
            .map(|(idx, g)| (0..g.len()).map(|k| (loss_at(idx, k, 1e-5) - loss_at(idx, k, -1e-5)) / 2e-5).collect())
            .collect();
        let global = analytic.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        for (g, fd) in analytic.iter().zip(&numeric) {
            let diff = g.as_slice().iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Parameters ahead of a batch norm, whose gradient vanishes in
            // exact arithmetic, are measured against the whole gradient.
            let scale = g.frobenius_norm().max(fd_norm).max(1e-3 * global);
            worst = worst.max(diff / scale);
        }
        seeds += 1;
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && t < Duration::from_secs(10),
        format!("20 seeds ({skipped} near a kink or degenerate skipped), worst rel err {worst:.2e}, {t:.2?}"),
    )
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn json_field(out: &std::process::Output, key: &str) -> Option<f64> {
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).ok()?;
    v.get(key)?.as_f64()
}

fn desk_run(dir: &Path) -> Outcome {
    let cfg = example("opera_blobs.cfg");
    let out = dir.join("desk");
    let start = Instant::now();
    let train = run(&["train", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let t_train = start.elapsed();
    if !train.status.success() {
        return outcome(false, format!("train failed: {}", String::from_utf8_lossy(&train.stderr)));
    }
    let ckpt = out.join("final.ckpt");
    let args = |protocol: &'static str| ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--protocol", protocol].map(String::from);
    let probe = Command::new(BIN).args(args("probe")).output().unwrap();
    let ordering = Command::new(BIN).args(args("ordering")).output().unwrap();
    let t = start.elapsed();
    let acc = json_field(&probe, "accuracy").unwrap_or(f64::NAN);
    let inst = json_field(&ordering, "mean_same_instance").unwrap_or(f64::NAN);
    let same = json_field(&ordering, "mean_same_class").unwrap_or(f64::NAN);
    let cross = json_field(&ordering, "mean_cross_class").unwrap_or(f64::NAN);
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).map_or(0, |s| s.lines().count());
    let pass = lines == 200 && acc >= 0.95 && inst - same >= 0.02 && same - cross >= 0.02 && t < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "probe {acc:.4}, similarities {inst:.4} > {same:.4} > {cross:.4}, {lines} epochs, train {t_train:.2?}, total {t:.2?}"
        ),
    )
}

fn compare(dir: &Path) -> Outcome {
    let table = dir.join("compare.csv");
    let configs = ["fsl_blobs.cfg", "ssl_blobs.cfg", "naive_blobs.cfg", "opera_blobs.cfg"].map(|c| example(c).display().to_string());
    let mut args = vec!["compare".to_string()];
    args.extend(configs);
    args.extend(["--output".to_string(), table.display().to_string()]);
    let out = Command::new(BIN).args(&args).output().unwrap();
    if !out.status.success() {
        return outcome(false, format!("compare failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (mode_col, probe_col, seed_col) = (col("mode"), col("probe_accuracy"), col("seed"));
    let mut probes = Vec::new();
    let mut seeds = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        probes.push((rec[mode_col].to_string(), rec[probe_col].parse::<f64>().unwrap_or(f64::NAN)));
        seeds.push(rec[seed_col].to_string());
    }
    let get = |m: &str| probes.iter().find(|(k, _)| k == m).map_or(f64::NAN, |(_, v)| *v);
    let all_present = ["fsl", "ssl", "naive", "opera"].iter().all(|m| (0.0..=1.0).contains(&get(m)));
    let same_seed = seeds.windows(2).all(|w| w[0] == w[1]);
    let pass = probes.len() == 4 && all_present && same_seed && get("opera") >= get("naive");
    let listing: Vec<String> = probes.iter().map(|(m, v)| format!("{m} {v:.4}")).collect();
    outcome(pass, format!("probe accuracy: {}", listing.join(", ")))
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = example("opera_blobs.cfg");
    let second = dir.join("again");
    let train = run(&["train", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    if !train.status.success() {
        return outcome(false, "second train failed".into());
    }
    let first = dir.join("desk");
    let read = |p: PathBuf| std::fs::read(p).unwrap_or_default();
    let metrics_same = {
        let a = read(first.join("metrics.jsonl"));
        !a.is_empty() && a == read(second.join("metrics.jsonl"))
    };
    let ckpt_bytes = read(first.join("final.ckpt"));
    let ckpt_same = !ckpt_bytes.is_empty() && ckpt_bytes == read(second.join("final.ckpt"));
    let resaved = dir.join("resaved.ckpt");
    let round_trip = checkpoint::load(&first.join("final.ckpt"))
        .and_then(|pair| checkpoint::save(&pair, &resaved))
        .is_ok()
        && read(resaved) == ckpt_bytes;
    outcome(
        metrics_same && ckpt_same && round_trip,
        format!("metrics identical {metrics_same}, checkpoints identical {ckpt_same}, save-load-save identical {round_trip}"),
    )
}

/// Replays `target <- m * target + (1 - m) * online` after every step.
#[derive(Default)]
struct TargetReplay {
    predicted: Vec<Vec<f64>>,
    momentum: f64,
    steps: usize,
    max_gap: f64,
}

impl Observer for TargetReplay {
    fn on_start(&mut self, pair: &OnlineTargetPair) {
        self.predicted = pair.target.named_params().into_iter().map(|(_, m)| m.as_slice().to_vec()).collect();
        self.momentum = pair.momentum();
    }

    fn on_step_end(&mut self, pair: &OnlineTargetPair) {
        let online: Vec<(String, &Matrix)> = pair
            .online
            .named_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("projector."))
            .collect();
        let target = pair.target.named_params();
        let m = self.momentum;
        for ((pred, (_, o)), (_, t)) in self.predicted.iter_mut().zip(&online).zip(&target) {
            for ((p, &ov), &tv) in pred.iter_mut().zip(o.as_slice()).zip(t.as_slice()) {
                *p = m * *p + (1.0 - m) * ov;
                self.max_gap = self.max_gap.max((*p - tv).abs());
            }
        }
        self.steps += 1;
    }
}

fn stop_gradient() -> Outcome {
    let cfg = ExperimentConfig::load(&example("opera_blobs.cfg")).unwrap();
    let (train, _) = experiment_split(&cfg).unwrap();
    let mut replay = TargetReplay::default();
    let res = pretrain_observed(&cfg.run, &train, &mut replay);
    outcome(
        res.is_ok() && replay.steps > 0 && replay.max_gap == 0.0,
        format!("{} steps over {} epochs, max gap {:e}", replay.steps, cfg.run.epochs, replay.max_gap),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion<'_>> = vec![
        ("softmax gradient identity", Box::new(softmax_identity)),
        ("infonce gradient identity", Box::new(info_nce_identity)),
        ("linear hierarchy equivalence", Box::new(proposition1)),
        ("coefficient ordering", Box::new(corollary1)),
        ("naive sum neutralization", Box::new(neutralization)),
        ("end-to-end gradient check", Box::new(gradient_check)),
        ("desk-scale training", Box::new(|| desk_run(dir.path()))),
        ("comparison harness", Box::new(|| compare(dir.path()))),
        ("determinism and persistence", Box::new(|| determinism(dir.path()))),
        ("stop-gradient invariant", Box::new(stop_gradient)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N: PASS|FAIL ...` line; thresholds are pinned below.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use lshg_core::blocks::Variant;
use lshg_core::checkpoint::checkpoint_bytes;
use lshg_core::eval::{coordinates, pckh, predict_joints, PckhReport, GROUPS};
use lshg_core::gradcheck::{check_block, check_network, check_primitives, tiny_network_config, ComponentReport, FD_TOLERANCE};
use lshg_core::hourglass::{build_network, table1_presets, NetworkConfig, StackedHourglass};
use lshg_core::pipeline::train::batch_loss;
use lshg_core::pipeline::{make_synthetic_dataset, prepare_samples, train, Annotation, Joint, SampleConfig, TrainConfig};
use lshg_core::reconcile::{reconcile, PARAM_TOLERANCE};
use lshg_core::tensor::{NormMode, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

const C1_TOLERANCE: f64 = 0.20;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_TOLERANCE: f64 = 1e-4;
const C2_STEP: f64 = 1e-5;
const C2_NETWORK_ENTRIES: usize = 12;
const C2_BUDGET: Duration = Duration::from_secs(5 * 60);
const C3_BUDGET: Duration = Duration::from_secs(2 * 60);
const C4_SAMPLES: usize = 4;
const C4_STEPS: usize = 300;
const C4_LR: f64 = 5e-4;
const C4_LOSS_RATIO: f64 = 0.10;
const C4_PCKH: f64 = 100.0;
const C4_BUDGET: Duration = Duration::from_secs(15 * 60);
const C5_FIGURES: usize = 20;

/// Wall-clock budgets assume the criteria do not compete for cores.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the stderr handle directly so the line survives output capture.
fn report_line(n: u32, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---- criterion 1 ----------------------------------------------------------

fn criterion1_report() -> (bool, bool, String) {
    let r = reconcile().expect("every preset builds and passes the closed-form audit");
    (r.ordering_matches(), r.all_within_tolerance(), r.to_text())
}

#[test]
fn criterion_1_parameter_reconciliation() {
    let _serial = serial();
    assert_eq!(PARAM_TOLERANCE, C1_TOLERANCE);
    let start = Instant::now();
    let r = reconcile().expect("closed-form audit");
    let elapsed = start.elapsed();
    println!("{}", r.to_text());
    let outside: Vec<String> = r
        .rows
        .iter()
        .filter(|row| !row.within_tolerance())
        .map(|row| format!("{} {:+.1}%", row.name, 100.0 * row.best().deviation))
        .collect();
    let pass = r.ordering_matches() && outside.is_empty() && elapsed < C1_BUDGET && r.rows.len() == 10;
    report_line(
        1,
        pass,
        &format!(
            "(ordering {}, audit exact, {} of 10 outside ±{:.0}%: [{}], {:.2?})",
            if r.ordering_matches() { "matches" } else { "differs" },
            outside.len(),
            100.0 * C1_TOLERANCE,
            outside.join(", "),
            elapsed
        ),
    );
    assert!(r.ordering_matches(), "variant ordering differs from the published ordering");
    assert!(elapsed < C1_BUDGET);
    assert!(outside.is_empty(), "counts outside ±20% at the better width: {outside:?}");
}

// ---- criterion 2 ----------------------------------------------------------

fn criterion2_reports() -> Vec<ComponentReport> {
    assert_eq!((FD_TOLERANCE, lshg_core::gradcheck::FD_STEP), (C2_TOLERANCE, C2_STEP));
    let mut reports = check_primitives(SEED, None).unwrap();
    for v in Variant::ALL {
        reports.push(check_block(v, SEED, None).unwrap());
    }
    for v in Variant::ALL {
        let mut r = check_network(&tiny_network_config(v, false), SEED, C2_NETWORK_ENTRIES, None).unwrap();
        r.component = format!("{} ({v})", r.component);
        reports.push(r);
    }
    reports
}

#[test]
fn criterion_2_gradient_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let reports = criterion2_reports();
    let elapsed = start.elapsed();
    for r in &reports {
        println!("  {:<40} {:.3e} at {} ({} checked)", r.component, r.max_rel_error, r.worst, r.checked);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.passed(C2_TOLERANCE)) && elapsed < C2_BUDGET;
    report_line(
        2,
        pass,
        &format!("({} components, worst relative error {worst:.3e} < {C2_TOLERANCE:e}, {elapsed:.2?})", reports.len()),
    );
    assert!(pass);
}

// ---- criterion 3 ----------------------------------------------------------

/// Output shapes, innermost hourglass size, and whether each stack's loss
/// reaches the stem, for every preset.
fn criterion3_report() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut lines = Vec::new();
    for p in table1_presets() {
        let net = build_network::<f32>(&p.config, SEED).unwrap();
        let x = Tensor::random_uniform([1, 3, 256, 256], 0.0, 1.0, &mut rng);
        let outs = net.infer(&x).unwrap();
        let shapes: Vec<Shape> = outs.iter().map(Tensor::shape).collect();
        let node_shapes = net.graph().infer_shapes(x.shape()).unwrap();
        let innermost = node_shapes
            .iter()
            .zip(net.graph().nodes())
            .filter(|(_, n)| n.name.contains(".hourglass."))
            .map(|(s, _)| s.height.min(s.width))
            .min()
            .unwrap();
        let reach = stem_reach(&net, &x);
        lines.push(format!(
            "{} heads={} shapes={:?} innermost={innermost} stem_reach={reach:?}",
            p.name,
            outs.len(),
            shapes.iter().map(ToString::to_string).collect::<Vec<_>>()
        ));
        assert_eq!(outs.len(), p.config.num_stacks, "{}", p.name);
        assert!(shapes.iter().all(|s| *s == Shape::new(1, 16, 64, 64)), "{}", p.name);
        assert_eq!(innermost, 4, "{}", p.name);
        assert!(reach.iter().all(|&r| r), "{}", p.name);
    }
    lines
}

/// For each stack, whether a loss on that stack alone gives a nonzero
/// gradient on the stem convolution.
fn stem_reach(net: &StackedHourglass<f32>, x: &Tensor<f32>) -> Vec<bool> {
    let pass = net.forward(x, NormMode::Train).unwrap();
    let outs = pass.outputs();
    let stem = net.graph().param_id("stem.conv.weight").unwrap();
    (0..outs.len())
        .map(|k| {
            let grads: Vec<Option<Tensor<f32>>> = (0..outs.len())
                .map(|i| (i == k).then(|| Tensor::full(outs[i].shape(), 1e-3)))
                .collect();
            let g = net.graph().backward(&pass, &grads).unwrap();
            g.param(stem).is_some_and(|t| t.is_finite() && t.data().iter().any(|v| *v != 0.0))
        })
        .collect()
}

#[test]
fn criterion_3_shapes_and_supervision() {
    let _serial = serial();
    let start = Instant::now();
    let lines = criterion3_report();
    let elapsed = start.elapsed();
    for l in &lines {
        println!("  {l}");
    }
    let pass = elapsed < C3_BUDGET;
    report_line(3, pass, &format!("(10 presets: heads 1×16×64×64, innermost 4×4, every stack reaches the stem, {elapsed:.2?})"));
    assert!(pass, "took {elapsed:?}");
}

// ---- criterion 4 ----------------------------------------------------------

struct OverfitOutcome {
    initial_loss: f64,
    final_loss: f64,
    history_bits: Vec<u64>,
    pckh: PckhReport,
    checkpoint: Vec<u8>,
    elapsed: Duration,
}

fn overfit_run() -> OverfitOutcome {
    let start = Instant::now();
    let items = make_synthetic_dataset(C4_SAMPLES, SEED);
    let sample_config = SampleConfig::default();
    let samples = prepare_samples(&items, &sample_config).unwrap();
    let config = NetworkConfig::new(1, Variant::Dw1);
    let mut net = build_network::<f32>(&config, SEED).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let initial_loss = batch_loss(&net, &refs, NormMode::Train).unwrap();
    let train_config = TrainConfig {
        epochs: C4_STEPS,
        batch_size: C4_SAMPLES,
        lr: C4_LR,
        seed: SEED,
        augment: false,
        pad_last_batch: false,
    };
    let report = train(&mut net, &samples, &sample_config, &train_config, None).unwrap();
    assert_eq!(report.steps as usize, C4_STEPS);
    let final_loss = batch_loss(&net, &refs, NormMode::Train).unwrap();
    let decoded = predict_joints(&net, &samples, &sample_config, C4_SAMPLES, false).unwrap();
    let annotations: Vec<Annotation> = items.into_iter().map(|(_, a)| a).collect();
    let pckh = pckh(&coordinates(&decoded), &annotations, 0.5).unwrap();
    OverfitOutcome {
        initial_loss,
        final_loss,
        history_bits: report.history.iter().map(|r| r.mean_loss.to_bits()).collect(),
        pckh,
        checkpoint: checkpoint_bytes(&net),
        elapsed: start.elapsed(),
    }
}

fn first_overfit() -> &'static OverfitOutcome {
    static RUN: OnceLock<OverfitOutcome> = OnceLock::new();
    RUN.get_or_init(overfit_run)
}

#[test]
fn criterion_4_overfit_tiny_batch() {
    let _serial = serial();
    let o = first_overfit();
    let ratio = o.final_loss / o.initial_loss;
    println!("  loss {:.6e} -> {:.6e} (ratio {ratio:.4})", o.initial_loss, o.final_loss);
    print!("  {}", o.pckh.to_csv().replace('\n', "\n  "));
    println!();
    let pass = ratio <= C4_LOSS_RATIO && o.pckh.mean == C4_PCKH && o.pckh.joint_weighted_mean == C4_PCKH && o.elapsed < C4_BUDGET;
    report_line(
        4,
        pass,
        &format!(
            "(final/initial loss {ratio:.4} ≤ {C4_LOSS_RATIO}, PCKh@0.5 mean {:.2}, {:.2?})",
            o.pckh.mean, o.elapsed
        ),
    );
    assert!(ratio <= C4_LOSS_RATIO, "loss ratio {ratio}");
    assert_eq!(o.pckh.mean, C4_PCKH);
    assert_eq!(o.pckh.joint_weighted_mean, C4_PCKH);
    assert!(o.elapsed < C4_BUDGET);
}

// ---- criterion 5 ----------------------------------------------------------

/// Direct recount: per group, how many visible joints lie within half a head size.
fn recount(preds: &[Vec<[f64; 2]>], anns: &[Annotation]) -> Vec<(usize, usize)> {
    GROUPS
        .iter()
        .map(|(_, joints)| {
            let mut correct = 0;
            let mut total = 0;
            for (p, a) in preds.iter().zip(anns) {
                let [x1, y1, x2, y2] = a.head_box;
                let head = 0.6 * ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt();
                for &j in joints {
                    if !a.joints[j].visible {
                        continue;
                    }
                    total += 1;
                    let d = ((p[j][0] - a.joints[j].x).powi(2) + (p[j][1] - a.joints[j].y).powi(2)).sqrt();
                    if d <= 0.5 * head {
                        correct += 1;
                    }
                }
            }
            (correct, total)
        })
        .collect()
}

fn criterion5_report() -> Vec<String> {
    let mut lines = Vec::new();

    // perfect predictions
    let items = make_synthetic_dataset(C5_FIGURES, SEED);
    let anns: Vec<Annotation> = items.iter().map(|(_, a)| a.clone()).collect();
    let truth: Vec<Vec<[f64; 2]>> = anns.iter().map(|a| a.joints.iter().map(|j| [j.x, j.y]).collect()).collect();
    let perfect = pckh(&truth, &anns, 0.5).unwrap();
    assert!(perfect.groups.iter().all(|g| g.percent() == Some(100.0)));
    assert_eq!(perfect.mean, 100.0);
    lines.push(format!("perfect {}", perfect.csv_row()));

    // boundary: head size 10, errors just inside and just outside 5
    let side = 10.0 / 0.6 / 2f64.sqrt();
    let boundary = Annotation {
        image: String::new(),
        center: [50.0, 50.0],
        scale: 1.0,
        joints: vec![Joint::new(20.0, 20.0, true); 16],
        head_box: [0.0, 0.0, side, side],
    };
    assert!((boundary.head_size() - 10.0).abs() < 1e-12);
    for (err, expect) in [(4.9, 100.0), (5.1, 0.0)] {
        let preds = vec![vec![[20.0 + err, 20.0]; 16]];
        let r = pckh(&preds, std::slice::from_ref(&boundary), 0.5).unwrap();
        assert_eq!(r.mean, expect, "error {err}");
        lines.push(format!("boundary error {err}: {}", r.csv_row()));
    }

    // injected errors on 20 figures against a brute-force recount
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut anns_mixed = anns.clone();
    for a in &mut anns_mixed {
        for j in &mut a.joints {
            if rng.gen_bool(0.1) {
                j.visible = false;
            }
        }
    }
    let preds: Vec<Vec<[f64; 2]>> = anns_mixed
        .iter()
        .map(|a| {
            let head = a.head_size();
            a.joints
                .iter()
                .map(|j| {
                    let r = rng.gen_range(0.0..1.0) * head;
                    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    [j.x + r * t.cos(), j.y + r * t.sin()]
                })
                .collect()
        })
        .collect();
    let report = pckh(&preds, &anns_mixed, 0.5).unwrap();
    let expected = recount(&preds, &anns_mixed);
    for (g, (c, t)) in report.groups.iter().zip(&expected) {
        assert_eq!((g.correct, g.total), (*c, *t), "{}", g.name);
    }
    let mean = expected.iter().map(|(c, t)| 100.0 * *c as f64 / *t as f64).sum::<f64>() / 7.0;
    assert!((report.mean - mean).abs() < 1e-12);
    lines.push(format!("recount {}", report.csv_row()));
    lines
}

#[test]
fn criterion_5_metric_correctness() {
    let _serial = serial();
    let lines = criterion5_report();
    for l in &lines {
        println!("  {l}");
    }
    report_line(5, true, "(perfect = 100, 4.9/5.1 boundary at head size 10, 20-figure recount exact)");
}

// ---- criterion 6 ----------------------------------------------------------

#[test]
fn criterion_6_determinism() {
    let _serial = serial();
    let first = first_overfit();
    let second = overfit_run();
    let overfit_same = first.history_bits == second.history_bits
        && first.checkpoint == second.checkpoint
        && first.pckh == second.pckh
        && first.initial_loss.to_bits() == second.initial_loss.to_bits()
        && first.final_loss.to_bits() == second.final_loss.to_bits();
    let c1 = criterion1_report() == criterion1_report();
    let c2 = criterion2_reports() == criterion2_reports();
    let c3 = criterion3_report() == criterion3_report();
    let c5 = criterion5_report() == criterion5_report();
    let pass = overfit_same && c1 && c2 && c3 && c5;
    report_line(
        6,
        pass,
        &format!(
            "(reports identical: c1 {c1}, c2 {c2}, c3 {c3}, c4 {overfit_same}, c5 {c5}; checkpoints {} bytes bit-identical: {})",
            first.checkpoint.len(),
            first.checkpoint == second.checkpoint
        ),
    );
    assert!(pass);
}

// ---- criterion 7 ----------------------------------------------------------

#[test]
fn criterion_7_scope_and_mac_ordering() {
    let _serial = serial();
    println!(
        "  not reproduced at desk scale: published validation accuracy columns, training hours and \
         inference minutes need full MPII training on the original GPU setup"
    );
    let mut ok = true;
    for stacks in [1, 2] {
        for width in [128, 256] {
            let macs = |variant, reduced_stem| {
                let c = NetworkConfig {
                    num_stacks: stacks,
                    variant,
                    hg_channels: width,
                    reduced_stem,
                    ..Default::default()
                };
                lshg_core::hourglass::count_macs(&build_network::<f32>(&c, 0).unwrap()).unwrap()
            };
            let original = macs(Variant::Original, false);
            for (name, m) in [
                ("dw1", macs(Variant::Dw1, false)),
                ("dw3", macs(Variant::Dw3, false)),
                ("ghost", macs(Variant::Ghost, false)),
                ("ghost_reduced", macs(Variant::Ghost, true)),
            ] {
                println!("  {stacks} stack(s) @{width}: {name} {m} vs original {original}");
                ok &= m < original;
            }
        }
    }
    report_line(7, ok, "(lightweight variants use strictly fewer MACs than the original bottleneck)");
    assert!(ok);
}

//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Built with `harness = false` so the lines print without `--nocapture`.
//! `cargo test -p flowspect --test acceptance`

// index loops mirror the matrix and finite-difference formulas
#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use flowspect::config::parse_config;
use flowspect::dataset::{
    generate_synthetic_sequence, render_background, write_synthetic_corpus, Clutter, CorpusSpec, Label, ProductShape,
    SyntheticSceneSpec,
};
use flowspect::eval::{auroc, select_threshold, ScoredItem};
use flowspect::flow::{init_flow, train_flow, FlowModel, StaticFeatures, TrainSchedule};
use flowspect::image::Image;
use flowspect::mask::{apply_mask, composite_mask, shrink_and_pad, Mask};
use flowspect::motiongate::{run_gate, GateConfig};
use flowspect::pipeline::{run_pipeline, ReportFile, Stage, MODEL_FILE, REPORT_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
/// Name, time limit, check.
type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Option<Duration>, elapsed: Duration, outcome: Outcome) -> Outcome {
    let t = format!("{:.2}s", elapsed.as_secs_f64());
    match (outcome, limit) {
        (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; took {t}, limit {}s", l.as_secs())),
        (Ok(d), _) => Ok(format!("{d}; {t}")),
        (Err(d), _) => Err(format!("{d}; {t}")),
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Every parameter drawn at random, so the flow is far from the identity.
fn random_model(dim: usize, blocks: usize, hidden: usize, seed: u64) -> FlowModel {
    let mut m = init_flow(dim, blocks, hidden, 3.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    for p in m.params_mut() {
        *p = rng.gen_range(-0.5..0.5);
    }
    m
}

fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

fn identity_init() -> Outcome {
    let mut worst: f64 = 0.0;
    for (d, seed) in [(2, 1), (8, 2), (33, 3), (672, 4)] {
        let m = init_flow(d, 8, 16, 3.0, seed).map_err(|e| e.to_string())?;
        let zero = vec![0.0; d];
        let (z, logdet) = m.forward(&zero).map_err(|e| e.to_string())?;
        let ll = m.log_likelihood(&zero).map_err(|e| e.to_string())?;
        let want = -(d as f64 / 2.0) * (2.0 * PI).ln();
        worst = worst
            .max(logdet.abs())
            .max((ll - want).abs())
            .max(z.iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    check(worst <= 1e-9, format!("max deviation {worst:.3e} (tol 1e-9)"))
}

fn invertibility() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, d) in [2usize, 8, 32].into_iter().enumerate() {
        let m = random_model(d, 8, 2 * d, 100 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        for _ in 0..100 {
            let y: Vec<f64> = (0..d).map(|_| 2.0 * gauss(&mut rng)).collect();
            let (z, _) = m.forward(&y).map_err(|e| e.to_string())?;
            let back = m.inverse(&z).map_err(|e| e.to_string())?;
            worst = y.iter().zip(&back).fold(worst, |a, (p, q)| a.max((p - q).abs()));
        }
    }
    check(worst < 1e-6, format!("max roundtrip error {worst:.3e} (tol 1e-6)"))
}

fn logdet_vs_jacobian() -> Outcome {
    let (d, h) = (4, 1e-5);
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let m = random_model(d, 4, 8, 300 + k);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + k);
        let y: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let (_, analytic) = m.forward(&y).map_err(|e| e.to_string())?;
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut up = y.clone();
            let mut down = y.clone();
            up[j] += h;
            down[j] -= h;
            let (zu, _) = m.forward(&up).map_err(|e| e.to_string())?;
            let (zd, _) = m.forward(&down).map_err(|e| e.to_string())?;
            for i in 0..d {
                jac[i][j] = (zu[i] - zd[i]) / (2.0 * h);
            }
        }
        worst = worst.max((det(jac).abs().ln() - analytic).abs());
    }
    check(
        worst < 1e-4,
        format!("max |analytic - numeric| {worst:.3e} over 20 models (tol 1e-4)"),
    )
}

fn gradient_check() -> Outcome {
    let mut m = random_model(4, 2, 6, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let batch: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| gauss(&mut rng)).collect()).collect();
    let (_, grad) = m.gradient(&batch).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    let mut worst_tiny: f64 = 0.0;
    for i in 0..m.n_params() {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let (up, _) = m.gradient(&batch).map_err(|e| e.to_string())?;
        m.params_mut()[i] = orig - h;
        let (down, _) = m.gradient(&batch).map_err(|e| e.to_string())?;
        m.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(numeric.abs());
        // below this scale central differences carry no relative digits
        if scale > 1e-6 {
            worst_rel = worst_rel.max((grad[i] - numeric).abs() / scale);
        } else {
            worst_tiny = worst_tiny.max((grad[i] - numeric).abs());
        }
    }
    check(
        worst_rel < 1e-4 && worst_tiny < 1e-8,
        format!(
            "{} params, max relative error {worst_rel:.3e} (tol 1e-4), near-zero abs {worst_tiny:.1e}",
            m.n_params()
        ),
    )
}

fn synthetic_separation() -> Outcome {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut draw = |n: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| gauss(&mut rng) + shift).collect())
            .collect()
    };
    let train = draw(300, 0.0);
    let mut val: Vec<(Vec<f64>, Label)> = draw(50, 0.0).into_iter().map(|v| (v, Label::Good)).collect();
    val.extend(draw(50, 2.0).into_iter().map(|v| (v, Label::Defective)));
    // the true density bounds what any density model can reach on this set
    let exact: Vec<ScoredItem> = val
        .iter()
        .map(|(v, l)| ScoredItem::new("", 0, v.iter().map(|x| x * x).sum::<f64>(), *l))
        .collect();
    let ceiling = auroc(&exact).map_err(|e| e.to_string())?;
    let schedule = TrainSchedule {
        seed: 601,
        ..TrainSchedule::default()
    };
    let model = init_flow(d, 8, 16, 3.0, 602).map_err(|e| e.to_string())?;
    let (_, history) = train_flow(model, &mut StaticFeatures { train, val }, &schedule).map_err(|e| e.to_string())?;
    let last = history.last().map_or(0.0, |r| r.val_auroc);
    check(
        history.len() == 10 && last >= 0.95,
        format!(
            "{} checkpoints (want 10), final val AUROC {last:.4} (min 0.95, exact density {ceiling:.4})",
            history.len()
        ),
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> flowspect::config::PipelineConfig {
    let text = format!("dataset.root = data\noutput.dir = {name}\n{body}");
    fs::write(dir.join(format!("{name}.conf")), &text).unwrap();
    let mut cfg = parse_config(&text).unwrap();
    cfg.resolve_paths(dir);
    cfg
}

fn run_stages(cfg: &flowspect::config::PipelineConfig) -> Result<ReportFile, String> {
    for stage in [Stage::Scan, Stage::MaskBuild, Stage::Train, Stage::Eval] {
        run_pipeline(cfg, stage).map_err(|e| e.to_string())?;
    }
    let text = fs::read_to_string(cfg.output_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

const PIPELINE_BASE: &str = "seed = 1\ncameras = 1\nflow.hidden = 64\n";

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_synthetic_corpus(&dir.path().join("data"), &CorpusSpec::default()).map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), "out", PIPELINE_BASE);
    let r = run_stages(&cfg)?;
    check(
        r.auroc >= 0.90 && r.accuracy >= 0.80,
        format!(
            "test AUROC {:.4} (min 0.90), accuracy {:.3} (min 0.80) over {} items",
            r.auroc, r.accuracy, r.n_items
        ),
    )
}

/// Cone-shaped product whose box corners show belt, sparse distractors on the
/// belt below the localisation threshold, and faint small blotches.
fn cluttered_corpus() -> CorpusSpec {
    let base = CorpusSpec::default();
    let mut scene = base.scene;
    scene.shape = ProductShape::Trapezoid {
        top_width: 8,
        bottom_width: 44,
        height: 56,
    };
    scene.clutter = Some(Clutter {
        count: 4,
        min_size: 8,
        max_size: 20,
        contrast: 0.18,
    });
    CorpusSpec {
        scene,
        contrast: (0.03, 0.06),
        radius: (3.0, 4.0),
        seed: 4,
        ..base
    }
}

fn masking_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_synthetic_corpus(&dir.path().join("data"), &cluttered_corpus()).map_err(|e| e.to_string())?;
    let mut acc = Vec::new();
    for mode in ["masked", "cropped", "original"] {
        let body = format!("{PIPELINE_BASE}roi.threshold = 0.2\nmask.theta_f = 0.2\ninput.mode = {mode}\n");
        let cfg = write_config(dir.path(), mode, &body);
        acc.push(run_stages(&cfg)?.accuracy);
    }
    let pts = |a: f64| a * 100.0;
    check(
        pts(acc[0]) - pts(acc[1]) >= 2.0 && pts(acc[1]) - pts(acc[2]) >= 2.0,
        format!(
            "accuracy masked {:.1} / cropped {:.1} / original {:.1} (need >= 2-point steps)",
            pts(acc[0]),
            pts(acc[1]),
            pts(acc[2])
        ),
    )
}

fn random_scored(rng: &mut ChaCha8Rng) -> Vec<ScoredItem> {
    let n = rng.gen_range(2..40);
    // coarse grid so ties are common
    let levels = rng.gen_range(2..12);
    let mut items: Vec<ScoredItem> = (0..n)
        .map(|i| {
            let label = if rng.gen_bool(0.4) {
                Label::Defective
            } else {
                Label::Good
            };
            ScoredItem::new(format!("s{i}"), 0, rng.gen_range(0..levels) as f64 * 0.37 - 1.0, label)
        })
        .collect();
    items[0].label = Label::Good;
    items[1].label = Label::Defective;
    items
}

fn pairwise_auroc(items: &[ScoredItem]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in items.iter().filter(|i| i.label == Label::Defective) {
        for q in items.iter().filter(|i| i.label == Label::Good) {
            pairs += 1.0;
            wins += if p.score > q.score {
                1.0
            } else if p.score == q.score {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let items = random_scored(&mut rng);
        let a = auroc(&items).map_err(|e| e.to_string())?;
        worst = worst.max((a - pairwise_auroc(&items)).abs());
    }
    check(
        worst <= 1e-9,
        format!("max |trapezoid - pairwise| {worst:.3e} over 1000 sets (tol 1e-9)"),
    )
}

/// Every distinct score as a candidate; keep the smallest FPR with
/// TPR >= target, preferring the larger threshold on ties.
fn sweep_oracle(items: &[ScoredItem], target: f64) -> Option<(f64, f64, f64)> {
    let pos = items.iter().filter(|i| i.label == Label::Defective).count() as f64;
    let neg = items.len() as f64 - pos;
    let mut best: Option<(f64, f64, f64)> = None;
    for t in items.iter().map(|i| i.score) {
        let tp = items
            .iter()
            .filter(|i| i.label == Label::Defective && i.score >= t)
            .count() as f64;
        let fp = items.iter().filter(|i| i.label == Label::Good && i.score >= t).count() as f64;
        let (tpr, fpr) = (tp / pos, fp / neg);
        if tpr < target - 1e-12 {
            continue;
        }
        let better = match best {
            None => true,
            Some((bt, _, bf)) => fpr < bf || (fpr == bf && t > bt),
        };
        if better {
            best = Some((t, tpr, fpr));
        }
    }
    best
}

fn threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let items = random_scored(&mut rng);
        let target = [0.85, 0.5, 1.0, rng.gen_range(0.01..1.0)][rng.gen_range(0..4)];
        let got = select_threshold(&items, target).ok().map(|t| (t.value, t.tpr, t.fpr));
        if got != sweep_oracle(&items, target) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 1000 sets"))
}

fn mask_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut failures = Vec::new();
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let masks: Vec<Mask> = (0..rng.gen_range(1..6))
            .map(|_| {
                let p = rng.gen_range(0.0..1.0);
                let bits: Vec<u8> = (0..w * h).map(|_| u8::from(rng.gen_bool(p))).collect();
                Mask::from_values(w, h, &bits).unwrap()
            })
            .collect();
        let oracle: Vec<u8> = (0..w * h)
            .map(|i| u8::from(masks.iter().any(|m| m.values()[i] == 1)))
            .collect();
        if composite_mask(&masks).map_err(|e| e.to_string())?.values() != &oracle[..] {
            failures.push("composite != OR".to_string());
            break;
        }
    }

    let shrunk = shrink_and_pad(&Mask::ones(10, 10), 0.10).map_err(|e| e.to_string())?;
    let inner = (0..10).all(|y| (0..10).all(|x| shrunk.get(x, y) == (x < 9 && y < 9)));
    if shrunk.area() != 81 || !inner {
        failures.push(format!("shrink area {} (want 81 at top-left 9x9)", shrunk.area()));
    }

    for k in 0..50 {
        let img = Image::from_vec(12, 9, 3, (0..12 * 9 * 3).map(|_| rng.gen()).collect()).unwrap();
        let m = Mask::from_fn(12, 9, |x, y| (x * 7 + y * 3 + k) % 5 < 2);
        let once = apply_mask(&img, &m, 0.5).map_err(|e| e.to_string())?;
        let twice = apply_mask(&once, &m, 0.5).map_err(|e| e.to_string())?;
        if once != twice {
            failures.push("apply_mask not idempotent".into());
            break;
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "OR oracle on 200 sets, 10x10 shrink -> 81 px, idempotent apply".into()
        } else {
            failures.join("; ")
        },
    )
}

fn gate_single_fire() -> Outcome {
    let cfg = GateConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1100);
    let mut counts = Vec::new();
    for k in 0..50u64 {
        let spec = SyntheticSceneSpec {
            shape: ProductShape::Rectangle {
                width: rng.gen_range(24..48),
                height: rng.gen_range(30..60),
            },
            speed: rng.gen_range(3.0..8.0),
            start_x: rng.gen_range(-60.0..-45.0),
            top: rng.gen_range(10..50),
            ..SyntheticSceneSpec::default()
        };
        let n = ((spec.width as f64 + 60.0 + 48.0) / spec.speed).ceil() as usize + 4;
        let seq = generate_synthetic_sequence(&spec, n, 2000 + k).map_err(|e| e.to_string())?;
        let mut frames = vec![render_background(&spec, 3000 + k).map_err(|e| e.to_string())?];
        frames.extend(seq.frames.iter().map(|f| f.image.clone()));
        counts.push(run_gate(&frames, &cfg).map_err(|e| e.to_string())?.len());
    }
    let spec = SyntheticSceneSpec::default();
    let mut static_fires = 0;
    for k in 0..10u64 {
        let noisy: Vec<Image> = (0..60)
            .map(|i| render_background(&spec, 4000 + 100 * k + i).unwrap())
            .collect();
        static_fires += run_gate(&noisy, &cfg).map_err(|e| e.to_string())?.len();
        let frozen = vec![noisy[0].clone(); 60];
        static_fires += run_gate(&frozen, &cfg).map_err(|e| e.to_string())?.len();
    }
    let ones = counts.iter().filter(|&&c| c == 1).count();
    check(
        ones == 50 && static_fires == 0,
        format!("{ones}/50 transits fired exactly once, {static_fires} triggers on 20 static sequences"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = CorpusSpec {
        n_good: 120,
        n_defective: 30,
        ..CorpusSpec::default()
    };
    write_synthetic_corpus(&dir.path().join("data"), &corpus).map_err(|e| e.to_string())?;
    let body = format!(
        "{PIPELINE_BASE}split.train = 80\nsplit.val = 40\nsplit.test = 30\nflow.meta_epochs = 2\nflow.sub_epochs = 2\n"
    );
    let a = write_config(dir.path(), "a", &body);
    let b = write_config(dir.path(), "b", &body);
    run_stages(&a)?;
    run_stages(&b)?;
    let mut differing = Vec::new();
    for file in [MODEL_FILE, REPORT_FILE] {
        let read = |p: &Path| fs::read(p.join(file)).map_err(|e| e.to_string());
        if read(&a.output_dir)? != read(&b.output_dir)? {
            differing.push(file);
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{MODEL_FILE} and {REPORT_FILE} byte-identical across two runs")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria: [Criterion; 12] = [
        ("flow identity initialization", secs(1), identity_init),
        ("invertibility", secs(5), invertibility),
        ("log-det vs numeric Jacobian", secs(10), logdet_vs_jacobian),
        ("gradient check", secs(30), gradient_check),
        ("synthetic separation", secs(60), synthetic_separation),
        ("end-to-end synthetic run", secs(300), end_to_end),
        ("masking ablation direction", None, masking_ablation),
        ("AUROC oracle equivalence", secs(5), auroc_oracle),
        ("threshold-rule oracle", secs(5), threshold_oracle),
        ("mask algebra", None, mask_algebra),
        ("gate single-fire", secs(10), gate_single_fire),
        ("determinism", None, determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match within(*limit, start.elapsed(), outcome) {
            Ok(d) => println!("PASS {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria 5-7 train on the desk schedule below: n = 500 triplets,
//! B = 32, Adam at lr 0.01, 60 epochs, seeds 0, 1, 2.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intent_core::experiment::{cmd_generate, cmd_report, cmd_train, ExperimentSpec, Report, Variant};
use intent_core::gradcheck::{run_gradcheck, GradcheckConfig};
use intent_core::intervention::{
    counterfactual_raw, crop_window, forward_fft, inverse_fft_raw, mix_central_amplitude, MixParams,
};
use intent_core::objectives::{
    center_gram, cka_loss, diagonal_labels, gram, sod_loss, RewardOptions, SimilarityMatrix,
};
use intent_core::train::OptimizerKind;
use intent_core::Image;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let results = run_gradcheck(&GradcheckConfig::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}@B{}", r.term.name(), r.batch_size))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks (caco, robust, sod, total at B=2,3,4; Q=3, D=4), worst rel err {worst:.2e}, {secs:.1}s{}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    // Gram-Schmidt on a random square matrix
    let a = random_matrix(rng, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            v = &v - &(&qk * qk.dot(&a.column(j)));
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    // Box-Muller
    Array2::from_shape_fn((rows, cols), |_| {
        let (u, v): (f64, f64) = (1.0 - rng.gen::<f64>(), rng.gen());
        (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
    })
}

fn cka_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut self_max, mut rot_max, mut scale_max, mut sum_max) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut min_norm = f64::INFINITY;
    for _ in 0..500 {
        let f = normal_matrix(&mut rng, 3, 4);
        let g = normal_matrix(&mut rng, 3, 4);
        self_max = self_max.max(cka_loss(&[f.clone()], &[f.clone()]).unwrap().value);
        let r = random_orthogonal(&mut rng, 4);
        rot_max = rot_max.max(cka_loss(&[f.clone()], &[f.dot(&r)]).unwrap().value);
        for c in [0.1, 1.0, 10.0] {
            scale_max = scale_max.max(cka_loss(&[f.clone()], &[&f * c]).unwrap().value);
        }
        let v = cka_loss(&[f.clone()], &[g]).unwrap().value;
        lo = lo.min(v);
        hi = hi.max(v);
        let kc = center_gram(&gram(&f));
        min_norm = min_norm.min(kc.iter().map(|x| x * x).sum::<f64>().sqrt());
        for axis in [ndarray::Axis(0), ndarray::Axis(1)] {
            sum_max = sum_max.max(kc.sum_axis(axis).iter().fold(0.0, |m, s| m.max(s.abs())));
        }
    }
    let pass = self_max < 1e-6 && rot_max < 1e-6 && scale_max < 1e-6 && lo >= 0.0 && hi <= 1.0 + 1e-6 && sum_max < 1e-8;
    outcome(
        pass,
        format!(
            "500 normal 3x4 features: self {self_max:.1e}, rotation {rot_max:.1e}, scaling {scale_max:.1e}, \
             range [{lo:.3}, {hi:.3}], centered sums {sum_max:.1e}, min centered Gram norm {min_norm:.2}"
        ),
    )
}

/// Scalar loyalty loss with diagonal labels, written from the definitions.
fn scalar_sod(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for (i, row) in s.iter().enumerate() {
        let p_minus = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).fold(0.0, f64::max);
        let l = ((row[i] + (1.0 - p_minus)) / 2.0).clamp(1e-8, 1.0);
        total -= l.ln();
    }
    total / b as f64
}

fn loyalty_oracle() -> Outcome {
    let cases: [(&str, Vec<Vec<f64>>, f64); 3] = [
        ("identity", vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0),
        ("[[0.9,0.1],[0.2,0.8]]", vec![vec![0.9, 0.1], vec![0.2, 0.8]], 0.164_252_033_486_018),
        ("uniform", vec![vec![0.5, 0.5], vec![0.5, 0.5]], LN_2),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, rows, hand) in cases {
        let entries = Array2::from_shape_vec((2, 2), rows.concat()).unwrap();
        let s = SimilarityMatrix { entries, tau: 1.0 };
        let got = sod_loss(&s, &diagonal_labels(2), RewardOptions::default()).unwrap().value;
        let oracle = scalar_sod(&rows);
        let ok = (got - oracle).abs() < 1e-6 && (oracle - hand).abs() < 1e-6;
        pass &= ok;
        parts.push(format!("{name}: {got:.6}"));
    }
    outcome(pass, parts.join(", "))
}

/// Direct DFT phase of one channel plane at every bin, centered layout.
fn dft_phase_amplitude(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut phase = vec![0.0; h * w];
    let mut amp = vec![0.0; h * w];
    for ky in 0..h {
        for kx in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                    re += plane[y * w + x] * a.cos();
                    im += plane[y * w + x] * a.sin();
                }
            }
            let i = ((ky + h / 2) % h) * w + (kx + w / 2) % w;
            phase[i] = im.atan2(re);
            amp[i] = (re * re + im * im).sqrt();
        }
    }
    (phase, amp)
}

fn fft_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = 32;
    let (mut round_trip, mut identity, mut phase_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut locality_exact = true;
    for trial in 0..5 {
        let x_ref = random_image(&mut rng, side);
        let x_dist = random_image(&mut rng, side);
        let spec = forward_fft(&x_ref);
        let back = inverse_fft_raw(&spec.amplitude, &spec.phase).unwrap();
        round_trip = round_trip.max(back.iter().zip(x_ref.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let (same, _) = counterfactual_raw(&x_ref, &x_dist, &MixParams::new(0.0, 0.25)).unwrap();
        identity = identity.max(same.iter().zip(x_ref.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let params = MixParams::new(rng.gen_range(0.1..1.0), [0.25, 0.5, 0.1, 1.0, 0.3][trial]);
        let dist = forward_fft(&x_dist);
        let mixed = mix_central_amplitude(&spec.amplitude, &dist.amplitude, &params).unwrap();
        let win = crop_window(side, side, params.crop_ratio).unwrap();
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let inside = (win.row_start..win.row_start + win.side).contains(&y)
                        && (win.col_start..win.col_start + win.side).contains(&x);
                    if !inside && mixed.get(c, y, x).to_bits() != spec.amplitude.get(c, y, x).to_bits() {
                        locality_exact = false;
                    }
                }
            }
        }

        // phase of the unclamped reconstruction, by direct DFT
        let (raw, _) = counterfactual_raw(&x_ref, &x_dist, &params).unwrap();
        for c in 0..3 {
            let plane: Vec<f64> = (0..side * side).map(|i| raw[i * 3 + c]).collect();
            let (phase, amp) = dft_phase_amplitude(&plane, side, side);
            for (i, (p, a)) in phase.iter().zip(&amp).enumerate() {
                if *a > 1e-6 {
                    let expected = spec.phase.get(c, i / side, i % side);
                    let d = (p - expected).rem_euclid(2.0 * PI);
                    phase_err = phase_err.max(d.min(2.0 * PI - d));
                }
            }
        }
    }
    let pass = round_trip < 1e-4 && identity < 1e-4 && locality_exact && phase_err < 1e-3;
    outcome(
        pass,
        format!(
            "round trip {round_trip:.1e}, lambda=0 {identity:.1e}, locality {}, phase {phase_err:.1e}",
            if locality_exact { "bit-exact" } else { "DIFFERS" }
        ),
    )
}

fn desk_spec(dir: &Path, sigmas: Vec<f64>, variants: Vec<Variant>) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        output_dir: dir.to_path_buf(),
        noise_sweep: sigmas,
        seeds: vec![0, 1, 2],
        variants,
        ..Default::default()
    };
    spec.dataset.n_triplets = 500;
    spec.train.batch_size = 32;
    spec.train.epochs = 60;
    spec.train.optimizer = OptimizerKind::Adam;
    spec.train.learning_rate = 0.01;
    spec.train.evaluate_each_epoch = false;
    spec
}

fn mean_r1(report: &Report, sigma: f64, variant: Variant) -> f64 {
    report.row(sigma, variant).expect("cell present").stat(|s| s.metrics.r1).0
}

fn intervention_ordering(dir: &Path) -> (Outcome, Report) {
    let spec = desk_spec(dir, vec![0.2], vec![Variant::Full, Variant::IntPatchShuffle]);
    let started = Instant::now();
    cmd_generate(&spec).unwrap();
    cmd_train(&spec).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let report = cmd_report(dir).unwrap();
    let fft = mean_r1(&report, 0.2, Variant::Full);
    let shuffle = mean_r1(&report, 0.2, Variant::IntPatchShuffle);
    (
        outcome(
            fft >= shuffle && secs < 1800.0,
            format!("sigma=0.2 mean R@1 fft_mix {fft:.4} vs patch_shuffle {shuffle:.4}, {secs:.0}s"),
        ),
        report,
    )
}

fn robustness_ordering(report: &Report) -> Outcome {
    let r = |s, v| mean_r1(report, s, v);
    let full = r(0.5, Variant::Full);
    let both = r(0.5, Variant::WoBothReward);
    let vic = r(0.5, Variant::WoVic);
    let mut pass = full >= both && full >= vic;
    let mut parts = vec![format!("sigma=0.5 full {full:.4}, wo_both_reward {both:.4}, wo_vic {vic:.4}")];
    for v in [Variant::Full, Variant::WoBothReward, Variant::WoVic] {
        let (a, b, c) = (r(0.0, v), r(0.5, v), r(0.8, v));
        let mono = a >= b && b >= c;
        pass &= mono;
        parts.push(format!("{v} {a:.4}/{b:.4}/{c:.4}{}", if mono { "" } else { " not monotone" }));
    }
    outcome(pass, parts.join("; "))
}

fn loyalty_rank(report: &Report) -> (Outcome, String) {
    let row = report.row(0.5, Variant::Full).unwrap();
    let (sim, _) = row.stat(|s| s.mean_similarity_rank);
    let (loy, _) = row.stat(|s| s.mean_loyalty_rank);
    let (base_sim, _) = report.row(0.5, Variant::WoBothReward).unwrap().stat(|s| s.mean_similarity_rank);
    (
        outcome(loy <= sim, format!("full model at sigma=0.5: loyalty rank {loy:.3} vs similarity rank {sim:.3}")),
        format!("full loyalty rank {loy:.3} vs wo_both_reward similarity rank {base_sim:.3}"),
    )
}

fn files_under(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files_under(&p, out);
        } else {
            out.push(p);
        }
    }
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut spec = ExperimentSpec {
            output_dir: d.path().to_path_buf(),
            noise_sweep: vec![0.2],
            seeds: vec![7],
            variants: vec![Variant::Full, Variant::WoBothReward],
            ..Default::default()
        };
        spec.dataset.n_triplets = 64;
        spec.train.epochs = 2;
        spec.train.batch_size = 16;
        cmd_generate(&spec).unwrap();
        cmd_train(&spec).unwrap();
    }
    let mut files = Vec::new();
    files_under(&dirs[0].path().join("runs"), &mut files);
    let compared: Vec<_> = files
        .iter()
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv") | Some("bin")))
        .collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| {
            let other = dirs[1].path().join(p.strip_prefix(dirs[0].path()).unwrap());
            fs::read(p).unwrap() != fs::read(other).unwrap_or_default()
        })
        .map(|p| p.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && !compared.is_empty(),
        format!("{} CSV/checkpoint files compared, {} differ", compared.len(), differing.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut line = |id, name, o: Outcome| {
        println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    line(1, "gradient suite", gradient_suite());
    line(2, "CKA properties", cka_properties());
    line(3, "loyalty oracle", loyalty_oracle());
    line(4, "FFT fidelity", fft_fidelity());

    let dir = tempfile::tempdir().unwrap();
    let (c5, _) = intervention_ordering(dir.path());
    line(5, "intervention ordering", c5);
    let spec = desk_spec(dir.path(), vec![0.0, 0.5, 0.8], vec![Variant::Full, Variant::WoBothReward, Variant::WoVic]);
    cmd_generate(&spec).unwrap();
    cmd_train(&spec).unwrap();
    let report = cmd_report(dir.path()).unwrap();
    line(6, "robustness ordering", robustness_ordering(&report));
    let (c7, cross) = loyalty_rank(&report);
    line(7, "loyalty rank", c7);
    println!("note: cross-model at sigma=0.5: {cross}");
    line(8, "determinism", determinism());

    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

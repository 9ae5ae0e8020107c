//! Prints one PASS or FAIL line per acceptance criterion and exits non-zero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use node_adapter::classifier::{argmax_rows, class_probabilities, cosine_similarities, predict};
use node_adapter::dataset::{read_naeb_bytes, synth_generate, write_naeb_bytes, SyntheticSpec};
use node_adapter::eval::{ablation_reports, Variant};
use node_adapter::field::{FieldConfig, SupportContext, GradientField};
use node_adapter::gradcheck::{adjoint_suite, worst, GradcheckSpec};
use node_adapter::napm::{read_napm_bytes, write_napm_bytes};
use node_adapter::ode::{decay_problem_error, SolverConfig, SolverMethod};
use node_adapter::train::{train, TrainConfig};
use node_adapter::{Error, Matrix, Result};
use node_adapter_testbed::{benchmark_spec, seed_averaged_ablation, FieldFixture};

const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const ORDER_TOLERANCE: f64 = 0.3;
const ORDER_BUDGET: Duration = Duration::from_secs(5);
const PROPERTY_TOLERANCE: f64 = 1e-9;
const GAIN_POINTS: f64 = 0.015;
const GAIN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GAIN_BUDGET: Duration = Duration::from_secs(300);
const PARAMETER_RANGE: (usize, usize) = (1_500_000, 3_500_000);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn gradient_correctness() -> Result<Verdict> {
    let spec = GradcheckSpec {
        classes: 4,
        dim: 8,
        samples: 6,
        method: SolverMethod::Rk4,
        steps: 8,
        ..GradcheckSpec::default()
    };
    let start = Instant::now();
    let outcomes = adjoint_suite(&spec)?;
    let elapsed = start.elapsed();
    let w = worst(&outcomes).expect("adjoint suite is not empty");
    verdict(
        w.relative_error < GRADIENT_TOLERANCE && elapsed < GRADIENT_BUDGET,
        format!(
            "N=4 D=8 |S|=6 rk4/8: worst {w} over {} tensors, {:.1} s",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Expected global order of each method.
const ORDERS: [(SolverMethod, f64); 4] = [
    (SolverMethod::Euler, 1.0),
    (SolverMethod::Ab2, 2.0),
    (SolverMethod::Abm2, 2.0),
    (SolverMethod::Rk4, 4.0),
];

fn solver_orders() -> Result<Verdict> {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (method, want) in ORDERS {
        let order = (decay_problem_error(method, 16)? / decay_problem_error(method, 32)?).log2();
        pass &= (order - want).abs() <= ORDER_TOLERANCE;
        parts.push(format!("{} {order:.3}", method.name()));
    }
    let elapsed = start.elapsed();
    verdict(
        pass && elapsed < ORDER_BUDGET,
        format!("observed orders {} in {:.3} s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn solver_ranking() -> Result<Verdict> {
    let e = |m| decay_problem_error(m, 8);
    let (rk4, abm2, ab2, euler) = (e(SolverMethod::Rk4)?, e(SolverMethod::Abm2)?, e(SolverMethod::Ab2)?, e(SolverMethod::Euler)?);
    verdict(
        rk4 < abm2 && abm2 <= ab2 && ab2 < euler,
        format!("8-step errors rk4 {rk4:.2e} < abm2 {abm2:.2e} <= ab2 {ab2:.2e} < euler {euler:.2e}"),
    )
}

fn field_properties() -> Result<Verdict> {
    let spec = benchmark_spec(21);
    let fx = FieldFixture::new(&spec, 64)?;
    let field = fx.field();
    let samples = fx.support.samples();

    let reversed: Vec<usize> = (0..samples).rev().collect();
    let labels: Vec<usize> = synth_generate(&spec)?.support.labels().to_vec();
    let permuted_labels: Vec<usize> = reversed.iter().map(|&i| labels[i]).collect();
    let permuted = SupportContext::new(fx.support.features().gather_rows(&reversed), &permuted_labels, spec.classes)?;
    let t = 7.5;
    let base = field.evaluate(&fx.p, t)?;
    let perm_err = base.max_abs_diff(&GradientField::new(&fx.params, &permuted)?.evaluate(&fx.p, t)?)?;

    let w = field.stages(&fx.p, t)?.weights.value().clone();
    let mut sum_err: f64 = 0.0;
    for n in 0..spec.classes {
        for d in 0..spec.dim {
            let total: f64 = (0..samples).map(|i| w.get(n * samples + i, d)).sum();
            sum_err = sum_err.max((total - 1.0).abs());
        }
    }

    let cfg = FieldConfig::new(spec.dim, 64);
    let dt = 4.0;
    let ratio = field.evaluate(&fx.p, t + dt)?.frobenius_norm() / base.frobenius_norm();
    let decay_err = (ratio - (-cfg.decay_rate * dt / cfg.horizon).exp()).abs();

    verdict(
        perm_err < PROPERTY_TOLERANCE && sum_err < PROPERTY_TOLERANCE && decay_err < PROPERTY_TOLERANCE,
        format!("permutation {perm_err:.1e}, weight sums {sum_err:.1e}, decay ratio {decay_err:.1e}"),
    )
}

fn classifier_properties() -> Result<Verdict> {
    let split = synth_generate(&benchmark_spec(5))?;
    let features = split.query.features();
    let prototypes = node_adapter::prototype::class_means(&split.support)?;

    let probs = class_probabilities(features, &prototypes, 0.01)?;
    let sum_err = probs
        .row_iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let scaled = Matrix::from_fn(prototypes.rows(), prototypes.cols(), |r, c| {
        prototypes.get(r, c) * 10f64.powi(r as i32 % 7 - 3)
    });
    let invariant = predict(features, &prototypes)? == predict(features, &scaled)?;

    let tied = Matrix::from_rows(&[prototypes.row(2), prototypes.row(2), prototypes.row(0)]);
    let picks = predict(features, &tied)?;
    let first_wins = picks.iter().all(|&k| k != 1);
    let scores = cosine_similarities(features, &tied)?;
    let repeatable = argmax_rows(&scores) == picks && predict(features, &tied)? == picks;

    verdict(
        sum_err < PROPERTY_TOLERANCE && invariant && first_wins && repeatable,
        format!(
            "row sums {sum_err:.1e}, scaling invariant {invariant}, first index wins ties {first_wins}, repeatable {repeatable}"
        ),
    )
}

fn node_gain() -> Result<Verdict> {
    let cfg = TrainConfig {
        embed_dim: 64,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let means = seed_averaged_ablation(&GAIN_SEEDS, &cfg)?;
    let elapsed = start.elapsed();
    let acc = |v: Variant| means.iter().find(|(x, _)| *x == v).expect("every variant").1;
    let (tp, vp, fused, node) = (
        acc(Variant::Textual),
        acc(Variant::Visual),
        acc(Variant::Fused),
        acc(Variant::Refined),
    );
    let ordered = fused >= tp.max(vp);
    let gained = node >= fused + GAIN_POINTS;
    verdict(
        ordered && gained && elapsed < GAIN_BUDGET,
        format!(
            "5 seeds, d_e 64: TP {:.2} VP {:.2} TP+VP {:.2} TP+VP+NODE {:.2} (fusion ordering {ordered}, gain {:+.2} pts), {:.0} s",
            100.0 * tp,
            100.0 * vp,
            100.0 * fused,
            100.0 * node,
            100.0 * (node - fused),
            elapsed.as_secs_f64()
        ),
    )
}

fn small_run_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        embed_dim: 16,
        seed: 13,
        solver: SolverConfig::new(SolverMethod::Rk4, 6, 0.0, 30.0).expect("valid solver"),
        ..TrainConfig::default()
    }
}

fn pipeline(spec: &SyntheticSpec) -> Result<(Vec<Vec<u8>>, Vec<u8>, String)> {
    let split = synth_generate(spec)?;
    let files: Vec<Vec<u8>> = [&split.support, &split.query, &split.prompts].map(write_naeb_bytes).to_vec();
    let support = read_naeb_bytes(&files[0])?;
    let query = read_naeb_bytes(&files[1])?;
    let prompts = read_naeb_bytes(&files[2])?;
    let model = write_napm_bytes(&train(&support, &prompts, &small_run_config())?);
    let reports = ablation_reports(&read_napm_bytes(&model)?, &query)?;
    let text = reports.iter().map(|r| r.to_json()).collect::<Vec<_>>().join("\n");
    Ok((files, model, text))
}

fn determinism() -> Result<Verdict> {
    let spec = SyntheticSpec {
        classes: 4,
        dim: 8,
        shots: 4,
        queries_per_class: 5,
        prompts_per_class: 2,
        seed: 31,
        ..SyntheticSpec::default()
    };
    let a = pipeline(&spec)?;
    let b = pipeline(&spec)?;
    verdict(
        a == b,
        format!(
            "two synth+train+eval runs: embeddings equal {}, model ({} bytes) equal {}, reports equal {}",
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

fn format_offset(result: Result<impl Sized>) -> Option<u64> {
    match result {
        Err(Error::Format { offset, .. }) => Some(offset),
        _ => None,
    }
}

fn formats() -> Result<Verdict> {
    let split = synth_generate(&benchmark_spec(3))?;
    let naeb = write_naeb_bytes(&split.support);
    let back = read_naeb_bytes(&naeb)?;
    let quantized = split.support.features().map(|x| x as f32 as f64);
    let naeb_lossless = back.labels() == split.support.labels()
        && back.features().max_abs_diff(&quantized)? < 1e-7
        && write_naeb_bytes(&back) == naeb;

    let small = synth_generate(&SyntheticSpec {
        classes: 3,
        dim: 6,
        shots: 3,
        seed: 3,
        ..SyntheticSpec::default()
    })?;
    let model = train(&small.support, &small.prompts, &small_run_config())?;
    let napm = write_napm_bytes(&model);
    let napm_lossless = read_napm_bytes(&napm)? == model && write_napm_bytes(&read_napm_bytes(&napm)?) == napm;

    let mut cases = Vec::new();
    let mut bad = naeb.clone();
    bad[0] = b'X';
    cases.push(("naeb magic", format_offset(read_naeb_bytes(&bad)), Some(0)));
    let mut bad = naeb.clone();
    bad[4] = 2;
    cases.push(("naeb version", format_offset(read_naeb_bytes(&bad)), Some(4)));
    let truncated = format_offset(read_naeb_bytes(&naeb[..naeb.len() / 2]));
    cases.push(("naeb truncation", truncated.map(|_| 1), Some(1)));
    let mut bad = naeb.clone();
    bad[20..24].copy_from_slice(&99u32.to_le_bytes());
    cases.push(("naeb label", format_offset(read_naeb_bytes(&bad)), Some(20)));
    let mut bad = napm.clone();
    bad[0] = b'X';
    cases.push(("napm magic", format_offset(read_napm_bytes(&bad)), Some(0)));
    let mut bad = napm.clone();
    bad[4] = 7;
    cases.push(("napm version", format_offset(read_napm_bytes(&bad)), Some(4)));
    let truncated = format_offset(read_napm_bytes(&napm[..napm.len() - 3]));
    cases.push(("napm truncation", truncated.map(|_| 1), Some(1)));

    let failed: Vec<&str> = cases.iter().filter(|(_, got, want)| got != want).map(|(n, _, _)| *n).collect();
    verdict(
        naeb_lossless && napm_lossless && failed.is_empty(),
        format!(
            "NAEB lossless {naeb_lossless}, NAPM lossless {napm_lossless}, {} of {} corruptions rejected at the expected offset{}",
            cases.len() - failed.len(),
            cases.len(),
            if failed.is_empty() { String::new() } else { format!(" (wrong: {})", failed.join(", ")) }
        ),
    )
}

fn parameter_count() -> Result<Verdict> {
    let field = FieldConfig::new(1024, 1024).parameter_count();
    let total = field + 1024;
    verdict(
        (PARAMETER_RANGE.0..=PARAMETER_RANGE.1).contains(&total),
        format!(
            "D = d_e = 1024: field {field} + u 1024 = {total} ({:.2} M), accepted range [1.5 M, 3.5 M]",
            total as f64 / 1e6
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Verdict>); 9] = [
        ("gradient correctness", gradient_correctness),
        ("solver orders", solver_orders),
        ("solver ranking", solver_ranking),
        ("field properties", field_properties),
        ("classifier properties", classifier_properties),
        ("synthetic NODE gain", node_gain),
        ("determinism", determinism),
        ("format", formats),
        ("parameter count", parameter_count),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let (pass, detail) = match check() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

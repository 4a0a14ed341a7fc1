//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported but do not fail `cargo test` unless
//! `VQATTN_ACCEPTANCE_STRICT=1` is set.

use std::process::ExitCode;
use std::time::Instant;

use vqattn::bench::{fit_slopes, run_bench, AttnKind, BenchConfig};
use vqattn::verify::{
    causality, decode_cost_flat, decode_prefix_equivalence, distortion_study, encoder_factorization,
    finite_difference_gradients, linear_quadratic_equivalence, merge_associativity, no_nan_fuzz, reduction_agreement,
    smoke_corpus, smoke_run, straight_through_identity, CheckResult, SmokeRun,
};

struct Outcome {
    passed: bool,
    summary: String,
}

fn from_checks(checks: &[CheckResult], extra: &str) -> Outcome {
    let passed = checks.iter().all(|c| c.passed);
    let mut parts: Vec<String> = checks.iter().map(|c| format!("{}={:.3e}", c.name, c.value)).collect();
    if !extra.is_empty() {
        parts.push(extra.to_string());
    }
    Outcome {
        passed,
        summary: parts.join(", "),
    }
}

fn criterion_1() -> vqattn::Result<Outcome> {
    let t = Instant::now();
    let c = linear_quadratic_equivalence(11, 200, false)?;
    let secs = t.elapsed().as_secs_f64();
    let mut o = from_checks(&[c], &format!("{secs:.1}s (< 120s)"));
    o.passed &= secs < 120.0;
    Ok(o)
}

fn criterion_2() -> vqattn::Result<Outcome> {
    Ok(from_checks(&[encoder_factorization(12, 500, false)?], "tol 1e-12"))
}

fn criterion_3() -> vqattn::Result<Outcome> {
    Ok(from_checks(
        &[reduction_agreement(13, 300, false)?, merge_associativity(13, 300, false)?],
        "tol 1e-10 / 1e-12",
    ))
}

fn criterion_4() -> vqattn::Result<Outcome> {
    let fd = finite_difference_gradients(14, 20, false)?;
    let st = straight_through_identity(14, false)?;
    let extra = fd.detail.clone();
    Ok(from_checks(&[fd, st], &extra))
}

fn criterion_5() -> vqattn::Result<Outcome> {
    let (min, prop) = distortion_study(15, 100_000, false)?;
    let extra = format!("{}; {}", min.detail, prop.detail);
    Ok(from_checks(&[min, prop], &extra))
}

fn criterion_6() -> vqattn::Result<Outcome> {
    let t = Instant::now();
    let cfg = BenchConfig::default();
    let rows = run_bench(&cfg)?;
    let secs = t.elapsed().as_secs_f64();
    let slopes = fit_slopes(&rows);
    let slope = |k: AttnKind| {
        slopes
            .iter()
            .find(|(g, _)| g.starts_with(&format!("{k}/")))
            .map_or(f64::NAN, |(_, s)| *s)
    };
    let tput = |k: AttnKind| {
        rows.iter()
            .find(|r| r.kind == k && r.seq_len == 16384)
            .and_then(|r| r.tokens_per_s)
            .unwrap_or(f64::NAN)
    };
    let (full, vq) = (slope(AttnKind::Full), slope(AttnKind::Vq));
    let ratio = tput(AttnKind::Vq) / tput(AttnKind::Full);
    Ok(Outcome {
        passed: full >= 1.7 && vq <= 1.15 && ratio >= 3.0 && secs < 900.0,
        summary: format!(
            "full slope {full:.3} (>= 1.7), vq slope {vq:.3} (<= 1.15), throughput ratio at 16k {ratio:.1}x (>= 3), {secs:.0}s"
        ),
    })
}

fn criterion_7() -> vqattn::Result<Outcome> {
    let eq = decode_prefix_equivalence(17, false)?;
    let cost = decode_cost_flat(17, false)?;
    let extra = cost.detail.clone();
    Ok(from_checks(&[eq, cost], &extra))
}

fn criterion_8(run: &SmokeRun) -> Outcome {
    let n = run.ce.len();
    let first = run.ce.iter().position(|&c| c < 0.1);
    let tail = &run.ce[n.saturating_sub(10)..];
    let final_ce = tail.iter().sum::<f64>() / tail.len() as f64;
    let util = run.utilization[n.saturating_sub(10)..].iter().sum::<f64>() / tail.len() as f64;
    Outcome {
        passed: first.is_some() && final_ce < 0.1 && util > 0.5 && run.seconds < 300.0,
        summary: format!(
            "CE first < 0.1 at window {}, last-10 CE {final_ce:.4}, utilization {util:.2} (> 0.5), {:.1}s",
            first.map_or("never".into(), |i| (i + 1).to_string()),
            run.seconds
        ),
    }
}

fn criterion_9(runs: &[(usize, Vec<f64>)]) -> Outcome {
    let means: Vec<(usize, f64)> = runs
        .iter()
        .map(|(s, v)| (*s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let passed = means.windows(2).all(|w| w[1].1 <= w[0].1);
    let summary = means
        .iter()
        .map(|(s, m)| format!("S={s}: {m:.5}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        passed,
        summary: format!("mean validation CE over seeds 1-3, {summary}"),
    }
}

fn criterion_10() -> vqattn::Result<Outcome> {
    Ok(from_checks(&[no_nan_fuzz(20, 10_000, false)?, causality(20, 50, false)?], ""))
}

fn main() -> ExitCode {
    let strict = std::env::var("VQATTN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, vqattn::Result<Outcome>)> = Vec::new();
    let mut report = |i: usize, o: vqattn::Result<Outcome>| {
        match &o {
            Ok(o) => println!("criterion {i:>2}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.summary),
            Err(e) => println!("criterion {i:>2}: FAIL error: {e}"),
        }
        results.push((i, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());

    let text = smoke_corpus();
    let mut trend: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut smoke: Option<vqattn::Result<SmokeRun>> = None;
    let mut trend_err = None;
    for s in [4, 16, 64] {
        let mut vals = Vec::new();
        for seed in 1..=3 {
            match smoke_run(&text, s, seed, 500) {
                Ok(run) => {
                    vals.push(run.val_ce);
                    if s == 16 && seed == 1 {
                        smoke = Some(Ok(run));
                    }
                }
                Err(e) => trend_err = Some(e),
            }
        }
        trend.push((s, vals));
    }
    report(8, smoke.unwrap_or_else(|| Err(vqattn::Error::InvalidArgument("smoke run failed".into()))).map(|r| criterion_8(&r)));
    report(9, match trend_err {
        Some(e) => Err(e),
        None => Ok(criterion_9(&trend)),
    });
    report(10, criterion_10());

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, o)| !matches!(o, Ok(o) if o.passed))
        .map(|(i, _)| *i)
        .collect();
    println!("acceptance: {} of 10 criteria passed", 10 - failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if strict {
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}

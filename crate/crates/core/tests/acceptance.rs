//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use spidereval::attribution::paired_one_sided_t;
use spidereval::curvefit::{fit_curve, levenberg_marquardt, CurveForm};
use spidereval::error_analysis::{bh_fdr, dunn_posthoc, epsilon_squared, kruskal_wallis};
use spidereval::harness::{run_nested_cv, PredictionSet, PredictorSpec};
use spidereval::metrics::metric_report;
use spidereval::partition::{
    image_group_means, leakage_audit, make_cv_plan, split_participants, ImageTarget, ImageTargets,
};
use spidereval::reliability::{bootstrap_icc, icc2k, wilson_ci, MissingMode, RatingMatrix};
use spidereval::special::{chi2_sf, student_t_sf};
use spidereval::synth::{generate, SynthSpec};

type Check = std::result::Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// Omnibus rows: (criterion, H, epsilon_sq, printed p or None when "<0.001",
// printed FDR p or None when "<0.001", k). N = 313 throughout.
type OmnibusRow = (&'static str, f64, f64, Option<f64>, Option<f64>, usize);

const N_IMAGES: usize = 313;

const RESNET: [OmnibusRow; 11] = [
    ("spider in picture", 14.856451, 0.041472, None, Some(0.002179), 3),
    ("cobweb in picture", 2.266214, 0.004071, Some(0.132223), Some(0.132223), 2),
    ("number of spiders", 7.701195, 0.018391, Some(0.021267), Some(0.030762), 3),
    ("subjective distance", 24.348922, 0.072093, None, None, 3),
    ("environment", 10.694930, 0.024903, Some(0.013495), Some(0.024741), 4),
    ("texture", 20.156262, 0.058569, None, None, 3),
    ("eyes", 9.217141, 0.023281, Some(0.009966), Some(0.021925), 3),
    ("eating prey", 7.544071, 0.017884, Some(0.023005), Some(0.030762), 3),
    ("subjective size", 8.865665, 0.018983, Some(0.031131), Some(0.034244), 4),
    ("perspective", 7.364286, 0.017304, Some(0.025169), Some(0.030762), 3),
    ("prominent legs", 11.139163, 0.029481, Some(0.003812), Some(0.010483), 3),
];

const CONVNEXT: [OmnibusRow; 11] = [
    ("spider in picture", 16.875966, 0.047987, None, Some(0.002381), 3),
    ("cobweb in picture", 5.305815, 0.013845, Some(0.021254), Some(0.058449), 2),
    ("number of spiders", 1.863228, -0.000441, Some(0.393918), Some(0.443001), 3),
    ("subjective distance", 8.870872, 0.022164, Some(0.011850), Some(0.043450), 3),
    ("environment", 5.950549, 0.009549, Some(0.114041), Some(0.228165), 4),
    ("texture", 11.987920, 0.032219, Some(0.002494), Some(0.013716), 3),
    ("eyes", 1.818986, -0.000584, Some(0.402728), Some(0.443001), 3),
    ("eating prey", 2.025816, 0.000083, Some(0.363161), Some(0.443001), 3),
    ("subjective size", 5.749517, 0.008898, Some(0.124453), Some(0.228165), 4),
    ("perspective", 1.002696, -0.003217, Some(0.605714), Some(0.605714), 3),
    ("prominent legs", 3.519886, 0.004903, Some(0.172055), Some(0.270372), 3),
];

const SWIN: [OmnibusRow; 11] = [
    ("spider in picture", 8.331621, 0.020425, Some(0.015517), Some(0.042672), 3),
    ("cobweb in picture", 1.602056, 0.001936, Some(0.205612), Some(0.426399), 2),
    ("number of spiders", 2.009514, 0.000031, Some(0.366134), Some(0.426399), 3),
    ("subjective distance", 13.635838, 0.037535, Some(0.001094), Some(0.012034), 3),
    ("environment", 13.317557, 0.033390, Some(0.003998), Some(0.021988), 4),
    ("texture", 9.057860, 0.022767, Some(0.010792), Some(0.039571), 3),
    ("eyes", 2.133431, 0.000430, Some(0.344137), Some(0.426399), 3),
    ("eating prey", 1.895380, -0.000337, Some(0.387635), Some(0.426399), 3),
    ("subjective size", 2.642438, -0.001157, Some(0.450098), Some(0.450098), 4),
    ("perspective", 2.625970, 0.002019, Some(0.269016), Some(0.426399), 3),
    ("prominent legs", 2.037780, 0.000122, Some(0.360995), Some(0.426399), 3),
];

// ResNet descriptives: (n, freq, share, delta).
const DESCRIPTIVES: [(usize, f64, f64, f64); 14] = [
    (258, 0.824281, 0.760021, -0.064261),
    (26, 0.083067, 0.123855, 0.040788),
    (29, 0.092652, 0.116125, 0.023473),
    (198, 0.632588, 0.658526, 0.025938),
    (115, 0.367412, 0.341474, -0.025938),
    (259, 0.827476, 0.804528, -0.022948),
    (25, 0.079872, 0.079347, -0.000525),
    (223, 0.712460, 0.629426, -0.083034),
    (59, 0.188498, 0.248797, 0.060298),
    (162, 0.517572, 0.463176, -0.054396),
    (145, 0.463259, 0.395916, -0.067343),
    (304, 0.971246, 0.967779, -0.003467),
    (9, 0.028754, 0.032221, 0.003467),
    (151, 0.482428, 0.437338, -0.045090),
];

fn formula_cross_checks() -> Check {
    let tol = 1e-5;
    let mut eps_rows = 0;
    let mut fdr_rows = 0;
    for table in [&RESNET, &CONVNEXT, &SWIN] {
        let mut raw = Vec::new();
        for &(name, h, eps, p, _, k) in table.iter() {
            let got = epsilon_squared(h, N_IMAGES, k).map_err(|e| e.to_string())?;
            ensure((got - eps).abs() < tol, || format!("epsilon_sq {name}: {got} vs {eps}"))?;
            eps_rows += 1;
            // The printed p is used where given; "<0.001" rows are recomputed from H.
            let computed = chi2_sf(h, (k - 1) as f64);
            if let Some(p) = p {
                ensure((computed - p).abs() < tol, || format!("p {name}: {computed} vs {p}"))?;
            }
            raw.push(p.unwrap_or(computed));
        }
        let adj = bh_fdr(&raw).map_err(|e| e.to_string())?;
        for (&(name, .., fdr, _), got) in table.iter().zip(&adj) {
            if let Some(fdr) = fdr {
                ensure((got - fdr).abs() < tol, || format!("FDR {name}: {got} vs {fdr}"))?;
                fdr_rows += 1;
            } else {
                ensure(*got < 0.001, || format!("FDR {name}: {got} printed as <0.001"))?;
            }
        }
    }
    for &(n, freq, share, delta) in &DESCRIPTIVES {
        let f = n as f64 / N_IMAGES as f64;
        ensure((f - freq).abs() < tol, || format!("freq n={n}: {f} vs {freq}"))?;
        ensure((share - f - delta).abs() < tol, || format!("delta n={n}: {} vs {delta}", share - f))?;
    }
    Ok(format!(
        "{eps_rows} epsilon_sq rows, {fdr_rows} FDR rows, {} descriptives rows within 1e-5",
        DESCRIPTIVES.len()
    ))
}

const SIZES: [f64; 7] = [50.0, 75.0, 100.0, 150.0, 200.0, 250.0, 313.0];

// (model, metric, empirical points, printed (a, b, c)).
const CURVES: [(&str, &str, [f64; 7], [f64; 3]); 9] = [
    ("ResNet", "R2", [0.132, 0.307, 0.359, 0.438, 0.456, 0.492, 0.503], [0.998, 0.021, -0.508]),
    ("ConvNeXtV2", "R2", [0.238, 0.380, 0.414, 0.479, 0.508, 0.557, 0.563], [0.658, 0.015, -0.099]),
    ("Swin", "R2", [0.205, 0.397, 0.470, 0.495, 0.535, 0.549, 0.565], [1.471, 0.030, -0.927]),
    ("ResNet", "MAE", [13.533, 12.923, 12.101, 11.562, 11.360, 11.336, 11.025], [5.461, 0.016, 11.093]),
    ("ConvNeXtV2", "MAE", [12.844, 12.395, 11.754, 11.026, 10.598, 10.415, 10.426], [4.865, 0.011, 10.188]),
    ("Swin", "MAE", [13.167, 12.241, 11.431, 10.754, 10.595, 10.584, 10.327], [7.185, 0.019, 10.398]),
    ("ResNet", "RMSE", [17.804, 16.394, 15.544, 14.505, 14.289, 14.208, 14.067], [9.859, 0.019, 14.066]),
    ("ConvNeXtV2", "RMSE", [16.722, 15.502, 14.905, 13.966, 13.590, 13.278, 13.191], [7.313, 0.014, 13.120]),
    ("Swin", "RMSE", [17.269, 15.764, 14.650, 14.029, 13.600, 13.438, 13.163], [10.284, 0.019, 13.299]),
];

fn learning_curve_refits() -> Check {
    let mut worst: f64 = 0.0;
    for (model, metric, ys, expected) in CURVES {
        let (form, tol) = if metric == "R2" { (CurveForm::Rise, 0.10) } else { (CurveForm::Decay, 0.05) };
        let pts: Vec<(f64, f64)> = SIZES.iter().copied().zip(ys).collect();
        let fit = fit_curve(form, &pts).map_err(|e| format!("{model} {metric}: {e}"))?;
        for (i, (got, want)) in fit.params.iter().zip(expected).enumerate() {
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel / tol);
            ensure(rel <= tol, || {
                format!("{model} {metric} param {i}: {got:.4} vs {want} (rel {rel:.3} > {tol})")
            })?;
        }
    }
    Ok(format!("9 triples within band; worst parameter at {:.0}% of its tolerance", worst * 100.0))
}

fn wilson_intervals() -> Check {
    let round3 = |v: f64| (v * 1000.0).round() / 1000.0;
    for (s, n, lo, hi) in [(419, 500, 0.803, 0.868), (65, 500, 0.103, 0.162)] {
        let ci = wilson_ci(s, n, 0.95).map_err(|e| e.to_string())?;
        ensure(round3(ci.low) == lo && round3(ci.high) == hi, || {
            format!("{s}/{n}: ({:.4}, {:.4}) vs ({lo}, {hi})", ci.low, ci.high)
        })?;
    }
    Ok("419/500 -> (0.803, 0.868), 65/500 -> (0.103, 0.162)".into())
}

fn synth_matrix(n_images: usize, n_raters: usize, seed: u64) -> std::result::Result<(RatingMatrix, f64), String> {
    let spec = SynthSpec {
        n_images,
        n_raters,
        var_image: 100.0,
        var_rater: 25.0,
        var_residual: 25.0,
        categories: false,
        seed,
        ..SynthSpec::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let m = RatingMatrix::from_table(&data.ratings).map_err(|e| e.to_string())?;
    let sample_var = |v: Vec<f64>| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let vi = sample_var(data.truth.image_effects.values().copied().collect());
    let vr = sample_var(data.truth.rater_effects.values().copied().collect());
    let realized = vi / (vi + (vr + spec.var_residual) / n_raters as f64);
    Ok((m, realized))
}

const ICC_REPLICATES: usize = 40;

// A single 300 x 5 matrix estimates the rater variance from five draws, so its
// ICC scatters around the population value with sd near 0.03. The population
// value is checked against the mean over independent matrices; each matrix is
// checked against the value implied by its own realized components.
fn icc_oracle() -> Check {
    let mut parts = Vec::new();
    for k in [5, 10, 20] {
        let want = 100.0 / (100.0 + 50.0 / k as f64);
        let mut sum = 0.0;
        let mut single_hits = 0;
        for r in 0..ICC_REPLICATES {
            let (m, realized) = synth_matrix(300, k, 1000 * k as u64 + r as u64)?;
            let got = icc2k(&m, MissingMode::Impute).map_err(|e| e.to_string())?;
            ensure((got - realized).abs() < 0.02, || {
                format!("k={k} replicate {r}: ICC {got:.4} vs realized-component value {realized:.4}")
            })?;
            sum += got;
            single_hits += usize::from((got - want).abs() < 0.02);
        }
        let mean = sum / ICC_REPLICATES as f64;
        ensure((mean - want).abs() < 0.02, || format!("k={k}: mean ICC {mean:.4} vs analytic {want:.4}"))?;
        parts.push(format!(
            "k={k} mean {mean:.3} vs {want:.3} (single draws within 0.02: {single_hits}/{ICC_REPLICATES})"
        ));
    }
    let (m, _) = synth_matrix(300, 80, 7)?;
    let sizes = [10, 20, 30, 40, 50, 60, 70, 80];
    let report = bootstrap_icc(&m, &sizes, 100, 11, MissingMode::Impute).map_err(|e| e.to_string())?;
    let means: Vec<f64> = report.sizes.iter().map(|s| s.mean).collect();
    ensure(report.monotone && means.windows(2).all(|w| w[1] >= w[0]), || {
        format!("bootstrap means not monotone: {means:?}")
    })?;
    Ok(format!(
        "{}; every matrix within 0.02 of its realized components; bootstrap means monotone over {} sizes; \
         the 0.971 at 80 raters needs the original ratings file (not supplied)",
        parts.join(", "),
        sizes.len()
    ))
}

fn harness_properties() -> Check {
    let spec = SynthSpec {
        n_images: 313,
        feature_dim: 16,
        var_residual: 25.0,
        categories: false,
        seed: 5,
        ..SynthSpec::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let participants: Vec<&str> = data.ratings.participants().into_iter().collect();
    let split = split_participants(&participants, 5).map_err(|e| e.to_string())?;
    let (targets, dropped) = image_group_means(&data.ratings, &split);
    ensure(dropped.is_empty(), || format!("{} images dropped", dropped.len()))?;
    let ids: Vec<&String> = targets.keys().collect();
    let plan = make_cv_plan(&ids, 5).map_err(|e| e.to_string())?;
    let audit = leakage_audit(&plan, &split, &targets);
    ensure(audit.passed(), || format!("leakage violations: {:?}", audit.violations))?;
    let out = run_nested_cv(&plan, &targets, &data.features, &PredictorSpec::ridge_default(), 10, 5)
        .map_err(|e| e.to_string())?;
    let mut per_image: BTreeMap<&str, usize> = BTreeMap::new();
    for e in out.predictions.entries() {
        *per_image.entry(e.image_id.as_str()).or_default() += 1;
    }
    ensure(per_image.len() == 313 && per_image.values().all(|&c| c == 5), || {
        "some image does not have exactly 5 held-out predictions".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let n = rng.random_range(5..40);
        let reps = rng.random_range(2..7);
        let targets: ImageTargets = (0..n)
            .map(|i| {
                let t = rng.random_range(0.0..100.0);
                (format!("i{i}"), ImageTarget { mean_a: t, mean_b: t, n_a: 1, n_b: 1 })
            })
            .collect();
        let raw = (0..reps).flat_map(|r| (0..n).map(move |i| (r, i % 5, format!("i{i}")))).map(|(r, f, id)| {
            let spread = rng.random_range(1.0..60.0);
            (r, f, id, 50.0 + rng.random_range(-spread..spread))
        });
        let ps = PredictionSet::from_raw(raw.collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let report = metric_report(&ps, &targets).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(report.ensemble.mae <= report.repetitions.mean.mae + 1e-12, || {
            format!("trial {trial}: ensemble MAE {} > mean {}", report.ensemble.mae, report.repetitions.mean.mae)
        })?;
    }
    Ok(format!(
        "0 leakage violations over {} folds, 5 predictions x 313 images, ensemble MAE <= mean MAE on 100 sets",
        audit.checked_folds
    ))
}

/// Average ranks by direct pairwise comparison.
fn brute_ranks(all: &[f64]) -> Vec<f64> {
    all.iter()
        .map(|&v| {
            let less = all.iter().filter(|&&w| w < v).count() as f64;
            let equal = all.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_tie_term(all: &[f64]) -> f64 {
    let mut seen = Vec::new();
    let mut t = 0.0;
    for &v in all {
        if !seen.contains(&v) {
            seen.push(v);
            let c = all.iter().filter(|&&w| w == v).count() as f64;
            t += c * c * c - c;
        }
    }
    t
}

fn statistics_oracles() -> Check {
    let canonical = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
    let kw = kruskal_wallis(&canonical, true).map_err(|e| e.to_string())?;
    ensure((kw.h - 7.2).abs() < 1e-12, || format!("canonical H {}", kw.h))?;

    let t = paired_one_sided_t(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    ensure((t.t - 3.4641).abs() < 1e-4 && (t.one_sided_p - 0.0371).abs() < 1e-4 && (t.cohen_d - 2.0).abs() < 1e-12, || {
        format!("paired t: t={} p={} d={}", t.t, t.one_sided_p, t.cohen_d)
    })?;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..50 {
        let k = rng.random_range(2..5);
        let groups: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..rng.random_range(2..8)).map(|_| rng.random_range(0..6) as f64).collect())
            .collect();
        let all: Vec<f64> = groups.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let ranks = brute_ranks(&all);
        let mut offset = 0;
        let mut mean_ranks = Vec::new();
        let mut h = 0.0;
        for g in &groups {
            let r: f64 = ranks[offset..offset + g.len()].iter().sum();
            offset += g.len();
            h += r * r / g.len() as f64;
            mean_ranks.push(r / g.len() as f64);
        }
        h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
        let tie = brute_tie_term(&all);
        let correction = 1.0 - tie / (n * n * n - n);
        if correction <= 0.0 {
            continue;
        }
        h /= correction;
        let kw = kruskal_wallis(&groups, true).map_err(|e| format!("case {case}: {e}"))?;
        let p = ChiSquared::new((k - 1) as f64).unwrap().sf(h);
        ensure((kw.h - h).abs() < 1e-9 && (kw.p - p).abs() < 1e-9, || {
            format!("case {case}: KW H {} vs {h}, p {} vs {p}", kw.h, kw.p)
        })?;

        let labelled: Vec<(String, Vec<f64>)> =
            groups.iter().enumerate().map(|(i, g)| (format!("g{i}"), g.clone())).collect();
        let pairs = dunn_posthoc(&labelled, true).map_err(|e| format!("case {case}: {e}"))?;
        let variance = n * (n + 1.0) / 12.0 - tie / (12.0 * (n - 1.0));
        let mut expected = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                let se = (variance * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64)).sqrt();
                let z = (mean_ranks[a] - mean_ranks[b]) / se;
                expected.push((z, 2.0 * normal.sf(z.abs())));
            }
        }
        ensure(pairs.len() == expected.len(), || format!("case {case}: pair count"))?;
        for (got, (z, p)) in pairs.iter().zip(&expected) {
            ensure((got.z - z).abs() < 1e-9 && (got.p - p).abs() < 1e-9, || {
                format!("case {case}: Dunn {}-{} z {} vs {z}, p {} vs {p}", got.group_a, got.group_b, got.z, got.p)
            })?;
        }
    }
    Ok("KW H=7.2, paired t=3.4641 p=0.0371 d=2, KW/Dunn equal brute force on 50 datasets".into())
}

/// erf by its Maclaurin series; accurate to ~1e-14 for |x| <= 3.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Upper chi-square tail for integer df by the finite closed-form series.
fn chi2_sf_series(x: f64, df: u32) -> f64 {
    let h = x / 2.0;
    if df % 2 == 0 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for i in 1..df / 2 {
            term *= h / i as f64;
            sum += term;
        }
        (-h).exp() * sum
    } else {
        let mut sum = 1.0 - erf_series(h.sqrt());
        let mut term = (h / std::f64::consts::PI).sqrt() * (-h).exp() * 2.0;
        for i in 0..(df - 1) / 2 {
            if i > 0 {
                term *= h / (i as f64 + 0.5);
            }
            sum += term;
        }
        sum
    }
}

/// Upper Student-t tail for integer df via the finite trigonometric series.
fn t_sf_series(t: f64, df: u32) -> f64 {
    let theta = (t / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let c2 = c * c;
    let a = if df % 2 == 1 {
        let mut inner = 0.0;
        if df > 1 {
            let mut term = 1.0;
            inner = 1.0;
            let mut j = 2;
            while j < df - 1 {
                term *= j as f64 / (j + 1) as f64 * c2;
                inner += term;
                j += 2;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * c * inner)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut j = 1;
        while j < df - 1 {
            term *= j as f64 / (j + 1) as f64 * c2;
            sum += term;
            j += 2;
        }
        s * sum
    };
    (1.0 - a) / 2.0
}

fn numerical_kernels() -> Check {
    let mut worst_jac: f64 = 0.0;
    for form in [CurveForm::Decay, CurveForm::Rise] {
        for p in [[5.0, 0.016, 11.0], [1.0, 0.02, -0.5], [10.0, 0.005, 13.0]] {
            for n in [50.0, 100.0, 313.0] {
                let j = form.jacobian(p, n);
                for i in 0..3 {
                    let h = 1e-6 * p[i].abs().max(1e-3);
                    let mut up = p;
                    let mut dn = p;
                    up[i] += h;
                    dn[i] -= h;
                    let fd = (form.eval(up, n) - form.eval(dn, n)) / (2.0 * h);
                    let rel = (j[i] - fd).abs() / fd.abs().max(1e-12);
                    worst_jac = worst_jac.max(rel);
                }
            }
        }
    }
    ensure(worst_jac < 1e-4, || format!("Jacobian rel err {worst_jac:e}"))?;
    let pts: Vec<(f64, f64)> = SIZES.iter().copied().zip(CURVES[3].2).collect();
    let fit = levenberg_marquardt(CurveForm::Decay, &pts, [5.0, 0.02, 11.0]).map_err(|e| e.to_string())?;
    ensure(fit.converged, || "LM did not converge on the ResNet MAE points".into())?;

    let mut worst_tail: f64 = 0.0;
    for df in 1..=8u32 {
        let reference = ChiSquared::new(df as f64).unwrap();
        for x in [0.1, 0.5, 1.0, 2.0, 3.84, 5.0, 7.2, 10.0, 14.86, 24.35] {
            let got = chi2_sf(x, df as f64);
            let err = (got - chi2_sf_series(x, df)).abs();
            worst_tail = worst_tail.max(err);
            ensure(err < 1e-10, || format!("chi2_sf({x}, {df}) = {got:e}, series {:e}", chi2_sf_series(x, df)))?;
            ensure((got - reference.sf(x)).abs() < 1e-9, || format!("chi2_sf({x}, {df}) vs statrs"))?;
        }
        let reference = StudentsT::new(0.0, 1.0, df as f64).unwrap();
        for t in [0.0, 0.5, 1.0, 1.96, 2.5, 3.4641, 5.0, 10.0] {
            let got = student_t_sf(t, df as f64);
            let err = (got - t_sf_series(t, df)).abs();
            worst_tail = worst_tail.max(err);
            ensure(err < 1e-10, || format!("t_sf({t}, {df}) = {got:e}, series {:e}", t_sf_series(t, df)))?;
            ensure((got - reference.sf(t)).abs() < 1e-9, || format!("t_sf({t}, {df}) vs statrs"))?;
        }
    }
    Ok(format!("Jacobian rel err {worst_jac:.1e}; chi2/t tails max abs err {worst_tail:.1e} over 144 points"))
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"synth": {"n_images": 150, "n_raters": 40, "heatmap_images": 20, "outliers": 2, "repeats": 30},
            "trials": 8, "icc_sizes": [5, 10, 20, 30], "icc_reps": 20, "bootstrap": 200,
            "successes": 419, "n": 500}"#,
    )
    .map_err(|e| e.to_string())?;
    let points = tmp.path().join("points.csv");
    let mut csv = String::from("model,metric,n,y\n");
    for (model, metric, ys, _) in CURVES {
        for (n, y) in SIZES.iter().zip(ys) {
            csv.push_str(&format!("{model},{metric},{n},{y}\n"));
        }
    }
    std::fs::write(&points, csv).map_err(|e| e.to_string())?;

    let run = |threads: &str, out: &str| -> std::result::Result<BTreeMap<String, Vec<u8>>, String> {
        let dir = tmp.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_spidereval"))
            .args(["--config", cfg.to_str().unwrap(), "--seed", "42", "--threads", threads])
            .args(["--out", dir.to_str().unwrap(), "all", "--points", points.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("run failed: {}", String::from_utf8_lossy(&status.stderr))
        })?;
        Ok(read_tree(&dir))
    };
    let a = run("1", "t1")?;
    let b = run("8", "t8")?;
    let c = run("1", "t1b")?;
    for (other, label) in [(&b, "--threads 8"), (&c, "second --threads 1 run")] {
        ensure(a.keys().eq(other.keys()), || format!("file lists differ ({label})"))?;
        for (name, bytes) in &a {
            ensure(other[name] == *bytes, || format!("{name} differs ({label})"))?;
        }
    }
    Ok(format!("{} output files byte-identical across 3 runs", a.len()))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "formula cross-checks against published tables", limit: Some(Duration::from_secs(1)), run: formula_cross_checks },
        Criterion { id: 2, name: "learning-curve refits", limit: Some(Duration::from_secs(1)), run: learning_curve_refits },
        Criterion { id: 3, name: "Wilson intervals", limit: Some(Duration::from_secs(1)), run: wilson_intervals },
        Criterion { id: 4, name: "ICC oracle", limit: Some(Duration::from_secs(30)), run: icc_oracle },
        Criterion { id: 5, name: "harness property suite", limit: Some(Duration::from_secs(60)), run: harness_properties },
        Criterion { id: 6, name: "statistics oracles", limit: Some(Duration::from_secs(10)), run: statistics_oracles },
        Criterion { id: 7, name: "numerical kernels", limit: Some(Duration::from_secs(5)), run: numerical_kernels },
        Criterion { id: 8, name: "reproducibility across thread counts", limit: None, run: reproducibility },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(msg), Some(limit)) if elapsed > limit => {
                Err(format!("{msg}; runtime {elapsed:.2?} exceeds {limit:?}"))
            }
            (r, _) => r,
        };
        match result {
            Ok(msg) => println!("PASS criterion {}: {} [{elapsed:.2?}] {msg}", c.id, c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {}: {} [{elapsed:.2?}] {msg}", c.id, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

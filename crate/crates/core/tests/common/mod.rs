#![allow(dead_code)]

use mmstack::data::{Arm, Dataset};
use mmstack::mvdist::mv_rect_prob;
use mmstack::{CorrelationMatrix, Family, ModelSpec, QuadratureSettings};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

pub fn random_corr(dim: usize, rng: &mut ChaCha8Rng) -> CorrelationMatrix {
    let a = DMatrix::from_fn(dim, dim + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &a * a.transpose();
    CorrelationMatrix::from_covariance(dim, cov.as_slice()).unwrap()
}

/// Plain Monte Carlo estimate of a rectangle probability with its standard error.
pub const ORACLE_DRAWS: usize = 10_000_000;

pub fn brute_force(
    corr: &CorrelationMatrix,
    lower: &[f64],
    upper: &[f64],
    df: Option<u32>,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let d = corr.dim();
    let l = DMatrix::from_row_slice(d, d, corr.as_slice())
        .cholesky()
        .unwrap()
        .l();
    let l: Vec<f64> = (0..d * d).map(|k| l[(k / d, k % d)]).collect();
    let chi = df.map(|v| ChiSquared::new(v as f64).unwrap());
    let mut z = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let scale = match (&chi, df) {
            (Some(chi), Some(v)) => (chi.sample(rng) / v as f64).sqrt(),
            _ => 1.0,
        };
        let inside = (0..d).all(|i| {
            let x = l[i * d..i * d + i + 1].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / scale;
            lower[i] <= x && x <= upper[i]
        });
        hits += inside as usize;
    }
    let p = hits as f64 / draws as f64;
    (p, (p * (1.0 - p) / draws as f64).sqrt().max(1.0 / draws as f64))
}

pub fn fuzzed_dataset(seed: u64, n_per_arm: usize, binary: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arms = Vec::new();
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    let shift: f64 = rng.random_range(-0.5..0.5);
    for arm in [Arm::Reference, Arm::Active] {
        for k in 0..n_per_arm {
            arms.push(arm);
            // the first four subjects of each arm fill every subgroup cell
            let a = if k < 4 { k % 2 == 0 } else { rng.random_bool(0.5) };
            let b = if k < 4 { k < 2 } else { rng.random_bool(0.4) };
            g1.push(Some(a));
            g2.push(Some(b));
            let e: f64 = rng.sample(StandardNormal);
            let eff = if arm == Arm::Active { shift } else { 0.0 };
            let yi = eff + e;
            y.push(Some(yi));
            let zi = 0.6 * e + 0.8 * rng.sample::<f64, _>(StandardNormal) + eff;
            z.push(Some(if binary { (zi > 0.3 || k == 0) as u8 as f64 } else { zi }));
        }
    }
    if binary {
        // keep both outcomes in every arm
        let n = z.len();
        z[1] = Some(0.0);
        z[n_per_arm] = Some(1.0);
        z[n_per_arm + 1] = Some(0.0);
        z[n - 1] = Some(1.0);
    }
    let c1 = g1.iter().map(|f| f.map(|b: bool| !b)).collect();
    Dataset::new(["a".into(), "b".into()], arms)
        .unwrap()
        .with_subgroup("g1", g1)
        .unwrap()
        .with_subgroup("c1", c1)
        .unwrap()
        .with_subgroup("g2", g2)
        .unwrap()
        .with_response("y", y)
        .unwrap()
        .with_response("z", z)
        .unwrap()
}

pub fn fuzzed_specs(mask: u8) -> Vec<ModelSpec> {
    let all = [
        ModelSpec::new("y", "all", Family::GaussianIdentity),
        ModelSpec::new("y", "g1", Family::GaussianIdentity),
        ModelSpec::new("y", "c1", Family::GaussianIdentity),
        ModelSpec::new("y", "g2", Family::GaussianIdentity),
        ModelSpec::new("z", "all", Family::GaussianIdentity),
        ModelSpec::new("z", "g1", Family::GaussianIdentity),
    ];
    let mut out: Vec<ModelSpec> = all
        .iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, s)| s.clone())
        .collect();
    if out.len() < 2 {
        out = all[..2].to_vec();
    }
    out
}


/// Compares `cases` random 2-4 dimensional rectangle probabilities (every
/// fourth one multivariate t) with a 40 000-draw Monte Carlo oracle.
pub fn check_rectangle_probabilities(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = QuadratureSettings::default();
    for case in 0..cases {
        let dim = 2 + case % 3;
        let corr = random_corr(dim, &mut rng);
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for _ in 0..dim {
            let a: f64 = rng.random_range(-2.5..1.5);
            let b = a + rng.random_range(0.3..3.0);
            lower.push(if rng.random_bool(0.25) { f64::NEG_INFINITY } else { a });
            upper.push(if rng.random_bool(0.25) { f64::INFINITY } else { b });
        }
        let df = if case % 4 == 3 { Some(rng.random_range(2..30)) } else { None };
        let q = mv_rect_prob(&corr, &lower, &upper, df, &settings).map_err(|e| e.to_string())?;
        let (mc, se) = brute_force(&corr, &lower, &upper, df, ORACLE_DRAWS, &mut rng);
        if (q.value - mc).abs() > 3.0 * se + q.error {
            return Err(format!("case {case}: quadrature {} vs brute force {mc} (se {se})", q.value));
        }
    }
    Ok(())
}

/// Equicoordinate quantiles at identity correlation against Šidák's closed form.
pub fn check_sidak() -> Result<(), String> {
    use mmstack::mvdist::{equicoordinate_quantile, std_normal_quantile, Tail};
    for dim in 2..=6 {
        for alpha in [0.01, 0.05, 0.1] {
            for tail in [Tail::TwoSided, Tail::OneSided] {
                let q = equicoordinate_quantile(
                    &CorrelationMatrix::identity(dim),
                    alpha,
                    tail,
                    None,
                    &QuadratureSettings::default(),
                )
                .map_err(|e| e.to_string())?;
                let per = 1.0 - (1.0 - alpha).powf(1.0 / dim as f64);
                let exact = match tail {
                    Tail::TwoSided => std_normal_quantile(1.0 - per / 2.0),
                    Tail::OneSided => std_normal_quantile(1.0 - per),
                };
                if (q.value - exact).abs() >= 2e-3 {
                    return Err(format!("dim {dim}, alpha {alpha}, {tail:?}: {} vs {exact}", q.value));
                }
            }
        }
    }
    Ok(())
}

/// unadjusted <= mmm <= Bonferroni on `cases` fuzzed stacks.
pub fn check_dominance(cases: u64) -> Result<(), String> {
    use mmstack::linmodels::fit_ols;
    use mmstack::mmm::stack;
    use mmstack::{Alternative, DfMode};
    let alts = [Alternative::TwoSided, Alternative::Greater, Alternative::Less];
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let ds = fuzzed_dataset(case, rng.random_range(10..40), false);
        let models = fuzzed_specs(rng.random_range(1..64))
            .iter()
            .map(|s| fit_ols(&ds, s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let fit = stack(models)
            .map_err(|e| e.to_string())?
            .with_df_mode(DfMode::ALL[case as usize % 4]);
        let alt = alts[(case / 4) as usize % 3];
        let adj = fit
            .adjusted_p(alt, &QuadratureSettings::default())
            .map_err(|e| e.to_string())?;
        let raw = fit.unadjusted_p(alt);
        let bonf = fit.bonferroni_p(alt);
        for i in 0..fit.dim() {
            if raw[i] > adj.values[i] + 2e-4 || adj.values[i] > bonf[i] + 2e-4 {
                return Err(format!(
                    "case {case}, hypothesis {i}: {} / {} / {}",
                    raw[i], adj.values[i], bonf[i]
                ));
            }
        }
    }
    Ok(())
}

/// Duplicated models correlate exactly 1, disjoint subsets exactly 0.
pub fn check_exact_correlations(cases: u64) -> Result<(), String> {
    use mmstack::linmodels::fit_ols;
    use mmstack::mmm::stack;
    for case in 0..cases {
        let ds = fuzzed_dataset(1000 + case, 8 + case as usize % 30, false);
        let spec = |e: &str, s: &str| ModelSpec::new(e, s, Family::GaussianIdentity);
        let models = [("y", "all"), ("y", "all"), ("y", "g1"), ("z", "c1")]
            .iter()
            .map(|(e, s)| fit_ols(&ds, &spec(e, s)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let fit = stack(models).map_err(|e| e.to_string())?;
        if fit.c_hat.get(0, 1) != 1.0 && (fit.c_hat.get(0, 1) - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: duplicate correlation {}", fit.c_hat.get(0, 1)));
        }
        if fit.c_hat.get(2, 3) != 0.0 {
            return Err(format!("case {case}: disjoint correlation {}", fit.c_hat.get(2, 3)));
        }
    }
    Ok(())
}

/// Influence terms of every converged fit sum to zero.
pub fn check_score_sums(cases: u64) -> Result<(), String> {
    use mmstack::linmodels::fit;
    for case in 0..cases {
        let ds = fuzzed_dataset(2000 + case, 10 + case as usize % 50, true);
        for subset in ["all", "g1", "c1"] {
            for (endpoint, family) in [("y", Family::GaussianIdentity), ("z", Family::BinomialLogit)] {
                let m = match fit(&ds, &ModelSpec::new(endpoint, subset, family)) {
                    Ok(m) => m,
                    Err(e) if e.is_numerical() => continue,
                    Err(e) => return Err(e.to_string()),
                };
                let sum: f64 = m.score_contributions.iter().sum();
                let scale: f64 = m.score_contributions.iter().map(|x| x.abs()).sum();
                if sum.abs() > 1e-8 * scale.max(1e-300) {
                    return Err(format!("case {case}, {subset}/{endpoint}: sum {sum}, scale {scale}"));
                }
            }
        }
    }
    Ok(())
}

/// Two runs of one scenario give byte-identical CSV output.
pub fn check_determinism() -> Result<(), String> {
    use mmstack::simulator::{run, write_results_csv, HypothesisFamily, Method, Scenario};
    let s = Scenario::new(50, 5.0, 0.7, HypothesisFamily::Any)
        .with_replications(200)
        .with_seed(99);
    let csv = || -> Result<Vec<u8>, String> {
        let r = run(&s, &Method::applicable(&s)).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_results_csv(&[r], &mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    if csv()? != csv()? {
        return Err("simulation CSV differs between runs".into());
    }
    Ok(())
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that compare simulations with published numbers report honestly
//! and do not abort the run. Set `MMSTACK_ACCEPTANCE_STRICT=1` to turn any
//! FAIL line into a test failure. `MMSTACK_ACCEPTANCE_REPS` and
//! `MMSTACK_ACCEPTANCE_POWER_REPS` override the replication counts
//! (defaults 10 000 and 2 000).

mod common;

use std::io::Write;
use std::time::Instant;

use mmstack::casestudy::{analyze, CountTable};
use mmstack::published::{self, compare_table, CellComparison, TableId, POWER_CLAIMS};
use mmstack::simulator::{run, Method, DEFAULT_SEED};
use mmstack::QuadratureSettings;

struct Outcome {
    id: &'static str,
    title: String,
    pass: bool,
    details: Vec<String>,
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn cell_line(c: &CellComparison) -> String {
    format!(
        "N={:<4} prop={:<4} {:<10} published {:.4} simulated {:.4} diff {:+.4} tol {:.4} {}",
        c.total_n,
        c.prop_target,
        c.method.as_str(),
        c.published,
        c.simulated,
        c.difference(),
        c.tolerance,
        if c.passes() { "ok" } else { "OUT" }
    )
}

fn case_study() -> Outcome {
    let start = Instant::now();
    let report = analyze(&CountTable::averroes(), 0.05, &QuadratureSettings::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let mut pass = elapsed < 10.0;
    let mut details = Vec::new();
    for row in published::case_study() {
        let h = report.hypothesis(&row.group, &row.endpoint).unwrap();
        let or = h.effect();
        let lower = h.display_bounds(&h.adjusted).0;
        let p = h.adjusted.p_value;
        let or_ok = format!("{or:.2}") == format!("{:.2}", row.or);
        let lower_ok = (lower - row.mmm_lower).abs() <= 0.02;
        let p_ok = (p - row.mmm_p).abs() <= 0.005;
        pass &= or_ok && lower_ok && p_ok;
        details.push(format!(
            "{:<6} {:<9} OR {:.2} ({:.2}) lower {:.3} ({:.2}) p {:.4} ({:.4}) {}",
            row.group,
            row.endpoint,
            or,
            row.or,
            lower,
            row.mmm_lower,
            p,
            row.mmm_p,
            if or_ok && lower_ok && p_ok { "ok" } else { "OUT" }
        ));
    }
    details.push(format!("runtime {elapsed:.2}s (limit 10s)"));
    Outcome {
        id: "1",
        title: "case study: OR to 2 decimals, mmm lower bound ±0.02, mmm p ±0.005, < 10 s".into(),
        pass,
        details,
    }
}

fn table_cells(
    id: &'static str,
    title: String,
    table: TableId,
    cells: &[(usize, f64)],
    methods: &[Method],
    reps: usize,
) -> Outcome {
    let rows = compare_table(table, cells, reps, DEFAULT_SEED).unwrap();
    let selected: Vec<&CellComparison> = rows
        .iter()
        .filter(|c| methods.is_empty() || methods.contains(&c.method))
        .collect();
    Outcome {
        id,
        title,
        pass: selected.iter().all(|c| c.passes()),
        details: selected.iter().map(|c| cell_line(c)).collect(),
    }
}

fn spot(
    table: TableId,
    total_n: usize,
    prop: f64,
    method: Method,
    tol: f64,
    reps: usize,
) -> (bool, String) {
    let published = published::table(table).value(total_n, prop, method).unwrap();
    let s = table
        .scenario(total_n, prop)
        .with_replications(reps)
        .with_seed(DEFAULT_SEED);
    let simulated = run(&s, &[method]).unwrap().proportions()[0];
    let c = CellComparison {
        total_n,
        prop_target: prop,
        method,
        published,
        simulated,
        tolerance: published::cell_tolerance(tol, published, reps),
    };
    (c.passes(), format!("{}: {}", table.name(), cell_line(&c)))
}

fn designs(reps: usize) -> Outcome {
    let checks = [
        spot(TableId::A5, 50, 0.5, Method::MmmDfInd, 0.015, reps),
        spot(TableId::A6, 100, 0.5, Method::MmmDfInd, 0.015, reps),
    ];
    Outcome {
        id: "4",
        title: format!("overlap and two-endpoint designs within ±0.015, {reps} reps"),
        pass: checks.iter().all(|c| c.0),
        details: checks.into_iter().map(|c| c.1).collect(),
    }
}

fn power(reps: usize) -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for claim in &POWER_CLAIMS {
        let g = published::power_gain(claim, reps, DEFAULT_SEED).unwrap();
        pass &= g.passes();
        details.push(format!(
            "{:<60} published {:>5.2} simulated {:>5.2} tol {:.1} (at {}, prop {}, delta {}) {}",
            g.label,
            g.published_pp,
            g.simulated_pp,
            g.tolerance_pp,
            g.family,
            g.prop_target,
            g.delta,
            if g.passes() { "ok" } else { "OUT" }
        ));
    }
    Outcome {
        id: "5",
        title: format!("power-gain claims (largest gain over family, prop and delta), {reps} reps"),
        pass,
        details,
    }
}

fn properties() -> Outcome {
    let checks: [(&str, Result<(), String>); 6] = [
        ("(a) rectangle probabilities vs brute force, 50 problems", common::check_rectangle_probabilities(11, 50)),
        ("(b) Šidák quantiles at identity correlation", common::check_sidak()),
        ("(c) unadjusted <= mmm <= Bonferroni, 200 stacks", common::check_dominance(200)),
        ("(d) duplicate = 1 and disjoint = 0 correlations", common::check_exact_correlations(50)),
        ("(e) influence terms sum to zero at the fit", common::check_score_sums(50)),
        ("(f) byte-identical reruns", common::check_determinism()),
    ];
    let pass = checks.iter().all(|c| c.1.is_ok());
    let details = checks
        .into_iter()
        .map(|(name, r)| match r {
            Ok(()) => format!("{name}: ok"),
            Err(e) => format!("{name}: OUT {e}"),
        })
        .collect();
    Outcome {
        id: "6",
        title: "property suite".into(),
        pass,
        details,
    }
}

#[test]
fn acceptance() {
    let reps = env_usize("MMSTACK_ACCEPTANCE_REPS", 10_000);
    let power_reps = env_usize("MMSTACK_ACCEPTANCE_POWER_REPS", 2_000);
    let mandatory: Vec<(usize, f64)> = [20, 100, 500]
        .into_iter()
        .flat_map(|n| [(n, 0.5), (n, 0.8)])
        .collect();

    let mut outcomes = Vec::new();
    let mut timed = |f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        o.details.push(format!("elapsed {:.1}s", start.elapsed().as_secs_f64()));
        outcomes.push(o);
    };
    timed(&mut case_study);
    timed(&mut || {
        table_cells(
            "2",
            format!("targeted-or-total table, N in {{20,100,500}} x prop in {{0.5,0.8}}, 7 methods within ±0.012, {reps} reps"),
            TableId::A3,
            &mandatory,
            &[],
            reps,
        )
    });
    timed(&mut || {
        let mut a = table_cells(
            "3",
            format!("\"any\" table spot values within ±0.012, {reps} reps"),
            TableId::A4,
            &[(20, 0.5)],
            &[Method::Mmm, Method::MmmDfMin],
            reps,
        );
        let b = table_cells("3", String::new(), TableId::A4, &[(500, 0.5)], &[Method::Mmm], reps);
        a.pass &= b.pass;
        a.details.extend(b.details);
        a
    });
    timed(&mut || designs(reps));
    timed(&mut || power(power_reps));
    timed(&mut properties);

    // written past the test harness capture so the lines always show
    let mut text = String::from("\n");
    for o in &outcomes {
        text += &format!("[{}] criterion {}: {}\n", if o.pass { "PASS" } else { "FAIL" }, o.id, o.title);
        for d in &o.details {
            text += &format!("       {d}\n");
        }
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    text += &format!(
        "acceptance: {} of {} criteria pass{}\n",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" (failing: {})", failed.join(", "))
        }
    );
    std::io::stdout().lock().write_all(text.as_bytes()).unwrap();
    if std::env::var("MMSTACK_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        assert!(failed.is_empty(), "failing criteria: {failed:?}");
    }
}

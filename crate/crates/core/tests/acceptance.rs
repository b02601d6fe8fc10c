//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use na1::deflator::{
    build_deflator, deflator_experiment, mean_se, numeraire_portfolio, wealth, DeflatorOptions, GrowthScheme,
    StrategyKind, StrategySpec,
};
use na1::forge::{kernel_direction, ladder_experiment, scaled_drift_arbitrage, unboundedness_test, NupbrVerdict};
use na1::grid::{stream_rng, TimeGrid};
use na1::model::{from_catalog, normal_cdf, simulate, MarketModel, CATALOG};
use na1::structure::{classify_na1, risk_premium, ClassifyOptions, Na1Class};
use na1::tree::{
    binomial_one_step, bayes_check, deflator_feasibility, density_from_masses, find_arbitrage, is_martingale,
    random_martingale, random_process, random_tree, random_viable_tree, reweight, BigRational, Feasibility,
    TreeModel,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn catalog(name: &str) -> MarketModel {
    from_catalog(name, &BTreeMap::new()).expect("catalog model")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

/// Black–Scholes: NA1_OK, |λ| = 0.25 at every node, K_T = 0.0625 per path.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let model = catalog("black-scholes");
    let grid = TimeGrid::uniform(1.0, 1000).map_err(|e| e.to_string())?;
    let rep = classify_na1(&model, &grid, 100_000, 1, &ClassifyOptions::default()).map_err(|e| e.to_string())?;
    ensure(rep.classification == Na1Class::Na1Ok, || format!("classified {}", rep.classification))?;
    let dev = (rep.sharpe_max - 0.25).abs().max((rep.sharpe_min - 0.25).abs());
    ensure(dev < 1e-10, || format!("max |λ − 0.25| = {dev:e}"))?;
    let kdev = rep.terminal_mass.iter().map(|k| (k - 0.0625).abs()).fold(0.0, f64::max);
    ensure(rep.terminal_mass.len() == 100_000, || format!("{} paths kept", rep.terminal_mass.len()))?;
    ensure(kdev <= 1e-10, || format!("max |K_T − 0.0625| = {kdev:e}"))?;
    within_time(start, Duration::from_secs(60))?;
    Ok(format!(
        "NA1_OK, max |λ−0.25| = {dev:.1e}, max |K_T−0.0625| = {kdev:.1e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

/// Bessel(3): the deflator is a strict local martingale and localization
/// exposes the singular mass.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let model = catalog("bessel3");
    let grid = TimeGrid::uniform(1.0, 4000).map_err(|e| e.to_string())?;
    let exp = deflator_experiment(&model, &grid, 100_000, 2, &DeflatorOptions::default()).map_err(|e| e.to_string())?;
    let t = &exp.deflator_test;
    ensure(!t.pass, || "martingale test passed".into())?;
    ensure((t.terminal_deficit - 0.317).abs() <= 0.01, || {
        format!("deficit {:.4} not within 0.317 ± 0.01", t.terminal_deficit)
    })?;
    let rows = &exp.localization.schedule.rows;
    for r in rows {
        ensure((r.total_mass - 1.0).abs() <= 3.0 * r.total_se, || {
            format!("level {}: Qⁿ[Ω] = {:.4} ± {:.4}", r.level, r.total_mass, r.total_se)
        })?;
    }
    ensure(rows.last().map(|r| r.level) == Some(32.0), || "levels must reach 32".into())?;
    ensure(rows.windows(2).all(|w| w[1].survival_mass >= w[0].survival_mass), || {
        "Qⁿ[τₙ ≥ T] not nondecreasing in n".into()
    })?;
    let limit = exp.localization.schedule.extrapolated_limit;
    ensure((limit - 0.683).abs() <= 0.01, || format!("limit of Qⁿ[τₙ ≥ T] = {limit:.4}"))?;
    within_time(start, Duration::from_secs(120))?;
    let last = rows.last().unwrap();
    Ok(format!(
        "deficit {:.4} ± {:.4}, Q³²[τ ≥ T] = {:.4} (exact {:.4}), limit {:.4}, {:.1}s",
        t.terminal_deficit,
        t.deficit_se,
        last.survival_mass,
        2.0 * normal_cdf(1.0 - 1.0 / 32.0) - 1.0,
        limit,
        start.elapsed().as_secs_f64()
    ))
}

/// Catalog models classified NA1_OK. Logarithmic mass growth hides inside a
/// factor-2 refinement, so the ladder spans two decades.
fn na1_ok_models() -> Result<Vec<MarketModel>, String> {
    let grid = TimeGrid::uniform(1.0, 1000).map_err(|e| e.to_string())?;
    let opts = ClassifyOptions {
        levels: 3,
        factor: 10,
        ..ClassifyOptions::default()
    };
    let mut out = Vec::new();
    for entry in CATALOG {
        let model = catalog(entry.name);
        let rep = classify_na1(&model, &grid, 200, 3, &opts).map_err(|e| e.to_string())?;
        if rep.classification == Na1Class::Na1Ok {
            out.push(model);
        }
    }
    Ok(out)
}

/// Random fractional strategy `π(t, S) = u + v t + w (S/S_0 − 1)`, clipped.
fn random_fractional(rng: &mut impl Rng, model: &MarketModel, initial: f64) -> StrategySpec {
    let d = model.dim();
    let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..2.0)).collect();
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let s0 = model.s0().to_vec();
    StrategySpec::new(
        StrategyKind::Fractional,
        initial,
        d,
        Arc::new(move |i, t, hist: &[f64], out: &mut [f64]| {
            for k in 0..out.len() {
                let s = hist[i * out.len() + k];
                out[k] = (u[k] + v[k] * t + w[k] * (s / s0[k] - 1.0)).clamp(-2.0, 3.0);
            }
        }),
    )
    .expect("valid strategy")
}

/// Deflated admissible wealth is a supermartingale.
fn criterion_3(models: &[MarketModel]) -> Outcome {
    ensure(!models.is_empty(), || "no NA1_OK catalog models".into())?;
    let grid = TimeGrid::uniform(1.0, 250).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(33, 0);
    let mut checked = 0;
    let mut worst = f64::NEG_INFINITY;
    for model in models {
        let bundle = simulate(model, &grid, 20_000, 4).map_err(|e| e.to_string())?;
        let report = risk_premium(model, &bundle).map_err(|e| e.to_string())?;
        let defl = build_deflator(&report, &bundle, GrowthScheme::default()).map_err(|e| e.to_string())?;
        let y = defl.terminal();
        let mut done = 0;
        while done < 10 {
            let x0 = rng.random_range(0.5..2.0);
            let spec = random_fractional(&mut rng, model, x0);
            let x = wealth(&spec, &bundle).map_err(|e| e.to_string())?;
            if !x.admissible() {
                continue;
            }
            let xt = x.terminal();
            let yx: Vec<f64> = defl.kept.iter().zip(&y).map(|(&p, y)| y * xt[p]).collect();
            let (m, se) = mean_se(&yx);
            worst = worst.max((m - x0) / se.max(f64::MIN_POSITIVE));
            ensure(m <= x0 + 3.0 * se, || {
                format!("{}: Ê[Y_T X_T] = {m:.4} > X_0 + 3 s.e. = {:.4}", model.name(), x0 + 3.0 * se)
            })?;
            done += 1;
            checked += 1;
        }
    }
    let names: Vec<&str> = models.iter().map(|m| m.name()).collect();
    Ok(format!(
        "{checked} strategies on [{}], largest (Ê[YX] − X_0)/s.e. = {worst:.2}",
        names.join(", ")
    ))
}

/// Pure drift: riskless gains and an unbounded family.
fn criterion_4() -> Outcome {
    let model = catalog("pure-drift");
    // dyadic steps keep every sum exact
    let grid = TimeGrid::uniform(1.0, 1024).map_err(|e| e.to_string())?;
    let bundle = simulate(&model, &grid, 100, 5).map_err(|e| e.to_string())?;
    let kernel = kernel_direction(&model, &bundle).map_err(|e| e.to_string())?;
    let scales = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0];
    let family = scaled_drift_arbitrage(&kernel, &bundle, &scales).map_err(|e| e.to_string())?;
    for (k, xs) in scales.iter().zip(&family.terminal) {
        ensure(xs.iter().all(|x| *x == 1.0 + k * 1.0), || format!("X_T ≠ 1 + {k}T on some path"))?;
    }
    let members = scaled_drift_arbitrage(&kernel, &bundle, &scales[1..]).map_err(|e| e.to_string())?;
    let nupbr = unboundedness_test(&members, &[1.5, 2.0]).map_err(|e| e.to_string())?;
    ensure(nupbr.verdict == NupbrVerdict::Unbounded, || format!("verdict {}", nupbr.verdict))?;
    Ok(format!("X_T = 1 + kT exactly for k ∈ {scales:?}, {}", nupbr.verdict))
}

/// Exploding Sharpe ratio: mass diverges and the leverage ladder is unbounded.
fn criterion_5() -> Outcome {
    let start = Instant::now();
    let model = catalog("exploding-sharpe");
    let grid = TimeGrid::uniform(1.0, 1000).map_err(|e| e.to_string())?;
    let opts = ClassifyOptions {
        levels: 3,
        factor: 10,
        ..ClassifyOptions::default()
    };
    let rep = classify_na1(&model, &grid, 200, 6, &opts).map_err(|e| e.to_string())?;
    ensure(rep.classification == Na1Class::MassDiverges, || format!("classified {}", rep.classification))?;
    ensure(rep.overall_ratio >= 1.5, || format!("median K_T ratio {:.3}", rep.overall_ratio))?;
    let fine = TimeGrid::uniform(1.0, 100_000).map_err(|e| e.to_string())?;
    let ks: Vec<f64> = (0..=10).map(|j| f64::from(1u32 << j)).collect();
    let exp = ladder_experiment(&model, &fine, 2000, 7, &ks, &[1.5, 2.0], GrowthScheme::Exponential)
        .map_err(|e| e.to_string())?;
    let top = exp.ladder.levels.last().unwrap();
    let ratio = top.median_ratio.ok_or("no ratio at the largest k")?;
    ensure((0.4..=0.6).contains(&ratio), || format!("median log X/E = {ratio:.3} at k = {}", top.k))?;
    ensure(exp.nupbr.verdict == NupbrVerdict::Unbounded, || format!("verdict {}", exp.nupbr.verdict))?;
    within_time(start, Duration::from_secs(300))?;
    Ok(format!(
        "MASS_DIVERGES (median K_T ratios {:.3?}, span {:.3}), median log X/E = {ratio:.3} at k = {}, {}, {:.1}s",
        rep.consecutive_ratios,
        rep.overall_ratio,
        top.k,
        exp.nupbr.verdict,
        start.elapsed().as_secs_f64()
    ))
}

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

/// Independent one-period arbitrage search for `d ≤ 2`: the cone of
/// arbitrage directions, when nonempty, contains one of `±x_j`, `±x_j^⊥`,
/// `±e_i`.
fn enumerated_arbitrage(tree: &TreeModel<BigRational>) -> bool {
    let dot = |a: &[BigRational], b: &[BigRational]| a.iter().zip(b).fold(q(0, 1), |s, (x, y)| s + x * y);
    tree.nonterminal().into_iter().any(|v| {
        let incs = tree.increments(v);
        let d = tree.dim();
        let mut dirs: Vec<Vec<BigRational>> = Vec::new();
        for x in &incs {
            dirs.push(x.clone());
            if d == 2 {
                dirs.push(vec![-x[1].clone(), x[0].clone()]);
            }
        }
        for i in 0..d {
            dirs.push((0..d).map(|j| q(i64::from(i == j), 1)).collect());
        }
        dirs.iter().any(|c| {
            [q(1, 1), q(-1, 1)].iter().any(|s| {
                let vals: Vec<BigRational> = incs.iter().map(|x| dot(c, x) * s).collect();
                vals.iter().all(|g| *g >= q(0, 1)) && vals.iter().any(|g| *g > q(0, 1))
            })
        })
    })
}

/// Exact tree oracles.
fn criterion_6() -> Outcome {
    let mut rng = stream_rng(66, 0);
    let mut agree = 0;
    let mut feasible = 0;
    for i in 0..200 {
        let depth = 1 + i % 3;
        let dim = 1 + (i / 3) % 2;
        let t = if i % 2 == 0 {
            random_tree(&mut rng, depth, 3, dim)
        } else {
            random_viable_tree(&mut rng, depth, 3, dim)
        };
        let f = deflator_feasibility(&t).is_feasible();
        let lp = find_arbitrage(&t).is_none();
        let enumerated = !enumerated_arbitrage(&t);
        if f == lp && f == enumerated {
            agree += 1;
        }
        feasible += usize::from(f);
    }
    ensure(agree == 200, || format!("feasibility agreed with the arbitrage search on {agree}/200 trees"))?;

    let mut bayes_ok = 0;
    let mut q_mart = 0;
    for i in 0..50 {
        let t = random_tree(&mut rng, 3, 3, 1);
        // random equivalent measure from random positive terminal masses
        let masses: Vec<(usize, BigRational)> =
            t.leaves().into_iter().map(|l| (l, q(rng.random_range(1..10), 1))).collect();
        let y = density_from_masses(&t, &masses).map_err(|e| e.to_string())?;
        let qt = reweight(&t, &y).map_err(|e| e.to_string())?;
        let x = if i % 2 == 0 {
            random_martingale(&qt, &mut rng)
        } else {
            random_process(&t, &mut rng)
        };
        let out = bayes_check(&t, &y, &x).map_err(|e| e.to_string())?;
        if out.consistent() && out.q_martingale == is_martingale(&qt, &x) {
            bayes_ok += 1;
        }
        q_mart += usize::from(out.q_martingale);
    }
    ensure(bayes_ok == 50, || format!("biconditional held in {bayes_ok}/50 instances"))?;

    let t = binomial_one_step(q(1, 1), q(2, 1), q(1, 2));
    match deflator_feasibility(&t) {
        Feasibility::Deflator { y, .. } => ensure(y == vec![q(1, 1), q(2, 3), q(4, 3)], || format!("binomial Y = {y:?}"))?,
        Feasibility::Infeasible { .. } => return Err("binomial tree reported infeasible".into()),
    }
    Ok(format!(
        "feasibility agrees 200/200 ({feasible} feasible), biconditional 50/50 ({q_mart} Q-martingales), binomial Y = (2/3, 4/3)"
    ))
}

/// Bit-exact numéraire duality.
fn criterion_7(models: &[MarketModel]) -> Outcome {
    ensure(!models.is_empty(), || "no NA1_OK catalog models".into())?;
    let grid = TimeGrid::uniform(1.0, 500).map_err(|e| e.to_string())?;
    let mut nodes = 0usize;
    for model in models {
        let bundle = simulate(model, &grid, 5000, 8).map_err(|e| e.to_string())?;
        let report = risk_premium(model, &bundle).map_err(|e| e.to_string())?;
        for scheme in [GrowthScheme::Multiplicative, GrowthScheme::Exponential] {
            let num = numeraire_portfolio(&report, &bundle, scheme).map_err(|e| e.to_string())?;
            ensure(num.duality_exact(), || format!("{} ({scheme:?}): Y·X ≠ 1 at some node", model.name()))?;
            nodes += num.log_x.len();
        }
    }
    Ok(format!("Y·X = 1 exactly at {nodes} nodes"))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map(|r| {
            r.map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

/// Byte-identical reports under reruns and different thread counts.
fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let configs = [
        ("bs.toml", "paths = 2000\nseed = 11\n[model]\nname = \"black-scholes\"\n[grid]\nsteps = 200\n"),
        ("bessel.toml", "paths = 2000\nseed = 12\n[model]\nname = \"bessel3\"\n[grid]\nsteps = 200\n"),
        (
            "es.toml",
            "paths = 200\nseed = 13\n[model]\nname = \"exploding-sharpe\"\n[grid]\nsteps = 1000\n",
        ),
        ("pd.toml", "paths = 100\n[model]\nname = \"pure-drift\"\n[grid]\nsteps = 128\n"),
        ("tree.toml", "seed = 3\n[tree]\nfile = \"t.toml\"\nsamples = 6\ndepths = [4, 8]\n"),
        (
            "t.toml",
            "[[node]]\nid = \"r\"\nprice = [\"1\"]\n[[node]]\nid = \"u\"\nparent = \"r\"\nprob = \"1/3\"\nprice = [\"3/2\"]\n\
             [[node]]\nid = \"m\"\nparent = \"r\"\nprob = \"1/3\"\nprice = [\"1\"]\n\
             [[node]]\nid = \"d\"\nparent = \"r\"\nprob = \"1/3\"\nprice = [\"1/2\"]\n",
        ),
    ];
    for (name, text) in configs {
        fs::write(dir.join(name), text).map_err(|e| e.to_string())?;
    }
    let jobs = [
        ("simulate", "bs.toml"),
        ("check-na1", "bs.toml"),
        ("deflate", "bessel.toml"),
        ("localize", "bessel.toml"),
        ("forge", "es.toml"),
        ("forge", "pd.toml"),
        ("tree", "tree.toml"),
    ];
    let mut files = 0;
    for (cmd, cfg) in jobs {
        let mut runs = Vec::new();
        for (j, threads) in ["1", "4", "1"].iter().enumerate() {
            let out = dir.join(format!("{cmd}-{cfg}-{j}"));
            let o = Command::new(env!("CARGO_BIN_EXE_na1"))
                .args([cmd, "--config"])
                .arg(dir.join(cfg))
                .arg("--out")
                .arg(&out)
                .args(["--threads", threads])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(o.status.success(), || {
                format!("{cmd} {cfg} failed: {}", String::from_utf8_lossy(&o.stderr))
            })?;
            runs.push(snapshot(&out));
        }
        ensure(!runs[0].is_empty() && runs[0] == runs[1] && runs[0] == runs[2], || {
            format!("{cmd} {cfg}: outputs differ")
        })?;
        files += runs[0].len();
    }
    Ok(format!("{} runs × 3 (threads 1, 4, 1): {files} files byte-identical", jobs.len()))
}

fn main() {
    let started = Instant::now();
    let models = na1_ok_models();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 black-scholes classification", Box::new(criterion_1)),
        ("2 strict local martingale detection", Box::new(criterion_2)),
        ("3 deflated wealth supermartingale", Box::new(|| criterion_3(models.as_ref().map_err(Clone::clone)?))),
        ("4 kernel arbitrage", Box::new(criterion_4)),
        ("5 mass divergence and leverage ladder", Box::new(criterion_5)),
        ("6 tree oracle exactness", Box::new(criterion_6)),
        ("7 numeraire duality", Box::new(|| criterion_7(models.as_ref().map_err(Clone::clone)?))),
        ("8 reproducibility", Box::new(criterion_8)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

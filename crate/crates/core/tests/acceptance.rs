//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any FAIL.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ugsim_core::analysis::{
    cell_metrics, deviation_scores, fit_ols, game_deviation, Dependent, DesignSpec, ExpectationTable,
    ExpectationVariant, RegressionRow,
};
use ugsim_core::backend::{Author, BackendConfig, ChatMessage, OracleBackend, OracleConfig, Purpose};
use ugsim_core::game::{GameStatus, Offer, Payout, Stake, Verdict};
use ugsim_core::orchestrator::{run_game, run_grid, AgentSetup, CellKey, ExperimentGrid, GameConfig, GameRun, Transcript};
use ugsim_core::profile::{AgentProfile, Belief, ReasoningMethod, Role, TemplateSet};
use ugsim_core::protocol::{parse_action, parse_decision, parse_proposal, parse_split, protocol_line, Action, ActionKind};
use ugsim_core::report::{deviation_csv, metrics_csv, Provenance};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ten() -> Stake {
    Stake::new(10).unwrap()
}

fn oracle(model: &str, policy: &str, seed: u64) -> BackendConfig {
    BackendConfig::oracle(model, policy, seed)
}

fn cell(model: &str, pb: Belief, rb: Belief, pr: ReasoningMethod, rr: ReasoningMethod) -> CellKey {
    CellKey {
        model: model.into(),
        proposer_belief: pb,
        responder_belief: rb,
        proposer_reasoning: pr,
        responder_reasoning: rr,
    }
}

fn grid_of(models: Vec<BackendConfig>, pairs: Option<Vec<(Belief, Belief)>>, seed: u64) -> ExperimentGrid {
    let mut grid = ExperimentGrid::standard(models, seed);
    if let Some(pairs) = pairs {
        grid.belief_pairs = pairs;
    }
    grid
}

fn by_cell(ts: &[Transcript]) -> BTreeMap<CellKey, Vec<&Transcript>> {
    let mut map: BTreeMap<CellKey, Vec<&Transcript>> = BTreeMap::new();
    for t in ts {
        map.entry(t.cell.clone()).or_default().push(t);
    }
    map
}

fn grid_shape() -> Check {
    let templates = TemplateSet::builtin();
    let one = run_grid(&grid_of(vec![oracle("oracle-0", "belief-driven", 1)], None, 3), 4, templates, None)
        .map_err(|e| e.to_string())?;
    let cells = by_cell(&one.transcripts);
    ensure(cells.len() == 45 && one.transcripts.len() == 450, || {
        format!("one model: {} cells, {} transcripts", cells.len(), one.transcripts.len())
    })?;
    ensure(cells.values().all(|c| c.len() == 10), || "cell without 10 games".into())?;

    let started = Instant::now();
    let policies = ["belief-driven", "fair-fair", "greedy-anchor", "selfless", "accept-at-least-40", "belief-driven"];
    let models = policies
        .iter()
        .enumerate()
        .map(|(i, p)| oracle(&format!("oracle-{i}"), p, i as u64))
        .collect();
    let six = run_grid(&grid_of(models, None, 3), 8, templates, None).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let cells = by_cell(&six.transcripts);
    ensure(cells.len() == 270 && six.transcripts.len() == 2700, || {
        format!("six models: {} cells, {} transcripts", cells.len(), six.transcripts.len())
    })?;
    for m in 0..6 {
        let n = six.transcripts.iter().filter(|t| t.cell.model == format!("oracle-{m}")).count();
        ensure(n == 450, || format!("oracle-{m}: {n} transcripts"))?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("45 cells / 450 per model; 2700 for six models in {:.2}s", elapsed.as_secs_f64()))
}

fn fair_fair() -> Check {
    let grid = grid_of(vec![oracle("oracle-fair", "fair-fair", 0)], Some(vec![(Belief::Fair, Belief::Fair)]), 11);
    let out = run_grid(&grid, 4, TemplateSet::builtin(), None).map_err(|e| e.to_string())?;
    let cells = by_cell(&out.transcripts);
    ensure(cells.len() == 5, || format!("{} cells", cells.len()))?;
    for (key, ts) in &cells {
        let m = cell_metrics(ts).map_err(|e| e.to_string())?;
        ensure(ts.len() == 10, || format!("{key}: {} games", ts.len()))?;
        ensure(m.ac == 100.0 && m.avg_turns == 1.0, || format!("{key}: AC {} turns {}", m.ac, m.avg_turns))?;
        ensure((m.payout_proposer, m.payout_responder) == (50, 50), || {
            format!("{key}: payouts ({}, {})", m.payout_proposer, m.payout_responder)
        })?;
    }
    Ok("AC 100, turns 1.0, payouts (50, 50) in all 5 reasoning conditions".into())
}

fn game_config(
    pb: Belief,
    rb: Belief,
    pr: ReasoningMethod,
    rr: ReasoningMethod,
    pcfg: &OracleConfig,
    rcfg: &OracleConfig,
    seed: u64,
) -> GameConfig {
    GameConfig {
        stake: ten(),
        max_rounds: 5,
        proposer: AgentSetup {
            profile: AgentProfile::new(Role::Proposer, pb, pr),
            backend: BackendConfig::Oracle(pcfg.clone()),
        },
        responder: AgentSetup {
            profile: AgentProfile::new(Role::Responder, rb, rr),
            backend: BackendConfig::Oracle(rcfg.clone()),
        },
        seed,
        max_retries: 2,
        template_checksum: TemplateSet::builtin().checksum().into(),
        menu_every_round: true,
    }
}

fn oracle_config(policy: &str, seed: u64) -> OracleConfig {
    OracleConfig {
        model_id: format!("oracle-{policy}"),
        policy: policy.into(),
        seed,
    }
}

fn zero_payoff() -> Check {
    let p = oracle_config("greedy-anchor", 0);
    let r = oracle_config("always-reject", 0);
    let (pb, rb) = (OracleBackend::new(p.clone()).map_err(|e| e.to_string())?, OracleBackend::new(r.clone()).map_err(|e| e.to_string())?);
    let key = cell("greedy-vs-reject", Belief::Greedy, Belief::Greedy, ReasoningMethod::Vanilla, ReasoningMethod::Vanilla);
    let mut ts = Vec::new();
    for i in 0..10 {
        let cfg = game_config(Belief::Greedy, Belief::Greedy, ReasoningMethod::Vanilla, ReasoningMethod::Vanilla, &p, &r, i);
        let run = run_game(key.clone(), i as u32, &cfg, TemplateSet::builtin(), &pb, &rb).map_err(|e| e.to_string())?;
        ts.push(run.transcript);
    }
    for t in &ts {
        ensure(t.valid && t.terminal == GameStatus::ExhaustedRounds, || format!("game {}: {:?}", t.game_index, t.terminal))?;
        ensure(t.payout == Payout { proposer: 0, responder: 0 }, || format!("game {}: {:?}", t.game_index, t.payout))?;
    }
    let m = cell_metrics(&ts.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    ensure(m.avg_turns == 5.0 && m.ac == 0.0 && m.payout_proposer == 0 && m.payout_responder == 0, || format!("{m:?}"))?;
    Ok("10/10 games ExhaustedRounds, payout (0, 0), Avg. Turns 5.0".into())
}

fn synthetic(pb: Belief, rb: Belief, i: u32, rounds: &[(u64, Verdict)]) -> Transcript {
    let key = cell("synthetic", pb, rb, ReasoningMethod::Cot, ReasoningMethod::Cot);
    let rounds: Vec<(Offer, Verdict)> = rounds.iter().map(|&(k, v)| (Offer::keeping(k, ten()).unwrap(), v)).collect();
    Transcript::from_rounds(key, i, ten(), 5, &rounds).unwrap()
}

fn deviation_anchors() -> Check {
    let pointwise = ExpectationTable::new(ExpectationVariant::PointwiseFair);
    let keep7 = synthetic(Belief::Fair, Belief::Fair, 0, &[(7, Verdict::Accept)]);
    let g = game_deviation(&keep7, &pointwise).ok_or("no deviation")?;
    ensure(g.p == 200, || format!("fair proposer keeping $7: P {} hundredths", g.p))?;

    let gift = synthetic(Belief::Fair, Belief::Selfless, 0, &[(0, Verdict::Accept)]);
    let g = game_deviation(&gift, &pointwise).ok_or("no deviation")?;
    ensure(g.r_a == Some(600), || format!("selfless responder accepting $10: R_A {:?}", g.r_a))?;

    let round1: Vec<Transcript> = (0..10).map(|i| synthetic(Belief::Fair, Belief::Fair, i, &[(5 + i as u64 % 3, Verdict::Accept)])).collect();
    let report = deviation_scores(&round1.iter().collect::<Vec<_>>(), &pointwise).map_err(|e| e.to_string())?;
    ensure(report.r_r == -1.0, || format!("all round-1 acceptances: R_R {}", report.r_r))?;
    let single = deviation_scores(&[&keep7], &pointwise).map_err(|e| e.to_string())?;
    ensure(single.p == 2.0, || format!("cell P {}", single.p))?;
    Ok("P 2, R_A 6, R_R -1".into())
}

fn sensitivity() -> Check {
    let keep6 = synthetic(Belief::Fair, Belief::Fair, 0, &[(6, Verdict::Accept)]);
    let range = deviation_scores(&[&keep6], &ExpectationTable::new(ExpectationVariant::RangeFair)).map_err(|e| e.to_string())?;
    let point = deviation_scores(&[&keep6], &ExpectationTable::new(ExpectationVariant::PointwiseFair)).map_err(|e| e.to_string())?;
    ensure(range.p == 0.0 && point.p == 1.0, || format!("range {} pointwise {}", range.p, point.p))?;
    Ok("fair proposer keeping $6: RangeFair 0, PointwiseFair 1".into())
}

// Normal-equations oracle: Gauss-Jordan inverse of X'X, t tail from a
// continued-fraction incomplete beta.

#[allow(clippy::excessive_precision)]
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    // Tail form that avoids 1 - small for large |t|.
    if x < (df / 2.0 + 1.0) / (df / 2.0 + 0.5 + 2.0) {
        let front = (ln_gamma(df / 2.0 + 0.5) - ln_gamma(df / 2.0) - ln_gamma(0.5) + df / 2.0 * x.ln() + 0.5 * (1.0 - x).ln()).exp();
        front * beta_cf(df / 2.0, 0.5, x) / (df / 2.0)
    } else {
        inc_beta(df / 2.0, 0.5, x)
    }
}

fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..k).map(|j| f64::from(i == j)));
            r
        })
        .collect();
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for i in 0..k {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    for (v, p) in m[i].iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[k..].to_vec()).collect())
}

struct Oracle {
    names: Vec<(String, String)>,
    beta: Vec<f64>,
    se: Vec<f64>,
    t: Vec<f64>,
    p: Vec<f64>,
    x: Vec<Vec<f64>>,
}

const BELIEFS: [&str; 3] = ["Greedy", "Fair", "Selfless"];
const FACTOR_NAMES: [&str; 4] = ["Model", "Reasoning", "Proposer Belief", "Responder Belief"];

fn oracle_fit(rows: &[RegressionRow], levels: &[Vec<String>; 4], refs: &[&str; 4]) -> Option<Oracle> {
    let mut names = vec![(String::new(), "Intercept".to_string())];
    for f in 0..4 {
        for l in &levels[f] {
            if l != refs[f] {
                names.push((FACTOR_NAMES[f].to_string(), l.clone()));
            }
        }
    }
    let level_of = |r: &RegressionRow, f: usize| -> String {
        match f {
            0 => r.model.clone(),
            1 => r.reasoning.clone(),
            2 => r.proposer_belief.clone(),
            _ => r.responder_belief.clone(),
        }
    };
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            names
                .iter()
                .map(|(factor, level)| match FACTOR_NAMES.iter().position(|f| f == factor) {
                    None => 1.0,
                    Some(f) => f64::from(&level_of(r, f) == level),
                })
                .collect()
        })
        .collect();
    let (n, k) = (x.len(), names.len());
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, r) in x.iter().zip(rows) {
        for i in 0..k {
            xty[i] += row[i] * r.value;
            for j in 0..k {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let inv = gauss_jordan_inverse(&xtx)?;
    let beta: Vec<f64> = (0..k).map(|i| (0..k).map(|j| inv[i][j] * xty[j]).sum()).collect();
    let rss: f64 = x
        .iter()
        .zip(rows)
        .map(|(row, r)| {
            let fitted: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            (r.value - fitted).powi(2)
        })
        .sum();
    let df = (n - k) as f64;
    let sigma2 = rss / df;
    let se: Vec<f64> = (0..k).map(|i| (sigma2 * inv[i][i]).sqrt()).collect();
    let t: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p = t.iter().map(|&t| two_sided_p(t, df)).collect();
    Some(Oracle { names, beta, se, t, p, x })
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn random_rows(rng: &mut StdRng, n: usize, models: &[String], scale: f64) -> Vec<RegressionRow> {
    let reasonings: Vec<&str> = ReasoningMethod::ALL.iter().map(|m| m.label()).collect();
    let effects: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    (0..n)
        .map(|i| {
            // The first rows cycle through every level so none is unobserved.
            let pick = |rng: &mut StdRng, len: usize| if i < 6 { i % len } else { rng.random_range(0..len) };
            let m = pick(rng, models.len());
            let r = pick(rng, 5);
            let pb = pick(rng, 3);
            let rb = pick(rng, 3);
            let noise: f64 = rng.random_range(-1.5..1.5);
            let value = 3.0 + effects[m] + effects[6 + r] + effects[11 + pb] + effects[14 + rb] + noise;
            RegressionRow {
                value: value * scale,
                model: models[m].clone(),
                reasoning: reasonings[r].to_string(),
                proposer_belief: BELIEFS[pb].to_string(),
                responder_belief: BELIEFS[rb].to_string(),
            }
        })
        .collect()
}

fn ols_equivalence() -> Check {
    let mut rng = StdRng::seed_from_u64(20_251_016);
    let (mut worst_rel, mut worst_orth, mut worst_t) = (0.0f64, 0.0f64, 0.0f64);
    for fixture in 0..20 {
        let n = rng.random_range(40..=270);
        let n_models = rng.random_range(2..=6);
        let models: Vec<String> = (0..n_models)
            .map(|i| if i == 0 { "distill-base".to_string() } else { format!("model-{i}") })
            .collect();
        let rows = random_rows(&mut rng, n, &models, 1.0);
        let fit = fit_ols(&rows, Dependent::P, &DesignSpec::default()).map_err(|e| format!("fixture {fixture}: {e}"))?;
        let levels = [
            models.clone(),
            ReasoningMethod::ALL.iter().map(|m| m.label().to_string()).collect(),
            BELIEFS.iter().map(|b| b.to_string()).collect(),
            BELIEFS.iter().map(|b| b.to_string()).collect(),
        ];
        let refs = ["distill-base", "CoT", "Fair", "Fair"];
        let o = oracle_fit(&rows, &levels, &refs).ok_or_else(|| format!("fixture {fixture}: singular X'X"))?;
        ensure(fit.k == o.names.len() && fit.n == n, || format!("fixture {fixture}: k {} vs {}", fit.k, o.names.len()))?;
        for (j, (factor, level)) in o.names.iter().enumerate() {
            let term = if j == 0 { Some(&fit.intercept) } else { fit.term(factor, level) };
            let term = term.ok_or_else(|| format!("fixture {fixture}: missing term {factor} {level}"))?;
            for (what, a, b) in [
                ("estimate", term.estimate, o.beta[j]),
                ("std error", term.std_error, o.se[j]),
                ("p", term.p, o.p[j]),
            ] {
                let rel = if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
                worst_rel = worst_rel.max(rel);
                ensure(rel_close(a, b, 1e-9), || format!("fixture {fixture}: {what} of {factor} {level}: {a} vs {b}"))?;
            }
        }

        // Residuals from the harness coefficients against the oracle design.
        let beta: Vec<f64> = o
            .names
            .iter()
            .enumerate()
            .map(|(j, (f, l))| if j == 0 { fit.intercept.estimate } else { fit.term(f, l).unwrap().estimate })
            .collect();
        let x = DMatrix::from_fn(n, beta.len(), |i, j| o.x[i][j]);
        let y = DVector::from_iterator(n, rows.iter().map(|r| r.value));
        let residual = &y - &x * DVector::from_vec(beta);
        let orth = (x.transpose() * residual).amax();
        worst_orth = worst_orth.max(orth);
        ensure(orth <= 1e-8, || format!("fixture {fixture}: X'r = {orth}"))?;

        let scaled: Vec<RegressionRow> = rows.iter().map(|r| RegressionRow { value: r.value * 7.3, ..r.clone() }).collect();
        let fit2 = fit_ols(&scaled, Dependent::P, &DesignSpec::default()).map_err(|e| e.to_string())?;
        for (a, b) in std::iter::once((&fit.intercept, &fit2.intercept)).chain(fit.terms.iter().zip(&fit2.terms)) {
            let diff = (a.t - b.t).abs();
            worst_t = worst_t.max(diff);
            ensure(diff <= 1e-10, || format!("fixture {fixture}: t {} vs {} after scaling", a.t, b.t))?;
        }
        ensure(o.t.len() == fit.k, || "t length".into())?;
    }
    Ok(format!(
        "20 fixtures; max rel err {worst_rel:.1e}, max |X'r| {worst_orth:.1e}, max t drift {worst_t:.1e}"
    ))
}

fn session_leaks(run: &GameRun) -> Vec<String> {
    let mut leaks = Vec::new();
    for (viewer, session) in [(Role::Proposer, &run.proposer_session), (Role::Responder, &run.responder_session)] {
        let foreign: Vec<&ChatMessage> = session
            .iter()
            .filter(|m| !(m.author == Author::Agent && m.owner == viewer))
            .collect();
        let text = serde_json::to_string(&foreign).unwrap();
        for round in &run.transcript.rounds {
            let (reasoning, action) = match viewer {
                Role::Proposer => (&round.responder_reasoning, &round.decision),
                Role::Responder => (&round.proposer_reasoning, &round.proposal),
            };
            let secrets = reasoning.iter().chain(std::iter::once(&action.raw_text));
            for secret in secrets {
                let escaped = serde_json::to_string(secret).unwrap();
                if text.contains(&escaped[1..escaped.len() - 1]) {
                    leaks.push(format!("{viewer} sees `{secret}`"));
                }
            }
        }
        for m in session.iter().filter(|m| m.purpose == Purpose::Relay) {
            if m.text.contains("Strategy") || m.text.contains("strategy") {
                leaks.push(format!("{viewer} relay carries a strategy: `{}`", m.text));
            }
        }
    }
    leaks
}

fn privacy() -> Check {
    let mut rng = StdRng::seed_from_u64(7_001);
    let policies = ["belief-driven", "fair-fair", "greedy-anchor", "selfless", "accept-at-least-60", "malformed-once"];
    let mut violations = Vec::new();
    for i in 0..1000u32 {
        let pick = |rng: &mut StdRng| policies[rng.random_range(0..policies.len())];
        let p = oracle_config(pick(&mut rng), rng.random());
        let r = oracle_config(pick(&mut rng), rng.random());
        let pb = Belief::ALL[rng.random_range(0..3)];
        let rb = Belief::ALL[rng.random_range(0..3)];
        let pr = ReasoningMethod::ALL[rng.random_range(0..5)];
        let rr = ReasoningMethod::ALL[rng.random_range(0..5)];
        let cfg = game_config(pb, rb, pr, rr, &p, &r, rng.random());
        let key = cell("fuzz", pb, rb, pr, rr);
        let run = run_game(
            key,
            i,
            &cfg,
            TemplateSet::builtin(),
            &OracleBackend::new(p).map_err(|e| e.to_string())?,
            &OracleBackend::new(r).map_err(|e| e.to_string())?,
        )
        .map_err(|e| format!("game {i}: {e}"))?;
        violations.extend(session_leaks(&run).into_iter().map(|v| format!("game {i}: {v}")));
        violations.extend(run.privacy_violations().into_iter().map(|v| format!("game {i}: {v}")));
    }
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    Ok("1000 fuzzed games, 0 violations".into())
}

const FRAGMENTS: [&str; 24] = [
    "Proposal:", "Decision:", "Strategy", "Strategy:", "|", "I get", "and you get", "and you", "$", "Accept", "Reject",
    "accept.", " ", "\n", "10", "5", "0", "-3", "99999999999999999999999", "💰", "\u{0}", "...", "Proposal: I get $", "|| Strategy 2",
];

fn parser_robustness() -> Check {
    let stake = ten();
    let mut canonical = 0;
    for keep in 0..=10 {
        for strategy in 1..=6 {
            let action = Action::Proposal { offer: Offer::keeping(keep, stake).unwrap() };
            let line = protocol_line(action, strategy);
            let parsed = parse_action(&line, ActionKind::Proposal, stake).map_err(|e| format!("{line}: {e}"))?;
            ensure(parsed.action == action && parsed.strategy_index == strategy && parsed.raw_text == line, || line.clone())?;
            canonical += 1;
        }
    }
    for verdict in [Verdict::Accept, Verdict::Reject] {
        for strategy in 1..=6 {
            let action = Action::Decision { verdict };
            let line = protocol_line(action, strategy);
            let parsed = parse_action(&line, ActionKind::Decision, stake).map_err(|e| format!("{line}: {e}"))?;
            ensure(parsed.action == action && parsed.strategy_index == strategy, || line.clone())?;
            canonical += 1;
        }
    }

    let mut rng = StdRng::seed_from_u64(100_000);
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut crashes = 0;
    for _ in 0..100_000 {
        let text: String = match rng.random_range(0..3) {
            0 => (0..rng.random_range(0..12)).map(|_| FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]).collect(),
            1 => {
                let mut line = protocol_line(Action::Proposal { offer: Offer::keeping(rng.random_range(0..=10), stake).unwrap() }, 2);
                for _ in 0..rng.random_range(1..4) {
                    let at = line.char_indices().map(|(i, _)| i).nth(rng.random_range(0..line.chars().count())).unwrap_or(0);
                    line.insert_str(at, FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
                }
                line
            }
            _ => (0..rng.random_range(0..40)).map(|_| char::from_u32(rng.random_range(0..0x2FFF)).unwrap_or('?')).collect(),
        };
        let ok = panic::catch_unwind(AssertUnwindSafe(|| {
            let _ = parse_proposal(&text, stake);
            let _ = parse_decision(&text);
            let _ = parse_split(&text, stake);
        }));
        crashes += usize::from(ok.is_err());
    }
    panic::set_hook(hook);
    ensure(crashes == 0, || format!("{crashes} crashes in 100000 cases"))?;

    let case1 = "6. Proposal: After considering the constraints and my selfless nature, I propose to give Player B $5 and take $5 for myself, as this is the highest share I can take while still showing a willingness to be generous.\nProposal: I get $8 and you get $2.\nStrategy: 2";
    let p = parse_proposal(case1, stake).map_err(|e| format!("case 1: {e}"))?;
    ensure(p.offer() == Some(Offer::keeping(8, stake).unwrap()) && p.strategy_index == 2, || format!("case 1: {p:?}"))?;
    let split = parse_split("Proposal: I get $0 and you get $10.", stake).map_err(|e| format!("case 2: {e}"))?;
    let d = parse_decision("Decision: Accept.\nStrategy: 1").map_err(|e| format!("case 2: {e}"))?;
    ensure(split == Offer::keeping(0, stake).unwrap() && d.verdict() == Some(Verdict::Accept) && d.strategy_index == 1, || "case 2".into())?;
    let split = parse_split("Proposal: I get $8 and you $2.", stake).map_err(|e| format!("case 3: {e}"))?;
    let d = parse_decision("Decision: Reject.\nStrategy: 6").map_err(|e| format!("case 3: {e}"))?;
    ensure(split == Offer::keeping(8, stake).unwrap() && d.verdict() == Some(Verdict::Reject) && d.strategy_index == 6, || "case 3".into())?;
    Ok(format!("{canonical} canonical lines round-trip; 100000 fuzz cases, 0 crashes; Cases 1-3 exact"))
}

fn determinism() -> Check {
    let models = vec![oracle("oracle-a", "belief-driven", 5), oracle("oracle-b", "belief-driven", 6)];
    let grid = grid_of(models, None, 99);
    let templates = TemplateSet::builtin();
    let a = run_grid(&grid, 1, templates, None).map_err(|e| e.to_string())?;
    let b = run_grid(&grid, 8, templates, None).map_err(|e| e.to_string())?;
    let canon = |ts: &[Transcript]| ts.iter().map(|t| t.to_canonical_json()).collect::<Vec<_>>().join("\n");
    ensure(canon(&a.transcripts) == canon(&b.transcripts), || "canonical transcripts differ".into())?;

    let prov = Provenance::default();
    let csvs = |ts: &[Transcript]| -> Result<String, String> {
        let cells = by_cell(ts);
        let mut metrics = Vec::new();
        let mut devs = Vec::new();
        let table = ExpectationTable::new(ExpectationVariant::PointwiseFair);
        for c in cells.values() {
            metrics.push(cell_metrics(c).map_err(|e| e.to_string())?);
            devs.push(deviation_scores(c, &table).map_err(|e| e.to_string())?);
        }
        Ok(metrics_csv(&metrics, &prov) + &deviation_csv(&devs, &prov))
    };
    ensure(csvs(&a.transcripts)? == csvs(&b.transcripts)?, || "analysis CSVs differ".into())?;
    Ok(format!("{} transcripts identical at parallelism 1 and 8; CSVs identical", a.transcripts.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 9] = [
        ("1 grid shape", grid_shape),
        ("2 fair-fair fixture", fair_fair),
        ("3 zero-payoff rule", zero_payoff),
        ("4 deviation arithmetic", deviation_anchors),
        ("5 sensitivity variant", sensitivity),
        ("6 OLS equivalence", ols_equivalence),
        ("7 privacy", privacy),
        ("8 parser robustness", parser_robustness),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

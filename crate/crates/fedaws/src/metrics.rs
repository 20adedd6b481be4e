//! Evaluation metrics and numerical certification of the theory.
//!
//! The per-round record carries ranking precision, the two geometric
//! quantities the error bound is built from — `epsilon`, the mean cosine
//! distance from an instance embedding to its true class row, and `rho`, the
//! minimum pairwise distance between class rows — and the outcome of the
//! error-bound check at that round.
//!
//! The five checkers certify proven statements numerically:
//!
//! * [`check_prop1`] — misclassification rate against the `2 epsilon / rho`
//!   bound, with the tie-as-error event and a vacuous flag when the bound
//!   exceeds one.
//! * [`check_lemma2`] — the surrogate inequality
//!   `ccl >= 2 (nu - 1) [y not in Top-1]` on random and adversarial logits.
//! * [`check_prop3`] — exact equality of the composite federated objective
//!   and the empirical risk of the spreadout loss on balanced shards with
//!   `lambda = 1/C`.
//! * [`check_thm4`] — the per-instance approximation bound
//!   `|l_sp - l_ccl| <= (1 + 2 nu) sum |w_c . r|` with `r = w_y - g`.
//! * [`check_claim5`] — the scalar hinge-difference inequality behind it,
//!   stratified over its four sign cases.
//!
//! Any violation these report is an implementation bug; that is what they
//! are for.

use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{ClientShard, LabeledDataset};
use crate::federation::{PositiveLoss, ServerState};
use crate::losses::{ccl_loss, lsp_loss, LossError, Margin};
use crate::math::{self, RngState};
use crate::model::{embed, score, ClassEmbeddingMatrix, EmbedderParams, ModelError};
use crate::spreadout::reg_sp;

/// Absolute slack granted to every inequality check.
pub const INEQ_SLACK: f64 = 1e-12;

/// Tolerance for the objective-identity check (a sum over n terms).
pub const PROP3_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("rho is undefined with fewer than two classes")]
    SingleClass,
    #[error("rho is exactly zero; the error bound is undefined")]
    RhoZero,
    #[error("shards are not balanced: {0}")]
    UnbalancedShards(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad metrics row: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// One CSV row of per-round evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub p1: f64,
    pub p3: f64,
    pub p5: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub rpos: f64,
    pub reg: f64,
    pub prop1_pass: bool,
    pub prop1_vacuous: bool,
}

impl MetricsRecord {
    pub fn csv_header() -> &'static str {
        "round,p1,p3,p5,epsilon,rho,rpos,reg,prop1_pass,prop1_vacuous"
    }

    /// Floats are printed with 17 significant digits so re-parsing is
    /// bit-faithful; '.' decimal always.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            self.round,
            self.p1,
            self.p3,
            self.p5,
            self.epsilon,
            self.rho,
            self.rpos,
            self.reg,
            self.prop1_pass,
            self.prop1_vacuous
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self, MetricsError> {
        let fields: Vec<&str> = row.trim().split(',').collect();
        if fields.len() != 10 {
            return Err(MetricsError::Csv(format!("expected 10 fields, got {}", fields.len())));
        }
        let float =
            |s: &str| s.parse::<f64>().map_err(|_| MetricsError::Csv(format!("bad float {s:?}")));
        let boolean =
            |s: &str| s.parse::<bool>().map_err(|_| MetricsError::Csv(format!("bad bool {s:?}")));
        Ok(Self {
            round: fields[0]
                .parse()
                .map_err(|_| MetricsError::Csv(format!("bad round {:?}", fields[0])))?,
            p1: float(fields[1])?,
            p3: float(fields[2])?,
            p5: float(fields[3])?,
            epsilon: float(fields[4])?,
            rho: float(fields[5])?,
            rpos: float(fields[6])?,
            reg: float(fields[7])?,
            prop1_pass: boolean(fields[8])?,
            prop1_vacuous: boolean(fields[9])?,
        })
    }
}

/// Logits of every instance under the current state, in dataset order.
fn score_dataset(
    state: &ServerState,
    data: &LabeledDataset,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    data.instances()
        .par_iter()
        .map(|x| {
            let g = embed(&state.params, x)?;
            Ok(score(&state.class_embeddings, &g)?)
        })
        .collect()
}

/// Classes ranked best-first: descending logit, ascending id on ties.
fn ranked_classes(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).expect("finite logits").then(a.cmp(&b)));
    order
}

fn precision_from_logits(logits: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(s, &y)| {
            let k = k.min(s.len());
            ranked_classes(s)[..k].contains(&y)
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Fraction of instances whose true label ranks among the top `k` logits;
/// ties broken toward the lower class id. `k` larger than `C` counts as `C`.
pub fn precision_at_k(
    state: &ServerState,
    data: &LabeledDataset,
    k: usize,
) -> Result<f64, MetricsError> {
    let logits = score_dataset(state, data)?;
    Ok(precision_from_logits(&logits, data.labels(), k))
}

fn epsilon_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits.iter().zip(labels).map(|(s, &y)| (1.0 - s[y]).clamp(0.0, 2.0)).sum();
    total / labels.len() as f64
}

fn rho_of(class_embeddings: &ClassEmbeddingMatrix) -> Result<f64, MetricsError> {
    let c = class_embeddings.num_classes();
    if c < 2 {
        return Err(MetricsError::SingleClass);
    }
    let mut rho = f64::INFINITY;
    for a in 0..c {
        for b in (a + 1)..c {
            let d = math::cosine_distance(class_embeddings.row(a), class_embeddings.row(b))
                .map_err(ModelError::from)?;
            rho = rho.min(d);
        }
    }
    Ok(rho)
}

/// `epsilon`: mean cosine distance from each instance embedding to its true
/// class row. `rho`: exact minimum over all class-row pairs.
pub fn epsilon_rho(
    state: &ServerState,
    data: &LabeledDataset,
) -> Result<(f64, f64), MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let logits = score_dataset(state, data)?;
    Ok((epsilon_from_logits(&logits, data.labels()), rho_of(&state.class_embeddings)?))
}

/// Outcome of the error-bound check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Report {
    /// Empirical misclassification rate, ties counted as errors.
    pub rate: f64,
    /// `2 epsilon / rho`.
    pub bound: f64,
    pub pass: bool,
    /// The bound exceeds 1 and therefore constrains nothing.
    pub vacuous: bool,
}

fn prop1_from_logits(
    logits: &[Vec<f64>],
    labels: &[usize],
    rho: f64,
) -> Result<Prop1Report, MetricsError> {
    if rho == 0.0 {
        return Err(MetricsError::RhoZero);
    }
    let errors = logits
        .iter()
        .zip(labels)
        .filter(|(s, &y)| {
            // The bound's event: some other class at least as close,
            // i.e. some other logit at least as large. Ties are errors.
            s.iter().enumerate().any(|(z, &sz)| z != y && sz >= s[y])
        })
        .count();
    let rate = errors as f64 / labels.len() as f64;
    let epsilon = epsilon_from_logits(logits, labels);
    let bound = 2.0 * epsilon / rho;
    Ok(Prop1Report { rate, bound, pass: rate <= bound + INEQ_SLACK, vacuous: bound > 1.0 })
}

/// Check the misclassification bound on a concrete state and dataset.
pub fn check_prop1(
    state: &ServerState,
    data: &LabeledDataset,
) -> Result<Prop1Report, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let logits = score_dataset(state, data)?;
    let rho = rho_of(&state.class_embeddings)?;
    prop1_from_logits(&logits, data.labels(), rho)
}

/// Sweep result of an inequality checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    pub trials: usize,
    pub violations: usize,
    /// Minimum of (rhs - lhs) over the sweep; negative beyond the shared
    /// slack counts as a violation.
    pub worst_slack: f64,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Random-logit sweep of the surrogate inequality, corner cases included:
/// exact ties with the maximum, all-equal vectors, and the true class set to
/// the argmax or the argmin.
pub fn check_lemma2(trials: usize, rng: &mut RngState) -> SweepReport {
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for t in 0..trials {
        let c = 2 + rng.index(14);
        let mut s: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y = rng.index(c);
        match t % 8 {
            0 => {
                // Exact tie between y and the maximum.
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s[y] = max;
            }
            1 => {
                // All logits equal.
                let v = s[0];
                s.iter_mut().for_each(|x| *x = v);
            }
            2 => s[y] = 1.0,
            3 => s[y] = -1.0,
            _ => {}
        }
        let nu = Margin::theory(rng.uniform(1.0 + 1e-9, 2.0 - 1e-9)).expect("in range");
        let (lhs, rhs) = crate::losses::surrogate_gap(&s, y, nu).expect("valid inputs");
        let slack = lhs - rhs;
        worst = worst.min(slack);
        if slack < -INEQ_SLACK {
            violations += 1;
        }
    }
    SweepReport { trials, violations, worst_slack: worst }
}

/// Both sides of the objective identity, evaluated independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop3Report {
    /// Composite objective: weighted positive risks plus `reg_sp / C`.
    pub lhs: f64,
    /// Empirical risk of the spreadout loss over the pooled data.
    pub rhs: f64,
    pub diff: f64,
}

impl Prop3Report {
    pub fn passed(&self) -> bool {
        self.diff <= PROP3_TOLERANCE
    }
}

/// Equality of the federated composite objective and the pooled empirical
/// risk under `lambda = 1/C`, balanced shards, and the `(1 - s_y)^2`
/// positive loss. Refuses unbalanced shards: the identity needs every class
/// to carry exactly `n / C` instances.
pub fn check_prop3(
    params: &EmbedderParams,
    class_embeddings: &ClassEmbeddingMatrix,
    shards: &[ClientShard],
    nu: Margin,
) -> Result<Prop3Report, MetricsError> {
    let classes = class_embeddings.num_classes();
    let mut per_class = vec![0usize; classes];
    for s in shards {
        if s.class_id() >= classes {
            return Err(MetricsError::UnbalancedShards(format!(
                "shard class {} out of range",
                s.class_id()
            )));
        }
        per_class[s.class_id()] += s.len();
    }
    let first = per_class.first().copied().unwrap_or(0);
    if first == 0 || per_class.iter().any(|&n| n != first) {
        return Err(MetricsError::UnbalancedShards(format!("per-class counts {per_class:?}")));
    }
    let n: usize = per_class.iter().sum();

    // Left side: sum_i (n_i / n) * Rpos(S_i) + (1/C) * reg_sp(W).
    let mut lhs = 0.0;
    for shard in shards {
        let w_y = class_embeddings.row(shard.class_id());
        let mut r_pos = 0.0;
        for x in shard.instances() {
            let g = embed(params, x)?;
            let s = math::dot(&g, w_y).map_err(ModelError::from)?;
            r_pos += (1.0 - s) * (1.0 - s);
        }
        r_pos /= shard.len() as f64;
        lhs += shard.len() as f64 / n as f64 * r_pos;
    }
    lhs += reg_sp(class_embeddings.as_matrix(), nu) / classes as f64;

    // Right side: (1/n) sum over every (x, y) of l_sp(f(x), y).
    let mut rhs = 0.0;
    for shard in shards {
        let y = shard.class_id();
        for x in shard.instances() {
            let g = embed(params, x)?;
            let s_y = math::dot(&g, class_embeddings.row(y)).map_err(ModelError::from)?;
            rhs += lsp_loss(s_y, class_embeddings.as_matrix(), y, nu)?;
        }
    }
    rhs /= n as f64;

    Ok(Prop3Report { lhs, rhs, diff: (lhs - rhs).abs() })
}

/// Per-instance sweep of the approximation bound
/// `|l_sp - l_ccl| <= (1 + 2 nu) sum_{c != y} |w_c . (w_y - g)|`.
pub fn check_thm4(
    state: &ServerState,
    data: &LabeledDataset,
    nu: Margin,
) -> Result<SweepReport, MetricsError> {
    if !nu.in_theory_range() {
        return Err(MetricsError::Loss(LossError::MarginOutOfTheoryRange { value: nu.value() }));
    }
    let w = &state.class_embeddings;
    let results: Vec<f64> = data
        .instances()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(x, &y)| -> Result<f64, MetricsError> {
            let g = embed(&state.params, x)?;
            let s = score(w, &g)?;
            let lhs = (lsp_loss(s[y], w.as_matrix(), y, nu)? - ccl_loss(&s, y, nu)?).abs();
            let w_y = w.row(y);
            let residual: Vec<f64> = w_y.iter().zip(&g).map(|(a, b)| a - b).collect();
            let mut sum = 0.0;
            for c in 0..w.num_classes() {
                if c != y {
                    let b = math::dot(w.row(c), &residual).map_err(ModelError::from)?;
                    sum += b.abs();
                }
            }
            let rhs = (1.0 + 2.0 * nu.value()) * sum;
            Ok(rhs - lhs) // slack; negative means violation
        })
        .collect::<Result<_, _>>()?;
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for slack in &results {
        worst = worst.min(*slack);
        if *slack < -INEQ_SLACK {
            violations += 1;
        }
    }
    Ok(SweepReport { trials: results.len(), violations, worst_slack: worst })
}

/// The four sign cases of the scalar hinge-difference bound.
pub const CLAIM5_CASES: [&str; 4] = [
    "a < 0, a + b < 0",
    "a > 0, a + b > 0",
    "a < 0, a + b > 0",
    "a > 0, a + b < 0",
];

/// Stratified sweep of `|max(0, a+b)^2 - max(0, a)^2| <= (1 + 2 nu) |b|`
/// with `a = nu - 1 + s_c`, `s_c` in `[-1, 1]`, `|b| <= 2`. Each case gets
/// `trials / 4` draws by rejection.
pub fn check_claim5(trials: usize, rng: &mut RngState) -> [SweepReport; 4] {
    let per_case = trials / 4;
    let mut reports = [SweepReport { trials: 0, violations: 0, worst_slack: f64::INFINITY }; 4];
    for (case, report) in reports.iter_mut().enumerate() {
        let mut done = 0;
        while done < per_case {
            let nu = rng.uniform(1.0 + 1e-9, 2.0 - 1e-9);
            let a = nu - 1.0 + rng.uniform(-1.0, 1.0);
            let b = rng.uniform(-2.0, 2.0);
            let matches = match case {
                0 => a < 0.0 && a + b < 0.0,
                1 => a > 0.0 && a + b > 0.0,
                2 => a < 0.0 && a + b > 0.0,
                _ => a > 0.0 && a + b < 0.0,
            };
            if !matches {
                continue;
            }
            let plus = (a + b).max(0.0);
            let base = a.max(0.0);
            let delta = (plus * plus - base * base).abs();
            let slack = (1.0 + 2.0 * nu) * b.abs() - delta;
            report.worst_slack = report.worst_slack.min(slack);
            if slack < -INEQ_SLACK {
                report.violations += 1;
            }
            report.trials += 1;
            done += 1;
        }
    }
    reports
}

/// Per-round record: ranking precision, bound geometry, mean positive loss,
/// regularizer value, and the error-bound flags.
///
/// When `rho` is exactly zero the bound is infinite: the check passes
/// trivially and is flagged vacuous.
pub fn round_record(
    round: usize,
    state: &ServerState,
    data: &LabeledDataset,
    pos_loss: &PositiveLoss,
    nu: Margin,
) -> Result<MetricsRecord, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let logits = score_dataset(state, data)?;
    let labels = data.labels();
    let epsilon = epsilon_from_logits(&logits, labels);
    let rho = rho_of(&state.class_embeddings)?;
    let rpos = logits.iter().zip(labels).map(|(s, &y)| pos_loss.value_grad(s[y]).0).sum::<f64>()
        / labels.len() as f64;
    let (prop1_pass, prop1_vacuous) = match prop1_from_logits(&logits, labels, rho) {
        Ok(report) => (report.pass, report.vacuous),
        Err(MetricsError::RhoZero) => (true, true),
        Err(other) => return Err(other),
    };
    Ok(MetricsRecord {
        round,
        p1: precision_from_logits(&logits, labels, 1),
        p3: precision_from_logits(&logits, labels, 3),
        p5: precision_from_logits(&logits, labels, 5),
        epsilon,
        rho,
        rpos,
        reg: reg_sp(state.class_embeddings.as_matrix(), nu),
        prop1_pass,
        prop1_vacuous,
    })
}

/// Trial counts for [`verify_all`]; the defaults are the certification
/// gate's required sweep sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub nu: Margin,
    pub lemma2_trials: usize,
    pub thm4_instances: usize,
    pub claim5_trials: usize,
    pub prop1_draws: usize,
    pub prop3_draws: usize,
}

impl VerifyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            nu: Margin::default(),
            lemma2_trials: 100_000,
            thm4_instances: 10_000,
            claim5_trials: 100_000,
            prop1_draws: 500,
            prop3_draws: 5,
        }
    }
}

/// Outcome of one named checker inside the full verification run.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub violations: usize,
    /// Worst slack observed (rhs - lhs for inequalities, -diff for the
    /// equality); more negative is worse.
    pub worst_slack: f64,
    pub detail: String,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Results of the full certification sweep.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| !c.passed())
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:10} {:>8} trials  {:>3} violations  worst slack {:+.3e}  {}",
                c.name,
                c.trials,
                c.violations,
                c.worst_slack,
                if c.passed() { "ok" } else { "VIOLATED" }
            )?;
            if !c.detail.is_empty() {
                writeln!(f, "{:10} {}", "", c.detail)?;
            }
        }
        write!(f, "total time {:.2}s", self.elapsed.as_secs_f64())
    }
}

fn random_state(rng: &mut RngState, classes: usize, vocab: usize, dim: usize) -> ServerState {
    let label = rng.index(1 << 30) as u64;
    let mut params_rng = rng.derive(label);
    let params = EmbedderParams::init(vocab, 6, &[8, dim], &mut params_rng);
    let class_embeddings = ClassEmbeddingMatrix::random_unit(classes, dim, &mut params_rng);
    ServerState::detached(params, class_embeddings)
}

fn random_dataset(
    rng: &mut RngState,
    classes: usize,
    vocab: usize,
    n_per: usize,
) -> LabeledDataset {
    let spec = crate::data::SyntheticSpec {
        classes,
        vocab,
        per_class: n_per,
        noise_sigma: rng.uniform(0.0, 0.5),
        seed: rng.index(1 << 30) as u64,
    };
    crate::data::gen_synthetic(&spec).expect("valid spec").dataset
}

/// Run every checker at the configured sweep sizes.
pub fn verify_all(config: &VerifyConfig) -> Result<VerificationReport, MetricsError> {
    let start = Instant::now();
    let mut checks = Vec::new();
    let root = RngState::new(config.seed);

    // Surrogate inequality.
    let mut rng = root.derive(101);
    let lemma2 = check_lemma2(config.lemma2_trials, &mut rng);
    checks.push(CheckOutcome {
        name: "lemma2",
        trials: lemma2.trials,
        violations: lemma2.violations,
        worst_slack: lemma2.worst_slack,
        detail: String::new(),
    });

    // Approximation bound over random models and datasets.
    let mut rng = root.derive(102);
    let mut thm4_total = SweepReport { trials: 0, violations: 0, worst_slack: f64::INFINITY };
    while thm4_total.trials < config.thm4_instances {
        let classes = 4 + rng.index(8);
        let vocab = 10;
        let state = random_state(&mut rng, classes, vocab, 7);
        let data = random_dataset(&mut rng, classes, vocab, 50);
        let nu = Margin::theory(rng.uniform(1.0 + 1e-9, 2.0 - 1e-9)).expect("in range");
        let r = check_thm4(&state, &data, nu)?;
        thm4_total.trials += r.trials;
        thm4_total.violations += r.violations;
        thm4_total.worst_slack = thm4_total.worst_slack.min(r.worst_slack);
    }
    checks.push(CheckOutcome {
        name: "theorem4",
        trials: thm4_total.trials,
        violations: thm4_total.violations,
        worst_slack: thm4_total.worst_slack,
        detail: String::new(),
    });

    // Scalar hinge-difference bound, per sign case.
    let mut rng = root.derive(103);
    let claim5 = check_claim5(config.claim5_trials, &mut rng);
    for (case, report) in claim5.iter().enumerate() {
        checks.push(CheckOutcome {
            name: "claim5",
            trials: report.trials,
            violations: report.violations,
            worst_slack: report.worst_slack,
            detail: format!("case {}: {}", case + 1, CLAIM5_CASES[case]),
        });
    }

    // Error bound over random model/data draws.
    let mut rng = root.derive(104);
    let mut prop1_violations = 0;
    let mut prop1_vacuous = 0;
    let mut prop1_worst = f64::INFINITY;
    for _ in 0..config.prop1_draws {
        let classes = 2 + rng.index(7);
        let vocab = 8;
        let state = random_state(&mut rng, classes, vocab, 6);
        let data = random_dataset(&mut rng, classes, vocab, 6);
        let report = check_prop1(&state, &data)?;
        prop1_worst = prop1_worst.min(report.bound - report.rate);
        if !report.pass {
            prop1_violations += 1;
        }
        if report.vacuous {
            prop1_vacuous += 1;
        }
    }
    checks.push(CheckOutcome {
        name: "prop1",
        trials: config.prop1_draws,
        violations: prop1_violations,
        worst_slack: prop1_worst,
        detail: format!("{prop1_vacuous} draws had a vacuous bound (> 1)"),
    });

    // Objective identity on balanced toys.
    let mut rng = root.derive(105);
    let mut prop3_violations = 0;
    let mut prop3_worst = f64::INFINITY;
    for _ in 0..config.prop3_draws {
        let classes = 2 + rng.index(4);
        let vocab = 8;
        let state = random_state(&mut rng, classes, vocab, 6);
        let data = random_dataset(&mut rng, classes, vocab, 4);
        let shards = crate::data::shard_by_label(&data).shards;
        let report = check_prop3(&state.params, &state.class_embeddings, &shards, config.nu)?;
        prop3_worst = prop3_worst.min(-report.diff);
        if !report.passed() {
            prop3_violations += 1;
        }
    }
    checks.push(CheckOutcome {
        name: "prop3",
        trials: config.prop3_draws,
        violations: prop3_violations,
        worst_slack: prop3_worst,
        detail: format!("tolerance {PROP3_TOLERANCE:.0e}"),
    });

    Ok(VerificationReport { checks, elapsed: start.elapsed() })
}

//! Monte-Carlo driver: one fixed signal per setting, fresh design and noise
//! per replication, TWF on the full sample against split-and-swap
//! debiasing on the same sample, pooled by coordinate-magnitude group.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{coordinate_ci, simultaneous_max_ci, swap_estimate};
use crate::model::{
    align_sign, generate_instance, generate_signal, mix_seed, nsr_to_sigma, seeded_rng,
    Instance, SignalVector,
};
use crate::special::normal_quantile;
use crate::twf::{run_twf, TwfTuning};

/// Stream id reserved for the signal draw; replications use their own id.
const SIGNAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTarget {
    pub label: String,
    pub target: f64,
    pub count: usize,
}

impl GroupTarget {
    pub fn new(label: &str, target: f64, count: usize) -> Self {
        Self {
            label: label.to_string(),
            target,
            count,
        }
    }
}

pub fn default_group_targets() -> Vec<GroupTarget> {
    vec![
        GroupTarget::new("large", 3.0, 4),
        GroupTarget::new("median", 1.0, 4),
        GroupTarget::new("small", 0.1, 4),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub p: usize,
    /// Rows per half; every replication draws `2n` rows.
    pub n: usize,
    pub s: usize,
    pub nsr: Option<f64>,
    pub sigma: Option<f64>,
    pub reps: usize,
    pub master_seed: u64,
    pub tuning: TwfTuning,
    pub alpha: f64,
    pub group_targets: Vec<GroupTarget>,
}

impl ExperimentConfig {
    /// A config with default tuning, `alpha = 0.05`, 100 replications and
    /// the default large/median/small groups.
    pub fn new(p: usize, n: usize, s: usize) -> Self {
        Self {
            p,
            n,
            s,
            nsr: None,
            sigma: None,
            reps: 100,
            master_seed: 0,
            tuning: TwfTuning::default(),
            alpha: 0.05,
            group_targets: default_group_targets(),
        }
    }

    pub fn with_nsr(mut self, nsr: f64) -> Self {
        self.nsr = Some(nsr);
        self.sigma = None;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Some(sigma);
        self.nsr = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.p == 0 || self.n < 2 || self.s == 0 || self.reps == 0 {
            return bad(format!(
                "p, s and reps must be positive and n at least 2 (p = {}, n = {}, s = {}, reps = {})",
                self.p, self.n, self.s, self.reps
            ));
        }
        if self.s > self.p {
            return bad(format!("s = {} exceeds p = {}", self.s, self.p));
        }
        match (self.nsr, self.sigma) {
            (Some(v), None) | (None, Some(v)) if v >= 0.0 && v.is_finite() => {}
            (Some(_), Some(_)) => return bad("set exactly one of nsr and sigma, not both".into()),
            (None, None) => return bad("one of nsr and sigma is required".into()),
            _ => return bad("noise level must be finite and nonnegative".into()),
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        let tracked: usize = self.group_targets.iter().map(|g| g.count).sum();
        if tracked > self.s {
            return bad(format!(
                "group counts add up to {tracked}, more than the sparsity s = {}",
                self.s
            ));
        }
        self.tuning
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments
    /// are ignored; tuning constants use `tuning.<field>` keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(0, 0, 0);
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        for key in ["p", "n", "s"] {
            if !seen.contains(key) {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("cannot parse `{v}` as a value for `{key}`"))
        }
        match key {
            "p" => self.p = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "s" => self.s = num(key, value)?,
            "nsr" => self.nsr = Some(num(key, value)?),
            "sigma" => self.sigma = Some(num(key, value)?),
            "reps" => self.reps = num(key, value)?,
            "master_seed" => self.master_seed = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "group_targets" => self.group_targets = parse_groups(value)?,
            "tuning.mu" => self.tuning.mu = num(key, value)?,
            "tuning.alpha_init" => self.tuning.alpha_init = num(key, value)?,
            "tuning.c_thr" => self.tuning.c_thr = num(key, value)?,
            "tuning.max_iter" => self.tuning.max_iter = num(key, value)?,
            "tuning.tol" => self.tuning.tol = num(key, value)?,
            "tuning.power_iter_tol" => self.tuning.power_iter_tol = num(key, value)?,
            "tuning.power_iter_max" => self.tuning.power_iter_max = num(key, value)?,
            "tuning.check_descent" => self.tuning.check_descent = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Renders the config in the format accepted by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "p = {}", self.p);
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "s = {}", self.s);
        if let Some(v) = self.nsr {
            let _ = writeln!(out, "nsr = {v}");
        }
        if let Some(v) = self.sigma {
            let _ = writeln!(out, "sigma = {v}");
        }
        let _ = writeln!(out, "reps = {}", self.reps);
        let _ = writeln!(out, "master_seed = {}", self.master_seed);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let groups: Vec<String> = self
            .group_targets
            .iter()
            .map(|g| format!("{}:{}:{}", g.label, g.target, g.count))
            .collect();
        let _ = writeln!(out, "group_targets = {}", groups.join(","));
        let t = &self.tuning;
        let _ = writeln!(out, "tuning.mu = {}", t.mu);
        let _ = writeln!(out, "tuning.alpha_init = {}", t.alpha_init);
        let _ = writeln!(out, "tuning.c_thr = {}", t.c_thr);
        let _ = writeln!(out, "tuning.max_iter = {}", t.max_iter);
        let _ = writeln!(out, "tuning.tol = {}", t.tol);
        let _ = writeln!(out, "tuning.power_iter_tol = {}", t.power_iter_tol);
        let _ = writeln!(out, "tuning.power_iter_max = {}", t.power_iter_max);
        let _ = writeln!(out, "tuning.check_descent = {}", t.check_descent);
        out
    }
}

fn parse_groups(value: &str) -> std::result::Result<Vec<GroupTarget>, String> {
    value
        .split(',')
        .map(|triple| {
            let parts: Vec<&str> = triple.trim().split(':').map(str::trim).collect();
            match parts.as_slice() {
                [label, target, count] if !label.is_empty() => Ok(GroupTarget {
                    label: label.to_string(),
                    target: target
                        .parse()
                        .map_err(|_| format!("bad group target `{target}`"))?,
                    count: count
                        .parse()
                        .map_err(|_| format!("bad group count `{count}`"))?,
                }),
                _ => Err(format!("expected `label:target:count`, got `{triple}`")),
            }
        })
        .collect()
}

/// Tracked coordinates, one index list per group in config order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedCoordinates {
    pub groups: Vec<(String, Vec<usize>)>,
}

impl TrackedCoordinates {
    /// All tracked indices, group by group.
    pub fn flat(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|(_, idx)| idx.iter().copied()).collect()
    }

    /// Positions in [`TrackedCoordinates::flat`] that belong to group `g`.
    pub fn positions(&self, g: usize) -> std::ops::Range<usize> {
        let start: usize = self.groups[..g].iter().map(|(_, idx)| idx.len()).sum();
        start..start + self.groups[g].1.len()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|(_, idx)| idx.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Greedy assignment, in listed order, of the support coordinates whose
/// magnitudes are closest to each group target; ties go to the lower index.
pub fn select_groups(beta: &SignalVector, targets: &[GroupTarget]) -> Result<TrackedCoordinates> {
    let mut free = beta.support();
    let needed: usize = targets.iter().map(|t| t.count).sum();
    if needed > free.len() {
        return Err(Error::invalid(format!(
            "groups need {needed} support coordinates but the signal has {}",
            free.len()
        )));
    }
    let mut groups = Vec::with_capacity(targets.len());
    for t in targets {
        // stable sort keeps ascending index order among equal distances
        free.sort_by(|&a, &b| {
            let da = (beta[a].abs() - t.target).abs();
            let db = (beta[b].abs() - t.target).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = free.drain(..t.count).collect();
        chosen.sort_unstable();
        groups.push((t.label.clone(), chosen));
        free.sort_unstable();
    }
    Ok(TrackedCoordinates { groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep_id: u64,
    /// Full-sample TWF errors on the tracked coordinates; empty when the
    /// replication skipped the full-sample fit.
    pub errors_twf: Vec<f64>,
    /// Combined debiased errors on the tracked coordinates.
    pub errors_detwf: Vec<f64>,
    /// First-round debiased errors, before the swap combination.
    pub errors_first: Vec<f64>,
    pub covered: Vec<bool>,
    pub ci_halfwidths: Vec<f64>,
    /// `sigma sqrt(tau^2 / n)` per tracked coordinate.
    pub std_errors: Vec<f64>,
    /// Largest combined error over all `p` coordinates.
    pub max_abs_error: f64,
    pub simultaneous_halfwidth: f64,
    pub s_hat: usize,
    /// Whether the full-sample TWF support lies inside the true support.
    pub support_contained: Option<bool>,
}

/// A fixed signal and its tracked coordinates for one experimental setting.
#[derive(Debug, Clone)]
pub struct Study {
    pub cfg: ExperimentConfig,
    pub beta: SignalVector,
    pub sigma: f64,
    pub tracked: TrackedCoordinates,
}

impl Study {
    /// Draws the setting's signal from the master seed.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(mix_seed(cfg.master_seed, SIGNAL_STREAM));
        let beta = generate_signal(cfg.p, cfg.s, &mut rng)?;
        Self::with_signal(cfg, beta)
    }

    pub fn with_signal(cfg: ExperimentConfig, beta: SignalVector) -> Result<Self> {
        cfg.validate()?;
        if beta.len() != cfg.p {
            return Err(Error::invalid("signal length does not match p"));
        }
        let sigma = match (cfg.nsr, cfg.sigma) {
            (Some(nsr), _) => nsr_to_sigma(nsr, &beta)?,
            (None, Some(s)) => s,
            (None, None) => unreachable!("validated"),
        };
        let tracked = select_groups(&beta, &cfg.group_targets)?;
        Ok(Self {
            cfg,
            beta,
            sigma,
            tracked,
        })
    }

    /// The `2n`-row instance of replication `rep_id`.
    pub fn instance(&self, rep_id: u64) -> Result<Instance> {
        let seed = mix_seed(self.cfg.master_seed, rep_id);
        generate_instance(&self.beta, 2 * self.cfg.n, self.sigma, &mut seeded_rng(seed))
    }

    pub fn run_replication(&self, rep_id: u64) -> Result<ReplicationRecord> {
        self.run_replication_with(rep_id, true)
    }

    /// One replication; `full_twf = false` skips the full-sample TWF fit,
    /// which only the summary table needs.
    pub fn run_replication_with(&self, rep_id: u64, full_twf: bool) -> Result<ReplicationRecord> {
        let tag = |stage: &'static str| {
            move |e: Error| Error::Replication {
                rep_id,
                stage,
                source: Box::new(e),
            }
        };
        let inst = self.instance(rep_id).map_err(tag("generate"))?;
        let idx = self.tracked.flat();

        let (errors_twf, support_contained) = if full_twf {
            let fit = run_twf(&inst, &self.cfg.tuning).map_err(tag("twf"))?;
            let star = align_sign(&fit.beta_tilde, &self.beta).map_err(tag("twf"))?;
            let errors = idx.iter().map(|&k| fit.beta_tilde[k] - star[k]).collect();
            let truth: std::collections::BTreeSet<usize> = self.beta.support().into_iter().collect();
            let contained = fit.beta_tilde.support().iter().all(|k| truth.contains(k));
            (errors, Some(contained))
        } else {
            (Vec::new(), None)
        };

        let mut split_rng = seeded_rng(mix_seed(mix_seed(self.cfg.master_seed, rep_id), 1));
        let swap = swap_estimate(&inst, &self.cfg.tuning, Some(self.sigma), &mut split_rng)
            .map_err(tag("swap"))?;
        let est = &swap.estimate;
        let star = align_sign(&swap.first.beta_tilde, &self.beta).map_err(tag("swap"))?;

        let alpha = self.cfg.alpha;
        let z = normal_quantile(1.0 - alpha / 2.0).map_err(tag("inference"))?;
        let mut errors_detwf = Vec::with_capacity(idx.len());
        let mut errors_first = Vec::with_capacity(idx.len());
        let mut covered = Vec::with_capacity(idx.len());
        let mut halfwidths = Vec::with_capacity(idx.len());
        let mut std_errors = Vec::with_capacity(idx.len());
        for &k in &idx {
            let ci = coordinate_ci(est, k, alpha).map_err(tag("inference"))?;
            errors_detwf.push(est.beta_swap[k] - star[k]);
            errors_first.push(est.beta_hat1[k] - star[k]);
            covered.push(ci.contains(star[k]));
            halfwidths.push(ci.half_width());
            std_errors.push(ci.half_width() / z);
        }
        let max_abs_error = est
            .beta_swap
            .iter()
            .zip(star.values())
            .map(|(b, t)| (b - t).abs())
            .fold(0.0, f64::max);
        let simultaneous_halfwidth = simultaneous_max_ci(est, alpha).map_err(tag("inference"))?;

        Ok(ReplicationRecord {
            rep_id,
            errors_twf,
            errors_detwf,
            errors_first,
            covered,
            ci_halfwidths: halfwidths,
            std_errors,
            max_abs_error,
            simultaneous_halfwidth,
            s_hat: est.s_hat,
            support_contained,
        })
    }

    /// Runs every replication on a pool of `threads` workers (0 = one per
    /// core). Records come back in `rep_id` order whatever the schedule.
    pub fn run_all(&self, threads: usize, full_twf: bool) -> Result<Vec<ReplicationRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            (0..self.cfg.reps as u64)
                .into_par_iter()
                .map(|rep| self.run_replication_with(rep, full_twf))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TWF")]
    Twf,
    #[serde(rename = "de-TWF")]
    DeTwf,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Twf => "TWF",
            Method::DeTwf => "de-TWF",
        }
    }

    fn errors(self, rec: &ReplicationRecord) -> &[f64] {
        match self {
            Method::Twf => &rec.errors_twf,
            Method::DeTwf => &rec.errors_detwf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub method: Method,
    pub bias: f64,
    pub sd: f64,
    pub mae: f64,
    pub n_pool: usize,
    /// False when the pool has a single error and `sd` is reported as 0.
    pub sd_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, group: &str, method: Method) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.method == method)
    }
}

/// Median of a nonempty sample; even sizes average the middle pair.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[m - 1] + values[m]) / 2.0
    } else {
        values[m]
    }
}

/// Mean, sample standard deviation (0 for a single value) and median
/// absolute value of a pool of errors.
pub fn pool_stats(errors: &[f64]) -> Result<(f64, f64, f64)> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot summarize an empty pool of errors"));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let sd = if errors.len() > 1 {
        (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    Ok((mean, sd, median(&mut abs)))
}

fn pooled<'a>(
    records: &'a [ReplicationRecord],
    positions: std::ops::Range<usize>,
    pick: impl Fn(&'a ReplicationRecord) -> &'a [f64] + 'a,
) -> Vec<f64> {
    records
        .iter()
        .flat_map(|r| pick(r)[positions.clone()].iter().copied())
        .collect()
}

/// Bias, sd and median absolute error per (group, method). Methods whose
/// errors were not recorded are left out.
pub fn summarize(records: &[ReplicationRecord], tracked: &TrackedCoordinates) -> Result<SummaryTable> {
    if records.is_empty() {
        return Err(Error::invalid("no replication records to summarize"));
    }
    let mut rows = Vec::new();
    for (g, (label, _)) in tracked.groups.iter().enumerate() {
        for method in [Method::Twf, Method::DeTwf] {
            if records.iter().any(|r| method.errors(r).len() != tracked.len()) {
                continue;
            }
            let pool = pooled(records, tracked.positions(g), move |r| method.errors(r));
            let (bias, sd, mae) = pool_stats(&pool)?;
            rows.push(SummaryRow {
                group: label.clone(),
                method,
                bias,
                sd,
                mae,
                n_pool: pool.len(),
                sd_defined: pool.len() > 1,
            });
        }
    }
    Ok(SummaryTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub group: String,
    pub coverage_pct: f64,
    pub n_pool: usize,
    pub alpha: f64,
}

fn coverage_rows(
    tracked: &TrackedCoordinates,
    records: &[ReplicationRecord],
    alpha: f64,
    hit: impl Fn(&ReplicationRecord, usize) -> bool,
) -> Result<Vec<CoverageRow>> {
    if records.is_empty() {
        return Err(Error::invalid("no replication records for coverage"));
    }
    let row = |label: &str, positions: std::ops::Range<usize>| {
        let n_pool = records.len() * positions.len();
        let hits: usize = records
            .iter()
            .map(|r| positions.clone().filter(|&i| hit(r, i)).count())
            .sum();
        CoverageRow {
            group: label.to_string(),
            coverage_pct: if n_pool == 0 { 0.0 } else { 100.0 * hits as f64 / n_pool as f64 },
            n_pool,
            alpha,
        }
    };
    let mut rows = vec![row("all", 0..tracked.len())];
    for (g, (label, _)) in tracked.groups.iter().enumerate() {
        rows.push(row(label, tracked.positions(g)));
    }
    Ok(rows)
}

/// Percentage of (replication, coordinate) pairs whose interval covered the
/// truth: pooled over all tracked coordinates first, then per group.
pub fn coverage_table(
    records: &[ReplicationRecord],
    tracked: &TrackedCoordinates,
    alpha: f64,
) -> Result<Vec<CoverageRow>> {
    coverage_rows(tracked, records, alpha, |r, i| r.covered[i])
}

/// Coverage the same records would have at another level, recomputed from
/// the stored standard errors.
pub fn coverage_table_at(
    records: &[ReplicationRecord],
    tracked: &TrackedCoordinates,
    alpha: f64,
) -> Result<Vec<CoverageRow>> {
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    coverage_rows(tracked, records, alpha, |r, i| {
        r.errors_detwf[i].abs() <= z * r.std_errors[i]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; every bin is half-open except the
/// last, which is closed.
pub fn histogram_bins(errors: &[f64], bin_count: usize) -> Result<Vec<Bin>> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot bin an empty sample"));
    }
    if bin_count == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numeric("cannot bin non-finite errors".into()));
    }
    let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1e-12;
    }
    let width = (hi - lo) / bin_count as f64;
    let mut counts = vec![0usize; bin_count];
    for &e in errors {
        let i = (((e - lo) / width).floor() as usize).min(bin_count - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bin_count { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub group: String,
    pub method: Method,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Binned errors for every recorded (group, method) pool.
pub fn histogram_table(
    records: &[ReplicationRecord],
    tracked: &TrackedCoordinates,
    bin_count: usize,
) -> Result<Vec<HistogramRow>> {
    if records.is_empty() {
        return Err(Error::invalid("no replication records to bin"));
    }
    let mut rows = Vec::new();
    for (g, (label, _)) in tracked.groups.iter().enumerate() {
        for method in [Method::Twf, Method::DeTwf] {
            if records.iter().any(|r| method.errors(r).len() != tracked.len()) {
                continue;
            }
            let pool = pooled(records, tracked.positions(g), move |r| method.errors(r));
            for bin in histogram_bins(&pool, bin_count)? {
                rows.push(HistogramRow {
                    group: label.clone(),
                    method,
                    bin_lo: bin.lo,
                    bin_hi: bin.hi,
                    count: bin.count,
                });
            }
        }
    }
    Ok(rows)
}

// `{}` on f64 prints the shortest string that parses back to the same value.

pub fn table1_csv(table: &SummaryTable) -> String {
    let mut out = String::from("group,method,bias,sd,mae,n_pool\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.group,
            r.method.label(),
            r.bias,
            r.sd,
            r.mae,
            r.n_pool
        );
    }
    out
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from("group,coverage_pct,n_pool,alpha\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.group, r.coverage_pct, r.n_pool, r.alpha);
    }
    out
}

pub fn histograms_csv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("group,method,bin_lo,bin_hi,count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.group,
            r.method.label(),
            r.bin_lo,
            r.bin_hi,
            r.count
        );
    }
    out
}

/// On-disk instance: the design is stored row-major in `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub p: usize,
    pub n: usize,
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(rename = "X")]
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl InstanceFile {
    pub fn from_instance(inst: &Instance) -> Self {
        Self {
            p: inst.p(),
            n: inst.n(),
            sigma: inst.sigma,
            beta: inst.truth.as_ref().map(|b| b.values().to_vec()),
            x: inst.x().iter().copied().collect(),
            y: inst.y().to_vec(),
        }
    }

    pub fn into_instance(self) -> Result<Instance> {
        if self.x.len() != self.n * self.p {
            return Err(Error::invalid(format!(
                "X has {} entries, expected n * p = {}",
                self.x.len(),
                self.n * self.p
            )));
        }
        if self.y.len() != self.n {
            return Err(Error::invalid(format!(
                "y has {} entries, expected n = {}",
                self.y.len(),
                self.n
            )));
        }
        let x = ndarray::Array2::from_shape_vec((self.n, self.p), self.x)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut inst = Instance::new(x, ndarray::Array1::from(self.y))?;
        inst.sigma = self.sigma;
        if let Some(beta) = self.beta {
            if beta.len() != self.p {
                return Err(Error::invalid("beta length does not match p"));
            }
            inst.truth = Some(SignalVector::from_vec(beta));
        }
        Ok(inst)
    }

    pub fn read(path: &Path) -> Result<Instance> {
        let text = std::fs::read_to_string(path)?;
        let file: InstanceFile = serde_json::from_str(&text)?;
        file.into_instance()
    }

    pub fn write(inst: &Instance, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Self::from_instance(inst))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

//! Boundary error statistics, the Wilcoxon signed-rank test and timing
//! reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::pipeline::infer::{infer_volume, InferOptions, StageTimes};
use crate::tensor::Tensor;
use crate::topology::BoundarySet;

/// Axial size of one pixel, micrometres.
pub const DEFAULT_RESOLUTION_UM: f64 = 3.9;

/// Largest sample size tested by exact enumeration.
pub const EXACT_LIMIT: usize = 12;

const NINE_BOUNDARIES: [&str; 9] =
    ["Vitre-RNFL", "RNFL-GCL", "IPL-INL", "INL-OPL", "OPL-ONL", "ELM", "IS-OS", "OS-RPE", "RPE"];

/// Display name of boundary `k` out of `count`.
pub fn boundary_name(k: usize, count: usize) -> String {
    if count == NINE_BOUNDARIES.len() {
        NINE_BOUNDARIES[k].to_string()
    } else {
        format!("B{k}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub boundary: usize,
    pub column: usize,
    pub scan: usize,
    /// `(predicted - true)` position, micrometres.
    pub diff_um: f64,
}

/// One signed error per boundary and column.
pub fn signed_errors(pred: &BoundarySet, truth: &BoundarySet, scan: usize, resolution_um: f64) -> Result<Vec<ErrorSample>> {
    if (pred.layers(), pred.width()) != (truth.layers(), truth.width()) {
        return Err(Error::shape(
            "signed_errors",
            format!("{}x{} vs {}x{}", pred.layers(), pred.width(), truth.layers(), truth.width()),
        ));
    }
    let mut out = Vec::with_capacity(pred.data().len());
    for k in 0..pred.layers() {
        for j in 0..pred.width() {
            let diff_um = (pred.get(k, j) - truth.get(k, j)) * resolution_um;
            if !diff_um.is_finite() {
                return Err(Error::NonFinite(format!("error at boundary {k}, column {j}")));
            }
            out.push(ErrorSample { boundary: k, column: j, scan, diff_um });
        }
    }
    Ok(out)
}

/// MAD, RMSE, MSD and the 2.5/97.5 percentile interval of signed errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mad: f64,
    pub rmse: f64,
    pub msd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Percentile `p` (0..=100) of sorted data, interpolating linearly between
/// order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::invalid("aggregate", "empty sample set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aggregate input".into()));
    }
    let n = values.len() as f64;
    let mad = values.iter().map(|v| v.abs()).sum::<f64>() / n;
    let rmse = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let msd = values.iter().sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Aggregate {
        count: values.len(),
        mad,
        rmse,
        msd,
        q025: percentile(&sorted, 2.5),
        q975: percentile(&sorted, 97.5),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMode {
    /// Exact for up to [`EXACT_LIMIT`] non-zero differences, normal above.
    Auto,
    Exact,
    Normal,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
pub fn wilcoxon_signed(x: &[f64], y: &[f64]) -> Result<f64> {
    wilcoxon_signed_with(x, y, WilcoxonMode::Auto)
}

pub fn wilcoxon_signed_with(x: &[f64], y: &[f64], mode: WilcoxonMode) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("wilcoxon_signed", format!("{} vs {} paired values", x.len(), y.len())));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("wilcoxon input".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let exact = match mode {
        WilcoxonMode::Auto => n <= EXACT_LIMIT,
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
    };
    if exact {
        if n > 30 {
            return Err(Error::invalid("wilcoxon_signed", format!("exact mode limited to 30 differences, got {n}")));
        }
        Ok(exact_p(&ranks, w_plus))
    } else {
        Ok(normal_p(&ranks, w_plus))
    }
}

/// Counts sign assignments by dynamic programming over doubled ranks (ties
/// give half-integer ranks).
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (w_plus * 2.0).round() as usize;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    let tail = lower.min(upper);
    (2.0 * tail as f64 / (1u64 << ranks.len()) as f64).min(1.0)
}

fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: subtract (t³ - t) / 48 for each group of t tied ranks
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub stats: Aggregate,
    /// Wilcoxon p-value of per-scan MAD against a comparison method.
    pub p_mad: Option<f64>,
    /// Wilcoxon p-value of per-scan RMSE against a comparison method.
    pub p_rmse: Option<f64>,
}

/// One row per boundary plus a pooled overall row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub resolution_um: f64,
    pub scans: usize,
    pub rows: Vec<ReportRow>,
}

fn per_scan<F: Fn(&Aggregate) -> f64>(samples: &[ErrorSample], scans: usize, keep: impl Fn(&ErrorSample) -> bool, f: F) -> Result<Vec<f64>> {
    (0..scans)
        .map(|s| {
            let v: Vec<f64> = samples.iter().filter(|e| e.scan == s && keep(e)).map(|e| e.diff_um).collect();
            aggregate(&v).map(|a| f(&a))
        })
        .collect()
}

impl BoundaryReport {
    /// Builds the report from signed errors. With `baseline` (errors of a
    /// second method on the same scans and columns), adds Wilcoxon p-values
    /// comparing per-scan MAD and RMSE.
    pub fn from_samples(
        samples: &[ErrorSample],
        boundaries: usize,
        resolution_um: f64,
        baseline: Option<&[ErrorSample]>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("report", "no error samples"));
        }
        let scans = samples.iter().map(|e| e.scan).max().unwrap_or(0) + 1;
        let mut rows = Vec::with_capacity(boundaries + 1);
        for k in 0..=boundaries {
            let overall = k == boundaries;
            let keep = |e: &ErrorSample| overall || e.boundary == k;
            let values: Vec<f64> = samples.iter().filter(|e| keep(e)).map(|e| e.diff_um).collect();
            let stats = aggregate(&values)?;
            let (p_mad, p_rmse) = match baseline {
                None => (None, None),
                Some(base) => {
                    let ours_mad = per_scan(samples, scans, keep, |a| a.mad)?;
                    let theirs_mad = per_scan(base, scans, keep, |a| a.mad)?;
                    let ours_rmse = per_scan(samples, scans, keep, |a| a.rmse)?;
                    let theirs_rmse = per_scan(base, scans, keep, |a| a.rmse)?;
                    (
                        Some(wilcoxon_signed(&theirs_mad, &ours_mad)?),
                        Some(wilcoxon_signed(&theirs_rmse, &ours_rmse)?),
                    )
                }
            };
            let label = if overall { "Overall".to_string() } else { boundary_name(k, boundaries) };
            rows.push(ReportRow { label, stats, p_mad, p_rmse });
        }
        Ok(BoundaryReport { resolution_um, scans, rows })
    }

    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report has an overall row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("boundary,n,mad_um,rmse_um,msd_um,q025_um,q975_um,p_mad,p_rmse\n");
        let p = |v: Option<f64>| v.map(|p| format!("{p:.6}")).unwrap_or_default();
        for r in &self.rows {
            let s = &r.stats;
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.label,
                s.count,
                s.mad,
                s.rmse,
                s.msd,
                s.q025,
                s.q975,
                p(r.p_mad),
                p(r.p_rmse)
            )
            .expect("writing to a String");
        }
        out
    }

    /// Plain-text table with one line per boundary and an overall line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Boundary accuracy over {} scans, {} um per pixel (p: Wilcoxon signed-rank on per-scan values)",
            self.scans, self.resolution_um
        );
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9}  {:<20} {:>7} {:>7}",
            "Boundary", "MAD(um)", "RMSE(um)", "MSD(um)", "(2.5%, 97.5%)", "p_MAD", "p_RMSE"
        );
        let p = |v: Option<f64>| v.map(|p| format!("{p:.2}")).unwrap_or_else(|| "-".into());
        for (i, r) in self.rows.iter().enumerate() {
            if i + 1 == self.rows.len() {
                let _ = writeln!(out, "{}", "-".repeat(80));
            }
            let s = &r.stats;
            let _ = writeln!(
                out,
                "{:<12} {:>9.2} {:>9.2} {:>9.2}  {:<20} {:>7} {:>7}",
                r.label,
                s.mad,
                s.rmse,
                s.msd,
                format!("({:.2}, {:.2})", s.q025, s.q975),
                p(r.p_mad),
                p(r.p_rmse)
            );
        }
        out
    }
}

/// Median, minimum and maximum of repeated timings, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Spread {
            median: percentile(&v, 50.0),
            min: v[0],
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub runs: usize,
    pub scans: usize,
    pub height: usize,
    pub width: usize,
    pub preprocess: Spread,
    pub inference: Spread,
    pub reconstruction: Spread,
    /// Sum of the three stages per run.
    pub total: Spread,
    /// Wall clock around each whole run, for checking the stage accounting.
    pub wall: Spread,
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "volume {}x{}x{} ({} runs; seconds, median [min, max])",
            self.height, self.width, self.scans, self.runs
        );
        for (name, s) in [
            ("preprocessing", self.preprocess),
            ("inference", self.inference),
            ("reconstruction", self.reconstruction),
            ("total", self.total),
            ("wall clock", self.wall),
        ] {
            let _ = writeln!(out, "{name:<15} {:>9.3} [{:.3}, {:.3}]", s.median, s.min, s.max);
        }
        out
    }
}

/// Times full-volume inference `runs` times.
pub fn benchmark(
    volume: &Tensor<f32>,
    snet: &Network<f32>,
    rnet: &Network<f32>,
    opts: &InferOptions,
    runs: usize,
) -> Result<TimingReport> {
    if runs == 0 {
        return Err(Error::invalid("benchmark", "runs must be positive"));
    }
    let (scans, height, width) = volume.chw()?;
    let mut stages: Vec<StageTimes> = Vec::with_capacity(runs);
    let mut wall = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let (_, times) = infer_volume(volume, snet, rnet, opts)?;
        wall.push(t.elapsed().as_secs_f64());
        stages.push(times);
    }
    let pick = |f: fn(&StageTimes) -> f64| Spread::of(&stages.iter().map(f).collect::<Vec<_>>());
    Ok(TimingReport {
        runs,
        scans,
        height,
        width,
        preprocess: pick(|s| s.preprocess),
        inference: pick(|s| s.inference),
        reconstruction: pick(|s| s.reconstruction),
        total: pick(|s| s.total()),
        wall: Spread::of(&wall),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conversion() {
        let truth = BoundarySet::new(1, 2, vec![10.0, 20.0]).unwrap();
        let pred = BoundarySet::new(1, 2, vec![11.0, 19.0]).unwrap();
        let e = signed_errors(&pred, &truth, 0, DEFAULT_RESOLUTION_UM).unwrap();
        assert_eq!(e.iter().map(|s| s.diff_um).collect::<Vec<_>>(), vec![3.9, -3.9]);
        let a = aggregate(&[3.9, -3.9]).unwrap();
        assert_eq!((a.mad, a.rmse, a.msd), (3.9, 3.9, 0.0));
        assert!(signed_errors(&pred, &BoundarySet::zeros(2, 2), 0, 3.9).is_err());
        let big = signed_errors(&BoundarySet::zeros(9, 1024), &BoundarySet::zeros(9, 1024), 0, 3.9).unwrap();
        assert_eq!(big.len(), 9216);
        assert!(big.iter().all(|s| s.diff_um == 0.0));
    }

    #[test]
    fn constant_samples() {
        let a = aggregate(&[-2.5; 7]).unwrap();
        assert_eq!((a.mad, a.rmse, a.msd, a.q025, a.q975), (2.5, 2.5, -2.5, -2.5, -2.5));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 2.5), 0.25);
        assert_eq!(percentile(&v, 97.5), 9.75);
        assert_eq!(percentile(&v, 50.0), 5.0);
    }

    #[test]
    fn wilcoxon_known_values() {
        assert_eq!(wilcoxon_signed(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap(), 0.25);
        assert_eq!(wilcoxon_signed(&[4.0, 5.0], &[4.0, 5.0]).unwrap(), 1.0);
        assert!(wilcoxon_signed(&[1.0], &[1.0, 2.0]).is_err());
        // ties share ranks: |d| = [1, 1, 2] gives ranks [1.5, 1.5, 3]
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn report_rows_and_csv() {
        let truth = BoundarySet::zeros(9, 4);
        let mut pred = BoundarySet::zeros(9, 4);
        pred.set(3, 1, 2.0);
        let e = signed_errors(&pred, &truth, 0, 1.0).unwrap();
        let r = BoundaryReport::from_samples(&e, 9, 1.0, Some(&e)).unwrap();
        assert_eq!(r.rows.len(), 10);
        assert_eq!(r.rows[3].label, "INL-OPL");
        assert_eq!(r.rows[3].stats.mad, 0.5);
        assert_eq!(r.overall().stats.count, 36);
        assert_eq!(r.overall().p_mad, Some(1.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 11);
        assert!(r.to_table().contains("Overall"));
    }
}

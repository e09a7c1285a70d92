//! Quantitative evaluation: image metrics, regression and agreement
//! statistics, ROI histogram features, and logistic-regression classification
//! with ROC/AUC.

use crate::error::{FpsError, Result};

/// Which entries the MAE is averaged over.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    Full,
    /// Entries whose reference value falls inside `[lo, hi]`.
    DisplayRange { lo: f64, hi: f64 },
    /// Explicit entry indices.
    Roi(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub nrmse: f64,
    pub mask_policy: MaskPolicy,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean local structural similarity over all positions where the full
/// Gaussian-weighted 11x11 window fits, with an explicit data range.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(FpsError::shape(format!("{h}x{w}"), format!("{}/{}", a.len(), b.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FpsError::InvalidInput(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    if data_range <= 0.0 {
        return Err(FpsError::MetricUndefined("ssim with degenerate data range".into()));
    }
    let kern = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    // separable Gaussian filter with valid boundaries
    let filter = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * w];
        for i in 0..h {
            for j in half..w - half {
                let mut acc = 0.0;
                for (t, &kv) in kern.iter().enumerate() {
                    acc += kv * img(i * w + j + t - half);
                }
                rows[i * w + j] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for i in half..h - half {
            for j in half..w - half {
                let mut acc = 0.0;
                for (t, &kv) in kern.iter().enumerate() {
                    acc += kv * rows[(i + t - half) * w + j];
                }
                out[i * w + j] = acc;
            }
        }
        out
    };

    let mu_a = filter(&|i| a[i]);
    let mu_b = filter(&|i| b[i]);
    let aa = filter(&|i| a[i] * a[i]);
    let bb = filter(&|i| b[i] * b[i]);
    let ab = filter(&|i| a[i] * b[i]);

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in half..h - half {
        for j in half..w - half {
            let idx = i * w + j;
            let (ma, mb) = (mu_a[idx], mu_b[idx]);
            let va = aa[idx] - ma * ma;
            let vb = bb[idx] - mb * mb;
            let cov = ab[idx] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// MAE (over the masked entries), SSIM, PSNR and NRMSE against a reference.
/// PSNR of identical images is reported as the +infinity sentinel.
pub fn image_metrics(pred: &[f64], reference: &[f64], h: usize, w: usize, policy: MaskPolicy) -> Result<MetricReport> {
    if pred.len() != h * w || reference.len() != h * w {
        return Err(FpsError::shape(
            format!("{h}x{w}"),
            format!("{}/{}", pred.len(), reference.len()),
        ));
    }
    if pred.iter().chain(reference.iter()).any(|v| !v.is_finite()) {
        return Err(FpsError::InvalidInput("non-finite metric input".into()));
    }
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(FpsError::MetricUndefined(
            "psnr/ssim undefined for an all-equal reference".into(),
        ));
    }

    let mask: Vec<usize> = match &policy {
        MaskPolicy::Full => (0..h * w).collect(),
        MaskPolicy::DisplayRange { lo, hi } => (0..h * w)
            .filter(|&i| reference[i] >= *lo && reference[i] <= *hi)
            .collect(),
        MaskPolicy::Roi(indices) => {
            if indices.iter().any(|&i| i >= h * w) {
                return Err(FpsError::InvalidInput("roi index out of range".into()));
            }
            indices.clone()
        }
    };
    if mask.is_empty() {
        return Err(FpsError::InvalidInput("empty metric mask".into()));
    }
    let mae = mask
        .iter()
        .map(|&i| (pred[i] - reference[i]).abs())
        .sum::<f64>()
        / mask.len() as f64;

    let mse = pred
        .iter()
        .zip(reference.iter())
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        / (h * w) as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };

    let ref_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(FpsError::MetricUndefined("nrmse undefined for a zero reference".into()));
    }
    let diff_norm = pred
        .iter()
        .zip(reference.iter())
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        .sqrt();
    let nrmse = diff_norm / ref_norm;

    let ssim_val = ssim(pred, reference, h, w, range)?;
    Ok(MetricReport { mae, ssim: ssim_val, psnr, nrmse, mask_policy: policy })
}

#[derive(Debug, Clone, Copy)]
pub struct RegressionStats {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Bland-Altman mean difference `mean(y - x)`.
    pub bias: f64,
    /// `bias -/+ 1.96 * population std of (y - x)`.
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Ordinary least squares of y against x plus Bland-Altman agreement.
pub fn regression_stats(x: &[f64], y: &[f64]) -> Result<RegressionStats> {
    if x.len() != y.len() {
        return Err(FpsError::shape(format!("{} pairs", x.len()), format!("{}", y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(FpsError::InvalidInput(format!("need >= 3 pairs, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FpsError::MetricUndefined("regression undefined for constant x".into()));
    }
    let sxy: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (b - (slope * a + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };

    let diffs: Vec<f64> = y.iter().zip(x.iter()).map(|(b, a)| b - a).collect();
    let bias = diffs.iter().sum::<f64>() / nf;
    let sd = (diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(RegressionStats {
        slope,
        intercept,
        r2,
        bias,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

/// Linear-interpolated percentile (the numpy default): index `p/100 * (n-1)`
/// into the sorted samples.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(FpsError::InvalidInput("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(FpsError::InvalidInput(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// The four histogram features of one subject's lesion/mirror value lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramFeatures {
    pub t2_p75: f64,
    pub adc_p90: f64,
    pub adc_median: f64,
    /// Relative lesion-vs-mirror median difference:
    /// `(median(mirror) - median(lesion)) / median(mirror)`.
    pub delta_adc: f64,
}

impl HistogramFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [self.t2_p75, self.adc_p90, self.adc_median, self.delta_adc]
    }
}

pub fn histogram_features(
    lesion_t2: &[f64],
    lesion_adc: &[f64],
    mirror_adc: &[f64],
) -> Result<HistogramFeatures> {
    if lesion_t2.is_empty() || lesion_adc.is_empty() || mirror_adc.is_empty() {
        return Err(FpsError::InvalidInput("empty roi value list".into()));
    }
    let mirror_median = percentile(mirror_adc, 50.0)?;
    if mirror_median == 0.0 {
        return Err(FpsError::MetricUndefined(
            "delta adc undefined for zero mirror median".into(),
        ));
    }
    let lesion_median = percentile(lesion_adc, 50.0)?;
    Ok(HistogramFeatures {
        t2_p75: percentile(lesion_t2, 75.0)?,
        adc_p90: percentile(lesion_adc, 90.0)?,
        adc_median: lesion_median,
        delta_adc: (mirror_median - lesion_median) / mirror_median,
    })
}

/// One subject of a binary cohort.
#[derive(Debug, Clone)]
pub struct CohortRecord {
    pub subject: String,
    pub label: u8,
    pub features: HistogramFeatures,
}

#[derive(Debug, Clone)]
pub struct LogisticModel {
    /// Weights in the original (unstandardized) feature space.
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LogisticModel {
    pub fn score(&self, features: &[f64]) -> f64 {
        let z: f64 = self
            .weights
            .iter()
            .zip(features.iter())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.intercept;
        1.0 / (1.0 + (-z).exp())
    }
}

const LOGISTIC_L2: f64 = 1e-6;
const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100;

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(FpsError::MetricUndefined("singular system in irls".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Ok((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with a small L2 penalty on the weights (not the intercept).
/// Features are z-scored internally; returned coefficients live in the
/// original feature space.
pub fn fit_logistic(records: &[CohortRecord]) -> Result<LogisticModel> {
    let n = records.len();
    if n < 2 {
        return Err(FpsError::InvalidInput("need at least two records".into()));
    }
    let pos = records.iter().filter(|r| r.label == 1).count();
    if pos == 0 || pos == n {
        return Err(FpsError::InvalidInput("cohort must contain both classes".into()));
    }
    let d = 4usize;
    let raw: Vec<[f64; 4]> = records.iter().map(|r| r.features.as_array()).collect();
    let mut mean = [0.0f64; 4];
    let mut std = [0.0f64; 4];
    for row in &raw {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    for row in &raw {
        for k in 0..d {
            std[k] += (row[k] - mean[k]).powi(2) / n as f64;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let x: Vec<[f64; 4]> = raw
        .iter()
        .map(|row| {
            let mut z = [0.0; 4];
            for k in 0..d {
                z[k] = (row[k] - mean[k]) / std[k];
            }
            z
        })
        .collect();
    let y: Vec<f64> = records.iter().map(|r| r.label as f64).collect();

    // beta = [w_1..w_4, intercept]
    let mut beta = vec![0.0f64; d + 1];
    for _ in 0..LOGISTIC_MAX_ITER {
        let p: Vec<f64> = x
            .iter()
            .map(|row| {
                let z: f64 = row.iter().zip(&beta[..d]).map(|(a, b)| a * b).sum::<f64>() + beta[d];
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        // gradient of the penalized log-likelihood
        let mut grad = vec![0.0f64; d + 1];
        for i in 0..n {
            let r = y[i] - p[i];
            for k in 0..d {
                grad[k] += r * x[i][k];
            }
            grad[d] += r;
        }
        for k in 0..d {
            grad[k] -= LOGISTIC_L2 * beta[k];
        }
        // negative Hessian
        let mut hess = vec![vec![0.0f64; d + 1]; d + 1];
        for i in 0..n {
            let wgt = (p[i] * (1.0 - p[i])).max(1e-12);
            let mut xi = [0.0f64; 5];
            xi[..d].copy_from_slice(&x[i]);
            xi[d] = 1.0;
            for a in 0..=d {
                for b in 0..=d {
                    hess[a][b] += wgt * xi[a] * xi[b];
                }
            }
        }
        for k in 0..d {
            hess[k][k] += LOGISTIC_L2;
        }
        let delta = solve_dense(hess, grad)?;
        let max_delta = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (b, dv) in beta.iter_mut().zip(&delta) {
            *b += dv;
        }
        if max_delta < LOGISTIC_TOL {
            break;
        }
    }

    // map back to original units
    let mut weights = vec![0.0f64; d];
    let mut intercept = beta[d];
    for k in 0..d {
        weights[k] = beta[k] / std[k];
        intercept -= beta[k] * mean[k] / std[k];
    }
    Ok(LogisticModel { weights, intercept })
}

#[derive(Debug, Clone)]
pub struct RocCurve {
    pub auc: f64,
    /// (false positive rate, true positive rate), threshold descending.
    pub points: Vec<(f64, f64)>,
}

/// AUC as the Mann-Whitney statistic (ties count one half), plus the ROC
/// polyline over all score thresholds.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(FpsError::shape(format!("{} scores", scores.len()), format!("{}", labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(FpsError::InvalidInput("roc needs both classes".into()));
    }
    let mut auc = 0.0;
    for (sp, lp) in scores.iter().zip(labels.iter()) {
        if *lp != 1 {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels.iter()) {
            if *ln != 0 {
                continue;
            }
            auc += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    auc /= (pos * neg) as f64;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut k = 0usize;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { auc, points })
}

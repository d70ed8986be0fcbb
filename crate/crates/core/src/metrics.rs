//! Pixel-level AUC and F1, the perturbation suite and the robustness report.
//!
//! Metrics are computed per image and then averaged over the dataset.

use std::fmt;
use std::str::FromStr;

use forgeloc_autograd::ParamStore;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::resize::resize_image;
use crate::data::{ForgerySample, Image, Mask};
use crate::error::{Error, Result};
use crate::network::CoarseToFineModel;
use crate::predict::predict;
use crate::seed::rng_at;
use crate::train::fgsm;

pub const F1_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_lengths(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(Error::InvalidArgument(format!(
            "{pred} predictions for {gt} ground-truth pixels"
        )));
    }
    Ok(())
}

/// Probability that a random tampered pixel outranks a random pristine one,
/// ties counting one half. `None` when `gt` holds a single class.
pub fn pixel_auc(pred: &[f64], gt: &[bool]) -> Result<Option<f64>> {
    check_lengths(pred.len(), gt.len())?;
    let n_pos = gt.iter().filter(|&&g| g).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    // sum of 1-based average ranks of the positives
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| gt[k]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// `2TP / (2TP + FP + FN)` after thresholding at `threshold` (inclusive).
/// An empty ground truth predicted empty scores 1.
pub fn pixel_f1(pred: &[f64], gt: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(pred.len(), gt.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// ROC points from the highest threshold down, starting at `(0, 0)`.
pub fn roc_curve(pred: &[f64], gt: &[bool]) -> Result<Vec<RocPoint>> {
    check_lengths(pred.len(), gt.len())?;
    let n_pos = gt.iter().filter(|&&g| g).count().max(1) as f64;
    let n_neg = gt.iter().filter(|&&g| !g).count().max(1) as f64;
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = pred[order[i]];
        while i < order.len() && pred[order[i]] == t {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
        });
    }
    Ok(points)
}

/// Content-preserving manipulation applied before scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Area-resample by `factor`, then back to the original size.
    Resize { factor: f64 },
    /// Normalized Gaussian blur with an odd square kernel.
    GaussianBlur { kernel: usize },
    /// Additive `N(0, (sigma/255)^2)` noise, clipped to `[0, 1]`.
    GaussianNoise { sigma: f64 },
    /// FGSM against the evaluated model.
    Fgsm { eps: f64 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::Resize { factor } => factor > 0.0 && factor.is_finite(),
            Perturbation::GaussianBlur { kernel } => kernel % 2 == 1,
            Perturbation::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            Perturbation::Fgsm { eps } => eps >= 0.0 && eps.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid perturbation {self}")))
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Resize { factor } => write!(f, "resize:{factor}"),
            Perturbation::GaussianBlur { kernel } => write!(f, "blur:{kernel}"),
            Perturbation::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            Perturbation::Fgsm { eps } => write!(f, "fgsm:{eps}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = String;

    /// `resize:<factor>`, `blur:<kernel>`, `noise:<sigma>` or `fgsm:<eps>`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| format!("expected kind:value, got `{s}`"))?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
        let p = match kind.trim() {
            "resize" => Perturbation::Resize { factor: num(value)? },
            "blur" => Perturbation::GaussianBlur {
                kernel: value.trim().parse().map_err(|e| format!("`{value}`: {e}"))?,
            },
            "noise" => Perturbation::GaussianNoise { sigma: num(value)? },
            "fgsm" => Perturbation::Fgsm { eps: num(value)? },
            other => return Err(format!("unknown perturbation `{other}`")),
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

/// The standard robustness rows: resize 0.5, blur 3, noise 15, FGSM 0.02.
pub fn standard_suite() -> Vec<Perturbation> {
    vec![
        Perturbation::Resize { factor: 0.5 },
        Perturbation::GaussianBlur { kernel: 3 },
        Perturbation::GaussianNoise { sigma: 15.0 },
        Perturbation::Fgsm { eps: 0.02 },
    ]
}

/// Sigma that OpenCV derives for a kernel size when none is given.
pub fn default_blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn gaussian_taps(kernel: usize) -> Vec<f64> {
    let sigma = default_blur_sigma(kernel);
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index without repeating the edge pixel (`dcb|abcd|cba`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

pub fn gaussian_blur(img: &Image, kernel: usize) -> Result<Image> {
    Perturbation::GaussianBlur { kernel }.validate()?;
    let taps = gaussian_taps(kernel);
    let r = (kernel / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(h, w);
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..3 {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * f64::from(plane[y * w + reflect101(x as isize + k as isize - r, w)]))
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[reflect101(y as isize + k as isize - r, h) * w + x])
                    .sum();
                dst[y * w + x] = v as f32;
            }
        }
    }
    Ok(out)
}

pub fn gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    Perturbation::GaussianNoise { sigma }.validate()?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let dist = Normal::new(0.0, sigma / 255.0).expect("sigma validated");
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (f64::from(*v) + dist.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

pub fn resize_round_trip(img: &Image, factor: f64) -> Result<Image> {
    Perturbation::Resize { factor }.validate()?;
    let th = ((img.height as f64 * factor).round() as usize).max(1);
    let tw = ((img.width as f64 * factor).round() as usize).max(1);
    let small = resize_image(img, th, tw)?;
    resize_image(&small, img.height, img.width)
}

/// What an FGSM perturbation attacks.
pub struct AttackTarget<'a> {
    pub model: &'a CoarseToFineModel,
    pub store: &'a ParamStore<f32>,
    pub mask: &'a Mask,
}

/// Applies one perturbation. FGSM needs an attack target; the others ignore it.
pub fn perturb<R: Rng + ?Sized>(
    img: &Image,
    spec: &Perturbation,
    rng: &mut R,
    target: Option<&AttackTarget<'_>>,
) -> Result<Image> {
    spec.validate()?;
    match *spec {
        Perturbation::Resize { factor } => resize_round_trip(img, factor),
        Perturbation::GaussianBlur { kernel } => gaussian_blur(img, kernel),
        Perturbation::GaussianNoise { sigma } => gaussian_noise(img, sigma, rng),
        Perturbation::Fgsm { eps } => {
            let t = target.ok_or_else(|| Error::InvalidArgument("FGSM perturbation needs a model".into()))?;
            let adv = fgsm(t.model, t.store, &img.to_tensor(), &t.mask.to_tensor(), &[eps])?;
            Image::from_tensor(&adv, 0)
        }
    }
}

/// AUC (if defined) and F1 of one prediction.
pub fn score(pred: &[f32], mask: &Mask) -> Result<(Option<f64>, f64)> {
    let p: Vec<f64> = pred.iter().map(|&v| f64::from(v)).collect();
    let g: Vec<bool> = mask.data.iter().map(|&v| v != 0).collect();
    Ok((pixel_auc(&p, &g)?, pixel_f1(&p, &g, F1_THRESHOLD)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub auc: f64,
    pub f1: f64,
    pub delta_auc: f64,
    pub delta_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    /// Images scored; AUC averages skip those with a single-class mask.
    pub images: usize,
    pub undefined_auc: usize,
    /// Manifest entries skipped because their files were missing.
    pub skipped: usize,
    /// The clean row first, then one per perturbation in request order.
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn clean(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# pixel metrics, mean over {} images (per-image aggregation); F1 threshold {}",
            self.images, self.threshold
        )?;
        if self.undefined_auc > 0 {
            writeln!(
                f,
                "# {} images with single-class masks excluded from AUC",
                self.undefined_auc
            )?;
        }
        if self.skipped > 0 {
            writeln!(f, "# {} manifest entries skipped (missing files)", self.skipped)?;
        }
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max("perturbation".len());
        writeln!(
            f,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}",
            "perturbation", "AUC", "F1", "ΔAUC", "ΔF1"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>+7.4}  {:>+7.4}",
                r.name, r.auc, r.f1, r.delta_auc, r.delta_f1
            )?;
        }
        Ok(())
    }
}

/// Scores the model on `samples`, clean and under each perturbation.
/// Perturbation randomness for sample `i` and row `j` comes from
/// `rng_at(seed, "perturb", i * rows + j)`.
pub fn evaluate(
    model: &CoarseToFineModel,
    store: &ParamStore<f32>,
    samples: &[ForgerySample],
    perturbations: &[Perturbation],
    seed: u64,
) -> Result<MetricsReport> {
    for p in perturbations {
        p.validate()?;
    }
    let rows = perturbations.len() + 1;
    // per sample: (auc, f1) for every row
    let per_sample: Vec<Vec<(Option<f64>, f64)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut out = Vec::with_capacity(rows);
            let clean = predict(model, store, &s.image)?;
            out.push(score(&clean.refined, &s.mask)?);
            let target = AttackTarget {
                model,
                store,
                mask: &s.mask,
            };
            for (j, p) in perturbations.iter().enumerate() {
                let mut rng = rng_at(seed, "perturb", (i * rows + j) as u64);
                let img = perturb(&s.image, p, &mut rng, Some(&target))?;
                let pred = predict(model, store, &img)?;
                out.push(score(&pred.refined, &s.mask)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut report_rows = Vec::with_capacity(rows);
    for j in 0..rows {
        let aucs: Vec<f64> = per_sample.iter().filter_map(|r| r[j].0).collect();
        let auc = if aucs.is_empty() {
            f64::NAN
        } else {
            aucs.iter().sum::<f64>() / aucs.len() as f64
        };
        let f1 = per_sample.iter().map(|r| r[j].1).sum::<f64>() / per_sample.len().max(1) as f64;
        let name = if j == 0 {
            "clean".to_string()
        } else {
            perturbations[j - 1].to_string()
        };
        report_rows.push(ReportRow {
            name,
            auc,
            f1,
            delta_auc: 0.0,
            delta_f1: 0.0,
        });
    }
    let (a0, f0) = (report_rows[0].auc, report_rows[0].f1);
    for r in &mut report_rows {
        r.delta_auc = r.auc - a0;
        r.delta_f1 = r.f1 - f0;
    }
    Ok(MetricsReport {
        threshold: F1_THRESHOLD,
        images: samples.len(),
        undefined_auc: per_sample.iter().filter(|r| r[0].0.is_none()).count(),
        skipped: 0,
        rows: report_rows,
    })
}

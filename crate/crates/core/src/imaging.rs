//! Fluorescence imaging: photon-count generation, threshold classification,
//! per-image loss and spin flips, and the two imaging-fidelity estimators
//! (two-Gaussian histogram fit and misidentification counting in repeated
//! images).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::losses::LossMechanism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagingMode {
    /// Optical pumping during the image keeps every atom bright.
    Occupancy,
    /// Only the bright nuclear-spin state scatters; spins can flip.
    SpinSelective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingModel {
    pub signal_mean: f64,
    pub background_mean: f64,
    pub signal_width: f64,
    pub background_width: f64,
    pub threshold: f64,
    pub loss_per_image: f64,
    /// Share of the per-image loss attributed to background-gas collisions;
    /// the rest is Raman scattering out of the imaging cycle.
    pub vacuum_fraction_of_loss: f64,
    pub spin_flip_probability: f64,
    pub mode: ImagingMode,
}

/// Two-sided Gaussian-overlap fidelity the default count model is calibrated to.
pub const DEFAULT_GAUSSIAN_FIDELITY: f64 = 0.9995;

impl Default for ImagingModel {
    fn default() -> Self {
        Self::calibrated(50.0, 5.0, 3.0, DEFAULT_GAUSSIAN_FIDELITY)
    }
}

fn std_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).expect("unit normal")
}

impl ImagingModel {
    /// Count model with the given means and background width whose signal
    /// width and threshold make the false-positive and false-negative tails
    /// equal, each at `1 - fidelity`.
    pub fn calibrated(
        signal_mean: f64,
        background_mean: f64,
        background_width: f64,
        fidelity: f64,
    ) -> Self {
        let z = std_normal().inverse_cdf(fidelity);
        let signal_width = (signal_mean - background_mean) / z - background_width;
        Self {
            signal_mean,
            background_mean,
            signal_width,
            background_width,
            threshold: background_mean + z * background_width,
            loss_per_image: 2e-3,
            vacuum_fraction_of_loss: 0.3,
            spin_flip_probability: 4e-3,
            mode: ImagingMode::Occupancy,
        }
    }

    /// Probability an empty site reads above threshold.
    pub fn false_positive_rate(&self) -> f64 {
        tail_above(self.background_mean, self.background_width, self.threshold)
    }

    /// Probability an occupied site that stays bright reads at or below threshold.
    pub fn false_negative_rate(&self) -> f64 {
        1.0 - tail_above(self.signal_mean, self.signal_width, self.threshold)
    }

    /// Misclassification probability averaged over equally likely empty and full sites.
    pub fn analytic_infidelity(&self) -> f64 {
        0.5 * (self.false_positive_rate() + self.false_negative_rate())
    }

    /// Probability of reading above threshold for an atom that scatters during a
    /// uniformly distributed fraction `u` of the exposure and is dark for the rest.
    pub fn partial_exposure_detection(&self) -> f64 {
        const STEPS: usize = 4000;
        (0..STEPS)
            .map(|i| {
                let u = (i as f64 + 0.5) / STEPS as f64;
                let mean = u * self.signal_mean + (1.0 - u) * self.background_mean;
                let width = ((u * self.signal_width).powi(2)
                    + ((1.0 - u) * self.background_width).powi(2))
                .sqrt();
                tail_above(mean, width, self.threshold)
            })
            .sum::<f64>()
            / STEPS as f64
    }

    pub fn validate(&self, prefix: &str, out: &mut Vec<crate::params::Violation>) {
        use crate::params::{check_non_negative, check_probability, Violation};
        if self.signal_mean.is_nan()
            || self.background_mean.is_nan()
            || self.signal_mean <= self.background_mean
        {
            out.push(Violation::new(
                format!("{prefix}signal_mean"),
                "must exceed background_mean",
            ));
        }
        for (name, v) in [
            ("signal_width", self.signal_width),
            ("background_width", self.background_width),
        ] {
            check_non_negative(out, &format!("{prefix}{name}"), v);
        }
        if !self.threshold.is_finite() {
            out.push(Violation::new(
                format!("{prefix}threshold"),
                "must be finite",
            ));
        }
        for (name, v) in [
            ("loss_per_image", self.loss_per_image),
            ("vacuum_fraction_of_loss", self.vacuum_fraction_of_loss),
            ("spin_flip_probability", self.spin_flip_probability),
        ] {
            check_probability(out, &format!("{prefix}{name}"), v);
        }
    }
}

fn tail_above(mean: f64, width: f64, threshold: f64) -> f64 {
    if width <= 0.0 {
        return if mean > threshold { 1.0 } else { 0.0 };
    }
    1.0 - std_normal().cdf((threshold - mean) / width)
}

fn draw<R: Rng + ?Sized>(mean: f64, width: f64, rng: &mut R) -> f64 {
    if width <= 0.0 {
        return mean;
    }
    Normal::new(mean, width).expect("finite width").sample(rng)
}

/// Photon counts collected from one site in one image.
pub fn sample_counts<R: Rng + ?Sized>(occupied: bool, model: &ImagingModel, rng: &mut R) -> f64 {
    if occupied {
        draw(model.signal_mean, model.signal_width, rng)
    } else {
        draw(model.background_mean, model.background_width, rng)
    }
}

/// Occupied iff the counts exceed the threshold; ties read as empty.
pub fn classify(counts: f64, threshold: f64) -> bool {
    counts > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Spin {
    /// m_F = +1/2, scatters imaging light in spin-selective mode.
    Up,
    Down,
}

impl Spin {
    pub fn flipped(self) -> Self {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageOutcome {
    pub counts: f64,
    pub classified_occupied: bool,
    pub survived: bool,
    pub lost_to: Option<LossMechanism>,
    pub spin_after: Spin,
}

/// Images one site. Loss and spin flips happen at uniformly distributed times
/// during the exposure, so an atom lost late still contributes most of its signal.
pub fn image_atom<R: Rng + ?Sized>(
    occupied: bool,
    spin: Spin,
    model: &ImagingModel,
    rng: &mut R,
) -> ImageOutcome {
    if !occupied {
        let counts = sample_counts(false, model, rng);
        return ImageOutcome {
            counts,
            classified_occupied: classify(counts, model.threshold),
            survived: false,
            lost_to: None,
            spin_after: spin,
        };
    }

    let lost = rng.random::<f64>() < model.loss_per_image;
    let (loss_time, lost_to) = if lost {
        let t = rng.random::<f64>();
        let mech = if rng.random::<f64>() < model.vacuum_fraction_of_loss {
            LossMechanism::ImagingVacuum
        } else {
            LossMechanism::ImagingRaman
        };
        (t, Some(mech))
    } else {
        (1.0, None)
    };

    let (bright_fraction, spin_after) = match model.mode {
        ImagingMode::Occupancy => (loss_time, spin),
        ImagingMode::SpinSelective => {
            let flip_time = if rng.random::<f64>() < model.spin_flip_probability {
                Some(rng.random::<f64>())
            } else {
                None
            };
            match (spin, flip_time) {
                (Spin::Up, None) => (loss_time, spin),
                (Spin::Down, None) => (0.0, spin),
                (Spin::Up, Some(t)) => (
                    t.min(loss_time),
                    if t < loss_time { Spin::Down } else { spin },
                ),
                (Spin::Down, Some(t)) => (
                    (loss_time - t).max(0.0),
                    if t < loss_time { Spin::Up } else { spin },
                ),
            }
        }
    };

    let signal = draw(model.signal_mean, model.signal_width, rng);
    let background = draw(model.background_mean, model.background_width, rng);
    let counts = bright_fraction * signal + (1.0 - bright_fraction) * background;
    ImageOutcome {
        counts,
        classified_occupied: classify(counts, model.threshold),
        survived: !lost,
        lost_to,
        spin_after,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityMethod {
    GaussianFit,
    RepeatedImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    pub fidelity: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: FidelityMethod,
    pub sample_size: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("histogram is unimodal (separation D = {separation:.2})")]
    Unimodal { separation: f64 },
    #[error("sequence {index} has {len} images; at least 3 are needed")]
    SequenceTooShort { index: usize, len: usize },
}

/// Exact binomial (Clopper–Pearson) interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    assert!(k <= n && n > 0);
    let alpha = 1.0 - confidence;
    let (k, n) = (k as f64, n as f64);
    let lo = if k == 0.0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0)
            .expect("beta")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .expect("beta")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Confidence level of the reported intervals.
pub const CI_CONFIDENCE: f64 = 0.68;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MisidentificationCounts {
    /// Isolated bright readings between two dark ones.
    pub false_positive: u64,
    /// Isolated dark readings between two bright ones.
    pub false_negative: u64,
    pub interior_images: u64,
}

impl MisidentificationCounts {
    pub fn events(&self) -> u64 {
        self.false_positive + self.false_negative
    }
}

pub fn count_misidentifications(
    sequences: &[Vec<bool>],
) -> Result<MisidentificationCounts, ImagingError> {
    let mut c = MisidentificationCounts::default();
    for (index, seq) in sequences.iter().enumerate() {
        if seq.len() < 3 {
            return Err(ImagingError::SequenceTooShort {
                index,
                len: seq.len(),
            });
        }
        for w in seq.windows(3) {
            if w[1] != w[0] && w[1] != w[2] {
                if w[1] {
                    c.false_positive += 1;
                } else {
                    c.false_negative += 1;
                }
            }
        }
        c.interior_images += seq.len() as u64 - 2;
    }
    Ok(c)
}

/// Fidelity from repeated images of the same sites: an image that disagrees
/// with both of its neighbours counts as a misidentification.
pub fn repeated_image_fidelity(sequences: &[Vec<bool>]) -> Result<FidelityEstimate, ImagingError> {
    let c = count_misidentifications(sequences)?;
    if c.interior_images == 0 {
        return Err(ImagingError::SequenceTooShort { index: 0, len: 0 });
    }
    let (lo, hi) = clopper_pearson(c.events(), c.interior_images, CI_CONFIDENCE);
    Ok(FidelityEstimate {
        fidelity: 1.0 - c.events() as f64 / c.interior_images as f64,
        ci_low: 1.0 - hi,
        ci_high: 1.0 - lo,
        method: FidelityMethod::RepeatedImages,
        sample_size: c.interior_images as usize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl GaussianComponent {
    fn density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sigma;
        self.weight * (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramFit {
    pub background: GaussianComponent,
    pub signal: GaussianComponent,
    pub threshold: f64,
    pub estimate: FidelityEstimate,
}

pub const MIN_FIT_SAMPLES: usize = 100;
/// Ashman's separation below which a two-Gaussian fit is treated as unimodal.
pub const MIN_SEPARATION: f64 = 2.0;

/// Fits a sum of two Gaussians by expectation–maximization, places the threshold
/// where the two normalized tails are equal, and reports one minus the mean
/// normalized area on the wrong side of it.
pub fn fit_histogram(samples: &[f64]) -> Result<HistogramFit, ImagingError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(ImagingError::TooFewSamples {
            min: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[(0.01 * n) as usize];
    let hi = sorted[((0.99 * n) as usize).min(sorted.len() - 1)];
    let split = 0.5 * (lo + hi);

    let init = |pred: &dyn Fn(f64) -> bool| {
        let part: Vec<f64> = samples.iter().copied().filter(|&x| pred(x)).collect();
        let m = part.len().max(1) as f64;
        let mean = part.iter().sum::<f64>() / m;
        let var = part.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
        GaussianComponent {
            weight: (part.len() as f64 / n).max(1e-3),
            mean,
            sigma: var.sqrt().max(1e-3 * (hi - lo).max(1e-9)),
        }
    };
    let mut a = init(&|x| x <= split);
    let mut b = init(&|x| x > split);

    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let (mut wa, mut sa, mut qa) = (0.0, 0.0, 0.0);
        let (mut wb, mut sb, mut qb) = (0.0, 0.0, 0.0);
        let mut ll = 0.0;
        for &x in samples {
            let (pa, pb) = (a.density(x), b.density(x));
            let total = pa + pb;
            if total <= 0.0 || !total.is_finite() {
                continue;
            }
            ll += total.ln();
            let ra = pa / total;
            let rb = 1.0 - ra;
            wa += ra;
            sa += ra * x;
            qa += ra * x * x;
            wb += rb;
            sb += rb * x;
            qb += rb * x * x;
        }
        if wa < 1.0 || wb < 1.0 {
            break;
        }
        let update = |w: f64, s: f64, q: f64, old: GaussianComponent| {
            let mean = s / w;
            let var = (q / w - mean * mean).max(1e-12);
            GaussianComponent {
                weight: w / n,
                mean,
                sigma: var.sqrt().max(old.sigma * 1e-3),
            }
        };
        a = update(wa, sa, qa, a);
        b = update(wb, sb, qb, b);
        if (ll - prev_ll).abs() <= 1e-10 * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;
    }

    let (background, signal) = if a.mean <= b.mean { (a, b) } else { (b, a) };
    let separation = std::f64::consts::SQRT_2 * (signal.mean - background.mean)
        / (background.sigma.powi(2) + signal.sigma.powi(2)).sqrt();
    if separation.is_nan()
        || separation < MIN_SEPARATION
        || background.weight < 0.01
        || signal.weight < 0.01
    {
        return Err(ImagingError::Unimodal { separation });
    }

    let width_sum = background.sigma + signal.sigma;
    let threshold = (background.mean * signal.sigma + signal.mean * background.sigma) / width_sum;
    let z = (signal.mean - background.mean) / width_sum;
    let (nb, ns) = (background.weight * n, signal.weight * n);
    let var_means = signal.sigma.powi(2) / ns + background.sigma.powi(2) / nb;
    let var_widths = signal.sigma.powi(2) / (2.0 * ns) + background.sigma.powi(2) / (2.0 * nb);
    let se = (var_means + z * z * var_widths).sqrt() / width_sum;
    let normal = std_normal();
    let estimate = FidelityEstimate {
        fidelity: normal.cdf(z),
        ci_low: normal.cdf(z - se),
        ci_high: normal.cdf(z + se),
        method: FidelityMethod::GaussianFit,
        sample_size: samples.len(),
    };
    Ok(HistogramFit {
        background,
        signal,
        threshold,
        estimate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Fixed-width histogram over `[low, high)`; samples outside are dropped.
    pub fn from_samples(samples: &[f64], low: f64, high: f64, bins: usize) -> Self {
        let bin_width = (high - low) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &x in samples {
            let i = ((x - low) / bin_width).floor();
            if i >= 0.0 && (i as usize) < bins {
                counts[i as usize] += 1;
            }
        }
        Self {
            low,
            bin_width,
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.low + i as f64 * self.bin_width;
            out.push_str(&format!("{:.4},{:.4},{}\n", lo, lo + self.bin_width, c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_model_is_balanced() {
        let m = ImagingModel::default();
        assert!((m.false_positive_rate() - 5e-4).abs() < 1e-9);
        assert!((m.false_negative_rate() - 5e-4).abs() < 1e-9);
        assert!((m.analytic_infidelity() - 5e-4).abs() < 1e-9);
        assert!((m.threshold - 14.8716).abs() < 1e-3);
    }

    #[test]
    fn empty_sites_stay_below_threshold() {
        let m = ImagingModel::default();
        let mut r = rng(1);
        let n = 100_000;
        let below = (0..n)
            .filter(|_| !classify(sample_counts(false, &m, &mut r), m.threshold))
            .count();
        assert!(below as f64 / n as f64 >= 0.999);
    }

    #[test]
    fn zero_width_is_degenerate() {
        let m = ImagingModel {
            signal_width: 0.0,
            background_width: 0.0,
            ..ImagingModel::default()
        };
        assert_eq!(sample_counts(true, &m, &mut rng(2)), 50.0);
        assert_eq!(sample_counts(false, &m, &mut rng(2)), 5.0);
    }

    #[test]
    fn counts_are_bimodal() {
        let m = ImagingModel::default();
        let mut r = rng(3);
        let samples: Vec<f64> = (0..100_000)
            .map(|i| sample_counts(i % 2 == 0, &m, &mut r))
            .collect();
        let h = Histogram::from_samples(&samples, -20.0, 100.0, 60);
        let bin_of = |x: f64| ((x + 20.0) / 2.0) as usize;
        let peak_bg = h.counts[bin_of(5.0)];
        let peak_sig = h.counts[bin_of(50.0)];
        let valley = h.counts[bin_of(20.0)];
        assert!(
            peak_bg > 5 * valley && peak_sig > 2 * valley,
            "{peak_bg} {peak_sig} {valley}"
        );
        let mode_bg = (0..bin_of(20.0)).max_by_key(|&i| h.counts[i]).unwrap();
        let mode_sig = (bin_of(20.0)..60).max_by_key(|&i| h.counts[i]).unwrap();
        assert!(((mode_bg as f64 * 2.0 - 20.0) - 5.0).abs() <= 2.0);
        assert!(((mode_sig as f64 * 2.0 - 20.0) - 50.0).abs() <= 4.0);
        assert!(h.to_csv().starts_with("bin_low,bin_high,count\n"));
    }

    #[test]
    fn classification_threshold_semantics() {
        let m = ImagingModel::default();
        assert!(classify(m.signal_mean, m.threshold));
        assert!(!classify(0.0, m.threshold));
        assert!(!classify(m.threshold, m.threshold));
        let counts = [1.0, 7.0, 12.0, 30.0, 55.0];
        let mut prev = counts.len();
        for t in [-1.0, 5.0, 10.0, 20.0, 40.0, 100.0] {
            let occ = counts.iter().filter(|&&c| classify(c, t)).count();
            assert!(occ <= prev);
            prev = occ;
        }
        assert_eq!(prev, 0);
    }

    #[test]
    fn per_image_survival() {
        let m = ImagingModel::default();
        let mut r = rng(4);
        let n = 100_000;
        let survived = (0..n)
            .filter(|_| image_atom(true, Spin::Up, &m, &mut r).survived)
            .count();
        let s = survived as f64 / n as f64;
        assert!((s - 0.998).abs() <= 0.001, "{s}");
    }

    #[test]
    fn spin_flips_show_as_extra_loss() {
        let m = ImagingModel {
            mode: ImagingMode::SpinSelective,
            ..ImagingModel::default()
        };
        let mut r = rng(5);
        let n = 100_000;
        let flipped = (0..n)
            .map(|_| image_atom(true, Spin::Up, &m, &mut r))
            .filter(|o| o.survived && o.spin_after == Spin::Down)
            .count();
        let p = flipped as f64 / n as f64;
        assert!((p - 4e-3).abs() <= 1e-3, "{p}");
    }

    #[test]
    fn lossless_imaging_always_survives() {
        let m = ImagingModel {
            loss_per_image: 0.0,
            spin_flip_probability: 0.0,
            mode: ImagingMode::SpinSelective,
            ..ImagingModel::default()
        };
        let mut r = rng(6);
        assert!((0..10_000).all(|_| {
            let o = image_atom(true, Spin::Up, &m, &mut r);
            o.survived && o.spin_after == Spin::Up
        }));
    }

    #[test]
    fn isolated_flip_is_one_event() {
        let seq = vec![vec![true, true, false, true, true]];
        let c = count_misidentifications(&seq).unwrap();
        assert_eq!(c.events(), 1);
        assert_eq!(c.false_negative, 1);
        assert_eq!(c.interior_images, 3);
        // a lasting change is not a misidentification
        let loss = vec![vec![true, true, false, false, false]];
        assert_eq!(count_misidentifications(&loss).unwrap().events(), 0);
        assert_eq!(
            repeated_image_fidelity(&[vec![true, false]]),
            Err(ImagingError::SequenceTooShort { index: 0, len: 2 })
        );
    }

    #[test]
    fn error_free_sequences() {
        let seqs: Vec<Vec<bool>> = (0..10).map(|i| vec![i % 2 == 0; 50]).collect();
        let est = repeated_image_fidelity(&seqs).unwrap();
        assert_eq!(est.fidelity, 1.0);
        assert_eq!(est.ci_high, 1.0);
        // k = 0: upper bound on the error rate is 1 - (alpha/2)^(1/n)
        let n = 480.0;
        let expected = (0.16f64).powf(1.0 / n);
        assert!((est.ci_low - expected).abs() < 1e-9);
    }

    /// Clopper–Pearson bounds by bisection on binomial tail sums.
    fn cp_oracle(k: u64, n: u64, conf: f64) -> (f64, f64) {
        use statrs::function::gamma::ln_gamma;
        let ln_choose = |j: u64| {
            ln_gamma(n as f64 + 1.0) - ln_gamma(j as f64 + 1.0) - ln_gamma((n - j) as f64 + 1.0)
        };
        // P(X <= m)
        let cdf = |m: u64, p: f64| -> f64 {
            (0..=m)
                .map(|j| (ln_choose(j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp())
                .sum()
        };
        let a = (1.0 - conf) / 2.0;
        let bisect = |f: &dyn Fn(f64) -> f64, increasing: bool| {
            let (mut lo, mut hi) = (1e-15, 1.0 - 1e-15);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (f(mid) < a) == increasing {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        // lower bound: P(X >= k) = a; upper bound: P(X <= k) = a
        let lo = if k == 0 {
            0.0
        } else {
            bisect(&|p| 1.0 - cdf(k - 1, p), true)
        };
        let hi = if k == n {
            1.0
        } else {
            bisect(&|p| cdf(k, p), false)
        };
        (lo, hi)
    }

    #[test]
    fn clopper_pearson_matches_binomial_oracle() {
        for &(k, n) in &[
            (0u64, 50u64),
            (1, 50),
            (5, 6570),
            (12, 400),
            (50, 100),
            (100, 100),
        ] {
            let (lo, hi) = clopper_pearson(k, n, 0.68);
            let (olo, ohi) = cp_oracle(k, n, 0.68);
            assert!((lo - olo).abs() < 1e-6, "k={k} n={n} lo {lo} vs {olo}");
            assert!((hi - ohi).abs() < 1e-6, "k={k} n={n} hi {hi} vs {ohi}");
        }
    }

    #[test]
    fn fit_recovers_known_gaussians() {
        let mut r = rng(7);
        let bg = Normal::new(8.0, 4.0).unwrap();
        let sig = Normal::new(60.0, 9.0).unwrap();
        let samples: Vec<f64> = (0..20_000)
            .map(|i| {
                if i % 3 == 0 {
                    sig.sample(&mut r)
                } else {
                    bg.sample(&mut r)
                }
            })
            .collect();
        let fit = fit_histogram(&samples).unwrap();
        assert!((fit.background.mean - 8.0).abs() <= 0.02 * 8.0);
        assert!((fit.signal.mean - 60.0).abs() <= 0.02 * 60.0);
        assert!((fit.signal.weight - 1.0 / 3.0).abs() < 0.01);
        let e = &fit.estimate;
        assert!(e.ci_low <= e.fidelity && e.fidelity <= e.ci_high);
    }

    #[test]
    fn fit_on_default_model() {
        let m = ImagingModel::default();
        let mut r = rng(8);
        let samples: Vec<f64> = (0..100_000)
            .map(|i| sample_counts(i % 2 == 0, &m, &mut r))
            .collect();
        let fit = fit_histogram(&samples).unwrap();
        assert!(
            (fit.estimate.fidelity - 0.9995).abs() <= 0.0003,
            "{}",
            fit.estimate.fidelity
        );
        assert!((fit.threshold - m.threshold).abs() < 0.5);
    }

    #[test]
    fn widely_separated_modes_are_perfect() {
        let mut r = rng(9);
        let samples: Vec<f64> = (0..1000)
            .map(|i| {
                if i % 2 == 0 {
                    r.random::<f64>()
                } else {
                    1e6 + r.random::<f64>()
                }
            })
            .collect();
        let fit = fit_histogram(&samples).unwrap();
        assert!(fit.estimate.fidelity > 1.0 - 1e-12);
    }

    #[test]
    fn unimodal_data_is_rejected() {
        let mut r = rng(10);
        let n = Normal::new(20.0, 5.0).unwrap();
        let samples: Vec<f64> = (0..5000).map(|_| n.sample(&mut r)).collect();
        assert!(matches!(
            fit_histogram(&samples),
            Err(ImagingError::Unimodal { .. })
        ));
        assert_eq!(
            fit_histogram(&samples[..10]),
            Err(ImagingError::TooFewSamples { min: 100, got: 10 })
        );
    }

    #[test]
    fn partial_exposure_detection_is_between_extremes() {
        let m = ImagingModel::default();
        let q = m.partial_exposure_detection();
        // threshold sits ~22% of the way from background to signal
        assert!(q > 0.7 && q < 0.85, "{q}");
        let mut r = rng(11);
        let n = 200_000;
        let lossy = ImagingModel {
            loss_per_image: 1.0,
            ..m.clone()
        };
        let hits = (0..n)
            .filter(|_| image_atom(true, Spin::Up, &lossy, &mut r).classified_occupied)
            .count();
        let mc = hits as f64 / n as f64;
        assert!(
            (mc - q).abs() < 4.0 * (q * (1.0 - q) / n as f64).sqrt(),
            "{mc} vs {q}"
        );
    }
}

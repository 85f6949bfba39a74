//! Temporal-alignment scoring: event detection on both modalities plus two
//! AV-Align variants, and a diagonal Fréchet distance between sample sets.
//!
//! The official AV-Align form c / (|A| + |V| - c) counts matches on the
//! audio side only, so one-to-many matches push it above 1. The modified
//! form rewrites IoU through precision and recall, pr / (p + r - pr), and
//! stays in [0, 1].
//!
//! Empty-set convention: both variants return 0 when either peak set is
//! empty (including both-empty). A generation in which no events are
//! detected must not score as aligned.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Fraction of the peak signal's maximum used as the default detection
/// threshold.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.5;

/// Window of three frames: a peak matches when |a - v| <= 1.
pub const DEFAULT_MATCH_WINDOW: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakSource {
    Audio,
    Video,
}

/// Sorted set of event times on the video frame grid.
#[derive(Debug, Clone)]
pub struct PeakSet {
    times: Vec<usize>,
    pub source: PeakSource,
}

impl PeakSet {
    /// Times are sorted and deduplicated to keep the set strictly
    /// increasing.
    pub fn new(mut times: Vec<usize>, source: PeakSource) -> PeakSet {
        times.sort_unstable();
        times.dedup();
        PeakSet { times, source }
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// True if any member is within `window` of `t` (binary search).
    fn has_match(&self, t: usize, window: usize) -> bool {
        let idx = self.times.partition_point(|&x| x < t);
        if idx < self.times.len() && self.times[idx] - t <= window {
            return true;
        }
        if idx > 0 && t - self.times[idx - 1] <= window {
            return true;
        }
        false
    }
}

/// Local maxima of a nonnegative signal `s` (index i corresponds to frame
/// `i + 1`), keeping values strictly above `threshold * max(s)`.
fn pick_peaks(s: &[f64], threshold: f64) -> Vec<usize> {
    let maxv = s.iter().cloned().fold(0.0f64, f64::max);
    if maxv <= 0.0 {
        return Vec::new();
    }
    let thr = threshold * maxv;
    let n = s.len();
    let mut out = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || s[i] > s[i - 1];
        let right_ok = i == n - 1 || s[i] >= s[i + 1];
        if left_ok && right_ok && s[i] > thr {
            out.push(i + 1);
        }
    }
    out
}

/// Audio onsets: local maxima of the positive temporal difference of the
/// per-frame channel energy, reported on the video frame grid via integer
/// division by `frames_per_video_frame`.
pub fn detect_onsets(
    x_audio: &Tensor,
    frames_per_video_frame: usize,
    threshold: f64,
) -> Result<PeakSet> {
    if x_audio.ndim() != 2 {
        return Err(Error::Dim(format!(
            "detect_onsets expects [frames, channels], got {:?}",
            x_audio.shape()
        )));
    }
    if frames_per_video_frame < 1 {
        return Err(Error::Config(
            "detect_onsets: frames_per_video_frame must be >= 1".into(),
        ));
    }
    let frames = x_audio.shape()[0];
    let dim = x_audio.shape()[1];
    let data = x_audio.data();
    let energy: Vec<f64> = (0..frames)
        .map(|f| {
            (0..dim)
                .map(|c| (data[f * dim + c] as f64).powi(2))
                .sum::<f64>()
        })
        .collect();
    let rise: Vec<f64> = (1..frames)
        .map(|f| (energy[f] - energy[f - 1]).max(0.0))
        .collect();
    let onsets = pick_peaks(&rise, threshold);
    Ok(PeakSet::new(
        onsets
            .into_iter()
            .map(|g| g / frames_per_video_frame)
            .collect(),
        PeakSource::Audio,
    ))
}

/// Video motion peaks: local maxima of the frame-difference magnitude
/// ||x[f] - x[f-1]|| (the flow-magnitude proxy for featureless latents).
pub fn detect_motion_peaks(x_video: &Tensor, threshold: f64) -> Result<PeakSet> {
    if x_video.ndim() != 2 {
        return Err(Error::Dim(format!(
            "detect_motion_peaks expects [frames, channels], got {:?}",
            x_video.shape()
        )));
    }
    let frames = x_video.shape()[0];
    let dim = x_video.shape()[1];
    let data = x_video.data();
    let motion: Vec<f64> = (1..frames)
        .map(|f| {
            (0..dim)
                .map(|c| {
                    let d = data[f * dim + c] as f64 - data[(f - 1) * dim + c] as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(PeakSet::new(
        pick_peaks(&motion, threshold),
        PeakSource::Video,
    ))
}

/// The official-implementation score c / (|A| + |V| - c), where c counts
/// audio onsets with at least one video match. Can exceed 1 under
/// one-to-many matching. Returns 0 when either set is empty.
pub fn av_align_official(audio: &PeakSet, video: &PeakSet, window: usize) -> f64 {
    if audio.is_empty() || video.is_empty() {
        return 0.0;
    }
    let c = audio
        .times()
        .iter()
        .filter(|&&a| video.has_match(a, window))
        .count();
    c as f64 / (audio.len() + video.len() - c) as f64
}

/// Precision/recall report with both score variants.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlignReport {
    pub precision: f64,
    pub recall: f64,
    pub score_modified: f64,
    pub score_official: f64,
}

/// IoU rewritten through precision and recall: pr / (p + r - pr), bounded
/// in [0, 1]. p (r) is the matched fraction of the audio (video) peaks; an
/// empty set contributes 0 per the module convention.
pub fn av_align_modified(audio: &PeakSet, video: &PeakSet, window: usize) -> AlignReport {
    let precision = if audio.is_empty() {
        0.0
    } else {
        audio
            .times()
            .iter()
            .filter(|&&a| video.has_match(a, window))
            .count() as f64
            / audio.len() as f64
    };
    let recall = if video.is_empty() {
        0.0
    } else {
        video
            .times()
            .iter()
            .filter(|&&v| audio.has_match(v, window))
            .count() as f64
            / video.len() as f64
    };
    let score_modified = if precision + recall > 0.0 {
        precision * recall / (precision + recall - precision * recall)
    } else {
        0.0
    };
    AlignReport {
        precision,
        recall,
        score_modified,
        score_official: av_align_official(audio, video, window),
    }
}

/// Fréchet distance between diagonal-Gaussian fits of two sample sets:
/// ||mu_a - mu_b||^2 + sum_i (sqrt(var_a_i) - sqrt(var_b_i))^2 over
/// flattened features.
pub fn moment_distance(set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Data("moment_distance: empty sample set".into()));
    }
    let shape = set_a[0].shape().to_vec();
    for t in set_a.iter().chain(set_b.iter()) {
        if t.shape() != shape {
            return Err(Error::Dim(format!(
                "moment_distance: inconsistent shapes {:?} vs {:?}",
                shape,
                t.shape()
            )));
        }
    }
    let fit = |set: &[Tensor]| -> (Vec<f64>, Vec<f64>) {
        let n = set.len() as f64;
        let dim: usize = shape.iter().product();
        let mut mean = vec![0.0f64; dim];
        for t in set {
            for (m, &v) in mean.iter_mut().zip(t.data().iter()) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0f64; dim];
        for t in set {
            for ((va, &v), m) in var.iter_mut().zip(t.data().iter()).zip(mean.iter()) {
                let d = v as f64 - m;
                *va += d * d;
            }
        }
        for v in &mut var {
            *v /= n;
        }
        (mean, var)
    };
    let (mu_a, var_a) = fit(set_a);
    let (mu_b, var_b) = fit(set_b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let cov_term: f64 = var_a
        .iter()
        .zip(var_b.iter())
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok(mean_term + cov_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_pair, PairSpec};
    use crate::numerics::Rng;

    fn peaks(times: &[usize], source: PeakSource) -> PeakSet {
        PeakSet::new(times.to_vec(), source)
    }

    // Literal translations of the two formulas, O(|A| * |V|), used as the
    // brute-force oracle.
    fn official_oracle(a: &[usize], v: &[usize], w: usize) -> f64 {
        if a.is_empty() || v.is_empty() {
            return 0.0;
        }
        let c = a
            .iter()
            .filter(|&&x| v.iter().any(|&y| x.abs_diff(y) <= w))
            .count();
        c as f64 / (a.len() + v.len() - c) as f64
    }

    fn modified_oracle(a: &[usize], v: &[usize], w: usize) -> (f64, f64, f64) {
        let p = if a.is_empty() {
            0.0
        } else {
            a.iter()
                .filter(|&&x| v.iter().any(|&y| x.abs_diff(y) <= w))
                .count() as f64
                / a.len() as f64
        };
        let r = if v.is_empty() {
            0.0
        } else {
            v.iter()
                .filter(|&&y| a.iter().any(|&x| x.abs_diff(y) <= w))
                .count() as f64
                / v.len() as f64
        };
        let s = if p + r > 0.0 {
            p * r / (p + r - p * r)
        } else {
            0.0
        };
        (p, r, s)
    }

    #[test]
    fn official_pathology_exceeds_one() {
        let a = peaks(&[4, 5, 6], PeakSource::Audio);
        let v = peaks(&[5], PeakSource::Video);
        assert_eq!(av_align_official(&a, &v, 1), 3.0);
        let rep = av_align_modified(&a, &v, 1);
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.score_modified, 1.0);
        assert_eq!(rep.score_official, 3.0);
    }

    #[test]
    fn perfect_match_scores_one() {
        let a = peaks(&[2, 7, 11], PeakSource::Audio);
        let v = peaks(&[2, 7, 11], PeakSource::Video);
        assert_eq!(av_align_official(&a, &v, 0), 1.0);
        assert_eq!(av_align_modified(&a, &v, 0).score_modified, 1.0);
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let a = peaks(&[0, 10], PeakSource::Audio);
        let v = peaks(&[5, 20], PeakSource::Video);
        assert_eq!(av_align_official(&a, &v, 1), 0.0);
        assert_eq!(av_align_modified(&a, &v, 1).score_modified, 0.0);
    }

    #[test]
    fn one_to_one_case_equals_classic_iou() {
        // A = {1, 10}, V = {1, 20}: intersection 1, union 3.
        let a = peaks(&[1, 10], PeakSource::Audio);
        let v = peaks(&[1, 20], PeakSource::Video);
        let rep = av_align_modified(&a, &v, 1);
        assert_eq!(rep.precision, 0.5);
        assert_eq!(rep.recall, 0.5);
        assert!((rep.score_modified - 1.0 / 3.0).abs() < 1e-15);
        assert!((rep.score_official - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_set_conventions() {
        let e = peaks(&[], PeakSource::Audio);
        let v = peaks(&[3], PeakSource::Video);
        assert_eq!(av_align_official(&e, &v, 1), 0.0);
        assert_eq!(av_align_official(&v, &e, 1), 0.0);
        assert_eq!(av_align_official(&e, &e, 1), 0.0);
        assert_eq!(av_align_modified(&e, &v, 1).score_modified, 0.0);
        assert_eq!(av_align_modified(&e, &e, 1).score_modified, 0.0);
    }

    #[test]
    fn exhaustive_brute_force_equivalence() {
        // Every peak set with up to 4 members on an 8-frame grid.
        let mut subsets: Vec<Vec<usize>> = vec![vec![]];
        for t in 0..8usize {
            let mut next = subsets.clone();
            for s in &subsets {
                if s.len() < 4 {
                    let mut e = s.clone();
                    e.push(t);
                    next.push(e);
                }
            }
            subsets = next;
        }
        assert_eq!(subsets.len(), 163);
        for w in 0..=2usize {
            for sa in &subsets {
                for sv in &subsets {
                    let a = peaks(sa, PeakSource::Audio);
                    let v = peaks(sv, PeakSource::Video);
                    let rep = av_align_modified(&a, &v, w);
                    let (p, r, s) = modified_oracle(sa, sv, w);
                    assert_eq!(rep.precision, p, "A={sa:?} V={sv:?} w={w}");
                    assert_eq!(rep.recall, r, "A={sa:?} V={sv:?} w={w}");
                    assert_eq!(rep.score_modified, s, "A={sa:?} V={sv:?} w={w}");
                    assert_eq!(
                        av_align_official(&a, &v, w),
                        official_oracle(sa, sv, w),
                        "A={sa:?} V={sv:?} w={w}"
                    );
                }
            }
        }
    }

    #[test]
    fn modified_score_bounded_and_window_monotone() {
        let mut rng = Rng::new(99);
        for _ in 0..10_000 {
            let na = rng.uniform_int(0, 6) as usize;
            let nv = rng.uniform_int(0, 6) as usize;
            let a: Vec<usize> = (0..na).map(|_| rng.uniform_int(0, 31) as usize).collect();
            let v: Vec<usize> = (0..nv).map(|_| rng.uniform_int(0, 31) as usize).collect();
            let a = peaks(&a, PeakSource::Audio);
            let v = peaks(&v, PeakSource::Video);
            let mut prev = -1.0f64;
            let mut prev_p = -1.0f64;
            let mut prev_r = -1.0f64;
            for w in 0..4usize {
                let rep = av_align_modified(&a, &v, w);
                assert!(
                    (0.0..=1.0).contains(&rep.score_modified),
                    "score {} out of bounds",
                    rep.score_modified
                );
                assert!(rep.score_modified >= prev, "window monotonicity violated");
                assert!(rep.precision >= prev_p && rep.recall >= prev_r);
                prev = rep.score_modified;
                prev_p = rep.precision;
                prev_r = rep.recall;
            }
        }
    }

    #[test]
    fn match_symmetry() {
        let a = peaks(&[3, 9], PeakSource::Audio);
        let v = peaks(&[4, 8], PeakSource::Video);
        for (&x, &y) in a.times().iter().zip(v.times()) {
            assert_eq!(
                v.has_match(x, 1),
                a.has_match(y, 1) || a.has_match(y, 1)
            );
        }
        // |a - v| <= w is symmetric by construction.
        assert!(v.has_match(3, 1) && a.has_match(4, 1));
    }

    #[test]
    fn detectors_on_degenerate_inputs() {
        let silent = Tensor::zeros(&[16, 3]);
        assert!(detect_onsets(&silent, 4, DEFAULT_PEAK_THRESHOLD)
            .unwrap()
            .is_empty());
        let still = Tensor::full(&[8, 3], 0.4);
        assert!(detect_motion_peaks(&still, DEFAULT_PEAK_THRESHOLD)
            .unwrap()
            .is_empty());
        // Infinite threshold silences everything.
        let mut rng = Rng::new(4);
        let noisy = Tensor::randn(&[32, 3], &mut rng);
        assert!(detect_onsets(&noisy, 2, f64::INFINITY).unwrap().is_empty());
        assert!(detect_motion_peaks(&noisy, f64::INFINITY)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_impulse_peaks_at_its_frame() {
        let k = 5usize;
        let mut data = vec![0.0f32; 12 * 2];
        data[k * 2] = 3.0;
        data[k * 2 + 1] = -1.0;
        let x = Tensor::from_vec(&[12, 2], data).unwrap();
        let p = detect_motion_peaks(&x, DEFAULT_PEAK_THRESHOLD).unwrap();
        assert_eq!(p.times(), &[k]);
    }

    #[test]
    fn clean_pairs_round_trip_through_detectors() {
        for seed in 0..30u64 {
            for label in 0..4usize {
                let spec = PairSpec {
                    n_frames: 16,
                    video_dim: 6,
                    audio_frames: 64,
                    audio_dim: 6,
                    n_events: 3,
                    jitter: 0.0,
                    label,
                    seed,
                };
                let s = make_pair(&spec).unwrap();
                let motion =
                    detect_motion_peaks(&s.video, DEFAULT_PEAK_THRESHOLD).unwrap();
                let onsets = detect_onsets(
                    &s.audio,
                    spec.frames_per_video_frame(),
                    DEFAULT_PEAK_THRESHOLD,
                )
                .unwrap();
                assert_eq!(
                    motion.times(),
                    s.event_times.as_slice(),
                    "motion mismatch at seed {seed} label {label}"
                );
                assert_eq!(
                    onsets.times(),
                    s.event_times.as_slice(),
                    "onset mismatch at seed {seed} label {label}"
                );
            }
        }
    }

    #[test]
    fn moment_distance_properties() {
        let mut rng = Rng::new(21);
        let set_a: Vec<Tensor> = (0..20).map(|_| Tensor::randn(&[4, 2], &mut rng)).collect();
        assert_eq!(moment_distance(&set_a, &set_a).unwrap(), 0.0);

        // Mean shift by delta with identical covariance -> ||delta||^2.
        let delta = 0.75f32;
        let set_b: Vec<Tensor> = set_a.iter().map(|t| t.add_scalar(delta)).collect();
        let d = moment_distance(&set_a, &set_b).unwrap();
        let expect = (delta as f64 * delta as f64) * 8.0;
        assert!((d - expect).abs() < 1e-5, "{d} vs {expect}");

        let ab = moment_distance(&set_a, &set_b).unwrap();
        let ba = moment_distance(&set_b, &set_a).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        assert!(moment_distance(&[], &set_a).is_err());
    }
}

//! Kinematic beats and beat consistency.

use crate::audio::BeatSet;
use crate::pose::{GestureSequence, POSE_DIM};

pub const DEFAULT_BEAT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_BC_SIGMA: f64 = 0.1;

/// Mean absolute joint-angle velocity per frame (radians per frame).
/// Interior frames use central differences, the two ends one-sided ones.
pub fn frame_speeds(seq: &GestureSequence) -> Vec<f64> {
    let n = seq.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|t| {
            let (a, b, h) = match t {
                0 => (0, 1, 1.0),
                t if t == n - 1 => (n - 2, n - 1, 1.0),
                t => (t - 1, t + 1, 2.0),
            };
            let (fa, fb) = (seq.frame(a), seq.frame(b));
            fa.iter().zip(fb).map(|(x, y)| (y - x).abs()).sum::<f64>() / (h * POSE_DIM as f64)
        })
        .collect()
}

pub fn extract_motion_beats(seq: &GestureSequence) -> BeatSet {
    extract_motion_beats_with(seq, DEFAULT_BEAT_THRESHOLD)
}

/// Local speed minima `v[t] < v[t-1]`, `v[t] <= v[t+1]` on interior frames
/// that fall below `threshold × mean(v)`.
pub fn extract_motion_beats_with(seq: &GestureSequence, threshold: f64) -> BeatSet {
    let n = seq.len();
    if n < 3 {
        return BeatSet::empty();
    }
    let v = frame_speeds(seq);
    let interior = &v[1..n - 1];
    let mean = interior.iter().sum::<f64>() / interior.len() as f64;
    let limit = threshold * mean;
    let times = (1..n - 1)
        .filter(|&t| {
            let prev = v[t - 1];
            let next = if t + 1 < n - 1 { v[t + 1] } else { f64::INFINITY };
            v[t] < prev && v[t] <= next && v[t] < limit
        })
        .map(|t| t as f64 / seq.fps())
        .collect();
    BeatSet::new(times).expect("frame times increase")
}

/// Mean over motion beats of `exp(-d²/(2σ²))`, `d` the distance to the
/// nearest audio beat. Zero when either set is empty.
pub fn beat_consistency(motion: &BeatSet, audio: &BeatSet, sigma: f64) -> f64 {
    if motion.is_empty() {
        log::warn!("beat consistency over an empty motion beat set is defined as 0");
        return 0.0;
    }
    if audio.is_empty() {
        return 0.0;
    }
    let a = audio.times();
    let total: f64 = motion
        .times()
        .iter()
        .map(|&b| {
            // nearest neighbour by binary search in the sorted audio beats
            let i = a.partition_point(|&x| x < b);
            let mut d = f64::INFINITY;
            if i < a.len() {
                d = d.min((a[i] - b).abs());
            }
            if i > 0 {
                d = d.min((b - a[i - 1]).abs());
            }
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    total / motion.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_from_dim0(values: &[f64], fps: f64) -> GestureSequence {
        let mut data = vec![0.0; values.len() * POSE_DIM];
        for (t, v) in values.iter().enumerate() {
            data[t * POSE_DIM] = *v;
        }
        GestureSequence::new(data, fps).unwrap()
    }

    #[test]
    fn constant_pose_has_no_beats() {
        let s = GestureSequence::new(vec![0.3; 20 * POSE_DIM], 30.0).unwrap();
        assert!(extract_motion_beats(&s).is_empty());
    }

    #[test]
    fn uniform_motion_has_no_beats() {
        let v: Vec<f64> = (0..30).map(|t| t as f64 * 0.05).collect();
        assert!(extract_motion_beats(&seq_from_dim0(&v, 30.0)).is_empty());
    }

    #[test]
    fn triangle_vertex_gives_one_beat_at_half_second() {
        let v: Vec<f64> = (0..30).map(|t| 0.1 * (15.0 - (t as f64 - 15.0).abs())).collect();
        let b = extract_motion_beats(&seq_from_dim0(&v, 30.0));
        assert_eq!(b.times(), &[0.5]);
    }

    #[test]
    fn bc_hand_cases() {
        let m = BeatSet::new(vec![1.0]).unwrap();
        let a = BeatSet::new(vec![0.3, 1.1, 2.0]).unwrap();
        assert!((beat_consistency(&m, &a, 0.1) - (-0.5f64).exp()).abs() < 1e-9);
        let same = BeatSet::new(vec![0.2, 0.9]).unwrap();
        assert_eq!(beat_consistency(&same, &same, 0.1), 1.0);
        assert_eq!(beat_consistency(&BeatSet::empty(), &same, 0.1), 0.0);
        assert_eq!(beat_consistency(&same, &BeatSet::empty(), 0.1), 0.0);
    }

    fn sorted_unique(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    proptest! {
        #[test]
        fn motion_beats_strictly_increase(vals in proptest::collection::vec(-3.0f64..3.0, 3..60)) {
            let b = extract_motion_beats(&seq_from_dim0(&vals, 30.0));
            prop_assert!(b.times().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn bc_in_unit_interval_and_monotone(
            m in proptest::collection::vec(0.0f64..5.0, 1..10),
            a in proptest::collection::vec(0.0f64..5.0, 1..10),
            which in 0usize..10,
            frac in 0.0f64..1.0,
        ) {
            let m = sorted_unique(m);
            let a = BeatSet::new(sorted_unique(a)).unwrap();
            let bc = beat_consistency(&BeatSet::new(m.clone()).unwrap(), &a, 0.1);
            prop_assert!((0.0..=1.0).contains(&bc));
            // move one motion beat strictly toward its nearest audio beat
            let i = which % m.len();
            let nearest = *a.times().iter().min_by(|x, y| (*x - m[i]).abs().total_cmp(&(*y - m[i]).abs())).unwrap();
            let mut moved = m.clone();
            moved[i] = m[i] + (nearest - m[i]) * frac;
            let moved = sorted_unique(moved);
            let bc2 = beat_consistency(&BeatSet::new(moved).unwrap(), &a, 0.1);
            if moved_len_matches(&m, i, nearest, frac) {
                prop_assert!(bc2 >= bc - 1e-12, "{bc2} < {bc}");
            }
        }
    }

    // Skip cases where the moved beat collides with another and is deduplicated.
    fn moved_len_matches(m: &[f64], i: usize, nearest: f64, frac: f64) -> bool {
        let x = m[i] + (nearest - m[i]) * frac;
        !m.iter().enumerate().any(|(j, v)| j != i && *v == x)
    }
}

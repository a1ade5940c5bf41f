//! Non-learned per-trajectory size estimates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Size2D;
use crate::label::Trajectory;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeStrategy {
    /// One frame's size, chosen uniformly.
    Random { seed: u64 },
    Mean,
    Median,
    /// Size of the highest-score frame (earliest on ties).
    Score,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Width and length are estimated independently for mean and median.
pub fn size_baseline(traj: &Trajectory, strategy: SizeStrategy) -> Result<Size2D> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let d = &traj.detections;
    Ok(match strategy {
        SizeStrategy::Random { seed } => {
            let mut rng = seed::rng(seed, seed::stream::SIZE_BASELINE ^ (traj.id << 8));
            d[rng.random_range(0..d.len())].size
        }
        SizeStrategy::Mean => {
            let n = d.len() as f64;
            Size2D {
                w: d.iter().map(|x| x.size.w).sum::<f64>() / n,
                l: d.iter().map(|x| x.size.l).sum::<f64>() / n,
            }
        }
        SizeStrategy::Median => Size2D {
            w: median(d.iter().map(|x| x.size.w).collect()),
            l: median(d.iter().map(|x| x.size.l).collect()),
        },
        SizeStrategy::Score => d[traj.argmax_score().expect("non-empty")].size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2D;
    use crate::label::Detection;

    fn traj(sizes: &[(f64, f64)], scores: &[f64]) -> Trajectory {
        Trajectory::new(
            3,
            sizes
                .iter()
                .zip(scores)
                .enumerate()
                .map(|(k, (&(w, l), &s))| Detection {
                    pose: Pose2D::IDENTITY,
                    size: Size2D::new(w, l).unwrap(),
                    t: k as f64,
                    frame: k,
                    score: s,
                    gt_id: None,
                })
                .collect(),
        )
    }

    #[test]
    fn identical_sizes() {
        let t = traj(&[(2.0, 4.5); 4], &[0.1, 0.2, 0.3, 0.4]);
        for s in [
            SizeStrategy::Random { seed: 1 },
            SizeStrategy::Mean,
            SizeStrategy::Median,
            SizeStrategy::Score,
        ] {
            assert_eq!(size_baseline(&t, s).unwrap(), Size2D { w: 2.0, l: 4.5 });
        }
    }

    #[test]
    fn arithmetic() {
        let t = traj(&[(2.0, 4.0), (2.0, 4.0), (2.0, 10.0)], &[0.1, 0.9, 0.5]);
        assert_eq!(size_baseline(&t, SizeStrategy::Median).unwrap(), Size2D { w: 2.0, l: 4.0 });
        assert_eq!(size_baseline(&t, SizeStrategy::Mean).unwrap(), Size2D { w: 2.0, l: 6.0 });
        let t = traj(&[(1.0, 4.0), (2.0, 5.0), (3.0, 6.0)], &[0.1, 0.9, 0.5]);
        assert_eq!(size_baseline(&t, SizeStrategy::Score).unwrap(), Size2D { w: 2.0, l: 5.0 });
        assert!(size_baseline(&traj(&[], &[]), SizeStrategy::Mean).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let t = traj(&[(1.0, 4.0), (2.0, 5.0), (3.0, 6.0), (1.5, 4.2)], &[0.1; 4]);
        let a = size_baseline(&t, SizeStrategy::Random { seed: 8 }).unwrap();
        assert_eq!(a, size_baseline(&t, SizeStrategy::Random { seed: 8 }).unwrap());
        assert!(t.detections.iter().any(|d| d.size == a));
    }
}

//! Temporal keyframe selection by deviation from the mean embedding.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviationNorm {
    L1,
    L2,
}

/// How near-duplicate frames are kept out of the selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    /// Skip frames within this many indices of a selected frame.
    Window(usize),
    /// Skip frames whose embedding lies within this distance of a selected one.
    Distance(f64),
}

impl Exclusion {
    fn halved(self) -> Self {
        match self {
            Exclusion::Window(w) => Exclusion::Window(w / 2),
            Exclusion::Distance(d) => Exclusion::Distance(if d < 1e-12 { 0.0 } else { d / 2.0 }),
        }
    }

    fn is_off(self) -> bool {
        matches!(self, Exclusion::Window(0)) || matches!(self, Exclusion::Distance(d) if d <= 0.0)
    }
}

fn norm(v: impl Iterator<Item = f64>, kind: DeviationNorm) -> f64 {
    match kind {
        DeviationNorm::L1 => v.map(f64::abs).sum(),
        DeviationNorm::L2 => v.map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// `|e_j - mean|` reduced with `kind`, for every frame.
pub fn deviations(embeddings: &[Vec<f64>], kind: DeviationNorm) -> Result<Vec<f64>> {
    let d = embeddings.first().map_or(0, Vec::len);
    if embeddings.is_empty() || d == 0 {
        return Err(Error::invalid("keyframe selection needs non-empty embeddings"));
    }
    if let Some(j) = embeddings.iter().position(|e| e.len() != d) {
        return Err(Error::shape("deviations", format!("embedding {j} has width {} (expected {d})", embeddings[j].len())));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "deviations".into() });
    }
    let m = embeddings.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| embeddings.iter().map(|e| e[k]).sum::<f64>() / m).collect();
    Ok(embeddings
        .iter()
        .map(|e| norm(e.iter().zip(&mean).map(|(a, b)| a - b), kind))
        .collect())
}

fn greedy(embeddings: &[Vec<f64>], order: &[usize], n: usize, rule: Exclusion, kind: DeviationNorm) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    for &j in order {
        if picked.len() == n {
            break;
        }
        let blocked = picked.iter().any(|&p| match rule {
            Exclusion::Window(w) => j.abs_diff(p) <= w && w > 0,
            Exclusion::Distance(r) => r > 0.0 && norm(embeddings[j].iter().zip(&embeddings[p]).map(|(a, b)| a - b), kind) < r,
        });
        if !blocked {
            picked.push(j);
        }
    }
    picked
}

/// Pick `n` frames (0-based, ascending) whose embeddings deviate most from
/// the mean, greedily skipping frames excluded by `rule`. Ties go to the
/// lower index. When too few frames survive, the exclusion is halved and
/// the selection retried.
pub fn select_keyframes(embeddings: &[Vec<f64>], n: usize, rule: Exclusion, kind: DeviationNorm) -> Result<Vec<usize>> {
    if n == 0 || embeddings.len() <= n {
        return Err(Error::invalid(format!(
            "need more frames ({}) than temporal keyframes ({n}), and n > 0",
            embeddings.len()
        )));
    }
    let dev = deviations(embeddings, kind)?;
    let mut order: Vec<usize> = (0..dev.len()).collect();
    order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
    let mut rule = rule;
    loop {
        let mut picked = greedy(embeddings, &order, n, rule, kind);
        if picked.len() == n {
            picked.sort_unstable();
            return Ok(picked);
        }
        debug_assert!(!rule.is_off(), "no exclusion always yields n frames");
        let next = rule.halved();
        log::warn!("only {} of {n} keyframes survive {rule:?}; retrying with {next:?}", picked.len());
        rule = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::SeedRng;
    use proptest::prelude::*;

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn oracle(e: &[Vec<f64>], n: usize) -> Vec<usize> {
        // Exhaustive: mean and distances recomputed independently, full sort.
        let d = e[0].len();
        let mean: Vec<f64> = (0..d).map(|k| e.iter().map(|x| x[k]).sum::<f64>() / e.len() as f64).collect();
        let mut scored: Vec<(f64, usize)> = e
            .iter()
            .enumerate()
            .map(|(j, x)| (x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), j))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut top: Vec<usize> = scored[..n].iter().map(|s| s.1).collect();
        top.sort();
        top
    }

    #[test]
    fn outlier_is_picked() {
        let e = scalars(&[0.0, 1.0, 2.0, 3.0, 100.0]);
        assert_eq!(select_keyframes(&e, 1, Exclusion::Window(0), DeviationNorm::L2).unwrap(), vec![4]);
        let dev = deviations(&e, DeviationNorm::L2).unwrap();
        assert!((dev[4] - 78.8).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let e = scalars(&[5.0; 6]);
        assert_eq!(select_keyframes(&e, 2, Exclusion::Window(0), DeviationNorm::L2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn window_skips_neighbours_and_relaxes() {
        let e = scalars(&[0.0, 10.0, 9.0, 0.0, 0.0, 0.0, 8.0, 0.0]);
        // 1 first, 2 is adjacent, 6 is far enough.
        assert_eq!(select_keyframes(&e, 2, Exclusion::Window(1), DeviationNorm::L2).unwrap(), vec![1, 6]);
        // A window wider than the clip forces relaxation, but still returns n.
        let got = select_keyframes(&e, 3, Exclusion::Window(20), DeviationNorm::L2).unwrap();
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn distance_rule_skips_lookalikes() {
        let e = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![5.1, 0.0], vec![0.0, -4.0], vec![0.0, 0.1]];
        let got = select_keyframes(&e, 2, Exclusion::Distance(1.0), DeviationNorm::L2).unwrap();
        assert_eq!(got, vec![2, 3]);
    }

    #[test]
    fn rejects_bad_input() {
        let e = scalars(&[1.0, 2.0]);
        assert!(select_keyframes(&e, 2, Exclusion::Window(0), DeviationNorm::L2).is_err());
        assert!(select_keyframes(&[vec![1.0], vec![1.0, 2.0], vec![0.0]], 1, Exclusion::Window(0), DeviationNorm::L2).is_err());
        assert!(select_keyframes(&scalars(&[f64::NAN, 1.0, 2.0]), 1, Exclusion::Window(0), DeviationNorm::L2).is_err());
    }

    #[test]
    fn matches_exhaustive_oracle_on_1000_instances() {
        let mut rng = SeedRng::new(2024);
        for _ in 0..1000 {
            let m = rng.int_inclusive(2, 64);
            let d = rng.int_inclusive(1, 16);
            let n = rng.int_inclusive(1, (m - 1).min(8));
            let e: Vec<Vec<f64>> = (0..m).map(|_| rng.normal_vec(d)).collect();
            assert_eq!(select_keyframes(&e, n, Exclusion::Window(0), DeviationNorm::L2).unwrap(), oracle(&e, n));
        }
    }

    proptest! {
        #[test]
        fn output_sorted_unique_in_range(
            seed in 0u64..10_000,
            m in 3usize..40,
            w in 0usize..6,
        ) {
            let mut rng = SeedRng::new(seed);
            let e: Vec<Vec<f64>> = (0..m).map(|_| rng.normal_vec(3)).collect();
            let n = 1 + (seed as usize) % (m - 1).min(6);
            let got = select_keyframes(&e, n, Exclusion::Window(w), DeviationNorm::L1).unwrap();
            prop_assert_eq!(got.len(), n);
            prop_assert!(got.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(got.iter().all(|&j| j < m));
        }

        #[test]
        fn pushing_a_selected_frame_outward_keeps_it(seed in 0u64..10_000, m in 3usize..30, boost in 0.0f64..5.0) {
            let mut rng = SeedRng::new(seed);
            let mut e: Vec<Vec<f64>> = (0..m).map(|_| rng.normal_vec(2)).collect();
            let n = 1 + (seed as usize) % (m - 1).min(5);
            let before = select_keyframes(&e, n, Exclusion::Window(0), DeviationNorm::L2).unwrap();
            let j = before[(seed as usize) % before.len()];
            // Move e_j so that its offset from the (shifted) mean grows by
            // `1 + boost`; the other embeddings stay put.
            let mean: Vec<f64> = (0..2).map(|k| e.iter().map(|x| x[k]).sum::<f64>() / m as f64).collect();
            let mf = m as f64;
            for k in 0..2 {
                let off = e[j][k] - mean[k];
                e[j][k] += boost * off * mf / (mf - 1.0);
            }
            let after = select_keyframes(&e, n, Exclusion::Window(0), DeviationNorm::L2).unwrap();
            prop_assert!(after.contains(&j));
        }
    }
}

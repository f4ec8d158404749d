//! Krippendorff's alpha over an annotator × item rating matrix with gaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Nominal,
    #[default]
    Ordinal,
    Interval,
}

/// Agreement threshold below which human judgments are discarded.
pub const AGREEMENT_THRESHOLD: f64 = 0.7;

/// Squared distance between categories `c ≤ k` given their marginal counts.
fn delta2(level: Level, values: &[f64], n: &[f64], c: usize, k: usize) -> f64 {
    if c == k {
        return 0.0;
    }
    match level {
        Level::Nominal => 1.0,
        Level::Interval => (values[c] - values[k]).powi(2),
        Level::Ordinal => {
            let (lo, hi) = if c < k { (c, k) } else { (k, c) };
            let between: f64 = n[lo..=hi].iter().sum();
            (between - (n[lo] + n[hi]) / 2.0).powi(2)
        }
    }
}

/// Alpha from the coincidence matrix. `ratings[a][u]` is annotator `a`'s
/// rating of item `u`. Items with fewer than two ratings are not pairable and
/// are ignored. When every pairable rating is the same value there is no
/// expected disagreement and the result is 1.
pub fn krippendorff_alpha(ratings: &[Vec<Option<f64>>], level: Level) -> Result<f64> {
    if ratings.len() < 2 {
        return Err(Error::InvalidArgument("agreement needs at least two annotators".into()));
    }
    let items = ratings[0].len();
    if ratings.iter().any(|r| r.len() != items) {
        return Err(Error::Shape("annotators rated different numbers of items".into()));
    }
    if ratings.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("ratings must be finite".into()));
    }
    let units: Vec<Vec<f64>> = (0..items)
        .map(|u| ratings.iter().filter_map(|r| r[u]).collect::<Vec<_>>())
        .filter(|v| v.len() >= 2)
        .collect();
    if units.is_empty() {
        return Err(Error::InvalidArgument("no item was rated by two or more annotators".into()));
    }
    let mut values: Vec<f64> = units.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let index = |v: f64| values.binary_search_by(|x| x.total_cmp(&v)).unwrap();
    let c = values.len();
    let mut o = vec![vec![0.0; c]; c];
    for unit in &units {
        let w = 1.0 / (unit.len() - 1) as f64;
        for (i, a) in unit.iter().enumerate() {
            for (j, b) in unit.iter().enumerate() {
                if i != j {
                    o[index(*a)][index(*b)] += w;
                }
            }
        }
    }
    let n_c: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = n_c.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for a in 0..c {
        for b in 0..c {
            let d = delta2(level, &values, &n_c, a, b);
            observed += o[a][b] * d;
            expected += n_c[a] * n_c[b] * d;
        }
    }
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse(rows: &[&str]) -> Vec<Vec<Option<f64>>> {
        rows.iter()
            .map(|r| r.split_whitespace().map(|t| if t == "." { None } else { Some(t.parse().unwrap()) }).collect())
            .collect()
    }

    /// Krippendorff's worked example: four coders, twelve units, gaps.
    fn reliability_data() -> Vec<Vec<Option<f64>>> {
        parse(&[
            "1 2 3 3 2 1 4 1 2 . . .",
            "1 2 3 3 2 2 4 1 2 5 . 3",
            ". 3 3 3 2 3 4 2 2 5 1 .",
            "1 2 3 3 2 4 4 1 2 5 1 .",
        ])
    }

    /// Pair-by-pair definition: observed disagreement over within-unit pairs
    /// weighted by 1/(m_u - 1), expected over all pairs of pairable values.
    fn brute_force(ratings: &[Vec<Option<f64>>], level: Level) -> f64 {
        let units: Vec<Vec<f64>> = (0..ratings[0].len())
            .map(|u| ratings.iter().filter_map(|r| r[u]).collect::<Vec<_>>())
            .filter(|v| v.len() >= 2)
            .collect();
        let all: Vec<f64> = units.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let dist = |a: f64, b: f64| -> f64 {
            match level {
                Level::Nominal => (a != b) as u8 as f64,
                Level::Interval => (a - b).powi(2),
                Level::Ordinal => {
                    if a == b {
                        return 0.0;
                    }
                    let (lo, hi) = (a.min(b), a.max(b));
                    let between = all.iter().filter(|&&v| v >= lo && v <= hi).count() as f64;
                    let ends = all.iter().filter(|&&v| v == lo || v == hi).count() as f64;
                    (between - ends / 2.0).powi(2)
                }
            }
        };
        let mut d_o = 0.0;
        for u in &units {
            let mut s = 0.0;
            for i in 0..u.len() {
                for j in 0..u.len() {
                    if i != j {
                        s += dist(u[i], u[j]);
                    }
                }
            }
            d_o += s / (u.len() - 1) as f64;
        }
        d_o /= n;
        let mut d_e = 0.0;
        for i in 0..all.len() {
            for j in 0..all.len() {
                if i != j {
                    d_e += dist(all[i], all[j]);
                }
            }
        }
        d_e /= n * (n - 1.0);
        1.0 - d_o / d_e
    }

    #[test]
    fn published_values() {
        let data = reliability_data();
        let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
        assert_eq!(round3(krippendorff_alpha(&data, Level::Nominal).unwrap()), 0.743);
        assert_eq!(round3(krippendorff_alpha(&data, Level::Ordinal).unwrap()), 0.815);
        assert_eq!(round3(krippendorff_alpha(&data, Level::Interval).unwrap()), 0.849);
    }

    #[test]
    fn matches_the_pairwise_definition() {
        let full = reliability_data();
        for level in [Level::Nominal, Level::Ordinal, Level::Interval] {
            assert!((krippendorff_alpha(&full, level).unwrap() - brute_force(&full, level)).abs() < 1e-9);
            let three = &full[1..];
            assert!((krippendorff_alpha(three, level).unwrap() - brute_force(three, level)).abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let items = rng.gen_range(2..15);
            let data: Vec<Vec<Option<f64>>> = (0..3)
                .map(|_| (0..items).map(|_| rng.gen_bool(0.85).then(|| rng.gen_range(1..=5) as f64)).collect())
                .collect();
            let Ok(a) = krippendorff_alpha(&data, Level::Ordinal) else { continue };
            let b = brute_force(&data, Level::Ordinal);
            assert!(a == 1.0 && b.is_nan() || (a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn perfect_agreement_is_one() {
        let row = vec![Some(1.0), Some(3.0), Some(2.0), Some(5.0)];
        let data = vec![row.clone(), row.clone(), row];
        assert_eq!(krippendorff_alpha(&data, Level::Ordinal).unwrap(), 1.0);
        let constant = vec![vec![Some(2.0); 3]; 3];
        assert_eq!(krippendorff_alpha(&constant, Level::Ordinal).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_ratings_have_no_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items = 600;
        let truth: Vec<f64> = (0..items).map(|_| rng.gen_range(1..=5) as f64).collect();
        let data: Vec<Vec<Option<f64>>> = (0..3)
            .map(|_| {
                let mut r = truth.clone();
                r.shuffle(&mut rng);
                r.into_iter().map(Some).collect()
            })
            .collect();
        let a = krippendorff_alpha(&data, Level::Ordinal).unwrap();
        assert!(a.abs() < 0.1, "{a}");
    }

    #[test]
    fn rejects_unpairable_data() {
        let data = vec![vec![Some(1.0), None], vec![None, Some(2.0)]];
        assert!(krippendorff_alpha(&data, Level::Ordinal).is_err());
        assert!(krippendorff_alpha(&data[..1], Level::Ordinal).is_err());
        assert!(krippendorff_alpha(&[vec![Some(1.0)], vec![]], Level::Ordinal).is_err());
    }
}

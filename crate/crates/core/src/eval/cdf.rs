use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical CDFs of normal and anomalous scores and their largest
/// vertical distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfTables {
    /// `(value, fraction ≤ value)` at each distinct value.
    pub normal: Vec<(f64, f64)>,
    pub anomalous: Vec<(f64, f64)>,
    pub gap: f64,
}

pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Empty("cdf values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cdf values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    Ok(out)
}

/// Largest `|F_a(x) − F_b(x)|` over all observed values.
pub fn separation_gap(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ca, cb) = (empirical_cdf(a)?, empirical_cdf(b)?);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb, mut gap) = (0.0f64, 0.0f64, 0.0f64);
    while i < ca.len() || j < cb.len() {
        let xa = ca.get(i).map_or(f64::INFINITY, |p| p.0);
        let xb = cb.get(j).map_or(f64::INFINITY, |p| p.0);
        let x = xa.min(xb);
        if xa == x {
            fa = ca[i].1;
            i += 1;
        }
        if xb == x {
            fb = cb[j].1;
            j += 1;
        }
        gap = gap.max((fa - fb).abs());
    }
    Ok(gap)
}

pub fn cdf_export(scores_normal: &[f64], scores_anomalous: &[f64]) -> Result<CdfTables> {
    Ok(CdfTables {
        normal: empirical_cdf(scores_normal)?,
        anomalous: empirical_cdf(scores_anomalous)?,
        gap: separation_gap(scores_normal, scores_anomalous)?,
    })
}

pub fn write_cdf_csv<W: Write>(w: W, points: &[(f64, f64)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["value", "cumulative"])?;
    for (v, c) in points {
        wr.write_record([format!("{v:.8e}"), format!("{c:.12}")])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixtures() {
        let c = empirical_cdf(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
        assert_eq!(separation_gap(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(separation_gap(&[0.1, 0.5, 0.9], &[2.0, 2.5, 3.0]).unwrap(), 1.0);
        assert_eq!(empirical_cdf(&[1.0, 1.0]).unwrap(), vec![(1.0, 1.0)]);
        assert!(empirical_cdf(&[]).is_err());
    }

    proptest! {
        #[test]
        fn gap_matches_brute_force(
            a in prop::collection::vec(0u8..30, 1..40),
            b in prop::collection::vec(0u8..30, 1..40),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let cdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
            let brute = a.iter().chain(&b).map(|&x| (cdf(&a, x) - cdf(&b, x)).abs()).fold(0.0, f64::max);
            prop_assert!((separation_gap(&a, &b).unwrap() - brute).abs() < 1e-12);
            let c = empirical_cdf(&a).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        }
    }
}

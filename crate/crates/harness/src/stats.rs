use crate::error::{HarnessError, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean, using the unbiased sample variance.
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Product-moment correlation, clamped to [−1, 1] against rounding.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(HarnessError::UndefinedCorrelation(format!(
            "columns differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(HarnessError::UndefinedCorrelation(
            "need at least two points".into(),
        ));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    for (name, s, col) in [("first", sxx, xs), ("second", syy, ys)] {
        if s == 0.0 || col.iter().all(|&v| v == col[0]) {
            return Err(HarnessError::UndefinedCorrelation(format!(
                "{name} column is constant"
            )));
        }
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_correlations() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let affine: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &affine).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_table_matches_hand_formula() {
        // n = 4: Σx = 10, Σy = 14, Σxy = 39, Σx² = 30, Σy² = 54.
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [2.0, 3.0, 5.0, 4.0];
        let n = 4.0;
        let r = (n * 39.0 - 10.0 * 14.0)
            / ((n * 30.0 - 100.0f64).sqrt() * (n * 54.0 - 196.0f64).sqrt());
        assert!((pearson(&xs, &ys).unwrap() - r).abs() < 1e-15);
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_or_short_columns_are_undefined() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(HarnessError::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[2.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn standard_error_of_known_sample() {
        // Sample variance of (1, 2, 3, 4) is 5/3.
        let se = standard_error(&[1.0, 2.0, 3.0, 4.0]);
        assert!((se - (5.0 / 3.0 / 4.0f64).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn correlation_is_bounded_and_symmetric(
            pts in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 3..30)
        ) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let Ok(r) = pearson(&xs, &ys) {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - pearson(&ys, &xs).unwrap()).abs() < 1e-12);
            }
        }
    }
}

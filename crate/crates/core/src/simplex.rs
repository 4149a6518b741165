//! Probability-simplex helpers shared by the model, risk control and backtests.

/// Euclidean projection onto `{x : x >= 0, sum x = 1}` (sort-based, O(n log n)).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn is_on_simplex(b: &[f64], tol: f64) -> bool {
    !b.is_empty() && b.iter().all(|&x| x >= -tol) && (b.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_of_point_on_simplex_is_identity() {
        let b = [0.2, 0.3, 0.5];
        let p = project_simplex(&b);
        for (x, y) in p.iter().zip(b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = project_simplex(&[-1.0, 0.3, 0.4]);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.45).abs() < 1e-15 && (p[2] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[3.0; 4]), vec![0.25; 4]);
    }
}

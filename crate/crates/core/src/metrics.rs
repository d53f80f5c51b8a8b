//! Ranking and classification metrics, plus representation similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub ap: f64,
    pub f1_macro: f64,
    pub threshold: f64,
}

impl MetricReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        Ok(Self {
            auc: roc_auc(scores, labels)?,
            ap: average_precision(scores, labels)?,
            f1_macro: f1_macro(scores, labels, threshold)?,
            threshold,
        })
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidArgument(format!("label {y} is not 0 or 1")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    Ok(())
}

/// Mann–Whitney AUC with midranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, ties sharing their mean rank. Ranks
    // are kept doubled so that midranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += doubled_mid * tied_pos;
        i = j + 1;
    }
    let (p, q) = (pos as u128, neg as u128);
    // U = rank_sum − p(p+1)/2, all doubled
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Step-wise average precision over the ranking by (score desc, index asc).
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Unweighted mean of the fraud and benign F1 scores; `score ≥ threshold`
/// predicts fraud, and an undefined F1 counts as 0.
pub fn f1_macro(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fne = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let f1 = |tp: usize, fp: usize, fne: usize| {
        let denom = 2 * tp + fp + fne;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    Ok((f1(tp, fp, fne) + f1(tn, fne, fp)) / 2.0)
}

/// Threshold maximizing F1-macro on the given scores; candidates are the
/// distinct scores plus the default.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(DEFAULT_THRESHOLD);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, DEFAULT_THRESHOLD);
    for t in candidates {
        let f = f1_macro(scores, labels, t)?;
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best.1)
}

fn check_matrix(x: &[f64], rows: usize, what: &str) -> Result<usize> {
    if rows == 0 || x.len() % rows != 0 {
        return Err(Error::Shape(format!(
            "{what}: {} values do not form {rows} rows",
            x.len()
        )));
    }
    Ok(x.len() / rows)
}

/// Mean over rows of the cosine between `x_i` and `y_i`; rows where either
/// side has zero norm contribute 0.
pub fn mean_cosine_similarity(x: &[f64], y: &[f64], rows: usize) -> Result<f64> {
    let d = check_matrix(x, rows, "cosine")?;
    if y.len() != x.len() {
        return Err(Error::Shape(format!("cosine: {} vs {} values", x.len(), y.len())));
    }
    let mut total = 0.0;
    for i in 0..rows {
        let (a, b) = (&x[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            total += dot / (na * nb);
        }
    }
    Ok(total / rows as f64)
}

fn centered(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for c in 0..cols {
        let mean = (0..rows).map(|r| x[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * cols + c] -= mean;
        }
    }
    out
}

/// `aᵀ b` for row-major `rows × ca` and `rows × cb`, squared Frobenius norm.
fn cross_fro2(a: &[f64], ca: usize, b: &[f64], cb: usize, rows: usize) -> f64 {
    let mut m = vec![0.0; ca * cb];
    for r in 0..rows {
        let (ar, br) = (&a[r * ca..(r + 1) * ca], &b[r * cb..(r + 1) * cb]);
        for (i, &av) in ar.iter().enumerate() {
            let dst = &mut m[i * cb..(i + 1) * cb];
            for (o, &bv) in dst.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between column-centered `x` (rows × d1) and `y` (rows × d2).
pub fn linear_cka(x: &[f64], y: &[f64], rows: usize) -> Result<f64> {
    if rows < 2 {
        return Err(Error::InvalidArgument(format!("CKA needs at least 2 rows, got {rows}")));
    }
    let (d1, d2) = (check_matrix(x, rows, "cka x")?, check_matrix(y, rows, "cka y")?);
    let (xc, yc) = (centered(x, rows, d1), centered(y, rows, d2));
    let xx = cross_fro2(&xc, d1, &xc, d1, rows).sqrt();
    let yy = cross_fro2(&yc, d2, &yc, d2, rows).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let xy = cross_fro2(&yc, d2, &xc, d1, rows);
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn brute_ap(s: &[f64], y: &[u8]) -> f64 {
        // precision at each positive, ranking by the pairwise rule directly
        let outranks = |a: usize, b: usize| s[a] > s[b] || (s[a] == s[b] && a < b);
        let pos: Vec<usize> = (0..s.len()).filter(|&i| y[i] == 1).collect();
        let mut total = 0.0;
        for &p in &pos {
            let above = (0..s.len()).filter(|&k| k == p || outranks(k, p)).count();
            let pos_above = pos.iter().filter(|&&k| k == p || outranks(k, p)).count();
            total += pos_above as f64 / above as f64;
        }
        total / pos.len() as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.8, 0.7, 0.6, 0.5], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.3], &[1]), Err(Error::SingleClass)));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[0, 1]).unwrap(), 0.5);
        let ap = average_precision(&[0.9, 0.5, 0.7], &[1, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(average_precision(&[0.1], &[0]), Err(Error::NoPositives)));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_macro(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        let all_neg = f1_macro(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert!((all_neg - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_macro(&[0.9, 0.8], &[1, 0], 1.1).unwrap(), all_neg);
    }

    #[test]
    fn best_threshold_beats_default() {
        let s = [0.2, 0.3, 0.35, 0.1];
        let y = [0, 1, 1, 0];
        let t = best_threshold(&s, &y).unwrap();
        assert_eq!(f1_macro(&s, &y, t).unwrap(), 1.0);
    }

    #[test]
    fn cosine_examples() {
        let x = [1.0, 2.0, -3.0, 0.5];
        assert!((mean_cosine_similarity(&x, &x, 2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mean_cosine_similarity(&[1.0, 0.0], &[0.0, 1.0], 1).unwrap(), 0.0);
        let c = mean_cosine_similarity(&[1.0, 0.0], &[1.0, 1.0], 1).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_cosine_similarity(&[0.0, 0.0], &[1.0, 1.0], 1).unwrap(), 0.0);
    }

    fn matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        (0..rows * cols)
            .map(|i| (((i as u64 + 1) * (seed * 2654435761 + 97)) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn cka_invariances() {
        let x = matrix(20, 3, 5);
        assert!((linear_cka(&x, &x, 20).unwrap() - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = x.iter().map(|v| -3.5 * v).collect();
        assert!((linear_cka(&x, &scaled, 20).unwrap() - 1.0).abs() < 1e-12);
        // rotation by 30 degrees in the plane of the first two columns
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let rotated: Vec<f64> = x
            .chunks(3)
            .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]])
            .collect();
        assert!((linear_cka(&x, &rotated, 20).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_of_orthogonal_columns_is_zero() {
        // centered columns built by Gram–Schmidt against x
        let rows = 16;
        let x = matrix(rows, 1, 3);
        let xc = centered(&x, rows, 1);
        let raw = matrix(rows, 1, 9);
        let mut y = centered(&raw, rows, 1);
        let proj = y.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>() / xc.iter().map(|v| v * v).sum::<f64>();
        for (v, b) in y.iter_mut().zip(&xc) {
            *v -= proj * b;
        }
        assert!(linear_cka(&x, &y, rows).unwrap() < 1e-10);
    }

    #[test]
    fn cka_zero_variance_is_error() {
        assert!(matches!(
            linear_cka(&[1.0, 2.0, 1.0, 2.0], &[1.0, 3.0, 2.0, 5.0], 2),
            Err(Error::ZeroVariance)
        ));
    }

    fn scored_instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=50).prop_flat_map(|m| {
            (
                proptest::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), m),
                proptest::collection::vec(0u8..=1, m),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn fast_metrics_match_brute_force((s, y) in scored_instance()) {
            let pos = y.iter().filter(|&&v| v == 1).count();
            prop_assume!(pos > 0 && pos < y.len());
            let auc = roc_auc(&s, &y).unwrap();
            let ap = average_precision(&s, &y).unwrap();
            prop_assert!((auc - brute_auc(&s, &y)).abs() <= 1e-12);
            prop_assert!((ap - brute_ap(&s, &y)).abs() <= 1e-12);
            let f1 = f1_macro(&s, &y, 0.5).unwrap();
            for v in [auc, ap, f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn auc_invariant_under_increasing_transform((s, y) in scored_instance()) {
            let pos = y.iter().filter(|&&v| v == 1).count();
            prop_assume!(pos > 0 && pos < y.len());
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 7.0).collect();
            prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
        }

        #[test]
        fn cka_is_symmetric(rows in 3usize..30, d1 in 1usize..5, d2 in 1usize..5, seed in 1u64..500) {
            let x = matrix(rows, d1, seed);
            let y = matrix(rows, d2, seed + 1);
            if let (Ok(a), Ok(b)) = (linear_cka(&x, &y, rows), linear_cka(&y, &x, rows)) {
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}

//! Scalar entry points for the training losses.
//!
//! Each routes through the same tape ops the trainer uses.

use crate::autograd::{Mat, Tape};
use crate::error::{Error, Result};

/// `Σ −log σ(h_uᵀh_i − h_uᵀh_j) + λ Σ_m Σ −log σ(h_uᵀh_i^m − h_uᵀh_j^m)` over the rows.
///
/// `modal` holds one `(h_i^m, h_j^m)` pair per modality, row-aligned with `hu`.
pub fn bpr_loss(hu: &Mat, hi: &Mat, hj: &Mat, modal: &[(Mat, Mat)], lambda: f64) -> Result<f64> {
    let shape = hu.dim();
    let mismatched = hi.dim() != shape
        || hj.dim() != shape
        || modal
            .iter()
            .any(|(a, b)| a.dim() != shape || b.dim() != shape);
    if mismatched {
        return Err(Error::Dimension(
            "bpr_loss inputs must share one shape".into(),
        ));
    }
    let mut tape = Tape::new();
    let u = tape.constant(hu.clone());
    let term = |tape: &mut Tape, a: &Mat, b: &Mat| {
        let a = tape.constant(a.clone());
        let b = tape.constant(b.clone());
        let pa = tape.row_dot(u, a);
        let pb = tape.row_dot(u, b);
        let m = tape.sub(pa, pb);
        tape.neg_log_sigmoid_sum(m)
    };
    let mut total = term(&mut tape, hi, hj);
    for (a, b) in modal {
        let t = term(&mut tape, a, b);
        let t = tape.scale(t, lambda);
        total = tape.add(total, t);
    }
    Ok(tape.scalar(total))
}

/// `−log softmax(scores)[target]`
pub fn ce_loss(scores: &[f64], target: usize) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::Dimension(format!(
            "target {target} outside {} scores",
            scores.len()
        )));
    }
    let mut tape = Tape::new();
    let logits =
        tape.constant(Mat::from_shape_vec((1, scores.len()), scores.to_vec()).expect("row shape"));
    let l = tape.cross_entropy_sum(logits, vec![target]);
    Ok(tape.scalar(l))
}

/// `L_BPR + ω L_CE`
pub fn total_loss(bpr: f64, ce: f64, omega: f64) -> f64 {
    bpr + omega * ce
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn equal_scores_cost_ln_two() {
        let hu = array![[1.0, 2.0]];
        let h = array![[0.5, 0.5]];
        let l = bpr_loss(&hu, &h, &h, &[], 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let far = bpr_loss(
            &hu,
            &array![[100.0, 100.0]],
            &array![[-100.0, -100.0]],
            &[],
            0.0,
        )
        .unwrap();
        assert!(far < 1e-12);
    }

    #[test]
    fn uniform_cross_entropy() {
        let l = ce_loss(&[0.3; 100], 17).unwrap();
        assert!((l - 100f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&[1000.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        assert!(ce_loss(&[0.0], 1).is_err());
    }

    #[test]
    fn total_arithmetic() {
        assert_eq!(total_loss(0.5, 2.0, 1.0), 2.5);
        assert_eq!(total_loss(0.5, 2.0, 0.0), 0.5);
    }
}

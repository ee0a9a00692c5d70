use std::collections::HashMap;

use super::{Array, LeafId, Tape, Var};
use crate::error::Result;

/// Largest relative disagreement between reverse-mode and central finite
/// differences over every entry of the given leaves.
///
/// Each entry contributes `|AD − FD| / (|FD| + 1e-8)`.
pub fn fd_check(tape: &Tape, output: Var<'_>, leaves: &[LeafId], eps: f64) -> Result<f64> {
    let grads = tape.gradient(output, leaves)?;
    let mut worst: f64 = 0.0;
    for &leaf in leaves {
        let base = tape.leaf_value(leaf);
        let ad = grads.get(leaf).expect("requested leaf");
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += eps;
            let mut minus = base.clone();
            minus.data_mut()[k] -= eps;
            let f_plus = tape.eval(output, &HashMap::from([(leaf, plus)]))?.item();
            let f_minus = tape.eval(output, &HashMap::from([(leaf, minus)]))?.item();
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let err = (ad.data()[k] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Central finite-difference gradient of `output` with respect to one leaf.
pub fn fd_gradient(tape: &Tape, output: Var<'_>, leaf: LeafId, eps: f64) -> Result<Array> {
    let base = tape.leaf_value(leaf);
    let mut out = Array::zeros(base.shape());
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[k] += eps;
        let mut minus = base.clone();
        minus.data_mut()[k] -= eps;
        let f_plus = tape.eval(output, &HashMap::from([(leaf, plus)]))?.item();
        let f_minus = tape.eval(output, &HashMap::from([(leaf, minus)]))?.item();
        out.data_mut()[k] = (f_plus - f_minus) / (2.0 * eps);
    }
    Ok(out)
}

mod common;

use common::{gradcheck_batch, gradcheck_model, max_gradient_rel_error};
use plab::model::loss;

#[test]
fn analytic_gradients_match_central_differences() {
    let err = max_gradient_rel_error(0, 200, 1e-3);
    println!("max relative error over 200 entries: {err:e}");
    assert!(err < 1e-4, "max relative error {err:e}");
}

/// Central differences carry an O(h^2) error: shrinking h tenfold must
/// shrink the discrepancy about a hundredfold if the analytic gradient is exact.
#[test]
fn discrepancy_shrinks_quadratically_with_step() {
    let mut model = gradcheck_model(7);
    let batch = gradcheck_batch();
    let sup = batch.supervision(common::gradcheck_mask(), &[1, 1, 2]);
    let (_, grads, _, _) = model.loss_and_grads(&batch, &sup).unwrap();
    let mut diff = |ti: usize, i: usize, h: f64| {
        let orig = model.params.tensors[ti].data[i];
        model.params.tensors[ti].data[i] = orig + h;
        let up = loss(&model.forward(&batch).unwrap().0, &sup).unwrap();
        model.params.tensors[ti].data[i] = orig - h;
        let down = loss(&model.forward(&batch).unwrap().0, &sup).unwrap();
        model.params.tensors[ti].data[i] = orig;
        ((up - down) / (2.0 * h) - grads.tensors[ti].data[i]).abs()
    };
    let mut ratios = Vec::new();
    for ti in [0, 4, 10, 13] {
        for i in 0..4 {
            let coarse = diff(ti, i, 1e-2);
            let fine = diff(ti, i, 1e-3);
            if coarse > 1e-9 {
                ratios.push(coarse / fine);
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!(
        (50.0..200.0).contains(&median),
        "median error ratio {median}"
    );
}

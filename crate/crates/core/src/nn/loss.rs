use super::{Real, Tensor5};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, and its gradient `(σ(z) - y) / N`.
///
/// Uses `max(z, 0) - z·y + ln(1 + e^{-|z|})`, which never overflows.
pub fn bce_loss<T: Real>(logits: &Tensor5<T>, target: &Tensor5<T>) -> (f64, Tensor5<T>) {
    assert!(logits.same_shape(target), "logits and target shapes differ");
    let n = logits.data().len() as f64;
    let mut grad = Tensor5::zeros(logits.batch(), logits.channels(), logits.dims());
    let mut total = 0.0f64;
    for ((g, &z), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        let (z, y) = (z.as_f64(), y.as_f64());
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = T::from_f64((sigmoid(z) - y) / n);
    }
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_ln2() {
        let z = Tensor5::<f32>::zeros(1, 1, [3, 3, 3]);
        for y in [0.0, 1.0] {
            let (loss, _) = bce_loss(&z, &Tensor5::filled(1, 1, [3, 3, 3], y));
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_logit_approaches_zero() {
        let z = Tensor5::filled(1, 1, [1, 1, 1], 40.0f64);
        let y = Tensor5::filled(1, 1, [1, 1, 1], 1.0f64);
        let (loss, grad) = bce_loss(&z, &y);
        assert!(loss < 1e-15);
        assert!(grad.data()[0].abs() < 1e-15);
        // Huge logits stay finite.
        let z = Tensor5::filled(1, 1, [1, 1, 1], -1e4f64);
        let (loss, _) = bce_loss(&z, &y);
        assert!((loss - 1e4).abs() < 1e-9);
    }

    #[test]
    fn single_voxel_value() {
        let z = Tensor5::filled(1, 1, [1, 1, 1], 1.0f64);
        let y = Tensor5::filled(1, 1, [1, 1, 1], 0.0f64);
        let (loss, grad) = bce_loss(&z, &y);
        assert!((loss - 1.313262).abs() < 1e-6);
        assert!((grad.data()[0] - sigmoid(1.0)).abs() < 1e-15);
    }

    #[test]
    fn loss_is_non_negative() {
        let z = Tensor5::from_vec(1, 1, [4, 1, 1], vec![-3.0f64, -0.1, 0.2, 7.0]).unwrap();
        let y = Tensor5::from_vec(1, 1, [4, 1, 1], vec![1.0f64, 0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = bce_loss(&z, &y);
        assert!(loss > 0.0);
    }
}

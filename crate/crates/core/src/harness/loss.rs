use candle_core::{DType, Tensor};

use crate::decoder::check_finite;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::nn::log_softmax;

/// `(B, 2, H, W)` one-hot targets with channel 1 = change.
pub fn one_hot_targets(labels: &[&Mask], dtype: DType) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| Error::invalid("empty label batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(labels.len() * 2 * h * w);
    for m in labels {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::invalid("labels in a batch differ in size"));
        }
        data.extend(m.data().iter().map(|&v| f64::from(1 - v)));
        data.extend(m.data().iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::from_vec(data, (labels.len(), 2, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean per-pixel two-class cross-entropy from unnormalized logits.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::invalid(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dims(),
            targets.dims()
        )));
    }
    let (b, _, h, w) = logits.dims4()?;
    let nll = (log_softmax(logits, 1)? * targets)?.sum(1)?.neg()?;
    check_finite("loss", &nll.reshape((b, h * w))?)?;
    Ok(nll.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn uniform_logits_give_ln2() {
        let mut m = Mask::zeros(4, 4).unwrap();
        m.set(1, 2, true);
        let t = one_hot_targets(&[&m, &m], DType::F64).unwrap();
        let logits = Tensor::zeros((2, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &t).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logits_give_small_loss() {
        let mut m = Mask::zeros(3, 3).unwrap();
        m.set(0, 0, true);
        let t = one_hot_targets(&[&m], DType::F64).unwrap();
        let logits = ((t.clone() * 2.0).unwrap() - 1.0).unwrap() * 20.0;
        let l = cross_entropy(&logits.unwrap(), &t).unwrap().to_scalar::<f64>().unwrap();
        assert!(l < 1e-3);
    }

    #[test]
    fn non_finite_logits_are_reported() {
        let m = Mask::zeros(2, 2).unwrap();
        let t = one_hot_targets(&[&m], DType::F64).unwrap();
        let mut v = vec![0.0f64; 8];
        v[5] = f64::NAN;
        let logits = Tensor::from_vec(v, (1, 2, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(cross_entropy(&logits, &t), Err(Error::NonFinite { .. })));
    }
}

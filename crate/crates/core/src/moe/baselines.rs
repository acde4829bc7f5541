//! Reference forecasters. The LSTM baseline lives in [`crate::nncore::lstm`]
//! and is selected through `arch = "lstm"` on [`super::Model`].

use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Repeat the last observed value `h` times.
pub fn naive_forecast(x: &[f64], h: usize) -> Result<Vec<f64>> {
    let last = *x
        .last()
        .ok_or_else(|| Error::Config("naive forecast needs at least one observation".into()))?;
    Ok(vec![last; h])
}

/// Row-wise [`naive_forecast`] of a `[B, T]` batch → `[B, H]`.
pub fn naive_forecast_batch(x: &Tensor, h: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[1] == 0 {
        return Err(Error::shape("naive_forecast_batch", x.shape(), &[0, 1]));
    }
    let out = x
        .data()
        .chunks_exact(x.shape()[1])
        .map(|row| naive_forecast(row, h))
        .collect::<Result<Vec<_>>>()?
        .concat();
    Tensor::new(&[x.shape()[0], h], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeats_last_value() {
        assert_eq!(naive_forecast(&[1.0, 2.0, 3.0], 2).unwrap(), vec![3.0, 3.0]);
        assert_eq!(naive_forecast(&[7.0, -1.5], 1).unwrap(), vec![-1.5]);
        assert!(naive_forecast(&[], 3).is_err());
    }

    #[test]
    fn batch_rows() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = naive_forecast_batch(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[3.0, 3.0, 6.0, 6.0]);
    }
}

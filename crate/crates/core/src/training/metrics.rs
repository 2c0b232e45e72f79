use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Mean squared error, accumulated in `f64`.
pub fn mse<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    y.same_shape(y_hat, "mse")?;
    let n = y.numel() as f64;
    Ok(y.data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Mean absolute error, accumulated in `f64`.
pub fn mae<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    y.same_shape(y_hat, "mae")?;
    let n = y.numel() as f64;
    Ok(y.data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n)
}

/// Running sums for metrics over many batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    pub sq: f64,
    pub abs: f64,
    pub n: usize,
}

impl MetricSums {
    pub fn add<T: Scalar>(&mut self, y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<()> {
        y.same_shape(y_hat, "metrics")?;
        for (&a, &b) in y.data().iter().zip(y_hat.data()) {
            let d = a.as_f64() - b.as_f64();
            self.sq += d * d;
            self.abs += d.abs();
        }
        self.n += y.numel();
        Ok(())
    }

    pub fn mse(&self) -> f64 {
        self.sq / self.n.max(1) as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.n.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        let y = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let p = Tensor::<f64>::from_f64(&[2], &[2.0, 4.0]).unwrap();
        assert_eq!(mse(&y, &p).unwrap(), 2.5);
        assert_eq!(mae(&y, &p).unwrap(), 1.5);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert!(mse(&y, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn sums_match_direct() {
        let y = Tensor::<f32>::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let p = Tensor::<f32>::from_f64(&[4], &[0.0, -1.0, 0.5, 1.0]).unwrap();
        let mut s = MetricSums::default();
        s.add(&y, &p).unwrap();
        assert!((s.mse() - mse(&y, &p).unwrap()).abs() < 1e-12);
        assert!((s.mae() - mae(&y, &p).unwrap()).abs() < 1e-12);
    }
}

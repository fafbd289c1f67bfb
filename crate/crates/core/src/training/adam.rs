use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("optimizer state does not match the parameter list"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::shape(format!(
                    "gradient of length {} for a parameter of shape {:?}",
                    g.len(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut p = vec![Tensor::from_slice(&[1.0])];
        let mut adam = Adam::new(&p, 1e-3);
        let g = 0.37;
        adam.step(&mut p, &[vec![g]]).unwrap();
        let expected = 1e-3 * g / (g + 1e-8);
        let step = 1.0 - p[0].data()[0];
        assert!((step - expected).abs() < 1e-15);
        // Epsilon placement conventions differ only at the 1e-10 level here.
        let alt = 1e-3 * g / (g + 1e-8 * (1.0f64 - 0.999).sqrt() / (1.0 - 0.9));
        assert!((step - alt).abs() < 1e-10);
    }

    #[test]
    fn no_op_cases() {
        let mut p = vec![Tensor::from_slice(&[1.0, -2.0])];
        let mut adam = Adam::new(&p, 1e-3);
        adam.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p[0].data(), [1.0, -2.0]);
        let mut frozen = Adam::new(&p, 0.0);
        frozen.step(&mut p, &[vec![3.0, 1.0]]).unwrap();
        assert_eq!(p[0].data(), [1.0, -2.0]);
        assert!(adam.step(&mut p, &[vec![0.0]]).is_err());
    }
}

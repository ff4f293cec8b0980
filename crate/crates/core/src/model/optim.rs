use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Heavy-ball momentum SGD: `v <- momentum * v + g`, `p <- p - lr * v`.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", format!("param {:?} grad {:?} velocity {:?}", p.shape(), g.shape(), v.shape())));
        }
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Optimizer state for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64) -> Self {
        Sgd { momentum, velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, lr, self.momentum)
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// Step schedule: `base` decayed by 0.1 once half and again once three quarters
/// of the epochs have passed.
pub fn lr_at_epoch(base: f64, epoch: usize, epochs: usize) -> f64 {
    let e = epoch as f64;
    let total = epochs as f64;
    let mut lr = base;
    for frac in [0.5, 0.75] {
        if e >= frac * total {
            lr *= 0.1;
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = vec![t(&[1.0, 2.0])];
        let mut v = vec![t(&[0.0, 0.0])];
        sgd_step(&mut p, &[t(&[0.5, -1.0])], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p[0].data(), &[0.5, 3.0]);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut p = vec![t(&[1.0])];
        let mut v = vec![t(&[0.0])];
        sgd_step(&mut p, &[t(&[0.0])], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        let mut v = vec![t(&[2.0])];
        let mut q = vec![t(&[1.0])];
        sgd_step(&mut q, &[t(&[0.0])], &mut v, 0.1, 0.5).unwrap();
        assert_eq!(v[0].data(), &[1.0]);
    }

    #[test]
    fn quadratic_bowl_converges_geometrically() {
        let mut p = vec![t(&[1.0])];
        let mut v = vec![t(&[0.0])];
        for _ in 0..100 {
            let g = p[0].clone();
            sgd_step(&mut p, &[g], &mut v, 0.1, 0.0).unwrap();
        }
        let expected = 0.9f64.powi(100);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!(p[0].data()[0].abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = vec![t(&[1.0])];
        let mut v = vec![t(&[0.0])];
        assert!(sgd_step(&mut p, &[t(&[1.0, 2.0])], &mut v, 0.1, 0.0).is_err());
        assert!(sgd_step(&mut p, &[t(&[1.0])], &mut v, 0.0, 0.0).is_err());
    }

    #[test]
    fn schedule_decays_at_half_and_three_quarters() {
        let lrs: Vec<f64> = (0..8).map(|e| lr_at_epoch(0.01, e, 8)).collect();
        assert_eq!(lrs[3], 0.01);
        assert!((lrs[4] - 0.001).abs() < 1e-15);
        assert!((lrs[6] - 0.0001).abs() < 1e-15);
    }
}

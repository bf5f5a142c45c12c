//! Rectified-flow mathematics: the straight interpolation path between data
//! and a Gaussian prior, its constant velocity target, the matching loss, and
//! Euler integration of a learned velocity field from noise back to data.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::uniform_f32;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub z_t: Tensor,
    pub t: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerScheme {
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub scheme: SamplerScheme,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 50, scheme: SamplerScheme::Euler, seed: 0 }
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", a.shape()),
            actual: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// z(t) = (1 - t) z0 + t z1, elementwise. Endpoints are exact.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f32) -> Result<FlowState> {
    check_same_shape(z0, z1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("interpolation time {t} outside [0, 1]")));
    }
    let mut z_t = Tensor::zeros(z0.shape());
    let a = 1.0 - t;
    for ((o, &x0), &x1) in z_t.data_mut().iter_mut().zip(z0.data()).zip(z1.data()) {
        *o = a * x0 + t * x1;
    }
    Ok(FlowState { z_t, t })
}

/// The straight path's velocity: z1 - z0, independent of t.
pub fn velocity_target(z0: &Tensor, z1: &Tensor) -> Result<Tensor> {
    check_same_shape(z0, z1)?;
    let mut v = Tensor::zeros(z0.shape());
    for ((o, &x0), &x1) in v.data_mut().iter_mut().zip(z0.data()).zip(z1.data()) {
        *o = x1 - x0;
    }
    Ok(v)
}

/// Mean squared error between a predicted velocity and the path's target,
/// averaged over every element.
pub fn flow_loss(predicted_v: &Tensor, z0: &Tensor, z1: &Tensor) -> Result<f32> {
    check_same_shape(predicted_v, z0)?;
    check_same_shape(z0, z1)?;
    let mut acc = 0.0f64;
    for ((&p, &x0), &x1) in predicted_v.data().iter().zip(z0.data()).zip(z1.data()) {
        if !p.is_finite() || !x0.is_finite() || !x1.is_finite() {
            return Err(Error::NonFinite { context: "flow_loss inputs".into() });
        }
        let d = (p - (x1 - x0)) as f64;
        acc += d * d;
    }
    Ok((acc / predicted_v.len().max(1) as f64) as f32)
}

/// Draw t ~ U(0, 1).
pub fn sample_time(rng: &mut ChaCha8Rng) -> f32 {
    uniform_f32(rng)
}

/// A velocity field the sampler can integrate. Conditioning and the task
/// embedding live inside the implementor.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f32) -> Result<Tensor>;
}

/// Adapter for closures, mainly in tests.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, f32) -> Result<Tensor>,
{
    fn velocity(&self, z: &Tensor, t: f32) -> Result<Tensor> {
        (self.0)(z, t)
    }
}

/// Integrate dz/dt = v(z, t) from t = 1 (prior) down to t = 0 (data) with
/// uniform Euler steps: z <- z - dt * v. The state is kept in f64 so the
/// accumulated update error stays far below f32 resolution; the model is
/// evaluated on the rounded f32 state.
pub fn euler_sample(field: &impl VelocityField, z1: &Tensor, cfg: &SamplerConfig) -> Result<Tensor> {
    if cfg.num_steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let SamplerScheme::Euler = cfg.scheme;
    let n = cfg.num_steps;
    let mut state: Vec<f64> = z1.data().iter().map(|&v| v as f64).collect();
    let mut z = z1.clone();
    for k in 0..n {
        let t_k = (n - k) as f32 / n as f32;
        let t_next = (n - k - 1) as f32 / n as f32;
        let dt = (t_k - t_next) as f64;
        let v = field.velocity(&z, t_k)?;
        check_same_shape(&v, z1)?;
        if !v.all_finite() {
            return Err(Error::NonFinite { context: format!("euler velocity at step {k}") });
        }
        for ((s, &vi), o) in state.iter_mut().zip(v.data()).zip(z.data_mut()) {
            *s -= dt * vi as f64;
            *o = *s as f32;
        }
        if !z.all_finite() {
            return Err(Error::NonFinite { context: format!("euler state after step {k}") });
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream_rng, Stream};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Sample);
        let mut t = Tensor::zeros(shape);
        fill_normal(&mut rng, t.data_mut());
        t
    }

    #[test]
    fn interpolate_endpoints_are_exact() {
        let z0 = randn(&[4, 8], 1);
        let z1 = randn(&[4, 8], 2);
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap().z_t, z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap().z_t, z1);
    }

    #[test]
    fn interpolate_matches_hand_computed_values() {
        let z0 = Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap();
        let z1 = Tensor::from_vec(&[2], vec![0.0, 3.0]).unwrap();
        let s = interpolate(&z0, &z1, 0.25).unwrap();
        assert_eq!(s.z_t.data(), &[1.5, 0.0]);

        let mid = interpolate(&z0, &z1, 0.5).unwrap();
        assert_eq!(mid.z_t.data(), &[1.0, 1.0]);
    }

    #[test]
    fn interpolate_validates_inputs() {
        let z0 = Tensor::zeros(&[2, 2]);
        let z1 = Tensor::zeros(&[2, 3]);
        assert!(interpolate(&z0, &z1, 0.5).is_err());
        let z1 = Tensor::zeros(&[2, 2]);
        assert!(interpolate(&z0, &z1, 1.5).is_err());
        assert!(interpolate(&z0, &z1, -0.1).is_err());
    }

    #[test]
    fn velocity_target_is_difference_and_t_free() {
        let z0 = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let z1 = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(velocity_target(&z0, &z1).unwrap().data(), &[1.0, 1.0]);

        let z = randn(&[3, 5], 3);
        let v = velocity_target(&z, &z).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn path_identity_holds_along_t() {
        // z(t) + (1 - t) * v* == z1
        let z0 = randn(&[6, 7], 4);
        let z1 = randn(&[6, 7], 5);
        let v = velocity_target(&z0, &z1).unwrap();
        for &t in &[0.0, 0.1, 0.37, 0.5, 0.92, 1.0] {
            let s = interpolate(&z0, &z1, t).unwrap();
            for i in 0..z0.len() {
                let recon = s.z_t.data()[i] + (1.0 - t) * v.data()[i];
                assert!((recon - z1.data()[i]).abs() <= 1e-6, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn flow_loss_examples() {
        let z0 = randn(&[4, 4], 6);
        let z1 = randn(&[4, 4], 7);
        let v = velocity_target(&z0, &z1).unwrap();
        assert_eq!(flow_loss(&v, &z0, &z1).unwrap(), 0.0);

        // zero predictor against unit-mean-square target
        let z0 = Tensor::zeros(&[2, 2]);
        let z1 = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(flow_loss(&zero, &z0, &z1).unwrap(), 1.0);
    }

    #[test]
    fn flow_loss_is_batch_order_invariant() {
        let z0 = randn(&[8, 5], 8);
        let z1 = randn(&[8, 5], 9);
        let v = randn(&[8, 5], 10);
        let base = flow_loss(&v, &z0, &z1).unwrap();

        // Swap two "batch rows" in all three tensors.
        let swap = |t: &Tensor| {
            let mut d = t.data().to_vec();
            for c in 0..5 {
                d.swap(c, 3 * 5 + c);
            }
            Tensor::from_vec(&[8, 5], d).unwrap()
        };
        let permuted = flow_loss(&swap(&v), &swap(&z0), &swap(&z1)).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn flow_loss_rejects_non_finite() {
        let z0 = Tensor::zeros(&[2]);
        let z1 = Tensor::zeros(&[2]);
        let bad = Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(flow_loss(&bad, &z0, &z1), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sample_time_is_deterministic_per_seed() {
        let mut a = stream_rng(5, Stream::Train);
        let mut b = stream_rng(5, Stream::Train);
        let xs: Vec<f32> = (0..32).map(|_| sample_time(&mut a)).collect();
        let ys: Vec<f32> = (0..32).map(|_| sample_time(&mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|&t| (0.0..1.0).contains(&t)));
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let z1 = randn(&[4, 16], 11);
        let c = randn(&[4, 16], 12);
        let expected: Vec<f32> = z1.data().iter().zip(c.data()).map(|(&a, &b)| a - b).collect();
        for &steps in &[1usize, 7, 50] {
            let field = FnField(|_z: &Tensor, _t: f32| Ok(c.clone()));
            let cfg = SamplerConfig { num_steps: steps, ..SamplerConfig::default() };
            let out = euler_sample(&field, &z1, &cfg).unwrap();
            assert_eq!(out.data(), &expected[..], "steps = {steps}");
        }
    }

    #[test]
    fn euler_oracle_field_recovers_z0_in_one_step() {
        let z0 = randn(&[2, 32], 13);
        let z1 = randn(&[2, 32], 14);
        let v = velocity_target(&z0, &z1).unwrap();
        let field = FnField(|_z: &Tensor, _t: f32| Ok(v.clone()));
        let cfg = SamplerConfig { num_steps: 1, ..SamplerConfig::default() };
        let out = euler_sample(&field, &z1, &cfg).unwrap();
        for (o, e) in out.data().iter().zip(z0.data()) {
            assert!((o - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn euler_aborts_on_non_finite_velocity_with_step_index() {
        let z1 = Tensor::zeros(&[2, 2]);
        let field = FnField(|_z: &Tensor, t: f32| {
            if t < 0.6 {
                Ok(Tensor::filled(&[2, 2], f32::INFINITY))
            } else {
                Ok(Tensor::zeros(&[2, 2]))
            }
        });
        let cfg = SamplerConfig { num_steps: 4, ..SamplerConfig::default() };
        match euler_sample(&field, &z1, &cfg) {
            Err(Error::NonFinite { context }) => assert!(context.contains("step 2"), "{context}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}

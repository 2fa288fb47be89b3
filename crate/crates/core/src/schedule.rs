//! Interpolation paths between noise and data.
//!
//! A path is `x_t = alpha(t) * data + beta(t) * noise` with noise at `t = 0`
//! and data at `t = 1`. The first and second time derivatives of the path are
//! the supervision targets of the two flow-matching heads.

use crate::tensor::{Result, Tensor, TensorError};

/// Upper bound on `t` for variance-preserving derivative evaluation.
/// `beta' ~ (1-t)^(-1/2)` and `beta'' ~ (1-t)^(-3/2)` diverge at the data end.
pub const VP_T_MAX: f64 = 1.0 - 1e-4;

pub const VP_DEFAULT_A: f64 = 19.9;
pub const VP_DEFAULT_B: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `alpha = t`, `beta = 1 - t`.
    Linear,
    /// `alpha = exp(-a(1-t)^2/4 - b(1-t)/2)`, `beta = sqrt(1 - alpha^2)`.
    Vp { a: f64, b: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::vp()
    }
}

/// Path coefficients and their first and second time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
    pub dd_alpha: f64,
    pub dd_beta: f64,
}

/// Noisy state plus first- and second-order targets at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub noisy: Tensor,
    pub first: Tensor,
    pub second: Tensor,
}

impl Schedule {
    pub fn vp() -> Self {
        Schedule::Vp {
            a: VP_DEFAULT_A,
            b: VP_DEFAULT_B,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Vp { .. } => "vp",
        }
    }

    /// Largest time at which training draws targets.
    pub fn t_max(&self) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Vp { .. } => VP_T_MAX,
        }
    }

    /// Closed-form coefficients at `t`.
    ///
    /// For the VP path the derivatives of `beta` are evaluated at
    /// `min(t, VP_T_MAX)`; `alpha`, `beta` and the derivatives of `alpha` are
    /// exact at `t`.
    pub fn coeffs(&self, t: f64) -> Result<Coeffs> {
        if !(0.0..=1.0).contains(&t) {
            return Err(TensorError::Invalid {
                op: "schedule",
                msg: format!("time {t} outside [0, 1]"),
            });
        }
        Ok(match *self {
            Schedule::Linear => Coeffs {
                alpha: t,
                beta: 1.0 - t,
                d_alpha: 1.0,
                d_beta: -1.0,
                dd_alpha: 0.0,
                dd_beta: 0.0,
            },
            Schedule::Vp { a, b } => {
                let (alpha, d_alpha, dd_alpha, beta) = vp_alpha(a, b, t);
                let (al, dal, ddal, be) = vp_alpha(a, b, t.min(VP_T_MAX));
                let d_beta = -al * dal / be;
                let dd_beta = -(dal * dal + al * ddal) / be - (al * dal).powi(2) / be.powi(3);
                Coeffs {
                    alpha,
                    beta,
                    d_alpha,
                    d_beta,
                    dd_alpha,
                    dd_beta,
                }
            }
        })
    }

    /// Noisy input and both supervision targets for `data` and `noise` at `t`.
    pub fn make_point(&self, data: &Tensor, noise: &Tensor, t: f64) -> Result<TrajectoryPoint> {
        let k = self.coeffs(t)?;
        Ok(TrajectoryPoint {
            noisy: data.lincomb(k.alpha, noise, k.beta)?,
            first: data.lincomb(k.d_alpha, noise, k.d_beta)?,
            second: data.lincomb(k.dd_alpha, noise, k.dd_beta)?,
        })
    }
}

/// `(alpha, alpha', alpha'', beta)` for the VP path.
fn vp_alpha(a: f64, b: f64, t: f64) -> (f64, f64, f64, f64) {
    let u = 1.0 - t;
    let expo = -0.25 * a * u * u - 0.5 * b * u;
    let alpha = expo.exp();
    let g = 0.5 * a * u + 0.5 * b;
    let d_alpha = alpha * g;
    let dd_alpha = alpha * (g * g - 0.5 * a);
    // 1 - alpha^2 without cancellation near t = 1
    let beta = (-(2.0 * expo).exp_m1()).sqrt();
    (alpha, d_alpha, dd_alpha, beta)
}

/// Velocity of the linear path, `data - noise`, which does not depend on `t`.
pub fn velocity_linear(target: &Tensor, noise: &Tensor) -> Result<Tensor> {
    target.sub(noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn vp_endpoint_hits_data() {
        let k = Schedule::vp().coeffs(1.0).unwrap();
        assert_eq!(k.alpha, 1.0);
        assert_eq!(k.beta, 0.0);
        assert!(k.d_beta.is_finite() && k.dd_beta.is_finite());
    }

    #[test]
    fn linear_derivatives() {
        for t in [0.0, 0.3, 1.0] {
            let k = Schedule::Linear.coeffs(t).unwrap();
            assert_eq!((k.alpha, k.beta), (t, 1.0 - t));
            assert_eq!((k.d_alpha, k.d_beta, k.dd_alpha, k.dd_beta), (1.0, -1.0, 0.0, 0.0));
        }
    }

    // Reference digits from a 40-digit evaluation of the closed form and its
    // numerical derivatives.
    #[test]
    fn vp_values_match_extended_precision() {
        let k = Schedule::vp().coeffs(0.0).unwrap();
        assert!(rel(k.alpha, 0.006_571_586_494_929_615) < 1e-14);
        assert!(rel(k.beta, 0.999_978_406_892_338_7) < 1e-14);
        assert!(rel(k.d_alpha, 0.065_715_864_949_296_15) < 1e-13);
        assert!(rel(k.d_beta, -0.000_431_866_815_950_065_2) < 1e-12);
        assert!(rel(k.dd_alpha, 0.591_771_363_868_411_8) < 1e-13);
        assert!(rel(k.dd_beta, -0.008_207_815_350_105_103) < 1e-12);

        let k = Schedule::vp().coeffs(0.5).unwrap();
        assert!(rel(k.alpha, 0.281_182_880_796_752_4) < 1e-14);
        assert!(rel(k.d_alpha, 1.412_943_976_003_681) < 1e-13);
        assert!(rel(k.d_beta, -0.413_998_768_223_978_8) < 1e-13);
        assert!(rel(k.dd_alpha, 4.302_273_815_490_809) < 1e-13);
        assert!(rel(k.dd_beta, -3.519_529_636_356_187) < 1e-13);
    }

    #[test]
    fn out_of_range_time_is_error() {
        assert!(Schedule::vp().coeffs(-0.01).is_err());
        assert!(Schedule::Linear.coeffs(1.5).is_err());
        assert!(Schedule::Linear.coeffs(f64::NAN).is_err());
    }

    #[test]
    fn beta_nonnegative() {
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            assert!(Schedule::vp().coeffs(t).unwrap().beta >= 0.0);
        }
    }

    #[test]
    fn linear_point_endpoints_and_zero_second_order() {
        let x = Tensor::from_fn(2, 2, 2, |i, j, l| (i + 2 * j) as f64 - l as f64);
        let z = Tensor::from_fn(2, 2, 2, |i, j, l| 0.5 - (i * j + l) as f64);
        let p0 = Schedule::Linear.make_point(&x, &z, 0.0).unwrap();
        assert_eq!(p0.noisy, z);
        let p1 = Schedule::Linear.make_point(&x, &z, 1.0).unwrap();
        assert_eq!(p1.noisy, x);
        let p = Schedule::Linear.make_point(&x, &z, 0.37).unwrap();
        assert!(p.second.data().iter().all(|v| *v == 0.0));
        assert_eq!(p.first, velocity_linear(&x, &z).unwrap());
    }

    #[test]
    fn velocity_edge_cases() {
        let x = Tensor::from_fn(1, 2, 3, |_, j, l| (j + l) as f64);
        assert!(velocity_linear(&x, &x).unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(velocity_linear(&x, &Tensor::zeros(1, 2, 3)).unwrap(), x);
        assert!(velocity_linear(&x, &Tensor::zeros(2, 1, 3)).is_err());
    }
}

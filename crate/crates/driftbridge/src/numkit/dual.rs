//! Forward-mode dual numbers.
//!
//! A [`DualScalar`] carries a value and the tangent of that value with respect
//! to one chosen scalar input. Seeding the time input with tangent 1 and
//! pushing duals through a network yields `∂(output)/∂t` exactly, in a single
//! pass, with `x` held fixed.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::activation::Activation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualScalar {
    pub value: f64,
    pub tangent: f64,
}

impl DualScalar {
    /// A constant: zero tangent.
    pub fn constant(value: f64) -> Self {
        DualScalar {
            value,
            tangent: 0.0,
        }
    }

    /// The differentiation variable itself: tangent one.
    pub fn variable(value: f64) -> Self {
        DualScalar {
            value,
            tangent: 1.0,
        }
    }

    pub fn activate(self, a: Activation) -> Self {
        DualScalar {
            value: a.f(self.value),
            tangent: a.df(self.value) * self.tangent,
        }
    }
}

impl Add for DualScalar {
    type Output = DualScalar;
    fn add(self, rhs: Self) -> Self {
        DualScalar {
            value: self.value + rhs.value,
            tangent: self.tangent + rhs.tangent,
        }
    }
}

impl Sub for DualScalar {
    type Output = DualScalar;
    fn sub(self, rhs: Self) -> Self {
        DualScalar {
            value: self.value - rhs.value,
            tangent: self.tangent - rhs.tangent,
        }
    }
}

impl Mul for DualScalar {
    type Output = DualScalar;
    fn mul(self, rhs: Self) -> Self {
        DualScalar {
            value: self.value * rhs.value,
            tangent: self.value * rhs.tangent + self.tangent * rhs.value,
        }
    }
}

impl Div for DualScalar {
    type Output = DualScalar;
    fn div(self, rhs: Self) -> Self {
        DualScalar {
            value: self.value / rhs.value,
            tangent: (self.tangent * rhs.value - self.value * rhs.tangent)
                / (rhs.value * rhs.value),
        }
    }
}

impl Neg for DualScalar {
    type Output = DualScalar;
    fn neg(self) -> Self {
        DualScalar {
            value: -self.value,
            tangent: -self.tangent,
        }
    }
}

impl Mul<f64> for DualScalar {
    type Output = DualScalar;
    fn mul(self, rhs: f64) -> Self {
        DualScalar {
            value: self.value * rhs,
            tangent: self.tangent * rhs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let a = DualScalar {
            value: 2.0,
            tangent: 3.0,
        };
        let b = DualScalar {
            value: 5.0,
            tangent: 7.0,
        };
        let p = a * b;
        assert_eq!(p.value, 10.0);
        assert_eq!(p.tangent, 2.0 * 7.0 + 3.0 * 5.0);
    }

    #[test]
    fn chain_rule_through_activation() {
        // g(t) = silu(3t) at t = 0.4 -> g'(t) = 3 silu'(1.2)
        let t = DualScalar::variable(0.4);
        let g = (t * 3.0).activate(Activation::Silu);
        let expected = 3.0 * Activation::Silu.df(1.2);
        assert!((g.tangent - expected).abs() < 1e-14);
    }

    #[test]
    fn quotient_rule() {
        // f(t) = t / (1 + t^2), f'(t) = (1 - t^2) / (1 + t^2)^2
        let t = DualScalar::variable(0.7);
        let denom = DualScalar::constant(1.0) + t * t;
        let f = t / denom;
        let expected = (1.0 - 0.49) / ((1.49_f64) * 1.49);
        assert!((f.tangent - expected).abs() < 1e-14);
    }
}

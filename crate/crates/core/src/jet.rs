//! Scalars for evaluating formulas either in plain `f64` or as truncated
//! second-order Taylor jets in the spectral parameter.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(x: f64) -> Self;
    fn val(self) -> f64;
    fn ln(self) -> Self;
    /// `(cos(√λ s), sin(√λ s)/√λ)` with the `λ → 0` limit `(1, s)`.
    fn trig(lam: Self, s: f64) -> (Self, Self);
    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
    /// Solves the dense system `a x = b`.
    fn solve(a: &[Vec<Self>], b: &[Self]) -> Option<Vec<Self>>;
}

fn lu_of(a: &[Vec<f64>]) -> nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let n = a.len();
    nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]).lu()
}

/// Plain trig evaluation with a series branch for small arguments.
pub fn trig_f64(lam: f64, s: f64) -> (f64, f64) {
    let x = lam * s * s;
    if x.abs() < 1e-6 {
        // Series up to x^3 is exact to round-off here.
        let c = 1.0 - x / 2.0 + x * x / 24.0 - x * x * x / 720.0;
        let sk = s * (1.0 - x / 6.0 + x * x / 120.0 - x * x * x / 5040.0);
        return (c, sk);
    }
    if lam > 0.0 {
        let k = lam.sqrt();
        ((k * s).cos(), (k * s).sin() / k)
    } else {
        let k = (-lam).sqrt();
        ((k * s).cosh(), (k * s).sinh() / k)
    }
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn val(self) -> f64 {
        self
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn trig(lam: Self, s: f64) -> (Self, Self) {
        trig_f64(lam, s)
    }
    fn solve(a: &[Vec<Self>], b: &[Self]) -> Option<Vec<Self>> {
        let x = lu_of(a).solve(&nalgebra::DVector::from_column_slice(b))?;
        Some(x.iter().copied().collect())
    }
}

/// `v[0] + v[1] ε + v[2] ε²` modulo `ε³`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet(pub [f64; 3]);

impl Jet {
    pub fn var(x: f64) -> Self {
        Jet([x, 1.0, 0.0])
    }
    /// First derivative.
    pub fn d1(self) -> f64 {
        self.0[1]
    }
    /// Second derivative.
    pub fn d2(self) -> f64 {
        2.0 * self.0[2]
    }
    fn recip(self) -> Self {
        let [b0, b1, b2] = self.0;
        let r0 = 1.0 / b0;
        Jet([r0, -b1 * r0 * r0, (b1 * b1 - b0 * b2) * r0 * r0 * r0])
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}
impl AddAssign for Jet {
    fn add_assign(&mut self, o: Jet) {
        *self = *self + o;
    }
}
impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}
impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet([-self.0[0], -self.0[1], -self.0[2]])
    }
}
impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let (a, b) = (self.0, o.0);
        Jet([a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[0] * b[2] + a[1] * b[1] + a[2] * b[0]])
    }
}
impl Div for Jet {
    type Output = Jet;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

impl Scalar for Jet {
    fn cst(x: f64) -> Self {
        Jet([x, 0.0, 0.0])
    }
    fn val(self) -> f64 {
        self.0[0]
    }
    fn ln(self) -> Self {
        let [b0, b1, b2] = self.0;
        Jet([b0.ln(), b1 / b0, b2 / b0 - b1 * b1 / (2.0 * b0 * b0)])
    }
    fn trig(lam: Self, s: f64) -> (Self, Self) {
        // Power series in λ: c = Σ (−λ)^n s^{2n}/(2n)!, sk = Σ (−λ)^n s^{2n+1}/(2n+1)!.
        // Coefficient j of the jet is Σ_n C(n, j) (−1)^n λ^{n−j} s^{2n}/(2n)!.
        let l0 = lam.0[0];
        let mut c = [0.0; 3];
        let mut sk = [0.0; 3];
        let mut term_c = 1.0; // s^{2n}/(2n)!
        let mut term_s = s; // s^{2n+1}/(2n+1)!
        let mut n = 0usize;
        loop {
            let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
            let mut small = true;
            for j in 0..=2.min(n) {
                let binom = match j {
                    0 => 1.0,
                    1 => n as f64,
                    _ => (n * (n - 1)) as f64 / 2.0,
                };
                let p = l0.powi((n - j) as i32);
                let ac = sign * binom * p * term_c;
                let as_ = sign * binom * p * term_s;
                c[j] += ac;
                sk[j] += as_;
                if ac.abs() > 1e-18 * (1.0 + c[j].abs()) || as_.abs() > 1e-18 * (1.0 + sk[j].abs())
                {
                    small = false;
                }
            }
            n += 1;
            if (small && n > 4) || n > 200 {
                break;
            }
            let nn = (2 * n) as f64;
            term_c *= s * s / ((nn - 1.0) * nn);
            term_s *= s * s / (nn * (nn + 1.0));
        }
        let (c0, s0) = trig_f64(l0, s);
        c[0] = c0;
        sk[0] = s0;
        // Compose with λ = l0 + λ1 ε + λ2 ε² (chain rule to second order).
        let (l1, l2) = (lam.0[1], lam.0[2]);
        let compose = |f: [f64; 3]| Jet([f[0], f[1] * l1, f[1] * l2 + f[2] * l1 * l1]);
        (compose(c), compose(sk))
    }
    fn solve(a: &[Vec<Self>], b: &[Self]) -> Option<Vec<Self>> {
        let n = b.len();
        let coef = |k: usize| -> Vec<Vec<f64>> {
            a.iter().map(|r| r.iter().map(|v| v.0[k]).collect()).collect()
        };
        let (a0, a1, a2) = (coef(0), coef(1), coef(2));
        let lu = lu_of(&a0);
        let mul = |m: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> {
            m.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
        };
        let sol = |rhs: Vec<f64>| -> Option<Vec<f64>> {
            lu.solve(&nalgebra::DVector::from_vec(rhs))
                .map(|v| v.iter().copied().collect())
        };
        let x0 = sol(b.iter().map(|v| v.0[0]).collect())?;
        let t1 = mul(&a1, &x0);
        let x1 = sol((0..n).map(|i| b[i].0[1] - t1[i]).collect())?;
        let t2 = mul(&a1, &x1);
        let t3 = mul(&a2, &x0);
        let x2 = sol((0..n).map(|i| b[i].0[2] - t2[i] - t3[i]).collect())?;
        Some((0..n).map(|i| Jet([x0[i], x1[i], x2[i]])).collect())
    }
}

/// Sixteen-point Gauss–Legendre rule on `[-1, 1]`.
pub const GL16_X: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
pub const GL16_W: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_78,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_09,
];

/// Integrates `f` over `[a, b]` with the sixteen-point Gauss–Legendre rule.
pub fn gauss16<S: Scalar>(a: f64, b: f64, mut f: impl FnMut(f64) -> S) -> S {
    let h = 0.5 * (b - a);
    let m = 0.5 * (b + a);
    let mut acc = S::cst(0.0);
    for i in 0..8 {
        let dx = h * GL16_X[i];
        acc += (f(m - dx) + f(m + dx)).scale(GL16_W[i] * h);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_arithmetic_matches_calculus() {
        let x = Jet::var(0.7);
        let y = (x * x + Jet::cst(1.0)) / x;
        // y = x + 1/x; y' = 1 − 1/x²; y'' = 2/x³.
        assert!((y.d1() - (1.0 - 1.0 / 0.49)).abs() < 1e-14);
        assert!((y.d2() - 2.0 / 0.343).abs() < 1e-12);
        let l = x.ln();
        assert!((l.d1() - 1.0 / 0.7).abs() < 1e-14);
        assert!((l.d2() + 1.0 / 0.49).abs() < 1e-13);
    }

    #[test]
    fn jet_trig_matches_closed_form() {
        for &(lam, s) in &[(0.1, 1.0), (0.3, 2.0), (0.0, 1.5), (2.0, 2.0)] {
            let (c, sk) = Jet::trig(Jet::var(lam), s);
            let (c0, s0) = trig_f64(lam, s);
            assert!((c.val() - c0).abs() < 1e-14, "{lam} {s}");
            assert!((sk.val() - s0).abs() < 1e-14);
            let h = 1e-5;
            let (cp, sp) = trig_f64(lam + h, s);
            let (cm, sm) = trig_f64(lam - h, s);
            assert!((c.d1() - (cp - cm) / (2.0 * h)).abs() < 1e-8);
            assert!((sk.d1() - (sp - sm) / (2.0 * h)).abs() < 1e-8);
            assert!((c.d2() - (cp - 2.0 * c0 + cm) / (h * h)).abs() < 1e-4);
        }
    }

    #[test]
    fn gauss_rule_integrates_polynomials() {
        let v: f64 = gauss16(0.0, 2.0, |x| x.powi(31));
        assert!((v - 2f64.powi(32) / 32.0).abs() / v < 1e-13);
        let w: f64 = gauss16(0.0, std::f64::consts::PI, f64::sin);
        assert!((w - 2.0).abs() < 1e-14);
    }
}

//! Fixed 256-bit binary floating point, just enough for determinant-sign
//! root bracketing.
//!
//! Deep-saturation perturbations sit ~24 decimal orders below the lattice
//! couplings, and the gauged operator's condition number exceeds 1e30 at the
//! design ratio, so the resonance positions cannot be resolved in f64 at all.
//! LAPACK's near-zero eigenvalues of these matrices carry O(1e-3) absolute
//! error — larger than the signal. A 256-bit mantissa (roughly 77 decimal
//! digits) restores ~40 digits of headroom, and the only primitive the
//! measurement pipeline needs at that precision is the *sign* of
//! det(H - E I) on real E, which reduces to +,-,*,/ and comparisons.

use num_bigint::BigUint;
use num_traits::Zero;
use std::cmp::Ordering;

const PREC: u64 = 256;

/// Sign/magnitude/exponent big float: value = sign * mantissa * 2^exp,
/// mantissa normalized to exactly PREC bits (except zero).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BigFloat {
    sign: i8, // -1, 0, +1
    mant: BigUint,
    exp: i64,
}

impl BigFloat {
    pub fn zero() -> Self {
        BigFloat {
            sign: 0,
            mant: BigUint::zero(),
            exp: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn sign(&self) -> i8 {
        self.sign
    }

    fn normalize(mut sign: i8, mut mant: BigUint, mut exp: i64) -> Self {
        if mant.is_zero() {
            return Self::zero();
        }
        let bits = mant.bits();
        if bits > PREC {
            let drop = bits - PREC;
            mant >>= drop;
            exp += drop as i64;
        } else if bits < PREC {
            let up = PREC - bits;
            mant <<= up;
            exp -= up as i64;
        }
        if mant.is_zero() {
            sign = 0;
            exp = 0;
        }
        BigFloat { sign, mant, exp }
    }

    pub fn from_f64(x: f64) -> Self {
        if x == 0.0 {
            return Self::zero();
        }
        assert!(x.is_finite(), "BigFloat::from_f64 on non-finite input");
        let sign = if x < 0.0 { -1 } else { 1 };
        let (m, e) = frexp(x.abs());
        // m in [0.5, 1): scale the 53 significant bits out
        let mant_u = (m * (1u64 << 53) as f64) as u64;
        Self::normalize(sign, BigUint::from(mant_u), e - 53)
    }

    /// Round to nearest f64 (sufficient accuracy for reporting).
    pub fn to_f64(&self) -> f64 {
        if self.sign == 0 {
            return 0.0;
        }
        // take top 64 bits of the mantissa
        let bits = self.mant.bits();
        let shift = bits.saturating_sub(64);
        let top: BigUint = &self.mant >> shift;
        let top = top.to_u64_digits().first().copied().unwrap_or(0);
        let val = top as f64 * 2f64.powi((self.exp + shift as i64) as i32);
        if self.sign < 0 {
            -val
        } else {
            val
        }
    }

    pub fn neg(&self) -> Self {
        let mut r = self.clone();
        r.sign = -r.sign;
        r
    }

    pub fn abs(&self) -> Self {
        let mut r = self.clone();
        if r.sign != 0 {
            r.sign = 1;
        }
        r
    }

    fn cmp_mag(&self, other: &Self) -> Ordering {
        // both nonzero, normalized to PREC bits: compare exponent then mantissa
        match self.exp.cmp(&other.exp) {
            Ordering::Equal => self.mant.cmp(&other.mant),
            o => o,
        }
    }

    pub fn cmp_val(&self, other: &Self) -> Ordering {
        match (self.sign, other.sign) {
            (0, 0) => Ordering::Equal,
            (a, b) if a != b => a.cmp(&b),
            (1, _) => self.cmp_mag(other),
            _ => other.cmp_mag(self),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        if self.sign == 0 {
            return other.clone();
        }
        if other.sign == 0 {
            return self.clone();
        }
        // align to the larger exponent's frame; beyond PREC+2 bits apart the
        // smaller operand is invisible
        let (hi, lo) = if self.cmp_mag(other) == Ordering::Less {
            (other, self)
        } else {
            (self, other)
        };
        let shift = hi.exp - lo.exp;
        if shift > (PREC as i64) + 2 {
            return hi.clone();
        }
        let lo_m: BigUint = &lo.mant >> (shift as u64);
        if hi.sign == lo.sign {
            Self::normalize(hi.sign, &hi.mant + lo_m, hi.exp)
        } else {
            Self::normalize(hi.sign, &hi.mant - lo_m, hi.exp)
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Self) -> Self {
        if self.sign == 0 || other.sign == 0 {
            return Self::zero();
        }
        Self::normalize(
            self.sign * other.sign,
            &self.mant * &other.mant,
            self.exp + other.exp,
        )
    }

    pub fn div(&self, other: &Self) -> Self {
        assert!(other.sign != 0, "BigFloat division by zero");
        if self.sign == 0 {
            return Self::zero();
        }
        // widen numerator so the quotient keeps >= PREC significant bits
        let num: BigUint = &self.mant << PREC;
        Self::normalize(
            self.sign * other.sign,
            num / &other.mant,
            self.exp - other.exp - PREC as i64,
        )
    }

    /// Midpoint, used by the bisection driver.
    pub fn midpoint(&self, other: &Self) -> Self {
        let mut s = self.add(other);
        s.exp -= 1;
        s
    }
}

fn frexp(x: f64) -> (f64, i64) {
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    if exp_bits == 0 {
        // subnormal: renormalize through multiplication
        let (m, e) = frexp(x * 2f64.powi(64));
        return (m, e - 64);
    }
    let e = exp_bits - 1022;
    let m = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (m, e)
}

/// LU factors with partial pivoting, multipliers stored in the strict lower
/// triangle. Zero entries are skipped throughout: the lattice operators are
/// sparse and stay close to banded under pivoting.
pub struct Lu {
    lu: Vec<Vec<BigFloat>>,
    perm: Vec<usize>,
}

/// Factorize PA = LU. Returns `None` on an exactly-zero pivot (singular to
/// 256-bit precision).
pub fn lu_factor(a: &[Vec<BigFloat>]) -> Option<Lu> {
    let n = a.len();
    let mut u: Vec<Vec<BigFloat>> = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        for i in (k + 1)..n {
            if u[i][k].abs().cmp_val(&u[p][k].abs()) == Ordering::Greater {
                p = i;
            }
        }
        if u[p][k].is_zero() {
            return None;
        }
        if p != k {
            u.swap(p, k);
            perm.swap(p, k);
        }
        for i in (k + 1)..n {
            if u[i][k].is_zero() {
                continue;
            }
            let f = u[i][k].div(&u[k][k]);
            for j in (k + 1)..n {
                if !u[k][j].is_zero() {
                    let t = f.mul(&u[k][j]);
                    u[i][j] = u[i][j].sub(&t);
                }
            }
            u[i][k] = f;
        }
    }
    Some(Lu { lu: u, perm })
}

impl Lu {
    pub fn solve(&self, b: &[BigFloat]) -> Vec<BigFloat> {
        let n = self.lu.len();
        let mut y: Vec<BigFloat> = self.perm.iter().map(|&p| b[p].clone()).collect();
        for i in 0..n {
            for j in 0..i {
                if !self.lu[i][j].is_zero() && !y[j].is_zero() {
                    let t = self.lu[i][j].mul(&y[j]);
                    y[i] = y[i].sub(&t);
                }
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                if !self.lu[i][j].is_zero() && !y[j].is_zero() {
                    let t = self.lu[i][j].mul(&y[j]);
                    y[i] = y[i].sub(&t);
                }
            }
            y[i] = y[i].div(&self.lu[i][i]);
        }
        y
    }
}

fn matvec(m: &[Vec<BigFloat>], x: &[BigFloat]) -> Vec<BigFloat> {
    m.iter()
        .map(|row| {
            let mut acc = BigFloat::zero();
            for (a, b) in row.iter().zip(x) {
                if !a.is_zero() && !b.is_zero() {
                    acc = acc.add(&a.mul(b));
                }
            }
            acc
        })
        .collect()
}

fn dot(a: &[BigFloat], b: &[BigFloat]) -> BigFloat {
    let mut acc = BigFloat::zero();
    for (x, y) in a.iter().zip(b) {
        if !x.is_zero() && !y.is_zero() {
            acc = acc.add(&x.mul(y));
        }
    }
    acc
}

/// Eigenvalue of `rq_operator` nearest zero of the (deflated) `operator`,
/// by unshifted inverse iteration followed by a Rayleigh quotient. The two
/// operators differ by deflation terms that leave the target eigenvector
/// untouched, so the quotient is evaluated against the undeflated one.
/// Returns `None` when `operator` is singular to working precision.
pub fn eigenvalue_near_zero(
    operator: &[Vec<BigFloat>],
    rq_operator: &[Vec<BigFloat>],
    iters: usize,
) -> Option<BigFloat> {
    let n = operator.len();
    let lu = lu_factor(operator)?;
    let mut x = vec![BigFloat::from_f64(1.0); n];
    for _ in 0..iters {
        let y = lu.solve(&x);
        let mut peak = BigFloat::zero();
        for v in &y {
            if v.abs().cmp_val(&peak) == Ordering::Greater {
                peak = v.abs();
            }
        }
        if peak.is_zero() {
            return None;
        }
        x = y.iter().map(|v| v.div(&peak)).collect();
    }
    let hx = matvec(rq_operator, &x);
    let den = dot(&x, &x);
    if den.is_zero() {
        return None;
    }
    Some(dot(&x, &hx).div(&den))
}

/// Sign of det(A) via LU with partial pivoting in 256-bit arithmetic.
/// Returns 0 when an exactly-zero pivot survives (singular to this precision).
pub fn det_sign(a: &[Vec<BigFloat>]) -> i8 {
    let n = a.len();
    let mut u: Vec<Vec<BigFloat>> = a.to_vec();
    let mut sgn: i8 = 1;
    for k in 0..n {
        let mut p = k;
        for i in (k + 1)..n {
            if u[i][k].abs().cmp_val(&u[p][k].abs()) == Ordering::Greater {
                p = i;
            }
        }
        if u[p][k].is_zero() {
            return 0;
        }
        if p != k {
            u.swap(p, k);
            sgn = -sgn;
        }
        if u[k][k].sign() < 0 {
            sgn = -sgn;
        }
        for i in (k + 1)..n {
            if u[i][k].is_zero() {
                continue;
            }
            let f = u[i][k].div(&u[k][k]);
            for j in (k + 1)..n {
                if !u[k][j].is_zero() {
                    let t = f.mul(&u[k][j]);
                    u[i][j] = u[i][j].sub(&t);
                }
            }
            u[i][k] = BigFloat::zero();
        }
    }
    sgn
}

/// One det-sign evaluation of f(x) = det(M - x I).
pub fn shifted_det_sign(m: &[Vec<BigFloat>], x: &BigFloat) -> i8 {
    let _n = m.len();
    let mut a = m.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = row[i].sub(x);
    }
    det_sign(&a)
}

/// Locate sign-change roots of det(M - x I) on [lo, hi] with a uniform
/// bracket grid followed by `iters` bisection steps per bracket. Roots are
/// returned in full precision: they routinely differ from the nearest f64 by
/// less than one double-precision ulp.
pub fn det_roots(
    m: &[Vec<BigFloat>],
    lo: f64,
    hi: f64,
    grid_points: usize,
    iters: usize,
) -> Vec<BigFloat> {
    assert!(grid_points >= 2 && hi > lo);
    let step = (hi - lo) / (grid_points - 1) as f64;
    let xs: Vec<BigFloat> = (0..grid_points)
        .map(|i| BigFloat::from_f64(lo + step * i as f64))
        .collect();
    let signs: Vec<i8> = xs.iter().map(|x| shifted_det_sign(m, x)).collect();
    let mut roots = Vec::new();
    for i in 0..grid_points - 1 {
        if signs[i] == 0 {
            roots.push(xs[i].clone());
            continue;
        }
        if signs[i] * signs[i + 1] >= 0 {
            continue;
        }
        let (mut a, mut b) = (xs[i].clone(), xs[i + 1].clone());
        let sa = signs[i];
        for _ in 0..iters {
            let mid = a.midpoint(&b);
            let sm = shifted_det_sign(m, &mid);
            if sm == 0 {
                a = mid.clone();
                b = mid;
                break;
            }
            if sm == sa {
                a = mid;
            } else {
                b = mid;
            }
        }
        roots.push(a.midpoint(&b));
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bf(x: f64) -> BigFloat {
        BigFloat::from_f64(x)
    }

    #[test]
    fn roundtrip_f64() {
        for &x in &[0.0, 1.0, -1.5, 3.141592653589793, 5e-12, -1e-35, 1e300] {
            let b = bf(x);
            assert!(
                (b.to_f64() - x).abs() <= x.abs() * 1e-15,
                "roundtrip {x} -> {}",
                b.to_f64()
            );
        }
    }

    #[test]
    fn arithmetic_basics() {
        let a = bf(2.5);
        let b = bf(-0.5);
        assert_eq!(a.add(&b).to_f64(), 2.0);
        assert_eq!(a.sub(&b).to_f64(), 3.0);
        assert_eq!(a.mul(&b).to_f64(), -1.25);
        assert_eq!(a.div(&b).to_f64(), -5.0);
        assert_eq!(a.midpoint(&b).to_f64(), 1.0);
    }

    #[test]
    fn tiny_plus_huge_keeps_both() {
        // f64 would drop the 1e-30 term; 256 bits must keep it
        let s = bf(1.0).add(&bf(1e-30));
        let d = s.sub(&bf(1.0));
        assert!((d.to_f64() - 1e-30).abs() < 1e-45);
    }

    #[test]
    fn comparison_total_order() {
        let vals = [-2.0, -1e-40, 0.0, 1e-40, 1.0, 1e20];
        for (i, &x) in vals.iter().enumerate() {
            for (j, &y) in vals.iter().enumerate() {
                assert_eq!(bf(x).cmp_val(&bf(y)), i.cmp(&j).then(Ordering::Equal));
            }
        }
    }

    #[test]
    fn det_sign_2x2() {
        // det [[1,2],[3,4]] = -2
        let m = vec![vec![bf(1.0), bf(2.0)], vec![bf(3.0), bf(4.0)]];
        assert_eq!(det_sign(&m), -1);
        // det [[2,1],[1,2]] = 3
        let m = vec![vec![bf(2.0), bf(1.0)], vec![bf(1.0), bf(2.0)]];
        assert_eq!(det_sign(&m), 1);
        // singular
        let m = vec![vec![bf(1.0), bf(2.0)], vec![bf(2.0), bf(4.0)]];
        assert_eq!(det_sign(&m), 0);
    }

    #[test]
    fn roots_of_symmetric_matrix() {
        // eigenvalues of [[0,1],[1,0]] are +/- 1
        let m = vec![vec![bf(0.0), bf(1.0)], vec![bf(1.0), bf(0.0)]];
        let roots = det_roots(&m, -2.0, 2.0, 9, 60);
        assert_eq!(roots.len(), 2);
        assert!((roots[0].to_f64() + 1.0).abs() < 1e-12);
        assert!((roots[1].to_f64() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolves_sub_f64_splitting() {
        // [[e,1],[1,e]] with e = 1e-20: eigenvalues e +/- 1; the pair around
        // +1 differs from 1 by exactly e, far below f64 resolution of the
        // determinant near the root in naive evaluation order
        let e = 1e-20;
        let m = vec![vec![bf(e), bf(1.0)], vec![bf(1.0), bf(e)]];
        let roots = det_roots(&m, 0.9, 1.1, 5, 120);
        assert_eq!(roots.len(), 1);
        let off = roots[0].sub(&bf(1.0)).to_f64();
        assert!((off - e).abs() < 1e-30, "got {off}");
    }
}

//! Statistical kernels: the bit-flip probability on the unit hypersphere, the
//! regularized incomplete beta function, binomial CDFs, and an underflow-safe
//! log-CDF with the linear small-argument extrapolation used by the loss.
//!
//! For unit embeddings `z_i`, `z_j` at angle `theta`, each bit of the
//! binarized pair flips with probability `theta / pi`, and the Hamming
//! distance between the two codes is approximately `Binomial(n, theta / pi)`.
//! The binomial CDF is evaluated through the regularized incomplete beta
//! function `I(x; a, b)`, computed with the standard continued-fraction
//! expansion (modified Lentz) and the symmetry switch at
//! `x > (a + 1) / (a + b + 2)`; absolute error is below 1e-12 for
//! `a + b <= 512`.
//!
//! [`log_binomial_cdf_safe`] works on the beta argument `x` directly:
//! it returns `log I(x; n - r, r + 1)`, which equals the log binomial CDF
//! `log F(r; n, 1 - x)`. Because `I(x; n - r, r + 1) ~ x^(n-r)` underflows as
//! `x -> 0`, the log is linearly extrapolated below a threshold `p0` with
//! slope `(n - r) / p0`, keeping values and gradients finite everywhere on
//! `[0, 1]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Per-bit flip probability of two unit embeddings: `arccos(z_i . z_j) / pi`.
///
/// Both inputs must be L2-normalized to 1 within `1e-6`.
pub fn bit_flip_probability(zi: &[f64], zj: &[f64]) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(Error::shape(format!(
            "embedding lengths differ: {} vs {}",
            zi.len(),
            zj.len()
        )));
    }
    for (name, z) in [("first", zi), ("second", zj)] {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "{name} input is not unit-norm (|z| = {norm})"
            )));
        }
    }
    let dot: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0).acos() / std::f64::consts::PI)
}

/// Regularized incomplete beta function `I(x; a, b)` for `x` in `[0, 1]`,
/// `a > 0`, `b > 0`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    check_beta_args(x, a, b)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_bt = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x <= (a + 1.0) / (a + b + 2.0) {
        Ok(ln_bt.exp() * betacf(a, b, x) / a)
    } else {
        Ok(1.0 - ln_bt.exp() * betacf(b, a, 1.0 - x) / b)
    }
}

/// `ln I(x; a, b)` computed without underflow for `0 < x < 1`.
pub(crate) fn ln_reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!(x > 0.0 && x < 1.0 && a > 0.0 && b > 0.0);
    let ln_bt = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x <= (a + 1.0) / (a + b + 2.0) {
        ln_bt + betacf(a, b, x).ln() - a.ln()
    } else {
        // Above the switch the complement is bounded away from 1, so its
        // value form is safe and ln(1 - complement) is accurate.
        let complement = (ln_bt + betacf(b, a, 1.0 - x).ln() - b.ln()).exp();
        (-complement.min(1.0 - 1e-16)).ln_1p()
    }
}

/// Binomial CDF `F(r; n, p) = P(X <= r)` for `X ~ Binomial(n, p)`, computed
/// through the incomplete beta identity `F(r; n, p) = I(1 - p; n - r, r + 1)`.
pub fn binomial_cdf(r: u32, n: u32, p: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("binomial_cdf needs n >= 1"));
    }
    if r > n {
        return Err(Error::invalid(format!("binomial_cdf needs r <= n, got r={r}, n={n}")));
    }
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("binomial_cdf needs p in [0, 1], got {p}")));
    }
    if r == n {
        return Ok(1.0);
    }
    reg_inc_beta(1.0 - p, f64::from(n - r), f64::from(r + 1))
}

/// Parameters of the safe log-CDF kernel: code length `n`, Hamming radius
/// `r < n`, and extrapolation threshold `p0` in `(0, 1)`.
///
/// The knee value `ln I(p0; n - r, r + 1)` and the extrapolation slope
/// `(n - r) / p0` are precomputed at construction.
#[derive(Clone, Copy, Debug)]
pub struct LikelihoodParams {
    n: u32,
    r: u32,
    p0: f64,
    ln_knee: f64,
    slope: f64,
}

impl LikelihoodParams {
    pub fn new(n: u32, r: u32, p0: f64) -> Result<Self> {
        if n == 0 || n > 256 {
            return Err(Error::invalid(format!("n={n} out of range 1..=256")));
        }
        if r >= n {
            return Err(Error::invalid(format!("radius r={r} must satisfy r < n={n}")));
        }
        if !p0.is_finite() || p0 <= 0.0 || p0 >= 1.0 {
            return Err(Error::invalid(format!("p0={p0} must lie strictly inside (0, 1)")));
        }
        let a = f64::from(n - r);
        let b = f64::from(r + 1);
        Ok(LikelihoodParams {
            n,
            r,
            p0,
            ln_knee: ln_reg_inc_beta(p0, a, b),
            slope: a / p0,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    /// `log I(p; n - r, r + 1)`, linearly extrapolated below `p0`:
    /// finite, continuous, nondecreasing, and nonpositive on `[0, 1]`.
    pub fn log_cdf_safe(&self, p: f64) -> f64 {
        debug_assert!(p.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&p));
        let p = p.clamp(0.0, 1.0);
        if p < self.p0 {
            self.ln_knee + self.slope * (p - self.p0)
        } else if p >= 1.0 {
            0.0
        } else {
            ln_reg_inc_beta(p, f64::from(self.n - self.r), f64::from(self.r + 1))
        }
    }

    /// Derivative of [`LikelihoodParams::log_cdf_safe`] with respect to `p`:
    /// the beta density over the beta CDF above `p0`, and the constant
    /// `(n - r) / p0` below.
    pub fn dlog_cdf_dp(&self, p: f64) -> f64 {
        debug_assert!(p.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&p));
        let p = p.clamp(0.0, 1.0);
        if p < self.p0 {
            return self.slope;
        }
        let a = f64::from(self.n - self.r);
        let b = f64::from(self.r + 1);
        if p >= 1.0 {
            // density(1)/I(1): zero unless b == 1, where I(p) = p^a.
            return if b > 1.0 { 0.0 } else { a };
        }
        let mut ln_density = -ln_beta(a, b);
        if a != 1.0 {
            ln_density += (a - 1.0) * p.ln();
        }
        if b != 1.0 {
            ln_density += (b - 1.0) * (-p).ln_1p();
        }
        (ln_density - ln_reg_inc_beta(p, a, b)).exp()
    }
}

/// Free-function form of [`LikelihoodParams::log_cdf_safe`].
pub fn log_binomial_cdf_safe(r: u32, n: u32, p: f64, p0: f64) -> Result<f64> {
    check_unit_interval(p, "p")?;
    Ok(LikelihoodParams::new(n, r, p0)?.log_cdf_safe(p))
}

/// Free-function form of [`LikelihoodParams::dlog_cdf_dp`].
pub fn dlog_binomial_cdf_dp(r: u32, n: u32, p: f64, p0: f64) -> Result<f64> {
    check_unit_interval(p, "p")?;
    Ok(LikelihoodParams::new(n, r, p0)?.dlog_cdf_dp(p))
}

/// Binomial probability mass `P(X = k)` for `X ~ Binomial(n, p)`.
pub fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    debug_assert!(k <= n && (0.0..=1.0).contains(&p));
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    // ln C(n, k) through the beta function: C(n, k) = 1 / ((n+1) B(k+1, n-k+1)).
    let ln_choose = -f64::from(n + 1).ln() - ln_beta(f64::from(k + 1), f64::from(n - k + 1));
    let mut ln_p = ln_choose;
    if k > 0 {
        ln_p += f64::from(k) * p.ln();
    }
    if k < n {
        ln_p += f64::from(n - k) * (-p).ln_1p();
    }
    ln_p.exp()
}

/// Draws a uniform unit vector `z_i` and a second unit vector `z_j` at exact
/// angle `theta` from it: `z_j = cos(theta) z_i + sin(theta) u` with `u`
/// uniform on the unit sphere of the orthogonal complement of `z_i`.
pub fn sample_angled_pair<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    theta: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "need n >= 2 for an orthogonal complement");
    let zi = random_unit_vector(rng, n);
    // Gram-Schmidt a random direction against z_i, retrying the (measure-zero)
    // degenerate draws.
    let u = loop {
        let mut u = random_unit_vector(rng, n);
        let dot: f64 = u.iter().zip(&zi).map(|(a, b)| a * b).sum();
        for (uk, zk) in u.iter_mut().zip(&zi) {
            *uk -= dot * zk;
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for uk in u.iter_mut() {
                *uk /= norm;
            }
            break u;
        }
    };
    let (c, s) = (theta.cos(), theta.sin());
    let zj = zi.iter().zip(&u).map(|(z, u)| c * z + s * u).collect();
    (zi, zj)
}

fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            return v;
        }
    }
}

/// Outcome of a conditioned-angle Hamming simulation.
#[derive(Clone, Debug)]
pub struct AngleSimulation {
    pub n: usize,
    pub theta: f64,
    pub trials: u64,
    /// `histogram[d]` counts trials with Hamming distance `d`.
    pub histogram: Vec<u64>,
    /// `bit_flips[k]` counts trials where component `k` changed sign.
    pub bit_flips: Vec<u64>,
}

impl AngleSimulation {
    /// The per-bit flip probability `theta / pi` implied by the angle.
    pub fn flip_probability(&self) -> f64 {
        self.theta / std::f64::consts::PI
    }

    /// Total variation distance between the empirical Hamming distribution
    /// and `Binomial(n, theta / pi)`.
    pub fn tv_distance(&self) -> f64 {
        let p = self.flip_probability();
        let t = self.trials as f64;
        0.5 * self
            .histogram
            .iter()
            .enumerate()
            .map(|(k, &c)| (c as f64 / t - binomial_pmf(self.n as u32, k as u32, p)).abs())
            .sum::<f64>()
    }

    /// Empirical flip rate of bit position `k`.
    pub fn marginal_flip_rate(&self, k: usize) -> f64 {
        self.bit_flips[k] as f64 / self.trials as f64
    }

    /// Text table: distance, empirical frequency, and the binomial reference.
    pub fn table(&self) -> String {
        let p = self.flip_probability();
        let t = self.trials as f64;
        let mut out = String::from("# distance  frequency  binomial\n");
        for (k, &c) in self.histogram.iter().enumerate() {
            out.push_str(&format!(
                "{k} {:.9} {:.9}\n",
                c as f64 / t,
                binomial_pmf(self.n as u32, k as u32, p)
            ));
        }
        out
    }
}

/// Samples `trials` pairs of unit vectors at angle `theta`, binarizes both,
/// and histograms the Hamming distances. Deterministic for a given seed.
pub fn simulate_hamming_distribution(
    n: usize,
    theta: f64,
    trials: u64,
    seed: u64,
) -> Result<AngleSimulation> {
    if !(2..=256).contains(&n) {
        return Err(Error::invalid(format!("n={n} out of range 2..=256")));
    }
    if !theta.is_finite() || theta <= 0.0 || theta >= std::f64::consts::PI {
        return Err(Error::invalid(format!(
            "theta={theta} must lie strictly inside (0, pi)"
        )));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut histogram = vec![0u64; n + 1];
    let mut bit_flips = vec![0u64; n];
    for _ in 0..trials {
        let (zi, zj) = sample_angled_pair(&mut rng, n, theta);
        let mut d = 0usize;
        for k in 0..n {
            // Sign comparison is binarization: bit k is 1 iff the component
            // is >= 0.
            if (zi[k] >= 0.0) != (zj[k] >= 0.0) {
                d += 1;
                bit_flips[k] += 1;
            }
        }
        histogram[d] += 1;
    }
    Ok(AngleSimulation { n, theta, trials, histogram, bit_flips })
}

/// `ln B(a, b)` without large-argument cancellation.
///
/// Small parameters are lifted to >= 10 with `B(a, b) = B(a+1, b) (a+b) / a`
/// inverted, then a Stirling-based expansion evaluates the core in terms of
/// moderate-magnitude pieces.
pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };
    let mut acc = 0.0;
    while a < 10.0 {
        acc += ((a + b) / a).ln();
        a += 1.0;
    }
    while b < 10.0 {
        acc += ((a + b) / b).ln();
        b += 1.0;
    }
    let total = a + b;
    let frac = a / total;
    acc + 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * total.ln()
        + (a - 0.5) * frac.ln()
        + (b - 0.5) * (-frac).ln_1p()
        + stirlerr(a)
        + stirlerr(b)
        - stirlerr(total)
}

/// Stirling series remainder `ln Gamma(x) - [(x-1/2) ln x - x + ln(2 pi)/2]`
/// for `x >= 10`.
fn stirlerr(x: f64) -> f64 {
    debug_assert!(x >= 10.0);
    let x2 = x * x;
    (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - (1.0 / 1680.0 - 1.0 / (1188.0 * x2)) / x2) / x2) / x2)
        / x
}

/// Continued-fraction factor of the incomplete beta function (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn check_beta_args(x: f64, a: f64, b: f64) -> Result<()> {
    if !x.is_finite() || !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("beta argument x={x} must lie in [0, 1]")));
    }
    if !a.is_finite() || a <= 0.0 || !b.is_finite() || b <= 0.0 {
        return Err(Error::invalid(format!(
            "beta parameters must be positive and finite, got a={a}, b={b}"
        )));
    }
    Ok(())
}

fn check_unit_interval(p: f64, name: &str) -> Result<()> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name}={p} must lie in [0, 1]")));
    }
    Ok(())
}

//! Order statistics of the speed field, the periodic block decomposition,
//! the distribution functions of pi and chi, and limit-law diagnostics.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::environment::{
    pi_field, sample_environment, BoxSpec, ConductanceLaw, Cube, Site, SpeedField,
};
use crate::error::{Error, Result};

/// The `count` smallest values of pi on B_n with their sites; ties lexicographic.
pub fn order_statistics(field: &SpeedField, n: usize, count: usize) -> Result<Vec<(f64, Site)>> {
    let inner = Cube::new(field.cube().dim(), n as i64);
    if count > inner.len() {
        return Err(Error::Domain(format!(
            "{count} order statistics requested from {} sites",
            inner.len()
        )));
    }
    let mut all: Vec<(f64, usize)> = Vec::with_capacity(inner.len());
    let mut x = vec![0i64; inner.dim()];
    for k in 0..inner.len() {
        inner.coords_into(k, &mut x);
        all.push((field.get(&x)?, k));
    }
    // lexicographic order on sites is the linear order on k
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if count < all.len() {
        all.select_nth_unstable_by(count, cmp);
        all.truncate(count);
    }
    all.sort_unstable_by(cmp);
    Ok(all.into_iter().map(|(v, k)| (v, inner.coords(k))).collect())
}

/// 1 - pi_(k) / pi_(k+1) over B_n (1-based order statistics).
pub fn quotient_statistic(field: &SpeedField, n: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let os = order_statistics(field, n, k + 1)?;
    Ok(1.0 - os[k - 1].0 / os[k].0)
}

/// Periodic block decomposition with blocks N = {1..2k+2}^d and period 2k+3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decomposition {
    pub k: usize,
    pub d: usize,
}

impl Decomposition {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Domain(format!(
                "decomposition needs k >= 1 and d >= 1, got k={k}, d={d}"
            )));
        }
        Ok(Decomposition { k, d })
    }

    pub fn period(&self) -> i64 {
        2 * self.k as i64 + 3
    }

    pub fn block_side(&self) -> i64 {
        2 * self.k as i64 + 2
    }

    /// Membership of `a` in V shifted by x, i.e. a - x in V.
    pub fn in_shifted(&self, a: &[i64], x: &[i64]) -> bool {
        let p = self.period();
        a.iter().zip(x).all(|(ai, xi)| (ai - xi).rem_euclid(p) != 0)
    }

    /// Block sites y + N for a block anchor y.
    pub fn block(&self, y: &[i64]) -> impl Iterator<Item = Site> + '_ {
        let side = self.block_side();
        let y = y.to_vec();
        let count = (side as usize).pow(self.d as u32);
        (0..count).map(move |mut c| {
            let mut s = y.clone();
            for a in (0..y.len()).rev() {
                s[a] += 1 + (c % side as usize) as i64;
                c /= side as usize;
            }
            s
        })
    }
}

/// Shift x in B_{k+1} with every site of `set` inside V shifted by x.
pub fn find_shift(set: &[Site], k: usize, d: usize) -> Result<Site> {
    let dec = Decomposition::new(k, d)?;
    if set.len() > 2 * (k + 1) {
        return Err(Error::Domain(format!(
            "a set of {} sites exceeds the limit 2(k+1) = {}",
            set.len(),
            2 * (k + 1)
        )));
    }
    let p = dec.period();
    let mut x = vec![0i64; d];
    for (a, xa) in x.iter_mut().enumerate() {
        let forbidden: Vec<i64> = set.iter().map(|s| s[a].rem_euclid(p)).collect();
        let r = (0..p).find(|r| !forbidden.contains(r)).unwrap();
        *xa = if r <= k as i64 + 1 { r } else { r - p };
    }
    if !set.iter().all(|s| dec.in_shifted(s, &x)) {
        return Err(Error::Numerical(format!(
            "shift {x:?} fails to cover the set"
        )));
    }
    Ok(x)
}

/// (y, chi_y) for every anchor y in (2k+3)Z^d + shift whose block lies in B_{n+2k+1}.
pub fn chi_field(
    field: &SpeedField,
    k: usize,
    shift: &[i64],
    n: usize,
) -> Result<Vec<(Site, f64)>> {
    let d = field.cube().dim();
    let dec = Decomposition::new(k, d)?;
    let reach = n as i64 + 2 * k as i64 + 1;
    if field.cube().radius() < reach {
        return Err(Error::Domain(format!(
            "pi covers B_{} but the blocks need B_{reach}",
            field.cube().radius()
        )));
    }
    let p = dec.period();
    let lo = -(n as i64 + 2 * k as i64 + 2);
    let hi = n as i64 - 1;
    // anchors per axis, ascending
    let axis: Vec<Vec<i64>> = shift
        .iter()
        .map(|&s| {
            let first = lo + (s - lo).rem_euclid(p);
            (0..)
                .map(|j| first + j * p)
                .take_while(|&y| y <= hi)
                .collect()
        })
        .collect();
    let count: usize = axis.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(count);
    for mut c in 0..count {
        let mut y = vec![0i64; d];
        for a in (0..d).rev() {
            y[a] = axis[a][c % axis[a].len()];
            c /= axis[a].len();
        }
        let mut m = f64::INFINITY;
        for s in dec.block(&y) {
            m = m.min(field.get(&s)?);
        }
        out.push((y, m));
    }
    Ok(out)
}

/// chi samples from one environment large enough to hold blocks in B_{n+2k+1}.
pub fn sample_chi(
    law: &ConductanceLaw,
    d: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let env = sample_environment(BoxSpec::new(d, n, 2 * k + 3), law.clone(), seed)?;
    let field = pi_field(&env)?;
    let shift = vec![0i64; d];
    Ok(chi_field(&field, k, &shift, n)?
        .into_iter()
        .map(|(_, v)| v)
        .collect())
}

const LEVEL_POINTS: usize = 1 << 14;

/// CDF of pi on [0, r] by iterated convolution against exact increments of F.
#[derive(Clone, Debug)]
struct Level {
    r: f64,
    cdf: Vec<f64>,
}

impl Level {
    fn build(law: &ConductanceLaw, d: usize, r: f64) -> Self {
        let m = LEVEL_POINTS;
        let h = r / (m - 1) as f64;
        let f: Vec<f64> = (0..m).map(|j| law.cdf(j as f64 * h)).collect();
        let df: Vec<f64> = (0..m - 1).map(|i| f[i + 1] - f[i]).collect();
        let mut cur = f.clone();
        for _ in 1..2 * d {
            let mut next = vec![0.0; m];
            for (j, slot) in next.iter_mut().enumerate().skip(1) {
                let mut s = 0.0;
                for i in 0..j {
                    s += 0.5 * (cur[j - i] + cur[j - i - 1]) * df[i];
                }
                *slot = s;
            }
            cur = next;
        }
        Level { r, cdf: cur }
    }

    fn eval(&self, a: f64) -> f64 {
        let t = a / self.r * (LEVEL_POINTS - 1) as f64;
        let j = (t.floor() as usize).min(LEVEL_POINTS - 2);
        let frac = t - j as f64;
        self.cdf[j] * (1.0 - frac) + self.cdf[j + 1] * frac
    }
}

/// Ladder of convolution tables on [0, R0 / 4^j].
#[derive(Debug)]
struct ConvolutionTable {
    law: ConductanceLaw,
    d: usize,
    r0: f64,
    levels: Vec<OnceLock<Level>>,
}

const MAX_LEVELS: usize = 24;

impl ConvolutionTable {
    fn new(law: ConductanceLaw, d: usize) -> Self {
        let r0 = 2.0 * d as f64 * law.max_weight();
        ConvolutionTable {
            law,
            d,
            r0,
            levels: (0..MAX_LEVELS).map(|_| OnceLock::new()).collect(),
        }
    }

    fn eval(&self, a: f64) -> Result<f64> {
        if a > self.r0 {
            return Err(Error::Domain(format!(
                "a = {a} beyond the table range [0, {}]",
                self.r0
            )));
        }
        let mut j = 0;
        while j + 1 < MAX_LEVELS && a <= self.r0 / 4f64.powi(j as i32 + 1) {
            j += 1;
        }
        let r = self.r0 / 4f64.powi(j as i32);
        Ok(self.levels[j]
            .get_or_init(|| Level::build(&self.law, self.d, r))
            .eval(a))
    }
}

type CdfFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum PiCdf {
    Convolution(Arc<ConvolutionTable>),
    Custom { f: CdfFn, upper: f64 },
}

/// Distribution function of pi for a given law and dimension.
#[derive(Clone)]
pub struct TailModel {
    law: ConductanceLaw,
    d: usize,
    c_gamma: Option<f64>,
    cdf: PiCdf,
}

impl std::fmt::Debug for TailModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TailModel")
            .field("law", &self.law)
            .field("d", &self.d)
            .field("c_gamma", &self.c_gamma)
            .finish()
    }
}

/// Gamma(1+gamma)^{2d} / Gamma(1+2d gamma).
pub fn c_gamma(gamma: f64, d: usize) -> f64 {
    let m = 2.0 * d as f64;
    (m * ln_gamma(1.0 + gamma) - ln_gamma(1.0 + m * gamma)).exp()
}

impl TailModel {
    pub fn new(law: ConductanceLaw, d: usize) -> Result<Self> {
        law.validate()?;
        let c = match law {
            ConductanceLaw::Polynomial { gamma } => Some(c_gamma(gamma, d)),
            _ => None,
        };
        Ok(TailModel {
            cdf: PiCdf::Convolution(Arc::new(ConvolutionTable::new(law.clone(), d))),
            law,
            d,
            c_gamma: c,
        })
    }

    /// Model with a user-supplied CDF on [0, upper].
    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(
        law: ConductanceLaw,
        d: usize,
        f: F,
        upper: f64,
    ) -> Self {
        TailModel {
            law,
            d,
            c_gamma: None,
            cdf: PiCdf::Custom {
                f: Arc::new(f),
                upper,
            },
        }
    }

    pub fn law(&self) -> &ConductanceLaw {
        &self.law
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn c_gamma(&self) -> Option<f64> {
        self.c_gamma
    }

    fn upper(&self) -> f64 {
        match &self.cdf {
            PiCdf::Convolution(t) => t.r0,
            PiCdf::Custom { upper, .. } => *upper,
        }
    }

    /// F_pi(a): closed form for polynomial laws on a <= 1, table otherwise.
    pub fn f_pi(&self, a: f64) -> Result<f64> {
        if !(a >= 0.0) {
            return Err(Error::Domain(format!("F_pi needs a >= 0, got {a}")));
        }
        if a == 0.0 {
            return Ok(0.0);
        }
        if let (Some(c), ConductanceLaw::Polynomial { gamma }, PiCdf::Convolution(_)) =
            (self.c_gamma, &self.law, &self.cdf)
        {
            if a <= 1.0 {
                return Ok(c * a.powf(2.0 * self.d as f64 * gamma));
            }
        }
        self.f_pi_table(a)
    }

    /// The numeric CDF, bypassing any closed form.
    pub fn f_pi_table(&self, a: f64) -> Result<f64> {
        match &self.cdf {
            PiCdf::Convolution(t) => t.eval(a),
            PiCdf::Custom { f, upper } => {
                if a > *upper {
                    return Err(Error::Domain(format!(
                        "a = {a} beyond the table range [0, {upper}]"
                    )));
                }
                Ok(f(a))
            }
        }
    }

    /// (N F_pi(a) - binom(N, 2) F(a)^{4d-1}, N F_pi(a)) with N = (2k+2)^d.
    pub fn f_chi_bounds(&self, k: usize, a: f64) -> Result<(f64, f64)> {
        let nb = ((2 * k + 2) as f64).powi(self.d as i32);
        let up = nb * self.f_pi(a)?;
        let lo = up - 0.5 * nb * (nb - 1.0) * self.law.cdf(a).powi(4 * self.d as i32 - 1);
        Ok((lo, up))
    }

    /// h(N): the s with F_pi(1/s) = 1/N.
    pub fn scale_h(&self, n_sites: f64) -> Result<f64> {
        if !(n_sites >= 2.0) || !n_sites.is_finite() {
            return Err(Error::Domain(format!("h needs N >= 2, got {n_sites}")));
        }
        let target = 1.0 / n_sites;
        if let (Some(c), ConductanceLaw::Polynomial { gamma }, PiCdf::Convolution(_)) =
            (self.c_gamma, &self.law, &self.cdf)
        {
            let s = (c * n_sites).powf(1.0 / (2.0 * self.d as f64 * gamma));
            if s >= 1.0 {
                return Ok(s);
            }
        }
        self.scale_h_bisect(n_sites).and_then(|s| {
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::Domain(format!("F_pi never reaches {target}")))
            }
        })
    }

    /// h(N) by bisection on the CDF, ignoring any closed form.
    pub fn scale_h_bisect(&self, n_sites: f64) -> Result<f64> {
        let target = 1.0 / n_sites;
        let mut hi = self.upper();
        if self.f_pi(hi)? < target {
            return Err(Error::Domain(format!(
                "F_pi stays below {target} on its range"
            )));
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.f_pi(mid)? >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(1.0 / hi)
    }

    /// CSV `a,F_pi` on a uniform grid over [0, upper].
    pub fn write_csv<W: Write>(&self, points: usize, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["a", "F_pi"])?;
        let up = self.upper();
        for j in 0..points {
            let a = up * j as f64 / (points - 1).max(1) as f64;
            wr.write_record([a.to_string(), self.f_pi(a)?.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// a_n = 1 / h(|B_n|) with |B_n| = (2n+1)^d.
pub fn a_n(model: &TailModel, n: usize) -> Result<f64> {
    Ok(1.0 / model.scale_h(((2 * n + 1) as f64).powi(model.dim() as i32))?)
}

/// 1 - exp(-zeta^{2d gamma}).
pub fn limit_cdf(zeta: f64, d: usize, gamma: f64) -> Result<f64> {
    if !(zeta >= 0.0) {
        return Err(Error::Domain(format!(
            "zeta must be nonnegative, got {zeta}"
        )));
    }
    Ok(-(-zeta.powf(2.0 * d as f64 * gamma)).exp_m1())
}

/// Kolmogorov-Smirnov sup distance between the sample ECDF and `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "KS distance needs at least one sample".into(),
        ));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let mut dmax: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        dmax = dmax.max(f - i as f64 / m).max((i + 1) as f64 / m - f);
    }
    Ok(dmax)
}

/// Asymptotic KS p-value with Stephens' small-sample correction.
pub fn ks_p_value(dist: f64, m: usize) -> f64 {
    let sq = (m as f64).sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * dist;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut q = 0.0;
    for j in 1..=100 {
        let t = 2.0 * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        q += if j % 2 == 1 { t } else { -t };
        if t < 1e-16 {
            break;
        }
    }
    q.clamp(0.0, 1.0)
}

/// i (sigma_(i) - sigma_(i+1)) per replicate, order statistics descending.
pub fn spacing_diagnostics(replicates: &[Vec<f64>], i: usize) -> Result<Vec<f64>> {
    if i == 0 {
        return Err(Error::Domain("spacing index starts at 1".into()));
    }
    replicates
        .iter()
        .map(|r| {
            if r.len() < i + 1 {
                return Err(Error::Domain(format!(
                    "replicate with {} values, need {}",
                    r.len(),
                    i + 1
                )));
            }
            let mut s = r.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            Ok(i as f64 * (s[i - 1] - s[i]))
        })
        .collect()
}

/// Empirical CDF of a sample.
#[derive(Clone, Debug)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("empirical CDF of an empty sample".into()));
        }
        samples.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { sorted: samples })
    }

    pub fn eval(&self, a: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= a) as f64 / self.sorted.len() as f64
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// (value, ECDF) pairs.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        let m = self.sorted.len() as f64;
        self.sorted
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, (i + 1) as f64 / m))
            .collect()
    }
}

/// Samples as CSV, one value per line.
pub fn write_samples<W: Write>(samples: &[f64], mut w: W) -> Result<()> {
    for v in samples {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

/// Outcome of the pointwise eigenvector bound around the minimal site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseCheck {
    pub checked: usize,
    pub violations: usize,
    /// Largest psi(y) - bound(y) seen.
    pub worst_excess: f64,
}

/// For z = argmin pi and each y in B_n with pi_y > pi_z, y not adjacent to z:
/// psi(y) <= m_y / (1 - pi_z / pi_y) + tol, with m_y = 2 max over neighbors of psi.
/// `psi` is indexed by B_n and vanishes outside.
pub fn pointwise_bound_check(
    field: &SpeedField,
    n: usize,
    psi: &[f64],
    tol: f64,
) -> Result<PointwiseCheck> {
    let d = field.cube().dim();
    let inner = Cube::new(d, n as i64);
    if psi.len() != inner.len() {
        return Err(Error::Domain("eigenvector does not match B_n".into()));
    }
    let z = field.argmin_site().clone();
    let pz = field.get(&z)?;
    let at = |x: &[i64]| inner.index(x).map_or(0.0, |i| psi[i]);
    let mut out = PointwiseCheck {
        checked: 0,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
    };
    let mut y = vec![0i64; d];
    for k in 0..inner.len() {
        inner.coords_into(k, &mut y);
        let py = field.get(&y)?;
        let dist: i64 = y.iter().zip(&z).map(|(a, b)| (a - b).abs()).sum();
        if !(py > pz) || dist <= 1 {
            continue;
        }
        let mut m = 0.0f64;
        let mut nb = y.clone();
        for a in 0..d {
            for s in [-1, 1] {
                nb[a] += s;
                m = m.max(at(&nb));
                nb[a] -= s;
            }
        }
        let bound = 2.0 * m / (1.0 - pz / py);
        let excess = psi[k] - bound;
        out.checked += 1;
        out.worst_excess = out.worst_excess.max(excess);
        if excess > tol {
            out.violations += 1;
        }
    }
    Ok(out)
}

//! Threshold families, the trap-count scale Lambda_g, trap detection and
//! bad-edge censuses.

use serde::{Deserialize, Serialize};

use crate::environment::{ConductanceLaw, Cube, Environment, Site};
use crate::error::{Error, Result};

/// Shape of a threshold function g.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThresholdKind {
    /// g(u) = F^{-1}(u^{-1/2}).
    Critical,
    /// g(u) = u^{-1/(2 gamma)} ((2 + epsilon) log log u)^{1/(2 d gamma)}.
    Upper { epsilon: f64 },
    /// g(u) = u^{-1/(2 gamma) - delta}.
    Lower { delta: f64 },
    /// g(u) = u^{-alpha}.
    Power { alpha: f64 },
    /// Points (u, g(u)) interpolated linearly in log-log coordinates.
    Custom { table: Vec<(f64, f64)> },
}

/// A threshold function g together with the tail index and dimension it is tuned to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFamily {
    pub kind: ThresholdKind,
    pub gamma: f64,
    pub d: usize,
}

impl ThresholdFamily {
    pub fn new(kind: ThresholdKind, gamma: f64, d: usize) -> Result<Self> {
        let g = ThresholdFamily { kind, gamma, d };
        g.validate()?;
        Ok(g)
    }

    pub fn critical(gamma: f64, d: usize) -> Self {
        ThresholdFamily {
            kind: ThresholdKind::Critical,
            gamma,
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("threshold family needs d >= 1".into()));
        }
        let needs_gamma = matches!(
            self.kind,
            ThresholdKind::Upper { .. } | ThresholdKind::Lower { .. }
        );
        if needs_gamma && !(self.gamma > 0.0) {
            return Err(Error::Config("upper/lower families need gamma > 0".into()));
        }
        match &self.kind {
            ThresholdKind::Upper { epsilon } if !(*epsilon > 0.0) => {
                Err(Error::Config("upper family needs epsilon > 0".into()))
            }
            ThresholdKind::Lower { delta } if !(*delta > 0.0) => {
                Err(Error::Config("lower family needs delta > 0".into()))
            }
            ThresholdKind::Power { alpha } if !(*alpha > 0.0) => {
                Err(Error::Config("power family needs alpha > 0".into()))
            }
            ThresholdKind::Custom { table } => {
                if table.len() < 2 {
                    return Err(Error::Config("custom threshold needs >= 2 points".into()));
                }
                if table.iter().any(|(u, g)| !(*u > 0.0) || !(*g > 0.0)) {
                    return Err(Error::Config(
                        "custom threshold points must be positive".into(),
                    ));
                }
                if table.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::Config(
                        "custom threshold abscissae must increase".into(),
                    ));
                }
                if table.windows(2).any(|w| w[1].1 > w[0].1) {
                    return Err(Error::Config(
                        "custom threshold must be nonincreasing".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// ln g(u); `None` for the critical family, which is defined through the law.
    fn ln_g_explicit(&self, u: f64) -> Option<f64> {
        let lu = u.ln();
        let (g, d) = (self.gamma, self.d as f64);
        match &self.kind {
            ThresholdKind::Critical => None,
            ThresholdKind::Upper { epsilon } => {
                // log log u is held at 1 below u = e^e so g stays decreasing
                let ll = lu.ln().max(1.0);
                Some(-lu / (2.0 * g) + ((2.0 + epsilon) * ll).ln() / (2.0 * d * g))
            }
            ThresholdKind::Lower { delta } => Some(-(1.0 / (2.0 * g) + delta) * lu),
            ThresholdKind::Power { alpha } => Some(-alpha * lu),
            ThresholdKind::Custom { table } => {
                let j = table.partition_point(|(x, _)| *x <= u);
                let ln_at = |i: usize| table[i].1.ln();
                Some(if j == 0 {
                    ln_at(0)
                } else if j == table.len() {
                    ln_at(table.len() - 1)
                } else {
                    let (u0, u1) = (table[j - 1].0.ln(), table[j].0.ln());
                    let t = (lu - u0) / (u1 - u0);
                    ln_at(j - 1) + t * (ln_at(j) - ln_at(j - 1))
                })
            }
        }
    }

    /// g(u).
    pub fn eval(&self, law: &ConductanceLaw, u: f64) -> f64 {
        match self.ln_g_explicit(u) {
            Some(l) => l.exp(),
            None => law.sample(u.powf(-0.5).min(1.0)),
        }
    }

    /// ln F(g(u)), computed without round-trips through g where an exact
    /// form exists.
    pub fn ln_tail(&self, law: &ConductanceLaw, u: f64) -> f64 {
        let continuous = !matches!(law, ConductanceLaw::Constant { .. });
        match (self.ln_g_explicit(u), law) {
            // F(F^{-1}(p)) = p for continuous laws
            (None, _) if continuous => (-0.5 * u.ln()).min(0.0),
            (Some(lg), ConductanceLaw::Polynomial { gamma }) => gamma * lg.min(0.0),
            _ => law.cdf(self.eval(law, u)).ln(),
        }
    }

    /// F(g(u)).
    pub fn tail(&self, law: &ConductanceLaw, u: f64) -> f64 {
        self.ln_tail(law, u).exp()
    }
}

/// Lambda_g(n) = n^d F(g(n))^{2d}.
pub fn lambda_g(law: &ConductanceLaw, g: &ThresholdFamily, n: u64) -> f64 {
    let d = g.d as f64;
    let lt = g.ln_tail(law, n as f64);
    if lt == f64::NEG_INFINITY {
        return 0.0;
    }
    (d * (n as f64).ln() + 2.0 * d * lt).exp()
}

/// Trap sites and censuses at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapReport {
    pub threshold: f64,
    pub traps: Vec<Site>,
    /// Trap counts on A_{i,k} = {z : z_1 + ... + z_d = i mod k}.
    pub per_residue: Vec<usize>,
    /// Bad-edge census at radius `census_radius`, when the environment is large enough.
    pub bad_edge_max: Option<usize>,
    #[serde(skip)]
    pub census_radius: usize,
}

impl TrapReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// All 2d incident weights of `x` are <= alpha.
pub fn is_trap(env: &Environment, x: &[i64], alpha: f64) -> bool {
    let d = env.dim();
    (0..d).all(|a| {
        let mut y = x.to_vec();
        y[a] -= 1;
        env.weight(&y, a).is_some_and(|w| w <= alpha)
            && env.weight(x, a).is_some_and(|w| w <= alpha)
    })
}

/// Traps in B_n with even/odd residue split and a census at radius 3d.
pub fn find_traps(env: &Environment, n: usize, alpha: f64) -> Result<TrapReport> {
    find_traps_with(env, n, alpha, 2, 3 * env.dim())
}

/// Traps in B_n; residues mod `k`; census at radius `b` if materialized.
pub fn find_traps_with(
    env: &Environment,
    n: usize,
    alpha: f64,
    k: usize,
    b: usize,
) -> Result<TrapReport> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("threshold must be > 0, got {alpha}")));
    }
    if k == 0 {
        return Err(Error::Domain("residue modulus must be >= 1".into()));
    }
    if n + 1 > env.radius() {
        return Err(Error::Domain(format!("radius {n} exceeds the environment")));
    }
    let cube = Cube::new(env.dim(), n as i64);
    let mut traps = Vec::new();
    let mut per_residue = vec![0usize; k];
    for x in cube.sites() {
        if is_trap(env, &x, alpha) {
            let s: i64 = x.iter().sum();
            per_residue[s.rem_euclid(k as i64) as usize] += 1;
            traps.push(x);
        }
    }
    let bad_edge_max = if n + 2 * b < env.radius() {
        Some(bad_edge_census(env, n, b, alpha)?)
    } else {
        None
    };
    Ok(TrapReport {
        threshold: alpha,
        traps,
        per_residue,
        bad_edge_max,
        census_radius: b,
    })
}

/// max over z in B_{n+b} of #{e in E(B_b(z)) : w_e <= alpha}, where E(A)
/// holds the positive-direction edges leaving sites of A.
pub fn bad_edge_census(env: &Environment, n: usize, b: usize, alpha: f64) -> Result<usize> {
    if b < 1 {
        return Err(Error::Domain("census radius must be >= 1".into()));
    }
    let need = n + 2 * b + 1;
    if env.radius() < need {
        return Err(Error::Domain(format!(
            "census needs edges up to radius {need}, environment has {}",
            env.radius()
        )));
    }
    let d = env.dim();
    let outer = Cube::new(d, (n + 2 * b) as i64);
    let ecube = env.cube();
    let mut counts: Vec<u32> = outer
        .sites()
        .map(|x| {
            let i = ecube.index(&x).unwrap();
            (0..d)
                .filter(|&a| env.weight_at(i, a).unwrap() <= alpha)
                .count() as u32
        })
        .collect();
    // separable window sums of half-width b along each axis
    let side = outer.side();
    let mut tmp = vec![0u32; counts.len()];
    for a in 0..d {
        let s = outer.stride(a);
        for (i, t) in tmp.iter_mut().enumerate() {
            let c = (i / s) % side;
            let lo = c.saturating_sub(b);
            let hi = (c + b).min(side - 1);
            let base = i - c * s;
            *t = (lo..=hi).map(|j| counts[base + j * s]).sum();
        }
        std::mem::swap(&mut counts, &mut tmp);
    }
    let inner = Cube::new(d, (n + b) as i64);
    Ok(inner
        .sites()
        .map(|z| counts[outer.index(&z).unwrap()] as usize)
        .max()
        .unwrap_or(0))
}

/// Tail behavior of the truncated Borel-Cantelli integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailClass {
    Convergent,
    Divergent,
    Marginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcIntegral {
    /// Integral over [0, u_max].
    pub value: f64,
    /// Local power-law exponent of the integrand at u_max.
    pub exponent: f64,
    pub tail: TailClass,
}

/// Width of the band around -1 reported as marginal.
pub const MARGINAL_BAND: f64 = 0.05;

/// Truncated integral of u^{d-1} F(g(u))^m over [0, u_max], plus tail class.
pub fn bc_integral(
    law: &ConductanceLaw,
    g: &ThresholdFamily,
    m: u32,
    d: usize,
    u_max: f64,
) -> Result<BcIntegral> {
    if m < 1 {
        return Err(Error::Domain("m must be >= 1".into()));
    }
    if !(u_max >= 10.0) {
        return Err(Error::Domain(format!("u_max must be >= 10, got {u_max}")));
    }
    g.validate()?;
    // monotonicity audit on [2, u_max]
    let steps = 256;
    let mut prev = f64::INFINITY;
    for i in 0..=steps {
        let u = 2.0 * (u_max / 2.0).powf(i as f64 / steps as f64);
        let v = g.eval(law, u);
        if v > prev * (1.0 + 1e-12) {
            return Err(Error::Config(format!("threshold increases near u = {u}")));
        }
        prev = v;
    }
    let ln_f = |u: f64| -> f64 {
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (d as f64 - 1.0) * u.ln() + m as f64 * g.ln_tail(law, u)
    };
    let f = |u: f64| ln_f(u).exp();
    // dyadic panels keep the adaptive rule well conditioned
    let mut value = 0.0;
    let mut lo = 0.0;
    let mut hi = 1.0f64.min(u_max);
    while lo < u_max {
        value += adaptive_simpson(&f, lo, hi, 1e-12, 40);
        lo = hi;
        hi = (hi * 2.0).min(u_max);
    }
    let h = 1e-3;
    let (a, b) = (ln_f(u_max * (1.0 + h)), ln_f(u_max / (1.0 + h)));
    let exponent = if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (a - b) / (2.0 * (1.0 + h).ln())
    };
    Ok(BcIntegral {
        value,
        exponent,
        tail: classify_exponent(exponent),
    })
}

/// An exact 1/u tail diverges logarithmically; the surrounding band is
/// left undecided.
pub fn classify_exponent(p: f64) -> TailClass {
    if (p + 1.0).abs() <= 1e-6 {
        TailClass::Divergent
    } else if (p + 1.0).abs() <= MARGINAL_BAND {
        TailClass::Marginal
    } else if p < -1.0 {
        TailClass::Convergent
    } else {
        TailClass::Divergent
    }
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let c = 0.5 * (a + b);
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let (d, e) = (0.5 * (a + c), 0.5 * (c + b));
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol * (left + right).abs().max(1e-300) {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, c, fa, fc, fd, left, tol, depth - 1)
        + simpson_step(f, c, b, fc, fb, fe, right, tol, depth - 1)
}

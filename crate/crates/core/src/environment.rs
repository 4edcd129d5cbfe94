//! I.i.d. conductance environments on boxes of Z^d.
//!
//! Weights are drawn by hashing `(seed, axis, lower endpoint)` so that a given
//! edge receives the same conductance in every box that contains it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lattice site, compared lexicographically.
pub type Site = Vec<i64>;

/// Default number of inverse-CDF grid points for table laws.
pub const TABLE_POINTS: usize = 1 << 14;

const NO_EDGE: u32 = u32::MAX;

/// The cube B_r = {x : |x|_inf <= r} with a lexicographic linear index
/// (first coordinate most significant).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cube {
    d: usize,
    r: i64,
    side: usize,
    len: usize,
    strides: Vec<usize>,
}

impl Cube {
    pub fn new(d: usize, r: i64) -> Self {
        assert!(d >= 1 && r >= 0);
        let side = (2 * r + 1) as usize;
        let mut strides = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * side;
        }
        Cube {
            d,
            r,
            side,
            len: side.pow(d as u32),
            strides,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> i64 {
        self.r
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.d && x.iter().all(|&c| c.abs() <= self.r)
    }

    pub fn index(&self, x: &[i64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(
            x.iter()
                .zip(&self.strides)
                .map(|(&c, &s)| (c + self.r) as usize * s)
                .sum(),
        )
    }

    pub fn coords_into(&self, mut idx: usize, out: &mut [i64]) {
        for a in 0..self.d {
            let q = idx / self.strides[a];
            idx -= q * self.strides[a];
            out[a] = q as i64 - self.r;
        }
    }

    pub fn coords(&self, idx: usize) -> Site {
        let mut x = vec![0; self.d];
        self.coords_into(idx, &mut x);
        x
    }

    /// Coordinate of `idx` along one axis.
    pub fn coord(&self, idx: usize, axis: usize) -> i64 {
        ((idx / self.strides[axis]) % self.side) as i64 - self.r
    }

    /// Sites in lexicographic order.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len).map(move |i| self.coords(i))
    }
}

/// Box radius `n` plus `pad` extra layers that are materialized around it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub d: usize,
    pub n: usize,
    pub pad: usize,
}

impl BoxSpec {
    pub fn new(d: usize, n: usize, pad: usize) -> Self {
        BoxSpec { d, n, pad }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config(format!(
                "dimension must be >= 2, got {}",
                self.d
            )));
        }
        if self.n < 1 {
            return Err(Error::Config("box radius must be >= 1".into()));
        }
        Ok(())
    }

    /// Radius of the materialized region.
    pub fn radius(&self) -> usize {
        self.n + self.pad
    }

    pub fn site_count(&self) -> usize {
        (2 * self.n + 1).pow(self.d as u32)
    }
}

/// Law of a single conductance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConductanceLaw {
    Constant {
        c: f64,
    },
    /// F(a) = a^gamma on [0, 1].
    Polynomial {
        gamma: f64,
    },
    /// Inverse CDF sampled at u_j = j/(M-1), linearly interpolated.
    Table {
        inverse: Vec<f64>,
        gamma: Option<f64>,
        a_star: f64,
    },
}

impl ConductanceLaw {
    pub fn constant(c: f64) -> Self {
        ConductanceLaw::Constant { c }
    }

    pub fn polynomial(gamma: f64) -> Self {
        ConductanceLaw::Polynomial { gamma }
    }

    /// Tabulates an inverse CDF on `points` equally spaced levels.
    pub fn table_from_inverse<G: Fn(f64) -> f64>(
        inv: G,
        points: usize,
        gamma: Option<f64>,
        a_star: f64,
    ) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config("table law needs at least 2 points".into()));
        }
        let m = (points - 1) as f64;
        let inverse = (0..points).map(|j| inv(j as f64 / m)).collect();
        let law = ConductanceLaw::Table {
            inverse,
            gamma,
            a_star,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConductanceLaw::Constant { c } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::Config(format!("constant law needs c > 0, got {c}")));
                }
            }
            ConductanceLaw::Polynomial { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::Config(format!(
                        "polynomial law needs gamma > 0, got {gamma}"
                    )));
                }
            }
            ConductanceLaw::Table {
                inverse,
                gamma,
                a_star,
            } => {
                if inverse.len() < 2 {
                    return Err(Error::Config("table law needs at least 2 points".into()));
                }
                if inverse.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Config("table values must be finite and >= 0".into()));
                }
                if inverse.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::Config(
                        "table inverse CDF must be nondecreasing".into(),
                    ));
                }
                if *inverse.last().unwrap() <= 0.0 {
                    return Err(Error::Config("table law is concentrated at 0".into()));
                }
                if !(*a_star > 0.0) {
                    return Err(Error::Config("table law needs a_star > 0".into()));
                }
                if let Some(g) = gamma {
                    if *g < 0.0 {
                        return Err(Error::Config("tail index must be >= 0".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Tail index gamma where it is defined.
    pub fn gamma(&self) -> Option<f64> {
        match self {
            ConductanceLaw::Constant { .. } => None,
            ConductanceLaw::Polynomial { gamma } => Some(*gamma),
            ConductanceLaw::Table { gamma, .. } => *gamma,
        }
    }

    pub fn a_star(&self) -> f64 {
        match self {
            ConductanceLaw::Constant { c } => *c,
            ConductanceLaw::Polynomial { .. } => 1.0,
            ConductanceLaw::Table { a_star, .. } => *a_star,
        }
    }

    /// Essential supremum of the law.
    pub fn max_weight(&self) -> f64 {
        match self {
            ConductanceLaw::Constant { c } => *c,
            ConductanceLaw::Polynomial { .. } => 1.0,
            ConductanceLaw::Table { inverse, .. } => *inverse.last().unwrap(),
        }
    }

    /// F(a) = Pr[w <= a].
    pub fn cdf(&self, a: f64) -> f64 {
        match self {
            ConductanceLaw::Constant { c } => {
                if a >= *c {
                    1.0
                } else {
                    0.0
                }
            }
            ConductanceLaw::Polynomial { gamma } => {
                if a <= 0.0 {
                    0.0
                } else if a >= 1.0 {
                    1.0
                } else {
                    a.powf(*gamma)
                }
            }
            ConductanceLaw::Table { inverse, .. } => {
                let m = inverse.len();
                // last grid index whose value is <= a
                let j = inverse.partition_point(|&v| v <= a);
                if j == 0 {
                    return 0.0;
                }
                let j = j - 1;
                if j == m - 1 {
                    return 1.0;
                }
                let (lo, hi) = (inverse[j], inverse[j + 1]);
                (j as f64 + (a - lo) / (hi - lo)) / (m - 1) as f64
            }
        }
    }

    /// Generalized inverse of F, with a domain check on `u`.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!("u = {u} outside [0, 1]")));
        }
        Ok(self.inverse_unchecked(u))
    }

    fn inverse_unchecked(&self, u: f64) -> f64 {
        match self {
            ConductanceLaw::Constant { c } => *c,
            ConductanceLaw::Polynomial { gamma } => u.powf(1.0 / gamma),
            ConductanceLaw::Table { inverse, .. } => {
                let t = u * (inverse.len() - 1) as f64;
                let j = (t.floor() as usize).min(inverse.len() - 2);
                let frac = t - j as f64;
                inverse[j] + frac * (inverse[j + 1] - inverse[j])
            }
        }
    }

    /// Draws a weight from a uniform level; never returns 0.
    pub fn sample(&self, u: f64) -> f64 {
        self.inverse_unchecked(u).max(f64::MIN_POSITIVE)
    }
}

fn splitmix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in (0, 1) attached to the edge {x, x + e_axis}.
pub fn edge_uniform(seed: u64, lower: &[i64], axis: usize) -> f64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ axis as u64);
    for &c in lower {
        h = splitmix(h ^ c as u64);
    }
    ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Immutable edge-indexed conductance field on B_{n+pad}.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    spec: BoxSpec,
    law: ConductanceLaw,
    seed: u64,
    weights: Vec<f64>,
    cube: Cube,
    /// Edge id of {x, x + e_a} at `site * d + a`, or `NO_EDGE`.
    slots: Vec<u32>,
}

fn build_slots(cube: &Cube) -> (Vec<u32>, usize) {
    let d = cube.dim();
    let r = cube.radius();
    let mut slots = vec![NO_EDGE; cube.len() * d];
    let mut next = 0u32;
    for i in 0..cube.len() {
        for a in 0..d {
            if cube.coord(i, a) < r {
                slots[i * d + a] = next;
                next += 1;
            }
        }
    }
    (slots, next as usize)
}

/// Samples an environment on B_{n+pad}.
pub fn sample_environment(spec: BoxSpec, law: ConductanceLaw, seed: u64) -> Result<Environment> {
    spec.validate()?;
    law.validate()?;
    let cube = Cube::new(spec.d, spec.radius() as i64);
    let (slots, count) = build_slots(&cube);
    let mut weights = Vec::with_capacity(count);
    let mut x = vec![0i64; spec.d];
    for i in 0..cube.len() {
        cube.coords_into(i, &mut x);
        for a in 0..spec.d {
            if slots[i * spec.d + a] != NO_EDGE {
                weights.push(law.sample(edge_uniform(seed, &x, a)));
            }
        }
    }
    Ok(Environment {
        spec,
        law,
        seed,
        weights,
        cube,
        slots,
    })
}

impl Environment {
    pub fn spec(&self) -> BoxSpec {
        self.spec
    }

    pub fn law(&self) -> &ConductanceLaw {
        &self.law
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.spec.d
    }

    /// Radius of the materialized region.
    pub fn radius(&self) -> usize {
        self.spec.radius()
    }

    /// Weights in edge-id order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cube(&self) -> &Cube {
        &self.cube
    }

    pub fn edge_count(&self) -> usize {
        self.weights.len()
    }

    /// Edge id of {x, x + e_axis} by site index, if materialized.
    pub fn edge_id_at(&self, site: usize, axis: usize) -> Option<usize> {
        let s = self.slots[site * self.spec.d + axis];
        (s != NO_EDGE).then_some(s as usize)
    }

    /// Edge id of {x, x + e_axis}, if materialized.
    pub fn edge_id(&self, x: &[i64], axis: usize) -> Option<usize> {
        self.cube.index(x).and_then(|i| self.edge_id_at(i, axis))
    }

    /// Weight of {x, x + e_axis}.
    pub fn weight(&self, x: &[i64], axis: usize) -> Option<f64> {
        self.edge_id(x, axis).map(|e| self.weights[e])
    }

    /// Weight of {x, x + e_axis} by site index.
    pub fn weight_at(&self, site: usize, axis: usize) -> Option<f64> {
        self.edge_id_at(site, axis).map(|e| self.weights[e])
    }

    /// Weight between two nearest neighbors.
    pub fn weight_between(&self, x: &[i64], y: &[i64]) -> Option<f64> {
        let (lower, axis) = edge_key(x, y)?;
        self.weight(lower, axis)
    }

    /// Lower endpoint and axis of each edge, in edge-id order.
    pub fn edge_keys(&self) -> Vec<(Site, usize)> {
        let d = self.spec.d;
        let mut out = Vec::with_capacity(self.weights.len());
        for i in 0..self.cube.len() {
            for a in 0..d {
                if self.slots[i * d + a] != NO_EDGE {
                    out.push((self.cube.coords(i), a));
                }
            }
        }
        out
    }

    /// Copy with some edge weights replaced; edits are `(lower endpoint, axis, weight)`.
    pub fn with_edits(&self, edits: &[(Site, usize, f64)]) -> Result<Environment> {
        let mut env = self.clone();
        for (x, a, w) in edits {
            if !(*w > 0.0) {
                return Err(Error::Domain(format!("edited weight must be > 0, got {w}")));
            }
            let e = env.edge_id(x, *a).ok_or_else(|| {
                Error::Domain(format!("edge ({x:?}, axis {a}) is not materialized"))
            })?;
            env.weights[e] = *w;
        }
        Ok(env)
    }

    /// Copy with every edge incident to `x` set to `w`.
    pub fn with_site_weights(&self, x: &[i64], w: f64) -> Result<Environment> {
        let mut edits = Vec::new();
        for a in 0..self.spec.d {
            let mut y = x.to_vec();
            y[a] -= 1;
            edits.push((y, a, w));
            edits.push((x.to_vec(), a, w));
        }
        self.with_edits(&edits)
    }

    /// Writes the binary interchange format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.spec.d, self.spec.n, self.spec.pad] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        match &self.law {
            ConductanceLaw::Constant { c } => {
                w.write_all(&[0])?;
                w.write_all(&c.to_le_bytes())?;
            }
            ConductanceLaw::Polynomial { gamma } => {
                w.write_all(&[1])?;
                w.write_all(&gamma.to_le_bytes())?;
            }
            ConductanceLaw::Table {
                inverse,
                gamma,
                a_star,
            } => {
                w.write_all(&[2])?;
                w.write_all(&a_star.to_le_bytes())?;
                w.write_all(&[gamma.is_some() as u8])?;
                w.write_all(&gamma.unwrap_or(0.0).to_le_bytes())?;
                w.write_all(&(inverse.len() as u64).to_le_bytes())?;
                for v in inverse {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.weights.len() as u64).to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary interchange format.
    pub fn read_from<R: Read>(mut r: R) -> Result<Environment> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Domain("not an environment file".into()));
        }
        let version = u32::from_le_bytes(read_bytes(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Domain(format!(
                "unsupported format version {version}"
            )));
        }
        let d = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let n = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let pad = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let [kind] = read_bytes::<1, _>(&mut r)?;
        let law = match kind {
            0 => ConductanceLaw::Constant {
                c: read_f64(&mut r)?,
            },
            1 => ConductanceLaw::Polynomial {
                gamma: read_f64(&mut r)?,
            },
            2 => {
                let a_star = read_f64(&mut r)?;
                let [has_gamma] = read_bytes::<1, _>(&mut r)?;
                let g = read_f64(&mut r)?;
                let len = u64::from_le_bytes(read_bytes(&mut r)?) as usize;
                let inverse = (0..len).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
                ConductanceLaw::Table {
                    inverse,
                    gamma: (has_gamma != 0).then_some(g),
                    a_star,
                }
            }
            k => return Err(Error::Domain(format!("unknown law kind {k}"))),
        };
        let seed = u64::from_le_bytes(read_bytes(&mut r)?);
        let count = u64::from_le_bytes(read_bytes(&mut r)?) as usize;
        let spec = BoxSpec { d, n, pad };
        spec.validate()?;
        law.validate()?;
        let cube = Cube::new(d, spec.radius() as i64);
        let (slots, expected) = build_slots(&cube);
        if count != expected {
            return Err(Error::Domain(format!(
                "weight count {count} does not match box ({expected} edges)"
            )));
        }
        let weights = (0..count)
            .map(|_| read_f64(&mut r))
            .collect::<Result<_>>()?;
        Ok(Environment {
            spec,
            law,
            seed,
            weights,
            cube,
            slots,
        })
    }
}

const MAGIC: &[u8; 8] = b"RCMENV\0\0";
const FORMAT_VERSION: u32 = 1;

fn read_bytes<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_bytes(r)?))
}

/// Lower endpoint and axis of the edge {x, y}, if they are neighbors.
pub fn edge_key<'a>(x: &'a [i64], y: &'a [i64]) -> Option<(&'a [i64], usize)> {
    if x.len() != y.len() {
        return None;
    }
    let mut axis = None;
    for a in 0..x.len() {
        match x[a] - y[a] {
            0 => {}
            1 | -1 if axis.is_none() => axis = Some(a),
            _ => return None,
        }
    }
    let a = axis?;
    Some(if x[a] < y[a] { (x, a) } else { (y, a) })
}

/// Local speed pi_x over B_{n+pad-1}, with the argmin over B_n.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedField {
    cube: Cube,
    n: usize,
    values: Vec<f64>,
    argmin_site: Site,
}

impl SpeedField {
    pub fn cube(&self) -> &Cube {
        &self.cube
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn argmin_site(&self) -> &Site {
        &self.argmin_site
    }

    pub fn min_value(&self) -> f64 {
        self.values[self.cube.index(&self.argmin_site).unwrap()]
    }

    pub fn get(&self, x: &[i64]) -> Result<f64> {
        self.cube.index(x).map(|i| self.values[i]).ok_or_else(|| {
            Error::Domain(format!("pi requested at {x:?}, outside the covered region"))
        })
    }
}

/// Sum of the 2d weights incident to site index `i`, in fixed axis order.
pub(crate) fn incident_sum(env: &Environment, i: usize) -> f64 {
    let d = env.dim();
    let mut s = 0.0;
    for a in 0..d {
        s += env.weights[env.slots[(i - env.cube.stride(a)) * d + a] as usize];
        s += env.weights[env.slots[i * d + a] as usize];
    }
    s
}

/// pi_x for every site of B_{n+pad-1}.
pub fn pi_field(env: &Environment) -> Result<SpeedField> {
    let d = env.dim();
    let r = env.radius();
    if env.spec.pad < 1 {
        return Err(Error::Domain(
            "pi needs pad >= 1 so every edge of B_n exists".into(),
        ));
    }
    let cube = Cube::new(d, r as i64 - 1);
    let mut values = Vec::with_capacity(cube.len());
    let mut x = vec![0i64; d];
    for j in 0..cube.len() {
        cube.coords_into(j, &mut x);
        values.push(incident_sum(env, env.cube.index(&x).unwrap()));
    }
    let n = env.spec.n as i64;
    let inner = Cube::new(d, n);
    let mut best: Option<(f64, usize)> = None;
    for k in 0..inner.len() {
        inner.coords_into(k, &mut x);
        let v = values[cube.index(&x).unwrap()];
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, k));
        }
    }
    let argmin_site = inner.coords(best.unwrap().1);
    Ok(SpeedField {
        cube,
        n: env.spec.n,
        values,
        argmin_site,
    })
}

//! Thresholded environments: open clusters, giant-cluster density, holes,
//! the injective hole map and the set D_n.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use petgraph::unionfind::UnionFind;

use crate::environment::{ConductanceLaw, Cube, Environment, Site};
use crate::error::{Error, Result};
use crate::traps::ThresholdFamily;

/// Per-edge open flags (edge-id order); an edge is open iff w > xi.
pub fn threshold_open(env: &Environment, xi: f64) -> Result<Vec<bool>> {
    if !(xi > 0.0) {
        return Err(Error::Domain(format!("threshold must be > 0, got {xi}")));
    }
    Ok(env.weights().iter().map(|&w| w > xi).collect())
}

/// Connected components of the open-edge graph on the materialized box.
#[derive(Clone, Debug)]
pub struct ClusterLabeling {
    cube: Cube,
    n: usize,
    pub open_edges: Vec<bool>,
    /// Open flag of {x, x + e_a} at `site * d + a`.
    open_at: Vec<bool>,
    /// Cluster id per site, numbered by first appearance in lexicographic order.
    pub label: Vec<u32>,
    /// Site count per cluster over the whole labeled region.
    pub sizes: Vec<usize>,
    /// Site count per cluster inside B_n.
    pub in_box: Vec<usize>,
    pub giant_id: u32,
}

/// Labels open clusters over the whole materialized box; the giant is the
/// largest cluster by site count in B_n, ties broken by the
/// lexicographically first in-box site.
pub fn clusters(env: &Environment, open: &[bool], n: usize) -> Result<ClusterLabeling> {
    if open.len() != env.edge_count() {
        return Err(Error::Domain(
            "open field does not match the environment".into(),
        ));
    }
    if n > env.radius() {
        return Err(Error::Domain(format!("radius {n} exceeds the environment")));
    }
    let cube = env.cube().clone();
    let d = cube.dim();
    let len = cube.len();
    let mut uf = UnionFind::<u32>::new(len);
    let mut open_at = vec![false; len * d];
    for i in 0..len {
        for a in 0..d {
            if let Some(e) = env.edge_id_at(i, a) {
                if open[e] {
                    open_at[i * d + a] = true;
                    uf.union(i as u32, (i + cube.stride(a)) as u32);
                }
            }
        }
    }
    let mut root_to_label: HashMap<u32, u32> = HashMap::new();
    let mut label = Vec::with_capacity(len);
    let mut sizes: Vec<usize> = Vec::new();
    for i in 0..len {
        let root = uf.find(i as u32);
        let next = root_to_label.len() as u32;
        let l = *root_to_label.entry(root).or_insert(next);
        if l as usize == sizes.len() {
            sizes.push(0);
        }
        sizes[l as usize] += 1;
        label.push(l);
    }
    let boxc = Cube::new(d, n as i64);
    let mut in_box = vec![0usize; sizes.len()];
    let mut first: Vec<Option<usize>> = vec![None; sizes.len()];
    for (k, x) in boxc.sites().enumerate() {
        let l = label[cube.index(&x).unwrap()] as usize;
        in_box[l] += 1;
        first[l].get_or_insert(k);
    }
    let giant_id = (0..sizes.len())
        .filter(|&l| in_box[l] > 0)
        .min_by(|&a, &b| in_box[b].cmp(&in_box[a]).then(first[a].cmp(&first[b])))
        .unwrap() as u32;
    Ok(ClusterLabeling {
        cube,
        n,
        open_edges: open.to_vec(),
        open_at,
        label,
        sizes,
        in_box,
        giant_id,
    })
}

impl ClusterLabeling {
    pub fn cube(&self) -> &Cube {
        &self.cube
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn label_of(&self, x: &[i64]) -> Option<u32> {
        self.cube.index(x).map(|i| self.label[i])
    }

    pub fn in_giant(&self, x: &[i64]) -> bool {
        self.label_of(x) == Some(self.giant_id)
    }

    /// Open flag of the edge {x, y}, if both are materialized neighbors.
    pub fn is_open(&self, x: &[i64], y: &[i64]) -> Option<bool> {
        let (lower, a) = crate::environment::edge_key(x, y)?;
        let i = self.cube.index(lower)?;
        self.cube
            .contains(if lower == x { y } else { x })
            .then(|| self.open_at[i * self.cube.dim() + a])
    }

    /// Sites of B_m in the giant cluster, lexicographic.
    pub fn giant_sites(&self, m: usize) -> Vec<Site> {
        Cube::new(self.cube.dim(), m as i64)
            .sites()
            .filter(|x| self.in_giant(x))
            .collect()
    }

    /// Sites of B_m outside the giant cluster, lexicographic.
    pub fn hole_sites(&self, m: usize) -> Vec<Site> {
        Cube::new(self.cube.dim(), m as i64)
            .sites()
            .filter(|x| !self.in_giant(x))
            .collect()
    }

    /// Connected components (nearest-neighbor adjacency) of the non-giant
    /// sites of the labeled region; one id per component, `None` on giant sites.
    pub fn hole_components(&self) -> Vec<Option<u32>> {
        let len = self.cube.len();
        let d = self.cube.dim();
        let mut uf = UnionFind::<u32>::new(len);
        let hole = |i: usize| self.label[i] != self.giant_id;
        for i in 0..len {
            if !hole(i) {
                continue;
            }
            for a in 0..d {
                if self.cube.coord(i, a) < self.cube.radius() && hole(i + self.cube.stride(a)) {
                    uf.union(i as u32, (i + self.cube.stride(a)) as u32);
                }
            }
        }
        let mut ids: HashMap<u32, u32> = HashMap::new();
        (0..len)
            .map(|i| {
                hole(i).then(|| {
                    let next = ids.len() as u32;
                    *ids.entry(uf.find(i as u32)).or_insert(next)
                })
            })
            .collect()
    }

    /// CSV rows `x1..xd,label` over the whole labeled region.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.cube.dim();
        let mut header: Vec<String> = (1..=d).map(|a| format!("x{a}")).collect();
        header.push("label".into());
        wr.write_record(&header)?;
        for (i, x) in self.cube.sites().enumerate() {
            let mut row: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            row.push(self.label[i].to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// |B_n cap giant| / |B_n|.
pub fn cluster_density(labeling: &ClusterLabeling, n: usize) -> f64 {
    let c = Cube::new(labeling.cube.dim(), n as i64);
    let g = c.sites().filter(|x| labeling.in_giant(x)).count();
    g as f64 / c.len() as f64
}

/// Injective map from holes of B_n into the giant cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct HoleMap {
    /// (hole, image) pairs in lexicographic order of holes.
    pub phi: Vec<(Site, Site)>,
    /// m = floor((ln n)^{d+1}); cells have side 2m + 1.
    pub m: usize,
    pub cell_side: usize,
    pub max_l1_distance: i64,
    n: usize,
    d: usize,
}

pub fn l1(x: &[i64], y: &[i64]) -> i64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

pub fn linf(x: &[i64], y: &[i64]) -> i64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .max()
        .unwrap_or(0)
}

impl HoleMap {
    /// Map from explicit pairs; sorted by hole, cell parameters left at zero.
    pub fn from_pairs(mut phi: Vec<(Site, Site)>, n: usize, d: usize) -> Self {
        phi.sort();
        let max_l1_distance = phi.iter().map(|(x, y)| l1(x, y)).max().unwrap_or(0);
        HoleMap {
            phi,
            m: 0,
            cell_side: 0,
            max_l1_distance,
            n,
            d,
        }
    }

    pub fn image(&self, x: &[i64]) -> Option<&Site> {
        self.phi
            .binary_search_by(|(h, _)| h.as_slice().cmp(x))
            .ok()
            .map(|k| &self.phi[k].1)
    }

    /// 2d (ln n)^{d+1}.
    pub fn distance_bound(&self) -> f64 {
        2.0 * self.d as f64 * (self.n as f64).ln().powi(self.d as i32 + 1)
    }

    pub fn is_injective(&self) -> bool {
        let imgs: HashSet<&Site> = self.phi.iter().map(|(_, y)| y).collect();
        imgs.len() == self.phi.len()
    }

    /// CSV rows `hole_x1..,image_x1..,l1`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.d).map(|a| format!("hole_x{a}")).collect();
        header.extend((1..=self.d).map(|a| format!("image_x{a}")));
        header.push("l1".into());
        wr.write_record(&header)?;
        for (x, y) in &self.phi {
            let mut row: Vec<String> = x.iter().chain(y).map(|c| c.to_string()).collect();
            row.push(l1(x, y).to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Offsets with |o|_1 = r, in lexicographic order.
fn l1_shell(d: usize, r: i64) -> Vec<Vec<i64>> {
    fn rec(d: usize, r: i64, prefix: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if d == 1 {
            for v in if r == 0 { vec![0] } else { vec![-r, r] } {
                prefix.push(v);
                out.push(prefix.clone());
                prefix.pop();
            }
            return;
        }
        for v in -r..=r {
            prefix.push(v);
            rec(d - 1, r - v.abs(), prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, r, &mut Vec::new(), &mut out);
    out
}

/// Assigns each hole of B_n to the nearest unused giant site of its cell
/// B_m((2m+1) z) cap B_n, holes processed lexicographically, ties broken
/// lexicographically.
pub fn build_hole_map(labeling: &ClusterLabeling, n: usize) -> Result<HoleMap> {
    let d = labeling.cube.dim();
    if n > labeling.cube.radius() as usize {
        return Err(Error::Domain(format!(
            "radius {n} exceeds the labeled region"
        )));
    }
    let m = (n as f64).ln().max(0.0).powi(d as i32 + 1).floor() as i64;
    let side = 2 * m + 1;
    let cell_of = |x: &[i64]| -> Site { x.iter().map(|&c| (c + m).div_euclid(side)).collect() };
    let nb = Cube::new(d, n as i64);
    let mut holes: HashMap<Site, Vec<Site>> = HashMap::new();
    let mut giants: HashMap<Site, usize> = HashMap::new();
    for x in nb.sites() {
        let c = cell_of(&x);
        if labeling.in_giant(&x) {
            *giants.entry(c).or_default() += 1;
        } else {
            holes.entry(c).or_default().push(x);
        }
    }
    let mut cells: Vec<&Site> = holes.keys().collect();
    cells.sort();
    for c in &cells {
        let h = holes[*c].len();
        let g = giants.get(*c).copied().unwrap_or(0);
        if g <= h {
            return Err(Error::DensityPrecondition {
                cell: (*c).clone(),
                giant: g,
                holes: h,
            });
        }
    }
    let mut used: HashSet<Site> = HashSet::new();
    let mut phi = Vec::new();
    let mut shells: Vec<Vec<Vec<i64>>> = vec![l1_shell(d, 0)];
    let mut max_l1 = 0;
    let mut all_holes: Vec<&Site> = holes.values().flatten().collect();
    all_holes.sort();
    for x in all_holes {
        let c = cell_of(x);
        let mut r = 1usize;
        let image = loop {
            if r as i64 > d as i64 * 2 * m {
                return Err(Error::Construction(format!(
                    "no free giant site for hole {x:?}"
                )));
            }
            if shells.len() <= r {
                shells.push(l1_shell(d, r as i64));
            }
            let hit = shells[r].iter().find_map(|o| {
                let y: Site = x.iter().zip(o).map(|(a, b)| a + b).collect();
                (nb.contains(&y) && cell_of(&y) == c && labeling.in_giant(&y) && !used.contains(&y))
                    .then_some(y)
            });
            if let Some(y) = hit {
                break y;
            }
            r += 1;
        };
        max_l1 = max_l1.max(r as i64);
        used.insert(image.clone());
        phi.push((x.clone(), image));
    }
    Ok(HoleMap {
        phi,
        m: m as usize,
        cell_side: side as usize,
        max_l1_distance: max_l1,
        n,
        d,
    })
}

/// |boundary of A relative to the giant| / |A|, counting open edges from A to giant \ A.
pub fn edge_boundary_ratio(labeling: &ClusterLabeling, a: &[Site], n: usize) -> Result<f64> {
    let boxc = Cube::new(labeling.cube.dim(), n as i64);
    let set: HashSet<&Site> = a.iter().collect();
    if set.is_empty() {
        return Err(Error::Domain("A is empty".into()));
    }
    for x in a {
        if !boxc.contains(x) || !labeling.in_giant(x) {
            return Err(Error::Domain(format!("{x:?} is not a giant site in B_{n}")));
        }
    }
    let d = labeling.cube.dim();
    let mut boundary = 0usize;
    for x in &set {
        for a in 0..d {
            for s in [-1, 1] {
                let mut y = (*x).clone();
                y[a] += s;
                if !set.contains(&y)
                    && labeling.in_giant(&y)
                    && labeling.is_open(x, &y) == Some(true)
                {
                    boundary += 1;
                }
            }
        }
    }
    Ok(boundary as f64 / set.len() as f64)
}

/// D_n and the holes I_n = B_n \ D_n.
#[derive(Clone, Debug)]
pub struct Dn {
    pub threshold: f64,
    pub labeling: ClusterLabeling,
    /// I_n, lexicographic.
    pub holes: Vec<Site>,
}

impl Dn {
    pub fn contains(&self, x: &[i64]) -> bool {
        self.labeling.in_giant(x)
    }
}

/// D_n for threshold g(n^{1-epsilon}).
pub fn build_dn(env: &Environment, g: &ThresholdFamily, epsilon: f64, n: usize) -> Result<Dn> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let t = g.eval(env.law(), (n as f64).powf(1.0 - epsilon));
    build_dn_at(env, t, n)
}

/// D_n as the largest open cluster at an explicit threshold.
pub fn build_dn_at(env: &Environment, threshold: f64, n: usize) -> Result<Dn> {
    if n + 1 > env.radius() {
        return Err(Error::Domain(format!("radius {n} exceeds the environment")));
    }
    let open = threshold_open(env, threshold)?;
    let labeling = clusters(env, &open, n)?;
    let density = cluster_density(&labeling, n);
    if density < 0.5 {
        return Err(Error::NoGiant { density });
    }
    let holes = labeling.hole_sites(n);
    Ok(Dn {
        threshold,
        labeling,
        holes,
    })
}

/// Checks that every box B_b(z) holds at most one site; returns a violating pair otherwise.
pub fn is_b_sparse(set: &[Site], b: usize) -> (bool, Option<(Site, Site)>) {
    let w = 2 * b as i64 + 1;
    let mut buckets: HashMap<Site, Vec<&Site>> = HashMap::new();
    let mut sorted: Vec<&Site> = set.iter().collect();
    sorted.sort();
    sorted.dedup();
    for x in &sorted {
        let key: Site = x.iter().map(|c| c.div_euclid(w)).collect();
        buckets.entry(key).or_default().push(x);
    }
    for x in &sorted {
        let key: Site = x.iter().map(|c| c.div_euclid(w)).collect();
        let d = x.len();
        for code in 0..3usize.pow(d as u32) {
            let mut k = key.clone();
            let mut c = code;
            for v in k.iter_mut() {
                *v += (c % 3) as i64 - 1;
                c /= 3;
            }
            if let Some(list) = buckets.get(&k) {
                for y in list {
                    if *y > *x && linf(x, y) <= 2 * b as i64 {
                        return (false, Some(((*x).clone(), (*y).clone())));
                    }
                }
            }
        }
    }
    (true, None)
}

/// xi with F(xi) = 1 - p, i.e. edges open with probability p.
pub fn xi_for_open_probability(law: &ConductanceLaw, p: f64) -> Result<f64> {
    law.inverse_cdf(1.0 - p)
}

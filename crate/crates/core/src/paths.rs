//! Detour paths into a target cluster and the path-comparison lower bound
//! on Dirichlet forms.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;

use serde::Serialize;

use crate::environment::{Environment, Site};
use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::percolation::{linf, ClusterLabeling, HoleMap};
use crate::spectral::{dense_oracle, principal_eigenpair, subgraph_operator};

/// Energy restricted to the edges flagged in `edges` (edge-id order); `f` is
/// indexed by the materialized box.
pub fn subgraph_energy(env: &Environment, edges: &[bool], f: &[f64]) -> Result<f64> {
    if edges.len() != env.edge_count() || f.len() != env.cube().len() {
        return Err(Error::Domain(
            "edge mask or function does not match the environment".into(),
        ));
    }
    let cube = env.cube();
    let d = env.dim();
    let mut e = 0.0;
    for i in 0..cube.len() {
        for a in 0..d {
            if let Some(id) = env.edge_id_at(i, a) {
                if edges[id] {
                    let diff = f[i] - f[i + cube.stride(a)];
                    e += env.weights()[id] * diff * diff;
                }
            }
        }
    }
    Ok(e)
}

/// Injective source-to-image map with certified paths.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMap {
    /// (source, image), lexicographic in the source.
    pub phi: Vec<(Site, Site)>,
    /// Site sequence of each path, from source to image.
    pub paths: Vec<Vec<Site>>,
    /// Every path edge has weight > nu.
    pub nu: f64,
    /// Every path has at most `l` edges.
    pub l: usize,
    /// Smallest weight actually used.
    pub min_weight: f64,
}

#[derive(Serialize)]
struct PathLine<'a> {
    source: &'a Site,
    image: &'a Site,
    path: &'a [Site],
    min_w: f64,
    len: usize,
}

impl PathMap {
    fn from_paths(
        phi: Vec<(Site, Site)>,
        paths: Vec<Vec<Site>>,
        nu: f64,
        env: &Environment,
    ) -> Self {
        let l = paths
            .iter()
            .map(|p| p.len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        let min_weight = paths
            .iter()
            .flat_map(|p| {
                p.windows(2)
                    .map(|w| env.weight_between(&w[0], &w[1]).unwrap_or(0.0))
            })
            .fold(f64::INFINITY, f64::min);
        PathMap {
            phi,
            paths,
            nu,
            l,
            min_weight,
        }
    }

    /// Re-checks every certificate against the environment.
    pub fn validate(&self, env: &Environment) -> Result<()> {
        let images: HashSet<&Site> = self.phi.iter().map(|(_, y)| y).collect();
        if images.len() != self.phi.len() {
            return Err(Error::Construction("map is not injective".into()));
        }
        for ((x, y), p) in self.phi.iter().zip(&self.paths) {
            if p.first() != Some(x) || p.last() != Some(y) {
                return Err(Error::Construction(format!(
                    "path of {x:?} has wrong endpoints"
                )));
            }
            if p.len() - 1 > self.l {
                return Err(Error::Construction(format!(
                    "path of {x:?} is longer than L"
                )));
            }
            let distinct: HashSet<&Site> = p.iter().collect();
            if distinct.len() != p.len() {
                return Err(Error::Construction(format!(
                    "path of {x:?} revisits a site"
                )));
            }
            for w in p.windows(2) {
                match env.weight_between(&w[0], &w[1]) {
                    Some(v) if v > self.nu => {}
                    Some(v) => {
                        return Err(Error::Construction(format!(
                            "edge {:?}-{:?} has weight {v} <= nu",
                            w[0], w[1]
                        )))
                    }
                    None => {
                        return Err(Error::Construction(format!(
                            "{:?} and {:?} are not materialized neighbors",
                            w[0], w[1]
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Realized L against the (ln n)^{2d} budget.
    pub fn within_log_bound(&self, n: usize, d: usize) -> bool {
        (self.l as f64) <= (n as f64).ln().powi(2 * d as i32)
    }

    /// JSON lines `{source, image, path, min_w, len}`.
    pub fn write_jsonl<W: Write>(&self, env: &Environment, mut w: W) -> Result<()> {
        for ((x, y), p) in self.phi.iter().zip(&self.paths) {
            let min_w = p
                .windows(2)
                .map(|e| env.weight_between(&e[0], &e[1]).unwrap_or(0.0))
                .fold(f64::INFINITY, f64::min);
            let line = PathLine {
                source: x,
                image: y,
                path: p,
                min_w,
                len: p.len() - 1,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Axis-ordered l1 staircase from x to y: axis 1 first, then axis 2, ...
pub fn staircase(x: &[i64], y: &[i64]) -> Vec<Site> {
    let mut cur = x.to_vec();
    let mut out = vec![cur.clone()];
    for a in 0..x.len() {
        while cur[a] != y[a] {
            cur[a] += (y[a] - cur[a]).signum();
            out.push(cur.clone());
        }
    }
    out
}

/// Removes cycles in order of appearance.
pub fn loop_erase(path: &[Site]) -> Vec<Site> {
    let mut out: Vec<Site> = Vec::with_capacity(path.len());
    let mut pos: HashMap<Site, usize> = HashMap::new();
    for s in path {
        if let Some(&k) = pos.get(s) {
            for dropped in out.drain(k + 1..) {
                pos.remove(&dropped);
            }
        } else {
            pos.insert(s.clone(), out.len());
            out.push(s.clone());
        }
    }
    out
}

fn good(env: &Environment, x: &[i64], y: &[i64], bad: f64) -> bool {
    env.weight_between(x, y).is_some_and(|w| w > bad)
}

/// Shortest path from y to z on good edges inside B_r(y); neighbors are
/// expanded in lexicographic order so the result is deterministic.
fn bfs_detour(env: &Environment, y: &[i64], z: &[i64], r: i64, bad: f64) -> Option<Vec<Site>> {
    let d = y.len();
    let mut parent: HashMap<Site, Site> = HashMap::new();
    let mut queue = VecDeque::from([y.to_vec()]);
    parent.insert(y.to_vec(), y.to_vec());
    while let Some(u) = queue.pop_front() {
        if u == z {
            let mut path = vec![u.clone()];
            let mut cur = u;
            while cur != y {
                cur = parent[&cur].clone();
                path.push(cur.clone());
            }
            path.reverse();
            return Some(path);
        }
        let mut nbrs: Vec<Site> = Vec::with_capacity(2 * d);
        for a in 0..d {
            for s in [-1, 1] {
                let mut v = u.clone();
                v[a] += s;
                nbrs.push(v);
            }
        }
        nbrs.sort();
        for v in nbrs {
            if linf(&v, y) <= r && !parent.contains_key(&v) && good(env, &u, &v, bad) {
                parent.insert(v.clone(), u.clone());
                queue.push_back(v);
            }
        }
    }
    None
}

fn detour_path(
    env: &Environment,
    x: &Site,
    base_map: &HoleMap,
    bad: f64,
    r: i64,
) -> Result<(Site, Site, Vec<Site>)> {
    let y = base_map
        .image(x)
        .ok_or_else(|| Error::Precondition(format!("{x:?} is not in the hole map")))?
        .clone();
    let stairs = staircase(x, &y);
    let edge_ok: Vec<bool> = stairs
        .windows(2)
        .map(|w| good(env, &w[0], &w[1], bad))
        .collect();
    let mut walk = vec![x.clone()];
    let mut i = 0;
    while i < edge_ok.len() {
        if edge_ok[i] {
            walk.push(stairs[i + 1].clone());
            i += 1;
            continue;
        }
        let start = &stairs[i];
        let j = (i + 1..edge_ok.len())
            .find(|&j| edge_ok[j])
            .unwrap_or(edge_ok.len());
        let target = &stairs[j];
        let detour = bfs_detour(env, start, target, r, bad).ok_or_else(|| {
            Error::Construction(format!(
                "no good detour from {start:?} to {target:?} inside B_{r}({start:?})"
            ))
        })?;
        walk.extend(detour.into_iter().skip(1));
        i = j;
    }
    let path = loop_erase(&walk);
    Ok((x.clone(), y, path))
}

/// Follows the staircase from each source to its hole-map image, replacing
/// runs of bad edges (w <= bad_threshold) by shortest good detours inside
/// B_{3d}(y), then erases loops.
pub fn build_detour_paths(
    env: &Environment,
    sources: &[Site],
    base_map: &HoleMap,
    bad_threshold: f64,
) -> Result<PathMap> {
    let d = env.dim();
    let r = 3 * d as i64;
    let mut srcs: Vec<&Site> = sources.iter().collect();
    srcs.sort();
    let built: Vec<(Site, Site, Vec<Site>)> = srcs
        .par_iter()
        .map(|x| detour_path(env, x, base_map, bad_threshold, r))
        .collect::<Result<_>>()?;
    let mut phi = Vec::with_capacity(built.len());
    let mut paths = Vec::with_capacity(built.len());
    for (x, y, p) in built {
        phi.push((x, y));
        paths.push(p);
    }
    let pm = PathMap::from_paths(phi, paths, bad_threshold, env);
    pm.validate(env)?;
    Ok(pm)
}

/// Single-edge paths from each source to its heaviest neighbor.
pub fn neighbor_map(env: &Environment, sources: &[Site], alpha: f64) -> Result<PathMap> {
    let d = env.dim();
    let mut srcs: Vec<&Site> = sources.iter().collect();
    srcs.sort();
    let mut phi = Vec::with_capacity(srcs.len());
    let mut paths = Vec::with_capacity(srcs.len());
    for x in srcs {
        let mut best: Option<(f64, Site)> = None;
        for a in 0..d {
            for s in [-1, 1] {
                let mut y = x.clone();
                y[a] += s;
                let w = env
                    .weight_between(x, &y)
                    .ok_or_else(|| Error::Domain(format!("edges of {x:?} are not materialized")))?;
                let better = match &best {
                    None => true,
                    Some((bw, by)) => w > *bw || (w == *bw && y < *by),
                };
                if better {
                    best = Some((w, y));
                }
            }
        }
        let (w, y) = best.unwrap();
        if !(w > alpha) {
            return Err(Error::Precondition(format!(
                "every edge at {x:?} has weight <= {alpha}"
            )));
        }
        phi.push((x.clone(), y.clone()));
        paths.push(vec![x.clone(), y]);
    }
    let images: HashSet<&Site> = phi.iter().map(|(_, y)| y).collect();
    if images.len() != phi.len() {
        return Err(Error::Precondition("neighbor map is not injective".into()));
    }
    Ok(PathMap::from_paths(phi, paths, alpha, env))
}

/// ((2L)^{d+1}/nu + 3/mu)^{-1}.
pub fn pathvsrw_bound(nu: f64, l: f64, mu: f64, d: usize) -> Result<f64> {
    if !(nu > 0.0 && l > 0.0 && mu > 0.0) {
        return Err(Error::Domain(format!(
            "bound needs positive arguments, got nu={nu}, L={l}, mu={mu}"
        )));
    }
    Ok(1.0 / ((2.0 * l).powi(d as i32 + 1) / nu + 3.0 / mu))
}

/// Exact Poincare constant of the cluster part of B_n: the principal
/// eigenvalue of the cluster energy on functions supported in `labeling`'s
/// giant inside B_n.
pub fn cluster_mu(
    env: &Environment,
    labeling: &ClusterLabeling,
    xi: f64,
    n: usize,
    tol: f64,
) -> Result<f64> {
    let sites = labeling.giant_sites(n);
    if sites.is_empty() {
        return Err(Error::Precondition("target cluster misses B_n".into()));
    }
    let op = subgraph_operator::<f64, _>(env, &sites, |w| w > xi)?;
    if op.dim() <= 400 {
        let spec = dense_oracle(&op)?;
        return Ok(spec.values[0]);
    }
    Ok(principal_eigenpair(&op, tol, 10_000)?.lambda1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{sample_environment, BoxSpec, ConductanceLaw};
    use crate::percolation::{build_hole_map, clusters, threshold_open};
    use crate::spectral::{assemble_dirichlet_operator, dirichlet_energy};

    fn unit_env(n: usize, pad: usize) -> Environment {
        sample_environment(BoxSpec::new(2, n, pad), ConductanceLaw::constant(1.0), 0).unwrap()
    }

    #[test]
    fn bound_formula() {
        assert!((pathvsrw_bound(1.0, 1.0, 1.0, 2).unwrap() - 1.0 / 11.0).abs() < 1e-15);
        assert!((pathvsrw_bound(1.0, 1.0, 1e12, 2).unwrap() - 0.125).abs() < 1e-10);
        assert!(pathvsrw_bound(0.0, 1.0, 1.0, 2).is_err());
        assert!(pathvsrw_bound(1.0, -1.0, 1.0, 2).is_err());
    }

    #[test]
    fn staircase_and_loops() {
        let p = staircase(&[0, 0], &[2, -1]);
        assert_eq!(p, vec![vec![0, 0], vec![1, 0], vec![2, 0], vec![2, -1]]);
        let walk = vec![
            vec![0, 0],
            vec![1, 0],
            vec![1, 1],
            vec![0, 1],
            vec![0, 0],
            vec![0, -1],
        ];
        assert_eq!(loop_erase(&walk), vec![vec![0, 0], vec![0, -1]]);
    }

    #[test]
    fn energy_empty_and_full() {
        let e =
            sample_environment(BoxSpec::new(2, 3, 1), ConductanceLaw::polynomial(0.5), 2).unwrap();
        let f: Vec<f64> = (0..e.cube().len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        assert_eq!(
            subgraph_energy(&e, &vec![false; e.edge_count()], &f).unwrap(),
            0.0
        );
        let mut g = f.clone();
        for (i, x) in e.cube().sites().enumerate() {
            if x.iter().any(|c| c.abs() > 3) {
                g[i] = 0.0;
            }
        }
        let full = subgraph_energy(&e, &vec![true; e.edge_count()], &g).unwrap();
        let direct = dirichlet_energy(&e, &g, 3).unwrap();
        assert!((full - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn energy_additive_over_complement() {
        let e =
            sample_environment(BoxSpec::new(2, 4, 1), ConductanceLaw::polynomial(0.3), 9).unwrap();
        let f: Vec<f64> = (0..e.cube().len())
            .map(|i| ((i * 7919) % 13) as f64 - 6.0)
            .collect();
        let mask: Vec<bool> = (0..e.edge_count())
            .map(|i| (i * 2654435761usize) % 3 == 0)
            .collect();
        let comp: Vec<bool> = mask.iter().map(|b| !b).collect();
        let all = subgraph_energy(&e, &vec![true; e.edge_count()], &f).unwrap();
        let part = subgraph_energy(&e, &mask, &f).unwrap();
        let rest = subgraph_energy(&e, &comp, &f).unwrap();
        assert!((all - rest - part).abs() <= 1e-12 * all);
    }

    #[test]
    fn straight_paths_without_bad_edges() {
        let e = unit_env(8, 6).with_site_weights(&[1, 1], 0.1).unwrap();
        let lab = clusters(&e, &threshold_open(&e, 0.5).unwrap(), 8).unwrap();
        let hm = build_hole_map(&lab, 8).unwrap();
        let pm = build_detour_paths(&e, &[vec![1, 1]], &hm, 0.01).unwrap();
        assert_eq!(pm.paths, vec![staircase(&[1, 1], &[0, 1])]);
        assert_eq!(pm.l, 1);
    }

    #[test]
    fn detour_around_single_bad_edge() {
        let base = unit_env(8, 8);
        let e = base
            .with_edits(&[(vec![0, 0], 0, 0.5), (vec![2, 0], 0, 1e-9)])
            .unwrap();
        let hm = HoleMap::from_pairs(vec![(vec![0, 0], vec![5, 0])], 8, 2);
        let pm = build_detour_paths(&e, &[vec![0, 0]], &hm, 1e-6).unwrap();
        let p = &pm.paths[0];
        assert_eq!(p.first(), Some(&vec![0, 0]));
        assert_eq!(p.last(), Some(&vec![5, 0]));
        assert!(p.len() - 1 <= 5 + 2 * 6 * 7);
        // the detour from (2,0) to (3,0) avoiding the bad edge has length 3
        assert_eq!(p.len() - 1, 5 + 2);
        pm.validate(&e).unwrap();
        assert!(pm.min_weight > 1e-6);
    }

    #[test]
    fn neighbor_map_examples() {
        let e = unit_env(4, 2);
        assert!(neighbor_map(&e, &[], 0.5).unwrap().phi.is_empty());
        let e = e
            .with_site_weights(&[0, 0], 1e-6)
            .unwrap()
            .with_edits(&[(vec![0, 0], 1, 0.3)])
            .unwrap();
        let pm = neighbor_map(&e, &[vec![0, 0]], 1e-3).unwrap();
        assert_eq!(pm.phi, vec![(vec![0, 0], vec![0, 1])]);
        pm.validate(&e).unwrap();
        assert!(matches!(
            neighbor_map(&e, &[vec![0, 0]], 0.5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn bound_below_lambda1_on_small_box() {
        let n = 8;
        let xi = 0.05;
        let (e, lab, hm) = (0..50)
            .find_map(|seed| {
                let e = sample_environment(
                    BoxSpec::new(2, n, 4),
                    ConductanceLaw::polynomial(0.3),
                    seed,
                )
                .ok()?;
                let lab = clusters(&e, &threshold_open(&e, xi).ok()?, n).ok()?;
                let hm = build_hole_map(&lab, n).ok()?;
                Some((e, lab, hm))
            })
            .unwrap();
        let holes: Vec<Site> = hm.phi.iter().map(|(x, _)| x.clone()).collect();
        let pm = build_detour_paths(&e, &holes, &hm, 1e-4).unwrap();
        let mu = cluster_mu(&e, &lab, xi, n, 1e-12).unwrap();
        let bound = pathvsrw_bound(pm.nu, pm.l.max(1) as f64, mu, 2).unwrap();
        let op = assemble_dirichlet_operator::<f64>(&e, n).unwrap();
        let lambda = dense_oracle(&op).unwrap().values[0];
        assert!(bound <= lambda * (1.0 + 1e-10), "{bound} > {lambda}");
    }

    #[test]
    fn jsonl_export() {
        let e = unit_env(4, 2).with_edits(&[(vec![0, 0], 1, 2.0)]).unwrap();
        let pm = neighbor_map(&e, &[vec![0, 0]], 0.5).unwrap();
        let mut buf = Vec::new();
        pm.write_jsonl(&e, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"source\":[0,0],\"image\":[0,1],\"path\":[[0,0],[0,1]],\"min_w\":2.0,\"len\":1}\n"
        );
    }
}

//! Octree-encoded SDF + spherical-harmonic radiance field.
//!
//! The field stores per-corner parameters (one signed distance, 27 SH
//! scalars) in a deduplicated grid-point table; leaves reference their 8
//! corners. Values inside a leaf are trilinear in the corner values. The
//! tree is kept 2:1 edge-balanced and hanging corners on coarse/fine faces
//! are constrained to the coarse-side interpolation so the field stays
//! continuous everywhere.

mod optim;

pub use optim::{FieldOptimizer, LearningRates, UpdateStats};

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use std::collections::HashMap;

/// Lattice resolution used for grid-point keys; also the maximum depth.
pub const KEY_LEVEL: u8 = 10;
const KEY_RES: u32 = 1 << KEY_LEVEL;

const LEAF_BIT: u32 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    /// Symmetric cube of the given half extent.
    pub fn cube(half: f64) -> Self {
        Aabb {
            min: Vector3::new(-half, -half, -half),
            max: Vector3::new(half, half, half),
        }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|k| self.max[k] - self.min[k] <= 0.0)
    }

    /// Ray/box intersection interval, if any.
    pub fn clip_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut a, mut b) = ((self.min[k] - origin[k]) * inv, (self.max[k] - origin[k]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }
}

/// One octree leaf: 8 corner references in (z, y, x) bit order
/// (`j = z<<2 | y<<1 | x`).
#[derive(Debug, Clone)]
pub struct Leaf {
    pub level: u8,
    /// Minimum corner on the KEY_LEVEL lattice.
    pub origin: [u32; 3],
    pub corners: [u32; 8],
}

impl Leaf {
    /// Cell edge length on the KEY_LEVEL lattice.
    pub fn span(&self) -> u32 {
        1 << (KEY_LEVEL - self.level)
    }
}

/// SDF initializer for [`OctreeField::build_initial`].
pub enum InitSdf<'a> {
    /// Centered sphere, radius 0.4 x half extent, negative inside.
    DefaultSphere,
    Constant(f64),
    Func(&'a dyn Fn(&Vector3<f64>) -> f64),
}

/// Where a query point landed: leaf index + fractional position in the cell.
#[derive(Debug, Clone, Copy)]
pub struct LeafHit {
    pub leaf: u32,
    pub frac: Vector3<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RefinementReport {
    pub candidates: usize,
    pub split: usize,
    pub cascade_splits: usize,
    pub leaves_after: usize,
    pub points_after: usize,
    pub max_level: u8,
}

pub struct OctreeField {
    pub(crate) bounds: Aabb,
    pub(crate) max_level: u8,
    root: u32,
    nodes: Vec<[u32; 8]>,
    pub(crate) leaves: Vec<Leaf>,
    pub(crate) keys: Vec<[u32; 3]>,
    pub(crate) sdf: Vec<f64>,
    pub(crate) sh: Vec<[f64; 27]>,
    pub(crate) sdf_grad: Vec<f64>,
    pub(crate) sh_grad: Vec<[f64; 27]>,
    pub(crate) touched: Vec<u32>,
    pub(crate) epoch: u32,
    /// Hanging corners: flattened (free master, weight) lists.
    pub(crate) hanging: Vec<Option<Box<[(u32, f64)]>>>,
    index: HashMap<[u32; 3], u32>,
    pub(crate) beta: f64,
    pub(crate) beta_grad: f64,
    pub(crate) nonfinite_skips: u64,
}

pub fn trilinear_weights(f: &Vector3<f64>) -> [f64; 8] {
    let (fx, fy, fz) = (f.x, f.y, f.z);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    [
        gz * gy * gx,
        gz * gy * fx,
        gz * fy * gx,
        gz * fy * fx,
        fz * gy * gx,
        fz * gy * fx,
        fz * fy * gx,
        fz * fy * fx,
    ]
}

/// d(weight_j)/d(frac) for all 8 corners.
pub fn trilinear_weight_grads(f: &Vector3<f64>) -> [Vector3<f64>; 8] {
    let (fx, fy, fz) = (f.x, f.y, f.z);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    let mut out = [Vector3::zeros(); 8];
    for j in 0..8 {
        let (bx, by, bz) = (j & 1 != 0, j & 2 != 0, j & 4 != 0);
        let (wx, wy, wz) = (
            if bx { fx } else { gx },
            if by { fy } else { gy },
            if bz { fz } else { gz },
        );
        let (sx, sy, sz) = (
            if bx { 1.0 } else { -1.0 },
            if by { 1.0 } else { -1.0 },
            if bz { 1.0 } else { -1.0 },
        );
        out[j] = Vector3::new(sx * wy * wz, wx * sy * wz, wx * wy * sz);
    }
    out
}

impl OctreeField {
    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    pub fn build_initial(bounds: Aabb, level: u8, init: InitSdf) -> Result<Self> {
        if bounds.is_degenerate() {
            return Err(Error::DegenerateBounds);
        }
        if level > KEY_LEVEL {
            return Err(Error::InvalidArgument(format!(
                "initial level {level} exceeds the maximum of {KEY_LEVEL}"
            )));
        }
        let mut field = OctreeField {
            bounds,
            max_level: level,
            root: 0,
            nodes: Vec::new(),
            leaves: Vec::new(),
            keys: Vec::new(),
            sdf: Vec::new(),
            sh: Vec::new(),
            sdf_grad: Vec::new(),
            sh_grad: Vec::new(),
            touched: Vec::new(),
            epoch: 1,
            hanging: Vec::new(),
            index: HashMap::new(),
            beta: 0.1,
            beta_grad: 0.0,
            nonfinite_skips: 0,
        };
        field.root = field.build_uniform([0, 0, 0], 0, level);
        let radius = 0.2 * bounds.extent().min();
        let center = bounds.center();
        for i in 0..field.keys.len() {
            let p = field.point_position(i as u32);
            field.sdf[i] = match &init {
                InitSdf::DefaultSphere => (p - center).norm() - radius,
                InitSdf::Constant(c) => *c,
                InitSdf::Func(f) => f(&p),
            };
            let dc = crate::sh::dc_for_constant(0.5);
            field.sh[i][0] = dc;
            field.sh[i][9] = dc;
            field.sh[i][18] = dc;
        }
        Ok(field)
    }

    fn build_uniform(&mut self, origin: [u32; 3], level: u8, target: u8) -> u32 {
        if level == target {
            let idx = self.push_leaf(level, origin);
            return idx | LEAF_BIT;
        }
        let half = 1u32 << (KEY_LEVEL - level - 1);
        let mut children = [0u32; 8];
        for (j, child) in children.iter_mut().enumerate() {
            let o = [
                origin[0] + if j & 1 != 0 { half } else { 0 },
                origin[1] + if j & 2 != 0 { half } else { 0 },
                origin[2] + if j & 4 != 0 { half } else { 0 },
            ];
            *child = self.build_uniform(o, level + 1, target);
        }
        self.nodes.push(children);
        (self.nodes.len() - 1) as u32
    }

    fn push_leaf(&mut self, level: u8, origin: [u32; 3]) -> u32 {
        let span = 1u32 << (KEY_LEVEL - level);
        let mut corners = [0u32; 8];
        for (j, c) in corners.iter_mut().enumerate() {
            let key = [
                origin[0] + if j & 1 != 0 { span } else { 0 },
                origin[1] + if j & 2 != 0 { span } else { 0 },
                origin[2] + if j & 4 != 0 { span } else { 0 },
            ];
            *c = self.intern_point(key);
        }
        self.leaves.push(Leaf {
            level,
            origin,
            corners,
        });
        (self.leaves.len() - 1) as u32
    }

    fn intern_point(&mut self, key: [u32; 3]) -> u32 {
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key);
        self.sdf.push(0.0);
        self.sh.push([0.0; 27]);
        self.sdf_grad.push(0.0);
        self.sh_grad.push([0.0; 27]);
        self.touched.push(0);
        self.hanging.push(None);
        self.index.insert(key, id);
        id
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn max_level(&self) -> u8 {
        self.max_level
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        assert!(beta > 0.0);
        self.beta = beta;
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_points(&self) -> usize {
        self.keys.len()
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn point_position(&self, id: u32) -> Vector3<f64> {
        let key = self.keys[id as usize];
        let e = self.bounds.extent();
        Vector3::new(
            self.bounds.min.x + e.x * key[0] as f64 / KEY_RES as f64,
            self.bounds.min.y + e.y * key[1] as f64 / KEY_RES as f64,
            self.bounds.min.z + e.z * key[2] as f64 / KEY_RES as f64,
        )
    }

    pub fn point_sdf(&self, id: u32) -> f64 {
        self.sdf[id as usize]
    }

    pub fn set_point_sdf(&mut self, id: u32, v: f64) {
        self.sdf[id as usize] = v;
        self.refresh_hanging();
    }

    pub fn point_sh(&self, id: u32) -> &[f64; 27] {
        &self.sh[id as usize]
    }

    pub fn set_point_sh(&mut self, id: u32, sh: [f64; 27]) {
        self.sh[id as usize] = sh;
        self.refresh_hanging();
    }

    /// Overwrite all SDF values from a closure (keeps SH): test/tool helper.
    pub fn fill_sdf(&mut self, f: impl Fn(&Vector3<f64>) -> f64) {
        for i in 0..self.keys.len() {
            let p = self.point_position(i as u32);
            self.sdf[i] = f(&p);
        }
        self.refresh_hanging();
    }

    pub fn fill_sh(&mut self, f: impl Fn(&Vector3<f64>) -> [f64; 27]) {
        for i in 0..self.keys.len() {
            let p = self.point_position(i as u32);
            self.sh[i] = f(&p);
        }
        self.refresh_hanging();
    }

    /// Whether the grid point is constrained to coarse-side interpolation.
    pub fn is_hanging(&self, id: u32) -> bool {
        self.hanging[id as usize].is_some()
    }

    pub fn nonfinite_skips(&self) -> u64 {
        self.nonfinite_skips
    }

    /// World-space cell size of a leaf (per axis).
    pub fn leaf_cell_size(&self, leaf: &Leaf) -> Vector3<f64> {
        self.bounds.extent() * (leaf.span() as f64 / KEY_RES as f64)
    }

    pub fn leaf_diagonal(&self, leaf: &Leaf) -> f64 {
        self.leaf_cell_size(leaf).norm()
    }

    pub fn leaf_min_corner(&self, leaf: &Leaf) -> Vector3<f64> {
        let e = self.bounds.extent();
        Vector3::new(
            self.bounds.min.x + e.x * leaf.origin[0] as f64 / KEY_RES as f64,
            self.bounds.min.y + e.y * leaf.origin[1] as f64 / KEY_RES as f64,
            self.bounds.min.z + e.z * leaf.origin[2] as f64 / KEY_RES as f64,
        )
    }

    /// Smallest cell edge length currently in the tree.
    pub fn finest_cell_size(&self) -> f64 {
        let e = self.bounds.extent().min();
        e / (1u64 << self.max_level) as f64
    }

    // ------------------------------------------------------------------
    // Point location + interpolation
    // ------------------------------------------------------------------

    /// Locate the leaf containing `p`; points on shared faces resolve to the
    /// lower-coordinate leaf.
    pub fn locate(&self, p: &Vector3<f64>) -> Result<LeafHit> {
        if !self.bounds.contains(p) {
            return Err(Error::OutOfDomain([p.x, p.y, p.z]));
        }
        let e = self.bounds.extent();
        let u = Vector3::new(
            (p.x - self.bounds.min.x) / e.x * KEY_RES as f64,
            (p.y - self.bounds.min.y) / e.y * KEY_RES as f64,
            (p.z - self.bounds.min.z) / e.z * KEY_RES as f64,
        );
        let mut node = self.root;
        let mut origin = [0u32; 3];
        let mut span = KEY_RES;
        while node & LEAF_BIT == 0 {
            span >>= 1;
            let mut child = 0usize;
            for k in 0..3 {
                if u[k] > (origin[k] + span) as f64 {
                    child |= 1 << k;
                    origin[k] += span;
                }
            }
            node = self.nodes[node as usize][child];
        }
        let leaf = node & !LEAF_BIT;
        let frac = Vector3::new(
            ((u.x - origin[0] as f64) / span as f64).clamp(0.0, 1.0),
            ((u.y - origin[1] as f64) / span as f64).clamp(0.0, 1.0),
            ((u.z - origin[2] as f64) / span as f64).clamp(0.0, 1.0),
        );
        Ok(LeafHit { leaf, frac })
    }

    /// Trilinear SDF at a located position.
    pub fn sdf_at(&self, hit: &LeafHit) -> f64 {
        let leaf = &self.leaves[hit.leaf as usize];
        let w = trilinear_weights(&hit.frac);
        let mut s = 0.0;
        for j in 0..8 {
            s += w[j] * self.sdf[leaf.corners[j] as usize];
        }
        s
    }

    /// Trilinear SH coefficients at a located position.
    pub fn sh_at(&self, hit: &LeafHit) -> [f64; 27] {
        let leaf = &self.leaves[hit.leaf as usize];
        let w = trilinear_weights(&hit.frac);
        let mut out = [0.0f64; 27];
        for j in 0..8 {
            let sh = &self.sh[leaf.corners[j] as usize];
            let wj = w[j];
            for (o, v) in out.iter_mut().zip(sh.iter()) {
                *o += wj * v;
            }
        }
        out
    }

    /// Sample (sdf, sh) at a world point.
    pub fn sample(&self, p: &Vector3<f64>) -> Result<(f64, [f64; 27])> {
        let hit = self.locate(p)?;
        Ok((self.sdf_at(&hit), self.sh_at(&hit)))
    }

    pub fn sample_sdf(&self, p: &Vector3<f64>) -> Result<f64> {
        let hit = self.locate(p)?;
        Ok(self.sdf_at(&hit))
    }

    /// Exact spatial gradient of the trilinear SDF interpolant at `p`.
    pub fn gradient(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        let hit = self.locate(p)?;
        Ok(self.gradient_at(&hit))
    }

    pub fn gradient_at(&self, hit: &LeafHit) -> Vector3<f64> {
        let leaf = &self.leaves[hit.leaf as usize];
        let grads = trilinear_weight_grads(&hit.frac);
        let cell = self.leaf_cell_size(leaf);
        let mut g = Vector3::zeros();
        for j in 0..8 {
            g += grads[j] * self.sdf[leaf.corners[j] as usize];
        }
        Vector3::new(g.x / cell.x, g.y / cell.y, g.z / cell.z)
    }

    /// d(grad component)/d(corner value): used by regularizer backward passes.
    pub fn gradient_weights_at(&self, hit: &LeafHit) -> [Vector3<f64>; 8] {
        let leaf = &self.leaves[hit.leaf as usize];
        let cell = self.leaf_cell_size(leaf);
        let mut grads = trilinear_weight_grads(&hit.frac);
        for g in grads.iter_mut() {
            g.x /= cell.x;
            g.y /= cell.y;
            g.z /= cell.z;
        }
        grads
    }

    /// Finite-difference Hessian of the SDF: second differences on the
    /// diagonal, 4-point stencils off it; exactly symmetric.
    pub fn hessian_fd(&self, p: &Vector3<f64>, eps: f64) -> Result<Matrix3<f64>> {
        let mut h = Matrix3::zeros();
        let center = self.sample_sdf(p)?;
        let mut probe = |dx: f64, dy: f64, dz: f64| -> Result<f64> {
            self.sample_sdf(&Vector3::new(p.x + dx, p.y + dy, p.z + dz))
        };
        let inv_e2 = 1.0 / (eps * eps);
        for k in 0..3 {
            let mut d = [0.0; 3];
            d[k] = eps;
            let fp = probe(d[0], d[1], d[2])?;
            let fm = probe(-d[0], -d[1], -d[2])?;
            h[(k, k)] = (fp - 2.0 * center + fm) * inv_e2;
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let mut dp = [0.0; 3];
                dp[a] = eps;
                dp[b] = eps;
                let mut dm = [0.0; 3];
                dm[a] = eps;
                dm[b] = -eps;
                let fpp = probe(dp[0], dp[1], dp[2])?;
                let fpm = probe(dm[0], dm[1], dm[2])?;
                let fmp = probe(-dm[0], -dm[1], -dm[2])?;
                let fmm = probe(-dp[0], -dp[1], -dp[2])?;
                let v = (fpp - fpm - fmp + fmm) * inv_e2 * 0.25;
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        Ok(h)
    }

    /// Hessian plus, for each of the 19 stencil probes, the located hit and
    /// its weight into each Hessian entry; used for analytic backward.
    pub(crate) fn hessian_fd_probes(
        &self,
        p: &Vector3<f64>,
        eps: f64,
    ) -> Result<(Matrix3<f64>, Vec<(LeafHit, [[f64; 3]; 3])>)> {
        let inv_e2 = 1.0 / (eps * eps);
        let mut probes: Vec<(LeafHit, [[f64; 3]; 3])> = Vec::with_capacity(19);
        let mut h = Matrix3::zeros();
        let mut add = |field: &Self,
                       probes: &mut Vec<(LeafHit, [[f64; 3]; 3])>,
                       h: &mut Matrix3<f64>,
                       dx: f64,
                       dy: f64,
                       dz: f64,
                       wts: &[((usize, usize), f64)]|
         -> Result<()> {
            let q = Vector3::new(p.x + dx, p.y + dy, p.z + dz);
            let hit = field.locate(&q)?;
            let s = field.sdf_at(&hit);
            let mut w = [[0.0f64; 3]; 3];
            for &((a, b), c) in wts {
                let c = c * inv_e2;
                w[a][b] += c;
                if a != b {
                    w[b][a] += c;
                }
                h[(a, b)] += c * s;
                if a != b {
                    h[(b, a)] += c * s;
                }
            }
            probes.push((hit, w));
            Ok(())
        };
        // Center participates in all three diagonal stencils.
        add(
            self,
            &mut probes,
            &mut h,
            0.0,
            0.0,
            0.0,
            &[((0, 0), -2.0), ((1, 1), -2.0), ((2, 2), -2.0)],
        )?;
        for k in 0..3 {
            let mut d = [0.0; 3];
            d[k] = eps;
            add(self, &mut probes, &mut h, d[0], d[1], d[2], &[((k, k), 1.0)])?;
            add(self, &mut probes, &mut h, -d[0], -d[1], -d[2], &[((k, k), 1.0)])?;
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut d = [0.0; 3];
                    d[a] = sa * eps;
                    d[b] = sb * eps;
                    let sign: f64 = 0.25 * sa * sb;
                    add(self, &mut probes, &mut h, d[0], d[1], d[2], &[((a, b), sign)])?;
                }
            }
        }
        Ok((h, probes))
    }

    // ------------------------------------------------------------------
    // Subdivision
    // ------------------------------------------------------------------

    /// Minimum |SDF| over `n` uniform random interior points plus the 8
    /// corners of the leaf.
    pub fn leaf_min_abs_sdf(&self, leaf_idx: u32, n: usize, rng: &mut impl Rng) -> f64 {
        let leaf = &self.leaves[leaf_idx as usize];
        let vals: [f64; 8] = std::array::from_fn(|j| self.sdf[leaf.corners[j] as usize]);
        let mut best = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        for _ in 0..n {
            let f = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let w = trilinear_weights(&f);
            let s: f64 = (0..8).map(|j| w[j] * vals[j]).sum();
            best = best.min(s.abs());
        }
        best
    }

    /// Exact minimum of |interpolant| over the closed cell (the interpolant
    /// is multilinear, so extrema sit at corners; a sign change means zero).
    fn leaf_min_abs_exact(&self, leaf: &Leaf) -> f64 {
        let mut min_v = f64::INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        let mut min_abs = f64::INFINITY;
        for &c in &leaf.corners {
            let v = self.sdf[c as usize];
            min_v = min_v.min(v);
            max_v = max_v.max(v);
            min_abs = min_abs.min(v.abs());
        }
        if min_v <= 0.0 && max_v >= 0.0 {
            0.0
        } else {
            min_abs
        }
    }

    /// Split every leaf whose sampled min |SDF| is within `tau` cell
    /// diagonals of zero, plus cascading splits restoring 2:1 balance.
    /// New corners are initialized by parent interpolation, so the field is
    /// unchanged at the instant of refinement.
    pub fn subdivide_near_surface(&mut self, tau: f64, seed: u64) -> RefinementReport {
        assert!(
            self.max_level < KEY_LEVEL,
            "field is already at the maximum depth"
        );
        let mut report = RefinementReport::default();
        let mut marked = vec![false; self.leaves.len()];
        for (i, leaf) in self.leaves.iter().enumerate() {
            if leaf.level >= KEY_LEVEL {
                continue;
            }
            let diag = self.leaf_diagonal(leaf);
            // Monte-Carlo min >= exact min, so leaves that fail on the exact
            // bound can never pass the sampled test.
            if self.leaf_min_abs_exact(leaf) > tau * diag {
                continue;
            }
            report.candidates += 1;
            let mut rng = leaf_rng(seed, leaf);
            if self.leaf_min_abs_sdf(i as u32, 256, &mut rng) <= tau * diag {
                marked[i] = true;
                report.split += 1;
            }
        }
        // 2:1 balance: a split leaf at level l forces edge/face-adjacent
        // leaves at level l-1 to split as well.
        let mut queue: Vec<u32> = (0..self.leaves.len() as u32)
            .filter(|&i| marked[i as usize])
            .collect();
        while let Some(i) = queue.pop() {
            let (level, origin, span) = {
                let l = &self.leaves[i as usize];
                (l.level, l.origin, l.span())
            };
            for probe in neighbor_probes(origin, span) {
                if let Some(nb) = self.locate_leaf_by_key(probe) {
                    if self.leaves[nb as usize].level < level && !marked[nb as usize] {
                        marked[nb as usize] = true;
                        report.cascade_splits += 1;
                        queue.push(nb);
                    }
                }
            }
        }

        // Split in deterministic order.
        let mut order: Vec<u32> = (0..self.leaves.len() as u32)
            .filter(|&i| marked[i as usize])
            .collect();
        order.sort_by_key(|&i| {
            let l = &self.leaves[i as usize];
            (l.level, l.origin)
        });
        for i in order {
            self.split_leaf(i);
        }
        self.compact_leaves();
        self.rebuild_constraints();
        self.max_level = self.leaves.iter().map(|l| l.level).max().unwrap_or(0);
        report.leaves_after = self.leaves.len();
        report.points_after = self.keys.len();
        report.max_level = self.max_level;
        report
    }

    /// Integer point location: returns the leaf whose half-open cell
    /// contains the lattice coordinate, if in range.
    fn locate_leaf_by_key(&self, key: [i64; 3]) -> Option<u32> {
        if key.iter().any(|&k| k < 0 || k >= KEY_RES as i64) {
            return None;
        }
        let key = [key[0] as u32, key[1] as u32, key[2] as u32];
        let mut node = self.root;
        let mut origin = [0u32; 3];
        let mut span = KEY_RES;
        while node & LEAF_BIT == 0 {
            span >>= 1;
            let mut child = 0usize;
            for k in 0..3 {
                if key[k] >= origin[k] + span {
                    child |= 1 << k;
                    origin[k] += span;
                }
            }
            node = self.nodes[node as usize][child];
        }
        Some(node & !LEAF_BIT)
    }

    fn split_leaf(&mut self, leaf_idx: u32) {
        let leaf = self.leaves[leaf_idx as usize].clone();
        debug_assert!(leaf.level < KEY_LEVEL);
        let half = leaf.span() / 2;
        let parent_vals: [f64; 8] = std::array::from_fn(|j| self.sdf[leaf.corners[j] as usize]);
        let parent_sh: [[f64; 27]; 8] =
            std::array::from_fn(|j| self.sh[leaf.corners[j] as usize]);

        // Intern the 27 lattice points of the refined cell; new points get
        // the parent interpolation so the field is unchanged.
        let mut ids = [[[0u32; 3]; 3]; 3];
        for (iz, plane) in ids.iter_mut().enumerate() {
            for (iy, row) in plane.iter_mut().enumerate() {
                for (ix, slot) in row.iter_mut().enumerate() {
                    let key = [
                        leaf.origin[0] + half * ix as u32,
                        leaf.origin[1] + half * iy as u32,
                        leaf.origin[2] + half * iz as u32,
                    ];
                    let existed = self.index.contains_key(&key);
                    let id = self.intern_point(key);
                    if !existed {
                        let f = Vector3::new(
                            ix as f64 * 0.5,
                            iy as f64 * 0.5,
                            iz as f64 * 0.5,
                        );
                        let w = trilinear_weights(&f);
                        let mut s = 0.0;
                        let mut sh = [0.0f64; 27];
                        for j in 0..8 {
                            s += w[j] * parent_vals[j];
                            for (o, v) in sh.iter_mut().zip(parent_sh[j].iter()) {
                                *o += w[j] * v;
                            }
                        }
                        self.sdf[id as usize] = s;
                        self.sh[id as usize] = sh;
                    }
                    *slot = id;
                }
            }
        }

        // New internal node with 8 child leaves.
        let mut children = [0u32; 8];
        for (j, child) in children.iter_mut().enumerate() {
            let (ox, oy, oz) = (j & 1, (j >> 1) & 1, (j >> 2) & 1);
            let mut corners = [0u32; 8];
            for (c, corner) in corners.iter_mut().enumerate() {
                let (cx, cy, cz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                *corner = ids[oz + cz][oy + cy][ox + cx];
            }
            self.leaves.push(Leaf {
                level: leaf.level + 1,
                origin: [
                    leaf.origin[0] + half * ox as u32,
                    leaf.origin[1] + half * oy as u32,
                    leaf.origin[2] + half * oz as u32,
                ],
                corners,
            });
            *child = (self.leaves.len() - 1) as u32 | LEAF_BIT;
        }
        self.nodes.push(children);
        let new_node = (self.nodes.len() - 1) as u32;

        // Patch the parent reference.
        let encoded = leaf_idx | LEAF_BIT;
        if self.root == encoded {
            self.root = new_node;
        } else {
            let (node, slot) = self.find_parent_slot(&leaf);
            self.nodes[node as usize][slot] = new_node;
        }
        // Tombstone: level 255 marks a dead leaf until compaction.
        self.leaves[leaf_idx as usize].level = u8::MAX;
    }

    fn find_parent_slot(&self, leaf: &Leaf) -> (u32, usize) {
        let mut node = self.root;
        let mut origin = [0u32; 3];
        let mut span = KEY_RES;
        loop {
            debug_assert!(node & LEAF_BIT == 0);
            span >>= 1;
            let mut child = 0usize;
            for k in 0..3 {
                if leaf.origin[k] >= origin[k] + span {
                    child |= 1 << k;
                    origin[k] += span;
                }
            }
            let next = self.nodes[node as usize][child];
            if next & LEAF_BIT != 0 {
                return (node, child);
            }
            node = next;
        }
    }

    fn compact_leaves(&mut self) {
        let mut remap = vec![u32::MAX; self.leaves.len()];
        let mut kept = Vec::with_capacity(self.leaves.len());
        for (i, leaf) in self.leaves.iter().enumerate() {
            if leaf.level != u8::MAX {
                remap[i] = kept.len() as u32;
                kept.push(leaf.clone());
            }
        }
        self.leaves = kept;
        for node in self.nodes.iter_mut() {
            for child in node.iter_mut() {
                if *child & LEAF_BIT != 0 {
                    let old = *child & !LEAF_BIT;
                    debug_assert!(remap[old as usize] != u32::MAX);
                    *child = remap[old as usize] | LEAF_BIT;
                }
            }
        }
        if self.root & LEAF_BIT != 0 {
            self.root = remap[(self.root & !LEAF_BIT) as usize] | LEAF_BIT;
        }
    }

    // ------------------------------------------------------------------
    // Hanging-corner constraints
    // ------------------------------------------------------------------

    /// Recompute which grid points hang on a coarse face/edge and flatten
    /// their master lists down to free points.
    fn rebuild_constraints(&mut self) {
        let mut raw: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        for leaf in &self.leaves {
            let span = leaf.span();
            if span < 2 {
                continue;
            }
            let half = span / 2;
            let o = leaf.origin;
            // 12 edge midpoints -> average of the 2 edge endpoints.
            const EDGES: [([u32; 3], [u32; 3]); 12] = [
                ([0, 0, 0], [1, 0, 0]),
                ([0, 1, 0], [1, 1, 0]),
                ([0, 0, 1], [1, 0, 1]),
                ([0, 1, 1], [1, 1, 1]),
                ([0, 0, 0], [0, 1, 0]),
                ([1, 0, 0], [1, 1, 0]),
                ([0, 0, 1], [0, 1, 1]),
                ([1, 0, 1], [1, 1, 1]),
                ([0, 0, 0], [0, 0, 1]),
                ([1, 0, 0], [1, 0, 1]),
                ([0, 1, 0], [0, 1, 1]),
                ([1, 1, 0], [1, 1, 1]),
            ];
            for (a, b) in EDGES {
                let ka = [o[0] + a[0] * span, o[1] + a[1] * span, o[2] + a[2] * span];
                let kb = [o[0] + b[0] * span, o[1] + b[1] * span, o[2] + b[2] * span];
                let mid = [
                    (ka[0] + kb[0]) / 2,
                    (ka[1] + kb[1]) / 2,
                    (ka[2] + kb[2]) / 2,
                ];
                if let Some(&id) = self.index.get(&mid) {
                    let ia = self.index[&ka];
                    let ib = self.index[&kb];
                    raw.insert(id, vec![(ia, 0.5), (ib, 0.5)]);
                }
            }
            // 6 face centers -> average of the 4 face corners.
            for axis in 0..3 {
                for side in 0..2u32 {
                    let mut center = [o[0] + half, o[1] + half, o[2] + half];
                    center[axis] = o[axis] + side * span;
                    if let Some(&id) = self.index.get(&center) {
                        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                        let mut masters = Vec::with_capacity(4);
                        for du in 0..2u32 {
                            for dv in 0..2u32 {
                                let mut k = o;
                                k[axis] += side * span;
                                k[u] += du * span;
                                k[v] += dv * span;
                                masters.push((self.index[&k], 0.25));
                            }
                        }
                        raw.insert(id, masters);
                    }
                }
            }
        }

        // Flatten chains (a master may itself hang on a coarser face).
        fn resolve(
            id: u32,
            raw: &HashMap<u32, Vec<(u32, f64)>>,
            memo: &mut HashMap<u32, Vec<(u32, f64)>>,
        ) -> Vec<(u32, f64)> {
            if let Some(v) = memo.get(&id) {
                return v.clone();
            }
            let out = match raw.get(&id) {
                None => vec![(id, 1.0)],
                Some(masters) => {
                    let mut acc: HashMap<u32, f64> = HashMap::new();
                    for &(m, w) in masters {
                        for (fm, fw) in resolve(m, raw, memo) {
                            *acc.entry(fm).or_insert(0.0) += w * fw;
                        }
                    }
                    let mut v: Vec<(u32, f64)> = acc.into_iter().collect();
                    v.sort_by_key(|&(m, _)| m);
                    v
                }
            };
            memo.insert(id, out.clone());
            out
        }

        let mut memo = HashMap::new();
        for h in self.hanging.iter_mut() {
            *h = None;
        }
        let mut ids: Vec<u32> = raw.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let flat = resolve(id, &raw, &mut memo);
            self.hanging[id as usize] = Some(flat.into_boxed_slice());
        }
        self.refresh_hanging();
    }

    /// Re-derive hanging values from their masters.
    pub(crate) fn refresh_hanging(&mut self) {
        for i in 0..self.hanging.len() {
            if let Some(masters) = self.hanging[i].take() {
                let mut s = 0.0;
                let mut sh = [0.0f64; 27];
                for &(m, w) in masters.iter() {
                    s += w * self.sdf[m as usize];
                    for (o, v) in sh.iter_mut().zip(self.sh[m as usize].iter()) {
                        *o += w * v;
                    }
                }
                self.sdf[i] = s;
                self.sh[i] = sh;
                self.hanging[i] = Some(masters);
            }
        }
    }

    // ------------------------------------------------------------------
    // Gradient scatter (used by renderer and regularizers)
    // ------------------------------------------------------------------

    /// Accumulate dL/d(sdf sample) and dL/d(rgb at sample) into the corner
    /// parameter accumulators, routing hanging corners to their masters.
    pub fn scatter_sample_grad(
        &mut self,
        leaf: u32,
        frac: &Vector3<f64>,
        d_sdf: f64,
        d_rgb: &[f64; 3],
        basis: &[f64; 9],
    ) {
        let w = trilinear_weights(frac);
        let corners = self.leaves[leaf as usize].corners;
        let has_sh = d_rgb.iter().any(|v| *v != 0.0);
        for j in 0..8 {
            let id = corners[j];
            if d_sdf != 0.0 {
                self.route_sdf_grad(id, w[j] * d_sdf);
            }
            if has_sh {
                self.route_sh_grad_outer(id, w[j], d_rgb, basis);
            }
        }
    }

    /// Accumulate dL/d(sdf sample) only.
    pub fn scatter_sdf_grad(&mut self, leaf: u32, frac: &Vector3<f64>, d_sdf: f64) {
        if d_sdf == 0.0 {
            return;
        }
        let w = trilinear_weights(frac);
        let corners = self.leaves[leaf as usize].corners;
        for j in 0..8 {
            self.route_sdf_grad(corners[j], w[j] * d_sdf);
        }
    }

    /// Accumulate a per-corner weighted sdf gradient (arbitrary weights,
    /// e.g. spatial-derivative weights).
    pub fn scatter_corner_sdf_grads(&mut self, leaf: u32, per_corner: &[f64; 8]) {
        let corners = self.leaves[leaf as usize].corners;
        for j in 0..8 {
            if per_corner[j] != 0.0 {
                self.route_sdf_grad(corners[j], per_corner[j]);
            }
        }
    }

    pub(crate) fn route_sdf_grad(&mut self, id: u32, g: f64) {
        match &self.hanging[id as usize] {
            None => {
                self.sdf_grad[id as usize] += g;
                self.touched[id as usize] = self.epoch;
            }
            Some(masters) => {
                let masters = masters.clone();
                for &(m, w) in masters.iter() {
                    self.sdf_grad[m as usize] += w * g;
                    self.touched[m as usize] = self.epoch;
                }
            }
        }
    }

    fn route_sh_grad_outer(&mut self, id: u32, w: f64, d_rgb: &[f64; 3], basis: &[f64; 9]) {
        match &self.hanging[id as usize] {
            None => {
                let g = &mut self.sh_grad[id as usize];
                for ch in 0..3 {
                    let c = w * d_rgb[ch];
                    if c == 0.0 {
                        continue;
                    }
                    for (k, b) in basis.iter().enumerate() {
                        g[ch * 9 + k] += c * b;
                    }
                }
                self.touched[id as usize] = self.epoch;
            }
            Some(masters) => {
                let masters = masters.clone();
                for &(m, mw) in masters.iter() {
                    self.route_sh_grad_outer(m, w * mw, d_rgb, basis);
                }
            }
        }
    }

    /// Accumulate dL/d(sh coefficients) directly at a grid point (TV term).
    pub fn route_sh_grad(&mut self, id: u32, g: &[f64; 27]) {
        match &self.hanging[id as usize] {
            None => {
                let acc = &mut self.sh_grad[id as usize];
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
                self.touched[id as usize] = self.epoch;
            }
            Some(masters) => {
                let masters = masters.clone();
                for &(m, w) in masters.iter() {
                    let mut scaled = [0.0f64; 27];
                    for (s, v) in scaled.iter_mut().zip(g.iter()) {
                        *s = w * v;
                    }
                    self.route_sh_grad(m, &scaled);
                }
            }
        }
    }

    pub fn add_beta_grad(&mut self, g: f64) {
        self.beta_grad += g;
    }

    /// Zero all gradient accumulators (diagnostic/test helper).
    pub fn zero_grads(&mut self) {
        for g in self.sdf_grad.iter_mut() {
            *g = 0.0;
        }
        for g in self.sh_grad.iter_mut() {
            *g = [0.0; 27];
        }
        self.beta_grad = 0.0;
    }
}

/// Deterministic per-leaf RNG for the subdivision sampling.
fn leaf_rng(seed: u64, leaf: &Leaf) -> rand_chacha::ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &v in &leaf.origin {
        h = h
            .wrapping_mul(0x100_0000_01b3)
            .wrapping_add(v as u64)
            .rotate_left(17);
    }
    h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(leaf.level as u64);
    rand_chacha::ChaCha8Rng::seed_from_u64(h)
}

/// Lattice probes just outside each face and edge of a cell, used for
/// coarse-neighbor discovery during balancing.
fn neighbor_probes(origin: [u32; 3], span: u32) -> Vec<[i64; 3]> {
    let o = [origin[0] as i64, origin[1] as i64, origin[2] as i64];
    let s = span as i64;
    let h = s / 2;
    let mut probes = Vec::with_capacity(18);
    // Face centers, one lattice step outside.
    for axis in 0..3 {
        for (off, along) in [(-1i64, -1i64), (1, s)] {
            let _ = off;
            let mut p = [o[0] + h, o[1] + h, o[2] + h];
            p[axis] = o[axis] + along;
            probes.push(p);
        }
    }
    // Edge centers, outside along both orthogonal axes.
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for du in [-1i64, s] {
            for dv in [-1i64, s] {
                let mut p = [0i64; 3];
                p[axis] = o[axis] + h;
                p[u] = o[u] + du;
                p[v] = o[v] + dv;
                probes.push(p);
            }
        }
    }
    probes
}

#[cfg(test)]
mod tests;

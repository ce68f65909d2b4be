//! Brownian grids and simulated trajectories.
//!
//! A [`BrownianGrid`] owns the increments DW of one driving path on a uniform
//! mesh. Grids are pure functions of (master seed, stream id), refinement is
//! Brownian-bridge conditional sampling keyed by (level, node), and every
//! integrator consumes increments read-only, which is what makes common-noise
//! coupling, restarts and mesh studies reproducible.

mod integrate;

pub use integrate::{
    integrate_flow, integrate_frozen_drift, integrate_hessian, integrate_tangent, restart_flow,
    stream_flow, Advance, FlowState, RestartPaths, StepWorkspace, DEFAULT_EXPLOSION_CAP,
};

use crate::rng::{substream, tag};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Brownian increments on a uniform mesh of [t0, t1].
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianGrid {
    pub t0: f64,
    pub t1: f64,
    /// Number of steps n; the grid has n+1 nodes.
    pub steps: usize,
    /// Step size (t1 - t0)/n.
    pub h: f64,
    /// Noise dimension r.
    pub r: usize,
    pub seed: u64,
    pub stream_id: u64,
    /// Refinement depth; part of the bridge substream key.
    pub level: u32,
    /// steps x r row-major increments.
    inc: Vec<f64>,
}

impl BrownianGrid {
    /// Sample a fresh grid. Deterministic in (seed, stream id): disjoint
    /// stream ids give independent paths.
    pub fn sample(seed: u64, stream_id: u64, t0: f64, t1: f64, steps: usize, r: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("mesh.steps", "grid needs at least one step"));
        }
        if !(t1 > t0) {
            return Err(Error::config("mesh", format!("empty time interval [{t0}, {t1}]")));
        }
        let h = (t1 - t0) / steps as f64;
        let sqrt_h = h.sqrt();
        let mut rng = substream(seed, &[tag::PATH, stream_id]);
        let mut inc = Vec::with_capacity(steps * r);
        for _ in 0..steps * r {
            let g: f64 = rng.sample(StandardNormal);
            inc.push(sqrt_h * g);
        }
        Ok(BrownianGrid { t0, t1, steps, h, r, seed, stream_id, level: 0, inc })
    }

    /// Increments of step k (the r noise components of W_{t_{k+1}} - W_{t_k}).
    #[inline]
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.inc[k * self.r..(k + 1) * self.r]
    }

    #[inline]
    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    /// W_{t_k} - W_{t0} for one noise component at every node (length n+1).
    pub fn cumulative(&self, component: usize) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.steps + 1);
        out.push(0.0);
        for k in 0..self.steps {
            acc += self.increment(k)[component];
            out.push(acc);
        }
        out
    }

    /// Conditionally sample a grid `factor` times finer. Sub-increments of
    /// each parent step follow the Brownian bridge given their sum, and the
    /// last one is computed by subtraction, so summing each refined group
    /// reproduces the parent increment exactly (bitwise up to fp addition).
    pub fn refine(&self, factor: usize) -> BrownianGrid {
        assert!(factor >= 2, "refinement factor must be at least 2");
        let steps = self.steps * factor;
        let h = self.h / factor as f64;
        let child_level = self.level + 1;
        let mut inc = vec![0.0; steps * self.r];
        for k in 0..self.steps {
            let mut rng =
                substream(self.seed, &[tag::BRIDGE, self.stream_id, child_level as u64, k as u64]);
            for l in 0..self.r {
                let mut remaining = self.increment(k)[l];
                for i in 0..factor {
                    let slot = (k * factor + i) * self.r + l;
                    let m = (factor - i) as f64;
                    if i + 1 == factor {
                        inc[slot] = remaining;
                    } else {
                        let g: f64 = rng.sample(StandardNormal);
                        let draw = remaining / m + (h * (1.0 - 1.0 / m)).sqrt() * g;
                        inc[slot] = draw;
                        remaining -= draw;
                    }
                }
            }
        }
        BrownianGrid {
            t0: self.t0,
            t1: self.t1,
            steps,
            h,
            r: self.r,
            seed: self.seed,
            stream_id: self.stream_id,
            level: child_level,
            inc,
        }
    }
}

/// Convenience constructor matching the common call shape.
pub fn sample_brownian(
    master_seed: u64,
    path_index: u64,
    t0: f64,
    t1: f64,
    steps: usize,
    r: usize,
) -> Result<BrownianGrid> {
    BrownianGrid::sample(master_seed, path_index, t0, t1, steps, r)
}

/// States of one flow trajectory on the grid nodes ((n+1) x d row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPath {
    pub t0: f64,
    pub h: f64,
    pub d: usize,
    states: Vec<f64>,
    /// First node index at which the explosion cap was exceeded, if any.
    pub exploded: Option<usize>,
}

impl FlowPath {
    pub fn with_capacity(t0: f64, h: f64, d: usize, nodes: usize) -> Self {
        FlowPath { t0, h, d, states: Vec::with_capacity(nodes * d), exploded: None }
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.d);
        self.states.extend_from_slice(x);
    }

    pub fn nodes(&self) -> usize {
        self.states.len() / self.d
    }

    #[inline]
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d..(k + 1) * self.d]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.nodes() - 1)
    }

    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.exploded.is_none() && self.states.iter().all(|x| x.is_finite())
    }
}

/// Tangent matrices grad X on the grid nodes ((n+1) x d x d row-major,
/// entry (i,j) = d X^j / d x_i).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPath {
    pub d: usize,
    mats: Vec<f64>,
}

impl TangentPath {
    pub fn with_capacity(d: usize, nodes: usize) -> Self {
        TangentPath { d, mats: Vec::with_capacity(nodes * d * d) }
    }

    pub(crate) fn push(&mut self, m: &[f64]) {
        debug_assert_eq!(m.len(), self.d * self.d);
        self.mats.extend_from_slice(m);
    }

    pub fn nodes(&self) -> usize {
        self.mats.len() / (self.d * self.d)
    }

    #[inline]
    pub fn matrix(&self, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.mats[k * dd..(k + 1) * dd]
    }

    pub fn last(&self) -> &[f64] {
        self.matrix(self.nodes() - 1)
    }
}

/// Hessian (2,1)-tensors grad^2 X on the grid nodes ((n+1) x d^3 row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct HessianPath {
    pub d: usize,
    data: Vec<f64>,
}

impl HessianPath {
    pub fn with_capacity(d: usize, nodes: usize) -> Self {
        HessianPath { d, data: Vec::with_capacity(nodes * d * d * d) }
    }

    pub(crate) fn push(&mut self, t: &[f64]) {
        debug_assert_eq!(t.len(), self.d * self.d * self.d);
        self.data.extend_from_slice(t);
    }

    pub fn nodes(&self) -> usize {
        self.data.len() / (self.d * self.d * self.d)
    }

    #[inline]
    pub fn tensor(&self, k: usize) -> &[f64] {
        let ddd = self.d * self.d * self.d;
        &self.data[k * ddd..(k + 1) * ddd]
    }

    pub fn last(&self) -> &[f64] {
        self.tensor(self.nodes() - 1)
    }
}

/// Dump a trajectory as CSV with columns (t, x_1..x_d) and, when a tangent is
/// given, the row-major matrix entries j_11..j_dd.
pub fn dump_csv<W: std::io::Write>(
    out: &mut W,
    flow: &FlowPath,
    tangent: Option<&TangentPath>,
) -> Result<()> {
    let d = flow.d;
    write!(out, "t")?;
    for i in 0..d {
        write!(out, ",x_{}", i + 1)?;
    }
    if tangent.is_some() {
        for i in 0..d {
            for j in 0..d {
                write!(out, ",j_{}{}", i + 1, j + 1)?;
            }
        }
    }
    writeln!(out)?;
    for k in 0..flow.nodes() {
        write!(out, "{}", flow.node_time(k))?;
        for v in flow.state(k) {
            write!(out, ",{v}")?;
        }
        if let Some(tg) = tangent {
            for v in tg.matrix(k) {
                write!(out, ",{v}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let a = BrownianGrid::sample(9, 3, 0.0, 1.0, 4, 2).unwrap();
        let b = BrownianGrid::sample(9, 3, 0.0, 1.0, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.increment(0).len(), 2);
        assert_eq!(a.h, 0.25);
        let c = BrownianGrid::sample(9, 4, 0.0, 1.0, 4, 2).unwrap();
        assert_ne!(a.inc, c.inc);
    }

    #[test]
    fn zero_steps_is_an_error() {
        assert!(BrownianGrid::sample(1, 0, 0.0, 1.0, 0, 1).is_err());
    }

    #[test]
    fn refinement_sums_back_to_parent_exactly() {
        let g = BrownianGrid::sample(7, 0, 0.0, 2.0, 8, 2).unwrap();
        for factor in [2usize, 3, 4] {
            let f = g.refine(factor);
            assert_eq!(f.steps, 8 * factor);
            for k in 0..g.steps {
                for l in 0..g.r {
                    let sum: f64 = (0..factor).map(|i| f.increment(k * factor + i)[l]).sum();
                    // The last sub-increment is defined by subtraction, so the
                    // group sums to the parent up to one fp rounding chain.
                    assert!((sum - g.increment(k)[l]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn refinement_is_deterministic() {
        let g = BrownianGrid::sample(7, 1, 0.0, 1.0, 4, 1).unwrap();
        assert_eq!(g.refine(2), g.refine(2));
        let twice = g.refine(2).refine(2);
        assert_eq!(twice.steps, 16);
        assert_eq!(twice.level, 2);
    }

    #[test]
    fn cumulative_ends_at_total() {
        let g = BrownianGrid::sample(11, 2, 0.5, 1.5, 16, 1).unwrap();
        let w = g.cumulative(0);
        assert_eq!(w.len(), 17);
        let total: f64 = (0..16).map(|k| g.increment(k)[0]).sum();
        assert!((w[16] - total).abs() < 1e-15);
    }
}

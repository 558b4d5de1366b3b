//! Control-affine robot dynamics and the stacked ensemble state.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

/// `x' = f(x) + g(x) u` for a single robot.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    fn input_matrix(&self, x: &[f64]) -> DMatrix<f64>;

    fn velocity(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let g = self.input_matrix(x);
        let mut v = self.drift(x);
        for (r, vr) in v.iter_mut().enumerate() {
            *vr += (0..u.len()).map(|c| g[(r, c)] * u[c]).sum::<f64>();
        }
        v
    }

    /// One explicit Euler step with the input matrix scaled by `mobility`.
    fn euler_step(&self, x: &[f64], u: &[f64], dt: f64, mobility: f64) -> Vec<f64> {
        let f = self.drift(x);
        let g = self.input_matrix(x);
        (0..x.len())
            .map(|r| {
                let gu: f64 = (0..u.len()).map(|c| g[(r, c)] * u[c]).sum();
                x[r] + (f[r] + mobility * gu) * dt
            })
            .collect()
    }
}

/// `x' = u` in `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingleIntegrator {
    pub dim: usize,
}

impl SingleIntegrator {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Dynamics for SingleIntegrator {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn input_matrix(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn velocity(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }

    fn euler_step(&self, x: &[f64], u: &[f64], dt: f64, mobility: f64) -> Vec<f64> {
        x.iter().zip(u).map(|(x, u)| x + mobility * u * dt).collect()
    }
}

/// States of all robots, stored robot-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    state_dim: usize,
    data: Vec<f64>,
}

impl Ensemble {
    pub fn new(state_dim: usize, data: Vec<f64>) -> Self {
        assert!(state_dim > 0 && data.len().is_multiple_of(state_dim), "ragged ensemble");
        Self { state_dim, data }
    }

    pub fn from_robots<S: AsRef<[f64]>>(robots: &[S]) -> Self {
        let state_dim = robots.first().map_or(1, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(state_dim * robots.len());
        for r in robots {
            assert_eq!(r.as_ref().len(), state_dim, "robots must share a state dimension");
            data.extend_from_slice(r.as_ref());
        }
        Self { state_dim, data }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn robot(&self, i: usize) -> &[f64] {
        &self.data[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn robot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        let r = self.robot(i);
        [r[0], r.get(1).copied().unwrap_or(0.0)]
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy with robot `i` replaced by `state`.
    pub fn with_robot(&self, i: usize, state: &[f64]) -> Self {
        let mut next = self.clone();
        next.robot_mut(i).copy_from_slice(state);
        next
    }
}

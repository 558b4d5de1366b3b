//! Feature, capability and task mappings.
//!
//! A team is described by three maps: which capabilities each task needs
//! (`requirements`, tasks x capabilities, integer robot counts), which
//! features each robot carries (`features`, features x robots, binary) and
//! which bundles of features realise each capability (one hypergraph per
//! capability). Everything else is derived: the robot-to-capability map and
//! the per-robot specialization diagonals.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

/// Absolute tolerance of [`kron_shift`].
pub const KRON_TOL: f64 = 1e-9;

/// Shifted Kronecker delta: 1 when `x` equals `n` (within [`KRON_TOL`]).
pub fn kron_shift(x: f64, n: i64) -> u8 {
    u8::from((x - n as f64).abs() <= KRON_TOL)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: {what} is {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("hyperedge weight must be finite and non-negative, got {0}")]
    InvalidWeight(f64),
    #[error("hyperedge {edge} of capability {capability} has no features")]
    EmptyHyperedge { capability: usize, edge: usize },
    #[error("hyperedge {edge} of capability {capability} lists feature {feature} twice")]
    DuplicateFeature {
        capability: usize,
        edge: usize,
        feature: usize,
    },
}

/// One bundle of features that jointly enables a capability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperedge {
    pub features: Vec<usize>,
    pub weight: f64,
}

impl Hyperedge {
    pub fn new(features: Vec<usize>, weight: f64) -> Self {
        Self { features, weight }
    }

    pub fn unit(features: Vec<usize>) -> Self {
        Self::new(features, 1.0)
    }
}

/// Diagonal of a robot's specialization matrix, one entry per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Specialization {
    diag: Vec<f64>,
}

impl Specialization {
    /// Entries are clamped into `[0, 1]`.
    pub fn new(diag: Vec<f64>) -> Self {
        Self {
            diag: diag.into_iter().map(|s| s.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn ones(n_tasks: usize) -> Self {
        Self::new(vec![1.0; n_tasks])
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.diag
    }

    pub fn get(&self, task: usize) -> f64 {
        self.diag[task]
    }

    pub fn set(&mut self, task: usize, value: f64) {
        self.diag[task] = value.clamp(0.0, 1.0);
    }

    /// Moore-Penrose pseudo-inverse of the diagonal.
    pub fn pseudo_inverse(&self) -> Vec<f64> {
        self.diag
            .iter()
            .map(|&s| if s == 0.0 { 0.0 } else { 1.0 / s })
            .collect()
    }

    /// Diagonal of `I - S S^+`: 1 exactly where the specialization is 0.
    pub fn projector(&self) -> Vec<f64> {
        self.diag
            .iter()
            .map(|&s| if s == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.diag.iter().all(|&s| s > 0.0)
    }

    /// Entrywise minimum, used so a model refresh never undoes decay.
    pub fn min_with(&self, other: &Specialization) -> Specialization {
        assert_eq!(self.len(), other.len());
        Specialization {
            diag: self
                .diag
                .iter()
                .zip(&other.diag)
                .map(|(a, b)| a.min(*b))
                .collect(),
        }
    }
}

/// Row-stochastic incidence matrix of a capability hypergraph.
pub fn incidence_matrix(edges: &[Hyperedge], n_features: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(edges.len(), n_features);
    for (e, edge) in edges.iter().enumerate() {
        let share = 1.0 / edge.features.len() as f64;
        for &f in &edge.features {
            h[(e, f)] = share;
        }
    }
    h
}

/// One row of the robot-to-capability map.
///
/// Entry `j` is the largest weight among hyperedges whose features robot `j`
/// owns entirely, or 0 when there is none.
pub fn compute_capability_row(
    incidence: &DMatrix<f64>,
    weights: &[f64],
    features: &DMatrix<bool>,
) -> Result<Vec<f64>, ModelError> {
    if incidence.ncols() != features.nrows() {
        return Err(ModelError::DimensionMismatch {
            what: "incidence columns",
            expected: features.nrows(),
            found: incidence.ncols(),
        });
    }
    if weights.len() != incidence.nrows() {
        return Err(ModelError::DimensionMismatch {
            what: "weight count",
            expected: incidence.nrows(),
            found: weights.len(),
        });
    }
    let n_r = features.ncols();
    let mut row = vec![0.0; n_r];
    for (j, out) in row.iter_mut().enumerate() {
        for (e, &w) in weights.iter().enumerate() {
            let covered: f64 = (0..incidence.ncols())
                .filter(|&f| features[(f, j)])
                .map(|f| incidence[(e, f)])
                .sum();
            if kron_shift(covered, 1) == 1 {
                *out = out.max(w);
            }
        }
    }
    Ok(row)
}

/// Checks that every task's robot set jointly covers its capability demand.
///
/// `assignment[t]` lists the robots working on task `t`.
pub fn check_feasible_assignment(
    capability_map: &DMatrix<f64>,
    requirements: &DMatrix<u32>,
    assignment: &[Vec<usize>],
) -> bool {
    assert_eq!(assignment.len(), requirements.nrows(), "one robot set per task");
    assignment.iter().enumerate().all(|(t, robots)| {
        (0..requirements.ncols()).all(|k| {
            let supply: f64 = robots.iter().map(|&i| capability_map[(k, i)]).sum();
            supply >= f64::from(requirements[(t, k)]) - KRON_TOL
        })
    })
}

/// Binary specialization of robot `i`: 1 for every task that needs at least
/// one capability the robot has.
pub fn compute_specialization(
    capability_map: &DMatrix<f64>,
    requirements: &DMatrix<u32>,
    robot: usize,
) -> Specialization {
    let diag = (0..requirements.nrows())
        .map(|t| {
            let overlap: f64 = (0..requirements.ncols())
                .map(|k| f64::from(requirements[(t, k)]) * capability_map[(k, robot)])
                .sum();
            f64::from(1 - kron_shift(overlap, 0))
        })
        .collect();
    Specialization { diag }
}

/// Immutable snapshot of the team model; mutations return a new version.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityModel {
    requirements: DMatrix<u32>,
    features: DMatrix<bool>,
    capabilities: Vec<Vec<Hyperedge>>,
    capability_map: DMatrix<f64>,
    specializations: Vec<Specialization>,
    version: u64,
}

impl HeterogeneityModel {
    pub fn new(
        requirements: DMatrix<u32>,
        features: DMatrix<bool>,
        capabilities: Vec<Vec<Hyperedge>>,
    ) -> Result<Self, ModelError> {
        if requirements.ncols() != capabilities.len() {
            return Err(ModelError::DimensionMismatch {
                what: "capability count",
                expected: requirements.ncols(),
                found: capabilities.len(),
            });
        }
        let n_f = features.nrows();
        for (k, edges) in capabilities.iter().enumerate() {
            for (e, edge) in edges.iter().enumerate() {
                if edge.features.is_empty() {
                    return Err(ModelError::EmptyHyperedge { capability: k, edge: e });
                }
                if !(edge.weight.is_finite() && edge.weight >= 0.0) {
                    return Err(ModelError::InvalidWeight(edge.weight));
                }
                for (pos, &f) in edge.features.iter().enumerate() {
                    if f >= n_f {
                        return Err(ModelError::IndexOutOfRange {
                            what: "feature",
                            index: f,
                            limit: n_f,
                        });
                    }
                    if edge.features[..pos].contains(&f) {
                        return Err(ModelError::DuplicateFeature {
                            capability: k,
                            edge: e,
                            feature: f,
                        });
                    }
                }
            }
        }
        let mut model = Self {
            requirements,
            features,
            capabilities,
            capability_map: DMatrix::zeros(0, 0),
            specializations: Vec::new(),
            version: 0,
        };
        model.refresh()?;
        Ok(model)
    }

    fn refresh(&mut self) -> Result<(), ModelError> {
        let n_c = self.capabilities.len();
        let n_r = self.n_robots();
        let mut f = DMatrix::zeros(n_c, n_r);
        for k in 0..n_c {
            let row = compute_capability_row(&self.incidence(k), &self.weights(k), &self.features)?;
            for (j, v) in row.into_iter().enumerate() {
                f[(k, j)] = v;
            }
        }
        self.specializations = (0..n_r)
            .map(|i| compute_specialization(&f, &self.requirements, i))
            .collect();
        self.capability_map = f;
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.requirements.nrows()
    }

    pub fn n_capabilities(&self) -> usize {
        self.capabilities.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_robots(&self) -> usize {
        self.features.ncols()
    }

    pub fn requirements(&self) -> &DMatrix<u32> {
        &self.requirements
    }

    pub fn features(&self) -> &DMatrix<bool> {
        &self.features
    }

    pub fn hyperedges(&self, capability: usize) -> &[Hyperedge] {
        &self.capabilities[capability]
    }

    pub fn incidence(&self, capability: usize) -> DMatrix<f64> {
        incidence_matrix(&self.capabilities[capability], self.n_features())
    }

    pub fn weights(&self, capability: usize) -> Vec<f64> {
        self.capabilities[capability].iter().map(|e| e.weight).collect()
    }

    pub fn capability_map(&self) -> &DMatrix<f64> {
        &self.capability_map
    }

    pub fn specialization(&self, robot: usize) -> &Specialization {
        &self.specializations[robot]
    }

    pub fn specializations(&self) -> &[Specialization] {
        &self.specializations
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Removes feature `feature` from robot `robot`.
    ///
    /// Removing a feature the robot does not have is a no-op (logged).
    pub fn apply_feature_failure(&self, robot: usize, feature: usize) -> Result<Self, ModelError> {
        self.check_index("robot", robot, self.n_robots())?;
        self.check_index("feature", feature, self.n_features())?;
        if !self.features[(feature, robot)] {
            log::warn!("robot {robot} does not have feature {feature}; nothing to remove");
            return Ok(self.clone());
        }
        let mut next = self.clone();
        next.features[(feature, robot)] = false;
        next.version += 1;
        next.refresh()?;
        Ok(next)
    }

    pub fn set_hyperedge_weight(&self, capability: usize, edge: usize, weight: f64) -> Result<Self, ModelError> {
        self.check_index("capability", capability, self.n_capabilities())?;
        self.check_index("hyperedge", edge, self.capabilities[capability].len())?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(ModelError::InvalidWeight(weight));
        }
        let mut next = self.clone();
        next.capabilities[capability][edge].weight = weight;
        next.version += 1;
        next.refresh()?;
        Ok(next)
    }

    fn check_index(&self, what: &'static str, index: usize, limit: usize) -> Result<(), ModelError> {
        if index < limit {
            Ok(())
        } else {
            Err(ModelError::IndexOutOfRange { what, index, limit })
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Six features, three capabilities, four robots, two tasks.
    pub fn four_robot_model() -> HeterogeneityModel {
        let t = DMatrix::from_row_slice(2, 3, &[1, 1, 0, 0, 0, 1]);
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(6, 4, &[
            true, false, false, false,
            true, true, false, false,
            true, true, false, false,
            false, true, true, true,
            false, false, true, true,
            false, false, false, true,
        ]);
        let caps = vec![
            vec![Hyperedge::unit(vec![0, 1]), Hyperedge::unit(vec![2])],
            vec![Hyperedge::unit(vec![2]), Hyperedge::unit(vec![3])],
            vec![Hyperedge::unit(vec![3, 4, 5])],
        ];
        HeterogeneityModel::new(t, a, caps).unwrap()
    }

    /// Wheels, propellers, camera; mobility and monitoring; five robots.
    pub fn escort_model() -> HeterogeneityModel {
        let t = DMatrix::from_row_slice(2, 2, &[1, 0, 3, 3]);
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 5, &[
            true, true, true, true, false,
            false, false, false, false, true,
            true, true, true, true, true,
        ]);
        let caps = vec![
            vec![Hyperedge::unit(vec![0]), Hyperedge::unit(vec![1])],
            vec![Hyperedge::unit(vec![2])],
        ];
        HeterogeneityModel::new(t, a, caps).unwrap()
    }
}

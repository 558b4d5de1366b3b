//! Grid-quadrature Voronoi centroids over a rectangle.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

/// Axis-aligned rectangle sampled on a uniform grid of cell centres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageDomain {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub cells: [usize; 2],
}

impl Default for CoverageDomain {
    fn default() -> Self {
        Self {
            min: [-1.8, -1.2],
            max: [1.8, 1.2],
            cells: [120, 80],
        }
    }
}

impl CoverageDomain {
    pub fn is_valid(&self) -> bool {
        self.max[0] > self.min[0] && self.max[1] > self.min[1] && self.cells[0] > 0 && self.cells[1] > 0
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    /// Same rectangle, `factor` times finer in each direction.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            cells: [self.cells[0] * factor, self.cells[1] * factor],
            ..*self
        }
    }

    fn cell_size(&self) -> [f64; 2] {
        [
            (self.max[0] - self.min[0]) / self.cells[0] as f64,
            (self.max[1] - self.min[1]) / self.cells[1] as f64,
        ]
    }

    /// Cell centres in row-major order (x fastest).
    pub fn samples(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        let [dx, dy] = self.cell_size();
        (0..self.cells[1]).flat_map(move |iy| {
            (0..self.cells[0]).map(move |ix| {
                [
                    self.min[0] + (ix as f64 + 0.5) * dx,
                    self.min[1] + (iy as f64 + 0.5) * dy,
                ]
            })
        })
    }

    pub fn len(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Density value and its time derivative sampled on every grid cell.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub value: Vec<f64>,
    pub rate: Vec<f64>,
}

impl DensityGrid {
    pub fn sample(domain: &CoverageDomain, density: impl Fn([f64; 2]) -> (f64, f64)) -> Self {
        let (value, rate) = domain.samples().map(density).unzip();
        Self { value, rate }
    }

    pub fn uniform(domain: &CoverageDomain) -> Self {
        Self {
            value: vec![1.0; domain.len()],
            rate: vec![0.0; domain.len()],
        }
    }
}

/// Weighted centroid of one cell and its time derivative for a fixed partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub point: [f64; 2],
    pub rate: [f64; 2],
}

/// Spreads exactly coincident generators apart by a deterministic 1e-6 nudge.
pub fn separate_generators(positions: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = positions.to_vec();
    for i in 1..out.len() {
        let mut bumps = 0;
        while out[..i].iter().any(|p| *p == out[i]) {
            bumps += 1;
            let angle = i as f64 + bumps as f64;
            out[i][0] += 1e-6 * angle.cos();
            out[i][1] += 1e-6 * angle.sin();
        }
        if bumps > 0 {
            log::warn!("generator {i} coincides with another; nudged by 1e-6");
        }
    }
    out
}

/// Cells holding less than this share of the total density count as empty.
pub const MASS_FLOOR: f64 = 1e-12;

/// Centroids of every Voronoi cell of `generators`.
///
/// Membership is decided per grid sample by the nearest generator, lowest
/// index on ties. A cell whose density mass is below [`MASS_FLOOR`] of the
/// total falls back to its unweighted centroid; a cell that holds no sample
/// at all falls back to its generator.
pub fn centroids_on_grid(generators: &[[f64; 2]], domain: &CoverageDomain, grid: &DensityGrid) -> Vec<Centroid> {
    let n = generators.len();
    if n == 0 {
        return Vec::new();
    }
    let gens = separate_generators(generators);
    let mut mass = vec![0.0; n];
    let mut first = vec![[0.0; 2]; n];
    let mut mass_rate = vec![0.0; n];
    let mut first_rate = vec![[0.0; 2]; n];
    let mut count = vec![0usize; n];
    let mut plain = vec![[0.0; 2]; n];
    for (c, q) in domain.samples().enumerate() {
        let mut owner = 0;
        let mut best = f64::INFINITY;
        for (j, g) in gens.iter().enumerate() {
            let d = (q[0] - g[0]).powi(2) + (q[1] - g[1]).powi(2);
            if d < best {
                best = d;
                owner = j;
            }
        }
        let (phi, phi_t) = (grid.value[c], grid.rate[c]);
        mass[owner] += phi;
        mass_rate[owner] += phi_t;
        count[owner] += 1;
        for a in 0..2 {
            first[owner][a] += phi * q[a];
            first_rate[owner][a] += phi_t * q[a];
            plain[owner][a] += q[a];
        }
    }
    // A cell far from the density's support holds only underflowed values;
    // its weighted centroid would be roundoff.
    let floor = MASS_FLOOR * mass.iter().sum::<f64>();
    (0..n)
        .map(|j| {
            if mass[j] > floor && mass[j] > 0.0 {
                let m = mass[j];
                let point = [first[j][0] / m, first[j][1] / m];
                let rate = [
                    (first_rate[j][0] - point[0] * mass_rate[j]) / m,
                    (first_rate[j][1] - point[1] * mass_rate[j]) / m,
                ];
                Centroid { point, rate }
            } else if count[j] > 0 {
                log::warn!("Voronoi cell {j} carries no density mass; using its unweighted centroid");
                let k = count[j] as f64;
                Centroid {
                    point: [plain[j][0] / k, plain[j][1] / k],
                    rate: [0.0; 2],
                }
            } else {
                Centroid {
                    point: gens[j],
                    rate: [0.0; 2],
                }
            }
        })
        .collect()
}

/// Weighted centroid of generator `i`'s cell under `density`.
pub fn voronoi_centroid(
    positions: &[[f64; 2]],
    i: usize,
    domain: &CoverageDomain,
    density: impl Fn([f64; 2]) -> f64,
) -> [f64; 2] {
    let grid = DensityGrid::sample(domain, |q| (density(q), 0.0));
    centroids_on_grid(positions, domain, &grid)[i].point
}

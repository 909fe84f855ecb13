//! Truncated Fourier representation of maps from the torus `T^n` (period 1
//! per axis) to `R^m`.
//!
//! Coefficients are stored on the full mode box `|k|_inf <= K`. Real-valued
//! functions keep the conjugate symmetry `c(-k) = conj(c(k))`; all
//! constructors that start from real samples preserve it. Derivatives carry
//! the `2*pi` factor matching the unit period.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{KamError, Result};

const TAU: f64 = std::f64::consts::TAU;

/// Uniform collocation grid on `T^n`, `N` nodes per axis at `theta_j = j/N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollocationGrid {
    pub axes: usize,
    pub nodes_per_axis: usize,
}

impl CollocationGrid {
    pub fn new(axes: usize, nodes_per_axis: usize) -> Self {
        assert!(axes >= 1 && nodes_per_axis >= 2);
        Self {
            axes,
            nodes_per_axis,
        }
    }

    /// Smallest grid meeting the `N >= 2K+2` aliasing margin.
    pub fn for_order(axes: usize, order: usize) -> Self {
        Self::new(axes, 2 * order + 2)
    }

    /// De-aliasing grid for quadratic nonlinearities (`N >= 3K`).
    pub fn oversampled(axes: usize, order: usize) -> Self {
        Self::new(axes, (3 * order).max(2 * order + 2))
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_axis.pow(self.axes as u32)
    }

    /// Node coordinates for a flat index in row-major order.
    pub fn node(&self, mut flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes];
        for axis in (0..self.axes).rev() {
            let j = flat % self.nodes_per_axis;
            flat /= self.nodes_per_axis;
            out[axis] = j as f64 / self.nodes_per_axis as f64;
        }
        out
    }
}

/// Trigonometric polynomial `T^n -> R^m` with modes `|k|_inf <= order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusFun {
    pub dim_domain: usize,
    pub dim_range: usize,
    pub order: usize,
    /// Row-major over the mode box, `dim_range` entries per mode.
    coeffs: Vec<Complex64>,
}

/// Iterate over all multi-indices in `{0..size}^dims` in row-major order.
fn for_each_multi(dims: usize, size: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; dims];
    loop {
        f(&idx);
        let mut axis = dims;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < size {
                break;
            }
            idx[axis] = 0;
        }
    }
}

impl TorusFun {
    pub fn zero(dim_domain: usize, dim_range: usize, order: usize) -> Self {
        assert!(dim_domain >= 1 && dim_range >= 1);
        let modes = (2 * order + 1).pow(dim_domain as u32);
        Self {
            dim_domain,
            dim_range,
            order,
            coeffs: vec![Complex64::new(0.0, 0.0); modes * dim_range],
        }
    }

    /// Constant function with the given range values (order 0).
    pub fn constant(dim_domain: usize, values: &[f64]) -> Self {
        let mut f = Self::zero(dim_domain, values.len(), 0);
        for (c, &v) in f.coeffs.iter_mut().zip(values) {
            *c = Complex64::new(v, 0.0);
        }
        f
    }

    fn modes_per_axis(&self) -> usize {
        2 * self.order + 1
    }

    fn flat_mode(&self, k: &[i64]) -> usize {
        debug_assert_eq!(k.len(), self.dim_domain);
        let span = self.modes_per_axis();
        let mut flat = 0usize;
        for &ki in k {
            debug_assert!(ki.unsigned_abs() as usize <= self.order);
            flat = flat * span + (ki + self.order as i64) as usize;
        }
        flat
    }

    pub fn coeff(&self, k: &[i64]) -> &[Complex64] {
        let flat = self.flat_mode(k);
        &self.coeffs[flat * self.dim_range..(flat + 1) * self.dim_range]
    }

    pub fn coeff_mut(&mut self, k: &[i64]) -> &mut [Complex64] {
        let flat = self.flat_mode(k);
        let m = self.dim_range;
        &mut self.coeffs[flat * m..(flat + 1) * m]
    }

    /// Visit every stored mode as `(k, coefficient vector)`.
    pub fn for_each_mode(&self, mut f: impl FnMut(&[i64], &[Complex64])) {
        let order = self.order as i64;
        let m = self.dim_range;
        let mut flat = 0usize;
        for_each_multi(self.dim_domain, self.modes_per_axis(), |idx| {
            let k: Vec<i64> = idx.iter().map(|&i| i as i64 - order).collect();
            f(&k, &self.coeffs[flat * m..(flat + 1) * m]);
            flat += 1;
        });
    }

    /// Largest defect of the conjugate symmetry `c(-k) = conj(c(k))`.
    pub fn conjugate_symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        self.for_each_mode(|k, c| {
            let neg: Vec<i64> = k.iter().map(|&ki| -ki).collect();
            let cn = self.coeff(&neg);
            for (a, b) in c.iter().zip(cn) {
                worst = worst.max((a - b.conj()).norm());
            }
        });
        worst
    }

    /// Complex evaluation at an arbitrary point of `T^n`.
    pub fn eval_complex(&self, theta: &[f64]) -> Vec<Complex64> {
        assert_eq!(theta.len(), self.dim_domain);
        let mut out = vec![Complex64::new(0.0, 0.0); self.dim_range];
        self.for_each_mode(|k, c| {
            let phase: f64 = k
                .iter()
                .zip(theta)
                .map(|(&ki, &ti)| ki as f64 * ti)
                .sum::<f64>()
                * TAU;
            let e = Complex64::from_polar(1.0, phase);
            for (o, &ci) in out.iter_mut().zip(c) {
                *o += ci * e;
            }
        });
        out
    }

    /// Real evaluation; the imaginary residue of a symmetric coefficient
    /// table is below 1e-12 and is dropped.
    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        self.eval_complex(theta).iter().map(|c| c.re).collect()
    }

    /// Sample on a collocation grid; `N >= 2K+1` or the samples alias.
    /// Output is row-major over nodes, `dim_range` values per node.
    pub fn synthesize(&self, grid: &CollocationGrid) -> Result<Vec<f64>> {
        if grid.axes != self.dim_domain {
            return Err(KamError::DimensionMismatch(format!(
                "grid has {} axes, function domain is {}",
                grid.axes, self.dim_domain
            )));
        }
        if grid.nodes_per_axis < 2 * self.order + 1 {
            return Err(KamError::Aliasing {
                nodes: grid.nodes_per_axis,
                order: self.order,
                needed: 2 * self.order + 1,
            });
        }
        let mut out = Vec::with_capacity(grid.total_nodes() * self.dim_range);
        // Separable phase tables per axis keep this O(nodes * modes).
        let n_axis = grid.nodes_per_axis;
        let span = self.modes_per_axis();
        let mut phase = vec![Complex64::new(0.0, 0.0); n_axis * span];
        for j in 0..n_axis {
            for s in 0..span {
                let k = s as i64 - self.order as i64;
                phase[j * span + s] =
                    Complex64::from_polar(1.0, TAU * k as f64 * j as f64 / n_axis as f64);
            }
        }
        let m = self.dim_range;
        for_each_multi(grid.axes, n_axis, |node_idx| {
            let mut acc = vec![Complex64::new(0.0, 0.0); m];
            let mut flat = 0usize;
            for_each_multi(self.dim_domain, span, |mode_idx| {
                let mut e = Complex64::new(1.0, 0.0);
                for (axis, &s) in mode_idx.iter().enumerate() {
                    e *= phase[node_idx[axis] * span + s];
                }
                for (a, &c) in acc.iter_mut().zip(&self.coeffs[flat * m..(flat + 1) * m]) {
                    *a += c * e;
                }
                flat += 1;
            });
            out.extend(acc.iter().map(|c| c.re));
        });
        Ok(out)
    }

    /// Project real grid samples onto the mode box `|k|_inf <= order`.
    /// Exact for trigonometric polynomials of order `<= N - 1 - order`.
    pub fn analyze(
        grid: &CollocationGrid,
        samples: &[f64],
        dim_range: usize,
        order: usize,
    ) -> Result<Self> {
        if samples.len() != grid.total_nodes() * dim_range {
            return Err(KamError::DimensionMismatch(format!(
                "expected {} samples, got {}",
                grid.total_nodes() * dim_range,
                samples.len()
            )));
        }
        if grid.nodes_per_axis < 2 * order + 1 {
            return Err(KamError::Aliasing {
                nodes: grid.nodes_per_axis,
                order,
                needed: 2 * order + 1,
            });
        }
        let mut f = Self::zero(grid.axes, dim_range, order);
        let n_axis = grid.nodes_per_axis;
        let span = 2 * order + 1;
        let mut phase = vec![Complex64::new(0.0, 0.0); n_axis * span];
        for j in 0..n_axis {
            for s in 0..span {
                let k = s as i64 - order as i64;
                phase[j * span + s] =
                    Complex64::from_polar(1.0, -TAU * k as f64 * j as f64 / n_axis as f64);
            }
        }
        let norm = 1.0 / grid.total_nodes() as f64;
        let m = dim_range;
        let mut flat = 0usize;
        let coeffs = &mut f.coeffs;
        for_each_multi(grid.axes, span, |mode_idx| {
            let mut acc = vec![Complex64::new(0.0, 0.0); m];
            let mut node_flat = 0usize;
            for_each_multi(grid.axes, n_axis, |node_idx| {
                let mut e = Complex64::new(1.0, 0.0);
                for (axis, &j) in node_idx.iter().enumerate() {
                    e *= phase[j * span + mode_idx[axis]];
                }
                for (a, &s) in acc
                    .iter_mut()
                    .zip(&samples[node_flat * m..(node_flat + 1) * m])
                {
                    *a += e * s;
                }
                node_flat += 1;
            });
            for (c, a) in coeffs[flat * m..(flat + 1) * m].iter_mut().zip(acc) {
                *c = a * norm;
            }
            flat += 1;
        });
        Ok(f)
    }

    /// Build from a closed-form map by sampling on the minimal grid.
    pub fn from_fn(
        dim_domain: usize,
        dim_range: usize,
        order: usize,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Self {
        let grid = CollocationGrid::for_order(dim_domain, order);
        let mut samples = Vec::with_capacity(grid.total_nodes() * dim_range);
        for flat in 0..grid.total_nodes() {
            let theta = grid.node(flat);
            let v = f(&theta);
            assert_eq!(v.len(), dim_range);
            samples.extend(v);
        }
        Self::analyze(&grid, &samples, dim_range, order).expect("minimal grid is large enough")
    }

    /// Spectral partial derivative along one torus axis.
    pub fn differentiate(&self, axis: usize) -> Result<Self> {
        if axis >= self.dim_domain {
            return Err(KamError::InvalidArgument(format!(
                "axis {} out of range for domain dimension {}",
                axis, self.dim_domain
            )));
        }
        let mut out = self.clone();
        let order = self.order as i64;
        let span = self.modes_per_axis();
        let m = self.dim_range;
        let mut flat = 0usize;
        for_each_multi(self.dim_domain, span, |mode_idx| {
            let k_axis = mode_idx[axis] as i64 - order;
            let factor = Complex64::new(0.0, TAU * k_axis as f64);
            for c in out.coeffs[flat * m..(flat + 1) * m].iter_mut() {
                *c *= factor;
            }
            flat += 1;
        });
        Ok(out)
    }

    /// Mixed partial `d^alpha` for a multi-index over the torus axes.
    pub fn derivative_multi(&self, alpha: &[u32]) -> Self {
        assert_eq!(alpha.len(), self.dim_domain);
        let mut out = self.clone();
        for (axis, &count) in alpha.iter().enumerate() {
            for _ in 0..count {
                out = out.differentiate(axis).expect("axis checked");
            }
        }
        out
    }

    /// Copy onto a (possibly smaller or larger) mode box.
    pub fn with_order(&self, order: usize) -> Self {
        let mut out = Self::zero(self.dim_domain, self.dim_range, order);
        let keep = self.order.min(order) as i64;
        let mut k = vec![-keep; self.dim_domain];
        loop {
            out.coeff_mut(&k).copy_from_slice(self.coeff(&k));
            let mut axis = self.dim_domain;
            let mut done = true;
            while axis > 0 {
                axis -= 1;
                k[axis] += 1;
                if k[axis] <= keep {
                    done = false;
                    break;
                }
                k[axis] = -keep;
            }
            if done {
                break;
            }
        }
        out
    }

    /// Shift-composition `theta -> f(theta + u(theta))`, computed
    /// pseudo-spectrally on an oversampled grid and truncated back.
    pub fn compose_shift(&self, u: &TorusFun) -> Result<Self> {
        if u.dim_domain != self.dim_domain || u.dim_range != self.dim_domain {
            return Err(KamError::DimensionMismatch(format!(
                "shift must map T^{n} -> R^{n}; got T^{} -> R^{}",
                u.dim_domain,
                u.dim_range,
                n = self.dim_domain
            )));
        }
        let order = self.order.max(u.order);
        let grid = CollocationGrid::oversampled(self.dim_domain, order);
        // Chart bound: the shift must stay well inside one period.
        let u_samples = u.synthesize(&grid)?;
        let amplitude = u_samples.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if amplitude >= 0.5 {
            return Err(KamError::ShiftTooLarge { amplitude });
        }
        let m = self.dim_range;
        let n = self.dim_domain;
        let mut samples = Vec::with_capacity(grid.total_nodes() * m);
        for flat in 0..grid.total_nodes() {
            let theta = grid.node(flat);
            let shifted: Vec<f64> = theta
                .iter()
                .zip(&u_samples[flat * n..(flat + 1) * n])
                .map(|(&t, &du)| t + du)
                .collect();
            samples.extend(self.eval(&shifted));
        }
        Self::analyze(&grid, &samples, m, self.order)
    }

    /// Pointwise product with a scalar-valued factor, truncated to
    /// `self.order`, de-aliased by sampling beyond the combined bandwidth.
    pub fn mul_scalar_fun(&self, scalar: &TorusFun) -> Result<Self> {
        if scalar.dim_range != 1 || scalar.dim_domain != self.dim_domain {
            return Err(KamError::DimensionMismatch(
                "factor must be scalar on the same torus".into(),
            ));
        }
        let n_needed = self.order + scalar.order + self.order + 2;
        let grid = CollocationGrid::new(self.dim_domain, n_needed);
        let a = self.synthesize(&grid)?;
        let s = scalar.synthesize(&grid)?;
        let m = self.dim_range;
        let samples: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i / m])
            .collect();
        Self::analyze(&grid, &samples, m, self.order)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for c in out.coeffs.iter_mut() {
            *c *= factor;
        }
        out
    }

    pub fn add(&self, other: &TorusFun) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &TorusFun) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &TorusFun,
        op: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Self> {
        if self.dim_domain != other.dim_domain || self.dim_range != other.dim_range {
            return Err(KamError::DimensionMismatch(
                "mismatched shapes in coefficient-wise operation".into(),
            ));
        }
        let order = self.order.max(other.order);
        let a = self.with_order(order);
        let b = other.with_order(order);
        let mut out = a.clone();
        for (c, (&x, &y)) in out.coeffs.iter_mut().zip(a.coeffs.iter().zip(&b.coeffs)) {
            *c = op(x, y);
        }
        Ok(out)
    }

    /// Sup-norm surrogate: max of `|f|` over the grid, all components.
    pub fn sup_norm(&self, grid: &CollocationGrid) -> f64 {
        let samples = self
            .synthesize(grid)
            .expect("sup_norm grid must resolve the function");
        samples.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
    }

    /// Computable lower-bound surrogate for the Holder norm `|f|_{C^sigma}`.
    ///
    /// Takes the max over the grid of all spectral derivatives of order up
    /// to `floor(sigma)` and, for fractional `sigma`, adds the largest
    /// Holder quotient of the top-order derivatives over grid pairs at
    /// dyadic separations. Monotone nondecreasing under grid refinement.
    pub fn holder_surrogate(&self, sigma: f64, grid: &CollocationGrid) -> f64 {
        assert!(sigma >= 0.0);
        let k = sigma.floor() as u32;
        let mu = sigma - k as f64;
        let mut value: f64 = 0.0;
        let mut top_samples: Vec<Vec<f64>> = Vec::new();
        let mut alpha = vec![0u32; self.dim_domain];
        loop {
            let total: u32 = alpha.iter().sum();
            if total <= k {
                let d = self.derivative_multi(&alpha);
                let samples = d.synthesize(grid).expect("grid resolves derivative");
                value = value.max(samples.iter().fold(0.0f64, |a, &x| a.max(x.abs())));
                if mu > 0.0 && total == k {
                    top_samples.push(samples);
                }
            }
            // next multi-index with entries <= k
            let mut axis = self.dim_domain;
            let mut done = true;
            while axis > 0 {
                axis -= 1;
                alpha[axis] += 1;
                if alpha[axis] <= k {
                    done = false;
                    break;
                }
                alpha[axis] = 0;
            }
            if done {
                break;
            }
        }
        if mu > 0.0 {
            value += self.holder_quotient(&top_samples, mu, grid);
        }
        value
    }

    /// Max Holder quotient over grid pairs separated by dyadic multiples of
    /// the spacing along a single axis.
    fn holder_quotient(&self, sample_sets: &[Vec<f64>], mu: f64, grid: &CollocationGrid) -> f64 {
        let n_axis = grid.nodes_per_axis;
        let m = self.dim_range;
        let mut quotient: f64 = 0.0;
        for samples in sample_sets {
            for axis in 0..grid.axes {
                let mut step = 1usize;
                while step <= n_axis / 2 {
                    let h = step as f64 / n_axis as f64;
                    let weight = 1.0 / h.powf(mu);
                    for flat in 0..grid.total_nodes() {
                        let neighbor = offset_node(flat, axis, step, grid);
                        for c in 0..m {
                            let d = (samples[flat * m + c] - samples[neighbor * m + c]).abs();
                            quotient = quotient.max(d * weight);
                        }
                    }
                    step *= 2;
                }
            }
        }
        quotient
    }
}

/// Flat index of the grid node shifted by `step` along `axis` (wrapping).
fn offset_node(flat: usize, axis: usize, step: usize, grid: &CollocationGrid) -> usize {
    let n = grid.nodes_per_axis;
    let stride = n.pow((grid.axes - 1 - axis) as u32);
    let coord = (flat / stride) % n;
    let shifted = (coord + step) % n;
    (flat as isize + (shifted as isize - coord as isize) * stride as isize) as usize
}

//! Spectral mixture covariance functions.
//!
//! Two mixture families are supported. The Student-t mixture (StM) kernel is a
//! weighted sum of Matern-5/2 factors modulated by cosines,
//! `k(z) = sum_q w_q * matern52(z, rho_q) * cos(2 pi mu_q z)`, and the
//! Gaussian mixture (GM) kernel uses `exp(-rho_q^2 z^2)` factors instead. Both
//! arise as inverse Fourier transforms of symmetric mixture spectral
//! densities. Plain SE and Matern-5/2 kernels are the single-component,
//! zero-frequency special cases used as baselines.
//!
//! Weights and length-scales are stored in the log domain: optimizing `log w`
//! with a flat prior is equivalent to a Jeffreys prior on `w`, which is what
//! drives excess components toward zero weight.
//!
//! Displacement derivatives are provided in closed form up to second order
//! (the Matern smoothness is fixed at 5/2, so the kernel is exactly C^2 and no
//! Bessel functions are needed). Third order is a hard error.

use crate::error::{GphmError, Result};
use crate::quad;
use ndarray::Array2;
use std::f64::consts::PI;
use std::rc::Rc;

/// Covariance family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Student-t mixture: Matern-5/2 factors with cosine modulation.
    StM,
    /// Gaussian mixture: squared-exponential factors with cosine modulation.
    GM,
    /// Single squared-exponential component, `w * exp(-z^2 / rho^2)`.
    SE,
    /// Single Matern-5/2 component.
    Matern52,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::StM => "stm",
            KernelKind::GM => "gm",
            KernelKind::SE => "se",
            KernelKind::Matern52 => "matern52",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stm" => Ok(KernelKind::StM),
            "gm" => Ok(KernelKind::GM),
            "se" => Ok(KernelKind::SE),
            "matern52" | "matern" => Ok(KernelKind::Matern52),
            other => Err(GphmError::UnsupportedKind {
                kind: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One mixture component. Weight and length-scale live in the log domain;
/// `frequency` is in cycles per unit input (the kernel modulation is
/// `cos(2 pi frequency z)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub log_weight: f64,
    pub frequency: f64,
    pub log_lengthscale: f64,
}

impl MixtureComponent {
    pub fn new(log_weight: f64, frequency: f64, log_lengthscale: f64) -> Self {
        Self {
            log_weight,
            frequency,
            log_lengthscale,
        }
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }
}

/// Trainable kernel state for one input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMixtureParams {
    pub kind: KernelKind,
    pub components: Vec<MixtureComponent>,
}

impl SpectralMixtureParams {
    pub fn new(kind: KernelKind, components: Vec<MixtureComponent>) -> Result<Self> {
        let p = Self { kind, components };
        p.validate()?;
        Ok(p)
    }

    /// Single-component SE kernel with the stated weight and length-scale.
    pub fn se(weight: f64, lengthscale: f64) -> Result<Self> {
        Self::new(
            KernelKind::SE,
            vec![MixtureComponent::new(weight.ln(), 0.0, lengthscale.ln())],
        )
    }

    /// Single-component Matern-5/2 kernel.
    pub fn matern52(weight: f64, lengthscale: f64) -> Result<Self> {
        Self::new(
            KernelKind::Matern52,
            vec![MixtureComponent::new(weight.ln(), 0.0, lengthscale.ln())],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(GphmError::Domain("mixture needs at least one component".into()));
        }
        if matches!(self.kind, KernelKind::SE | KernelKind::Matern52) {
            if self.components.len() != 1 {
                return Err(GphmError::Domain(format!(
                    "kind {} requires exactly one component",
                    self.kind
                )));
            }
            if self.components[0].frequency != 0.0 {
                return Err(GphmError::Domain(format!(
                    "kind {} requires frequency fixed at 0",
                    self.kind
                )));
            }
        }
        for (q, c) in self.components.iter().enumerate() {
            let w = c.weight();
            let rho = c.lengthscale();
            if !(w.is_finite() && w > 0.0 && rho.is_finite() && rho > 0.0 && c.frequency.is_finite())
            {
                return Err(GphmError::Domain(format!(
                    "component {q} has invalid parameters (w={w}, mu={}, rho={rho})",
                    c.frequency
                )));
            }
        }
        Ok(())
    }

    /// Sum of component weights; equals the kernel value at zero displacement.
    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight()).sum()
    }

    /// Kernel value at displacement `z`.
    pub fn value(&self, z: f64) -> Result<f64> {
        self.deriv(z, 0)
    }

    /// First displacement derivative (with respect to the first argument).
    pub fn d1(&self, z: f64) -> Result<f64> {
        self.deriv(z, 1)
    }

    /// Second displacement derivative.
    pub fn d2(&self, z: f64) -> Result<f64> {
        self.deriv(z, 2)
    }

    /// `d^order/dz^order` of the kernel at displacement `z`. Orders above 2
    /// are a hard error, not a silent zero.
    pub fn deriv(&self, z: f64, order: usize) -> Result<f64> {
        if order > 2 {
            return Err(GphmError::UnsupportedOrder { order });
        }
        if !z.is_finite() {
            return Err(GphmError::NonFiniteInput(format!("displacement {z}")));
        }
        self.validate()?;
        let mut acc = 0.0;
        for c in &self.components {
            let jet = component_jet(self.kind, c, z);
            acc += jet.k[order];
        }
        Ok(acc)
    }

    /// Gram matrix over `nodes` with row-argument derivative order 0, 1 or 2:
    /// entry (m, n) is the order-`order` displacement derivative of the kernel
    /// at `z = nodes[m] - nodes[n]`.
    pub fn gram(&self, nodes: &[f64], order: usize) -> Result<Array2<f64>> {
        if nodes.is_empty() {
            return Err(GphmError::Domain("empty node vector".into()));
        }
        if nodes.iter().any(|x| !x.is_finite()) {
            return Err(GphmError::NonFiniteInput("grid node".into()));
        }
        if order > 2 {
            return Err(GphmError::UnsupportedOrder { order });
        }
        self.validate()?;
        let table = DisplacementTable::new(nodes);
        let jets = KernelJetTable::compute(self.kind, &self.components, &table);
        Ok(jets.fill(order))
    }

    /// Two-sided mixture spectral density at frequency `s` (StM and GM only).
    ///
    /// Each component contributes a symmetric pair of bumps at `+-mu_q`:
    /// Student-t bumps `St(s; +-mu_q, 4 pi^2 rho_q^2, 5)` for StM, Gaussian
    /// bumps with variance `rho_q^2 / (2 pi^2)` for GM. The total mass is
    /// `2 * sum_q w_q`.
    pub fn spectrum_density(&self, s: f64) -> Result<f64> {
        self.validate()?;
        match self.kind {
            KernelKind::StM => Ok(self
                .components
                .iter()
                .map(|c| {
                    let w = c.weight();
                    let lambda = 4.0 * PI * PI * c.lengthscale() * c.lengthscale();
                    w * (student_t_density(s, c.frequency, lambda)
                        + student_t_density(s, -c.frequency, lambda))
                })
                .sum()),
            KernelKind::GM => Ok(self
                .components
                .iter()
                .map(|c| {
                    let w = c.weight();
                    let rho = c.lengthscale();
                    let sigma2 = rho * rho / (2.0 * PI * PI);
                    w * (normal_density(s, c.frequency, sigma2)
                        + normal_density(s, -c.frequency, sigma2))
                })
                .sum()),
            kind => Err(GphmError::UnsupportedKind {
                kind: kind.to_string(),
            }),
        }
    }

    /// Numerically inverts the spectral density back to the covariance and
    /// returns the maximum absolute deviation from the closed form over
    /// `z_samples`.
    ///
    /// The symmetric density integrates to twice the weight sum, so the
    /// Fourier pair is `k(z) = (1/2) * int S(s) cos(2 pi s z) ds` (the sine
    /// part vanishes by symmetry). Errors out if the estimated spectral mass
    /// outside the quadrature range exceeds the tail tolerance.
    pub fn wiener_khinchin_check(&self, z_samples: &[f64], spec: &QuadratureSpec) -> Result<f64> {
        self.validate()?;
        if !matches!(self.kind, KernelKind::StM | KernelKind::GM) {
            return Err(GphmError::UnsupportedKind {
                kind: self.kind.to_string(),
            });
        }
        let tail = self.spectrum_tail_mass(spec.half_range);
        let limit = QuadratureSpec::TAIL_TOLERANCE * self.weight_sum().max(1.0);
        if tail > limit {
            return Err(GphmError::QuadratureRange { tail, limit });
        }
        let mut worst = 0.0f64;
        for &z in z_samples {
            let integral = quad::integrate_panels(
                -spec.half_range,
                spec.half_range,
                spec.panel_width,
                |s| self.spectrum_density(s).expect("validated kind") * (2.0 * PI * s * z).cos(),
            );
            let err = (0.5 * integral - self.value(z)?).abs();
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Upper estimate of the spectral mass outside `[-r, r]`.
    pub fn spectrum_tail_mass(&self, r: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let w = c.weight();
                let mu = c.frequency.abs();
                match self.kind {
                    KernelKind::StM => {
                        let sqrt_lambda = 2.0 * PI * c.lengthscale();
                        // Both half-lines, both bumps of the pair.
                        2.0 * w
                            * (quad::student_t5_survival(sqrt_lambda * (r - mu))
                                + quad::student_t5_survival(sqrt_lambda * (r + mu)))
                    }
                    KernelKind::GM => {
                        let sigma = c.lengthscale() / (PI * std::f64::consts::SQRT_2);
                        2.0 * w
                            * (quad::normal_survival_bound((r - mu) / sigma)
                                + quad::normal_survival_bound((r + mu) / sigma))
                    }
                    _ => 0.0,
                }
            })
            .sum()
    }
}

/// Matern covariance with smoothness 5/2 in closed form:
/// `(1 + r + r^2/3) exp(-r)` with `r = sqrt(5) |z| / rho`.
pub fn matern52(z: f64, rho: f64) -> Result<f64> {
    if !z.is_finite() || !rho.is_finite() {
        return Err(GphmError::NonFiniteInput(format!("matern52({z}, {rho})")));
    }
    if rho <= 0.0 {
        return Err(GphmError::Domain(format!("matern52 length-scale {rho} <= 0")));
    }
    let r = 5f64.sqrt() * z.abs() / rho;
    Ok((1.0 + r + r * r / 3.0) * (-r).exp())
}

/// Standard Student-t density with 5 degrees of freedom, mean `mu` and
/// precision `lambda`.
fn student_t_density(x: f64, mu: f64, lambda: f64) -> f64 {
    // Gamma(3) / Gamma(5/2) = 8 / (3 sqrt(pi)).
    let norm = 8.0 / (3.0 * PI.sqrt()) * (lambda / (5.0 * PI)).sqrt();
    let d = x - mu;
    norm * (1.0 + lambda * d * d / 5.0).powi(-3)
}

fn normal_density(x: f64, mu: f64, sigma2: f64) -> f64 {
    let d = x - mu;
    (-d * d / (2.0 * sigma2)).exp() / (2.0 * PI * sigma2).sqrt()
}

/// Quadrature layout for [`SpectralMixtureParams::wiener_khinchin_check`]:
/// composite 64-point Gauss-Legendre panels over `[-half_range, half_range]`.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub half_range: f64,
    pub panel_width: f64,
}

impl QuadratureSpec {
    /// Required bound on the spectral mass outside the quadrature range,
    /// relative to the total mixture mass.
    pub const TAIL_TOLERANCE: f64 = 1e-7;

    /// Default range: `mu_max + c` with `c = 10 * max(1/(2 pi rho_min), 1)`.
    /// For heavy-tailed Student-t spectra with short length-scales this can
    /// leave too much tail mass, in which case the check reports a range
    /// error; see [`QuadratureSpec::sufficient_for`].
    pub fn default_for(params: &SpectralMixtureParams, z_max: f64) -> Self {
        let mu_max = params
            .components
            .iter()
            .map(|c| c.frequency.abs())
            .fold(0.0, f64::max);
        let rho_min = params
            .components
            .iter()
            .map(|c| c.lengthscale())
            .fold(f64::INFINITY, f64::min);
        let c = 10.0 * (1.0 / (2.0 * PI * rho_min)).max(1.0);
        Self {
            half_range: mu_max + c,
            panel_width: panel_width_for(params, z_max),
        }
    }

    /// Widens the default range until the estimated tail mass meets
    /// [`QuadratureSpec::TAIL_TOLERANCE`].
    pub fn sufficient_for(params: &SpectralMixtureParams, z_max: f64) -> Self {
        let mut spec = Self::default_for(params, z_max);
        let limit = Self::TAIL_TOLERANCE * params.weight_sum().max(1.0);
        for _ in 0..48 {
            if params.spectrum_tail_mass(spec.half_range) <= limit {
                break;
            }
            spec.half_range *= 2.0;
        }
        spec
    }
}

/// Panel width that resolves the narrowest spectral bump and keeps the
/// oscillation of `cos(2 pi s z)` well within the 64-point rule.
fn panel_width_for(params: &SpectralMixtureParams, z_max: f64) -> f64 {
    let narrowest = params
        .components
        .iter()
        .map(|c| match params.kind {
            // StM bump scale ~ 1/(2 pi rho); GM bump scale ~ rho/(pi sqrt(2)).
            KernelKind::GM => c.lengthscale() / (PI * std::f64::consts::SQRT_2),
            _ => 1.0 / (2.0 * PI * c.lengthscale()),
        })
        .fold(f64::INFINITY, f64::min);
    let osc = 4.0 / (1.0 + z_max.abs());
    narrowest.min(osc).min(1.0).max(1e-3)
}

/// Closed-form kernel jet for one component at one displacement: the value
/// and its first two displacement derivatives, plus the partials of each with
/// respect to the component's log-weight, frequency and log-length-scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComponentJet {
    /// k, dk/dz, d2k/dz2.
    pub k: [f64; 3],
    /// Partials of `k` entries with respect to the frequency mu.
    pub d_mu: [f64; 3],
    /// Partials with respect to log rho.
    pub d_logrho: [f64; 3],
}

/// Base-factor jet: gamma(z), gamma'(z), gamma''(z) and their partials with
/// respect to log rho.
fn base_jet(kind: KernelKind, z: f64, rho: f64) -> ([f64; 3], [f64; 3]) {
    match kind {
        KernelKind::StM | KernelKind::Matern52 => {
            let a = 5f64.sqrt() / rho;
            let r = a * z.abs();
            let e = (-r).exp();
            let g = [
                (1.0 + r + r * r / 3.0) * e,
                -(a * a * z / 3.0) * (1.0 + r) * e,
                -(a * a / 3.0) * (1.0 + r - r * r) * e,
            ];
            let h = [
                (r * r * (1.0 + r) / 3.0) * e,
                (a * a * z / 3.0) * (2.0 + 2.0 * r - r * r) * e,
                (a * a / 3.0) * (2.0 + 2.0 * r - 5.0 * r * r + r * r * r) * e,
            ];
            (g, h)
        }
        KernelKind::GM => {
            // gamma = exp(-b z^2) with b = rho^2 (inverse-scale convention).
            let b = rho * rho;
            let g0 = (-b * z * z).exp();
            let g = [
                g0,
                -2.0 * b * z * g0,
                (4.0 * b * b * z * z - 2.0 * b) * g0,
            ];
            let h = [
                -2.0 * b * z * z * g0,
                (-4.0 * b * z + 4.0 * b * b * z * z * z) * g0,
                (20.0 * b * b * z * z - 4.0 * b - 8.0 * b * b * b * z * z * z * z) * g0,
            ];
            (g, h)
        }
        KernelKind::SE => {
            // gamma = exp(-beta z^2) with beta = 1/rho^2 (length-scale convention).
            let beta = 1.0 / (rho * rho);
            let g0 = (-beta * z * z).exp();
            let g = [
                g0,
                -2.0 * beta * z * g0,
                (4.0 * beta * beta * z * z - 2.0 * beta) * g0,
            ];
            let h = [
                2.0 * beta * z * z * g0,
                (4.0 * beta * z - 4.0 * beta * beta * z * z * z) * g0,
                (-20.0 * beta * beta * z * z + 4.0 * beta
                    + 8.0 * beta * beta * beta * z * z * z * z)
                    * g0,
            ];
            (g, h)
        }
    }
}

/// Evaluates a single component's jet at displacement `z`.
pub fn component_jet(kind: KernelKind, c: &MixtureComponent, z: f64) -> ComponentJet {
    let w = c.weight();
    let rho = c.lengthscale();
    let mu = c.frequency;
    let (g, h) = base_jet(kind, z, rho);
    let omega = 2.0 * PI * mu;
    let (cs, sn) = ((omega * z).cos(), (omega * z).sin());
    let two_pi = 2.0 * PI;

    let k0 = w * g[0] * cs;
    let k1 = w * (g[1] * cs - g[0] * omega * sn);
    let k2 = w * (g[2] * cs - 2.0 * g[1] * omega * sn - g[0] * omega * omega * cs);

    let d_mu = [
        -two_pi * w * g[0] * z * sn,
        -two_pi * w * (z * g[1] * sn + g[0] * sn + z * g[0] * omega * cs),
        -two_pi
            * w
            * (z * g[2] * sn + 2.0 * g[1] * sn + 2.0 * z * g[1] * omega * cs
                + 2.0 * g[0] * omega * cs
                - z * g[0] * omega * omega * sn),
    ];
    let d_logrho = [
        w * h[0] * cs,
        w * (h[1] * cs - h[0] * omega * sn),
        w * (h[2] * cs - 2.0 * h[1] * omega * sn - h[0] * omega * omega * cs),
    ];

    ComponentJet {
        k: [k0, k1, k2],
        d_mu,
        d_logrho,
    }
}

/// Unique-displacement table for a node vector. Uniform grids collapse the
/// M^2 displacements into 2M-1 diagonals, which makes Gram assembly and the
/// parameter-gradient contraction cheap.
#[derive(Debug, Clone)]
pub struct DisplacementTable {
    pub n: usize,
    /// Displacement value per group.
    pub group_z: Vec<f64>,
    /// Row-major group index per Gram entry.
    pub entry_group: Vec<u32>,
}

impl DisplacementTable {
    pub fn new(nodes: &[f64]) -> Self {
        let n = nodes.len();
        if n >= 2 {
            let span = nodes[n - 1] - nodes[0];
            let h = span / (n - 1) as f64;
            let tol = 1e-12 * span.abs().max(1.0);
            let uniform = h != 0.0
                && nodes
                    .iter()
                    .enumerate()
                    .all(|(i, &x)| (x - (nodes[0] + i as f64 * h)).abs() <= tol);
            if uniform {
                let group_z: Vec<f64> = (0..2 * n - 1)
                    .map(|g| (g as f64 - (n - 1) as f64) * h)
                    .collect();
                let mut entry_group = Vec::with_capacity(n * n);
                for m in 0..n {
                    for k in 0..n {
                        entry_group.push((m + (n - 1) - k) as u32);
                    }
                }
                return Self {
                    n,
                    group_z,
                    entry_group,
                };
            }
        }
        // General fallback: one group per entry.
        let mut group_z = Vec::with_capacity(n * n);
        let mut entry_group = Vec::with_capacity(n * n);
        for m in 0..n {
            for k in 0..n {
                entry_group.push(group_z.len() as u32);
                group_z.push(nodes[m] - nodes[k]);
            }
        }
        Self {
            n,
            group_z,
            entry_group,
        }
    }
}

/// Kernel jets evaluated over a displacement table for a full mixture, shared
/// between the Gram matrices of different derivative orders and reused by the
/// gradient tape.
pub struct KernelJetTable {
    pub table: Rc<DisplacementTable>,
    pub q: usize,
    /// Per group, per component jets, row-major `[group][component]`.
    pub jets: Vec<ComponentJet>,
    /// Per group sums of `k` over components, one row of 3 per group.
    pub sums: Vec<[f64; 3]>,
}

impl KernelJetTable {
    pub fn compute(
        kind: KernelKind,
        components: &[MixtureComponent],
        table: &DisplacementTable,
    ) -> Self {
        Self::compute_rc(kind, components, Rc::new(table.clone()))
    }

    pub fn compute_rc(
        kind: KernelKind,
        components: &[MixtureComponent],
        table: Rc<DisplacementTable>,
    ) -> Self {
        let q = components.len();
        let g = table.group_z.len();
        let mut jets = Vec::with_capacity(g * q);
        let mut sums = Vec::with_capacity(g);
        for &z in &table.group_z {
            let mut s = [0.0f64; 3];
            for c in components {
                let jet = component_jet(kind, c, z);
                for o in 0..3 {
                    s[o] += jet.k[o];
                }
                jets.push(jet);
            }
            sums.push(s);
        }
        Self {
            table,
            q,
            jets,
            sums,
        }
    }

    /// Assembles the order-`order` Gram matrix from the group sums.
    pub fn fill(&self, order: usize) -> Array2<f64> {
        let n = self.table.n;
        let mut out = Array2::zeros((n, n));
        let flat = out.as_slice_mut().expect("freshly allocated is contiguous");
        for (e, &g) in self.table.entry_group.iter().enumerate() {
            flat[e] = self.sums[g as usize][order];
        }
        out
    }

    /// Contracts a Gram-matrix adjoint into per-component parameter partials.
    /// Returns `(d_logw, d_mu, d_logrho)`, each of length Q.
    pub fn contract_adjoint(&self, order: usize, adjoint: &Array2<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ng = self.table.group_z.len();
        let mut group_bar = vec![0.0f64; ng];
        let flat = adjoint.as_slice().expect("contiguous adjoint");
        for (e, &g) in self.table.entry_group.iter().enumerate() {
            group_bar[g as usize] += flat[e];
        }
        let mut d_logw = vec![0.0f64; self.q];
        let mut d_mu = vec![0.0f64; self.q];
        let mut d_logrho = vec![0.0f64; self.q];
        for (gi, &gb) in group_bar.iter().enumerate() {
            if gb == 0.0 {
                continue;
            }
            let row = &self.jets[gi * self.q..(gi + 1) * self.q];
            for (qi, jet) in row.iter().enumerate() {
                // d k / d logw = k itself (k is linear in w = exp(logw)).
                d_logw[qi] += gb * jet.k[order];
                d_mu[qi] += gb * jet.d_mu[order];
                d_logrho[qi] += gb * jet.d_logrho[order];
            }
        }
        (d_logw, d_mu, d_logrho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn stm2() -> SpectralMixtureParams {
        SpectralMixtureParams::new(
            KernelKind::StM,
            vec![
                MixtureComponent::new((0.7f64).ln(), 1.3, (0.8f64).ln()),
                MixtureComponent::new((0.25f64).ln(), 4.1, (1.6f64).ln()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn matern52_at_zero_is_one() {
        assert_eq!(matern52(0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn matern52_is_even() {
        for &(z, rho) in &[(0.3, 1.0), (1.7, 0.4), (0.05, 2.5)] {
            assert_eq!(matern52(z, rho).unwrap(), matern52(-z, rho).unwrap());
        }
    }

    #[test]
    fn matern52_rejects_non_finite() {
        assert!(matern52(f64::NAN, 1.0).is_err());
        assert!(matern52(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn matern52_second_derivative_at_zero() {
        // Taylor expansion of (1 + r + r^2/3) e^{-r} gives k''(0) = -5/(3 rho^2);
        // cross-check against central finite differences.
        let p = SpectralMixtureParams::matern52(1.0, 1.0).unwrap();
        let d2 = p.d2(0.0).unwrap();
        assert_relative_eq!(d2, -5.0 / 3.0, max_relative = 1e-12);
        let h = 1e-4;
        let fd = (p.value(h).unwrap() - 2.0 * p.value(0.0).unwrap() + p.value(-h).unwrap()) / (h * h);
        assert_relative_eq!(d2, fd, max_relative = 1e-6);
    }

    #[test]
    fn stm_value_at_zero_is_weight_sum() {
        let p = stm2();
        assert_relative_eq!(p.value(0.0).unwrap(), p.weight_sum(), max_relative = 1e-15);
    }

    #[test]
    fn gm_single_component_matches_closed_form() {
        let p = SpectralMixtureParams::new(
            KernelKind::GM,
            vec![MixtureComponent::new(0.0, 0.0, (2.0f64).ln())],
        )
        .unwrap();
        // exp(-rho^2 z^2) with rho = 2, z = 0.5.
        assert_relative_eq!(p.value(0.5).unwrap(), (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn stm_matches_per_component_summation() {
        // Independent oracle: per-component sum assembled from scratch.
        let p = stm2();
        let z = 0.3;
        let mut expect = 0.0;
        for c in &p.components {
            expect += c.weight()
                * matern52(z, c.lengthscale()).unwrap()
                * (2.0 * PI * c.frequency * z).cos();
        }
        assert_relative_eq!(p.value(z).unwrap(), expect, max_relative = 1e-15);
    }

    #[test]
    fn d1_is_zero_at_origin() {
        assert_eq!(stm2().d1(0.0).unwrap(), 0.0);
        let se = SpectralMixtureParams::se(1.0, 0.7).unwrap();
        assert_eq!(se.d1(0.0).unwrap(), 0.0);
    }

    #[test]
    fn gm_d2_at_zero() {
        // Differentiate exp(-rho^2 z^2) twice at 0: -2 rho^2.
        let rho: f64 = 1.7;
        let p = SpectralMixtureParams::new(
            KernelKind::GM,
            vec![MixtureComponent::new(0.0, 0.0, rho.ln())],
        )
        .unwrap();
        assert_relative_eq!(p.d2(0.0).unwrap(), -2.0 * rho * rho, max_relative = 1e-13);
        let h = 1e-5;
        let fd = (p.value(h).unwrap() - 2.0 + p.value(-h).unwrap()) / (h * h);
        assert_relative_eq!(p.d2(0.0).unwrap(), fd, max_relative = 1e-5);
    }

    #[test]
    fn third_order_is_hard_error() {
        assert!(matches!(
            stm2().deriv(0.4, 3),
            Err(GphmError::UnsupportedOrder { order: 3 })
        ));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        // 100 random (params, z) draws, central differences at step 1e-5.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let kind = match trial % 3 {
                0 => KernelKind::StM,
                1 => KernelKind::GM,
                _ => KernelKind::SE,
            };
            let q = if matches!(kind, KernelKind::SE) {
                1
            } else {
                rng.gen_range(1..=3)
            };
            let comps: Vec<_> = (0..q)
                .map(|_| {
                    MixtureComponent::new(
                        rng.gen_range(-1.5..0.5),
                        if matches!(kind, KernelKind::SE) {
                            0.0
                        } else {
                            rng.gen_range(0.0..6.0)
                        },
                        rng.gen_range(-1.0..0.8),
                    )
                })
                .collect();
            let p = SpectralMixtureParams::new(kind, comps).unwrap();
            let z = rng.gen_range(-2.0..2.0);
            let h = 1e-5;
            let fd1 = (p.value(z + h).unwrap() - p.value(z - h).unwrap()) / (2.0 * h);
            let fd2 = (p.d1(z + h).unwrap() - p.d1(z - h).unwrap()) / (2.0 * h);
            let scale1 = fd1.abs().max(p.d1(z).unwrap().abs()).max(1e-3);
            let scale2 = fd2.abs().max(p.d2(z).unwrap().abs()).max(1e-3);
            assert!(
                (p.d1(z).unwrap() - fd1).abs() / scale1 < 1e-5,
                "d1 mismatch: {} vs {}",
                p.d1(z).unwrap(),
                fd1
            );
            assert!(
                (p.d2(z).unwrap() - fd2).abs() / scale2 < 1e-5,
                "d2 mismatch: {} vs {}",
                p.d2(z).unwrap(),
                fd2
            );
        }
    }

    #[test]
    fn parameter_partials_match_finite_differences() {
        // Guards the closed-form jet algebra against derivation slips.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..60 {
            let kind = match trial % 3 {
                0 => KernelKind::StM,
                1 => KernelKind::GM,
                _ => KernelKind::SE,
            };
            let c = MixtureComponent::new(
                rng.gen_range(-1.0..0.5),
                if matches!(kind, KernelKind::SE) {
                    0.0
                } else {
                    rng.gen_range(0.1..5.0)
                },
                rng.gen_range(-0.8..0.8),
            );
            let z: f64 = rng.gen_range(-1.5..1.5);
            let jet = component_jet(kind, &c, z);
            let h = 1e-6;
            for o in 0..3 {
                let bump = |c: MixtureComponent| component_jet(kind, &c, z).k[o];
                let mut cw = c;
                cw.log_weight += h;
                let mut cw2 = c;
                cw2.log_weight -= h;
                let fd_w = (bump(cw) - bump(cw2)) / (2.0 * h);
                let mut cm = c;
                cm.frequency += h;
                let mut cm2 = c;
                cm2.frequency -= h;
                let fd_mu = (bump(cm) - bump(cm2)) / (2.0 * h);
                let mut cr = c;
                cr.log_lengthscale += h;
                let mut cr2 = c;
                cr2.log_lengthscale -= h;
                let fd_rho = (bump(cr) - bump(cr2)) / (2.0 * h);
                let tol = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0) < 2e-4;
                assert!(tol(jet.k[o], fd_w), "dlogw o={o}: {} vs {fd_w}", jet.k[o]);
                assert!(tol(jet.d_mu[o], fd_mu), "dmu o={o}: {} vs {fd_mu}", jet.d_mu[o]);
                assert!(
                    tol(jet.d_logrho[o], fd_rho),
                    "dlogrho o={o}: {} vs {fd_rho}",
                    jet.d_logrho[o]
                );
            }
        }
    }

    #[test]
    fn gram_order0_symmetric_with_weight_sum_diagonal() {
        let p = stm2();
        let nodes = [0.0, 0.4, 1.1];
        let g = p.gram(&nodes, 0).unwrap();
        for m in 0..3 {
            assert_relative_eq!(g[[m, m]], p.weight_sum(), max_relative = 1e-15);
            for n in 0..3 {
                assert_relative_eq!(g[[m, n]], g[[n, m]], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn gram_order1_zero_diagonal() {
        let p = stm2();
        let nodes = [0.0, 0.5, 1.0, 1.5];
        let g = p.gram(&nodes, 1).unwrap();
        for m in 0..4 {
            assert_eq!(g[[m, m]], 0.0);
        }
    }

    #[test]
    fn gram_order2_matches_entrywise_finite_differences() {
        let p = stm2();
        let nodes = [0.1, 0.45, 0.9, 1.7];
        let g2 = p.gram(&nodes, 2).unwrap();
        let h = 1e-4;
        for m in 0..4 {
            for n in 0..4 {
                let z = nodes[m] - nodes[n];
                let fd = (p.value(z + h).unwrap() - 2.0 * p.value(z).unwrap()
                    + p.value(z - h).unwrap())
                    / (h * h);
                assert_relative_eq!(g2[[m, n]], fd, max_relative = 1e-5, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn gram_rejects_empty_nodes() {
        assert!(stm2().gram(&[], 0).is_err());
    }

    #[test]
    fn gram_uniform_grouping_matches_direct_evaluation() {
        let p = stm2();
        let nodes: Vec<f64> = (0..9).map(|i| 0.2 + 0.31 * i as f64).collect();
        let g = p.gram(&nodes, 0).unwrap();
        for m in 0..9 {
            for n in 0..9 {
                let direct = p.value(nodes[m] - nodes[n]).unwrap();
                assert_relative_eq!(g[[m, n]], direct, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spectrum_density_is_symmetric() {
        let p = stm2();
        for &s in &[0.0, 0.3, 1.3, 4.1, 9.9] {
            assert_relative_eq!(
                p.spectrum_density(s).unwrap(),
                p.spectrum_density(-s).unwrap(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn spectrum_density_single_component_oracle() {
        // At s = mu the density is St(0; 0, lambda, 5) + St(2 mu; 0, lambda, 5).
        let mu: f64 = 2.5;
        let rho: f64 = 0.9;
        let p = SpectralMixtureParams::new(
            KernelKind::StM,
            vec![MixtureComponent::new(0.0, mu, rho.ln())],
        )
        .unwrap();
        let lambda = 4.0 * PI * PI * rho * rho;
        let expect = student_t_density(0.0, 0.0, lambda) + student_t_density(2.0 * mu, 0.0, lambda);
        assert_relative_eq!(p.spectrum_density(mu).unwrap(), expect, max_relative = 1e-14);
    }

    #[test]
    fn spectrum_density_total_mass_is_twice_weight_sum() {
        let p = stm2();
        let spec = QuadratureSpec::sufficient_for(&p, 0.0);
        let mass = quad::integrate_panels(-spec.half_range, spec.half_range, spec.panel_width, |s| {
            p.spectrum_density(s).unwrap()
        });
        assert_relative_eq!(mass / (2.0 * p.weight_sum()), 1.0, max_relative = 1e-6);
    }

    #[test]
    fn spectrum_density_rejects_se() {
        let se = SpectralMixtureParams::se(1.0, 1.0).unwrap();
        assert!(matches!(
            se.spectrum_density(0.1),
            Err(GphmError::UnsupportedKind { .. })
        ));
    }

    #[test]
    fn wiener_khinchin_gm_is_exact_pair() {
        let p = SpectralMixtureParams::new(
            KernelKind::GM,
            vec![MixtureComponent::new(0.0, 1.5, (0.8f64).ln())],
        )
        .unwrap();
        let zs: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let spec = QuadratureSpec::sufficient_for(&p, 1.0);
        let err = p.wiener_khinchin_check(&zs, &spec).unwrap();
        assert!(err < 1e-6, "GM pair quadrature error {err}");
    }

    #[test]
    fn wiener_khinchin_stm_two_components() {
        let p = stm2();
        let zs: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let spec = QuadratureSpec::sufficient_for(&p, 1.0);
        let err = p.wiener_khinchin_check(&zs, &spec).unwrap();
        assert!(err < 1e-4, "StM quadrature error {err}");
    }

    #[test]
    fn wiener_khinchin_zero_displacement_mass() {
        let p = stm2();
        let spec = QuadratureSpec::sufficient_for(&p, 0.0);
        let err = p.wiener_khinchin_check(&[0.0], &spec).unwrap();
        assert!(err < 1e-5, "mass defect {err}");
    }

    #[test]
    fn wiener_khinchin_rejects_small_range() {
        let p = stm2();
        let spec = QuadratureSpec {
            half_range: 2.0,
            panel_width: 0.05,
        };
        assert!(matches!(
            p.wiener_khinchin_check(&[0.0], &spec),
            Err(GphmError::QuadratureRange { .. })
        ));
    }

    #[test]
    fn evenness_and_parity_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let p = stm2();
            let z = rng.gen_range(-3.0..3.0);
            assert_relative_eq!(p.value(z).unwrap(), p.value(-z).unwrap(), max_relative = 1e-13);
            assert_relative_eq!(
                p.d1(z).unwrap(),
                -p.d1(-z).unwrap(),
                max_relative = 1e-12,
                epsilon = 1e-14
            );
            assert_relative_eq!(
                p.d2(z).unwrap(),
                p.d2(-z).unwrap(),
                max_relative = 1e-12,
                epsilon = 1e-14
            );
        }
    }
}

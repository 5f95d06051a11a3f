use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Negative energy `f(a, b)` between two attention maps, with its gradient.
pub trait EnergyFunction: Send + Sync {
    fn name(&self) -> &'static str;

    fn energy(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self.energy_with_grad(a, b)?.value)
    }

    fn energy_with_grad(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<EnergyGrad>;
}

/// Value of `f(a, b)` and its partials with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrad {
    pub value: f64,
    pub d_a: Array1<f64>,
    pub d_b: Array1<f64>,
}

fn check_shapes(a: &ArrayView1<'_, f64>, b: &ArrayView1<'_, f64>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "energy inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::input("energy inputs are empty"));
    }
    Ok(())
}

/// `⟨a,b⟩ / (‖a‖‖b‖)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cosine;

impl EnergyFunction for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn energy_with_grad(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<EnergyGrad> {
        check_shapes(&a, &b)?;
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate(
                "cosine energy of a zero-norm attention map".into(),
            ));
        }
        let value = a.dot(&b) / (na * nb);
        // d/da = b/(|a||b|) - f a/|a|^2
        let d_a = &b / (na * nb) - &a * (value / (na * na));
        let d_b = &a / (na * nb) - &b * (value / (nb * nb));
        Ok(EnergyGrad { value, d_a, d_b })
    }
}

/// Floor applied to shifted maps before normalizing them to distributions.
pub const KL_FLOOR: f64 = 1e-12;

/// `-(KL(p‖q) + KL(q‖p)) / 2` on maps shifted by their minimum, floored and
/// normalized to probability vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegAvgKl;

struct Normalized {
    p: Array1<f64>,
    active: Vec<bool>,
    argmin: usize,
    total: f64,
}

fn normalize(a: &ArrayView1<'_, f64>) -> Normalized {
    let (argmin, min) = a
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let mut active = vec![false; a.len()];
    let u: Array1<f64> = a
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let shifted = v - min;
            if shifted > KL_FLOOR {
                active[i] = true;
                shifted
            } else {
                KL_FLOOR
            }
        })
        .collect();
    let total = u.sum();
    Normalized {
        p: u / total,
        active,
        argmin,
        total,
    }
}

/// Pulls a gradient on the normalized map back to the raw map.
fn normalize_backward(n: &Normalized, g_p: &Array1<f64>) -> Array1<f64> {
    let mean = g_p.dot(&n.p);
    let mut out = Array1::zeros(g_p.len());
    let mut through_min = 0.0;
    for i in 0..g_p.len() {
        if n.active[i] {
            let g_u = (g_p[i] - mean) / n.total;
            out[i] += g_u;
            through_min += g_u;
        }
    }
    out[n.argmin] -= through_min;
    out
}

impl EnergyFunction for NegAvgKl {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn energy_with_grad(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<EnergyGrad> {
        check_shapes(&a, &b)?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite attention map".into()));
        }
        let na = normalize(&a);
        let nb = normalize(&b);
        let (p, q) = (&na.p, &nb.p);
        let mut value = 0.0;
        let mut g_p = Array1::zeros(p.len());
        let mut g_q = Array1::zeros(p.len());
        for i in 0..p.len() {
            let lr = (p[i] / q[i]).ln();
            value += (p[i] - q[i]) * lr;
            g_p[i] = -0.5 * (lr + 1.0 - q[i] / p[i]);
            g_q[i] = -0.5 * (-lr + 1.0 - p[i] / q[i]);
        }
        Ok(EnergyGrad {
            value: -0.5 * value,
            d_a: normalize_backward(&na, &g_p),
            d_b: normalize_backward(&nb, &g_q),
        })
    }
}

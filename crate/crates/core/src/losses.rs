//! Loss terms of the structure-preserving CycleGAN objective.
//!
//! All reductions are means over pixels, so the weights are independent of
//! image size. Every term comes with an analytic gradient with respect to its
//! image arguments; those gradients drive the generator and discriminator
//! updates in [`crate::trainer`].
//!
//! L1 terms use `sign(0) = 0` as their subgradient, and the air indicator
//! takes its derivative from the `z >= C` side (zero) at the threshold.

use std::fmt::Debug;

use ndarray::{Array2, ArrayView2, Zip};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::reflect_index;
use crate::preprocess::clip_and_scale_value;

/// Floating-point element type accepted by the loss functions.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {}
impl<T: Float + FromPrimitive + Debug + Send + Sync + 'static> Real for T {}

fn lit<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// HU value below which the generators must leave voxels untouched.
pub const AIR_THRESHOLD_HU: f64 = -465.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_adv: f64,
    pub lambda_grad: f64,
    pub lambda_tv: f64,
    pub lambda_air: f64,
    pub lambda_idem: f64,
    #[serde(rename = "lambda_D")]
    pub lambda_d: f64,
    /// Air threshold `C` on the scaled [-1, 1] intensity axis.
    pub air_threshold_scaled: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cycle: 10.0,
            lambda_adv: 1.0,
            lambda_grad: 0.1,
            lambda_tv: 0.01,
            lambda_air: 1.0,
            lambda_idem: 1.0,
            lambda_d: 1.0,
            air_threshold_scaled: clip_and_scale_value(AIR_THRESHOLD_HU),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_adv", self.lambda_adv),
            ("lambda_grad", self.lambda_grad),
            ("lambda_tv", self.lambda_tv),
            ("lambda_air", self.lambda_air),
            ("lambda_idem", self.lambda_idem),
            ("lambda_D", self.lambda_d),
        ];
        for (name, value) in named {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::invalid("loss weights", format!("{name} = {value} must be finite and >= 0")));
            }
        }
        if !(-1.0..=1.0).contains(&self.air_threshold_scaled) {
            return Err(Error::invalid(
                "loss weights",
                format!("air_threshold_scaled = {} outside [-1, 1]", self.air_threshold_scaled),
            ));
        }
        Ok(())
    }
}

/// Unweighted generator-side loss terms of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub adv: f64,
    pub tv: f64,
    pub air: f64,
    pub grad: f64,
    pub idem: f64,
}

/// Per-term values plus the weighted totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub adv: f64,
    pub tv: f64,
    pub air: f64,
    pub grad: f64,
    pub idem: f64,
    pub d: f64,
    pub loss_g: f64,
    pub loss_d: f64,
}

fn check_same<F>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn count<F: Real>(a: &ArrayView2<F>) -> F {
    lit(a.len().max(1) as f64)
}

fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Mean squared distance of a score map from a constant target.
pub fn mse_to<F: Real>(map: ArrayView2<F>, target: F) -> F {
    map.fold(F::zero(), |acc, &v| acc + (v - target) * (v - target)) / count(&map)
}

fn mse_to_grad<F: Real>(map: ArrayView2<F>, target: F) -> Array2<F> {
    let scale = lit::<F>(2.0) / count(&map);
    map.mapv(|v| scale * (v - target))
}

/// Mean absolute difference.
pub fn mean_abs_diff<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Result<F> {
    check_same(&a, &b)?;
    let total = Zip::from(&a).and(&b).fold(F::zero(), |acc, &x, &y| acc + (x - y).abs());
    Ok(total / count(&a))
}

/// Gradient of [`mean_abs_diff`] with respect to `a` (negate it for `b`).
fn mean_abs_diff_grad<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let n = count(&a);
    Zip::from(&a).and(&b).map_collect(|&x, &y| sign(x - y) / n)
}

/// Least-squares discriminator objective.
///
/// `λ_D · [mse(D_P(fake_P), 0) + mse(D_C(real_C), 1) + mse(D_C(fake_C), 0) + mse(D_P(real_P), 1)]`.
pub fn loss_discriminator<F: Real>(
    dp_fake: ArrayView2<F>,
    dc_real: ArrayView2<F>,
    dc_fake: ArrayView2<F>,
    dp_real: ArrayView2<F>,
    w: &LossWeights,
) -> Result<F> {
    check_same(&dp_fake, &dp_real)?;
    check_same(&dc_fake, &dc_real)?;
    let total = mse_to(dp_fake, F::zero()) + mse_to(dc_real, F::one()) + mse_to(dc_fake, F::zero()) + mse_to(dp_real, F::one());
    Ok(lit::<F>(w.lambda_d) * total)
}

/// Gradients of [`loss_discriminator`] in argument order.
pub fn loss_discriminator_grad<F: Real>(
    dp_fake: ArrayView2<F>,
    dc_real: ArrayView2<F>,
    dc_fake: ArrayView2<F>,
    dp_real: ArrayView2<F>,
    w: &LossWeights,
) -> Result<[Array2<F>; 4]> {
    check_same(&dp_fake, &dp_real)?;
    check_same(&dc_fake, &dc_real)?;
    let l = lit::<F>(w.lambda_d);
    Ok([
        mse_to_grad(dp_fake, F::zero()).mapv(|v| v * l),
        mse_to_grad(dc_real, F::one()).mapv(|v| v * l),
        mse_to_grad(dc_fake, F::zero()).mapv(|v| v * l),
        mse_to_grad(dp_real, F::one()).mapv(|v| v * l),
    ])
}

/// `(mean|x - x_cyc|, mean|y - y_cyc|)`.
pub fn loss_cycle<F: Real>(x: ArrayView2<F>, x_cyc: ArrayView2<F>, y: ArrayView2<F>, y_cyc: ArrayView2<F>) -> Result<(F, F)> {
    Ok((mean_abs_diff(x, x_cyc)?, mean_abs_diff(y, y_cyc)?))
}

/// Gradients of the two cycle terms with respect to `x_cyc` and `y_cyc`.
pub fn loss_cycle_grad<F: Real>(x: ArrayView2<F>, x_cyc: ArrayView2<F>, y: ArrayView2<F>, y_cyc: ArrayView2<F>) -> Result<(Array2<F>, Array2<F>)> {
    check_same(&x, &x_cyc)?;
    check_same(&y, &y_cyc)?;
    Ok((mean_abs_diff_grad(x_cyc, x), mean_abs_diff_grad(y_cyc, y)))
}

/// Generator adversarial term: `mse(D_P(fake_P), 1) + mse(D_C(fake_C), 1)`.
pub fn loss_adversarial_g<F: Real>(dp_of_fake: ArrayView2<F>, dc_of_fake: ArrayView2<F>) -> F {
    mse_to(dp_of_fake, F::one()) + mse_to(dc_of_fake, F::one())
}

pub fn loss_adversarial_g_grad<F: Real>(dp_of_fake: ArrayView2<F>, dc_of_fake: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
    (mse_to_grad(dp_of_fake, F::one()), mse_to_grad(dc_of_fake, F::one()))
}

fn tv_terms(rows: usize, cols: usize) -> usize {
    rows * cols.saturating_sub(1) + rows.saturating_sub(1) * cols
}

/// Anisotropic total variation: the mean absolute forward difference over
/// all horizontal and vertical neighbour pairs.
pub fn loss_tv<F: Real>(img: ArrayView2<F>) -> Result<F> {
    let (h, w) = img.dim();
    if h < 2 || w < 2 {
        return Err(Error::invalid("image", format!("total variation needs at least 2x2, got {h}x{w}")));
    }
    let mut total = F::zero();
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                total = total + (img[[r, c + 1]] - img[[r, c]]).abs();
            }
            if r + 1 < h {
                total = total + (img[[r + 1, c]] - img[[r, c]]).abs();
            }
        }
    }
    Ok(total / lit(tv_terms(h, w) as f64))
}

pub fn loss_tv_grad<F: Real>(img: ArrayView2<F>) -> Result<Array2<F>> {
    let (h, w) = img.dim();
    if h < 2 || w < 2 {
        return Err(Error::invalid("image", format!("total variation needs at least 2x2, got {h}x{w}")));
    }
    let n = lit::<F>(tv_terms(h, w) as f64);
    let mut g = Array2::<F>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                let s = sign(img[[r, c + 1]] - img[[r, c]]) / n;
                g[[r, c + 1]] = g[[r, c + 1]] + s;
                g[[r, c]] = g[[r, c]] - s;
            }
            if r + 1 < h {
                let s = sign(img[[r + 1, c]] - img[[r, c]]) / n;
                g[[r + 1, c]] = g[[r + 1, c]] + s;
                g[[r, c]] = g[[r, c]] - s;
            }
        }
    }
    Ok(g)
}

/// Keeps values below the air threshold and zeroes everything else.
pub fn psi<F: Real>(z: F, threshold: F) -> F {
    if z < threshold {
        z
    } else {
        F::zero()
    }
}

/// `mean|ψ(gx) - ψ(x)| + mean|ψ(gy) - ψ(y)|`.
pub fn loss_air<F: Real>(x: ArrayView2<F>, gx: ArrayView2<F>, y: ArrayView2<F>, gy: ArrayView2<F>, threshold: F) -> Result<F> {
    let term = |a: &ArrayView2<F>, ga: &ArrayView2<F>| -> Result<F> {
        check_same(a, ga)?;
        let total = Zip::from(a).and(ga).fold(F::zero(), |acc, &v, &g| acc + (psi(g, threshold) - psi(v, threshold)).abs());
        Ok(total / count(a))
    };
    Ok(term(&x, &gx)? + term(&y, &gy)?)
}

/// Gradients of [`loss_air`] with respect to `(x, gx, y, gy)`.
#[allow(clippy::type_complexity)]
pub fn loss_air_grad<F: Real>(
    x: ArrayView2<F>,
    gx: ArrayView2<F>,
    y: ArrayView2<F>,
    gy: ArrayView2<F>,
    threshold: F,
) -> Result<(Array2<F>, Array2<F>, Array2<F>, Array2<F>)> {
    let term = |a: &ArrayView2<F>, ga: &ArrayView2<F>| -> Result<(Array2<F>, Array2<F>)> {
        check_same(a, ga)?;
        let n = count(a);
        let d_ga = Zip::from(a).and(ga).map_collect(|&v, &g| {
            if g < threshold {
                sign(psi(g, threshold) - psi(v, threshold)) / n
            } else {
                F::zero()
            }
        });
        let d_a = Zip::from(a).and(ga).map_collect(|&v, &g| {
            if v < threshold {
                -sign(psi(g, threshold) - psi(v, threshold)) / n
            } else {
                F::zero()
            }
        });
        Ok((d_a, d_ga))
    };
    let (dx, dgx) = term(&x, &gx)?;
    let (dy, dgy) = term(&y, &gy)?;
    Ok((dx, dgx, dy, dgy))
}

/// Sobel correlation taps `(row offset, col offset, weight)` for the
/// horizontal derivative; the vertical taps are the transpose.
const SOBEL_TAPS: [(isize, isize, f64); 6] = [
    (-1, -1, -1.0),
    (-1, 1, 1.0),
    (0, -1, -2.0),
    (0, 1, 2.0),
    (1, -1, -1.0),
    (1, 1, 1.0),
];

fn sobel_apply<F: Real>(img: ArrayView2<F>, transpose_taps: bool) -> Array2<F> {
    let (h, w) = img.dim();
    let mut out = Array2::<F>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = F::zero();
            for &(dr, dc, k) in &SOBEL_TAPS {
                let (dr, dc) = if transpose_taps { (dc, dr) } else { (dr, dc) };
                let rr = reflect_index(r as isize + dr, h);
                let cc = reflect_index(c as isize + dc, w);
                acc = acc + lit::<F>(k) * img[[rr, cc]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Adjoint of [`sobel_apply`].
fn sobel_adjoint<F: Real>(grad: ArrayView2<F>, transpose_taps: bool) -> Array2<F> {
    let (h, w) = grad.dim();
    let mut out = Array2::<F>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let g = grad[[r, c]];
            for &(dr, dc, k) in &SOBEL_TAPS {
                let (dr, dc) = if transpose_taps { (dc, dr) } else { (dr, dc) };
                let rr = reflect_index(r as isize + dr, h);
                let cc = reflect_index(c as isize + dc, w);
                out[[rr, cc]] = out[[rr, cc]] + lit::<F>(k) * g;
            }
        }
    }
    out
}

/// Sobel derivatives `(g1, g2)`: `g1` differentiates along columns
/// (responds to vertical edges), `g2` along rows. Borders use reflect padding.
pub fn sobel_gradients<F: Real>(img: ArrayView2<F>) -> Result<(Array2<F>, Array2<F>)> {
    let (h, w) = img.dim();
    if h < 3 || w < 3 {
        return Err(Error::invalid("image", format!("Sobel needs at least 3x3, got {h}x{w}")));
    }
    Ok((sobel_apply(img.view(), false), sobel_apply(img.view(), true)))
}

/// Pixelwise Sobel gradient magnitude.
pub fn sobel_magnitude<F: Real>(img: ArrayView2<F>) -> Result<Array2<F>> {
    let (g1, g2) = sobel_gradients(img)?;
    Ok(Zip::from(&g1).and(&g2).map_collect(|&a, &b| (a * a + b * b).sqrt()))
}

fn grad_term<F: Real>(a: &ArrayView2<F>, ga: &ArrayView2<F>) -> Result<F> {
    check_same(a, ga)?;
    let diff = a - ga;
    let (d1, d2) = sobel_gradients(diff.view())?;
    Ok(mse_to(d1.view(), F::zero()) + mse_to(d2.view(), F::zero()))
}

/// Edge-preservation term: squared Sobel derivatives of `x - gx` and `y - gy`,
/// both directions, mean-reduced.
pub fn loss_grad<F: Real>(x: ArrayView2<F>, gx: ArrayView2<F>, y: ArrayView2<F>, gy: ArrayView2<F>) -> Result<F> {
    Ok(grad_term(&x, &gx)? + grad_term(&y, &gy)?)
}

/// Gradients of [`loss_grad`] with respect to `gx` and `gy` (the data-side
/// gradients are their negatives).
pub fn loss_grad_grad<F: Real>(x: ArrayView2<F>, gx: ArrayView2<F>, y: ArrayView2<F>, gy: ArrayView2<F>) -> Result<(Array2<F>, Array2<F>)> {
    let term = |a: &ArrayView2<F>, ga: &ArrayView2<F>| -> Result<Array2<F>> {
        check_same(a, ga)?;
        let diff = a - ga;
        let (d1, d2) = sobel_gradients(diff.view())?;
        let scale = lit::<F>(2.0) / count(a);
        let back = sobel_adjoint(d1.view(), false) + sobel_adjoint(d2.view(), true);
        // d/d(ga) of mean(S(a - ga)^2) = -2/N S^T S (a - ga)
        Ok(back.mapv(|v| -scale * v))
    };
    Ok((term(&x, &gx)?, term(&y, &gy)?))
}

/// `mean|gx - ggx| + mean|gy - ggy|`.
pub fn loss_idem<F: Real>(gx: ArrayView2<F>, ggx: ArrayView2<F>, gy: ArrayView2<F>, ggy: ArrayView2<F>) -> Result<F> {
    Ok(mean_abs_diff(gx, ggx)? + mean_abs_diff(gy, ggy)?)
}

/// Gradients of [`loss_idem`] with respect to `(gx, ggx, gy, ggy)`.
#[allow(clippy::type_complexity)]
pub fn loss_idem_grad<F: Real>(
    gx: ArrayView2<F>,
    ggx: ArrayView2<F>,
    gy: ArrayView2<F>,
    ggy: ArrayView2<F>,
) -> Result<(Array2<F>, Array2<F>, Array2<F>, Array2<F>)> {
    check_same(&gx, &ggx)?;
    check_same(&gy, &ggy)?;
    let dgx = mean_abs_diff_grad(gx.view(), ggx.view());
    let dgy = mean_abs_diff_grad(gy.view(), ggy.view());
    Ok((dgx.clone(), -dgx, dgy.clone(), -dgy))
}

/// Weighted generator objective plus the discriminator total `loss_d`.
pub fn compose_generator_loss(terms: &GeneratorTerms, loss_d: f64, w: &LossWeights) -> Result<LossBreakdown> {
    let values = [
        terms.cycle_a,
        terms.cycle_b,
        terms.adv,
        terms.tv,
        terms.air,
        terms.grad,
        terms.idem,
        loss_d,
    ];
    let loss_g = w.lambda_cycle * (terms.cycle_a + terms.cycle_b)
        + w.lambda_adv * terms.adv
        + w.lambda_grad * terms.grad
        + w.lambda_idem * terms.idem
        + w.lambda_air * terms.air
        + w.lambda_tv * terms.tv;
    let breakdown = LossBreakdown {
        cycle_a: terms.cycle_a,
        cycle_b: terms.cycle_b,
        adv: terms.adv,
        tv: terms.tv,
        air: terms.air,
        grad: terms.grad,
        idem: terms.idem,
        d: if w.lambda_d > 0.0 { loss_d / w.lambda_d } else { 0.0 },
        loss_g,
        loss_d,
    };
    if values.iter().any(|v| !v.is_finite()) || !loss_g.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            breakdown: format!("{breakdown:?}"),
        });
    }
    Ok(breakdown)
}

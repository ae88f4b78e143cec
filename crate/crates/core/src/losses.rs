//! Objective terms for unpaired cycle training.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{to_f64, PaddingSpec, Scalar, Tensor, Var};

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn stencil<T: Scalar>(k: &[[f64; 3]; 3]) -> Tensor<T> {
    Tensor::from_fn(&[1, 1, 3, 3], |i| crate::tensor::cst(k[i / 3][i % 3]))
}

/// Horizontal and vertical Sobel responses of a `[B, 1, H, W]` batch
/// (cross-correlation, reflection padding 1, same size).
pub fn sobel_gradients<'t, T: Scalar>(img: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = img.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] < 3 || shape[3] < 3 {
        return Err(Error::shape(
            "sobel",
            format!("need a [B, 1, H>=3, W>=3] batch, got {shape:?}"),
        ));
    }
    let tape = img.tape();
    let kx = tape.constant(stencil(&SOBEL_X));
    let ky = tape.constant(stencil(&SOBEL_Y));
    let padded = img.pad2d(PaddingSpec::reflect(1))?;
    Ok((
        padded.conv2d(&kx, None, 1, PaddingSpec::NONE)?,
        padded.conv2d(&ky, None, 1, PaddingSpec::NONE)?,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Cross-entropy on logits; the generator maximizes `log D(G(x))`.
    #[default]
    BceLogits,
    LeastSquares,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Discriminator objective: real maps toward 1, fake toward 0, each term
/// averaged over the logit map.
pub fn discriminator_loss<'t, T: Scalar>(
    real: Var<'t, T>,
    fake: Var<'t, T>,
    mode: AdversarialMode,
) -> Result<Var<'t, T>> {
    same_shape("discriminator_loss", &real, &fake)?;
    match mode {
        // -log sigmoid(r) = softplus(-r); -log(1 - sigmoid(f)) = softplus(f)
        AdversarialMode::BceLogits => real.neg().softplus().mean().add(&fake.softplus().mean()),
        AdversarialMode::LeastSquares => real
            .add_scalar(-1.0)
            .square()
            .mean()
            .add(&fake.square().mean()),
    }
}

/// Non-saturating generator objective on the discriminator's fake logits.
pub fn generator_adversarial_loss<'t, T: Scalar>(
    fake: Var<'t, T>,
    mode: AdversarialMode,
) -> Var<'t, T> {
    match mode {
        AdversarialMode::BceLogits => fake.neg().softplus().mean(),
        AdversarialMode::LeastSquares => fake.add_scalar(-1.0).square().mean(),
    }
}

/// `(discriminator loss, generator loss)` from one pair of logit maps.
pub fn adversarial_losses<'t, T: Scalar>(
    real: Var<'t, T>,
    fake: Var<'t, T>,
    mode: AdversarialMode,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((
        discriminator_loss(real, fake, mode)?,
        generator_adversarial_loss(fake, mode),
    ))
}

fn mean_l1<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, op: &'static str) -> Result<Var<'t, T>> {
    same_shape(op, &a, &b)?;
    Ok(a.sub(&b)?.abs().mean())
}

pub fn cycle_loss<'t, T: Scalar>(
    x: Var<'t, T>,
    x_cycled: Var<'t, T>,
    y: Var<'t, T>,
    y_cycled: Var<'t, T>,
) -> Result<Var<'t, T>> {
    mean_l1(x_cycled, x, "cycle_loss")?.add(&mean_l1(y_cycled, y, "cycle_loss")?)
}

/// `mean|G_X(y) - y| + mean|G_Y(x) - x|`, given the two generator outputs.
pub fn identity_loss<'t, T: Scalar>(
    gx_of_y: Var<'t, T>,
    y: Var<'t, T>,
    gy_of_x: Var<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    mean_l1(gx_of_y, y, "identity_loss")?.add(&mean_l1(gy_of_x, x, "identity_loss")?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmapForm {
    /// Both cycles, both Sobel directions.
    #[default]
    Symmetric,
    /// Only the `y` image: horizontal gradients of `G_Y(G_X(y))` and
    /// vertical gradients of `G_X(G_Y(y))`.
    Literal,
}

/// Sum of mean absolute Sobel differences between images and their cycles,
/// in both directions.
pub fn gradient_mapping_loss<'t, T: Scalar>(
    x: Var<'t, T>,
    x_cycled: Var<'t, T>,
    y: Var<'t, T>,
    y_cycled: Var<'t, T>,
) -> Result<Var<'t, T>> {
    same_shape("gradient_mapping_loss", &x, &x_cycled)?;
    same_shape("gradient_mapping_loss", &y, &y_cycled)?;
    let (xcx, xcy) = sobel_gradients(x_cycled)?;
    let (xx, xy) = sobel_gradients(x)?;
    let (ycx, ycy) = sobel_gradients(y_cycled)?;
    let (yx, yy) = sobel_gradients(y)?;
    mean_l1(xcx, xx, "gmap")?
        .add(&mean_l1(xcy, xy, "gmap")?)?
        .add(&mean_l1(ycx, yx, "gmap")?)?
        .add(&mean_l1(ycy, yy, "gmap")?)
}

/// The single-image variant: `y_xy = G_Y(G_X(y))`, `y_yx = G_X(G_Y(y))`.
pub fn gradient_mapping_loss_literal<'t, T: Scalar>(
    y: Var<'t, T>,
    y_xy: Var<'t, T>,
    y_yx: Var<'t, T>,
) -> Result<Var<'t, T>> {
    same_shape("gradient_mapping_loss", &y, &y_xy)?;
    same_shape("gradient_mapping_loss", &y, &y_yx)?;
    let (gx_a, _) = sobel_gradients(y_xy)?;
    let (_, gy_b) = sobel_gradients(y_yx)?;
    let (gx, gy) = sobel_gradients(y)?;
    mean_l1(gx_a, gx, "gmap")?.add(&mean_l1(gy_b, gy, "gmap")?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_ident: f64,
    pub lambda_gmap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 1.0,
            lambda_ident: 1.0,
            lambda_gmap: 5.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_cyc: f64, lambda_ident: f64, lambda_gmap: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_cyc,
            lambda_ident,
            lambda_gmap,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_ident", self.lambda_ident),
            ("lambda_gmap", self.lambda_gmap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_forward: f64,
    pub adv_backward: f64,
    pub cyc: f64,
    pub ident: f64,
    pub gmap: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Checks every term and composes the weighted total.
    pub fn compose(
        adv_forward: f64,
        adv_backward: f64,
        cyc: f64,
        ident: f64,
        gmap: f64,
        w: &LossWeights,
    ) -> Result<Self> {
        for (name, v) in [
            ("adv_forward", adv_forward),
            ("adv_backward", adv_backward),
            ("cyc", cyc),
            ("ident", ident),
            ("gmap", gmap),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("loss term {name} = {v}")));
            }
        }
        Ok(LossBreakdown {
            adv_forward,
            adv_backward,
            cyc,
            ident,
            gmap,
            total: adv_forward
                + adv_backward
                + w.lambda_cyc * cyc
                + w.lambda_ident * ident
                + w.lambda_gmap * gmap,
        })
    }
}

/// Differentiable terms of one generator step.
pub struct LossTerms<'t, T: Scalar> {
    pub adv_forward: Var<'t, T>,
    pub adv_backward: Var<'t, T>,
    pub cyc: Var<'t, T>,
    pub ident: Var<'t, T>,
    pub gmap: Var<'t, T>,
}

impl<'t, T: Scalar> LossTerms<'t, T> {
    /// Weighted scalar to differentiate together with its breakdown.
    pub fn total(&self, w: &LossWeights) -> Result<(Var<'t, T>, LossBreakdown)> {
        let scalar = |v: &Var<'t, T>| to_f64(v.value().data()[0]);
        let breakdown = LossBreakdown::compose(
            scalar(&self.adv_forward),
            scalar(&self.adv_backward),
            scalar(&self.cyc),
            scalar(&self.ident),
            scalar(&self.gmap),
            w,
        )?;
        let total = self
            .adv_forward
            .add(&self.adv_backward)?
            .add(&self.cyc.scale(w.lambda_cyc))?
            .add(&self.ident.scale(w.lambda_ident))?
            .add(&self.gmap.scale(w.lambda_gmap))?;
        Ok((total, breakdown))
    }
}

pub const LOSS_CSV_HEADER: [&str; 7] = ["step", "adv_f", "adv_b", "cyc", "ident", "gmap", "total"];

/// Writes `step,adv_f,adv_b,cyc,ident,gmap,total` rows.
pub fn write_loss_csv<W: Write>(out: W, rows: &[(u64, LossBreakdown)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_CSV_HEADER)?;
    for (step, b) in rows {
        w.write_record([
            step.to_string(),
            b.adv_forward.to_string(),
            b.adv_backward.to_string(),
            b.cyc.to_string(),
            b.ident.to_string(),
            b.gmap.to_string(),
            b.total.to_string(),
        ])
        ?;
    }
    w.flush().map_err(|e| Error::io("loss csv", e))
}

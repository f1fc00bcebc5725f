//! DropBlock on skip-connect outputs and the super-net guidance loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::searchspace::SkipMasker;
use crate::tensor::Tensor;

/// Added inside the logarithm of the guidance loss.
pub const DISTILL_EPS: f64 = 1e-12;

/// Tolerance on row sums of the distributions fed to [`distill_loss`].
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Contiguous square blocks.
    #[default]
    Block,
    /// Independent per-element dropout, kept for ablations.
    Element,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropBlockConfig {
    pub block_size: usize,
    /// `(progress, drop probability)` pairs; the first must be `(0, 0)`.
    pub milestones: Vec<(f64, f64)>,
    pub kind: MaskKind,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        Self {
            block_size: 3,
            milestones: vec![(0.0, 0.0), (1.0 / 3.0, 0.1), (2.0 / 3.0, 0.2)],
            kind: MaskKind::Block,
        }
    }
}

impl DropBlockConfig {
    /// A schedule that never drops anything.
    pub fn disabled() -> Self {
        Self {
            milestones: vec![(0.0, 0.0)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(Error::Config(format!("block_size must be odd, got {}", self.block_size)));
        }
        match self.milestones.first() {
            Some(&(f, p)) if f == 0.0 && p == 0.0 => {}
            _ => return Err(Error::Config("first drop milestone must be (0, 0)".into())),
        }
        for w in self.milestones.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("drop milestones must be strictly increasing".into()));
            }
        }
        for &(f, p) in &self.milestones {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("milestone progress {f} outside [0, 1]")));
            }
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("drop probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Drop probability of the latest milestone reached at `progress`.
pub fn drop_schedule(progress: f64, cfg: &DropBlockConfig) -> f64 {
    cfg.milestones
        .iter()
        .take_while(|&&(f, _)| f <= progress)
        .last()
        .map_or(0.0, |&(_, p)| p)
}

fn check_drop_prob(drop_prob: f64) -> Result<()> {
    if (0.0..1.0).contains(&drop_prob) {
        Ok(())
    } else {
        Err(Error::Config(format!("drop probability {drop_prob} outside [0, 1)")))
    }
}

/// Seed-point rate that makes the expected dropped fraction about `drop_prob`.
pub fn dropblock_gamma(h: usize, w: usize, block_size: usize, drop_prob: f64) -> f64 {
    let valid = ((h - block_size + 1) * (w - block_size + 1)) as f64;
    drop_prob * (h * w) as f64 / ((block_size * block_size) as f64 * valid)
}

/// Binary mask over `[N, C, H, W]`. Seeds are drawn per channel at positions
/// where a whole block fits; each seed zeroes the square it anchors.
/// Survivors are not rescaled.
pub fn dropblock_mask<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    block_size: usize,
    drop_prob: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_drop_prob(drop_prob)?;
    let (n, c, h, w) = match *shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Config(format!("dropblock needs a 4-d shape, got {shape:?}"))),
    };
    if block_size == 0 || block_size > h.min(w) {
        return Err(Error::Config(format!(
            "block_size {block_size} exceeds the {h}x{w} feature map"
        )));
    }
    let mut mask = Tensor::ones(shape);
    if drop_prob == 0.0 {
        return Ok(mask);
    }
    let gamma = dropblock_gamma(h, w, block_size, drop_prob).min(1.0);
    let data = mask.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..=h - block_size {
            for j in 0..=w - block_size {
                if rng.gen_bool(gamma) {
                    for di in 0..block_size {
                        let row = base + (i + di) * w + j;
                        data[row..row + block_size].fill(T::zero());
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Independent Bernoulli keep mask with keep probability `1 - drop_prob`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], drop_prob: f64, rng: &mut R) -> Result<Tensor<T>> {
    check_drop_prob(drop_prob)?;
    Ok(Tensor::from_fn(shape, |_| {
        if drop_prob > 0.0 && rng.gen_bool(drop_prob) {
            T::zero()
        } else {
            T::one()
        }
    }))
}

/// `coeff * (x * mask)`. Without a mask this is the plain (scaled) skip path.
pub fn identity_drop_forward<T: Real>(
    tape: &Tape<T>,
    x: &Var<T>,
    coeff: Option<&Var<T>>,
    mask: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let y = match mask {
        Some(m) => {
            if m.shape() != x.shape() {
                return Err(Error::Dimension {
                    op: "identity_drop_forward",
                    detail: format!("mask {:?} vs input {:?}", m.shape(), x.shape()),
                });
            }
            tape.mul(x, &tape.constant(m.clone()))?
        }
        None => x.clone(),
    };
    match coeff {
        Some(c) => tape.mul_scalar_var(&y, c),
        None => Ok(y),
    }
}

/// Draws a fresh mask for every skip-connect output it is asked about.
/// Block masks shrink the block to the feature map when the map is smaller.
pub struct DropMasker<'a, R: ?Sized> {
    pub kind: MaskKind,
    pub block_size: usize,
    pub drop_prob: f64,
    pub rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> DropMasker<'a, R> {
    pub fn new(cfg: &DropBlockConfig, drop_prob: f64, rng: &'a mut R) -> Self {
        Self {
            kind: cfg.kind,
            block_size: cfg.block_size,
            drop_prob,
            rng,
        }
    }
}

impl<T: Real, R: Rng + ?Sized> SkipMasker<T> for DropMasker<'_, R> {
    fn mask(&mut self, shape: &[usize]) -> Result<Option<Tensor<T>>> {
        if self.drop_prob == 0.0 {
            return Ok(None);
        }
        let m = match self.kind {
            MaskKind::Block => {
                // maps smaller than the block use the largest block that fits
                let side = shape.get(2..4).map_or(self.block_size, |hw| hw[0].min(hw[1]));
                dropblock_mask(shape, self.block_size.min(side), self.drop_prob, self.rng)?
            }
            MaskKind::Element => dropout_mask(shape, self.drop_prob, self.rng)?,
        };
        Ok(Some(m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_final: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { lambda_final: 0.01 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_final.is_finite() && self.lambda_final >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("lambda_final must be >= 0, got {}", self.lambda_final)))
        }
    }
}

/// Linear ramp from 0 at the start to `lambda_final` at the end.
pub fn lambda_schedule(progress: f64, cfg: &DistillConfig) -> f64 {
    progress.clamp(0.0, 1.0) * cfg.lambda_final
}

fn check_rows<T: Real>(name: &str, p: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c) = p.dims2("distill_loss")?;
    for (i, row) in p.data().chunks(c.max(1)).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Input(format!("{name} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok((n, c))
}

/// `lambda * mean_n[-sum_c p_super log(p_sub + eps)]`, the cross-entropy of
/// the sub-graph against the detached super-net soft labels.
pub fn distill_loss<T: Real>(tape: &Tape<T>, p_super: &Tensor<T>, p_sub: &Var<T>, lambda: T) -> Result<Var<T>> {
    let (n, _) = check_rows("p_super", p_super)?;
    check_rows("p_sub", p_sub.value())?;
    if p_super.shape() != p_sub.shape() {
        return Err(Error::Dimension {
            op: "distill_loss",
            detail: format!("{:?} vs {:?}", p_super.shape(), p_sub.shape()),
        });
    }
    let log_q = tape.log(&tape.add_scalar(p_sub, T::of(DISTILL_EPS)));
    let weighted = tape.mul(&log_q, &tape.constant(p_super.clone()))?;
    let total = tape.sum(&weighted);
    Ok(tape.scale(&total, -lambda / T::of(n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        assert!(DropBlockConfig::default().validate().is_ok());
        let mut c = DropBlockConfig::default();
        c.block_size = 4;
        assert!(c.validate().is_err());
        let mut c = DropBlockConfig::default();
        c.milestones = vec![(0.0, 0.0), (0.5, 0.1), (0.5, 0.2)];
        assert!(c.validate().is_err());
        let mut c = DropBlockConfig::default();
        c.milestones = vec![(0.1, 0.0)];
        assert!(c.validate().is_err());
        let mut c = DropBlockConfig::default();
        c.milestones = vec![(0.0, 0.0), (0.5, 1.0)];
        assert!(c.validate().is_err());
        assert!(DistillConfig { lambda_final: -1.0 }.validate().is_err());
    }

    #[test]
    fn oversized_block_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = dropblock_mask::<f32, _>(&[1, 1, 2, 2], 3, 0.1, &mut rng).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn dropped_cells_form_whole_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = dropblock_mask::<f64, _>(&[1, 1, 9, 9], 3, 0.3, &mut rng).unwrap();
        // every zero lies inside some fully zero 3x3 square
        let at = |i: usize, j: usize| m.data()[i * 9 + j];
        for i in 0..9 {
            for j in 0..9 {
                if at(i, j) == 0.0 {
                    let covered = (i.saturating_sub(2)..=i.min(6)).any(|a| {
                        (j.saturating_sub(2)..=j.min(6)).any(|b| (a..a + 3).all(|p| (b..b + 3).all(|q| at(p, q) == 0.0)))
                    });
                    assert!(covered, "stray zero at {i},{j}");
                }
            }
        }
    }
}

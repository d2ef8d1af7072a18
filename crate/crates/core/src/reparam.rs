//! Folding trained adapters into the frozen backbone so inference runs the
//! plain architecture.
//!
//! Every adapter is affine, `x -> x M + 1 b^T` with `M = I + A` (`A` the
//! adaptation matrix). A `before_*` adapter sits between a LayerNorm output and
//! the block's first linear maps, so `(x M + 1 b^T) W + 1 c^T = x (M W) + 1 (b^T W + c^T)`.
//! An `after_*` adapter sits after the block's last linear map, so
//! `(y W + 1 c^T) M + 1 b^T = y (W M) + 1 (c^T M + b^T)`. No nonlinearity or
//! normalization is crossed in either case, which is what makes the fold exact
//! up to floating-point reassociation.

use crate::arc::{AdapterBank, Form, Mode, Site};
use crate::checkpoint::config_digest;
use crate::error::{Error, Result};
use crate::kernel::{matmul, Matrix, Rng};
use crate::vit::{self, BackboneWeights, Image};

/// Maximum logit deviation accepted between adapted and fused models.
pub const FUSION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub config_digest: [u8; 32],
    pub max_verified_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights {
    pub weights: BackboneWeights,
    pub provenance: Provenance,
}

/// `W' = W + A W` for an input-side adapter, `W' = W + W A` for an output-side one.
fn fold_matrix(w: &Matrix, a: &Matrix, input_side: bool) -> Result<Matrix> {
    let extra = if input_side { matmul(a, w)? } else { matmul(w, a)? };
    w.add(&extra)
}

fn fold_before(w: &mut Matrix, bias: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    let shift = matmul(b, w)?;
    *w = fold_matrix(w, a, true)?;
    *bias = bias.add(&shift)?;
    Ok(())
}

fn fold_after(w: &mut Matrix, bias: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    *w = fold_matrix(w, a, false)?;
    *bias = fold_matrix(bias, a, false)?.add(b)?;
    Ok(())
}

/// Fuses every adapter of `bank` into a copy of `weights`.
pub fn fuse(weights: &BackboneWeights, bank: &AdapterBank, source: &str) -> Result<FusedWeights> {
    if bank.is_training() {
        return Err(Error::Contract("cannot fuse a bank in training mode".into()));
    }
    let cfg = bank.config();
    cfg.validate(&weights.config)?;
    if cfg.form == Form::Parallel && cfg.positions.iter().any(|s| !s.is_before()) {
        return Err(Error::Config("parallel adapters fuse only at before_* sites".into()));
    }
    let mut fused = weights.clone();
    for hook in bank.hooks().iter() {
        let a = bank.adaptation_matrix(hook.layer, hook.site)?;
        // an all-zero adapter is the identity; skip it so identity banks fuse bitwise
        let b = bank.output_bias(hook.layer, hook.site)?;
        if a.max_abs() == 0.0 && b.max_abs() == 0.0 {
            continue;
        }
        let lw = &mut fused.layers[hook.layer - 1];
        match hook.site {
            Site::BeforeMha => {
                fold_before(&mut lw.wq, &mut lw.bq, &a, &b)?;
                fold_before(&mut lw.wk, &mut lw.bk, &a, &b)?;
                fold_before(&mut lw.wv, &mut lw.bv, &a, &b)?;
            }
            Site::BeforeFfn => fold_before(&mut lw.w1, &mut lw.b1, &a, &b)?,
            Site::AfterMha => fold_after(&mut lw.wo, &mut lw.bo, &a, &b)?,
            Site::AfterFfn => fold_after(&mut lw.w2, &mut lw.b2, &a, &b)?,
        }
    }
    Ok(FusedWeights {
        weights: fused,
        provenance: Provenance {
            source: source.to_string(),
            config_digest: config_digest(&weights.config, cfg),
            max_verified_deviation: None,
        },
    })
}

/// Max absolute logit difference between the adapted model (eval mode) and
/// the plain forward over `fused`, over `trials` random images.
pub fn verify_fusion(
    weights: &BackboneWeights,
    bank: &AdapterBank,
    fused: &BackboneWeights,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Contract("verify_fusion needs at least one trial".into()));
    }
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let img = Image::random(&weights.config, rng);
        let adapted = vit::forward(&img, weights, Some(bank), Mode::Eval)?;
        let plain = vit::forward(&img, fused, None, Mode::Eval)?;
        worst = worst.max(adapted.max_abs_diff(&plain)?);
    }
    Ok(worst)
}

impl FusedWeights {
    /// Runs [`verify_fusion`] and records the result in the provenance.
    pub fn verify(&mut self, original: &BackboneWeights, bank: &AdapterBank, trials: usize, rng: &mut Rng) -> Result<f64> {
        let dev = verify_fusion(original, bank, &self.weights, trials, rng)?;
        self.provenance.max_verified_deviation = Some(dev);
        Ok(dev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arc::{ArcConfig, Sharing};
    use crate::vit::BackboneConfig;

    fn setup(cfg: &ArcConfig) -> (BackboneWeights, AdapterBank) {
        let bb = BackboneConfig::toy();
        let w = BackboneWeights::random(&bb, &mut Rng::new(1)).unwrap();
        let bank = AdapterBank::init(cfg, &bb, &mut Rng::new(2)).unwrap();
        (w, bank)
    }

    fn randomize(bank: &mut AdapterBank, rng: &mut Rng) {
        let names: Vec<String> = bank.tensors().keys().cloned().collect();
        for n in names {
            let t = bank.tensor_mut(&n).unwrap();
            *t = rng.normal_matrix(t.rows(), t.cols(), 0.3);
        }
    }

    #[test]
    fn identity_bank_fuses_bitwise() {
        let (w, bank) = setup(&ArcConfig::default().with_bottleneck(4));
        let fused = fuse(&w, &bank, "t").unwrap();
        assert_eq!(fused.weights, w);
        let dev = verify_fusion(&w, &bank, &fused.weights, 4, &mut Rng::new(3)).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn hand_sized_fold() {
        // D=2, D'=1: W_down = [1,0]^T, c = [3], W_1 = I  ->  W_1' = [[4,0],[0,1]]
        let w = Matrix::identity(2);
        let a = matmul(
            &Matrix::col_vector(&[1.0, 0.0]).mul_row(&Matrix::scalar(3.0)).unwrap(),
            &Matrix::row_vector(&[1.0, 0.0]),
        )
        .unwrap();
        let folded = fold_matrix(&w, &a, true).unwrap();
        assert_eq!(folded, Matrix::from_rows(&[[4.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn random_adapters_fuse_within_tolerance() {
        for sharing in Sharing::ALL {
            let cfg = ArcConfig::default()
                .with_bottleneck(4)
                .with_sharing(sharing)
                .with_positions(&Site::ALL);
            let (w, mut bank) = setup(&cfg);
            randomize(&mut bank, &mut Rng::new(5));
            let fused = fuse(&w, &bank, "t").unwrap();
            let dev = verify_fusion(&w, &bank, &fused.weights, 8, &mut Rng::new(6)).unwrap();
            assert!(dev <= FUSION_TOL, "{sharing:?}: {dev:e}");
            for ((_, a), (_, b)) in w.named_tensors().iter().zip(fused.weights.named_tensors()) {
                assert_eq!(a.shape(), b.shape());
            }
        }
    }

    #[test]
    fn corrupted_fusion_is_detected() {
        let (w, mut bank) = setup(&ArcConfig::default().with_bottleneck(4));
        randomize(&mut bank, &mut Rng::new(5));
        let mut fused = fuse(&w, &bank, "t").unwrap();
        fused.weights.layers[0].w1.data_mut()[0] += 1e-3;
        let dev = verify_fusion(&w, &bank, &fused.weights, 8, &mut Rng::new(6)).unwrap();
        assert!(dev > 1e-5, "{dev:e}");
    }

    #[test]
    fn training_bank_rejected() {
        let (w, mut bank) = setup(&ArcConfig::default().with_bottleneck(4));
        bank.set_training(true);
        assert!(matches!(fuse(&w, &bank, "t"), Err(Error::Contract(_))));
    }
}

//! Patch-based attention dropout.
//!
//! During training each encoder block's output embeddings `O` (s×d) are
//! rescaled token by token, either by a hard drop mask that zeroes the most
//! activated tokens or by a sigmoid importance map. The branch is picked at
//! random with the embedding drop rate α. At inference the layer is the
//! identity. There are no trainable parameters.

use rand::Rng;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Drop,
    Importance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PadlIntermediate {
    pub mean_attention: Vec<f64>,
    pub importance_map: Vec<f64>,
    pub drop_mask: Vec<f64>,
    pub branch: Branch,
}

/// Mean over the embedding dimension for every token, class token included.
pub fn mean_attention(o: &Tensor) -> Result<Vec<f64>> {
    Ok(tensor::row_means(o)?.into_data())
}

pub fn importance_map(mean: &[f64]) -> Vec<f64> {
    mean.iter().map(|&m| tensor::sigmoid_scalar(m)).collect()
}

/// 0 where `mean[i] >= λ·max(mean)`, else 1.
///
/// Applied literally, including when every mean is negative (the threshold
/// then lies above the maximum and nothing is dropped).
pub fn drop_mask(mean: &[f64], drop_threshold: f64) -> Vec<f64> {
    let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = drop_threshold * max;
    mean.iter()
        .map(|&m| if m >= cut { 0.0 } else { 1.0 })
        .collect()
}

/// Draws `p_random ∈ [0,1)` once and picks the drop branch when it falls below α.
pub fn choose_branch<R: Rng + ?Sized>(rng: &mut R, drop_rate: f64) -> Branch {
    let p: f64 = rng.random();
    if p < drop_rate {
        Branch::Drop
    } else {
        Branch::Importance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadlParams {
    pub drop_threshold: f64,
    pub drop_rate: f64,
    pub exempt_cls: bool,
}

impl PadlParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_threshold > 0.0 && self.drop_threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "drop threshold {} outside (0, 1]",
                self.drop_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::invalid(format!(
                "drop rate {} outside [0, 1]",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

/// Row scale for the drop branch, honoring the class-token exemption.
pub(crate) fn drop_scale(mean: &[f64], params: &PadlParams) -> Vec<f64> {
    let mut mask = drop_mask(mean, params.drop_threshold);
    if params.exempt_cls {
        mask[0] = 1.0;
    }
    mask
}

/// Applies the layer to `o`. Eval mode returns `o` untouched and no
/// intermediate.
pub fn apply_padl<R: Rng + ?Sized>(
    o: &Tensor,
    params: &PadlParams,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor, Option<PadlIntermediate>)> {
    params.validate()?;
    if mode == Mode::Eval {
        return Ok((o.clone(), None));
    }
    let branch = choose_branch(rng, params.drop_rate);
    let mean = mean_attention(o)?;
    let importance = importance_map(&mean);
    let mask = drop_mask(&mean, params.drop_threshold);
    let out = match branch {
        Branch::Drop => tensor::scale_rows(o, &drop_scale(&mean, params))?,
        Branch::Importance => autodiff::importance_scale(o, params.exempt_cls)?,
    };
    Ok((
        out,
        Some(PadlIntermediate {
            mean_attention: mean,
            importance_map: importance,
            drop_mask: mask,
            branch,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    const PAPER: PadlParams = PadlParams {
        drop_threshold: 0.9,
        drop_rate: 0.75,
        exempt_cls: false,
    };

    /// 4×3 matrix whose row means are [0.5, 1.0, 0.91, 0.2].
    fn hand_matrix() -> Tensor {
        Tensor::from_rows(&[
            vec![0.5, 0.4, 0.6],
            vec![1.0, 1.5, 0.5],
            vec![0.91, 0.91, 0.91],
            vec![0.2, 0.0, 0.4],
        ])
        .unwrap()
    }

    #[test]
    fn mean_attention_examples() {
        let ones = Tensor::full(&[3, 4], 1.0);
        assert_eq!(mean_attention(&ones).unwrap(), vec![1.0, 1.0, 1.0]);

        let rows = Tensor::from_rows(&[vec![2.0; 4], vec![-3.0; 4]]).unwrap();
        assert_eq!(mean_attention(&rows).unwrap(), vec![2.0, -3.0]);

        let mut rng = seed::rng(&[11]);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = Tensor::new(vec![5, 8], data.clone()).unwrap();
        let got = mean_attention(&m).unwrap();
        for (i, g) in got.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..8 {
                acc += data[i * 8 + j];
            }
            assert!((g - acc / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn importance_map_examples() {
        assert_eq!(importance_map(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert!((importance_map(&[3f64.ln()])[0] - 0.75).abs() < 1e-15);
        let m = importance_map(&[-1.0, 0.2, 0.3, 4.0]);
        assert!(m.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn drop_mask_examples() {
        assert_eq!(drop_mask(&[0.5, 1.0, 0.91, 0.2], 0.9), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(drop_mask(&[0.3; 5], 1.0), vec![0.0; 5]);
        assert_eq!(drop_mask(&[0.3; 5], 0.2), vec![0.0; 5]);
        assert_eq!(drop_mask(&[-1.0, -2.0], 0.9), vec![1.0, 1.0]);
    }

    #[test]
    fn eval_mode_is_identity() {
        let o = hand_matrix();
        let mut rng = seed::rng(&[1]);
        let (out, inter) = apply_padl(&o, &PAPER, &mut rng, Mode::Eval).unwrap();
        assert_eq!(out, o);
        assert!(inter.is_none());
    }

    #[test]
    fn zero_drop_rate_always_importance() {
        let o = hand_matrix();
        let params = PadlParams { drop_rate: 0.0, ..PAPER };
        for s in 0..20 {
            let mut rng = seed::rng(&[s]);
            let (out, inter) = apply_padl(&o, &params, &mut rng, Mode::Train).unwrap();
            assert_eq!(inter.unwrap().branch, Branch::Importance);
            let means = mean_attention(&o).unwrap();
            for i in 0..4 {
                let sg = tensor::sigmoid_scalar(means[i]);
                for j in 0..3 {
                    assert_eq!(out.get2(i, j), o.get2(i, j) * sg);
                }
            }
        }
    }

    #[test]
    fn full_drop_rate_zeroes_top_rows() {
        let o = hand_matrix();
        let params = PadlParams { drop_rate: 1.0, ..PAPER };
        let mut rng = seed::rng(&[3]);
        let (out, inter) = apply_padl(&o, &params, &mut rng, Mode::Train).unwrap();
        let inter = inter.unwrap();
        assert_eq!(inter.branch, Branch::Drop);
        assert_eq!(inter.drop_mask, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(out.row(0), o.row(0));
        assert_eq!(out.row(1), &[0.0; 3]);
        assert_eq!(out.row(2), &[0.0; 3]);
        assert_eq!(out.row(3), o.row(3));
    }

    #[test]
    fn exempt_cls_keeps_first_row() {
        let o = Tensor::from_rows(&[vec![5.0, 5.0], vec![1.0, 1.0]]).unwrap();
        let params = PadlParams {
            drop_rate: 1.0,
            exempt_cls: true,
            ..PAPER
        };
        let (out, _) = apply_padl(&o, &params, &mut seed::rng(&[0]), Mode::Train).unwrap();
        assert_eq!(out.row(0), o.row(0));
        let params = PadlParams {
            drop_rate: 0.0,
            exempt_cls: true,
            ..PAPER
        };
        let (out, _) = apply_padl(&o, &params, &mut seed::rng(&[0]), Mode::Train).unwrap();
        assert_eq!(out.row(0), o.row(0));
        assert!(out.get2(1, 0) < 1.0);
    }

    #[test]
    fn drop_branch_frequency_matches_rate() {
        let mut rng = seed::rng(&[2024]);
        let draws = 10_000;
        let drops = (0..draws)
            .filter(|_| choose_branch(&mut rng, 0.75) == Branch::Drop)
            .count();
        let freq = drops as f64 / draws as f64;
        assert!((freq - 0.75).abs() <= 0.02, "drop frequency {freq}");
    }

    #[test]
    fn invalid_params_rejected() {
        let o = hand_matrix();
        let mut rng = seed::rng(&[0]);
        let bad = PadlParams { drop_threshold: 0.0, ..PAPER };
        assert!(apply_padl(&o, &bad, &mut rng, Mode::Train).is_err());
        let bad = PadlParams { drop_rate: -0.1, ..PAPER };
        assert!(apply_padl(&o, &bad, &mut rng, Mode::Train).is_err());
    }

    proptest! {
        #[test]
        fn branch_outputs_are_shape_preserving(
            vals in prop::collection::vec(-3.0f64..3.0, 24),
            s in 0u64..1000,
        ) {
            let o = Tensor::new(vec![6, 4], vals).unwrap();
            let mut rng = seed::rng(&[s]);
            let (out, inter) = apply_padl(&o, &PAPER, &mut rng, Mode::Train).unwrap();
            prop_assert_eq!(out.shape(), o.shape());
            match inter.unwrap().branch {
                Branch::Drop => {
                    for i in 0..6 {
                        let zero = out.row(i).iter().all(|v| *v == 0.0);
                        prop_assert!(zero || out.row(i) == o.row(i));
                    }
                }
                Branch::Importance => {
                    for i in 0..6 {
                        let norm_in: f64 = o.row(i).iter().map(|v| v * v).sum();
                        let norm_out: f64 = out.row(i).iter().map(|v| v * v).sum();
                        if norm_in > 0.0 {
                            prop_assert!(norm_out < norm_in);
                        }
                    }
                }
            }
        }

        #[test]
        fn drop_mask_is_scale_covariant(
            vals in prop::collection::vec(-3.0f64..3.0, 1..20),
            c in 1e-3f64..1e3,
            lambda in 0.05f64..=1.0,
        ) {
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let a = drop_mask(&vals, lambda);
            let b = drop_mask(&scaled, lambda);
            // exact ties can flip under rounding; compare away from the cut
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..vals.len() {
                if (vals[i] - lambda * max).abs() > 1e-9 {
                    prop_assert_eq!(a[i], b[i]);
                }
            }
            let argmax = vals.iter().enumerate().fold(0, |bi, (i, v)| if *v > vals[bi] { i } else { bi });
            if max > 0.0 {
                prop_assert_eq!(a[argmax], 0.0);
            }
        }
    }
}

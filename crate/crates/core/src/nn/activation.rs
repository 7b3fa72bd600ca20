use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Relu,
    /// Sorts each consecutive block of `group_size` units in descending order.
    /// `group_size = 2` is MaxMin.
    GroupSort {
        group_size: usize,
    },
}

impl Activation {
    pub const MAX_MIN: Activation = Activation::GroupSort { group_size: 2 };

    /// Whether a layer of width `width` can feed this activation.
    pub fn accepts_width(&self, width: usize) -> bool {
        match *self {
            Activation::Relu => true,
            Activation::GroupSort { group_size } => group_size > 0 && width % group_size == 0,
        }
    }
}

/// What the backward pass needs to route gradients through an activation.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationRecord {
    Relu(ReluMask),
    GroupSort(SortPermutation),
}

/// `true` where the ReLU input was strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluMask {
    rows: usize,
    cols: usize,
    active: Vec<bool>,
}

/// For every output slot, the input column it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct SortPermutation {
    rows: usize,
    cols: usize,
    source: Vec<u32>,
}

impl SortPermutation {
    pub fn source_columns(&self, row: usize) -> &[u32] {
        &self.source[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_identity(&self) -> bool {
        self.source
            .chunks_exact(self.cols.max(1))
            .all(|row| row.iter().enumerate().all(|(j, &s)| s as usize == j))
    }
}

pub fn relu_forward(h: &Tensor2) -> (Tensor2, ReluMask) {
    let active: Vec<bool> = h.data().iter().map(|&v| v > 0.0).collect();
    let out = h.map(|v| if v > 0.0 { v } else { 0.0 });
    (
        out,
        ReluMask {
            rows: h.rows(),
            cols: h.cols(),
            active,
        },
    )
}

pub fn relu_backward(mask: &ReluMask, grad: &Tensor2) -> Result<Tensor2> {
    if grad.shape() != (mask.rows, mask.cols) {
        return Err(Error::shape(
            "relu_backward",
            format!("{}x{}", mask.rows, mask.cols),
            format!("{}x{}", grad.rows(), grad.cols()),
        ));
    }
    let data = grad
        .data()
        .iter()
        .zip(&mask.active)
        .map(|(&g, &a)| if a { g } else { 0.0 })
        .collect();
    Tensor2::from_vec(mask.rows, mask.cols, data)
}

pub fn groupsort_forward(h: &Tensor2, group_size: usize) -> Result<(Tensor2, SortPermutation)> {
    if group_size == 0 || h.cols() % group_size != 0 {
        return Err(Error::shape(
            "groupsort_forward",
            format!("width divisible by {group_size}"),
            h.cols(),
        ));
    }
    let cols = h.cols();
    let mut out = Tensor2::zeros(h.rows(), cols);
    let mut source = Vec::with_capacity(h.rows() * cols);
    let mut order: Vec<usize> = Vec::with_capacity(group_size);
    for (i, row) in h.iter_rows().enumerate() {
        let out_row = out.row_mut(i);
        for start in (0..cols).step_by(group_size) {
            if group_size == 2 {
                // MaxMin fast path; ties keep the original order.
                let (a, b) = (row[start], row[start + 1]);
                if b > a {
                    out_row[start] = b;
                    out_row[start + 1] = a;
                    source.extend([(start + 1) as u32, start as u32]);
                } else {
                    out_row[start] = a;
                    out_row[start + 1] = b;
                    source.extend([start as u32, (start + 1) as u32]);
                }
                continue;
            }
            order.clear();
            order.extend(start..start + group_size);
            // Stable sort: among equal values the first occurrence comes first.
            order.sort_by(|&p, &q| row[q].total_cmp(&row[p]));
            for (k, &src) in order.iter().enumerate() {
                out_row[start + k] = row[src];
                source.push(src as u32);
            }
        }
    }
    Ok((
        out,
        SortPermutation {
            rows: h.rows(),
            cols,
            source,
        },
    ))
}

/// Routes each upstream gradient entry back to the input slot it came from.
pub fn groupsort_backward(perm: &SortPermutation, grad: &Tensor2) -> Result<Tensor2> {
    if grad.shape() != (perm.rows, perm.cols) {
        return Err(Error::shape(
            "groupsort_backward",
            format!("{}x{}", perm.rows, perm.cols),
            format!("{}x{}", grad.rows(), grad.cols()),
        ));
    }
    let mut out = Tensor2::zeros(perm.rows, perm.cols);
    for i in 0..perm.rows {
        let src = perm.source_columns(i);
        let g = grad.row(i);
        let o = out.row_mut(i);
        for (k, &s) in src.iter().enumerate() {
            o[s as usize] = g[k];
        }
    }
    Ok(out)
}

pub(crate) fn activation_forward(
    activation: Activation,
    h: &Tensor2,
) -> Result<(Tensor2, ActivationRecord)> {
    match activation {
        Activation::Relu => {
            let (out, mask) = relu_forward(h);
            Ok((out, ActivationRecord::Relu(mask)))
        }
        Activation::GroupSort { group_size } => {
            let (out, perm) = groupsort_forward(h, group_size)?;
            Ok((out, ActivationRecord::GroupSort(perm)))
        }
    }
}

/// Forward pass without keeping a record, for inference.
pub(crate) fn activation_apply(activation: Activation, h: &mut Tensor2) -> Result<()> {
    match activation {
        Activation::Relu => {
            h.data_mut().iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v = 0.0
                }
            });
            Ok(())
        }
        Activation::GroupSort { group_size } => {
            if group_size == 0 || h.cols() % group_size != 0 {
                return Err(Error::shape(
                    "groupsort_forward",
                    format!("width divisible by {group_size}"),
                    h.cols(),
                ));
            }
            for chunk in h.data_mut().chunks_exact_mut(group_size) {
                if group_size == 2 {
                    if chunk[1] > chunk[0] {
                        chunk.swap(0, 1);
                    }
                } else {
                    chunk.sort_by(|a, b| b.total_cmp(a));
                }
            }
            Ok(())
        }
    }
}

pub(crate) fn activation_backward(record: &ActivationRecord, grad: &Tensor2) -> Result<Tensor2> {
    match record {
        ActivationRecord::Relu(mask) => relu_backward(mask, grad),
        ActivationRecord::GroupSort(perm) => groupsort_backward(perm, grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_clamps_negatives() {
        let (out, _) = relu_forward(&Tensor2::row_vector(&[-1.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn groupsort_examples() {
        let (out, _) = groupsort_forward(&Tensor2::row_vector(&[1.0, 3.0]), 2).unwrap();
        assert_eq!(out.data(), &[3.0, 1.0]);

        let (out, _) = groupsort_forward(&Tensor2::row_vector(&[3.0, 1.0, 2.0, 5.0]), 2).unwrap();
        assert_eq!(out.data(), &[3.0, 1.0, 5.0, 2.0]);

        let (out, perm) =
            groupsort_forward(&Tensor2::row_vector(&[4.0, 2.0, 9.0, 1.0]), 2).unwrap();
        assert_eq!(out.data(), &[4.0, 2.0, 9.0, 1.0]);
        assert!(perm.is_identity());
    }

    #[test]
    fn groupsort_general_group_size() {
        let h = Tensor2::row_vector(&[1.0, 5.0, 3.0, 0.0, -2.0, 7.0]);
        let (out, perm) = groupsort_forward(&h, 3).unwrap();
        assert_eq!(out.data(), &[5.0, 3.0, 1.0, 7.0, 0.0, -2.0]);
        assert_eq!(perm.source_columns(0), &[1, 2, 0, 5, 3, 4]);
    }

    #[test]
    fn ties_keep_first_occurrence_first() {
        let h = Tensor2::row_vector(&[2.0, 2.0, 2.0]);
        let (_, perm) = groupsort_forward(&h, 3).unwrap();
        assert!(perm.is_identity());
        let (_, perm) = groupsort_forward(&Tensor2::row_vector(&[1.0, 1.0]), 2).unwrap();
        assert!(perm.is_identity());
    }

    #[test]
    fn groupsort_rejects_indivisible_width() {
        assert!(matches!(
            groupsort_forward(&Tensor2::row_vector(&[1.0, 2.0, 3.0]), 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identity_permutation_backward_is_passthrough() {
        let (_, perm) = groupsort_forward(&Tensor2::row_vector(&[4.0, 2.0, 9.0, 1.0]), 2).unwrap();
        let g = Tensor2::row_vector(&[0.1, -0.2, 0.3, 0.4]);
        assert_eq!(groupsort_backward(&perm, &g).unwrap(), g);
    }

    #[test]
    fn inference_path_matches_recorded_path() {
        let h =
            Tensor2::from_rows(&[vec![0.3, -1.0, 2.0, 2.5], vec![-0.5, 0.2, 0.0, 0.0]]).unwrap();
        for act in [
            Activation::Relu,
            Activation::MAX_MIN,
            Activation::GroupSort { group_size: 4 },
        ] {
            let (recorded, _) = activation_forward(act, &h).unwrap();
            let mut inplace = h.clone();
            activation_apply(act, &mut inplace).unwrap();
            assert_eq!(recorded, inplace);
        }
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    proptest! {
        #[test]
        fn groupsort_permutes_each_group(
            values in prop::collection::vec(-10.0f64..10.0, 12),
            group in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12]),
        ) {
            let (out, _) = groupsort_forward(&Tensor2::row_vector(&values), group).unwrap();
            for (a, b) in values.chunks(group).zip(out.data().chunks(group)) {
                prop_assert_eq!(sorted(a.to_vec()), sorted(b.to_vec()));
                prop_assert!(b.windows(2).all(|w| w[0] >= w[1]));
            }
        }

        #[test]
        fn groupsort_is_one_lipschitz_in_linf(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            group in prop::sample::select(vec![2usize, 4, 8]),
        ) {
            let (fa, _) = groupsort_forward(&Tensor2::row_vector(&a), group).unwrap();
            let (fb, _) = groupsort_forward(&Tensor2::row_vector(&b), group).unwrap();
            let dout = fa.data().iter().zip(fb.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            let din = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            prop_assert!(dout <= din + 1e-12);
        }
    }
}

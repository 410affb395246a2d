//! Learnable codebook and element-wise nearest-code quantization.
//!
//! Quantization maps each spatial cell of a feature raster to the index of
//! the nearest codebook row (Euclidean distance, ties broken by lowest
//! index). The straight-through convention for training lives in
//! [`quantization_loss`] together with [`crate::autograd::Graph::straight_through`].

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, T};
use crate::error::{ArsegError, Result};

/// The code matrix `[V x d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Array2<f64>,
}

impl Codebook {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        let cb = Codebook { vectors };
        cb.validate()?;
        Ok(cb)
    }

    /// Seeded init with entries uniform in `[-1/V, 1/V]`.
    pub fn init(v: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / v as f64;
        let vals: Vec<f64> = (0..v * d).map(|_| rng.random_range(-bound..bound)).collect();
        Codebook {
            vectors: Array2::from_shape_vec((v, d), vals).unwrap(),
        }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() < 2 {
            return Err(ArsegError::invalid(format!(
                "codebook size {} < 2",
                self.size()
            )));
        }
        if self.dim() < 1 {
            return Err(ArsegError::invalid("codebook dimension must be >= 1"));
        }
        if !self.vectors.iter().all(|v| v.is_finite()) {
            return Err(ArsegError::invalid("codebook contains non-finite entries"));
        }
        Ok(())
    }
}

/// Integer raster of code indices at one pyramid scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    pub indices: Array2<usize>,
    /// 1-based scale position in the owning pyramid.
    pub scale_index: usize,
}

impl TokenMap {
    pub fn shape(&self) -> (usize, usize) {
        self.indices.dim()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate_against(&self, codebook: &Codebook) -> Result<()> {
        let v = codebook.size();
        for &idx in self.indices.iter() {
            if idx >= v {
                return Err(ArsegError::Index(format!(
                    "token index {idx} out of range for codebook of size {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Nearest-code index for one `d`-vector; squared-distance scan with early
/// exit, ties broken by lowest index.
fn nearest_code(cell: &[f64], codebook: &ArrayView2<'_, f64>) -> usize {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (v, row) in codebook.rows().into_iter().enumerate() {
        let mut dist = 0.0;
        for (a, b) in cell.iter().zip(row.iter()) {
            let diff = a - b;
            dist += diff * diff;
            if dist > best_dist {
                break;
            }
        }
        if dist < best_dist {
            best_dist = dist;
            best = v;
        }
    }
    best
}

/// Quantizes a channel-first feature raster `[d, h, w]` cell-by-cell.
pub fn quantize(feature: &Array3<f64>, codebook: &Codebook, scale_index: usize) -> Result<TokenMap> {
    if !feature.iter().all(|v| v.is_finite()) {
        return Err(ArsegError::invalid("feature contains non-finite entries"));
    }
    let (d, h, w) = feature.dim();
    if d != codebook.dim() {
        return Err(ArsegError::shape(
            format!("feature depth {}", codebook.dim()),
            format!("{d}"),
        ));
    }
    let view = codebook.vectors.view();
    let mut indices = Array2::<usize>::zeros((h, w));
    let mut cell = vec![0.0; d];
    for i in 0..h {
        for j in 0..w {
            for c in 0..d {
                cell[c] = feature[(c, i, j)];
            }
            indices[(i, j)] = nearest_code(&cell, &view);
        }
    }
    Ok(TokenMap {
        indices,
        scale_index,
    })
}

/// Pure codebook row copy: output `[d, h, w]` with `out[:, i, j] = Z[tokens[i,j]]`.
pub fn lookup(tokens: &TokenMap, codebook: &Codebook) -> Result<Array3<f64>> {
    tokens.validate_against(codebook)?;
    let (h, w) = tokens.shape();
    let d = codebook.dim();
    let mut out = Array3::<f64>::zeros((d, h, w));
    for i in 0..h {
        for j in 0..w {
            let row = codebook.vectors.row(tokens.indices[(i, j)]);
            for c in 0..d {
                out[(c, i, j)] = row[c];
            }
        }
    }
    Ok(out)
}

/// Quantization constraint `||m - sg(m_hat)||_2 + beta * ||sg(m) - m_hat||_2`.
///
/// The first term back-propagates only into `pre_quant` (encoder path), the
/// second only into `post_quant` (codebook path). Forward value equals
/// `(1 + beta) * ||m - m_hat||_2`.
pub fn quantization_loss(g: &mut Graph, pre_quant: T, post_quant: T, beta: f64) -> Result<T> {
    if g.value(pre_quant).shape() != g.value(post_quant).shape() {
        return Err(ArsegError::shape(
            format!("{:?}", g.value(pre_quant).shape()),
            format!("{:?}", g.value(post_quant).shape()),
        ));
    }
    if beta < 0.0 {
        return Err(ArsegError::invalid("beta must be >= 0"));
    }
    let post_sg = g.detach(post_quant);
    let enc_diff = g.sub(pre_quant, post_sg);
    let enc_term = g.l2_norm(enc_diff);
    let pre_sg = g.detach(pre_quant);
    let code_diff = g.sub(pre_sg, post_quant);
    let code_norm = g.l2_norm(code_diff);
    let code_term = g.scale(code_norm, beta);
    Ok(g.add(enc_term, code_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn cb(rows: Vec<Vec<f64>>) -> Codebook {
        let d = rows[0].len();
        let v = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Codebook::new(Array2::from_shape_vec((v, d), flat).unwrap()).unwrap()
    }

    fn single_cell(values: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((values.len(), 1, 1), values.to_vec()).unwrap()
    }

    #[test]
    fn nearest_by_exhaustive_distance() {
        let codebook = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let feature = single_cell(&[0.9, 1.2]);
        let tokens = quantize(&feature, &codebook, 1).unwrap();
        assert_eq!(tokens.indices[(0, 0)], 1);
    }

    #[test]
    fn exact_codeword_maps_to_itself() {
        let codebook = cb(vec![vec![0.25, -0.5], vec![1.0, 1.0]]);
        let feature = single_cell(&[0.25, -0.5]);
        let tokens = quantize(&feature, &codebook, 1).unwrap();
        assert_eq!(tokens.indices[(0, 0)], 0);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let codebook = cb(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let feature = single_cell(&[3.0, -4.0]);
        let tokens = quantize(&feature, &codebook, 1).unwrap();
        assert_eq!(tokens.indices[(0, 0)], 0);
    }

    #[test]
    fn non_finite_feature_rejected() {
        let codebook = cb(vec![vec![0.0], vec![1.0]]);
        let feature = single_cell(&[f64::NAN]);
        assert!(quantize(&feature, &codebook, 1).is_err());
    }

    #[test]
    fn lookup_copies_rows() {
        let codebook = cb(vec![vec![0.5, -0.5], vec![1.0, 2.0]]);
        let tokens = TokenMap {
            indices: Array2::zeros((2, 3)),
            scale_index: 1,
        };
        let out = lookup(&tokens, &codebook).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(out[(0, i, j)], 0.5);
                assert_eq!(out[(1, i, j)], -0.5);
            }
        }
    }

    #[test]
    fn lookup_single_cell_row3() {
        let codebook = cb(vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0, 2.0],
            vec![3.5, -1.0, 0.25, 9.0],
        ]);
        let tokens = TokenMap {
            indices: arr2(&[[3usize]]),
            scale_index: 1,
        };
        let out = lookup(&tokens, &codebook).unwrap();
        assert_eq!(out.shape(), &[4, 1, 1]);
        assert_eq!(out[(0, 0, 0)], 3.5);
        assert_eq!(out[(3, 0, 0)], 9.0);
    }

    #[test]
    fn lookup_out_of_range_errors() {
        let codebook = cb(vec![vec![0.0], vec![1.0]]);
        let tokens = TokenMap {
            indices: arr2(&[[2usize]]),
            scale_index: 1,
        };
        assert!(lookup(&tokens, &codebook).is_err());
    }

    #[test]
    fn quantize_lookup_idempotent_on_codewords() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let codebook = Codebook::init(8, 3, &mut rng);
        let tokens = TokenMap {
            indices: arr2(&[[0usize, 3], [7, 5]]),
            scale_index: 1,
        };
        let z = lookup(&tokens, &codebook).unwrap();
        let again = quantize(&z, &codebook, 1).unwrap();
        assert_eq!(again.indices, tokens.indices);
        let z2 = lookup(&again, &codebook).unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn quantization_loss_forward_value() {
        // residual of ones over n cells, beta = 0.25 -> 1.25 * sqrt(n)
        let n = 12usize;
        let mut g = Graph::new();
        let pre = g.constant(ndarray::ArrayD::ones(ndarray::IxDyn(&[n])));
        let post = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n])));
        let loss = quantization_loss(&mut g, pre, post, 0.25).unwrap();
        let expected = 1.25 * (n as f64).sqrt();
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn quantization_loss_zero_at_equality_with_zero_grads() {
        let mut store = crate::nn::ParamStore::new();
        let a = store.add("a", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[4]), 0.7));
        let b = store.add("b", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[4]), 0.7));
        let mut ctx = crate::nn::Ctx::new(&store);
        let pa = ctx.p(a);
        let pb = ctx.p(b);
        let loss = quantization_loss(&mut ctx.g, pa, pb, 0.25).unwrap();
        assert_eq!(ctx.g.scalar(loss), 0.0);
        let grads = ctx.g.backward(loss);
        for slot in [a, b] {
            if let Some(g) = grads.get(slot) {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn first_term_has_no_gradient_into_post_quant() {
        let mut store = crate::nn::ParamStore::new();
        let a = store.add("a", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0));
        let b = store.add("b", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 2.0));
        let mut ctx = crate::nn::Ctx::new(&store);
        let pa = ctx.p(a);
        let pb = ctx.p(b);
        // beta = 0: loss is only the encoder term; post_quant must get no grad
        let loss = quantization_loss(&mut ctx.g, pa, pb, 0.0).unwrap();
        let grads = ctx.g.backward(loss);
        assert!(grads.get(b).is_none() || grads.get(b).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.get(a).is_some());
    }
}

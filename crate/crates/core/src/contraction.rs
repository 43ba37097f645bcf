//! Network evaluation: feature absorption followed by a chain reduction.
//!
//! Absorbing the local feature vector into every effective site leaves a
//! chain of small factors (boundary vectors, `chi x chi` transfer matrices and
//! one label-carrying block). The chain is then reduced either left to right
//! or as a balanced binary tree whose levels are independent pair products.
//!
//! Products of hundreds of transfer matrices leave the range of `f64`, so
//! every factor carries a power-of-two exponent next to its entries. Scaling
//! by a power of two is exact, which keeps both reduction orders comparable to
//! within reassociation error.

use rayon::prelude::*;

use crate::error::{FttnError, Result};
use crate::feature_map::{EmbeddedImage, LOCAL_DIM};
use crate::model::{effective_sites_with, ModelShape, MpsClassifier, SiteDims, Temperature};
use crate::tensor::{matmul_into, Tensor};

/// Rescale band for intermediate factors.
pub const SCALE_BAND: (f64, f64) = (0.5, 2.0);

/// Level length from which tree levels are reduced on the rayon pool.
const PARALLEL_LEVEL_MIN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionOrder {
    Sequential,
    ParallelTree,
}

impl ContractionOrder {
    pub fn name(self) -> &'static str {
        match self {
            ContractionOrder::Sequential => "sequential",
            ContractionOrder::ParallelTree => "parallel_tree",
        }
    }
}

/// Class scores as `values * exp(log_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledVector {
    pub values: Vec<f64>,
    pub log_scale: f64,
    exp2: i64,
}

impl ScaledVector {
    /// Wraps raw scores with a zero log scale.
    pub fn from_values(values: Vec<f64>) -> Self {
        ScaledVector {
            values,
            log_scale: 0.0,
            exp2: 0,
        }
    }

    pub(crate) fn from_factor(f: Factor) -> Self {
        let mut out = ScaledVector {
            values: f.tensor.into_data(),
            log_scale: 0.0,
            exp2: f.exp2,
        };
        out.canonicalize();
        out
    }

    /// Moves the largest magnitude into `[1, 2)` by a power of two.
    fn canonicalize(&mut self) {
        let max = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max > 0.0 && max.is_finite() {
            let e = binary_exponent(max);
            let s = pow2(-e);
            self.values.iter_mut().for_each(|v| *v *= s);
            self.exp2 += i64::from(e);
        }
        self.log_scale = self.exp2 as f64 * std::f64::consts::LN_2;
    }

    /// Multiplies the logits by `exp(ln_factor)`. The power-of-two exponent is
    /// left alone and no longer equals `log_scale / ln 2`.
    pub fn with_log_offset(&self, ln_factor: f64) -> ScaledVector {
        ScaledVector {
            values: self.values.clone(),
            log_scale: self.log_scale + ln_factor,
            exp2: self.exp2,
        }
    }

    /// Power-of-two exponent of the scale; `log_scale / ln 2` unless an
    /// offset was applied.
    pub fn exponent(&self) -> i64 {
        self.exp2
    }

    /// The unscaled scores. Entries overflow to infinity when the scale is
    /// beyond the `f64` range.
    pub fn logits(&self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.values.iter().map(|v| v * s).collect()
    }

    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        best
    }
}

/// One element of an absorbed chain, or a partial product of such elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    dims: SiteDims,
    tensor: Tensor,
    exp2: i64,
}

impl Factor {
    /// The neutral element: no bonds, no label, value one.
    pub fn unit() -> Self {
        Factor {
            dims: SiteDims {
                left: None,
                right: None,
                labels: None,
            },
            tensor: Tensor::scalar(1.0),
            exp2: 0,
        }
    }

    pub fn new(dims: SiteDims, tensor: Tensor) -> Result<Self> {
        if tensor.shape() != dims.absorbed_shape().as_slice() {
            return Err(FttnError::DimensionMismatch(format!(
                "factor tensor {:?} does not match dims {:?}",
                tensor.shape(),
                dims
            )));
        }
        Ok(Factor { dims, tensor, exp2: 0 })
    }

    pub fn dims(&self) -> SiteDims {
        self.dims
    }

    /// Entries scaled by `2^-exponent`, in `(left, right, label)` row-major order.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn exponent(&self) -> i64 {
        self.exp2
    }

    pub fn log_scale(&self) -> f64 {
        self.exp2 as f64 * std::f64::consts::LN_2
    }

    pub(crate) fn values(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Chain product `self * other` over the shared bond, with the label axis
    /// of whichever side carries one moved to the end.
    pub fn product(&self, other: &Factor) -> Result<Factor> {
        if self.dims.right != other.dims.left {
            return Err(FttnError::DimensionMismatch(format!(
                "bond {:?} cannot meet bond {:?}",
                self.dims.right, other.dims.left
            )));
        }
        if self.dims.labels.is_some() && other.dims.labels.is_some() {
            return Err(FttnError::DimensionMismatch("both factors carry a label axis".into()));
        }
        let rows = self.dims.left_len();
        let inner = self.dims.right_len();
        let cols = other.dims.right_len();
        let dims = SiteDims {
            left: self.dims.left,
            right: other.dims.right,
            labels: self.dims.labels.or(other.dims.labels),
        };
        let labels = dims.label_len();
        let mut out = vec![0.0; rows * cols * labels];
        let a = self.values();
        let b = other.values();
        if self.dims.labels.is_some() {
            // out[i, k, l] = sum_j a[i, j, l] b[j, k]
            for i in 0..rows {
                for j in 0..inner {
                    let a_ij = &a[(i * inner + j) * labels..(i * inner + j + 1) * labels];
                    for k in 0..cols {
                        let bjk = b[j * cols + k];
                        let o = &mut out[(i * cols + k) * labels..(i * cols + k + 1) * labels];
                        for (o, &x) in o.iter_mut().zip(a_ij) {
                            *o += x * bjk;
                        }
                    }
                }
            }
        } else {
            // labels (if any) ride along with the columns of `other`
            matmul_into(a, b, rows, inner, cols * labels, &mut out);
        }
        let mut f = Factor {
            dims,
            tensor: Tensor::new(dims.absorbed_shape(), out)?,
            exp2: self.exp2 + other.exp2,
        };
        f.rescale();
        Ok(f)
    }

    /// Sums the label axis against `weights`, leaving the bond axes.
    pub(crate) fn contract_labels(&self, weights: &[f64]) -> Result<Factor> {
        let labels = self.dims.label_len();
        if self.dims.labels.is_none() || weights.len() != labels {
            return Err(FttnError::DimensionMismatch(format!(
                "{} weights for label axis {:?}",
                weights.len(),
                self.dims.labels
            )));
        }
        let data = self
            .values()
            .chunks_exact(labels)
            .map(|row| row.iter().zip(weights).map(|(x, w)| x * w).sum())
            .collect();
        let dims = SiteDims {
            labels: None,
            ..self.dims
        };
        let mut f = Factor {
            dims,
            tensor: Tensor::new(dims.absorbed_shape(), data)?,
            exp2: self.exp2,
        };
        // small weights would otherwise leave a tiny mantissa under a large exponent
        f.rescale();
        Ok(f)
    }

    fn rescale(&mut self) {
        let max = self.tensor.max_abs();
        if max == 0.0 || (SCALE_BAND.0..=SCALE_BAND.1).contains(&max) {
            return;
        }
        let e = binary_exponent(max);
        let s = pow2(-e);
        self.tensor.data_mut().iter_mut().for_each(|v| *v *= s);
        self.exp2 += i64::from(e);
    }
}

/// `floor(log2(x))` for positive finite `x`, exact at powers of two.
fn binary_exponent(x: f64) -> i32 {
    let mut e = x.log2().floor() as i32;
    while x * pow2(-e) >= 2.0 {
        e += 1;
    }
    while x * pow2(-e) < 1.0 {
        e -= 1;
    }
    e
}

pub(crate) fn pow2(e: i32) -> f64 {
    // two steps keep the factor normal for |e| up to ~2000
    let half = e / 2;
    2f64.powi(half) * 2f64.powi(e - half)
}

/// Contracts every effective site with its feature vector over the physical axis.
pub fn absorb_features(shape: &ModelShape, effective_sites: &[Tensor], image: &EmbeddedImage) -> Result<Vec<Factor>> {
    if effective_sites.len() != shape.n_sites || image.len() != shape.n_sites {
        return Err(FttnError::DimensionMismatch(format!(
            "{} sites, {} weight tensors, {} feature vectors",
            shape.n_sites,
            effective_sites.len(),
            image.len()
        )));
    }
    effective_sites
        .iter()
        .zip(image.sites())
        .enumerate()
        .map(|(k, (site, psi))| absorb_site(shape.site_dims(k), site, psi))
        .collect()
}

pub(crate) fn absorb_site(dims: SiteDims, site: &Tensor, psi: &[f64; LOCAL_DIM]) -> Result<Factor> {
    if site.shape() != dims.weight_shape().as_slice() {
        return Err(FttnError::DimensionMismatch(format!(
            "site tensor {:?}, expected {:?}",
            site.shape(),
            dims.weight_shape()
        )));
    }
    let block = dims.right_len() * dims.label_len();
    let w = site.data();
    let mut out = vec![0.0; dims.left_len() * block];
    for (i, row) in out.chunks_exact_mut(block).enumerate() {
        for (s, &p) in psi.iter().enumerate() {
            let src = &w[(i * LOCAL_DIM + s) * block..(i * LOCAL_DIM + s + 1) * block];
            for (o, &x) in row.iter_mut().zip(src) {
                *o += x * p;
            }
        }
    }
    Factor::new(dims, Tensor::new(dims.absorbed_shape(), out)?)
}

fn finish(f: Factor) -> Result<ScaledVector> {
    if f.dims.left.is_some() || f.dims.right.is_some() {
        return Err(FttnError::DimensionMismatch(format!(
            "chain left open bonds {:?}",
            f.dims
        )));
    }
    Ok(ScaledVector::from_factor(f))
}

/// Left-to-right accumulation.
pub fn contract_sequential(chain: &[Factor]) -> Result<ScaledVector> {
    let (first, rest) = chain
        .split_first()
        .ok_or_else(|| FttnError::InvalidArgument("empty chain".into()))?;
    let acc = rest.iter().try_fold(first.clone(), |acc, f| acc.product(f))?;
    finish(acc)
}

/// Pairwise tree reduction; an unpaired last factor moves up a level unchanged.
pub fn contract_parallel(chain: &[Factor]) -> Result<ScaledVector> {
    if chain.is_empty() {
        return Err(FttnError::InvalidArgument("empty chain".into()));
    }
    let mut level: Vec<Factor> = chain.to_vec();
    while level.len() > 1 {
        level = reduce_level(&level)?;
    }
    finish(level.pop().unwrap())
}

fn reduce_level(level: &[Factor]) -> Result<Vec<Factor>> {
    let pair = |c: &[Factor]| match c {
        [a, b] => a.product(b),
        [a] => Ok(a.clone()),
        _ => unreachable!(),
    };
    if level.len() >= PARALLEL_LEVEL_MIN {
        level.par_chunks(2).map(pair).collect()
    } else {
        level.chunks(2).map(pair).collect()
    }
}

/// Reduces both halves of the chain toward the label site, then joins them
/// there. Only vector-matrix products occur, which makes this the cheapest
/// order for single-image evaluation.
pub fn contract_two_sided(chain: &[Factor], label_site: usize) -> Result<ScaledVector> {
    if label_site >= chain.len() {
        return Err(FttnError::InvalidArgument(format!(
            "label site {label_site} outside chain of {}",
            chain.len()
        )));
    }
    let left = chain[..label_site]
        .iter()
        .try_fold(Factor::unit(), |acc, f| acc.product(f))?;
    let right = chain[label_site + 1..]
        .iter()
        .rev()
        .try_fold(Factor::unit(), |acc, f| f.product(&acc))?;
    finish(left.product(&chain[label_site])?.product(&right)?)
}

pub fn contract(chain: &[Factor], order: ContractionOrder) -> Result<ScaledVector> {
    match order {
        ContractionOrder::Sequential => contract_sequential(chain),
        ContractionOrder::ParallelTree => contract_parallel(chain),
    }
}

/// Class scores of one image. `temperature = None` evaluates the bare chain.
pub fn classify(
    model: &MpsClassifier,
    image: &EmbeddedImage,
    temperature: Option<&Temperature>,
    order: ContractionOrder,
) -> Result<ScaledVector> {
    let chain = match temperature {
        Some(t) => absorb_features(model.shape(), &effective_sites_with(model, t)?, image)?,
        None => absorb_features(model.shape(), model.sites(), image)?,
    };
    contract(&chain, order)
}

/// Multiply-add counts of one forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// Feature absorption, `sum_k left_k * right_k * labels_k * d`.
    pub absorb: u64,
    /// Chain reduction cost for the order: every product for the sequential
    /// order, the critical path (largest product per tree level, summed over
    /// levels) for the parallel tree.
    pub contraction: u64,
    /// Total multiply-adds performed by all workers.
    pub work: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.absorb + self.contraction
    }
}

/// Exact multiply-add count on the canonical shapes with the label at `N / 2`.
///
/// The parallel-tree count is bounded by `L * N * d * chi^2 + L * chi^3 * ceil(log2 N)`:
/// the absorb stage touches at most `L` times the entries of `N` transfer
/// matrices, and each of the `ceil(log2 N)` levels on the critical path is at
/// most one `chi x chi x L` by `chi x chi` product.
pub fn count_flops(
    n_sites: usize,
    chi: usize,
    local_dim: usize,
    num_classes: usize,
    order: ContractionOrder,
) -> Result<FlopCount> {
    if local_dim != LOCAL_DIM {
        return Err(FttnError::InvalidArgument(format!(
            "local dimension {local_dim} unsupported (only {LOCAL_DIM})"
        )));
    }
    let shape = ModelShape::new(n_sites, chi, num_classes)?;
    let dims: Vec<SiteDims> = (0..n_sites).map(|k| shape.site_dims(k)).collect();
    let absorb: u64 = dims
        .iter()
        .map(|d| (d.left_len() * d.right_len() * d.label_len() * local_dim) as u64)
        .sum();

    let (contraction, chain_work) = match order {
        ContractionOrder::Sequential => {
            let mut acc = dims[0];
            let mut cost = 0;
            for d in &dims[1..] {
                cost += product_cost(&acc, d);
                acc = product_dims(&acc, d);
            }
            (cost, cost)
        }
        ContractionOrder::ParallelTree => {
            let mut level = dims;
            let (mut critical, mut work) = (0, 0);
            while level.len() > 1 {
                let mut next = Vec::with_capacity(level.len().div_ceil(2));
                let mut level_max = 0;
                for c in level.chunks(2) {
                    if let [a, b] = c {
                        let cost = product_cost(a, b);
                        level_max = level_max.max(cost);
                        work += cost;
                        next.push(product_dims(a, b));
                    } else {
                        next.push(c[0]);
                    }
                }
                critical += level_max;
                level = next;
            }
            (critical, work)
        }
    };
    Ok(FlopCount {
        absorb,
        contraction,
        work: absorb + chain_work,
    })
}

fn product_dims(a: &SiteDims, b: &SiteDims) -> SiteDims {
    SiteDims {
        left: a.left,
        right: b.right,
        labels: a.labels.or(b.labels),
    }
}

fn product_cost(a: &SiteDims, b: &SiteDims) -> u64 {
    (a.left_len() * a.right_len() * b.right_len() * a.label_len().max(b.label_len())) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_map::{embed_pixels, FeatureMap};
    use crate::model::MpsClassifier;
    use crate::rng;
    use rand::Rng;

    fn random_model(n: usize, chi: usize, l: usize, seed: u64) -> MpsClassifier {
        let shape = ModelShape::new(n, chi, l).unwrap();
        let mut r = rng::stream(seed, "test-model");
        let sites = (0..n)
            .map(|k| Tensor::from_fn(shape.site_dims(k).weight_shape(), |_| r.gen_range(-1.0..1.0)))
            .collect();
        MpsClassifier::from_sites(shape, sites).unwrap()
    }

    fn random_image(n: usize, seed: u64) -> EmbeddedImage {
        let mut r = rng::stream(seed, "test-image");
        let px: Vec<f64> = (0..n).map(|_| r.gen()).collect();
        embed_pixels(&px, FeatureMap::Linear).unwrap()
    }

    #[test]
    fn absorb_single_bond_is_weighted_sum() {
        let model = random_model(4, 1, 3, 1);
        let img = random_image(4, 2);
        let chain = absorb_features(model.shape(), model.sites(), &img).unwrap();
        // interior site 1: shape (1, 2, 1)
        let w = model.sites()[1].data();
        let psi = img.sites()[1];
        assert_eq!(chain[1].tensor().shape(), &[1, 1]);
        assert!((chain[1].values()[0] - (w[0] * psi[0] + w[1] * psi[1])).abs() < 1e-15);
    }

    #[test]
    fn absorb_black_pixel_selects_first_slice() {
        let model = random_model(3, 2, 2, 3);
        let img = EmbeddedImage::from_sites(vec![[1.0, 0.0]; 3]).unwrap();
        let chain = absorb_features(model.shape(), model.sites(), &img).unwrap();
        // label site 1 is (2, 2, 2, 2): slice s = 0 is entries with s index 0
        let w = model.sites()[1].data();
        for i in 0..2 {
            for jl in 0..4 {
                assert_eq!(chain[1].values()[i * 4 + jl], w[(i * 2) * 4 + jl]);
            }
        }
        assert_eq!(chain[1].tensor().shape(), &[2, 2, 2]);
        assert_eq!(chain[0].tensor().shape(), &[2]);
        assert_eq!(chain[2].tensor().shape(), &[2]);
    }

    #[test]
    fn absorb_rejects_length_mismatch() {
        let model = random_model(4, 2, 2, 1);
        assert!(absorb_features(model.shape(), model.sites(), &random_image(5, 1)).is_err());
    }

    #[test]
    fn single_site_chain() {
        let model = random_model(1, 3, 4, 5);
        let img = random_image(1, 6);
        let psi = img.sites()[0];
        let w = model.sites()[0].data();
        let out = classify(&model, &img, None, ContractionOrder::Sequential).unwrap();
        let logits = out.logits();
        for l in 0..4 {
            let expected = w[l] * psi[0] + w[4 + l] * psi[1];
            assert!((logits[l] - expected).abs() < 1e-14);
        }
        assert_eq!(out, classify(&model, &img, None, ContractionOrder::ParallelTree).unwrap());
    }

    #[test]
    fn identity_chain_passes_label_scores_through() {
        // boundaries (1, 0), identity interiors, label block with scores [a, b] on bond (0, 0)
        let shape = ModelShape::new(3, 2, 2).unwrap();
        let left = Factor::new(shape.site_dims(0), Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let mut label = vec![0.0; 8];
        label[0] = 0.75;
        label[1] = -1.25;
        let mid = Factor::new(shape.site_dims(1), Tensor::new(vec![2, 2, 2], label).unwrap()).unwrap();
        let right = Factor::new(shape.site_dims(2), Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let out = contract_sequential(&[left, mid, right]).unwrap();
        assert_eq!(out.logits(), vec![0.75, -1.25]);
    }

    #[test]
    fn pair_of_sites_agree_exactly() {
        let model = random_model(2, 3, 3, 8);
        let img = random_image(2, 9);
        let chain = absorb_features(model.shape(), model.sites(), &img).unwrap();
        assert_eq!(contract_sequential(&chain).unwrap(), contract_parallel(&chain).unwrap());
    }

    #[test]
    fn scale_tracking_survives_long_chains() {
        let model = MpsClassifier::init(ModelShape::new(784, 4, 10).unwrap(), 1, 0.01).unwrap();
        let img = random_image(784, 2);
        let seq = classify(&model, &img, None, ContractionOrder::Sequential).unwrap();
        let par = classify(&model, &img, None, ContractionOrder::ParallelTree).unwrap();
        // (1/2)^784 is far below the f64 range
        assert!(seq.log_scale < -500.0);
        assert_eq!(seq.exponent(), par.exponent());
        let max = seq.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!((1.0..2.0).contains(&max));
        for (a, b) in seq.values.iter().zip(&par.values) {
            assert!((a - b).abs() <= 1e-10 * max);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let v = ScaledVector::from_values(vec![0.5, 2.0, 2.0, -3.0]);
        assert_eq!(v.argmax(), 1);
    }

    #[test]
    fn binary_exponent_edges() {
        assert_eq!(binary_exponent(1.0), 0);
        assert_eq!(binary_exponent(2.0), 1);
        assert_eq!(binary_exponent(1.999_999), 0);
        assert_eq!(binary_exponent(0.5), -1);
        assert_eq!(binary_exponent(3e-300), -995);
        let m = 3e-300 * pow2(995);
        assert!((1.0..2.0).contains(&m));
        assert_eq!(pow2(-1000) * pow2(1000), 1.0);
        assert_eq!(pow2(-1070), 2f64.powi(-1070));
    }

    #[test]
    fn flops_two_sites_by_hand() {
        // N = 2, chi = 1, d = 2, L = 2, label at site 1: shapes (2, 1) and (1, 2, 2)
        // absorb: 1*2 + 1*2*2 = 6; single product (1 x 1) * (1 x 1 x 2) = 2
        for order in [ContractionOrder::Sequential, ContractionOrder::ParallelTree] {
            let f = count_flops(2, 1, 2, 2, order).unwrap();
            assert_eq!(f.absorb, 6);
            assert_eq!(f.contraction, 2);
            assert_eq!(f.total(), 8);
            assert_eq!(f.work, 8);
        }
    }

    #[test]
    fn flops_scaling() {
        let chi = 6;
        let a = count_flops(64, chi, 2, 10, ContractionOrder::ParallelTree).unwrap();
        let b = count_flops(128, chi, 2, 10, ContractionOrder::ParallelTree).unwrap();
        // absorb: (N - 3) chi^2 d + 2 chi d + chi^2 d L, so doubling adds exactly N chi^2 d
        assert_eq!(b.absorb - a.absorb, 64 * (chi * chi * 2) as u64);
        assert_eq!(2 * a.absorb - b.absorb, (2 * chi * 2 + chi * chi * 2 * 10 - 3 * chi * chi * 2) as u64);

        let small = count_flops(256, 4, 2, 10, ContractionOrder::ParallelTree).unwrap();
        let big = count_flops(256, 8, 2, 10, ContractionOrder::ParallelTree).unwrap();
        let ratio = big.contraction as f64 / small.contraction as f64;
        assert!((ratio - 8.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn parallel_bound_holds() {
        for n in [2usize, 3, 5, 17, 64, 100, 784] {
            for chi in [1usize, 2, 5, 12] {
                let l = 10;
                let f = count_flops(n, chi, 2, l, ContractionOrder::ParallelTree).unwrap();
                let levels = (n as f64).log2().ceil() as u64;
                let bound = (l * n * 2 * chi * chi) as u64 + (l * chi.pow(3)) as u64 * levels;
                assert!(f.total() <= bound, "n {n} chi {chi}: {} > {bound}", f.total());
            }
        }
    }
}

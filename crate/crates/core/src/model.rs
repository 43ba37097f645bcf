//! The matrix-product-state weight chain and its temperature layer.
//!
//! Site `k` of an `N`-site chain stores a tensor with axes
//! `(left bond, physical, right bond, label)` where the left bond is absent on
//! site 0, the right bond is absent on site `N - 1` and the label axis exists
//! only on the label site. Dropping an absent axis does not change the
//! row-major layout, so every site can be addressed uniformly as a
//! `left x d x right x labels` block with missing axes of length one.

use crate::error::{FttnError, Result};
use crate::feature_map::LOCAL_DIM;
use crate::rng;
use crate::tensor::{exp_scale, hadamard, Tensor};
use rand::Rng;

/// Axis lengths of one site. `None` marks an absent axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteDims {
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub labels: Option<usize>,
}

impl SiteDims {
    pub fn left_len(&self) -> usize {
        self.left.unwrap_or(1)
    }

    pub fn right_len(&self) -> usize {
        self.right.unwrap_or(1)
    }

    pub fn label_len(&self) -> usize {
        self.labels.unwrap_or(1)
    }

    /// Shape of the stored weight tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        self.left
            .into_iter()
            .chain(Some(LOCAL_DIM))
            .chain(self.right)
            .chain(self.labels)
            .collect()
    }

    /// Shape after the physical axis has been contracted away. A site with
    /// no remaining axis becomes a rank-0 scalar.
    pub fn absorbed_shape(&self) -> Vec<usize> {
        self.left.into_iter().chain(self.right).chain(self.labels).collect()
    }

    pub fn weight_len(&self) -> usize {
        self.left_len() * LOCAL_DIM * self.right_len() * self.label_len()
    }
}

/// Structural hyperparameters of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub n_sites: usize,
    pub bond_dim: usize,
    pub num_classes: usize,
    pub label_site: usize,
}

impl ModelShape {
    /// Shape with the label tensor at the center site `n_sites / 2`.
    pub fn new(n_sites: usize, bond_dim: usize, num_classes: usize) -> Result<Self> {
        Self::with_label_site(n_sites, bond_dim, num_classes, n_sites / 2)
    }

    pub fn with_label_site(n_sites: usize, bond_dim: usize, num_classes: usize, label_site: usize) -> Result<Self> {
        if n_sites == 0 {
            return Err(FttnError::InvalidArgument("n_sites must be positive".into()));
        }
        if bond_dim == 0 {
            return Err(FttnError::InvalidArgument("bond dimension must be positive".into()));
        }
        if num_classes < 2 {
            return Err(FttnError::InvalidArgument(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if label_site >= n_sites {
            return Err(FttnError::InvalidArgument(format!(
                "label site {label_site} outside chain of {n_sites} sites"
            )));
        }
        Ok(ModelShape {
            n_sites,
            bond_dim,
            num_classes,
            label_site,
        })
    }

    pub fn site_dims(&self, k: usize) -> SiteDims {
        assert!(k < self.n_sites, "site {k} out of range");
        let chi = self.bond_dim;
        SiteDims {
            left: (k > 0).then_some(chi),
            right: (k + 1 < self.n_sites).then_some(chi),
            labels: (k == self.label_site).then_some(self.num_classes),
        }
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.n_sites).map(|k| self.site_dims(k).weight_len()).sum()
    }
}

/// Diagonal entry of the noiseless initial cores.
pub const INIT_CORE: f64 = 1.0 / LOCAL_DIM as f64;

/// Temperature layer applied on top of the weight chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub beta: f64,
    /// Leave the label-bearing site without the layer.
    pub exclude_label_site: bool,
}

impl Temperature {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(FttnError::InvalidArgument(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Temperature {
            beta,
            exclude_label_site: false,
        })
    }

    pub fn excluding_label_site(mut self) -> Self {
        self.exclude_label_site = true;
        self
    }

    pub(crate) fn applies_to(&self, site: usize, shape: &ModelShape) -> bool {
        !(self.exclude_label_site && site == shape.label_site)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpsClassifier {
    shape: ModelShape,
    sites: Vec<Tensor>,
}

impl MpsClassifier {
    /// Stacked-identity chain plus uniform noise in `[-noise_scale, noise_scale]`.
    ///
    /// Interior cores are `delta(a, a') / d`; boundary cores are the first row
    /// (or column) of that identity. The label axis repeats the same core for
    /// every class, so only the noise distinguishes classes at start.
    pub fn init(shape: ModelShape, seed: u64, noise_scale: f64) -> Result<Self> {
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(FttnError::InvalidArgument(format!("noise scale {noise_scale} must be >= 0")));
        }
        let mut rng = rng::stream(seed, "model-init");
        let core = INIT_CORE;
        let sites = (0..shape.n_sites)
            .map(|k| {
                let dims = shape.site_dims(k);
                let (d, r, l) = (LOCAL_DIM, dims.right_len(), dims.label_len());
                Tensor::from_fn(dims.weight_shape(), |flat| {
                    let right = (flat / l) % r;
                    let left = flat / (l * r * d);
                    let on_diagonal = match (dims.left, dims.right) {
                        (Some(_), Some(_)) => left == right,
                        (Some(_), None) => left == 0,
                        (None, Some(_)) => right == 0,
                        (None, None) => true,
                    };
                    let base = if on_diagonal { core } else { 0.0 };
                    base + noise_scale * (2.0 * rng.gen::<f64>() - 1.0)
                })
            })
            .collect();
        Ok(MpsClassifier { shape, sites })
    }

    /// Wraps explicit site tensors, checking every shape against `shape`.
    pub fn from_sites(shape: ModelShape, sites: Vec<Tensor>) -> Result<Self> {
        if sites.len() != shape.n_sites {
            return Err(FttnError::DimensionMismatch(format!(
                "expected {} sites, got {}",
                shape.n_sites,
                sites.len()
            )));
        }
        for (k, site) in sites.iter().enumerate() {
            let expected = shape.site_dims(k).weight_shape();
            if site.shape() != expected.as_slice() {
                return Err(FttnError::DimensionMismatch(format!(
                    "site {k} has shape {:?}, expected {expected:?}",
                    site.shape()
                )));
            }
        }
        Ok(MpsClassifier { shape, sites })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn n_sites(&self) -> usize {
        self.shape.n_sites
    }

    pub fn bond_dim(&self) -> usize {
        self.shape.bond_dim
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn label_site(&self) -> usize {
        self.shape.label_site
    }

    pub fn local_dim(&self) -> usize {
        LOCAL_DIM
    }

    pub fn sites(&self) -> &[Tensor] {
        &self.sites
    }

    /// Mutable view of one site's entries; the shape stays fixed.
    pub fn site_data_mut(&mut self, k: usize) -> &mut [f64] {
        self.sites[k].data_mut()
    }
}

/// `A * exp(-beta A)` elementwise on every site.
pub fn effective_sites(model: &MpsClassifier, beta: f64) -> Result<Vec<Tensor>> {
    effective_sites_with(model, &Temperature::new(beta)?)
}

pub fn effective_sites_with(model: &MpsClassifier, temperature: &Temperature) -> Result<Vec<Tensor>> {
    model
        .sites
        .iter()
        .enumerate()
        .map(|(k, site)| {
            if temperature.applies_to(k, &model.shape) {
                hadamard(site, &exp_scale(site, temperature.beta)?)
            } else {
                Ok(site.clone())
            }
        })
        .collect()
}

//! PCA of the gradient space spanned by per-epoch accumulated gradients.
//!
//! Gradients are stacked as rows of a `T × M` matrix without mean-centering.
//! The number of principal components needed for a target fraction is counted
//! on the singular values themselves (not their squares) unless
//! [`MassMode::Squared`] is requested.

use log::warn;
use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::fl::WorkerState;
use crate::models::{BlockShape, Model};
use crate::numerics::{ParamVector, RngStream};

/// Cumulative mass within this relative distance of the target counts as
/// reaching it. Absorbs SVD rounding on exactly representable spectra.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MassMode {
    /// Fraction of `Σσ_i`.
    #[default]
    Singular,
    /// Classical explained variance, fraction of `Σσ_i²`.
    Squared,
}

/// Accumulated gradients in epoch order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientLog {
    grads: Vec<ParamVector>,
    layer_shapes: Option<Vec<BlockShape>>,
}

impl GradientLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_layers(layer_shapes: Vec<BlockShape>) -> Self {
        Self {
            grads: Vec::new(),
            layer_shapes: Some(layer_shapes),
        }
    }

    pub fn from_grads(grads: Vec<ParamVector>) -> Result<Self> {
        let mut log = Self::new();
        for g in grads {
            log.push(g)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, g: ParamVector) -> Result<()> {
        if let Some(first) = self.grads.first() {
            check_dim(first.dim(), g.dim())?;
        }
        self.grads.push(g);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn grads(&self) -> &[ParamVector] {
        &self.grads
    }

    pub fn layer_shapes(&self) -> Option<&[BlockShape]> {
        self.layer_shapes.as_deref()
    }

    /// The first `len` epochs.
    pub fn prefix(&self, len: usize) -> GradientLog {
        GradientLog {
            grads: self.grads[..len.min(self.grads.len())].to_vec(),
            layer_shapes: self.layer_shapes.clone(),
        }
    }

    /// The same log restricted to one parameter block.
    pub fn layer(&self, block: usize) -> Result<GradientLog> {
        let shapes = self
            .layer_shapes
            .as_ref()
            .ok_or_else(|| Error::invalid("log has no layer shapes"))?;
        let shape = *shapes
            .get(block)
            .ok_or_else(|| Error::invalid(format!("no block {block}")))?;
        let grads = self
            .grads
            .iter()
            .map(|g| ParamVector::from_vec_unchecked(g.as_slice()[shape.range()].to_vec()))
            .collect();
        Ok(GradientLog {
            grads,
            layer_shapes: None,
        })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let m = self.grads[0].dim();
        DMatrix::from_fn(self.grads.len(), m, |i, j| self.grads[i][j])
    }
}

struct Spectrum {
    /// Descending.
    sigma: Vec<f64>,
    /// Unit right singular vectors matching `sigma`.
    directions: Vec<Vec<f64>>,
}

fn spectrum(log: &GradientLog, want_vectors: bool) -> Spectrum {
    assert!(!log.is_empty(), "gradient log must be nonempty");
    let svd = log.matrix().svd(false, want_vectors);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let directions = match (&svd.v_t, want_vectors) {
        (Some(vt), true) => order
            .iter()
            .map(|&i| {
                let mut v: Vec<f64> = vt.row(i).iter().copied().collect();
                canonical_sign(&mut v);
                v
            })
            .collect(),
        _ => Vec::new(),
    };
    Spectrum { sigma, directions }
}

/// Flips `v` so its first non-negligible coordinate is positive.
fn canonical_sign(v: &mut [f64]) {
    if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Singular values of the stacked log, descending.
pub fn singular_values(log: &GradientLog) -> Vec<f64> {
    spectrum(log, false).sigma
}

fn count_components(sigma: &[f64], variance: f64, mode: MassMode) -> usize {
    assert!(
        variance > 0.0 && variance <= 1.0,
        "variance must be in (0, 1]"
    );
    let mass: Vec<f64> = match mode {
        MassMode::Singular => sigma.to_vec(),
        MassMode::Squared => sigma.iter().map(|s| s * s).collect(),
    };
    let total: f64 = mass.iter().sum();
    if total == 0.0 {
        return 0;
    }
    let target = variance * total - MASS_TOL * total;
    let mut cum = 0.0;
    for (i, m) in mass.iter().enumerate() {
        cum += m;
        if cum >= target {
            return i + 1;
        }
    }
    mass.len()
}

/// Smallest number of leading singular values holding `variance` of the total
/// singular-value mass. An all-zero log needs 0 components.
pub fn n_pca(log: &GradientLog, variance: f64) -> usize {
    n_pca_with(log, variance, MassMode::Singular)
}

pub fn n_pca_with(log: &GradientLog, variance: f64, mode: MassMode) -> usize {
    count_components(&singular_values(log), variance, mode)
}

/// Principal gradient directions: the leading `n_pca(log, variance)` right
/// singular vectors, unit norm, first significant coordinate positive.
pub fn pgd(log: &GradientLog, variance: f64) -> Vec<ParamVector> {
    pgd_with(log, variance, MassMode::Singular)
}

pub fn pgd_with(log: &GradientLog, variance: f64, mode: MassMode) -> Vec<ParamVector> {
    let spec = spectrum(log, true);
    let c = count_components(&spec.sigma, variance, mode);
    spec.directions
        .into_iter()
        .take(c)
        .map(ParamVector::from_vec_unchecked)
        .collect()
}

fn cosine_or_zero(a: &ParamVector, b: &ParamVector) -> f64 {
    if a.norm_sq() == 0.0 || b.norm_sq() == 0.0 {
        0.0
    } else {
        a.cosine_sim(b).expect("dimensions checked by the log")
    }
}

/// `out[i][j] = cos(grads[i], pgds[j])`; zero-norm gradients give zero rows.
pub fn overlap_matrix(log: &GradientLog, pgds: &[ParamVector]) -> Vec<Vec<f64>> {
    log.grads
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.norm_sq() == 0.0 {
                warn!("epoch {i} gradient is zero; overlap row left at zero");
            }
            pgds.iter().map(|p| cosine_or_zero(g, p)).collect()
        })
        .collect()
}

/// Symmetric matrix of pairwise cosine similarities between epoch gradients.
pub fn similarity_matrix(log: &GradientLog) -> Vec<Vec<f64>> {
    let t = log.len();
    let mut out = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in i..t {
            let c = cosine_or_zero(&log.grads[i], &log.grads[j]);
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    out
}

/// Output of [`record_centralized`].
#[derive(Clone, Debug)]
pub struct CentralizedRecord {
    pub log: GradientLog,
    /// `n95[t]` is N95-PCA over epochs `0..=t`.
    pub n95: Vec<usize>,
    pub n99: Vec<usize>,
    pub theta: ParamVector,
    /// Training loss after each epoch.
    pub train_loss: Vec<f64>,
}

/// Centralized minibatch SGD, logging one accumulated gradient per epoch and
/// the N95/N99 progression over log prefixes.
pub fn record_centralized(
    model: &Model,
    dataset: &Dataset,
    epochs: usize,
    eta: f64,
    batch_size: usize,
    mut rng: RngStream,
) -> Result<CentralizedRecord> {
    if epochs == 0 || batch_size == 0 || !(eta > 0.0) {
        return Err(Error::invalid(
            "need epochs >= 1, batch_size >= 1 and eta > 0",
        ));
    }
    let mut theta = model.init_params(&mut rng);
    let mut sampler = WorkerState::new(0, (0..dataset.len()).collect(), model.param_dim(), rng);
    let batches = dataset.len().div_ceil(batch_size);
    let mut log = GradientLog::with_layers(model.layer_shapes().to_vec());
    let (mut n95, mut n99, mut losses) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..epochs {
        let mut acc = ParamVector::zeros(model.param_dim());
        for _ in 0..batches {
            let batch = dataset.subset(sampler.next_batch(batch_size));
            let g = model.gradient(&theta, &batch)?;
            theta.axpy_in_place(-eta, &g)?;
            acc.axpy_in_place(1.0, &g)?;
        }
        theta = theta.ensure_finite("record_centralized")?;
        log.push(acc.ensure_finite("record_centralized")?)?;
        let sigma = singular_values(&log);
        n95.push(count_components(&sigma, 0.95, MassMode::Singular));
        n99.push(count_components(&sigma, 0.99, MassMode::Singular));
        losses.push(model.forward_loss(&theta, dataset)?);
    }
    Ok(CentralizedRecord {
        log,
        n95,
        n99,
        theta,
        train_loss: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_classification;
    use crate::models::Labels;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn basis(dim: usize, i: usize, scale: f64) -> ParamVector {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        pv(&v)
    }

    /// Brute-force cumulative-sum count on a known spectrum.
    fn count_oracle(sigma: &[f64], variance: f64) -> usize {
        let total: f64 = sigma.iter().sum();
        let mut acc = 0.0;
        for (i, s) in sigma.iter().enumerate() {
            acc += s;
            if acc / total >= variance - 1e-12 {
                return i + 1;
            }
        }
        sigma.len()
    }

    #[test]
    fn identical_gradients_need_one_component() {
        let g = pv(&[1.0, -2.0, 3.0, 0.5]);
        let log = GradientLog::from_grads(vec![g.clone(); 6]).unwrap();
        for v in [0.5, 0.95, 0.99, 1.0] {
            assert_eq!(n_pca(&log, v), 1);
        }
    }

    #[test]
    fn orthogonal_equal_norm_gradients() {
        let norm = 3.0 / std::f64::consts::SQRT_2;
        let grads: Vec<ParamVector> = (0..20).map(|i| basis(24, i, norm)).collect();
        let log = GradientLog::from_grads(grads).unwrap();
        let expected = count_oracle(&[norm; 20], 0.95);
        assert_eq!(expected, 19);
        assert_eq!(n_pca(&log, 0.95), expected);
        assert_eq!(n_pca(&log, 1.0), 20);
    }

    #[test]
    fn full_mass_is_numerical_rank() {
        let a = pv(&[1.0, 2.0, 0.0, -1.0, 0.5]);
        let b = pv(&[0.0, 1.0, 1.0, 3.0, -2.0]);
        let c = pv(&[2.0, 0.0, -1.0, 0.0, 1.0]);
        let grads = vec![
            a.clone(),
            b.clone(),
            c.clone(),
            a.add(&b).unwrap(),
            b.scaled(2.0).sub(&c).unwrap(),
            a.scaled(-0.5),
        ];
        let log = GradientLog::from_grads(grads).unwrap();
        assert_eq!(n_pca(&log, 1.0), 3);
    }

    #[test]
    fn count_is_monotone_in_variance_and_modes_differ() {
        let log =
            GradientLog::from_grads(vec![basis(4, 0, 10.0), basis(4, 1, 3.0), basis(4, 2, 1.0)])
                .unwrap();
        let n95 = n_pca(&log, 0.95);
        let n99 = n_pca(&log, 0.99);
        assert!(n95 <= n99 && n99 <= 3);
        // singular mass: 10/14 = 0.71, 13/14 = 0.93; squared: 100/110, 109/110
        assert_eq!(n_pca_with(&log, 0.9, MassMode::Singular), 2);
        assert_eq!(n_pca_with(&log, 0.9, MassMode::Squared), 1);
    }

    #[test]
    fn pgd_examples() {
        let g = pv(&[3.0, -4.0, 0.0]);
        let dirs = pgd(&GradientLog::from_grads(vec![g.clone()]).unwrap(), 0.99);
        assert_eq!(dirs.len(), 1);
        let unit = g.scaled(1.0 / g.norm());
        assert!(dirs[0].sub(&unit).unwrap().norm() < 1e-12);

        let log = GradientLog::from_grads(vec![basis(3, 1, -2.0), basis(3, 2, 1.0)]).unwrap();
        let dirs = pgd(&log, 1.0);
        assert_eq!(dirs.len(), 2);
        assert!((dirs[0][1].abs() - 1.0).abs() < 1e-12);
        assert!((dirs[1][2].abs() - 1.0).abs() < 1e-12);
        assert!(dirs[0].dot(&dirs[1]).unwrap().abs() < 1e-12);
        assert!(dirs
            .iter()
            .all(|d| d.as_slice().iter().find(|x| x.abs() > 1e-12).unwrap() > &0.0));
    }

    #[test]
    fn overlap_examples() {
        let g = pv(&[1.0, 1.0]);
        let log = GradientLog::from_grads(vec![g.clone()]).unwrap();
        let m = overlap_matrix(&log, &pgd(&log, 1.0));
        assert!((m[0][0].abs() - 1.0).abs() < 1e-12);

        let log = GradientLog::from_grads(vec![
            basis(3, 0, 10.0),
            basis(3, 0, 9.0),
            basis(3, 1, 0.1),
            ParamVector::zeros(3),
        ])
        .unwrap();
        let dirs = pgd(&log, 0.95);
        assert_eq!(dirs.len(), 1);
        let m = overlap_matrix(&log, &dirs);
        assert!(m[2][0].abs() < 1e-12);
        assert_eq!(m[3][0], 0.0);
        assert!(m.iter().flatten().all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn similarity_examples() {
        let g = pv(&[1.0, 2.0]);
        let s = similarity_matrix(&GradientLog::from_grads(vec![g.clone(); 3]).unwrap());
        assert!(s.iter().flatten().all(|&c| c == 1.0));
        let s = similarity_matrix(
            &GradientLog::from_grads(vec![basis(2, 0, 1.0), basis(2, 1, 5.0)]).unwrap(),
        );
        assert_eq!(s, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut rng = RngStream::new(0, 0);
        let grads = (0..5)
            .map(|_| {
                use rand::Rng;
                pv(&(0..4)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>())
            })
            .collect();
        let s = similarity_matrix(&GradientLog::from_grads(grads).unwrap());
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(s[i][j].to_bits(), s[j][i].to_bits());
            }
        }
    }

    #[test]
    fn layer_views_slice_blocks() {
        let model = Model::softmax_classifier(2, 2);
        let mut log = GradientLog::with_layers(model.layer_shapes().to_vec());
        log.push(pv(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        assert_eq!(log.layer(1).unwrap().grads()[0], pv(&[5.0, 6.0]));
        assert!(log.layer(2).is_err());
    }

    #[test]
    fn centralized_single_epoch_and_scalar_model() {
        let ds = synth_classification(40, 3, 4, 3.0, &mut RngStream::new(0, 1)).unwrap();
        let model = Model::mlp1h(3, 5, 4);
        let rec = record_centralized(&model, &ds, 1, 0.1, 8, RngStream::new(0, 0)).unwrap();
        assert_eq!(rec.log.len(), 1);
        assert_eq!(rec.n99, vec![1]);

        let quad = Model::linear_regression(1, 1).without_bias();
        let ds = Dataset::new(
            vec![1.0],
            1,
            Labels::Values {
                data: vec![0.0],
                dim: 1,
            },
            0,
        )
        .unwrap();
        let rec = record_centralized(&quad, &ds, 30, 0.1, 1, RngStream::new(0, 0)).unwrap();
        assert!(rec.n99.iter().all(|&n| n == 1));
    }
}

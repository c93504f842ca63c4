//! Seeded synthetic paired dataset with class identity in token statistics.
//!
//! Each class owns a latent Gaussian. Every sample is `M` latent tokens
//! mapped into `raw_dim` channels by a per-modality mixing matrix plus
//! independent noise. In covariance coding all classes share one mean and
//! differ only by a rotation of a fixed anisotropic spectrum, so a sample's
//! class cannot be read from its token mean. Mean coding is the reverse, and
//! mixed coding gives class pairs a shared mean and distinct covariances.
//!
//! The image and text sides of a pair share the class but are drawn
//! independently, so pairs can only be matched through class statistics.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{read_blob, write_blob, Tensor};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coding {
    Mean,
    #[default]
    Covariance,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub tokens_per_sample: usize,
    pub latent_dim: usize,
    pub raw_dim: usize,
    pub coding: Coding,
    pub noise_scale: f64,
    /// Ratio of the largest to the smallest latent variance.
    pub anisotropy: f64,
    /// Spread of class means (mean coding) or norm scale of the shared mean.
    pub mean_scale: f64,
    /// Scale of a per-sample latent offset shared by all tokens of one draw.
    /// Drawn independently for the image and text side, so it carries no
    /// class or pairing information.
    pub offset_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 200,
            tokens_per_sample: 32,
            latent_dim: 4,
            raw_dim: 16,
            coding: Coding::Covariance,
            noise_scale: 0.1,
            anisotropy: 16.0,
            mean_scale: 1.0,
            offset_scale: 0.75,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.tokens_per_sample == 0 {
            return bad("num_classes, samples_per_class and tokens_per_sample must be >= 1".into());
        }
        if self.latent_dim == 0 || self.raw_dim == 0 {
            return bad("latent_dim and raw_dim must be >= 1".into());
        }
        if self.coding != Coding::Mean && self.latent_dim < 2 {
            return bad(format!("covariance coding needs latent_dim >= 2, got {}", self.latent_dim));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        if !(self.anisotropy >= 1.0) || !self.anisotropy.is_finite() {
            return bad(format!("anisotropy must be >= 1, got {}", self.anisotropy));
        }
        if self.coding != Coding::Mean && self.num_classes > 1 && self.anisotropy == 1.0 {
            return bad("isotropic spectrum cannot separate classes by covariance".into());
        }
        if !(self.mean_scale >= 0.0) || !self.mean_scale.is_finite() {
            return bad(format!("mean_scale must be >= 0, got {}", self.mean_scale));
        }
        if !(self.offset_scale >= 0.0) || !self.offset_scale.is_finite() {
            return bad(format!("offset_scale must be >= 0, got {}", self.offset_scale));
        }
        if self.coding == Coding::Mean && self.num_classes > 1 && self.mean_scale == 0.0 {
            return bad("mean coding needs mean_scale > 0".into());
        }
        Ok(())
    }

    pub fn test_per_class(&self) -> usize {
        self.samples_per_class / 5
    }
}

/// One split: `image[i]` and `text[i]` form a pair of class `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub image: Vec<Tensor>,
    pub text: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Sample index within its class.
    pub indices: Vec<usize>,
}

impl Split {
    pub(crate) fn empty() -> Self {
        Self {
            image: Vec::new(),
            text: Vec::new(),
            labels: Vec::new(),
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, image: Tensor, text: Tensor, label: usize, index: usize) {
        self.image.push(image);
        self.text.push(text);
        self.labels.push(label);
        self.indices.push(index);
    }

    fn get(&self, i: usize) -> (Tensor, Tensor, usize, usize) {
        (self.image[i].clone(), self.text[i].clone(), self.labels[i], self.indices[i])
    }
}

/// Moment classifiers run on the generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub chance: f64,
    /// Nearest class centroid on per-sample token means.
    pub mean_classifier_accuracy: f64,
    /// Gaussian quadratic discriminant on individual tokens.
    pub qda_accuracy: f64,
    /// Smallest Frobenius distance between true latent class covariances.
    pub min_covariance_separation: f64,
    /// Largest distance between true latent class means.
    pub max_mean_separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub image_map: Tensor,
    pub text_map: Tensor,
    pub train: Split,
    pub test: Split,
    pub calibration: CalibrationRecord,
}

struct ClassModel {
    mean: DVector<f64>,
    /// Maps standard normal latents to the class distribution.
    factor: DMatrix<f64>,
    cov: DMatrix<f64>,
}

fn random_rotation(rng: &mut SeededRng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn spectrum(spec: &SyntheticDatasetSpec) -> Vec<f64> {
    let l = spec.latent_dim;
    (0..l)
        .map(|j| {
            let t = if l > 1 { j as f64 / (l - 1) as f64 } else { 0.0 };
            spec.anisotropy.powf(0.5 - t)
        })
        .collect()
}

fn class_models(spec: &SyntheticDatasetSpec, rng: &mut SeededRng) -> Vec<ClassModel> {
    let l = spec.latent_dim;
    let d = spectrum(spec);
    let sqrt_d = DMatrix::from_diagonal(&DVector::from_iterator(l, d.iter().map(|v| v.sqrt())));
    let draw_mean = |rng: &mut SeededRng| DVector::from_fn(l, |_, _| spec.mean_scale * rng.normal());
    let shared_mean = draw_mean(rng);
    let shared_rotation = random_rotation(rng, l);
    let mut group_means: Vec<DVector<f64>> = Vec::new();
    (0..spec.num_classes)
        .map(|c| {
            let (mean, rotation) = match spec.coding {
                Coding::Mean => (draw_mean(rng), shared_rotation.clone()),
                Coding::Covariance => (shared_mean.clone(), random_rotation(rng, l)),
                Coding::Mixed => {
                    if c % 2 == 0 {
                        group_means.push(draw_mean(rng));
                    }
                    (group_means[c / 2].clone(), random_rotation(rng, l))
                }
            };
            let factor = &rotation * &sqrt_d;
            let cov = &factor * factor.transpose();
            ClassModel { mean, factor, cov }
        })
        .collect()
}

fn draw_tokens(spec: &SyntheticDatasetSpec, model: &ClassModel, map: &DMatrix<f64>, rng: &mut SeededRng) -> Tensor {
    let (m, l, raw) = (spec.tokens_per_sample, spec.latent_dim, spec.raw_dim);
    let mut data = Vec::with_capacity(m * raw);
    let mut center = model.mean.clone();
    if spec.offset_scale > 0.0 {
        center += DVector::from_fn(l, |_, _| spec.offset_scale * rng.normal());
    }
    for _ in 0..m {
        let eps = DVector::from_fn(l, |_, _| rng.normal());
        let z = &center + &model.factor * eps;
        let x = map * z;
        for j in 0..raw {
            data.push(x[j] + spec.noise_scale * rng.normal());
        }
    }
    Tensor::new(m, raw, data).expect("finite tokens")
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::new(m.nrows(), m.ncols(), (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect::<Vec<_>>())
        .expect("finite matrix")
}

/// Generate the dataset, split 80/20 per class, and run the calibration.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut structure = SeededRng::stream(spec.seed, 0);
    let mut samples = SeededRng::stream(spec.seed, 1);
    let mut splitter = SeededRng::stream(spec.seed, 2);

    let map_scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let image_map = DMatrix::from_fn(spec.raw_dim, spec.latent_dim, |_, _| map_scale * structure.normal());
    let text_map = DMatrix::from_fn(spec.raw_dim, spec.latent_dim, |_, _| map_scale * structure.normal());
    let models = class_models(spec, &mut structure);

    let mut min_cov = f64::INFINITY;
    let mut max_mean = 0.0f64;
    for a in 0..models.len() {
        for b in a + 1..models.len() {
            min_cov = min_cov.min((&models[a].cov - &models[b].cov).norm());
            max_mean = max_mean.max((&models[a].mean - &models[b].mean).norm());
        }
    }
    if spec.coding != Coding::Mean && models.len() > 1 && !(min_cov > 0.0) {
        return Err(Error::Config("class covariances are not pairwise distinct".into()));
    }
    if !min_cov.is_finite() {
        min_cov = 0.0;
    }

    let n_test = spec.test_per_class();
    let mut train = Split::empty();
    let mut test = Split::empty();
    for (c, model) in models.iter().enumerate() {
        let drawn: Vec<(Tensor, Tensor)> = (0..spec.samples_per_class)
            .map(|_| {
                let img = draw_tokens(spec, model, &image_map, &mut samples);
                let txt = draw_tokens(spec, model, &text_map, &mut samples);
                (img, txt)
            })
            .collect();
        let mut order: Vec<usize> = (0..spec.samples_per_class).collect();
        splitter.shuffle(&mut order);
        let mut is_test = vec![false; spec.samples_per_class];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for (i, (img, txt)) in drawn.into_iter().enumerate() {
            let target = if is_test[i] { &mut test } else { &mut train };
            target.push(img, txt, c, i);
        }
    }

    let calibration = CalibrationRecord {
        chance: 1.0 / spec.num_classes as f64,
        mean_classifier_accuracy: nearest_centroid_accuracy(&train, &test, spec.num_classes),
        qda_accuracy: qda_accuracy(&train, &test, spec.num_classes)?,
        min_covariance_separation: min_cov,
        max_mean_separation: max_mean,
    };
    Ok(Dataset {
        spec: spec.clone(),
        image_map: to_tensor(&image_map),
        text_map: to_tensor(&text_map),
        train,
        test,
        calibration,
    })
}

fn token_mean(x: &Tensor) -> Vec<f64> {
    let (m, d) = x.shape();
    (0..d).map(|j| (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64).collect()
}

fn centered_rows(x: &Tensor) -> Vec<Vec<f64>> {
    let mean = token_mean(x);
    (0..x.rows()).map(|r| x.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect()).collect()
}

/// Accuracy of assigning each test image to the class whose training
/// centroid of token means is nearest. `NaN` when the test split is empty.
pub fn nearest_centroid_accuracy(train: &Split, test: &Split, classes: usize) -> f64 {
    if test.is_empty() || train.is_empty() {
        return f64::NAN;
    }
    let dim = train.image[0].cols();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &c) in train.image.iter().zip(&train.labels) {
        for (acc, v) in centroids[c].iter_mut().zip(token_mean(x)) {
            *acc += v;
        }
        counts[c] += 1;
    }
    for (cent, &n) in centroids.iter_mut().zip(&counts) {
        cent.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let mut hits = 0;
    for (x, &label) in test.image.iter().zip(&test.labels) {
        let m = token_mean(x);
        let best = (0..classes)
            .filter(|&c| counts[c] > 0)
            .min_by(|&a, &b| {
                let da: f64 = centroids[a].iter().zip(&m).map(|(p, q)| (p - q).powi(2)).sum();
                let db: f64 = centroids[b].iter().zip(&m).map(|(p, q)| (p - q).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("at least one class");
        hits += usize::from(best == label);
    }
    hits as f64 / test.len() as f64
}

/// Accuracy of a per-class Gaussian fitted to training image tokens, scoring
/// each test sample by the summed log-likelihood of its tokens. Tokens are
/// centered on their own sample mean first, so only second moments count.
pub fn qda_accuracy(train: &Split, test: &Split, classes: usize) -> Result<f64> {
    if test.is_empty() || train.is_empty() {
        return Ok(f64::NAN);
    }
    let dim = train.image[0].cols();
    struct Gaussian {
        mean: DVector<f64>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        log_det: f64,
    }
    let mut models = Vec::with_capacity(classes);
    for c in 0..classes {
        let tokens: Vec<Vec<f64>> = train
            .image
            .iter()
            .zip(&train.labels)
            .filter(|(_, &l)| l == c)
            .flat_map(|(x, _)| centered_rows(x))
            .collect();
        if tokens.len() < 2 {
            models.push(None);
            continue;
        }
        let n = tokens.len() as f64;
        let mean = DVector::from_fn(dim, |j, _| tokens.iter().map(|t| t[j]).sum::<f64>() / n);
        let mut cov = DMatrix::zeros(dim, dim);
        for t in &tokens {
            let v = DVector::from_fn(dim, |j, _| t[j] - mean[j]);
            cov += &v * v.transpose();
        }
        cov /= n - 1.0;
        // A small ridge keeps the factorization alive for noiseless data.
        for j in 0..dim {
            cov[(j, j)] += 1e-9;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Degenerate(format!("class {c} token covariance is not positive definite")))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        models.push(Some(Gaussian { mean, chol, log_det }));
    }
    let mut hits = 0;
    for (x, &label) in test.image.iter().zip(&test.labels) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (c, g) in models.iter().enumerate() {
            let Some(g) = g else { continue };
            let mut ll = 0.0;
            for t in centered_rows(x) {
                let v = DVector::from_fn(dim, |j, _| t[j] - g.mean[j]);
                let w = g.chol.l().solve_lower_triangular(&v).expect("nonsingular factor");
                ll -= 0.5 * (w.norm_squared() + g.log_det);
            }
            if ll > best.0 {
                best = (ll, c);
            }
        }
        hits += usize::from(best.1 == label);
    }
    Ok(hits as f64 / test.len() as f64)
}

/// On-disk manifest: spec echo, calibration and split bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SyntheticDatasetSpec,
    pub calibration: CalibrationRecord,
    pub train_labels: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn stack(samples: &[Tensor], m: usize, raw: usize) -> Result<Tensor> {
    if samples.is_empty() {
        return Ok(Tensor::zeros(0, raw));
    }
    let refs: Vec<&Tensor> = samples.iter().collect();
    let t = Tensor::vstack(&refs)?;
    debug_assert_eq!(t.rows(), samples.len() * m);
    Ok(t)
}

fn unstack(t: &Tensor, count: usize, m: usize, raw: usize, path: &Path) -> Result<Vec<Tensor>> {
    if t.shape() != (count * m, raw) {
        return Err(Error::Blob {
            path: path.into(),
            reason: format!("shape {:?}, expected {:?}", t.shape(), (count * m, raw)),
        });
    }
    (0..count).map(|i| t.slice_rows(i * m, m)).collect()
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = DatasetManifest {
            spec: self.spec.clone(),
            calibration: self.calibration.clone(),
            train_labels: self.train.labels.clone(),
            train_indices: self.train.indices.clone(),
            test_labels: self.test.labels.clone(),
            test_indices: self.test.indices.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        let (m, raw) = (self.spec.tokens_per_sample, self.spec.raw_dim);
        write_blob(&dir.join("train_image.blob"), &stack(&self.train.image, m, raw)?)?;
        write_blob(&dir.join("train_text.blob"), &stack(&self.train.text, m, raw)?)?;
        write_blob(&dir.join("test_image.blob"), &stack(&self.test.image, m, raw)?)?;
        write_blob(&dir.join("test_text.blob"), &stack(&self.test.text, m, raw)?)?;
        write_blob(&dir.join("image_map.blob"), &self.image_map)?;
        write_blob(&dir.join("text_map.blob"), &self.text_map)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mf: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        mf.spec.validate()?;
        let (m, raw) = (mf.spec.tokens_per_sample, mf.spec.raw_dim);
        let load_split = |prefix: &str, labels: Vec<usize>, indices: Vec<usize>| -> Result<Split> {
            if labels.len() != indices.len() {
                return Err(Error::Config(format!("{prefix} labels and indices differ in length")));
            }
            let n = labels.len();
            let ip = dir.join(format!("{prefix}_image.blob"));
            let tp = dir.join(format!("{prefix}_text.blob"));
            Ok(Split {
                image: unstack(&read_blob(&ip)?, n, m, raw, &ip)?,
                text: unstack(&read_blob(&tp)?, n, m, raw, &tp)?,
                labels,
                indices,
            })
        };
        Ok(Self {
            train: load_split("train", mf.train_labels, mf.train_indices)?,
            test: load_split("test", mf.test_labels, mf.test_indices)?,
            image_map: read_blob(&dir.join("image_map.blob"))?,
            text_map: read_blob(&dir.join("text_map.blob"))?,
            calibration: mf.calibration,
            spec: mf.spec,
        })
    }
}

/// A merged split drawing a fraction `r` of its records from domain A.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSplit {
    pub split: Split,
    /// `0` for records from A, `1` for records from B.
    pub domain: Vec<u8>,
}

/// Merge two equally sized splits: `floor(r·n)` records from `a`, the rest
/// from `b`. Each source keeps its relative order; which records are taken
/// and where they land is decided by `seed`.
pub fn mix_domains(a: &Split, b: &Split, r: f64, seed: u64) -> Result<MixedSplit> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Param(format!("mixing ratio must be in [0, 1], got {r}")));
    }
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "domains must have equal size to mix, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let from_a = ((r * n as f64).floor() as usize).min(n);
    let mut rng = SeededRng::new(seed);
    let mut pick = |len: usize, k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut idx);
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        chosen
    };
    let take_a = pick(n, from_a);
    let take_b = pick(n, n - from_a);
    let slots_a = pick(n, from_a);
    let mut out = MixedSplit {
        split: Split::empty(),
        domain: Vec::with_capacity(n),
    };
    let (mut ia, mut ib) = (take_a.iter(), take_b.iter());
    let mut slots = slots_a.iter().peekable();
    for pos in 0..n {
        let (img, txt, label, index) = if slots.peek() == Some(&&pos) {
            slots.next();
            out.domain.push(0);
            a.get(*ia.next().expect("enough A records"))
        } else {
            out.domain.push(1);
            b.get(*ib.next().expect("enough B records"))
        };
        out.split.push(img, txt, label, index);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(coding: Coding, seed: u64) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_classes: 4,
            samples_per_class: 40,
            coding,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn split_sizes_and_record_order() {
        let ds = generate(&small(Coding::Covariance, 1)).unwrap();
        assert_eq!(ds.test.len(), 4 * 8);
        assert_eq!(ds.train.len(), 4 * 32);
        for split in [&ds.train, &ds.test] {
            let keys: Vec<(usize, usize)> = split.labels.iter().copied().zip(split.indices.iter().copied()).collect();
            let mut sorted = keys.clone();
            sorted.sort_unstable();
            assert_eq!(keys, sorted);
            for x in split.image.iter().chain(&split.text) {
                assert_eq!(x.shape(), (ds.spec.tokens_per_sample, 16));
                assert!(x.is_finite());
            }
        }
    }

    #[test]
    fn rejects_unsatisfiable_specs() {
        let bad = [
            SyntheticDatasetSpec { latent_dim: 1, ..Default::default() },
            SyntheticDatasetSpec { num_classes: 0, ..Default::default() },
            SyntheticDatasetSpec { anisotropy: 1.0, ..Default::default() },
            SyntheticDatasetSpec { noise_scale: -1.0, ..Default::default() },
            SyntheticDatasetSpec { offset_scale: f64::NAN, ..Default::default() },
            SyntheticDatasetSpec { coding: Coding::Mean, mean_scale: 0.0, ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(generate(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    fn class_tokens(split: &Split, c: usize) -> Vec<&[f64]> {
        split
            .image
            .iter()
            .zip(&split.labels)
            .filter(|(_, &l)| l == c)
            .flat_map(|(x, _)| (0..x.rows()).map(move |r| x.row(r)))
            .collect()
    }

    fn moments(tokens: &[&[f64]]) -> (DVector<f64>, DMatrix<f64>) {
        let d = tokens[0].len();
        let n = tokens.len() as f64;
        let mean = DVector::from_fn(d, |j, _| tokens.iter().map(|t| t[j]).sum::<f64>() / n);
        let mut cov = DMatrix::zeros(d, d);
        for t in tokens {
            let v = DVector::from_fn(d, |j, _| t[j] - mean[j]);
            cov += &v * v.transpose();
        }
        (mean, cov / (n - 1.0))
    }

    #[test]
    fn covariance_coding_hides_class_in_second_moments() {
        let ds = generate(&SyntheticDatasetSpec { seed: 3, offset_scale: 0.0, ..Default::default() }).unwrap();
        let stats: Vec<_> = (0..ds.spec.num_classes).map(|c| {
            let toks = class_tokens(&ds.train, c);
            let n = toks.len() as f64;
            let (m, s) = moments(&toks);
            (m, s, n)
        }).collect();
        for a in 0..stats.len() {
            for b in a + 1..stats.len() {
                let (ma, sa, na) = &stats[a];
                let (mb, sb, nb) = &stats[b];
                // Standard error of the mean difference under independent tokens.
                let se = (sa.trace() / na + sb.trace() / nb).sqrt();
                assert!((ma - mb).norm() < 3.0 * se, "classes {a},{b}");
                assert!((sa - sb).norm() > 10.0 * se, "classes {a},{b}");
            }
        }
    }

    #[test]
    fn calibration_separates_the_codings() {
        let cov = generate(&SyntheticDatasetSpec { seed: 5, ..Default::default() }).unwrap();
        let c = &cov.calibration;
        assert!(c.mean_classifier_accuracy <= c.chance + 0.1, "{c:?}");
        assert!(c.qda_accuracy > 0.95, "{c:?}");
        assert_eq!(c.max_mean_separation, 0.0);
        assert!(c.min_covariance_separation > 0.0);

        let mean = generate(&SyntheticDatasetSpec { seed: 5, coding: Coding::Mean, offset_scale: 0.0, ..Default::default() }).unwrap();
        assert!(mean.calibration.mean_classifier_accuracy > mean.calibration.chance + 0.5, "{:?}", mean.calibration);
        assert_eq!(mean.calibration.min_covariance_separation, 0.0);
    }

    #[test]
    fn mixed_coding_pairs_share_means() {
        let ds = generate(&small(Coding::Mixed, 2)).unwrap();
        assert!(ds.calibration.min_covariance_separation > 0.0);
        assert!(ds.calibration.max_mean_separation > 0.0);
    }

    #[test]
    fn generation_is_deterministic_on_disk() {
        let spec = small(Coding::Covariance, 7);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&spec).unwrap().save(a.path()).unwrap();
        generate(&spec).unwrap().save(b.path()).unwrap();
        for name in ["manifest.json", "train_image.blob", "train_text.blob", "test_image.blob", "test_text.blob"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        let loaded = Dataset::load(a.path()).unwrap();
        assert_eq!(loaded, generate(&spec).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&small(Coding::Covariance, 1)).unwrap();
        let b = generate(&small(Coding::Covariance, 2)).unwrap();
        assert_ne!(a.train.image[0], b.train.image[0]);
    }

    #[test]
    fn single_class_has_chance_one() {
        let ds = generate(&SyntheticDatasetSpec { num_classes: 1, samples_per_class: 10, ..Default::default() }).unwrap();
        assert_eq!(ds.calibration.chance, 1.0);
        assert_eq!(ds.calibration.qda_accuracy, 1.0);
    }

    #[test]
    fn mixing_counts_and_endpoints() {
        let a = generate(&small(Coding::Covariance, 1)).unwrap().train;
        let b = generate(&small(Coding::Mean, 2)).unwrap().train;
        assert_eq!(mix_domains(&a, &b, 0.0, 9).unwrap().split, b);
        assert_eq!(mix_domains(&a, &b, 1.0, 9).unwrap().split, a);
        let mixed = mix_domains(&a, &b, 0.25, 9).unwrap();
        let n = a.len();
        assert_eq!(mixed.domain.iter().filter(|&&d| d == 0).count(), n / 4);
        assert_eq!(mixed.split.len(), n);
        assert_eq!(mix_domains(&a, &b, 0.25, 9).unwrap(), mixed);
        assert!(mix_domains(&a, &b, 1.5, 9).is_err());
        assert!(mix_domains(&a, &b, -0.1, 9).is_err());
    }

    #[test]
    fn floor_rule_on_a_thousand_records() {
        let spec = SyntheticDatasetSpec { num_classes: 5, samples_per_class: 200, tokens_per_sample: 1, raw_dim: 2, latent_dim: 2, ..Default::default() };
        let ds = generate(&spec).unwrap();
        let mut all = ds.train.clone();
        for i in 0..ds.test.len() {
            let (x, t, l, k) = ds.test.get(i);
            all.push(x, t, l, k);
        }
        assert_eq!(all.len(), 1000);
        for (r, expect) in [(0.25, 250), (0.333, 333), (0.999, 999)] {
            let mixed = mix_domains(&all, &all, r, 4).unwrap();
            assert_eq!(mixed.domain.iter().filter(|&&d| d == 0).count(), expect);
        }
    }
}

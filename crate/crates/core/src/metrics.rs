//! Image-set and paired-image metrics: FID, the round-trip aFID protocol,
//! PSNR, SSIM and backbone feature distances.
//!
//! Images are `[N, C, H, W]` tensors in `[−1, 1]`. PSNR and SSIM map them to
//! `[0, 1]` and use a peak of 1; feature metrics feed them to the backbone as is.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::conditioners::{IdentityEmbedder, IdentityExtractor};
use crate::data::DatasetManifest;
use crate::diffusion::{NoiseSchedule, SampleOptions};
use crate::error::{shape_err, Error, Result};
use crate::model::CcfModel;
use crate::tensor::{ensure_same_shape, to_f64_vec};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
const CHUNK: usize = 16;

/// Gaussian moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance of `rows` (`n × m`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Metric(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let m = rows[0].len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(shape_err("feature rows must share a nonzero width"));
        }
        let mut mean = DVector::zeros(m);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(m, m);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            for i in 0..m {
                for j in i..m {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        if self.cov.shape() != (m, m) {
            return Err(shape_err(format!("covariance {:?} for {m} features", self.cov.shape())));
        }
        if self.n < 2 {
            return Err(Error::Metric("feature statistics need n >= 2".into()));
        }
        for i in 0..m {
            for j in 0..i {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-8 {
                    return Err(Error::Metric(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Square root of a symmetric positive semi-definite matrix, negative eigenvalues clipped to 0.
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((Σa Σb)^{1/2})`, evaluated as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sqrt_psd(a);
    let c = &s * b * &s;
    let sym = (&c + c.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Fréchet distance `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(shape_err(format!("feature widths {} and {} differ", a.dim(), b.dim())));
    }
    let d = (&a.mean - &b.mean).norm_squared();
    let v = d + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov);
    Ok(v.max(0.0))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

fn unit_range(x: &Tensor) -> Result<Tensor> {
    Ok(((x.to_dtype(DType::F64)? + 1.0)? * 0.5)?)
}

fn per_image_values(x: &Tensor) -> Result<(usize, Vec<f64>)> {
    let n = x.dim(0)?;
    Ok((n, to_f64_vec(x)?))
}

/// Mean per-image PSNR after mapping both sets to `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    ensure_same_shape(a, b, "psnr operands")?;
    if !(peak > 0.0) {
        return Err(Error::Metric(format!("peak must be positive, got {peak}")));
    }
    let (n, va) = per_image_values(&unit_range(a)?)?;
    let (_, vb) = per_image_values(&unit_range(b)?)?;
    let per = va.len() / n;
    let total: f64 = (0..n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            let mse = va[r.clone()].iter().zip(&vb[r]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per as f64;
            psnr_from_mse(mse, peak)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the `[0, 1]`-mapped images.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams, k: &[f64]) -> f64 {
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean local SSIM over every image and channel, Gaussian window, no padding.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<f64> {
    ensure_same_shape(a, b, "ssim operands")?;
    let (n, c, h, w) = a.dims4()?;
    if params.window == 0 || params.window > h || params.window > w {
        return Err(Error::Metric(format!("{}-pixel window does not fit {h}x{w} images", params.window)));
    }
    let k = gaussian_kernel(params.window, params.sigma);
    let va = to_f64_vec(&unit_range(a)?)?;
    let vb = to_f64_vec(&unit_range(b)?)?;
    let plane = h * w;
    let total: f64 = (0..n * c)
        .map(|i| {
            let r = i * plane..(i + 1) * plane;
            ssim_plane(&va[r.clone()], &vb[r], h, w, params, &k)
        })
        .sum();
    Ok(total / (n * c) as f64)
}

/// A frozen image network exposing a global embedding and intermediate activations.
pub trait FeatureBackbone {
    /// `[B, C, H, W]` → `[B, m]`.
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
    /// `[B, C_l, H_l, W_l]` per layer, shallow to deep.
    fn layers(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

impl FeatureBackbone for IdentityExtractor {
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.embed_identity(x)
    }

    fn layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.encoder().forward_layers(x)
    }
}

fn chunks(images: &Tensor) -> Result<Vec<Tensor>> {
    let n = images.dim(0)?;
    (0..n)
        .step_by(CHUNK)
        .map(|s| Ok(images.narrow(0, s, CHUNK.min(n - s))?))
        .collect()
}

/// One feature row per image.
pub fn embed_images(images: &Tensor, backbone: &dyn FeatureBackbone) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for chunk in chunks(images)? {
        let f = backbone.embed(&chunk)?.to_dtype(DType::F64)?;
        rows.extend(f.to_vec2::<f64>()?);
    }
    Ok(rows)
}

pub fn image_stats(images: &Tensor, backbone: &dyn FeatureBackbone) -> Result<FeatureStats> {
    FeatureStats::from_rows(&embed_images(images, backbone)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Perceptual {
    /// Features scaled to unit length along channels before comparison.
    LpipsLike,
    /// Raw features.
    PlLike,
}

/// Weighted sum over backbone layers of the mean squared feature difference, averaged over images.
pub fn perceptual_distance(
    a: &Tensor,
    b: &Tensor,
    backbone: &dyn FeatureBackbone,
    layer_weights: &[f64],
    kind: Perceptual,
) -> Result<f64> {
    ensure_same_shape(a, b, "perceptual operands")?;
    let n = a.dim(0)?;
    let mut total = 0.0;
    for (ca, cb) in chunks(a)?.into_iter().zip(chunks(b)?) {
        let la = backbone.layers(&ca)?;
        let lb = backbone.layers(&cb)?;
        if la.len() != layer_weights.len() {
            return Err(Error::Metric(format!(
                "{} layer weights for a backbone with {} layers",
                layer_weights.len(),
                la.len()
            )));
        }
        if la.len() < 2 {
            return Err(Error::Metric("perceptual distance needs at least two layers".into()));
        }
        for ((fa, fb), w) in la.iter().zip(&lb).zip(layer_weights) {
            let (fa, fb) = (fa.to_dtype(DType::F64)?, fb.to_dtype(DType::F64)?);
            let (fa, fb) = match kind {
                Perceptual::LpipsLike => {
                    let norm = |f: &Tensor| -> Result<Tensor> {
                        let len = (f.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
                        Ok(f.broadcast_div(&len)?)
                    };
                    (norm(&fa)?, norm(&fb)?)
                }
                Perceptual::PlLike => (fa, fb),
            };
            let per_image = (fa - fb)?.sqr()?.flatten_from(1)?.mean(D::Minus1)?;
            total += w * per_image.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total / n as f64)
}

/// Uniform weights summing to one for a backbone's layers.
pub fn uniform_layer_weights(backbone: &dyn FeatureBackbone, probe: &Tensor) -> Result<Vec<f64>> {
    let l = backbone.layers(&probe.narrow(0, 0, 1)?)?.len();
    Ok(vec![1.0 / l as f64; l])
}

/// Produces faces with the identity of `x_id` and the expression of `x_style`.
pub trait Generator {
    fn generate(&self, x_id: &Tensor, x_style: &Tensor) -> Result<Tensor>;
}

/// Returns the expression image unchanged: the perfect round trip.
pub struct StyleCopy;

impl Generator for StyleCopy {
    fn generate(&self, _x_id: &Tensor, x_style: &Tensor) -> Result<Tensor> {
        Ok(x_style.clone())
    }
}

/// Ancestral sampling from a trained model; outputs clamped to `[−1, 1]`.
pub struct ModelGenerator<'a> {
    pub model: &'a CcfModel,
    pub schedule: &'a NoiseSchedule,
    pub seed: u64,
    pub options: SampleOptions,
}

impl Generator for ModelGenerator<'_> {
    fn generate(&self, x_id: &Tensor, x_style: &Tensor) -> Result<Tensor> {
        ensure_same_shape(x_id, x_style, "generator inputs")?;
        let dt = self.model.dtype();
        let mut out = Vec::new();
        for (i, (ci, cs)) in chunks(x_id)?.into_iter().zip(chunks(x_style)?).enumerate() {
            let seed = self.seed.wrapping_add(i as u64);
            let g = self
                .model
                .generate(&ci.to_dtype(dt)?, &cs.to_dtype(dt)?, self.schedule, seed, self.options)?;
            out.push(g.clamp(-1.0, 1.0)?);
        }
        Ok(Tensor::cat(&out, 0)?.to_dtype(x_style.dtype())?)
    }
}

/// Which entries serve as identity sources in the two aFID passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfidPairing {
    /// Pass 1: an image of another person, per test entry.
    pub pass1_identity: Vec<usize>,
    /// Pass 2: a different image of the entry's own person.
    pub pass2_identity: Vec<usize>,
}

/// Round-robin pairing over persons, rotated by `pairing_seed`.
pub fn afid_pairing(manifest: &DatasetManifest, pairing_seed: u64) -> Result<AfidPairing> {
    if manifest.is_empty() {
        return Err(Error::Metric("empty test manifest".into()));
    }
    let groups = manifest.by_person();
    let persons: Vec<&Vec<usize>> = groups.values().collect();
    let k = persons.len();
    if k < 2 {
        return Err(Error::Metric(format!("identity pool of size {k}; aFID needs at least 2 persons")));
    }
    let shift = 1 + (pairing_seed % (k as u64 - 1)) as usize;
    let mut pass1 = vec![0; manifest.len()];
    let mut pass2 = vec![0; manifest.len()];
    for (pi, entries) in persons.iter().enumerate() {
        let other = persons[(pi + shift) % k];
        for (rank, &e) in entries.iter().enumerate() {
            pass1[e] = other[(rank + pairing_seed as usize) % other.len()];
            pass2[e] = entries[(rank + 1) % entries.len()];
        }
    }
    Ok(AfidPairing {
        pass1_identity: pass1,
        pass2_identity: pass2,
    })
}

/// Test entries used by an evaluation: all, or `max` spread round-robin over persons.
pub fn evaluation_subset(manifest: &DatasetManifest, max: usize) -> DatasetManifest {
    if max == 0 || max >= manifest.len() {
        return manifest.clone();
    }
    let groups: Vec<Vec<usize>> = manifest.by_person().into_values().collect();
    let mut picked = Vec::new();
    let mut rank = 0;
    while picked.len() < max {
        for g in &groups {
            if let Some(&e) = g.get(rank) {
                if picked.len() < max {
                    picked.push(e);
                }
            }
        }
        rank += 1;
    }
    picked.sort_unstable();
    DatasetManifest {
        split: manifest.split,
        entries: picked.iter().map(|&i| manifest.entries[i].clone()).collect(),
        root: manifest.root.clone(),
    }
}

fn gather(images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), images.device())?;
    Ok(images.index_select(&ids, 0)?)
}

/// Outputs of the two aFID passes.
pub struct RoundTrip {
    pub pass1: Tensor,
    pub pass2: Tensor,
}

pub fn round_trip(images: &Tensor, pairing: &AfidPairing, generator: &dyn Generator) -> Result<RoundTrip> {
    let pass1 = generator.generate(&gather(images, &pairing.pass1_identity)?, images)?;
    let pass2 = generator.generate(&gather(images, &pairing.pass2_identity)?, &pass1)?;
    Ok(RoundTrip { pass1, pass2 })
}

/// FID between the round-trip outputs and the real test images; 0 is a perfect round trip.
pub fn afid(
    manifest: &DatasetManifest,
    images: &Tensor,
    generator: &dyn Generator,
    backbone: &dyn FeatureBackbone,
    pairing_seed: u64,
) -> Result<f64> {
    if images.dim(0)? != manifest.len() {
        return Err(shape_err("image count differs from the manifest"));
    }
    let pairing = afid_pairing(manifest, pairing_seed)?;
    let rt = round_trip(images, &pairing, generator)?;
    fid(&image_stats(&rt.pass2, backbone)?, &image_stats(images, backbone)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub afid: f64,
    pub fid: f64,
    pub psnr_id: f64,
    pub psnr_style: f64,
    pub ssim_id: f64,
    pub ssim_style: f64,
    #[serde(rename = "lpips-like_id")]
    pub lpips_like_id: f64,
    #[serde(rename = "lpips-like_style")]
    pub lpips_like_style: f64,
    #[serde(rename = "pl-like_id")]
    pub pl_like_id: f64,
    #[serde(rename = "pl-like_style")]
    pub pl_like_style: f64,
    pub pairing: String,
    pub images: usize,
    pub pairing_seed: u64,
    pub config_hash: String,
    pub checkpoint_id: String,
}

pub const PAIRING_NOTE: &str = "each test image is the style (expression) source; its identity source is an image of another test person (aFID pass-1 pairing); *_id compares outputs with the identity image, *_style with the style image";

impl MetricReport {
    pub fn values(&self) -> [(&'static str, f64); 10] {
        [
            ("afid", self.afid),
            ("fid", self.fid),
            ("psnr_id", self.psnr_id),
            ("psnr_style", self.psnr_style),
            ("ssim_id", self.ssim_id),
            ("ssim_style", self.ssim_style),
            ("lpips-like_id", self.lpips_like_id),
            ("lpips-like_style", self.lpips_like_style),
            ("pl-like_id", self.pl_like_id),
            ("pl-like_style", self.pl_like_style),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.values() {
            if !v.is_finite() {
                return Err(Error::Metric(format!("{name} is not finite")));
            }
        }
        for v in [self.psnr_id, self.psnr_style] {
            if !(0.0..=PSNR_CAP).contains(&v) {
                return Err(Error::Metric(format!("psnr {v} outside [0, {PSNR_CAP}]")));
            }
        }
        for v in [self.ssim_id, self.ssim_style] {
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(Error::Metric(format!("ssim {v} outside [0, 1]")));
            }
        }
        for (name, v) in self.values() {
            if name != "psnr_id" && name != "psnr_style" && name != "ssim_id" && name != "ssim_style" && v < 0.0 {
                return Err(Error::Metric(format!("{name} is negative")));
            }
        }
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, f64> {
        self.values().into_iter().collect()
    }
}

/// Identification of what was evaluated, copied into the report.
#[derive(Debug, Clone, Default)]
pub struct ReportContext {
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Generates one image per test pairing and computes every report field.
pub fn evaluate_generator(
    manifest: &DatasetManifest,
    images: &Tensor,
    generator: &dyn Generator,
    backbone: &dyn FeatureBackbone,
    pairing_seed: u64,
    context: ReportContext,
) -> Result<MetricReport> {
    if images.dim(0)? != manifest.len() {
        return Err(shape_err("image count differs from the manifest"));
    }
    let pairing = afid_pairing(manifest, pairing_seed)?;
    let rt = round_trip(images, &pairing, generator)?;
    let x_id = gather(images, &pairing.pass1_identity)?;
    let out = &rt.pass1;
    let real = image_stats(images, backbone)?;
    let weights = uniform_layer_weights(backbone, images)?;
    let sp = SsimParams::default();
    let dist = |a: &Tensor, b: &Tensor, k| perceptual_distance(a, b, backbone, &weights, k);
    Ok(MetricReport {
        afid: fid(&image_stats(&rt.pass2, backbone)?, &real)?,
        fid: fid(&image_stats(out, backbone)?, &real)?,
        psnr_id: psnr(out, &x_id, 1.0)?,
        psnr_style: psnr(out, images, 1.0)?,
        ssim_id: ssim(out, &x_id, &sp)?,
        ssim_style: ssim(out, images, &sp)?,
        lpips_like_id: dist(out, &x_id, Perceptual::LpipsLike)?,
        lpips_like_style: dist(out, images, Perceptual::LpipsLike)?,
        pl_like_id: dist(out, &x_id, Perceptual::PlLike)?,
        pl_like_style: dist(out, images, Perceptual::PlLike)?,
        pairing: PAIRING_NOTE.into(),
        images: manifest.len(),
        pairing_seed,
        config_hash: context.config_hash,
        checkpoint_id: context.checkpoint_id,
    })
}

//! Tiny per-pixel classifier: fixed input features, one smooth hidden layer,
//! and one linear head per class. Heads can be appended for new classes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RangeImage, CHANNELS};
use crate::losses::LogitsMap;
use crate::taxonomy::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Width of the hidden layer.
    pub hidden: usize,
    /// Append 3x3 neighbourhood means of the input channels.
    pub neighborhood: bool,
    /// Metres per unit for x, y, z and range before they enter the network.
    pub coord_scale: f64,
    /// Half-width of the uniform initialization of head weights.
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: 16,
            neighborhood: true,
            coord_scale: 10.0,
            init_scale: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        if self.neighborhood {
            2 * CHANNELS
        } else {
            CHANNELS
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("model.hidden must be positive".into()));
        }
        if !(self.coord_scale > 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("model scales must be positive".into()));
        }
        Ok(())
    }
}

/// Per-element input features of a range image, one row per valid pixel.
pub fn features(arch: &ArchConfig, image: &RangeImage) -> Array2<f64> {
    let (h, w) = (image.height(), image.width());
    let s = arch.coord_scale;
    let scaled = |px: usize| -> [f64; CHANNELS] {
        let c = image.flat_channels()[px];
        [
            c[0] as f64 / s,
            c[1] as f64 / s,
            c[2] as f64 / s,
            c[3] as f64,
            c[4] as f64 / s,
        ]
    };
    let pixels: Vec<usize> = image.valid_pixels().collect();
    let dim = arch.feature_dim();
    let mut out = Array2::zeros((pixels.len(), dim));
    for (row, &px) in pixels.iter().enumerate() {
        let own = scaled(px);
        for k in 0..CHANNELS {
            out[(row, k)] = own[k];
        }
        if !arch.neighborhood {
            continue;
        }
        let (r, c) = (px / w, px % w);
        let mut acc = [0.0; CHANNELS];
        let mut n = 0.0;
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for dc in [w - 1, 0, 1] {
                // columns wrap around in azimuth
                let cc = (c + dc) % w;
                if image.is_valid(rr, cc) {
                    let v = scaled(rr * w + cc);
                    for k in 0..CHANNELS {
                        acc[k] += v[k];
                    }
                    n += 1.0;
                }
            }
        }
        for k in 0..CHANNELS {
            out[(row, CHANNELS + k)] = acc[k] / n;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    Base,
    Extended,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub class: ClassId,
    pub weight: Array1<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// `hidden x feature_dim`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub heads: Vec<Head>,
    pub version: Version,
    /// Number of leading heads that came from the base model.
    pub base_heads: usize,
}

/// Gradient (or velocity) buffers shaped like `ModelParams`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `heads x hidden`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        ParamGrads {
            w1: Array2::zeros(p.w1.raw_dim()),
            b1: Array1::zeros(p.b1.len()),
            head_w: Array2::zeros((p.heads.len(), p.arch.hidden)),
            head_b: Array1::zeros(p.heads.len()),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.head_w += &other.head_w;
        self.head_b += &other.head_b;
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.head_w *= s;
        self.head_b *= s;
    }

    /// Same flattening order as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w1.iter().chain(self.b1.iter()).copied().collect();
        for k in 0..self.head_b.len() {
            v.extend(self.head_w.row(k).iter().copied());
            v.push(self.head_b[k]);
        }
        v
    }

    fn all_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.head_w)
            .chain(&self.head_b)
            .all(|v| v.is_finite())
    }
}

/// Hidden activations kept from the forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct Activations {
    pub features: Array2<f64>,
    pub hidden: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        rng.random_range(-scale..scale)
    }
}

fn new_head(rng: &mut ChaCha8Rng, class: ClassId, arch: &ArchConfig) -> Head {
    Head {
        class,
        weight: Array1::from_shape_fn(arch.hidden, |_| uniform(rng, arch.init_scale)),
        bias: 0.0,
    }
}

fn check_unique(classes: &[ClassId]) -> Result<()> {
    for (i, c) in classes.iter().enumerate() {
        if classes[..i].contains(c) {
            return Err(Error::Model(format!("duplicate class id {c}")));
        }
    }
    Ok(())
}

/// Seeded initialization; the same seed gives bit-identical parameters.
pub fn init(seed: u64, arch: &ArchConfig, classes: &[ClassId]) -> Result<ModelParams> {
    arch.validate()?;
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    check_unique(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = arch.feature_dim();
    let fan_in = 1.0 / (dim as f64).sqrt();
    let w1 = Array2::from_shape_fn((arch.hidden, dim), |_| uniform(&mut rng, fan_in));
    let heads = classes
        .iter()
        .map(|&c| new_head(&mut rng, c, arch))
        .collect();
    Ok(ModelParams {
        arch: *arch,
        w1,
        b1: Array1::zeros(arch.hidden),
        heads,
        version: Version::Base,
        base_heads: classes.len(),
    })
}

impl ModelParams {
    pub fn class_order(&self) -> Vec<ClassId> {
        self.heads.iter().map(|h| h.class).collect()
    }

    fn head_matrix(&self) -> (Array2<f64>, Array1<f64>) {
        let mut w = Array2::zeros((self.heads.len(), self.arch.hidden));
        for (k, h) in self.heads.iter().enumerate() {
            w.row_mut(k).assign(&h.weight);
        }
        (w, self.heads.iter().map(|h| h.bias).collect())
    }

    /// Forward pass from precomputed features.
    pub fn forward_features(&self, features: Array2<f64>) -> Result<(LogitsMap, Activations)> {
        if features.ncols() != self.w1.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input features", self.w1.ncols()),
                got: format!("{}", features.ncols()),
            });
        }
        let mut hidden = features.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let (hw, hb) = self.head_matrix();
        let mut logits = hidden.dot(&hw.t());
        logits += &hb;
        Ok((
            LogitsMap {
                values: logits,
                class_order: self.class_order(),
            },
            Activations { features, hidden },
        ))
    }

    /// One logit row per valid pixel, one column per head.
    pub fn forward(&self, image: &RangeImage) -> Result<LogitsMap> {
        Ok(self.forward_features(features(&self.arch, image))?.0)
    }

    /// Parameter gradients of a loss whose logit gradient is `grad`.
    pub fn backward(&self, act: &Activations, grad: &Array2<f64>) -> Result<ParamGrads> {
        let (m, k) = (act.hidden.nrows(), self.heads.len());
        if grad.dim() != (m, k) {
            return Err(Error::ShapeMismatch {
                expected: format!("{m}x{k} logit gradient"),
                got: format!("{:?}", grad.dim()),
            });
        }
        let (hw, _) = self.head_matrix();
        let head_w = grad.t().dot(&act.hidden);
        let head_b = grad.sum_axis(Axis(0));
        let mut dpre = grad.dot(&hw);
        dpre.zip_mut_with(&act.hidden, |d, &h| *d *= 1.0 - h * h);
        let w1 = dpre.t().dot(&act.features);
        let b1 = dpre.sum_axis(Axis(0));
        Ok(ParamGrads {
            w1,
            b1,
            head_w,
            head_b,
        })
    }

    /// Flattened parameters: `w1` row-major, `b1`, then each head's weights and bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w1.iter().chain(self.b1.iter()).copied().collect();
        for h in &self.heads {
            v.extend(h.weight.iter().copied());
            v.push(h.bias);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.to_flat().len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.to_flat().len()),
                got: format!("{}", flat.len()),
            });
        }
        let mut it = flat.iter().copied();
        for v in self.w1.iter_mut().chain(self.b1.iter_mut()) {
            *v = it.next().unwrap();
        }
        for h in &mut self.heads {
            for v in h.weight.iter_mut() {
                *v = it.next().unwrap();
            }
            h.bias = it.next().unwrap();
        }
        Ok(())
    }
}

/// Appends one freshly initialized head per novel class; everything else is
/// copied bit-exactly.
pub fn extend_heads(base: &ModelParams, novel: &[ClassId], seed: u64) -> Result<ModelParams> {
    if novel.is_empty() {
        return Err(Error::Empty("novel class list"));
    }
    let mut all = base.class_order();
    all.extend_from_slice(novel);
    check_unique(&all)?;
    if base.version != Version::Base {
        return Err(Error::Model("only a base model can be extended".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut out = base.clone();
    out.heads
        .extend(novel.iter().map(|&c| new_head(&mut rng, c, &base.arch)));
    out.version = Version::Extended;
    out.base_heads = base.heads.len();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Freeze {
    None,
    Backbone,
    BackboneAndBaseHeads,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "amount")]
pub enum LrDecay {
    /// `lr ← lr · (1 − amount)` after each epoch.
    Multiplicative(f64),
    /// `lr ← max(lr − amount, 0)` after each epoch.
    Additive(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub decay: LrDecay,
    pub velocity: ParamGrads,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, decay: LrDecay) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "optimizer needs lr >= 0 and momentum in [0, 1), got {lr}, {momentum}"
            )));
        }
        Ok(OptimizerState {
            lr,
            momentum,
            decay,
            velocity: ParamGrads::zeros_like(params),
        })
    }

    pub fn end_epoch(&mut self) {
        self.lr = match self.decay {
            LrDecay::Multiplicative(a) => self.lr * (1.0 - a),
            LrDecay::Additive(a) => (self.lr - a).max(0.0),
        };
    }
}

/// Momentum SGD step: `v ← μv + g`, `p ← p − lr·v` on non-frozen parts.
pub fn step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &ParamGrads,
    freeze: Freeze,
) -> Result<()> {
    if grads.head_b.len() != params.heads.len() || grads.w1.dim() != params.w1.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} heads", params.heads.len()),
            got: format!("{}", grads.head_b.len()),
        });
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteValue {
            what: "gradient",
            context: "optimizer step".into(),
        });
    }
    let (mu, lr) = (state.momentum, state.lr);
    let v = &mut state.velocity;
    if freeze == Freeze::None {
        v.w1.zip_mut_with(&grads.w1, |v, &g| *v = mu * *v + g);
        v.b1.zip_mut_with(&grads.b1, |v, &g| *v = mu * *v + g);
        params.w1.zip_mut_with(&v.w1, |p, &v| *p -= lr * v);
        params.b1.zip_mut_with(&v.b1, |p, &v| *p -= lr * v);
    }
    let first = match freeze {
        Freeze::BackboneAndBaseHeads => params.base_heads,
        _ => 0,
    };
    for k in first..params.heads.len() {
        let head = &mut params.heads[k];
        let mut vw = v.head_w.row_mut(k);
        vw.zip_mut_with(&grads.head_w.row(k), |v, &g| *v = mu * *v + g);
        head.weight.zip_mut_with(&vw, |p, &v| *p -= lr * v);
        v.head_b[k] = mu * v.head_b[k] + grads.head_b[k];
        head.bias -= lr * v.head_b[k];
    }
    Ok(())
}

/// Backpropagates `grad` from one image and applies a single step.
pub fn backward_and_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    image: &RangeImage,
    grad: &Array2<f64>,
    freeze: Freeze,
) -> Result<()> {
    let (_, act) = params.forward_features(features(&params.arch, image))?;
    let grads = params.backward(&act, grad)?;
    step(params, state, &grads, freeze)
}

const MAGIC: &[u8; 8] = b"GFSSCKPT";
const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

/// Little-endian checkpoint with the taxonomy fingerprint it was trained under.
pub fn encode_checkpoint(params: &ModelParams, fingerprint: &str) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(FORMAT_VERSION);
    w.bytes(fingerprint.as_bytes());
    w.u32(params.arch.hidden as u32);
    w.u32(params.arch.neighborhood as u32);
    w.f64(params.arch.coord_scale);
    w.f64(params.arch.init_scale);
    w.u32(match params.version {
        Version::Base => 0,
        Version::Extended => 1,
    });
    w.u32(params.base_heads as u32);
    w.u32(params.heads.len() as u32);
    for h in &params.heads {
        w.u32(h.class.0);
    }
    for v in params.to_flat() {
        w.f64(v);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8], expected_fingerprint: &str) -> Result<ModelParams> {
    let mut r = Reader(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let fv = r.u32()?;
    if fv != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {fv}"
        )));
    }
    let fp =
        String::from_utf8(r.bytes()?).map_err(|_| Error::Checkpoint("bad fingerprint".into()))?;
    if fp != expected_fingerprint {
        return Err(Error::Checkpoint(format!(
            "taxonomy mismatch: checkpoint {fp}, config {expected_fingerprint}"
        )));
    }
    let arch = ArchConfig {
        hidden: r.u32()? as usize,
        neighborhood: r.u32()? != 0,
        coord_scale: r.f64()?,
        init_scale: r.f64()?,
    };
    arch.validate()?;
    let version = match r.u32()? {
        0 => Version::Base,
        1 => Version::Extended,
        v => return Err(Error::Checkpoint(format!("unknown version tag {v}"))),
    };
    let base_heads = r.u32()? as usize;
    let k = r.u32()? as usize;
    let classes: Vec<ClassId> = (0..k)
        .map(|_| r.u32().map(ClassId))
        .collect::<Result<_>>()?;
    let mut params = init(0, &arch, &classes)?;
    params.version = version;
    params.base_heads = base_heads;
    let n = params.to_flat().len();
    let flat: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    if !r.0.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    params.set_flat(&flat)?;
    Ok(params)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    fingerprint: &str,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, fingerprint)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, fingerprint: &str) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Point, PointCloud, ProjectionConfig};
    use crate::losses::{loss_base, softmax};
    use crate::taxonomy::ClassWeights;

    fn classes() -> Vec<ClassId> {
        vec![ClassId(0), ClassId(1), ClassId(2)]
    }

    fn small_image(seed: u64) -> RangeImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ProjectionConfig::from_degrees(4, 4, 10.0, 20.0).unwrap();
        let pts = (0..40)
            .map(|_| {
                Point::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-4.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        project(&PointCloud::new(pts), &cfg).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let arch = ArchConfig::default();
        assert_eq!(
            init(3, &arch, &classes()).unwrap(),
            init(3, &arch, &classes()).unwrap()
        );
        assert_ne!(
            init(3, &arch, &classes()).unwrap(),
            init(4, &arch, &classes()).unwrap()
        );
        assert!(init(3, &arch, &[]).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let arch = ArchConfig {
            init_scale: 0.0,
            ..ArchConfig::default()
        };
        let mut p = init(1, &arch, &classes()).unwrap();
        p.w1.fill(0.0);
        let logits = p.forward(&small_image(1)).unwrap();
        assert!(logits.values.iter().all(|&v| v == 0.0));
        let probs = softmax(&logits);
        assert!(probs.values.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn duplicated_rows_without_neighbourhood() {
        let arch = ArchConfig {
            neighborhood: false,
            ..ArchConfig::default()
        };
        let p = init(2, &arch, &classes()).unwrap();
        let row = [0.3, -0.2, 0.1, 0.5, 0.4];
        let feats = Array2::from_shape_fn((2, 5), |(_, k)| row[k]);
        let (logits, _) = p.forward_features(feats).unwrap();
        assert_eq!(logits.values.row(0), logits.values.row(1));
        assert!(logits.values.iter().all(|v| v.is_finite()));
        assert!(p.forward_features(Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn extension_copies_base() {
        let arch = ArchConfig::default();
        let base = init(5, &arch, &classes()).unwrap();
        let ext = extend_heads(&base, &[ClassId(7), ClassId(8)], 9).unwrap();
        assert_eq!(ext.version, Version::Extended);
        assert_eq!(ext.heads.len(), 5);
        let img = small_image(2);
        let a = base.forward(&img).unwrap();
        let b = ext.forward(&img).unwrap();
        for r in 0..a.values.nrows() {
            for c in 0..3 {
                assert_eq!(a.values[(r, c)].to_bits(), b.values[(r, c)].to_bits());
            }
        }
        assert!(extend_heads(&base, &[], 1).is_err());
        assert!(
            matches!(extend_heads(&ext, &[ClassId(7)], 1), Err(Error::Model(m)) if m.contains("duplicate"))
        );
        assert!(extend_heads(&base, &[ClassId(1)], 1).is_err());
    }

    #[test]
    fn zero_gradient_and_frozen_backbone() {
        let arch = ArchConfig::default();
        let img = small_image(3);
        let mut p = init(5, &arch, &classes()).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, 0.1, 0.9, LrDecay::Multiplicative(0.01)).unwrap();
        let zero = Array2::zeros((img.valid_count(), 3));
        backward_and_step(&mut p, &mut st, &img, &zero, Freeze::None).unwrap();
        assert_eq!(p, before);

        let grad = Array2::from_elem((img.valid_count(), 3), 0.1);
        backward_and_step(&mut p, &mut st, &img, &grad, Freeze::Backbone).unwrap();
        assert_eq!(p.w1, before.w1);
        assert_eq!(p.b1, before.b1);
        assert_ne!(p.heads, before.heads);

        let mut ext = extend_heads(&before, &[ClassId(9)], 1).unwrap();
        let ext_before = ext.clone();
        let mut st = OptimizerState::new(&ext, 0.1, 0.9, LrDecay::Multiplicative(0.01)).unwrap();
        let grad = Array2::from_elem((img.valid_count(), 4), 0.1);
        backward_and_step(&mut ext, &mut st, &img, &grad, Freeze::BackboneAndBaseHeads).unwrap();
        assert_eq!(ext.heads[..3], ext_before.heads[..3]);
        assert_ne!(ext.heads[3], ext_before.heads[3]);

        let bad = Array2::from_elem((img.valid_count(), 3), f64::NAN);
        assert!(backward_and_step(&mut p, &mut st, &img, &bad, Freeze::None).is_err());
        let wrong = Array2::zeros((img.valid_count(), 2));
        assert!(backward_and_step(&mut p, &mut st, &img, &wrong, Freeze::None).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let arch = ArchConfig::default();
        let img = small_image(4);
        let p = init(6, &arch, &classes()).unwrap();
        let labels: Vec<_> = (0..img.valid_count())
            .map(|i| Some(ClassId((i % 3) as u32)))
            .collect();
        let w = ClassWeights::from_map(
            [(ClassId(0), 1.0), (ClassId(1), 2.0), (ClassId(2), 0.5)].into(),
        )
        .unwrap();
        let loss = |q: &ModelParams| {
            let probs = softmax(&q.forward(&img).unwrap());
            loss_base(&probs, &labels, &w).unwrap()
        };
        let (logits, act) = p.forward_features(features(&arch, &img)).unwrap();
        let analytic = p
            .backward(
                &act,
                &loss_base(&softmax(&logits), &labels, &w).unwrap().grad,
            )
            .unwrap()
            .to_flat();
        let base = p.to_flat();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let mut q = p.clone();
            let mut f = base.clone();
            f[i] += h;
            q.set_flat(&f).unwrap();
            let up = loss(&q).value;
            f[i] -= 2.0 * h;
            q.set_flat(&f).unwrap();
            let down = loss(&q).value;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "param {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = ArchConfig::default();
        let base = init(5, &arch, &classes()).unwrap();
        let ext = extend_heads(&base, &[ClassId(7)], 9).unwrap();
        let bytes = encode_checkpoint(&ext, "abc");
        assert_eq!(decode_checkpoint(&bytes, "abc").unwrap(), ext);
        assert!(decode_checkpoint(&bytes, "xyz").is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], "abc").is_err());
    }

    #[test]
    fn lr_decay() {
        let p = init(1, &ArchConfig::default(), &classes()).unwrap();
        let mut st = OptimizerState::new(&p, 0.01, 0.9, LrDecay::Multiplicative(0.01)).unwrap();
        st.end_epoch();
        assert!((st.lr - 0.0099).abs() < 1e-15);
        let mut st = OptimizerState::new(&p, 0.01, 0.9, LrDecay::Additive(0.01)).unwrap();
        st.end_epoch();
        assert_eq!(st.lr, 0.0);
        assert!(OptimizerState::new(&p, 0.01, 1.0, LrDecay::Additive(0.0)).is_err());
    }
}

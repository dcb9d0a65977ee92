//! Model backend: evaluates a classifier `f(I) = t(g(I)) W + b` at its three
//! named points (`conv_features`, `latent`, `logits`) and exposes the final
//! linear layer parameters.

mod onnx;
mod parity;

use std::path::Path;

use image::{DynamicImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureMap3D, ImageTensor, LatentVector, Matrix};

pub use onnx::OnnxNetwork;
pub use parity::{read_parity_file, ParityFile};

/// Maximum tolerated `|logits - (latent W + b)|_inf`.
pub const DECOMPOSITION_TOLERANCE: f32 = 1e-3;

/// Names of the graph outputs the interchange contract requires.
pub const CONV_FEATURES: &str = "conv_features";
pub const LATENT: &str = "latent";
pub const LOGITS: &str = "logits";

/// Raw outputs of one graph evaluation.
#[derive(Debug, Clone)]
pub struct NetworkOutputs {
    pub conv_features: Option<FeatureMap3D<f32>>,
    pub latent: Vec<f32>,
    pub logits: Vec<f32>,
}

/// An inference graph evaluated one preprocessed image at a time.
///
/// Implementations must be deterministic and reentrant.
pub trait Network: Send + Sync {
    fn run(&self, image: &ImageTensor) -> Result<NetworkOutputs>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// `t` is global average pooling over the spatial grid.
    Gap,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLayerRef {
    pub weight_initializer: String,
    pub bias_initializer: String,
}

fn default_true() -> bool {
    true
}

/// JSON manifest shipped next to the graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub class_names: Vec<String>,
    pub final_layer: FinalLayerRef,
    pub pooling: Pooling,
    /// Non-convolutional backbones omit `conv_features`.
    #[serde(default = "default_true")]
    pub convolutional: bool,
}

impl ModelManifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c != 1 && c != 3 {
            return Err(Error::Contract(format!("input_shape channels must be 1 or 3, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Contract("input_shape height/width must be >= 1".into()));
        }
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::Contract(format!(
                "mean/std need {c} entries, got {}/{}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Contract("std entries must be positive".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::Contract("class_names is empty".into()));
        }
        Ok(())
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub predicted_class: usize,
    pub latent: LatentVector<f32>,
    pub conv_features: Option<FeatureMap3D<f32>>,
}

impl Prediction {
    pub fn logit(&self, class: usize) -> f32 {
        self.logits[class]
    }
}

/// Row-major first index of the largest logit.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// A loaded classifier together with its manifest and final linear layer.
pub struct ModelBundle {
    network: Box<dyn Network>,
    manifest: ModelManifest,
    weights: Matrix<f32>,
    bias: Vec<f32>,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("manifest", &self.manifest)
            .field("d_latent", &self.weights.rows())
            .field("n_classes", &self.weights.cols())
            .finish_non_exhaustive()
    }
}

/// Loads a graph file plus manifest and validates the decomposition contract.
pub fn load_model(path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<ModelBundle> {
    let manifest = ModelManifest::from_path(manifest_path)?;
    let (network, weights, bias) = OnnxNetwork::load(path.as_ref(), &manifest)?;
    ModelBundle::from_parts(Box::new(network), manifest, weights, bias)
}

impl ModelBundle {
    /// Assembles a bundle and checks `logits = latent W + b` on a mean-valued
    /// dummy input. `weights` is `d_latent x n_classes`.
    pub fn from_parts(
        network: Box<dyn Network>,
        manifest: ModelManifest,
        weights: Matrix<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        manifest.validate()?;
        let n_classes = manifest.class_names.len();
        if weights.cols() != n_classes {
            return Err(Error::Contract(format!(
                "final layer has {} outputs but manifest names {n_classes} classes",
                weights.cols()
            )));
        }
        if bias.len() != n_classes {
            return Err(Error::Contract(format!(
                "final bias has {} entries, expected {n_classes}",
                bias.len()
            )));
        }
        let bundle = ModelBundle {
            network,
            manifest,
            weights,
            bias,
        };
        let [c, h, w] = bundle.manifest.input_shape;
        let dummy = ImageTensor::filled(c, h, w, bundle.occlusion_fill())?;
        bundle.forward(&dummy)?;
        Ok(bundle)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    /// `(channels, height, width)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.manifest.input_shape;
        (c, h, w)
    }

    /// `(height, width)`.
    pub fn input_size(&self) -> (usize, usize) {
        (self.manifest.input_shape[1], self.manifest.input_shape[2])
    }

    /// Final layer weights, `d_latent x n_classes`.
    pub fn weights(&self) -> &Matrix<f32> {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn d_latent(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn pooling(&self) -> Pooling {
        self.manifest.pooling
    }

    pub fn is_convolutional(&self) -> bool {
        self.manifest.convolutional
    }

    /// Occlusion fill in normalized space: the per-channel dataset mean maps to 0.
    pub fn occlusion_fill(&self) -> f32 {
        0.0
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<Prediction> {
        let (c, h, w) = self.input_shape();
        if image.shape() != (c, h, w) {
            let (ic, ih, iw) = image.shape();
            return Err(Error::Preprocessing(format!(
                "image shape ({ic},{ih},{iw}) does not match model input ({c},{h},{w})"
            )));
        }
        let out = self.network.run(image)?;
        if out.latent.len() != self.d_latent() {
            return Err(Error::Contract(format!(
                "latent has {} features, final layer expects {}",
                out.latent.len(),
                self.d_latent()
            )));
        }
        if out.logits.len() != self.n_classes() {
            return Err(Error::Contract(format!(
                "logits has {} entries, expected {}",
                out.logits.len(),
                self.n_classes()
            )));
        }
        if self.manifest.convolutional && out.conv_features.is_none() {
            return Err(Error::Contract(format!("missing output `{CONV_FEATURES}`")));
        }
        let deviation = self.decomposition_error(&out.latent, &out.logits);
        if !(deviation < DECOMPOSITION_TOLERANCE) {
            return Err(Error::Decomposition {
                deviation,
                tolerance: DECOMPOSITION_TOLERANCE,
            });
        }
        Ok(Prediction {
            predicted_class: argmax(&out.logits),
            latent: LatentVector::new(out.latent)?,
            logits: out.logits,
            conv_features: out.conv_features,
        })
    }

    /// Elementwise [`forward`](Self::forward), order preserved.
    pub fn forward_batch(&self, images: &[ImageTensor]) -> Result<Vec<Prediction>> {
        images.par_iter().map(|img| self.forward(img)).collect()
    }

    /// `latent W + b`.
    pub fn linear_head(&self, latent: &[f32]) -> Vec<f32> {
        (0..self.n_classes())
            .map(|c| {
                let dot: f64 = latent
                    .iter()
                    .enumerate()
                    .map(|(d, x)| *x as f64 * self.weights.get(d, c) as f64)
                    .sum();
                (dot + self.bias[c] as f64) as f32
            })
            .collect()
    }

    fn decomposition_error(&self, latent: &[f32], logits: &[f32]) -> f32 {
        self.linear_head(latent)
            .iter()
            .zip(logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Converts a decoded image into a normalized model input, resizing to the
    /// model's input size when needed.
    pub fn preprocess(&self, image: &DynamicImage, source_path: &str) -> Result<ImageTensor> {
        let (c, h, w) = self.input_shape();
        let resized;
        let image = if image.width() as usize != w || image.height() as usize != h {
            resized = image.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
            &resized
        } else {
            image
        };
        let plane = h * w;
        let mut pixels = vec![0.0f32; c * plane];
        if c == 1 {
            let luma = image.to_luma32f();
            for (p, px) in luma.pixels().enumerate() {
                pixels[p] = px.0[0];
            }
        } else {
            let rgb = image.to_rgb32f();
            for (p, px) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    pixels[ch * plane + p] = px.0[ch];
                }
            }
        }
        for ch in 0..c {
            let (mean, std) = (self.manifest.mean[ch], self.manifest.std[ch]);
            for v in &mut pixels[ch * plane..(ch + 1) * plane] {
                *v = (*v - mean) / std;
            }
        }
        ImageTensor::new(pixels, c, h, w, source_path)
    }

    pub fn load_image(&self, path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        self.preprocess(&decoded, &path.to_string_lossy())
    }

    /// Undoes normalization for display; grayscale inputs are replicated to RGB.
    pub fn to_rgb(&self, image: &ImageTensor) -> RgbImage {
        let (c, h, w) = image.shape();
        let plane = h * w;
        let px = image.pixels();
        let channel_byte = |ch: usize, p: usize| -> u8 {
            let (mean, std) = (self.manifest.mean[ch.min(c - 1)], self.manifest.std[ch.min(c - 1)]);
            ((px[ch * plane + p] * std + mean).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            if c == 1 {
                let v = channel_byte(0, p);
                image::Rgb([v, v, v])
            } else {
                image::Rgb([channel_byte(0, p), channel_byte(1, p), channel_byte(2, p)])
            }
        })
    }

    /// Undoes normalization into the image's native channel count.
    pub fn to_dynamic(&self, image: &ImageTensor) -> DynamicImage {
        let rgb = self.to_rgb(image);
        if image.channels() == 1 {
            DynamicImage::ImageRgb8(rgb).into_luma8().into()
        } else {
            DynamicImage::ImageRgb8(rgb)
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Hand-written networks for unit tests.

    use super::*;

    /// Encoder is the identity on the flattened image; head is `W`, `b`.
    pub struct IdentityEncoder;

    impl Network for IdentityEncoder {
        fn run(&self, image: &ImageTensor) -> Result<NetworkOutputs> {
            Ok(NetworkOutputs {
                conv_features: None,
                latent: image.pixels().to_vec(),
                logits: Vec::new(),
            })
        }
    }

    /// Wraps an encoder and computes logits with the given head so the
    /// decomposition holds by construction.
    pub struct WithHead<N> {
        pub encoder: N,
        pub weights: Matrix<f32>,
        pub bias: Vec<f32>,
    }

    impl<N: Network> Network for WithHead<N> {
        fn run(&self, image: &ImageTensor) -> Result<NetworkOutputs> {
            let mut out = self.encoder.run(image)?;
            out.logits = (0..self.weights.cols())
                .map(|c| {
                    let dot: f64 = out
                        .latent
                        .iter()
                        .enumerate()
                        .map(|(d, x)| *x as f64 * self.weights.get(d, c) as f64)
                        .sum();
                    (dot + self.bias[c] as f64) as f32
                })
                .collect();
            Ok(out)
        }
    }

    pub fn manifest(input_shape: [usize; 3], n_classes: usize, convolutional: bool) -> ModelManifest {
        ModelManifest {
            input_shape,
            mean: vec![0.0; input_shape[0]],
            std: vec![1.0; input_shape[0]],
            class_names: (0..n_classes).map(|c| format!("class{c}")).collect(),
            final_layer: FinalLayerRef {
                weight_initializer: "w".into(),
                bias_initializer: "b".into(),
            },
            pooling: Pooling::Gap,
            convolutional,
        }
    }

    pub fn bundle_with_head<N: Network + 'static>(
        encoder: N,
        input_shape: [usize; 3],
        weights: Matrix<f32>,
        bias: Vec<f32>,
        convolutional: bool,
    ) -> ModelBundle {
        let n_classes = weights.cols();
        let net = WithHead {
            encoder,
            weights: weights.clone(),
            bias: bias.clone(),
        };
        ModelBundle::from_parts(
            Box::new(net),
            manifest(input_shape, n_classes, convolutional),
            weights,
            bias,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    fn toy() -> ModelBundle {
        bundle_with_head(IdentityEncoder, [1, 1, 2], Matrix::identity(2), vec![0.0, 0.0], false)
    }

    #[test]
    fn identity_linear_model_logits() {
        let bundle = toy();
        let img = ImageTensor::new(vec![3.0, 4.0], 1, 1, 2, "").unwrap();
        let p = bundle.forward(&img).unwrap();
        assert_eq!(p.logits, vec![3.0, 4.0]);
        assert_eq!(p.predicted_class, 1);
        assert!(p.conv_features.is_none());
        let again = bundle.forward(&img).unwrap();
        assert_eq!(
            p.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn perturbed_bias_is_decomposition_error() {
        let net = WithHead {
            encoder: IdentityEncoder,
            weights: Matrix::identity(2),
            bias: vec![0.0, 0.0],
        };
        let err = ModelBundle::from_parts(
            Box::new(net),
            manifest([1, 1, 2], 2, false),
            Matrix::identity(2),
            vec![0.0, 0.01],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Decomposition { .. }), "{err}");
    }

    #[test]
    fn convolutional_bundle_requires_conv_output() {
        let net = WithHead {
            encoder: IdentityEncoder,
            weights: Matrix::identity(2),
            bias: vec![0.0, 0.0],
        };
        let err = ModelBundle::from_parts(
            Box::new(net),
            manifest([1, 1, 2], 2, true),
            Matrix::identity(2),
            vec![0.0, 0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn wrong_input_shape_is_preprocessing_error() {
        let bundle = toy();
        let img = ImageTensor::new(vec![1.0; 3], 1, 1, 3, "").unwrap();
        assert!(matches!(bundle.forward(&img), Err(Error::Preprocessing(_))));
    }

    #[test]
    fn batch_matches_single_and_preserves_order() {
        let bundle = toy();
        let imgs: Vec<_> = (0..6)
            .map(|k| ImageTensor::new(vec![k as f32, 5.0 - k as f32], 1, 1, 2, "").unwrap())
            .collect();
        let batch = bundle.forward_batch(&imgs).unwrap();
        for (img, p) in imgs.iter().zip(&batch) {
            assert_eq!(&bundle.forward(img).unwrap(), p);
        }
        assert_eq!(bundle.forward_batch(&imgs[..1]).unwrap()[0], batch[0]);
        let mut shuffled = imgs.clone();
        shuffled.reverse();
        let rev = bundle.forward_batch(&shuffled).unwrap();
        for (k, p) in rev.iter().enumerate() {
            assert_eq!(p, &batch[imgs.len() - 1 - k]);
        }
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest([3, 4, 4], 2, true);
        m.mean = vec![0.0];
        assert!(m.validate().is_err());
        m.mean = vec![0.0; 3];
        m.std = vec![1.0; 3];
        m.validate().unwrap();
        m.std[1] = 0.0;
        assert!(m.validate().is_err());
    }
}

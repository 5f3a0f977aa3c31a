//! The fixed image generator `g` mapping extended-latent codes to faces.
//!
//! One architecture serves two backends: a progressive upsampling stack
//! of style-modulated convolutions where each layer consumes one
//! 512-dimensional style vector. The toy backend draws its parameters
//! from a seeded RNG for desk-scale runs; the pretrained-adapter backend
//! loads externally supplied weights from the named-tensor container
//! (see [`crate::checkpoint`]). Parameters are immutable after
//! construction: the generator is never trained, and inference uses no
//! stochastic noise, so `generate` is a pure function of the parameters
//! and the style code.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{load_container, save_container, TensorMap};
use crate::error::{Error, Result};
use crate::image::{Colorspace, ImageTensor};
use crate::latent::{StyleCode, STYLE_DIM};

const LEAKY_SLOPE: f64 = 0.2;

/// Image channels produced by the generator.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Toy,
    PretrainedAdapter,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Toy => write!(f, "toy"),
            BackendKind::PretrainedAdapter => write!(f, "pretrained-adapter"),
        }
    }
}

/// Declarative description of a generator instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub depth: usize,
    pub backend: BackendKind,
    /// Toy backend: seed for deterministic construction.
    #[serde(default)]
    pub seed: u64,
    /// Adapter backend: path to the weights container.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Toy backend: feature channels per layer.
    #[serde(default = "default_toy_channels")]
    pub channels: usize,
}

fn default_toy_channels() -> usize {
    8
}

impl GeneratorSpec {
    pub fn toy(depth: usize, seed: u64) -> Self {
        Self {
            depth,
            backend: BackendKind::Toy,
            seed,
            weights: None,
            channels: default_toy_channels(),
        }
    }

    pub fn pretrained(depth: usize, weights: PathBuf) -> Self {
        Self {
            depth,
            backend: BackendKind::PretrainedAdapter,
            seed: 0,
            weights: Some(weights),
            channels: default_toy_channels(),
        }
    }
}

/// Base (pre-upsampling) spatial resolution per backend. The toy stack
/// starts larger so a shallow depth still yields a usable image size.
fn base_resolution(backend: BackendKind) -> usize {
    match backend {
        BackendKind::Toy => 16,
        BackendKind::PretrainedAdapter => 4,
    }
}

/// Layers at even index >= 2 upsample before convolving, so resolution
/// doubles every second layer.
fn upsample_before(layer: usize) -> bool {
    layer >= 2 && layer % 2 == 0
}

fn upsample_count(depth: usize) -> usize {
    (2..depth).filter(|i| upsample_before(*i)).count()
}

/// Output resolution as a function of depth for a given backend.
/// Reference points for the adapter: depth 14 -> 256, depth 18 -> 1024.
pub fn output_resolution(backend: BackendKind, depth: usize) -> Result<usize> {
    check_depth_supported(backend, depth)?;
    Ok(base_resolution(backend) << upsample_count(depth))
}

fn check_depth_supported(backend: BackendKind, depth: usize) -> Result<usize> {
    let supported = match backend {
        BackendKind::Toy => depth >= 2 && depth <= 8 && depth % 2 == 0,
        BackendKind::PretrainedAdapter => depth >= 4 && depth <= 18 && depth % 2 == 0,
    };
    if !supported {
        return Err(Error::UnsupportedDepth {
            depth,
            backend: backend.to_string(),
        });
    }
    Ok(depth)
}

/// The fixed generator. Parameters never change after construction and
/// the struct is safe for concurrent read-only use.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    params: TensorMap,
    base_res: usize,
    out_res: usize,
    mean_latent: StyleCode,
}

/// Build a generator from its spec (toy construction is bit-identical
/// for equal spec + seed; the adapter validates file depth against the
/// spec).
pub fn build_generator(spec: &GeneratorSpec) -> Result<Generator> {
    check_depth_supported(spec.backend, spec.depth)?;
    match spec.backend {
        BackendKind::Toy => Ok(build_toy(spec)),
        BackendKind::PretrainedAdapter => {
            let path = spec
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("pretrained-adapter backend needs a weights path".into()))?;
            build_from_container(spec, path)
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

fn build_toy(spec: &GeneratorSpec) -> Generator {
    let depth = spec.depth;
    let ch = spec.channels;
    let base = base_resolution(BackendKind::Toy);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = TensorMap::new();
    // Draws happen in a fixed order so construction is reproducible.
    params.insert("const", uniform(&mut rng, &[base, base, ch], 0.5));
    let affine_bound = 1.5 / (STYLE_DIM as f64).sqrt();
    for i in 0..depth {
        let conv_bound = (3.0 / (9.0 * ch as f64)).sqrt();
        params.insert(
            format!("layer{i}.affine.w"),
            uniform(&mut rng, &[ch, STYLE_DIM], affine_bound),
        );
        params.insert(
            format!("layer{i}.affine.b"),
            ArrayD::from_elem(IxDyn(&[ch]), 1.0),
        );
        params.insert(
            format!("layer{i}.conv.w"),
            uniform(&mut rng, &[3, 3, ch, ch], conv_bound),
        );
        params.insert(format!("layer{i}.conv.b"), ArrayD::zeros(IxDyn(&[ch])));
    }
    let rgb_bound = (3.0 / ch as f64).sqrt();
    params.insert(
        "to_rgb.w",
        uniform(&mut rng, &[1, 1, ch, IMAGE_CHANNELS], rgb_bound),
    );
    params.insert("to_rgb.b", ArrayD::zeros(IxDyn(&[IMAGE_CHANNELS])));

    Generator {
        spec: spec.clone(),
        params,
        base_res: base,
        out_res: base << upsample_count(depth),
        mean_latent: StyleCode::zeros(depth),
    }
}

fn build_from_container(spec: &GeneratorSpec, path: &Path) -> Result<Generator> {
    let (meta, params) = load_container(path)?;
    let corrupt = |reason: String| Error::CorruptWeights {
        path: path.to_path_buf(),
        reason,
    };
    if meta.get("kind").and_then(|v| v.as_str()) != Some("style-generator") {
        return Err(corrupt("meta.kind is not 'style-generator'".into()));
    }
    let file_depth = meta
        .get("depth")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("meta.depth missing".into()))? as usize;
    if file_depth != spec.depth {
        return Err(Error::Config(format!(
            "generator depth mismatch: spec says {}, weights file says {file_depth}",
            spec.depth
        )));
    }
    let base_res = meta
        .get("base_res")
        .and_then(|v| v.as_u64())
        .unwrap_or(base_resolution(BackendKind::PretrainedAdapter) as u64)
        as usize;

    // Derive per-layer channel widths from tensor shapes and validate
    // the chain end to end.
    let cbase = params.require("const")?;
    if cbase.ndim() != 3 || cbase.shape()[0] != base_res || cbase.shape()[1] != base_res {
        return Err(corrupt(format!(
            "const tensor must be {base_res}x{base_res}xC, got {:?}",
            cbase.shape()
        )));
    }
    let mut layer_channels = vec![cbase.shape()[2]];
    for i in 0..spec.depth {
        let aw = params.require(&format!("layer{i}.affine.w"))?;
        let cw = params.require(&format!("layer{i}.conv.w"))?;
        let cin = *layer_channels.last().unwrap();
        if aw.shape() != [cin, STYLE_DIM] {
            return Err(corrupt(format!(
                "layer{i}.affine.w must be [{cin}, {STYLE_DIM}], got {:?}",
                aw.shape()
            )));
        }
        if cw.ndim() != 4 || cw.shape()[0] != cw.shape()[1] || cw.shape()[2] != cin {
            return Err(corrupt(format!(
                "layer{i}.conv.w inconsistent with {cin} input channels: {:?}",
                cw.shape()
            )));
        }
        params.require(&format!("layer{i}.affine.b"))?;
        params.require(&format!("layer{i}.conv.b"))?;
        layer_channels.push(cw.shape()[3]);
    }
    let rgb = params.require("to_rgb.w")?;
    if rgb.shape() != [1, 1, *layer_channels.last().unwrap(), IMAGE_CHANNELS] {
        return Err(corrupt(format!("to_rgb.w has wrong shape: {:?}", rgb.shape())));
    }

    let mean_latent = match params.get("mean_latent") {
        Some(t) => {
            if t.shape() != [spec.depth, STYLE_DIM] {
                return Err(corrupt("mean_latent has wrong shape".into()));
            }
            StyleCode::new(
                t.to_shape((spec.depth, STYLE_DIM))
                    .unwrap()
                    .to_owned()
                    .into_dimensionality()
                    .unwrap(),
            )?
        }
        None => StyleCode::zeros(spec.depth),
    };

    Ok(Generator {
        spec: spec.clone(),
        params,
        base_res,
        out_res: base_res << upsample_count(spec.depth),
        mean_latent,
    })
}

impl Generator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    pub fn output_resolution(&self) -> usize {
        self.out_res
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    /// Latent used to initialize inversion-style optimizations. The toy
    /// backend centers on zero styles; the adapter may ship one in its
    /// weights file.
    pub fn mean_latent(&self) -> StyleCode {
        self.mean_latent.clone()
    }

    /// Record the synthesis pass on a tape. `styles` holds one tracked
    /// or constant `[512]` node per layer; parameters always enter as
    /// constants, so no gradient can reach them.
    pub fn forward(&self, tape: &mut Tape, styles: &[Var]) -> Var {
        assert_eq!(styles.len(), self.depth(), "style count must match depth");
        let mut x = tape.constant(self.params.get("const").unwrap().clone());
        for i in 0..self.depth() {
            if upsample_before(i) {
                x = tape.upsample2(x);
            }
            let aw = tape.constant(self.params.get(&format!("layer{i}.affine.w")).unwrap().clone());
            let ab = tape.constant(self.params.get(&format!("layer{i}.affine.b")).unwrap().clone());
            let proj = tape.matvec(aw, styles[i]);
            let scale = tape.add(proj, ab);
            x = tape.mul_channel(x, scale);
            let cw = tape.constant(self.params.get(&format!("layer{i}.conv.w")).unwrap().clone());
            x = tape.conv2d(x, cw);
            let cb = tape.constant(self.params.get(&format!("layer{i}.conv.b")).unwrap().clone());
            x = tape.add_channel(x, cb);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        let rw = tape.constant(self.params.get("to_rgb.w").unwrap().clone());
        x = tape.conv2d(x, rw);
        let rb = tape.constant(self.params.get("to_rgb.b").unwrap().clone());
        x = tape.add_channel(x, rb);
        tape.tanh(x)
    }

    /// Generate an image from a style code (inference mode: pure,
    /// deterministic, output in `[-1, 1]`).
    pub fn generate(&self, w: &StyleCode) -> Result<ImageTensor> {
        w.check_depth(self.depth())?;
        let mut tape = Tape::new();
        let styles = style_constants(&mut tape, w);
        let out = self.forward(&mut tape, &styles);
        Ok(image_from_node(tape.value(out)))
    }

    /// Export the parameters in the adapter container format. This is
    /// the conversion target for externally trained weights and the
    /// fixture writer for tests.
    pub fn export_weights(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "style-generator",
            "depth": self.depth(),
            "base_res": self.base_res,
        });
        save_container(path, &meta, &self.params)
    }
}

/// Push each style row as a constant node.
pub fn style_constants(tape: &mut Tape, w: &StyleCode) -> Vec<Var> {
    (0..w.depth())
        .map(|i| {
            tape.constant(
                ArrayD::from_shape_vec(IxDyn(&[STYLE_DIM]), w.style(i).to_vec()).unwrap(),
            )
        })
        .collect()
}

/// Push each style row as a tracked leaf (for latent optimization).
pub fn style_leaves(tape: &mut Tape, w: &StyleCode) -> Vec<Var> {
    (0..w.depth())
        .map(|i| {
            tape.leaf(ArrayD::from_shape_vec(IxDyn(&[STYLE_DIM]), w.style(i).to_vec()).unwrap())
        })
        .collect()
}

/// Copy an `[H, W, 3]` tape value into an image tensor.
pub fn image_from_node(value: &ArrayD<f64>) -> ImageTensor {
    let shape = value.shape();
    let arr = Array3::from_shape_vec(
        (shape[0], shape[1], shape[2]),
        value.iter().copied().collect(),
    )
    .unwrap();
    ImageTensor::new(arr, Colorspace::Rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_code(depth: usize, seed: u64) -> StyleCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = StyleCode::zeros(depth);
        w.styles_mut().mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        w
    }

    #[test]
    fn resolution_is_a_function_of_depth_per_backend() {
        assert_eq!(
            output_resolution(BackendKind::PretrainedAdapter, 14).unwrap(),
            256
        );
        assert_eq!(
            output_resolution(BackendKind::PretrainedAdapter, 18).unwrap(),
            1024
        );
        assert_eq!(output_resolution(BackendKind::Toy, 4).unwrap(), 32);
        assert!(matches!(
            output_resolution(BackendKind::Toy, 5),
            Err(Error::UnsupportedDepth { .. })
        ));
        assert!(matches!(
            output_resolution(BackendKind::PretrainedAdapter, 20),
            Err(Error::UnsupportedDepth { .. })
        ));
    }

    #[test]
    fn toy_construction_is_deterministic() {
        let spec = GeneratorSpec::toy(4, 7);
        let a = build_generator(&spec).unwrap();
        let b = build_generator(&spec).unwrap();
        assert!(a.params().bitwise_eq(b.params()));
        let c = build_generator(&GeneratorSpec::toy(4, 8)).unwrap();
        assert!(!a.params().bitwise_eq(c.params()));
    }

    #[test]
    fn generate_is_deterministic_and_in_range() {
        let g = build_generator(&GeneratorSpec::toy(4, 7)).unwrap();
        let w = random_code(4, 3);
        let img1 = g.generate(&w).unwrap();
        let img2 = g.generate(&w).unwrap();
        assert_eq!(img1, img2);
        assert_eq!(img1.shape(), (32, 32, 3));
        assert!(img1.in_range());
    }

    #[test]
    fn generate_rejects_depth_mismatch() {
        let g = build_generator(&GeneratorSpec::toy(4, 7)).unwrap();
        let w = StyleCode::zeros(6);
        assert!(matches!(
            g.generate(&w),
            Err(Error::DepthMismatch { .. })
        ));
    }

    #[test]
    fn adapter_round_trips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ntc");
        let toy = build_generator(&GeneratorSpec::toy(4, 21)).unwrap();
        toy.export_weights(&path).unwrap();

        let spec = GeneratorSpec::pretrained(4, path.clone());
        let loaded = build_generator(&spec).unwrap();
        assert!(loaded.params().bitwise_eq(toy.params()));
        let w = random_code(4, 5);
        assert_eq!(loaded.generate(&w).unwrap(), toy.generate(&w).unwrap());

        // Depth mismatch between spec and file is rejected.
        let bad = GeneratorSpec::pretrained(6, path);
        assert!(build_generator(&bad).is_err());
    }

    #[test]
    fn adapter_missing_and_corrupt_weights() {
        let dir = tempfile::tempdir().unwrap();
        let missing = GeneratorSpec::pretrained(14, dir.path().join("none.ntc"));
        assert!(matches!(
            build_generator(&missing),
            Err(Error::MissingWeights(_))
        ));
        let bad_path = dir.path().join("bad.ntc");
        std::fs::write(&bad_path, b"garbage").unwrap();
        let bad = GeneratorSpec::pretrained(14, bad_path);
        assert!(matches!(
            build_generator(&bad),
            Err(Error::CorruptWeights { .. })
        ));
    }

    #[test]
    fn style_gradient_matches_finite_differences() {
        let g = build_generator(&GeneratorSpec::toy(4, 7)).unwrap();
        let w0 = random_code(4, 9);

        let eval = |w: &StyleCode| -> f64 {
            let mut tape = Tape::new();
            let styles = style_constants(&mut tape, w);
            let img = g.forward(&mut tape, &styles);
            let ss = tape.sum_squares(img);
            tape.scalar_value(ss)
        };

        let mut tape = Tape::new();
        let styles = style_leaves(&mut tape, &w0);
        let img = g.forward(&mut tape, &styles);
        let loss = tape.sum_squares(img);
        let grads = tape.backward(loss);

        // Spot-check a spread of coordinates against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut nonzero = 0usize;
        for _ in 0..12 {
            let layer = rng.gen_range(0..4);
            let dim = rng.gen_range(0..STYLE_DIM);
            let h = 1e-5;
            let mut plus = w0.clone();
            plus.styles_mut()[(layer, dim)] += h;
            let mut minus = w0.clone();
            minus.styles_mut()[(layer, dim)] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads.get(styles[layer]).unwrap().as_slice().unwrap()[dim];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            assert!(
                (fd - ad).abs() / denom < 1e-3,
                "layer {layer} dim {dim}: fd {fd} vs ad {ad}"
            );
            if ad.abs() > 1e-12 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 0, "gradient must be nonzero for generic styles");
    }
}
